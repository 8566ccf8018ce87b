//! `ssmb` — dataset generation, training, evaluation, and routing
//! inspection for switch-style modulation models.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use ssmb_core::backbone::{BackboneConfig, ModelState};
use ssmb_core::eval::{compute_report, score_protocol};
use ssmb_core::ssmb::GateMode;
use ssmb_core::synth::{generate_dataset, LoadedDataset, Modality};
use ssmb_core::train::{inspect_routing, pretrain_teacher, train_student, TrainConfig};

#[derive(Parser)]
#[command(name = "ssmb", version, about = "Modality-agnostic embedding alignment with switch style modulation blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-modality benchmark.
    GenData {
        /// Output directory for images and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Number of identities (70/30 train/dev split).
        #[arg(long)]
        identities: usize,
        /// Samples per identity per modality.
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        seed: u64,
        /// Comma-separated modality list; must include vis.
        #[arg(long, default_value = "vis,nir,thermal,sketch,lowres", value_delimiter = ',')]
        modalities: Vec<String>,
    },
    /// Pretrain the teacher backbone on VIS training images.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train modulation blocks on a frozen teacher.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint (from `pretrain`).
        #[arg(long)]
        teacher: PathBuf,
        /// Output student checkpoint; a run log lands beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        experts: usize,
        /// `scaled` or `value-preserving`.
        #[arg(long, default_value = "scaled", value_parser = parse_gate_mode)]
        gate_mode: GateMode,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 48)]
        batch: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Evaluate a checkpoint on the dev protocol (no modality labels).
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Metrics report output path.
        #[arg(long)]
        report: PathBuf,
        /// Optional flat CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-block, per-modality winning-expert histograms over dev probes.
    Routes {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_gate_mode(s: &str) -> Result<GateMode, String> {
    GateMode::parse(s).ok_or_else(|| format!("unknown gate mode `{s}` (expected `scaled` or `value-preserving`)"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData { out, identities, samples, seed, modalities } => {
            let modalities: Vec<Modality> = modalities
                .iter()
                .map(|s| Modality::parse(s.trim()))
                .collect::<Result<_, _>>()
                .context("parsing --modalities")?;
            let manifest = generate_dataset(seed, identities, samples, &out, &modalities)
                .context("generating dataset")?;
            println!(
                "wrote {} samples for {} identities ({} train / {} dev) to {}",
                manifest.records.len(),
                identities,
                manifest.train_identities().len(),
                manifest.dev_identities().len(),
                out.display()
            );
        }
        Command::Pretrain { data, out, epochs, lr, seed } => {
            let dataset = LoadedDataset::load(&data).context("loading dataset")?;
            let outcome = pretrain_teacher::<f32>(BackboneConfig::default(), &dataset, epochs, lr, seed)
                .context("pretraining teacher")?;
            outcome.model.save(&out).context("saving checkpoint")?;
            println!(
                "teacher pretrained: train accuracy {:.2}%, final loss {:.6}, saved to {}",
                outcome.train_accuracy * 100.0,
                outcome.final_loss,
                out.display()
            );
        }
        Command::Train {
            data,
            teacher,
            out,
            experts,
            gate_mode,
            gamma,
            alpha,
            margin,
            lr,
            epochs,
            batch,
            seed,
        } => {
            let dataset = LoadedDataset::load(&data).context("loading dataset")?;
            let teacher_model: ModelState<f32> =
                ModelState::load(&teacher).context("loading teacher checkpoint")?;
            let config = TrainConfig {
                lr,
                epochs,
                batch_size: batch,
                gamma,
                alpha,
                margin,
                num_experts: experts,
                gate_mode,
                seed,
                ..TrainConfig::default()
            };
            let (student, log) = train_student(&teacher_model, &dataset, &config)
                .context("training student")?;
            student.save(&out).context("saving student checkpoint")?;
            let log_path = out.with_extension("runlog");
            log.write(&log_path).context("writing run log")?;
            if let Some(report) = &log.final_report {
                println!("student saved to {}; run log at {}", out.display(), log_path.display());
                println!("final dev metrics (cross-modal aggregate):");
                for line in report.render_text().lines().take(5) {
                    println!("  {line}");
                }
            }
        }
        Command::Eval { data, model, report, csv } => {
            let dataset = LoadedDataset::load(&data).context("loading dataset")?;
            let model: ModelState<f32> = ModelState::load(&model).context("loading model checkpoint")?;
            let protocol = score_protocol(&model, &dataset).context("scoring protocol")?;
            let metrics = compute_report(&protocol).context("computing metrics")?;
            metrics.write(&report, csv.as_deref()).context("writing report")?;
            print!("{}", metrics.render_text());
        }
        Command::Routes { data, model, out } => {
            let dataset = LoadedDataset::load(&data).context("loading dataset")?;
            let model: ModelState<f32> = ModelState::load(&model).context("loading model checkpoint")?;
            let table = inspect_routing(&model, &dataset).context("inspecting routing")?;
            table.write(&out).context("writing route table")?;
            println!("route histograms written to {}", out.display());
        }
    }
    Ok(())
}
