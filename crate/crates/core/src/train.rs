//! Training loops: classification pretraining for the teacher and the
//! pair-based adaptation of the student's modulation blocks.
//!
//! Student training follows the recipe the defaults encode: Adam at 1e-4,
//! 50 epochs of batch-48 pair batches, loss
//! `(1-gamma) L_C + gamma L_TSI + alpha L_b` with gamma 0.5, alpha 0.01,
//! margin 0. Only the modulation-block parameters move; every backbone
//! parameter stays frozen. One epoch makes one pass worth of samples:
//! `ceil(train_record_count / batch_size)` steps.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{images_to_batch, mix_seed, BackboneConfig, ModelState, NUM_STAGES};
use crate::error::{Error, Result};
use crate::eval::{compute_report, score_protocol, MetricsReport};
use crate::losses::{total_loss, LossConfig};
use crate::optim::{Adam, AdamConfig};
use crate::ssmb::{collect_routing_stats, GateMode, RoutingStats};
use crate::synth::{sample_pairs, LoadedDataset, Modality, Split};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Scalar;

/// Student-training hyperparameters. The defaults are the pinned recipe.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub margin: f64,
    pub num_experts: usize,
    pub gate_mode: GateMode,
    pub genuine_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 50,
            batch_size: 48,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            gamma: 0.5,
            alpha: 0.01,
            margin: 0.0,
            num_experts: 4,
            gate_mode: GateMode::GateScaled,
            genuine_fraction: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_contrastive: f64,
    pub l_tsi: f64,
    pub l_balance: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    /// Winner counts per block per expert over the epoch (both pair sides).
    pub routes: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub final_report: Option<MetricsReport>,
}

impl RunLog {
    pub fn render_text(&self) -> String {
        let mut out = String::from("#ssmb-runlog-v1\n");
        for s in &self.steps {
            out.push_str(&format!(
                "step epoch={} step={} l_c={:.6} l_tsi={:.6} l_b={:.6} total={:.6}\n",
                s.epoch, s.step, s.l_contrastive, s.l_tsi, s.l_balance, s.total
            ));
        }
        for e in &self.epochs {
            out.push_str(&format!("epoch epoch={} mean_total={:.6}", e.epoch, e.mean_total));
            for (b, counts) in e.routes.iter().enumerate() {
                let joined: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
                out.push_str(&format!(" routes{b}=[{}]", joined.join(",")));
            }
            out.push('\n');
        }
        if let Some(report) = &self.final_report {
            out.push_str("final_metrics:\n");
            for line in report.render_text().lines() {
                out.push_str("  ");
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render_text())?;
        Ok(())
    }
}

/// Outcome of teacher pretraining.
pub struct Pretrained<T> {
    /// Backbone with the classification head removed.
    pub model: ModelState<T>,
    /// Top-1 accuracy over the training images at the final parameters.
    pub train_accuracy: f64,
    /// Mean cross-entropy over the final epoch.
    pub final_loss: f64,
}

/// Softmax cross-entropy pretraining on the VIS training split.
pub fn pretrain_teacher<T: Scalar>(
    mut config: BackboneConfig,
    data: &LoadedDataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Pretrained<T>> {
    let samples = data.train_vis_samples();
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no VIS training images to pretrain on".into()));
    }
    let mut class_ids: Vec<u32> = samples.iter().map(|&(_, id)| id).collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    let class_of: BTreeMap<u32, usize> =
        class_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();

    config.num_pretrain_classes = class_ids.len();
    let mut model: ModelState<T> = ModelState::build(config, seed)?;
    let mut adam: Adam<T> = Adam::new(AdamConfig::with_lr(lr));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7EAC4E8));
    let batch_size = 48.min(samples.len());

    let mut final_loss = 0.0;
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let imgs: Vec<&Tensor<f64>> = chunk.iter().map(|&k| &data.images[samples[k].0]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&k| class_of[&samples[k].1]).collect();
            let batch = images_to_batch::<T>(&imgs)?;

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let images = tape.leaf(batch);
            let logits = model.forward_logits(&mut tape, &bound, images)?;
            let loss = cross_entropy(&mut tape, logits, &labels, class_ids.len())?;
            epoch_loss += tape.value(loss).item().to_f64().expect("finite loss");
            batches += 1;
            tape.backward(loss)?;

            let mut grads = BTreeMap::new();
            for name in model.trainable_names() {
                if let Some(g) = tape.grad(bound[&name]) {
                    grads.insert(name, g.clone());
                }
            }
            adam.step(&mut model, &grads)?;
        }
        final_loss = epoch_loss / batches.max(1) as f64;
    }

    // Final training accuracy with the finished parameters.
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let imgs: Vec<&Tensor<f64>> = chunk.iter().map(|&(i, _)| &data.images[i]).collect();
        let batch = images_to_batch::<T>(&imgs)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let images = tape.leaf(batch);
        let logits = model.forward_logits(&mut tape, &bound, images)?;
        let lv = tape.value(logits);
        for (r, &(_, id)) in chunk.iter().enumerate() {
            let row = lv.row(r);
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            if best == class_of[&id] {
                correct += 1;
            }
        }
    }
    let train_accuracy = correct as f64 / samples.len() as f64;

    model.remove_head();
    Ok(Pretrained { model, train_accuracy, final_loss })
}

/// Numerically stable softmax cross-entropy against integer class labels.
fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: crate::tape::Var,
    labels: &[usize],
    num_classes: usize,
) -> Result<crate::tape::Var> {
    let batch = labels.len();
    let row_max = tape.reduce_max(logits, &[1])?;
    let row_max_col = tape.reshape(row_max, vec![batch, 1])?;
    let shifted = tape.sub(logits, row_max_col)?;
    let exps = tape.exp(shifted);
    let sums = tape.reduce_sum(exps, &[1])?;
    let log_sums = tape.log(sums)?;
    let lse = tape.add(log_sums, row_max)?; // [batch]

    let mut onehot = vec![T::zero(); batch * num_classes];
    for (r, &c) in labels.iter().enumerate() {
        onehot[r * num_classes + c] = T::one();
    }
    let mask = tape.leaf(Tensor::from_vec(vec![batch, num_classes], onehot)?);
    let picked = tape.mul(logits, mask)?;
    let true_logit = tape.reduce_sum(picked, &[1])?;
    let per_sample = tape.sub(lse, true_logit)?;
    tape.reduce_mean(per_sample, &[0])
}

/// One pass worth of training samples per epoch.
pub fn steps_per_epoch(data: &LoadedDataset, batch_size: usize) -> usize {
    let train = data.indices_of(Split::Train).len();
    train.div_ceil(batch_size).max(1)
}

/// Adapts freshly initialized modulation blocks on top of a frozen teacher.
///
/// Per step: draw a pair batch, run both sides through the student, run the
/// source side through the teacher (cached, no gradient), combine the losses,
/// and apply Adam to the block parameters only.
pub fn train_student<T: Scalar>(
    teacher: &ModelState<T>,
    data: &LoadedDataset,
    config: &TrainConfig,
) -> Result<(ModelState<T>, RunLog)> {
    if teacher.has_ssmb() {
        return Err(Error::shape("train", "teacher checkpoint already contains modulation blocks"));
    }
    let mut student = teacher.clone();
    student.remove_head();
    student.attach_ssmb(config.num_experts, config.gate_mode, mix_seed(config.seed, 0x55B10C5));

    let loss_cfg = LossConfig { margin: config.margin, gamma: config.gamma, alpha: config.alpha };
    loss_cfg.validate()?;
    let mut adam: Adam<T> = Adam::new(AdamConfig {
        lr: config.lr,
        beta1: config.beta1,
        beta2: config.beta2,
        epsilon: config.adam_epsilon,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x0BA7C4));
    let steps = steps_per_epoch(data, config.batch_size);
    let trainable = student.trainable_names();

    let mut log = RunLog::default();
    for epoch in 1..=config.epochs {
        // Teacher embeddings are frozen; cache them per unique source image
        // within the epoch.
        let mut teacher_cache: HashMap<usize, Vec<T>> = HashMap::new();
        let mut route_counts = vec![vec![0u64; config.num_experts]; NUM_STAGES];
        let mut epoch_total = 0.0;
        for step in 1..=steps {
            let batch = sample_pairs::<T, _>(data, config.batch_size, config.genuine_fraction, &mut rng)?;

            // Fill the cache for unseen source images in one batched pass.
            let mut missing: Vec<usize> = batch
                .source_keys
                .iter()
                .copied()
                .filter(|k| !teacher_cache.contains_key(k))
                .collect();
            missing.sort_unstable();
            missing.dedup();
            if !missing.is_empty() {
                let imgs: Vec<&Tensor<f64>> = missing.iter().map(|&k| &data.images[k]).collect();
                let emb = teacher.forward_embed(&images_to_batch::<T>(&imgs)?)?;
                let dim = emb.shape()[1];
                for (r, &k) in missing.iter().enumerate() {
                    teacher_cache.insert(k, emb.row(r)[..dim].to_vec());
                }
            }
            let dim = student.config.embedding_dim;
            let mut teacher_rows = Vec::with_capacity(batch.source_keys.len() * dim);
            for k in &batch.source_keys {
                teacher_rows.extend_from_slice(&teacher_cache[k]);
            }
            let teacher_emb = Tensor::from_vec(vec![batch.source_keys.len(), dim], teacher_rows)?;

            let mut tape = Tape::new();
            let bound = student.bind(&mut tape, true);
            let src = tape.leaf(batch.source.clone());
            let tgt = tape.leaf(batch.target.clone());
            let src_pass = student.forward_bound(&mut tape, &bound, src)?;
            let tgt_pass = student.forward_bound(&mut tape, &bound, tgt)?;
            let teacher_var = tape.leaf(teacher_emb);

            // Per-block routing statistics cover every sample routed this
            // step: both pair sides.
            let mut stats: Vec<RoutingStats> = Vec::with_capacity(NUM_STAGES);
            for blk in 0..NUM_STAGES {
                let s = &src_pass.routing[blk];
                let t = &tgt_pass.routing[blk];
                let mut winners = s.winners.clone();
                winners.extend_from_slice(&t.winners);
                let probs = tape.concat(&[s.probs, t.probs], 0)?;
                let mut st = collect_routing_stats(&winners, tape.value(probs), config.num_experts);
                st.prob_rows = Some(probs);
                for &w in &winners {
                    route_counts[blk][w] += 1;
                }
                stats.push(st);
            }

            let losses = total_loss(
                &mut tape,
                src_pass.embedding,
                tgt_pass.embedding,
                teacher_var,
                &batch.labels,
                &stats,
                &loss_cfg,
            )?;
            tape.backward(losses.total)?;

            let mut grads = BTreeMap::new();
            for name in &trainable {
                if let Some(g) = tape.grad(bound[name]) {
                    grads.insert(name.clone(), g.clone());
                }
            }
            adam.step(&mut student, &grads)?;

            let value = |v| tape.value(v).item().to_f64().expect("finite loss");
            let entry = StepLog {
                epoch,
                step,
                l_contrastive: value(losses.contrastive),
                l_tsi: value(losses.tsi),
                l_balance: value(losses.balance),
                total: value(losses.total),
            };
            epoch_total += entry.total;
            log.steps.push(entry);
        }
        log.epochs.push(EpochLog { epoch, mean_total: epoch_total / steps as f64, routes: route_counts });
    }

    let protocol = score_protocol(&student, data)?;
    log.final_report = Some(compute_report(&protocol)?);
    Ok((student, log))
}

/// Winning-expert histogram per (block, probe modality) over the dev probes.
pub struct RouteTable {
    /// `per_block[slot][modality][expert] = count`.
    pub per_block: Vec<BTreeMap<Modality, Vec<u64>>>,
}

impl RouteTable {
    pub fn render_text(&self) -> String {
        let mut out = String::from("#ssmb-routes-v1\n");
        for (block, table) in self.per_block.iter().enumerate() {
            for (m, counts) in table {
                for (expert, &count) in counts.iter().enumerate() {
                    out.push_str(&format!(
                        "block={block} modality={} expert={expert} count={count}\n",
                        m.as_str()
                    ));
                }
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render_text())?;
        Ok(())
    }
}

/// Runs every dev probe through the model and tallies winning experts.
pub fn inspect_routing<T: Scalar>(model: &ModelState<T>, data: &LoadedDataset) -> Result<RouteTable> {
    let att = model
        .ssmb_attachment()
        .ok_or_else(|| Error::shape("routes", "model has no modulation blocks to inspect"))?;
    let probe_idx = data.indices_of(Split::DevProbe);
    if probe_idx.is_empty() {
        return Err(Error::MissingSplit("dev-probe"));
    }
    let mut per_block: Vec<BTreeMap<Modality, Vec<u64>>> = vec![BTreeMap::new(); NUM_STAGES];
    for chunk in probe_idx.chunks(64) {
        let imgs: Vec<&Tensor<f64>> = chunk.iter().map(|&i| &data.images[i]).collect();
        let batch = images_to_batch::<T>(&imgs)?;
        let (_, winners, _) = model.forward_traced(&batch)?;
        for (blk, block_winners) in winners.iter().enumerate() {
            for (r, &w) in block_winners.iter().enumerate() {
                let m = data.record(chunk[r]).modality;
                let counts =
                    per_block[blk].entry(m).or_insert_with(|| vec![0u64; att.num_experts]);
                counts[w] += 1;
            }
        }
    }
    Ok(RouteTable { per_block })
}
