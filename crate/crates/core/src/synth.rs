//! Deterministic multi-modality identity benchmark.
//!
//! Identities are procedural face-like rasters (ellipse head, two eyes, a
//! mouth curve) controlled by a 12-value geometry vector derived from the
//! generator seed. Each sample renders the identity with a small jittered
//! variation, then maps it into one of five modalities:
//!
//! * `vis` — unchanged
//! * `nir` — gamma 0.5 followed by a full-range contrast stretch
//! * `thermal` — two 3x3 box blurs, then intensity inversion
//! * `sketch` — Sobel gradient magnitude, normalized to `[0, 1]`
//! * `lowres` — 4x box downsample, nearest-neighbor upsample
//!
//! Everything (parameters, rasters, file bytes, manifest) is a pure function
//! of the generator seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{images_to_batch, mix_seed};
use crate::error::{Error, Result};
use crate::losses::PairBatch;
use crate::tensor::Tensor;
use crate::Scalar;

pub const IMAGE_SIZE: usize = 32;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Vis,
    Nir,
    Thermal,
    Sketch,
    Lowres,
}

impl Modality {
    pub const ALL: [Modality; 5] =
        [Modality::Vis, Modality::Nir, Modality::Thermal, Modality::Sketch, Modality::Lowres];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vis => "vis",
            Modality::Nir => "nir",
            Modality::Thermal => "thermal",
            Modality::Sketch => "sketch",
            Modality::Lowres => "lowres",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vis" => Ok(Modality::Vis),
            "nir" => Ok(Modality::Nir),
            "thermal" => Ok(Modality::Thermal),
            "sketch" => Ok(Modality::Sketch),
            "lowres" => Ok(Modality::Lowres),
            other => Err(Error::UnknownModality(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    DevEnroll,
    DevProbe,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::DevEnroll => "dev-enroll",
            Split::DevProbe => "dev-probe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev-enroll" => Some(Split::DevEnroll),
            "dev-probe" => Some(Split::DevProbe),
            _ => None,
        }
    }
}

/// Geometry of one procedural identity: 12 values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct IdentityParams {
    pub id: u32,
    pub geometry: [f64; 12],
}

/// One inventory line: where the file is, who it shows, how it was captured.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub path: String,
    pub identity: u32,
    pub modality: Modality,
    pub split: Split,
    pub variation_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub modalities: Vec<Modality>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn target_modalities(&self) -> Vec<Modality> {
        self.modalities.iter().copied().filter(|&m| m != Modality::Vis).collect()
    }

    pub fn train_identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn dev_identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .records
            .iter()
            .filter(|r| r.split != Split::Train)
            .map(|r| r.identity)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn render_text(&self) -> String {
        let mut out = format!("#ssmb-manifest-v1 seed={}\n", self.seed);
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.path,
                r.identity,
                r.modality.as_str(),
                r.split.as_str(),
                r.variation_seed
            ));
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::ManifestParse { line: 1, detail: "empty manifest".into() })?;
        let seed = header
            .strip_prefix("#ssmb-manifest-v1 seed=")
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| Error::ManifestParse { line: 1, detail: format!("bad header `{header}`") })?;
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::ManifestParse { line: i + 1, detail: format!("expected 5 fields, got {}", parts.len()) });
            }
            let identity = parts[1]
                .parse::<u32>()
                .map_err(|e| Error::ManifestParse { line: i + 1, detail: format!("identity: {e}") })?;
            let modality = Modality::parse(parts[2])
                .map_err(|_| Error::ManifestParse { line: i + 1, detail: format!("modality `{}`", parts[2]) })?;
            let split = Split::parse(parts[3])
                .ok_or_else(|| Error::ManifestParse { line: i + 1, detail: format!("split `{}`", parts[3]) })?;
            let variation_seed = parts[4]
                .parse::<u64>()
                .map_err(|e| Error::ManifestParse { line: i + 1, detail: format!("variation seed: {e}") })?;
            records.push(SampleRecord { path: parts[0].to_string(), identity, modality, split, variation_seed });
        }
        let mut modalities: Vec<Modality> = Modality::ALL
            .iter()
            .copied()
            .filter(|m| records.iter().any(|r| r.modality == *m))
            .collect();
        if modalities.is_empty() {
            modalities = Modality::ALL.to_vec();
        }
        Ok(DatasetManifest { seed, modalities, records })
    }
}

/// Deterministic geometry vector for one identity.
pub fn identity_params(seed: u64, id: u32) -> IdentityParams {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1D_0000_0000 | id as u64));
    let mut geometry = [0.0; 12];
    for g in &mut geometry {
        *g = rng.random_range(0.0..1.0);
    }
    IdentityParams { id, geometry }
}

/// Rasterizes one identity with a jittered variation: translation up to
/// 2 px and brightness up to ±0.1, both drawn from `variation_seed`.
pub fn render_identity(params: &IdentityParams, variation_seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(variation_seed, 0x7A_0000_0000 | params.id as u64));
    let jitter_x = rng.random_range(-2.0..2.0);
    let jitter_y = rng.random_range(-2.0..2.0);
    let brightness = rng.random_range(-0.1..0.1);

    let g = &params.geometry;
    let size = IMAGE_SIZE as f64;
    let cx = size / 2.0 + (g[0] - 0.5) * 4.0 + jitter_x;
    let cy = size / 2.0 + (g[1] - 0.5) * 4.0 + jitter_y;
    let axis_a = 8.0 + g[2] * 5.0; // horizontal semi-axis
    let axis_b = 10.0 + g[3] * 4.0; // vertical semi-axis
    let eye_dx = 3.0 + g[4] * 3.0;
    let eye_dy = 2.0 + g[5] * 3.0;
    let eye_r_left = 1.2 + g[6] * 1.4;
    let eye_r_right = 1.2 + g[7] * 1.4;
    let mouth_curve = (g[8] - 0.5) * 6.0;
    let mouth_w = 2.5 + g[9] * 3.5;
    let base = 0.45 + g[10] * 0.35;
    let dark = 0.25 + g[11] * 0.2;

    let mut img = vec![0.08f64; IMAGE_SIZE * IMAGE_SIZE];
    let paint = |img: &mut Vec<f64>, sd: &dyn Fn(f64, f64) -> f64, value: f64| {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let d = sd(x as f64 + 0.5, y as f64 + 0.5);
                let cover = (0.5 - d).clamp(0.0, 1.0); // 1-px anti-aliased edge
                if cover > 0.0 {
                    let idx = y * IMAGE_SIZE + x;
                    img[idx] = img[idx] * (1.0 - cover) + value * cover;
                }
            }
        }
    };

    // head
    let ellipse = move |x: f64, y: f64| {
        let nx = (x - cx) / axis_a;
        let ny = (y - cy) / axis_b;
        ((nx * nx + ny * ny).sqrt() - 1.0) * axis_a.min(axis_b)
    };
    paint(&mut img, &ellipse, base);

    // eyes
    let eye = move |ex: f64, ey: f64, r: f64| {
        move |x: f64, y: f64| ((x - ex).powi(2) + (y - ey).powi(2)).sqrt() - r
    };
    paint(&mut img, &eye(cx - eye_dx, cy - eye_dy, eye_r_left), (base - dark).max(0.0));
    paint(&mut img, &eye(cx + eye_dx, cy - eye_dy, eye_r_right), (base - dark).max(0.0));

    // mouth: thick quadratic arc below center
    let mouth_y = cy + 0.45 * axis_b;
    let mouth = move |x: f64, y: f64| {
        let t = ((x - cx) / mouth_w).clamp(-1.0, 1.0);
        let curve_y = mouth_y + mouth_curve * t * t;
        let along = (x - cx).abs() - mouth_w;
        let dist_y = (y - curve_y).abs() - 0.8;
        dist_y.max(along)
    };
    paint(&mut img, &mouth, (base - dark * 0.8).max(0.0));

    let data: Vec<f64> = img.into_iter().map(|v| (v + brightness).clamp(0.0, 1.0)).collect();
    Tensor::from_vec(vec![1, IMAGE_SIZE, IMAGE_SIZE], data).expect("fixed raster size")
}

/// Maps a source-domain raster into the requested modality. Every transform
/// is deterministic and keeps values in `[0, 1]`.
pub fn apply_modality(image: &Tensor<f64>, modality: Modality) -> Tensor<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let px = image.data();
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        px[yc * w + xc]
    };
    let data: Vec<f64> = match modality {
        Modality::Vis => px.to_vec(),
        Modality::Nir => {
            let gamma: Vec<f64> = px.iter().map(|&v| v.sqrt()).collect();
            let lo = gamma.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = gamma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-12 {
                gamma
            } else {
                gamma.iter().map(|&v| (v - lo) / (hi - lo)).collect()
            }
        }
        Modality::Thermal => {
            let blur = |src: &dyn Fn(isize, isize) -> f64| -> Vec<f64> {
                let mut out = vec![0.0; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                acc += src(x as isize + dx, y as isize + dy);
                            }
                        }
                        out[y * w + x] = acc / 9.0;
                    }
                }
                out
            };
            let once = blur(&at);
            let at2 = |x: isize, y: isize| -> f64 {
                let xc = x.clamp(0, w as isize - 1) as usize;
                let yc = y.clamp(0, h as isize - 1) as usize;
                once[yc * w + xc]
            };
            blur(&at2).into_iter().map(|v| 1.0 - v).collect()
        }
        Modality::Sketch => {
            let mut mag = vec![0.0; h * w];
            let mut peak = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    let (xi, yi) = (x as isize, y as isize);
                    let gx = at(xi + 1, yi - 1) + 2.0 * at(xi + 1, yi) + at(xi + 1, yi + 1)
                        - at(xi - 1, yi - 1)
                        - 2.0 * at(xi - 1, yi)
                        - at(xi - 1, yi + 1);
                    let gy = at(xi - 1, yi + 1) + 2.0 * at(xi, yi + 1) + at(xi + 1, yi + 1)
                        - at(xi - 1, yi - 1)
                        - 2.0 * at(xi, yi - 1)
                        - at(xi + 1, yi - 1);
                    let m = (gx * gx + gy * gy).sqrt();
                    mag[y * w + x] = m;
                    peak = peak.max(m);
                }
            }
            if peak > 0.0 {
                for m in &mut mag {
                    *m /= peak;
                }
            }
            mag
        }
        Modality::Lowres => {
            let mut out = vec![0.0; h * w];
            for by in 0..h / 4 {
                for bx in 0..w / 4 {
                    let mut acc = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            acc += px[(by * 4 + dy) * w + bx * 4 + dx];
                        }
                    }
                    let mean = acc / 16.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            out[(by * 4 + dy) * w + bx * 4 + dx] = mean;
                        }
                    }
                }
            }
            out
        }
    };
    Tensor::from_vec(vec![1, h, w], data).expect("same raster size")
}

// ── PGM files ───────────────────────────────────────────────────────────

/// Binary PGM (`P5`, maxval 255); pixel byte = round(value * 255).
pub fn write_pgm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path)?;
    let err = |d: &str| Error::ImageFormat(format!("{}: {d}", path.display()));
    if !bytes.starts_with(b"P5") {
        return Err(err("missing P5 magic"));
    }
    // header: three whitespace-separated fields after the magic
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| err("bad header field"))?;
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err("unsupported maxval"));
    }
    if bytes.len() < pos + w * h {
        return Err(err("pixel data truncated"));
    }
    let data: Vec<f64> = bytes[pos..pos + w * h].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(vec![1, h, w], data)
}

// ── Generation ──────────────────────────────────────────────────────────

/// Samples per dev identity for enrollment and for each probe modality.
fn salt(split: Split, modality: Modality, sample: usize) -> u64 {
    let s = match split {
        Split::Train => 1u64,
        Split::DevEnroll => 2,
        Split::DevProbe => 3,
    };
    let m = Modality::ALL.iter().position(|&x| x == modality).unwrap() as u64;
    (s << 40) | (m << 32) | sample as u64
}

/// Generates the full benchmark under `out_dir`: a 70/30 identity split
/// (floor for train), per-modality training samples, VIS-only enrollment,
/// per-modality dev probes, PGM files, and the manifest.
pub fn generate_dataset(
    seed: u64,
    num_identities: usize,
    samples_per_id: usize,
    out_dir: &Path,
    modalities: &[Modality],
) -> Result<DatasetManifest> {
    if num_identities < 4 {
        return Err(Error::TooFewIdentities { min: 4, got: num_identities });
    }
    if !modalities.contains(&Modality::Vis) || modalities.len() < 2 {
        return Err(Error::EmptyDataset("modalities must include vis and at least one target".into()));
    }
    let mut modalities: Vec<Modality> =
        Modality::ALL.iter().copied().filter(|m| modalities.contains(m)).collect();
    modalities.dedup();

    let train_count = num_identities * 7 / 10;
    let mut records = Vec::new();
    for id in 0..num_identities as u32 {
        let is_train = (id as usize) < train_count;
        let params = identity_params(seed, id);
        if is_train {
            for &m in &modalities {
                for k in 0..samples_per_id {
                    let vseed = mix_seed(seed, (id as u64) << 44 | salt(Split::Train, m, k));
                    let path = format!("images/id{id:04}_train_{}_{k:02}.pgm", m.as_str());
                    records.push((params.clone(), SampleRecord { path, identity: id, modality: m, split: Split::Train, variation_seed: vseed }));
                }
            }
        } else {
            for k in 0..samples_per_id {
                let vseed = mix_seed(seed, (id as u64) << 44 | salt(Split::DevEnroll, Modality::Vis, k));
                let path = format!("images/id{id:04}_enroll_vis_{k:02}.pgm");
                records.push((params.clone(), SampleRecord { path, identity: id, modality: Modality::Vis, split: Split::DevEnroll, variation_seed: vseed }));
            }
            for &m in &modalities {
                for k in 0..samples_per_id {
                    let vseed = mix_seed(seed, (id as u64) << 44 | salt(Split::DevProbe, m, k));
                    let path = format!("images/id{id:04}_probe_{}_{k:02}.pgm", m.as_str());
                    records.push((params.clone(), SampleRecord { path, identity: id, modality: m, split: Split::DevProbe, variation_seed: vseed }));
                }
            }
        }
    }

    for (params, record) in &records {
        let vis = render_identity(params, record.variation_seed);
        let img = apply_modality(&vis, record.modality);
        write_pgm(&out_dir.join(&record.path), &img)?;
    }

    let manifest = DatasetManifest {
        seed,
        modalities,
        records: records.into_iter().map(|(_, r)| r).collect(),
    };
    fs::write(out_dir.join(MANIFEST_FILE), manifest.render_text())?;
    Ok(manifest)
}

// ── In-memory dataset ───────────────────────────────────────────────────

/// Manifest plus decoded images, indexed in record order.
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor<f64>>,
    /// Train VIS sample indices per identity.
    train_vis: BTreeMap<u32, Vec<usize>>,
    /// Train sample indices per identity per target modality.
    train_target: BTreeMap<u32, BTreeMap<Modality, Vec<usize>>>,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest = DatasetManifest::parse_text(&text)?;
        let mut images = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            images.push(read_pgm(&dir.join(&r.path))?);
        }
        let mut train_vis: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut train_target: BTreeMap<u32, BTreeMap<Modality, Vec<usize>>> = BTreeMap::new();
        for (i, r) in manifest.records.iter().enumerate() {
            if r.split != Split::Train {
                continue;
            }
            if r.modality == Modality::Vis {
                train_vis.entry(r.identity).or_default().push(i);
            } else {
                train_target.entry(r.identity).or_default().entry(r.modality).or_default().push(i);
            }
        }
        Ok(LoadedDataset { root: dir.to_path_buf(), manifest, images, train_vis, train_target })
    }

    pub fn record(&self, index: usize) -> &SampleRecord {
        &self.manifest.records[index]
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Train VIS sample indices with identity labels (for teacher
    /// pretraining).
    pub fn train_vis_samples(&self) -> Vec<(usize, u32)> {
        let mut out = Vec::new();
        for (&id, idxs) in &self.train_vis {
            for &i in idxs {
                out.push((i, id));
            }
        }
        out
    }
}

/// Draws a pair batch from the train split: each pair couples a VIS image
/// with an image of a uniformly random non-VIS modality; the batch carries
/// no modality labels.
///
/// Exactly `round(batch_size * genuine_fraction)` pairs are genuine.
pub fn sample_pairs<T: Scalar, R: Rng>(
    data: &LoadedDataset,
    batch_size: usize,
    genuine_fraction: f64,
    rng: &mut R,
) -> Result<PairBatch<T>> {
    assert!(genuine_fraction > 0.0 && genuine_fraction < 1.0, "genuine fraction must be in (0,1)");
    let ids: Vec<u32> = data
        .train_vis
        .keys()
        .copied()
        .filter(|id| data.train_target.get(id).map(|m| !m.is_empty()).unwrap_or(false))
        .collect();
    if ids.is_empty() {
        return Err(Error::MissingSplit("train"));
    }
    let targets = data.manifest.target_modalities();
    if targets.is_empty() {
        return Err(Error::EmptyDataset("no target modalities in manifest".into()));
    }
    let n_genuine = (batch_size as f64 * genuine_fraction).round() as usize;
    let n_impostor = batch_size - n_genuine;
    if n_impostor > 0 && ids.len() < 2 {
        return Err(Error::InsufficientIdentities);
    }

    let pick = |rng: &mut R, list: &[usize]| list[rng.random_range(0..list.len())];
    let mut source_idx = Vec::with_capacity(batch_size);
    let mut target_idx = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for k in 0..batch_size {
        let genuine = k < n_genuine;
        let id_s = ids[rng.random_range(0..ids.len())];
        let id_t = if genuine {
            id_s
        } else {
            loop {
                let other = ids[rng.random_range(0..ids.len())];
                if other != id_s {
                    break other;
                }
            }
        };
        let modality = targets[rng.random_range(0..targets.len())];
        let s = pick(rng, &data.train_vis[&id_s]);
        let t_pool = data.train_target[&id_t].get(&modality).ok_or_else(|| {
            Error::EmptyDataset(format!("identity {id_t} has no {} training samples", modality.as_str()))
        })?;
        let t = pick(rng, t_pool);
        source_idx.push(s);
        target_idx.push(t);
        labels.push(genuine);
    }

    let source_imgs: Vec<&Tensor<f64>> = source_idx.iter().map(|&i| &data.images[i]).collect();
    let target_imgs: Vec<&Tensor<f64>> = target_idx.iter().map(|&i| &data.images[i]).collect();
    Ok(PairBatch {
        source: images_to_batch(&source_imgs)?,
        target: images_to_batch(&target_imgs)?,
        labels,
        source_keys: source_idx,
    })
}
