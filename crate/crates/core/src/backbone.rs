//! Convolutional embedding backbone with SSMB insertion slots.
//!
//! Three conv stages (3x3, stride 1, pad 1), each followed by ReLU, an
//! optional modulation slot, and 2x2 max pooling, then a fully connected
//! embedding layer. The same layer plan runs for every input regardless of
//! modality; modulation blocks adapt per sample via their own routing.
//!
//! Checkpoints use the binary format in [`crate::checkpoint`]; parameter
//! names are stable (`backbone.conv0.weight`, ..., `ssmb.<slot>.router.weight`,
//! `ssmb.<slot>.expert.<i>.weight`) so files round-trip bitwise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::ssmb::{self, BlockRouting, GateMode, SsmbBlock, SsmbConfig, SsmbVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

pub const NUM_STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Square input extent; must be divisible by 8 (three 2x2 pools).
    pub image_size: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub embedding_dim: usize,
    /// Identity count for the classification head; 0 means no head.
    pub num_pretrain_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            image_size: 32,
            stage_channels: [8, 16, 32],
            kernel: 3,
            stride: 1,
            padding: 1,
            embedding_dim: 64,
            num_pretrain_classes: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::shape("backbone config", format!("image_size {} must be a positive multiple of 8", self.image_size)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::shape("backbone config", format!("kernel {} must be odd", self.kernel)));
        }
        if self.embedding_dim == 0 || self.input_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::shape("backbone config", "zero-sized dimension".to_string()));
        }
        Ok(())
    }

    /// Spatial extent after `stage` pools.
    pub fn extent_after(&self, stage: usize) -> usize {
        self.image_size >> stage
    }

    /// Flattened feature count feeding the embedding layer.
    pub fn flat_features(&self) -> usize {
        let side = self.image_size >> NUM_STAGES;
        self.stage_channels[NUM_STAGES - 1] * side * side
    }
}

/// One step of the ordered layer plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { stage: usize },
    Relu { stage: usize },
    SsmbSlot { slot: usize },
    Pool { stage: usize },
    Flatten,
    Embed,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Modulation-block metadata shared by all three slots.
#[derive(Debug, Clone, Copy)]
pub struct SsmbAttachment {
    pub num_experts: usize,
    pub gate_mode: GateMode,
    pub epsilon: f64,
}

/// Named parameters plus the layer plan they feed.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: BackboneConfig,
    params: BTreeMap<String, Param<T>>,
    ssmb: Option<SsmbAttachment>,
}

/// Everything produced by one forward walk of the plan.
pub struct ForwardPass {
    pub embedding: Var,
    /// One routing record per populated SSMB slot, in slot order.
    pub routing: Vec<BlockRouting>,
    /// Executed layer sequence; identical for every input modality.
    pub trace: Vec<String>,
}

impl<T: Scalar> ModelState<T> {
    /// He-uniform initialized backbone; biases zero; deterministic in `seed`.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut in_ch = config.input_channels;
        for (stage, &out_ch) in config.stage_channels.iter().enumerate() {
            let fan_in = in_ch * config.kernel * config.kernel;
            let w = he_uniform(&mut rng, &[out_ch, in_ch, config.kernel, config.kernel], fan_in);
            params.insert(format!("backbone.conv{stage}.weight"), Param { value: w, frozen: false });
            params.insert(format!("backbone.conv{stage}.bias"), Param { value: Tensor::zeros(vec![out_ch]), frozen: false });
            in_ch = out_ch;
        }
        let flat = config.flat_features();
        let w = he_uniform(&mut rng, &[flat, config.embedding_dim], flat);
        params.insert("backbone.fc.weight".into(), Param { value: w, frozen: false });
        params.insert("backbone.fc.bias".into(), Param { value: Tensor::zeros(vec![config.embedding_dim]), frozen: false });
        if config.num_pretrain_classes > 0 {
            let w = he_uniform(
                &mut rng,
                &[config.embedding_dim, config.num_pretrain_classes],
                config.embedding_dim,
            );
            params.insert("head.fc.weight".into(), Param { value: w, frozen: false });
            params.insert(
                "head.fc.bias".into(),
                Param { value: Tensor::zeros(vec![config.num_pretrain_classes]), frozen: false },
            );
        }
        Ok(ModelState { config, params, ssmb: None })
    }

    /// The ordered layer plan, including (possibly empty) SSMB slots.
    pub fn layer_plan(&self) -> Vec<LayerSpec> {
        let mut plan = Vec::new();
        for stage in 0..NUM_STAGES {
            plan.push(LayerSpec::Conv { stage });
            plan.push(LayerSpec::Relu { stage });
            plan.push(LayerSpec::SsmbSlot { slot: stage });
            plan.push(LayerSpec::Pool { stage });
        }
        plan.push(LayerSpec::Flatten);
        plan.push(LayerSpec::Embed);
        plan
    }

    pub fn has_ssmb(&self) -> bool {
        self.ssmb.is_some()
    }

    pub fn ssmb_attachment(&self) -> Option<SsmbAttachment> {
        self.ssmb
    }

    pub fn has_head(&self) -> bool {
        self.params.contains_key("head.fc.weight")
    }

    pub fn remove_head(&mut self) {
        self.params.remove("head.fc.weight");
        self.params.remove("head.fc.bias");
        self.config.num_pretrain_classes = 0;
    }

    /// Inserts freshly initialized modulation blocks into all three slots,
    /// freezing every backbone parameter. Only the block parameters remain
    /// trainable afterwards.
    pub fn attach_ssmb(&mut self, num_experts: usize, gate_mode: GateMode, seed: u64) {
        assert!(!self.has_head(), "remove the pretraining head before attaching modulation blocks");
        for p in self.params.values_mut() {
            p.frozen = true;
        }
        let epsilon = 1e-5;
        for slot in 0..NUM_STAGES {
            let cfg = SsmbConfig { channels: self.config.stage_channels[slot], num_experts, gate_mode, epsilon };
            let block: SsmbBlock<T> = SsmbBlock::new(cfg, mix_seed(seed, slot as u64));
            self.params.insert(
                format!("ssmb.{slot}.router.weight"),
                Param { value: block.router_weight, frozen: false },
            );
            self.params.insert(
                format!("ssmb.{slot}.router.bias"),
                Param { value: block.router_bias, frozen: false },
            );
            for (i, (w, b)) in block.expert_weights.into_iter().zip(block.expert_biases).enumerate() {
                self.params.insert(format!("ssmb.{slot}.expert.{i}.weight"), Param { value: w, frozen: false });
                self.params.insert(format!("ssmb.{slot}.expert.{i}.bias"), Param { value: b, frozen: false });
            }
        }
        self.ssmb = Some(SsmbAttachment { num_experts, gate_mode, epsilon });
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn param_value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    /// Parameters in lexicographic name order.
    pub fn params(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| !p.frozen).map(|(n, _)| n.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter on a tape. With `trainable`, non-frozen
    /// parameters become gradient targets; otherwise everything is a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, p)| {
                let var = if trainable && !p.frozen {
                    tape.param(p.value.clone())
                } else {
                    tape.leaf(p.value.clone())
                };
                (name.clone(), var)
            })
            .collect()
    }

    fn bound_ssmb_vars(&self, bound: &BTreeMap<String, Var>, slot: usize) -> SsmbVars {
        let att = self.ssmb.expect("slot populated only when attachment exists");
        SsmbVars {
            router_weight: bound[&format!("ssmb.{slot}.router.weight")],
            router_bias: bound[&format!("ssmb.{slot}.router.bias")],
            experts: (0..att.num_experts)
                .map(|i| {
                    (
                        bound[&format!("ssmb.{slot}.expert.{i}.weight")],
                        bound[&format!("ssmb.{slot}.expert.{i}.bias")],
                    )
                })
                .collect(),
        }
    }

    /// Walks the layer plan over a `[N, C, S, S]` image batch already on the
    /// tape. One code path for every modality.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        bound: &BTreeMap<String, Var>,
        images: Var,
    ) -> Result<ForwardPass> {
        let shape = tape.value(images).shape().to_vec();
        let expect = [self.config.input_channels, self.config.image_size, self.config.image_size];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {}, {}, {}], got {:?}", expect[0], expect[1], expect[2], shape),
            ));
        }
        let batch = shape[0];
        let mut x = images;
        let mut routing = Vec::new();
        let mut trace = Vec::new();
        for step in self.layer_plan() {
            match step {
                LayerSpec::Conv { stage } => {
                    let w = bound[&format!("backbone.conv{stage}.weight")];
                    let b = bound[&format!("backbone.conv{stage}.bias")];
                    x = tape.conv2d(x, w, b, self.config.stride, self.config.padding)?;
                    trace.push(format!("conv{stage}"));
                }
                LayerSpec::Relu { stage } => {
                    x = tape.relu(x);
                    trace.push(format!("relu{stage}"));
                }
                LayerSpec::SsmbSlot { slot } => {
                    if let Some(att) = self.ssmb {
                        let vars = self.bound_ssmb_vars(bound, slot);
                        let cfg = SsmbConfig {
                            channels: self.config.stage_channels[slot],
                            num_experts: att.num_experts,
                            gate_mode: att.gate_mode,
                            epsilon: att.epsilon,
                        };
                        let (out, r) = ssmb::forward_on_tape(tape, &vars, x, &cfg)?;
                        x = out;
                        routing.push(r);
                        trace.push(format!("ssmb{slot}"));
                    }
                }
                LayerSpec::Pool { stage } => {
                    x = max_pool2(tape, x)?;
                    trace.push(format!("pool{stage}"));
                }
                LayerSpec::Flatten => {
                    let n = tape.value(x).numel() / batch;
                    x = tape.reshape(x, vec![batch, n])?;
                    trace.push("flatten".into());
                }
                LayerSpec::Embed => {
                    let w = bound["backbone.fc.weight"];
                    let b = bound["backbone.fc.bias"];
                    x = tape.matmul(x, w)?;
                    x = tape.add(x, b)?;
                    trace.push("fc".into());
                }
            }
        }
        Ok(ForwardPass { embedding: x, routing, trace })
    }

    /// Classification logits for pretraining: embedding through the head.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        bound: &BTreeMap<String, Var>,
        images: Var,
    ) -> Result<Var> {
        let pass = self.forward_bound(tape, bound, images)?;
        let w = *bound.get("head.fc.weight").ok_or_else(|| Error::shape("forward", "model has no classification head"))?;
        let b = bound["head.fc.bias"];
        let logits = tape.matmul(pass.embedding, w)?;
        tape.add(logits, b)
    }

    /// Inference-only embedding of an image batch.
    pub fn forward_embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (embedding, _, _) = self.forward_traced(images)?;
        Ok(embedding)
    }

    /// Embedding plus per-slot winning experts and the executed layer trace.
    pub fn forward_traced(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<Vec<usize>>, Vec<String>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let images = tape.leaf(images.clone());
        let pass = self.forward_bound(&mut tape, &bound, images)?;
        let winners = pass.routing.iter().map(|r| r.winners.clone()).collect();
        Ok((tape.value(pass.embedding).clone(), winners, pass.trace))
    }

    /// Writes every parameter (plus gate-mode metadata when modulation
    /// blocks are attached) in lexicographic name order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, Tensor<f32>)> =
            self.params.iter().map(|(n, p)| (n.clone(), p.value.cast::<f32>())).collect();
        if let Some(att) = self.ssmb {
            let flag = match att.gate_mode {
                GateMode::GateScaled => 0.0f32,
                GateMode::ValuePreserving => 1.0,
            };
            named.push(("meta.gate_mode".into(), Tensor::from_vec(vec![1], vec![flag])?));
        }
        named.sort_by(|a, b| a.0.cmp(&b.0));
        checkpoint::write_named(path, &named)
    }

    /// Rebuilds a model from a checkpoint, inferring the architecture from
    /// tensor names and shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let named = checkpoint::read_named(path)?;
        let mut map: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, tensor) in named {
            map.insert(name, tensor);
        }
        Self::from_tensors(map)
    }

    fn from_tensors(mut map: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let gate_mode = match map.remove("meta.gate_mode") {
            Some(t) => Some(match t.data().first().copied().unwrap_or(-1.0) {
                v if v == 0.0 => GateMode::GateScaled,
                v if v == 1.0 => GateMode::ValuePreserving,
                v => {
                    return Err(Error::TensorShape {
                        name: "meta.gate_mode".into(),
                        detail: format!("unknown gate mode flag {v}"),
                    })
                }
            }),
            None => None,
        };

        let want = |map: &BTreeMap<String, Tensor<f32>>, name: &str| -> Result<Tensor<f32>> {
            map.get(name).cloned().ok_or_else(|| Error::TensorShape {
                name: name.to_string(),
                detail: "missing from checkpoint".into(),
            })
        };

        // Stage shapes drive the config.
        let mut stage_channels = [0usize; NUM_STAGES];
        let conv0 = want(&map, "backbone.conv0.weight")?;
        if conv0.rank() != 4 {
            return Err(Error::TensorShape { name: "backbone.conv0.weight".into(), detail: format!("expected rank 4, got {:?}", conv0.shape()) });
        }
        let input_channels = conv0.shape()[1];
        let kernel = conv0.shape()[2];
        let mut in_ch = input_channels;
        for (stage, sc) in stage_channels.iter_mut().enumerate() {
            let w = want(&map, &format!("backbone.conv{stage}.weight"))?;
            if w.rank() != 4 || w.shape()[1] != in_ch || w.shape()[2] != kernel || w.shape()[3] != kernel {
                return Err(Error::TensorShape {
                    name: format!("backbone.conv{stage}.weight"),
                    detail: format!("shape {:?} inconsistent with {in_ch} input channels and {kernel}x{kernel} kernel", w.shape()),
                });
            }
            *sc = w.shape()[0];
            let b = want(&map, &format!("backbone.conv{stage}.bias"))?;
            if b.shape() != [*sc] {
                return Err(Error::TensorShape {
                    name: format!("backbone.conv{stage}.bias"),
                    detail: format!("shape {:?} does not match {} channels", b.shape(), sc),
                });
            }
            in_ch = *sc;
        }
        let fc = want(&map, "backbone.fc.weight")?;
        if fc.rank() != 2 {
            return Err(Error::TensorShape { name: "backbone.fc.weight".into(), detail: format!("expected rank 2, got {:?}", fc.shape()) });
        }
        let flat = fc.shape()[0];
        let embedding_dim = fc.shape()[1];
        let last = stage_channels[NUM_STAGES - 1];
        if flat % last != 0 {
            return Err(Error::TensorShape { name: "backbone.fc.weight".into(), detail: format!("{flat} inputs not divisible by {last} channels") });
        }
        let area = flat / last;
        let side = (area as f64).sqrt().round() as usize;
        if side * side != area {
            return Err(Error::TensorShape { name: "backbone.fc.weight".into(), detail: format!("flattened area {area} is not square") });
        }
        let image_size = side << NUM_STAGES;

        let num_pretrain_classes = match map.get("head.fc.weight") {
            Some(w) if w.rank() == 2 && w.shape()[0] == embedding_dim => w.shape()[1],
            Some(w) => {
                return Err(Error::TensorShape { name: "head.fc.weight".into(), detail: format!("shape {:?} does not sit on a {embedding_dim}-d embedding", w.shape()) })
            }
            None => 0,
        };

        let config = BackboneConfig {
            input_channels,
            image_size,
            stage_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            embedding_dim,
            num_pretrain_classes,
        };
        config.validate().map_err(|e| Error::TensorShape { name: "backbone".into(), detail: e.to_string() })?;

        // Modulation blocks are optional; when present all three slots must
        // agree on the expert count and match the stage channels.
        let has_ssmb = map.keys().any(|k| k.starts_with("ssmb."));
        let ssmb = if has_ssmb {
            let mut num_experts = 0usize;
            while map.contains_key(&format!("ssmb.0.expert.{num_experts}.weight")) {
                num_experts += 1;
            }
            if num_experts == 0 {
                return Err(Error::TensorShape { name: "ssmb.0.expert.0.weight".into(), detail: "missing from checkpoint".into() });
            }
            for slot in 0..NUM_STAGES {
                let c2 = 2 * stage_channels[slot];
                let rw = want(&map, &format!("ssmb.{slot}.router.weight"))?;
                if rw.shape() != [c2, num_experts] {
                    return Err(Error::TensorShape {
                        name: format!("ssmb.{slot}.router.weight"),
                        detail: format!("shape {:?}, expected [{c2}, {num_experts}]", rw.shape()),
                    });
                }
                want(&map, &format!("ssmb.{slot}.router.bias"))?;
                for i in 0..num_experts {
                    let w = want(&map, &format!("ssmb.{slot}.expert.{i}.weight"))?;
                    if w.shape() != [c2, c2] {
                        return Err(Error::TensorShape {
                            name: format!("ssmb.{slot}.expert.{i}.weight"),
                            detail: format!("shape {:?}, expected [{c2}, {c2}]", w.shape()),
                        });
                    }
                    want(&map, &format!("ssmb.{slot}.expert.{i}.bias"))?;
                }
            }
            let gate_mode = gate_mode.ok_or_else(|| Error::TensorShape {
                name: "meta.gate_mode".into(),
                detail: "missing for a checkpoint with modulation blocks".into(),
            })?;
            Some(SsmbAttachment { num_experts, gate_mode, epsilon: 1e-5 })
        } else {
            None
        };

        let params = map
            .into_iter()
            .map(|(name, t)| {
                let frozen = ssmb.is_some() && !name.starts_with("ssmb.");
                (name, Param { value: t.cast::<T>(), frozen })
            })
            .collect();
        Ok(ModelState { config, params, ssmb })
    }
}

/// 2x2 max pooling via reshape to `[N, C, H/2, 2, W/2, 2]` and a max
/// reduction over the two window axes.
pub fn max_pool2<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::shape("max_pool2", format!("needs even spatial extents, got {s:?}")));
    }
    let r = tape.reshape(x, vec![s[0], s[1], s[2] / 2, 2, s[3] / 2, 2])?;
    tape.reduce_max(r, &[3, 5])
}

/// Copies a single-channel `[1, H, W]` image across three channels.
pub fn replicate_channels<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    if image.rank() != 3 || image.shape()[0] != 1 {
        return Err(Error::shape("replicate_channels", format!("expected [1, H, W], got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(image.data());
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Stacks grayscale `[1, H, W]` images into a `[N, 3, H, W]` batch.
pub fn images_to_batch<T: Scalar>(images: &[&Tensor<f64>]) -> Result<Tensor<T>> {
    let replicated: Vec<Tensor<T>> =
        images.iter().map(|img| replicate_channels(&img.cast::<T>())).collect::<Result<_>>()?;
    Tensor::stack(&replicated)
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("sized above")
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
