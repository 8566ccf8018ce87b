//! Switch Style Modulation Block.
//!
//! One block turns a feature map `F` of shape `[batch, C, H, W]` into
//! `0.5 * (sigma_s * (F - mu)/sigma + mu_s + F)`, where `(mu, sigma)` are
//! per-sample per-channel statistics and `(mu_s, sigma_s)` come from one of
//! `N` affine style experts selected per sample by a softmax router over the
//! concatenated statistics vector `[mu, sigma]` (top-1 switch routing).
//!
//! Experts are identity-initialized, so a fresh block in value-preserving
//! gate mode is an exact identity map; in gate-scaled mode it shrinks the
//! feature map to `((1+p)/2) * F` where `p` is the winning gate probability.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

/// How the winning gate probability enters the modulation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// Multiply `(mu_s, sigma_s)` by the gate value. Faithful to the
    /// mixture-of-experts combination rule; at initialization the block
    /// computes `((1+p)/2) * F` instead of the identity.
    #[default]
    GateScaled,
    /// Multiply by `gate / detach(gate)`: the value is unchanged (exact
    /// identity at initialization) while the router stays differentiable.
    ValuePreserving,
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::GateScaled => "scaled",
            GateMode::ValuePreserving => "value-preserving",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scaled" | "gate-scaled" => Some(GateMode::GateScaled),
            "value-preserving" => Some(GateMode::ValuePreserving),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SsmbConfig {
    /// Channel count of the feature map this block modulates.
    pub channels: usize,
    pub num_experts: usize,
    pub gate_mode: GateMode,
    /// Added to the spatial variance before the square root, so constant
    /// feature maps keep a nonzero sigma.
    pub epsilon: f64,
}

impl SsmbConfig {
    pub fn new(channels: usize, num_experts: usize, gate_mode: GateMode) -> Self {
        assert!(channels >= 1 && num_experts >= 1);
        SsmbConfig { channels, num_experts, gate_mode, epsilon: 1e-5 }
    }
}

/// Trainable state of one block.
#[derive(Debug, Clone)]
pub struct SsmbBlock<T> {
    /// `[2C, N]`, uniform in ±1e-3 so initial routing is near-uniform.
    pub router_weight: Tensor<T>,
    /// `[N]`, zero.
    pub router_bias: Tensor<T>,
    /// `N` matrices of `[2C, 2C]`, each the identity at construction.
    pub expert_weights: Vec<Tensor<T>>,
    /// `N` vectors of `[2C]`, zero at construction.
    pub expert_biases: Vec<Tensor<T>>,
    pub config: SsmbConfig,
}

impl<T: Scalar> SsmbBlock<T> {
    pub fn new(config: SsmbConfig, seed: u64) -> Self {
        let c2 = 2 * config.channels;
        let n = config.num_experts;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut router = vec![T::zero(); c2 * n];
        for v in &mut router {
            *v = T::from_f64_lossy(rng.random_range(-1e-3..1e-3));
        }
        let mut eye = Tensor::zeros(vec![c2, c2]);
        for i in 0..c2 {
            eye.data_mut()[i * c2 + i] = T::one();
        }
        SsmbBlock {
            router_weight: Tensor::from_vec(vec![c2, n], router).expect("sized above"),
            router_bias: Tensor::zeros(vec![n]),
            expert_weights: vec![eye; n],
            expert_biases: vec![Tensor::zeros(vec![c2]); n],
            config,
        }
    }

    /// Registers this block's tensors on a tape. `trainable` decides whether
    /// they participate in backward.
    pub fn bind(&self, tape: &mut Tape<T>) -> SsmbVars {
        self.bind_with(tape, true)
    }

    pub fn bind_with(&self, tape: &mut Tape<T>, trainable: bool) -> SsmbVars {
        let reg = |tape: &mut Tape<T>, t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        SsmbVars {
            router_weight: reg(tape, &self.router_weight),
            router_bias: reg(tape, &self.router_bias),
            experts: self
                .expert_weights
                .iter()
                .zip(&self.expert_biases)
                .map(|(w, b)| (reg(tape, w), reg(tape, b)))
                .collect(),
        }
    }

    /// Standalone forward over a plain feature map (fresh tape, no grads).
    pub fn forward(&self, feature: &Tensor<T>) -> Result<(Tensor<T>, RoutingStats)> {
        let mut tape = Tape::new();
        let vars = self.bind_with(&mut tape, false);
        let f = tape.leaf(feature.clone());
        let (out, routing) = forward_on_tape(&mut tape, &vars, f, &self.config)?;
        let stats = collect_routing_stats(&routing.winners, tape.value(routing.probs), self.config.num_experts);
        Ok((tape.value(out).clone(), stats))
    }
}

/// Tape handles for one block's parameters.
pub struct SsmbVars {
    pub router_weight: Var,
    pub router_bias: Var,
    pub experts: Vec<(Var, Var)>,
}

/// Per-batch routing outcome of one block invocation.
pub struct BlockRouting {
    /// Winning expert per sample.
    pub winners: Vec<usize>,
    /// `[batch, N]` softmax probabilities (on the tape).
    pub probs: Var,
    /// `[batch]` winning gate probability (on the tape).
    pub gate: Var,
}

/// Per-expert dispatch fractions and mean gate probabilities for one batch.
#[derive(Debug, Clone)]
pub struct RoutingStats {
    /// Fraction of samples dispatched to each expert; sums to 1.
    pub dispatch_fraction: Vec<f64>,
    /// Mean softmax probability per expert over the batch; sums to 1.
    pub mean_gate_prob: Vec<f64>,
    pub batch_size: usize,
    /// `[batch, N]` probability rows on the tape the forward ran on, kept so
    /// the load-balance loss can differentiate through P.
    pub(crate) prob_rows: Option<Var>,
}

impl RoutingStats {
    /// Builds stats from explicit fractions/probabilities (no tape handle).
    pub fn from_parts(dispatch_fraction: Vec<f64>, mean_gate_prob: Vec<f64>, batch_size: usize) -> Self {
        assert_eq!(dispatch_fraction.len(), mean_gate_prob.len());
        RoutingStats { dispatch_fraction, mean_gate_prob, batch_size, prob_rows: None }
    }

    pub fn num_experts(&self) -> usize {
        self.dispatch_fraction.len()
    }
}

/// Per-sample per-channel spatial mean and stabilized standard deviation.
///
/// `sigma = sqrt(population_variance + epsilon)`; both outputs are `[B, C]`
/// and differentiable.
pub fn channel_stats<T: Scalar>(tape: &mut Tape<T>, feature: Var, epsilon: f64) -> Result<(Var, Var)> {
    let shape = tape.value(feature).shape().to_vec();
    debug_assert_eq!(shape.len(), 4, "channel_stats expects [B, C, H, W]");
    let (b, c) = (shape[0], shape[1]);
    let mu = tape.reduce_mean(feature, &[2, 3])?; // [B, C]
    let mu_map = tape.reshape(mu, vec![b, c, 1, 1])?;
    let centered = tape.sub(feature, mu_map)?;
    let squared = tape.mul(centered, centered)?;
    let var = tape.reduce_mean(squared, &[2, 3])?;
    let var_eps = tape.add_scalar(var, T::from_f64_lossy(epsilon));
    let sigma = tape.sqrt(var_eps)?;
    Ok((mu, sigma))
}

/// Softmax routing over `[mu, sigma]`: probabilities, per-sample winners
/// (argmax, ties to the lowest index), and the winning gate probability.
pub fn route<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &SsmbVars,
    router_input: Var,
) -> Result<(Var, Vec<usize>, Var)> {
    let logits = tape.matmul(router_input, vars.router_weight)?;
    let logits = tape.add(logits, vars.router_bias)?;
    let probs = tape.softmax(logits, 1)?;

    let pv = tape.value(probs);
    let (batch, n) = (pv.shape()[0], pv.shape()[1]);
    let mut winners = Vec::with_capacity(batch);
    let mut onehot = vec![T::zero(); batch * n];
    for s in 0..batch {
        let row = pv.row(s);
        let mut best = 0usize;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        winners.push(best);
        onehot[s * n + best] = T::one();
    }
    let mask = tape.leaf(Tensor::from_vec(vec![batch, n], onehot)?);
    let picked = tape.mul(probs, mask)?;
    let gate = tape.reduce_sum(picked, &[1])?; // [batch]
    Ok((probs, winners, gate))
}

/// Runs each sample through its winning expert and splits the `2C` output
/// into `(mu_s, sigma_s)`, applying the gate per `gate_mode`.
///
/// The output layout mirrors the input: the first `C` entries are the shift
/// `mu_s`, the last `C` the scale `sigma_s`, so identity expert weights map
/// `[mu, sigma]` to `(mu, sigma)` exactly.
pub fn expert_modulation_params<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &SsmbVars,
    router_input: Var,
    winners: &[usize],
    gate: Var,
    config: &SsmbConfig,
) -> Result<(Var, Var)> {
    let batch = winners.len();
    let c = config.channels;

    // Group samples by winning expert so each expert sees one matmul; only
    // that expert's parameters receive gradient from its samples.
    let mut grouped_order = Vec::with_capacity(batch);
    let mut grouped_outputs = Vec::new();
    for (expert_idx, &(w, b)) in vars.experts.iter().enumerate() {
        let rows: Vec<usize> = (0..batch).filter(|&s| winners[s] == expert_idx).collect();
        if rows.is_empty() {
            continue;
        }
        let selected = tape.index_select(router_input, &rows)?;
        let affine = tape.matmul(selected, w)?;
        let affine = tape.add(affine, b)?;
        grouped_order.extend_from_slice(&rows);
        grouped_outputs.push(affine);
    }
    let grouped = tape.concat(&grouped_outputs, 0)?;
    // Undo the grouping permutation.
    let mut inverse = vec![0usize; batch];
    for (pos, &orig) in grouped_order.iter().enumerate() {
        inverse[orig] = pos;
    }
    let raw = tape.index_select(grouped, &inverse)?; // [batch, 2C] in batch order

    let factor = match config.gate_mode {
        GateMode::GateScaled => gate,
        GateMode::ValuePreserving => {
            let frozen = tape.detach(gate);
            tape.div(gate, frozen)?
        }
    };
    let factor = tape.reshape(factor, vec![batch, 1])?;
    let gated = tape.mul(raw, factor)?;

    let mu_s = tape.narrow(gated, 1, 0, c)?;
    let sigma_s = tape.narrow(gated, 1, c, c)?;
    Ok((mu_s, sigma_s))
}

/// Full block: statistics, routing, expert modulation, and the residual
/// rewrite `0.5 * (sigma_s * (F - mu)/sigma + mu_s + F)`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &SsmbVars,
    feature: Var,
    config: &SsmbConfig,
) -> Result<(Var, BlockRouting)> {
    let shape = tape.value(feature).shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    debug_assert_eq!(c, config.channels);

    let (mu, sigma) = channel_stats(tape, feature, config.epsilon)?;
    let router_input = tape.concat(&[mu, sigma], 1)?; // [B, 2C]
    let (probs, winners, gate) = route(tape, vars, router_input)?;
    let (mu_s, sigma_s) = expert_modulation_params(tape, vars, router_input, &winners, gate, config)?;

    let mu_map = tape.reshape(mu, vec![b, c, 1, 1])?;
    let sigma_map = tape.reshape(sigma, vec![b, c, 1, 1])?;
    let centered = tape.sub(feature, mu_map)?;
    let normalized = tape.div(centered, sigma_map)?;
    let sigma_s_map = tape.reshape(sigma_s, vec![b, c, 1, 1])?;
    let mu_s_map = tape.reshape(mu_s, vec![b, c, 1, 1])?;
    let scaled = tape.mul(normalized, sigma_s_map)?;
    let shifted = tape.add(scaled, mu_s_map)?;
    let residual = tape.add(shifted, feature)?;
    let out = tape.mul_scalar(residual, T::from_f64_lossy(0.5));

    Ok((out, BlockRouting { winners, probs, gate }))
}

/// Dispatch fractions and mean gate probabilities for a batch of routing
/// outcomes.
pub fn collect_routing_stats<T: Scalar>(
    winners: &[usize],
    probs: &Tensor<T>,
    num_experts: usize,
) -> RoutingStats {
    let batch = winners.len();
    assert!(batch >= 1, "routing stats need at least one sample");
    assert_eq!(probs.shape(), &[batch, num_experts]);
    let mut dispatch = vec![0.0f64; num_experts];
    for &w in winners {
        dispatch[w] += 1.0;
    }
    for d in &mut dispatch {
        *d /= batch as f64;
    }
    let mut mean_prob = vec![0.0f64; num_experts];
    for s in 0..batch {
        for (e, m) in mean_prob.iter_mut().enumerate() {
            *m += probs.data()[s * num_experts + e].to_f64().expect("finite prob");
        }
    }
    for m in &mut mean_prob {
        *m /= batch as f64;
    }
    RoutingStats { dispatch_fraction: dispatch, mean_gate_prob: mean_prob, batch_size: batch, prob_rows: None }
}

impl RoutingStats {
    /// Stats for a routing outcome that lives on `tape`, keeping the
    /// probability rows differentiable for the load-balance loss.
    pub fn from_routing<T: Scalar>(tape: &Tape<T>, routing: &BlockRouting, num_experts: usize) -> Self {
        let mut stats = collect_routing_stats(&routing.winners, tape.value(routing.probs), num_experts);
        stats.prob_rows = Some(routing.probs);
        stats
    }
}
