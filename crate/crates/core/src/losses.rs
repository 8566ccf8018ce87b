//! Training losses: cosine contrastive, teacher-student identity, and the
//! router load-balance term, combined as
//! `(1 - gamma) * L_C + gamma * L_TSI + alpha * L_b`.

use crate::error::{Error, Result};
use crate::ssmb::RoutingStats;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Hinge margin for impostor pairs.
    pub margin: f64,
    /// Weight between contrastive (1 - gamma) and teacher-student (gamma).
    pub gamma: f64,
    /// Weight of the load-balance term.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.0, gamma: 0.5, alpha: 0.01 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::domain("loss config", format!("gamma {} outside [0,1]", self.gamma)));
        }
        if self.alpha < 0.0 {
            return Err(Error::domain("loss config", format!("alpha {} negative", self.alpha)));
        }
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(Error::domain("loss config", format!("margin {} outside [-1,1]", self.margin)));
        }
        Ok(())
    }
}

/// A batch of (source image, target image, same-identity label) pairs.
///
/// Targets are drawn from the pooled non-source modalities; nothing in the
/// batch says which one.
#[derive(Debug, Clone)]
pub struct PairBatch<T> {
    /// `[B, 3, H, W]` source-modality images.
    pub source: Tensor<T>,
    /// `[B, 3, H, W]` target images of any non-source modality.
    pub target: Tensor<T>,
    /// `true` = genuine (same identity).
    pub labels: Vec<bool>,
    /// Dataset indices of the source images, for teacher embedding caching.
    pub source_keys: Vec<usize>,
}

/// Per-row cosine similarity of two `[B, D]` embeddings.
///
/// Errors on any zero-norm row rather than clamping, so degenerate
/// embeddings surface immediately.
pub fn cosine_rows<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    for (side, v) in [("left", a), ("right", b)] {
        let t = tape.value(v);
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        for r in 0..rows {
            let norm_sq: f64 = t.data()[r * cols..(r + 1) * cols]
                .iter()
                .map(|&x| {
                    let x = x.to_f64().expect("finite");
                    x * x
                })
                .sum();
            if norm_sq == 0.0 {
                let _ = side;
                return Err(Error::ZeroVector(r));
            }
        }
    }
    let prod = tape.mul(a, b)?;
    let dot = tape.reduce_sum(prod, &[1])?; // [B]
    let aa = tape.mul(a, a)?;
    let a_sq = tape.reduce_sum(aa, &[1])?;
    let a_norm = tape.sqrt(a_sq)?;
    let bb = tape.mul(b, b)?;
    let b_sq = tape.reduce_sum(bb, &[1])?;
    let b_norm = tape.sqrt(b_sq)?;
    let denom = tape.mul(a_norm, b_norm)?;
    tape.div(dot, denom)
}

/// Plain cosine similarity of two vectors; zero-norm inputs error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "cosine of unequal-length vectors");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector(0));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Mean over the batch of `y*(1 - cos) + (1-y)*max(0, cos - m)`.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    e_source: Var,
    e_target: Var,
    labels: &[bool],
    margin: f64,
) -> Result<Var> {
    let batch = tape.value(e_source).shape()[0];
    assert_eq!(labels.len(), batch, "one label per pair");
    let cos = cosine_rows(tape, e_source, e_target)?;

    let y: Vec<T> = labels.iter().map(|&g| if g { T::one() } else { T::zero() }).collect();
    let inv_y: Vec<T> = labels.iter().map(|&g| if g { T::zero() } else { T::one() }).collect();
    let y = tape.leaf(Tensor::from_vec(vec![batch], y)?);
    let inv_y = tape.leaf(Tensor::from_vec(vec![batch], inv_y)?);

    let neg_cos = tape.mul_scalar(cos, -T::one());
    let one_minus_cos = tape.add_scalar(neg_cos, T::one());
    let pull = tape.mul(y, one_minus_cos)?;

    let shifted = tape.add_scalar(cos, T::from_f64_lossy(-margin));
    let hinge = tape.relu(shifted);
    let push = tape.mul(inv_y, hinge)?;

    let per_pair = tape.add(pull, push)?;
    tape.reduce_mean(per_pair, &[0])
}

/// Mean over the batch of `1 - cos(e_teacher, e_student)` on source-modality
/// images. The teacher side is expected to be a gradient-free leaf.
pub fn tsi_loss<T: Scalar>(tape: &mut Tape<T>, e_teacher: Var, e_student: Var) -> Result<Var> {
    let cos = cosine_rows(tape, e_teacher, e_student)?;
    let neg = tape.mul_scalar(cos, -T::one());
    let one_minus = tape.add_scalar(neg, T::one());
    tape.reduce_mean(one_minus, &[0])
}

/// Load balance `N * sum_i f_i * P_i` per block, averaged over blocks.
///
/// The dispatch fractions `f` are piecewise-constant in the parameters, so
/// gradient flows only through the mean gate probabilities `P`.
pub fn load_balance_loss<T: Scalar>(tape: &mut Tape<T>, stats: &[RoutingStats]) -> Result<Var> {
    assert!(!stats.is_empty(), "load balance over zero blocks");
    let mut terms = Vec::with_capacity(stats.len());
    for s in stats {
        let n = s.num_experts();
        let f: Vec<T> = s.dispatch_fraction.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let f = tape.leaf(Tensor::from_vec(vec![n], f)?);
        let p = match s.prob_rows {
            Some(rows) => tape.reduce_mean(rows, &[0])?,
            None => {
                let p: Vec<T> = s.mean_gate_prob.iter().map(|&v| T::from_f64_lossy(v)).collect();
                tape.leaf(Tensor::from_vec(vec![n], p)?)
            }
        };
        let fp = tape.mul(f, p)?;
        let dot = tape.reduce_sum(fp, &[0])?;
        terms.push(tape.mul_scalar(dot, T::from_f64_lossy(n as f64)));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.mul_scalar(acc, T::from_f64_lossy(1.0 / stats.len() as f64)))
}

/// Untaped load-balance value, for logging and direct checks.
pub fn load_balance_value(stats: &[RoutingStats]) -> f64 {
    assert!(!stats.is_empty());
    let total: f64 = stats
        .iter()
        .map(|s| {
            let dot: f64 =
                s.dispatch_fraction.iter().zip(&s.mean_gate_prob).map(|(&f, &p)| f * p).sum();
            s.num_experts() as f64 * dot
        })
        .sum();
    total / stats.len() as f64
}

/// The three loss terms plus their weighted combination, all on the tape.
pub struct LossBreakdown {
    pub total: Var,
    pub contrastive: Var,
    pub tsi: Var,
    pub balance: Var,
}

/// `(1 - gamma) * L_C + gamma * L_TSI + alpha * L_b` over one pair batch.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    e_source: Var,
    e_target: Var,
    e_teacher: Var,
    labels: &[bool],
    stats: &[RoutingStats],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    config.validate()?;
    let contrastive = contrastive_loss(tape, e_source, e_target, labels, config.margin)?;
    let tsi = tsi_loss(tape, e_teacher, e_source)?;
    let balance = load_balance_loss(tape, stats)?;
    let wc = tape.mul_scalar(contrastive, T::from_f64_lossy(1.0 - config.gamma));
    let wt = tape.mul_scalar(tsi, T::from_f64_lossy(config.gamma));
    let wb = tape.mul_scalar(balance, T::from_f64_lossy(config.alpha));
    let partial = tape.add(wc, wt)?;
    let total = tape.add(partial, wb)?;
    Ok(LossBreakdown { total, contrastive, tsi, balance })
}
