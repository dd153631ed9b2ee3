//! Cross-entropy objectives over probability maps.
//!
//! Every loss here is a mean over pixels of `−w · log(p)` terms with `p`
//! clamped to `[ε, 1−ε]`, `ε = 1e-7`. The `*_grad` variants also return
//! `∂loss/∂p`, which is what [`crate::train`] attaches to the tape. Inside the
//! clamp band the derivative is zero.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ProbabilityMap};
use crate::tensor::Real;

pub const PROB_EPS: f64 = 1e-7;

/// A loss value together with its gradient w.r.t. the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[inline]
fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

/// Weights on the two terms of binary cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryWeights {
    pub background: f64,
    pub foreground: f64,
}

impl BinaryWeights {
    pub const UNIFORM: BinaryWeights = BinaryWeights {
        background: 1.0,
        foreground: 1.0,
    };

    /// `α` on the background term, `1 − α` on the foreground term.
    pub fn from_alpha(alpha: f64) -> BinaryWeights {
        BinaryWeights {
            background: alpha,
            foreground: 1.0 - alpha,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_len(pred: usize, target: usize, what: &'static str) -> Result<()> {
    if pred != target {
        return Err(Error::ShapeMismatch {
            context: what,
            left: vec![pred],
            right: vec![target],
        });
    }
    Ok(())
}

/// `−(1/P) Σ [w_bg·1{y=0}·log(1−p) + w_fg·1{y=1}·log(p)]` and its gradient.
pub fn binary_ce_weighted<T: Real>(
    pred: &[T],
    target: &BinaryMask,
    weights: BinaryWeights,
) -> Result<LossEval> {
    check_len(
        pred.len(),
        target.len(),
        "binary cross-entropy prediction vs target",
    )?;
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target.pixels()) {
        let (p, clamped) = clamp_prob(p.as_f64());
        if y {
            total -= weights.foreground * p.ln();
            grad.push(if clamped {
                0.0
            } else {
                -weights.foreground / (n * p)
            });
        } else {
            total -= weights.background * (1.0 - p).ln();
            grad.push(if clamped {
                0.0
            } else {
                weights.background / (n * (1.0 - p))
            });
        }
    }
    Ok(LossEval {
        value: total / n,
        grad,
    })
}

/// Unweighted binary cross-entropy.
pub fn binary_cross_entropy<T: Real>(pred: &[T], target: &BinaryMask) -> Result<f64> {
    binary_ce_weighted(pred, target, BinaryWeights::UNIFORM).map(|e| e.value)
}

/// Weighted binary cross-entropy with `α` on background pixels and `1 − α`
/// on foreground (tumor) pixels.
pub fn weighted_bce<T: Real>(pred: &[T], target: &BinaryMask, alpha: f64) -> Result<f64> {
    weighted_bce_grad(pred, target, alpha).map(|e| e.value)
}

pub fn weighted_bce_grad<T: Real>(pred: &[T], target: &BinaryMask, alpha: f64) -> Result<LossEval> {
    check_alpha(alpha)?;
    binary_ce_weighted(pred, target, BinaryWeights::from_alpha(alpha))
}

/// `1 − |{target = 1}| / |target|`: the background fraction. Not clamped.
pub fn balanced_alpha(target: &BinaryMask) -> f64 {
    1.0 - target.count_ones() as f64 / target.len() as f64
}

/// Clamps `α` into `[ε, 1 − ε]` so neither class weight vanishes.
pub fn clamp_alpha(alpha: f64) -> f64 {
    alpha.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// How a per-sample balanced `α` is derived from the target mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BalanceMode {
    /// Background term weighted by the foreground fraction (inverse class
    /// frequency): rare tumor pixels get the large weight.
    #[default]
    InverseFrequency,
    /// Background term weighted by `balanced_alpha` itself, i.e. by the
    /// background fraction.
    Literal,
}

impl BalanceMode {
    /// Clamped `α` for `target`.
    pub fn alpha(self, target: &BinaryMask) -> f64 {
        clamp_alpha(match self {
            BalanceMode::InverseFrequency => target.count_ones() as f64 / target.len() as f64,
            BalanceMode::Literal => balanced_alpha(target),
        })
    }
}

fn check_partition(masks: [&BinaryMask; 3]) -> Result<()> {
    masks[0].same_dims(masks[1], "class masks")?;
    masks[0].same_dims(masks[2], "class masks")?;
    let [t, l, o] = masks.map(BinaryMask::pixels);
    for (i, ((&a, &b), &c)) in t.iter().zip(l).zip(o).enumerate() {
        if a as u8 + b as u8 + c as u8 != 1 {
            return Err(Error::invalid(format!(
                "class masks do not partition the image at pixel {i}"
            )));
        }
    }
    Ok(())
}

/// Per-class weights `w_c = 1 − |class c| / |pixels|` for (tumor, liver,
/// other). They sum to 2 for any partition.
pub fn balanced_class_weights(
    tumor: &BinaryMask,
    liver: &BinaryMask,
    other: &BinaryMask,
) -> Result<[f64; 3]> {
    let masks = [tumor, liver, other];
    check_partition(masks)?;
    let total = tumor.len() as f64;
    Ok(masks.map(|m| 1.0 - m.count_ones() as f64 / total))
}

/// Categorical cross-entropy for one 3-channel prediction laid out channel
/// major (tumor, liver, other), against the matching one-hot masks.
pub fn categorical_cross_entropy<T: Real>(
    pred: &[T],
    targets: [&BinaryMask; 3],
    class_weights: Option<[f64; 3]>,
) -> Result<f64> {
    categorical_cross_entropy_grad(pred, targets, class_weights).map(|e| e.value)
}

pub fn categorical_cross_entropy_grad<T: Real>(
    pred: &[T],
    targets: [&BinaryMask; 3],
    class_weights: Option<[f64; 3]>,
) -> Result<LossEval> {
    check_partition(targets)?;
    let px = targets[0].len();
    check_len(pred.len(), 3 * px, "categorical prediction vs 3 masks")?;
    let weights = class_weights.unwrap_or([1.0; 3]);
    let n = px as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (c, mask) in targets.iter().enumerate() {
        for (i, &on) in mask.pixels().iter().enumerate() {
            if !on {
                continue;
            }
            let (p, clamped) = clamp_prob(pred[c * px + i].as_f64());
            total -= weights[c] * p.ln();
            if !clamped {
                grad[c * px + i] = -weights[c] / (n * p);
            }
        }
    }
    Ok(LossEval {
        value: total / n,
        grad,
    })
}

/// The weighting choices a training run uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaChoice {
    Fixed(f64),
    Balanced(BalanceMode),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: AlphaChoice,
    pub class_weights: Option<[f64; 3]>,
    pub joint_c: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if let AlphaChoice::Fixed(a) = self.alpha {
            check_alpha(a)?;
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::invalid(format!(
                    "class weights must lie in [0, 1], got {w:?}"
                )));
            }
        }
        check_joint_c(self.joint_c)
    }

    /// Background/foreground weights for one target mask.
    pub fn binary_weights(&self, target: &BinaryMask) -> BinaryWeights {
        match self.alpha {
            AlphaChoice::Fixed(a) => BinaryWeights::from_alpha(a),
            AlphaChoice::Balanced(mode) => BinaryWeights::from_alpha(mode.alpha(target)),
        }
    }
}

fn check_joint_c(c: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::invalid(format!(
            "joint weight c must lie in [0, 1], got {c}"
        )));
    }
    Ok(())
}

/// Joint cascade objective
/// `(c/N) Σ L(liver_k, A_k) + ((1−c)/N) Σ L(tumor_k, M_k ∧ B_k)`
/// with `L` the unweighted binary cross-entropy. `tumor_probs[k]` must be the
/// tumor network's output on the masked, windowed input.
pub fn joint_loss(
    liver_probs: &[ProbabilityMap],
    tumor_probs: &[ProbabilityMap],
    liver_targets: &[BinaryMask],
    tumor_targets: &[BinaryMask],
    liver_masks: &[BinaryMask],
    c: f64,
) -> Result<f64> {
    check_joint_c(c)?;
    let n = liver_probs.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    for len in [
        tumor_probs.len(),
        liver_targets.len(),
        tumor_targets.len(),
        liver_masks.len(),
    ] {
        check_len(n, len, "joint loss sample counts")?;
    }
    let mut liver_sum = 0.0;
    let mut tumor_sum = 0.0;
    for k in 0..n {
        liver_sum += binary_cross_entropy(liver_probs[k].pixels(), &liver_targets[k])?;
        let masked_target = liver_masks[k].and(&tumor_targets[k])?;
        tumor_sum += binary_cross_entropy(tumor_probs[k].pixels(), &masked_target)?;
    }
    Ok(c / n as f64 * liver_sum + (1.0 - c) / n as f64 * tumor_sum)
}
