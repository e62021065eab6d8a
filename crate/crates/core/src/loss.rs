//! Compound training objective: channel-wise Dice loss plus per-pixel
//! categorical cross-entropy, summed over every supervised output head.

use crate::error::{Error, Result};
use crate::label::NUM_CLASSES;
use crate::network::ForwardOutputs;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor4};

/// Guard added inside `log` in the cross-entropy.
pub const LOG_GUARD: f64 = 1e-8;

/// Tolerance on the per-pixel channel sum of a softmaxed prediction.
pub const NORMALIZATION_TOL: f64 = 1e-5;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Smoothing term of the Dice ratio.
    pub epsilon: f64,
    /// Whether the background class enters the mean Dice loss.
    pub include_background: bool,
    /// Supervise the three side heads as well as the fused head.
    pub side_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-6,
            include_background: true,
            side_supervision: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Dice loss per class on the fused head.
    pub dice_per_class: [f64; NUM_CLASSES],
    /// Cross-entropy on the fused head.
    pub ce: f64,
    /// Contribution of side1, side2, side3 and fused, in that order.
    /// Unsupervised heads contribute zero.
    pub per_output: [f64; 4],
    pub total: f64,
    pub epsilon: f64,
}

fn check_pair<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::shape("loss", pred.dims(), target.dims()));
    }
    let d = pred.dims();
    let plane = d.plane();
    for n in 0..d.n {
        for i in 0..plane {
            let mut sum = 0.0;
            let mut hot = 0;
            for c in 0..d.c {
                sum += pred.plane(n, c)[i].as_f64();
                let y = target.plane(n, c)[i].as_f64();
                if y == 1.0 {
                    hot += 1;
                } else if y != 0.0 {
                    return Err(Error::Contract(format!(
                        "target is not one-hot at batch {n}, pixel {i}"
                    )));
                }
            }
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Contract(format!(
                    "prediction channels sum to {sum} at batch {n}, pixel {i}; expected softmax output"
                )));
            }
            if hot != 1 {
                return Err(Error::Contract(format!(
                    "target is not one-hot at batch {n}, pixel {i}"
                )));
            }
        }
    }
    Ok(())
}

struct ClassSums {
    overlap: f64,
    truth: f64,
    pred: f64,
}

fn class_sums<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Vec<ClassSums> {
    let d = pred.dims();
    (0..d.c)
        .map(|c| {
            let mut s = ClassSums {
                overlap: 0.0,
                truth: 0.0,
                pred: 0.0,
            };
            for n in 0..d.n {
                for (&p, &y) in pred.plane(n, c).iter().zip(target.plane(n, c)) {
                    let (p, y) = (p.as_f64(), y.as_f64());
                    s.overlap += y * p;
                    s.truth += y;
                    s.pred += p;
                }
            }
            s
        })
        .collect()
}

/// `1 − (2·Σyp + ε)/(Σy + Σp + ε)` for each class, sums taken over every
/// pixel of the batch.
pub fn dice_per_class<T: Real>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    eps: f64,
) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    Ok(class_sums(pred, target)
        .iter()
        .map(|s| 1.0 - (2.0 * s.overlap + eps) / (s.truth + s.pred + eps))
        .collect())
}

pub fn mean_dice(per_class: &[f64], include_background: bool) -> f64 {
    let used = if include_background {
        per_class
    } else {
        &per_class[1.min(per_class.len())..]
    };
    if used.is_empty() {
        return 0.0;
    }
    used.iter().sum::<f64>() / used.len() as f64
}

pub(crate) fn dice_backward<T: Real>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    eps: f64,
    include_background: bool,
    upstream: f64,
) -> Tensor4<T> {
    let d = pred.dims();
    let sums = class_sums(pred, target);
    let first = if include_background { 0 } else { 1 };
    let used = d.c.saturating_sub(first).max(1) as f64;
    let mut g = Tensor4::zeros(d);
    for (c, s) in sums.iter().enumerate().skip(first) {
        let denom = s.truth + s.pred + eps;
        let num = 2.0 * s.overlap + eps;
        let k = upstream / used / (denom * denom);
        for n in 0..d.n {
            let y = target.plane(n, c);
            for (o, &yv) in g.plane_mut(n, c).iter_mut().zip(y) {
                *o = T::of(-k * (2.0 * yv.as_f64() * denom - num));
            }
        }
    }
    g
}

/// `−Σ y·log(p + δ)` divided by the number of pixels (`batch × h × w`).
pub fn cross_entropy<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<f64> {
    check_pair(pred, target)?;
    let d = pred.dims();
    let pixels = (d.n * d.plane()) as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(_, y)| **y != T::zero())
        .map(|(p, y)| y.as_f64() * (p.as_f64() + LOG_GUARD).ln())
        .sum();
    Ok(-s / pixels)
}

pub(crate) fn cross_entropy_backward<T: Real>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    upstream: f64,
) -> Tensor4<T> {
    let d = pred.dims();
    let k = upstream / (d.n * d.plane()) as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, y)| T::of(-k * y.as_f64() / (p.as_f64() + LOG_GUARD)))
        .collect();
    Tensor4::from_vec(d, data).expect("pred dims")
}

/// Records the full objective on `tape` and returns the scalar loss node
/// together with its breakdown. `outputs` are logits; each head is
/// softmaxed before scoring.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &ForwardOutputs<Var>,
    target: &Tensor4<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let heads = outputs.heads();
    let mut per_output = [0.0; 4];
    let mut terms = Vec::with_capacity(4);
    let mut fused_dice = vec![0.0; NUM_CLASSES];
    let mut fused_ce = 0.0;
    for (i, &head) in heads.iter().enumerate() {
        let is_fused = i == 3;
        if !is_fused && !cfg.side_supervision {
            continue;
        }
        let prob = tape.softmax_channels(head)?;
        let ce = tape.cross_entropy(prob, target)?;
        let dl = tape.dice_loss(prob, target, cfg.epsilon, cfg.include_background)?;
        let term = tape.add(ce, dl)?;
        per_output[i] = tape.value(term).data()[0].as_f64();
        if is_fused {
            fused_ce = tape.value(ce).data()[0].as_f64();
            fused_dice = dice_per_class(tape.value(prob), target, cfg.epsilon)?;
        }
        terms.push(term);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let mut dice_per_class = [0.0; NUM_CLASSES];
    dice_per_class.copy_from_slice(&fused_dice[..NUM_CLASSES]);
    let breakdown = LossBreakdown {
        dice_per_class,
        ce: fused_ce,
        per_output,
        total: per_output.iter().sum(),
        epsilon: cfg.epsilon,
    };
    Ok((total, breakdown))
}
