//! Detection losses: penalty-reduced pixelwise focal loss on the center
//! heatmaps, masked L1 on offsets and sizes.

use serde::{Deserialize, Serialize};

use super::tensor::Scalar;

/// Predictions are clamped to `[CLIP, 1-CLIP]` before the logs.
pub const CLIP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub heatmap: f32,
    pub offset: f32,
    pub size: f32,
    pub focal_alpha: f32,
    pub focal_beta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            heatmap: 1.0,
            offset: 1.0,
            size: 0.1,
            focal_alpha: 2.0,
            focal_beta: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), super::NetError> {
        let vals = [self.heatmap, self.offset, self.size, self.focal_alpha, self.focal_beta];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(super::NetError::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.focal_alpha <= 0.0 || self.focal_beta <= 0.0 {
            return Err(super::NetError::InvalidConfig(
                "focal exponents must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Loss terms for one image, in scalar-independent f64.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub heatmap: f64,
    pub offset: f64,
    pub size: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Small positive integer exponents take the exact pow path.
fn pow_t<T: Scalar>(x: T, e: f64) -> T {
    if e.fract() == 0.0 && (0.0..=8.0).contains(&e) {
        x.powi(e as i32)
    } else {
        x.powf(T::from_f64(e))
    }
}

/// Focal loss over per-class center heatmaps. `pred` holds probabilities in
/// (0,1); `target` is the splat map where exactly the center cells equal 1.
/// Normalized by the number of center cells, floored at one.
pub fn focal_loss<T: Scalar>(pred: &[T], target: &[T], alpha: f64, beta: f64) -> T {
    assert_eq!(pred.len(), target.len(), "heatmap sizes");
    let one = T::one();
    let lo = T::from_f64(CLIP);
    let hi = T::from_f64(1.0 - CLIP);
    let mut acc = T::zero();
    let mut n_pos = 0usize;
    for (p, t) in pred.iter().zip(target) {
        let p = (*p).max(lo).min(hi);
        if *t == one {
            n_pos += 1;
            acc += pow_t(one - p, alpha) * p.ln();
        } else {
            acc += pow_t(one - *t, beta) * pow_t(p, alpha) * (one - p).ln();
        }
    }
    -acc / T::from_f64(n_pos.max(1) as f64)
}

/// d(focal_loss)/d(pred). Cells pushed outside the clip range carry zero
/// gradient, matching the clamp in the forward pass.
pub fn focal_loss_backward<T: Scalar>(pred: &[T], target: &[T], alpha: f64, beta: f64) -> Vec<T> {
    assert_eq!(pred.len(), target.len(), "heatmap sizes");
    let one = T::one();
    let lo = T::from_f64(CLIP);
    let hi = T::from_f64(1.0 - CLIP);
    let n_pos = target.iter().filter(|t| **t == one).count();
    let inv_n = T::from_f64(1.0 / n_pos.max(1) as f64);
    pred.iter()
        .zip(target)
        .map(|(p_raw, t)| {
            if *p_raw <= lo || *p_raw >= hi {
                return T::zero();
            }
            let p = *p_raw;
            let d = if *t == one {
                // d/dp[(1-p)^a ln p] = -a (1-p)^(a-1) ln p + (1-p)^a / p
                pow_t(one - p, alpha) / p - T::from_f64(alpha) * pow_t(one - p, alpha - 1.0) * p.ln()
            } else {
                // d/dp[(1-t)^b p^a ln(1-p)] = (1-t)^b [a p^(a-1) ln(1-p) - p^a/(1-p)]
                pow_t(one - *t, beta)
                    * (T::from_f64(alpha) * pow_t(p, alpha - 1.0) * (one - p).ln()
                        - pow_t(p, alpha) / (one - p))
            };
            -d * inv_n
        })
        .collect()
}

/// L1 over the two map channels, restricted to center cells; denominator is
/// `2 * max(centers, 1)` so the value is a mean over counted components.
pub fn masked_l1_loss<T: Scalar>(pred: &[T], target: &[T], mask: &[bool]) -> T {
    assert_eq!(pred.len(), target.len(), "map sizes");
    assert_eq!(pred.len(), 2 * mask.len(), "two channels per cell");
    let cells = mask.len();
    let mut acc = T::zero();
    let mut n = 0usize;
    for (cell, m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        n += 1;
        acc += (pred[cell] - target[cell]).abs();
        acc += (pred[cells + cell] - target[cells + cell]).abs();
    }
    acc / T::from_f64((2 * n.max(1)) as f64)
}

pub fn masked_l1_loss_backward<T: Scalar>(pred: &[T], target: &[T], mask: &[bool]) -> Vec<T> {
    assert_eq!(pred.len(), target.len(), "map sizes");
    assert_eq!(pred.len(), 2 * mask.len(), "two channels per cell");
    let cells = mask.len();
    let n = mask.iter().filter(|m| **m).count();
    let scale = T::from_f64(1.0 / (2 * n.max(1)) as f64);
    let mut grad = vec![T::zero(); pred.len()];
    for (cell, m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for idx in [cell, cells + cell] {
            let d = pred[idx] - target[idx];
            grad[idx] = if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            };
        }
    }
    grad
}
