//! Point-label loss, reliability gating and the cross-branch pseudo-label loss.
//!
//! Loss functions return the value together with its gradient w.r.t. the
//! logits that produced the probability map, since `d(-log p_c)/d logits = p - e_c`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::PointLabelSet;
use crate::math;
use crate::network::LogitMap;
use crate::synth::IGNORE_LABEL;

/// Per-pixel class probabilities, `C x H x W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, class: usize, y: usize, x: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Class index per pixel, or [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl PseudoLabelMap {
    pub fn ignored(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![IGNORE_LABEL; height * width],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE_LABEL).count()
    }
}

/// A loss value with its gradient w.r.t. the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set when nothing contributed (empty labels, all-ignored targets).
    pub degenerate: bool,
}

pub fn softmax_probs(logits: &LogitMap) -> Result<ProbMap> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let n = logits.pixels();
    let c = logits.classes;
    let mut data = vec![0.0; c * n];
    for i in 0..n {
        let max = (0..c).map(|k| logits.data[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = math::exp(logits.data[k * n + i] - max);
            data[k * n + i] = e;
            sum += e;
        }
        for k in 0..c {
            data[k * n + i] /= sum;
        }
    }
    Ok(ProbMap {
        classes: c,
        height: logits.height,
        width: logits.width,
        data,
    })
}

#[inline]
fn neg_log(p: f64) -> f64 {
    -math::ln(p.max(f64::MIN_POSITIVE))
}

/// Mean of `-log p` over labeled points, for one branch.
pub fn point_cross_entropy(probs: &ProbMap, labels: &PointLabelSet) -> Result<LossGrad> {
    let n = probs.pixels();
    let mut grad = vec![0.0; probs.data.len()];
    if labels.is_empty() {
        return Ok(LossGrad {
            value: 0.0,
            grad,
            degenerate: true,
        });
    }
    let scale = 1.0 / labels.len() as f64;
    let mut value = 0.0;
    for p in &labels.points {
        let (x, y, c) = (usize::from(p.x), usize::from(p.y), usize::from(p.class));
        if x >= probs.width || y >= probs.height || c >= probs.classes {
            return Err(Error::invalid("point label outside the probability map"));
        }
        let i = y * probs.width + x;
        value += neg_log(probs.data[c * n + i]);
        for k in 0..probs.classes {
            grad[k * n + i] += scale * probs.data[k * n + i];
        }
        grad[c * n + i] -= scale;
    }
    Ok(LossGrad {
        value: value * scale,
        grad,
        degenerate: false,
    })
}

/// Point-supervised loss over both branches. The returned pair holds the
/// gradients for the forward and backward logits.
pub fn weak_loss(probs_f: &ProbMap, probs_b: &ProbMap, labels: &PointLabelSet) -> Result<(LossGrad, LossGrad)> {
    let mut f = point_cross_entropy(probs_f, labels)?;
    let mut b = point_cross_entropy(probs_b, labels)?;
    let value = 0.5 * (f.value + b.value);
    f.grad.iter_mut().chain(b.grad.iter_mut()).for_each(|g| *g *= 0.5);
    f.value = value;
    b.value = value;
    Ok((f, b))
}

pub fn reliability(probs: &ProbMap) -> ReliabilityMap {
    let n = probs.pixels();
    let data = (0..n)
        .map(|i| (0..probs.classes).map(|k| probs.data[k * n + i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    ReliabilityMap {
        height: probs.height,
        width: probs.width,
        data,
    }
}

/// Argmax class where the max probability strictly exceeds `threshold`.
pub fn pseudo_gt(probs: &ProbMap, threshold: f64) -> Result<PseudoLabelMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("pseudo-label threshold must lie in (0, 1)"));
    }
    let n = probs.pixels();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..probs.classes {
                if probs.data[k * n + i] > probs.data[best * n + i] {
                    best = k;
                }
            }
            if probs.data[best * n + i] > threshold {
                best as u8
            } else {
                IGNORE_LABEL
            }
        })
        .collect();
    Ok(PseudoLabelMap {
        height: probs.height,
        width: probs.width,
        data,
    })
}

/// Mean `-log p` of the target class over non-ignored pixels; 0 when every
/// pixel is ignored. Targets are constants.
pub fn masked_cross_entropy(probs: &ProbMap, targets: &PseudoLabelMap) -> Result<LossGrad> {
    if (probs.height, probs.width) != (targets.height, targets.width) {
        return Err(Error::ShapeMismatch {
            context: "masked_cross_entropy",
            expected: vec![probs.height, probs.width],
            actual: vec![targets.height, targets.width],
        });
    }
    let n = probs.pixels();
    let mut grad = vec![0.0; probs.data.len()];
    let valid = targets.valid_count();
    if valid == 0 {
        return Ok(LossGrad {
            value: 0.0,
            grad,
            degenerate: true,
        });
    }
    let scale = 1.0 / valid as f64;
    let mut value = 0.0;
    for (i, &t) in targets.data.iter().enumerate() {
        if t == IGNORE_LABEL {
            continue;
        }
        let c = usize::from(t);
        if c >= probs.classes {
            return Err(Error::invalid("pseudo label outside the class range"));
        }
        value += neg_log(probs.data[c * n + i]);
        for k in 0..probs.classes {
            grad[k * n + i] = scale * probs.data[k * n + i];
        }
        grad[c * n + i] -= scale;
    }
    Ok(LossGrad {
        value: value * scale,
        grad,
        degenerate: false,
    })
}

/// Cross-branch loss: each branch learns from the other's pseudo labels.
/// Returns `(value, forward part, backward part)`; the parts carry the
/// gradients for their own logits, already halved.
pub fn dual_loss(
    probs_f: &ProbMap,
    pgt_b: &PseudoLabelMap,
    probs_b: &ProbMap,
    pgt_f: &PseudoLabelMap,
) -> Result<(f64, LossGrad, LossGrad)> {
    let mut f = masked_cross_entropy(probs_f, pgt_b)?;
    let mut b = masked_cross_entropy(probs_b, pgt_f)?;
    for part in [&mut f, &mut b] {
        part.value *= 0.5;
        part.grad.iter_mut().for_each(|g| *g *= 0.5);
    }
    Ok((f.value + b.value, f, b))
}

/// Nearest sampling at the centre offset `stride / 2` of each cell.
pub fn downsample_labels(map: &PseudoLabelMap, stride: usize) -> PseudoLabelMap {
    let (h, w) = (map.height / stride, map.width / stride);
    let off = stride / 2;
    let data = (0..h * w)
        .map(|i| map.data[(i / w * stride + off) * map.width + i % w * stride + off])
        .collect();
    PseudoLabelMap { height: h, width: w, data }
}

pub fn downsample_reliability(map: &ReliabilityMap, stride: usize) -> ReliabilityMap {
    let (h, w) = (map.height / stride, map.width / stride);
    let off = stride / 2;
    let data = (0..h * w)
        .map(|i| map.data[(i / w * stride + off) * map.width + i % w * stride + off])
        .collect();
    ReliabilityMap { height: h, width: w, data }
}
