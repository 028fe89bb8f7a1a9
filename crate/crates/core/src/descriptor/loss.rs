//! Training objectives and the descriptor distance.

use serde::{Deserialize, Serialize};

use super::DescriptorError;
use crate::radar::{wrap_angle, Pose2};

/// Probability clamp applied before taking logs.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Detection weight in the multi-task total.
    pub alpha: f64,
    /// Closure weight in the multi-task total.
    pub beta: f64,
    pub lambda_xy: f64,
    pub lambda_theta: f64,
    /// Triplet margin.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda_xy: 1.0,
            lambda_theta: 1.0,
            delta: 0.5,
        }
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64, DescriptorError> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(DescriptorError::LengthMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    let mut sum = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        if y > 1 {
            return Err(DescriptorError::InvalidLabel(y));
        }
        if !p.is_finite() {
            return Err(DescriptorError::NonFinite);
        }
        let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let y = y as f64;
        sum += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(-sum / probs.len() as f64)
}

/// Weighted mean planar translation error plus weighted mean absolute
/// wrapped heading error, over the samples selected by `positive_mask`.
/// Masked-out samples contribute nothing.
pub fn closure_loss(
    pred: &[Pose2],
    truth: &[Pose2],
    positive_mask: &[bool],
    weights: &LossWeights,
) -> Result<f64, DescriptorError> {
    if pred.len() != truth.len() || pred.len() != positive_mask.len() {
        return Err(DescriptorError::LengthMismatch {
            left: pred.len(),
            right: truth.len().min(positive_mask.len()),
        });
    }
    let mut n = 0usize;
    let (mut trans, mut rot) = (0.0, 0.0);
    for ((p, t), &keep) in pred.iter().zip(truth).zip(positive_mask) {
        if !keep {
            continue;
        }
        n += 1;
        trans += (t.x - p.x).hypot(t.y - p.y);
        rot += wrap_angle(t.theta - p.theta).abs();
    }
    if n == 0 {
        return Err(DescriptorError::EmptyMask);
    }
    let n = n as f64;
    Ok(weights.lambda_xy * trans / n + weights.lambda_theta * rot / n)
}

pub fn dmtl_total_loss(l_detection: f64, l_closure: f64, weights: &LossWeights) -> Result<f64, DescriptorError> {
    if !(l_detection.is_finite() && l_closure.is_finite()) {
        return Err(DescriptorError::NonFinite);
    }
    Ok(weights.alpha * l_detection + weights.beta * l_closure)
}

/// `1 - u.v / (|u| |v|)`, in [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, DescriptorError> {
    if u.len() != v.len() {
        return Err(DescriptorError::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if !(nu > 0.0 && nv > 0.0) {
        return Err(DescriptorError::ZeroNorm);
    }
    Ok((1.0 - dot / (nu.sqrt() * nv.sqrt())).clamp(0.0, 2.0))
}

/// Hinge `max(0, d(a, p) - d(a, n) + delta)` under cosine distance.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], delta: f64) -> Result<f64, DescriptorError> {
    if !(delta >= 0.0) {
        return Err(DescriptorError::InvalidArgument("delta must be >= 0".into()));
    }
    let dp = cosine_distance(a, p)?;
    let dn = cosine_distance(a, n)?;
    Ok((dp - dn + delta).max(0.0))
}
