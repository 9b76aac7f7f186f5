use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of the gate for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub sample_id: String,
    pub iou_score: f64,
    pub perturb: bool,
}

/// Per-sample change-class IoU between two batches of probability maps.
///
/// Both maps are binarized with `p > bin_threshold`. A sample whose maps
/// both contain no change scores 1.
pub fn gate_scores<T: Scalar>(p_gate: &Tensor<T>, p_main: &Tensor<T>, bin_threshold: f64) -> Result<Vec<f64>> {
    p_gate.expect_same_shape(p_main)?;
    if p_gate.shape().is_empty() {
        return Err(Error::shape("gate scores need a batch dimension"));
    }
    let n = p_gate.shape()[0];
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in p_gate.row(i).iter().zip(p_main.row(i)) {
            let (a, b) = (a.as_f64() > bin_threshold, b.as_f64() > bin_threshold);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        scores.push(if union == 0 { 1.0 } else { inter as f64 / union as f64 });
    }
    Ok(scores)
}

/// Quantile of `values` with linear interpolation between order statistics
/// at position `q * (n - 1)`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(if lo == hi { sorted[lo] } else { sorted[lo] + (sorted[hi] - sorted[lo]) * frac })
}

/// Marks samples with `score >= quantile(scores, q)` for perturbation.
///
/// `inverted` flips the rule to `score < threshold`, falling back to the
/// plain rule when that would select nothing.
pub fn gate_select(scores: &[f64], q: f64, inverted: bool) -> Result<Vec<GateVerdict>> {
    gate_select_ids(scores, &(0..scores.len()).map(|i| i.to_string()).collect::<Vec<_>>(), q, inverted)
}

pub fn gate_select_ids(scores: &[f64], ids: &[String], q: f64, inverted: bool) -> Result<Vec<GateVerdict>> {
    if scores.len() != ids.len() {
        return Err(Error::shape(format!("{} scores for {} ids", scores.len(), ids.len())));
    }
    let threshold = quantile(scores, q)?;
    let mut flags: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    if inverted {
        let inv: Vec<bool> = flags.iter().map(|f| !f).collect();
        if inv.iter().any(|&f| f) {
            flags = inv;
        }
    }
    Ok(scores
        .iter()
        .zip(ids)
        .zip(flags)
        .map(|((&s, id), perturb)| GateVerdict { sample_id: id.clone(), iou_score: s, perturb })
        .collect())
}

/// Every sample perturbed; the gate-disabled setting.
pub fn open_gate(ids: &[String]) -> Vec<GateVerdict> {
    ids.iter().map(|id| GateVerdict { sample_id: id.clone(), iou_score: 1.0, perturb: true }).collect()
}

pub fn perturb_fraction(verdicts: &[GateVerdict]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    verdicts.iter().filter(|v| v.perturb).count() as f64 / verdicts.len() as f64
}
