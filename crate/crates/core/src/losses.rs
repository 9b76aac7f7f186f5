//! Pseudo-labelling and the three loss terms of the training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::model::class_probabilities;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default confidence threshold for pseudo-labels.
pub const TAU: f64 = 0.95;

/// Hard pseudo-labels of a batch, thresholded from change probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub height: usize,
    pub width: usize,
    /// `N * H * W` targets in `{0, 1}`.
    pub targets: Vec<u8>,
    /// Change probability each target was derived from.
    pub confidence: Vec<f64>,
    /// Pixels taking part in the loss when confidence masking is on.
    pub valid: Option<Vec<bool>>,
}

impl PseudoLabels {
    pub fn batch_size(&self) -> usize {
        self.targets.len() / (self.height * self.width).max(1)
    }

    pub fn mask(&self, i: usize) -> Mask {
        let n = self.height * self.width;
        Mask { height: self.height, width: self.width, data: self.targets[i * n..(i + 1) * n].to_vec() }
    }

    pub fn masks(&self) -> Vec<Mask> {
        (0..self.batch_size()).map(|i| self.mask(i)).collect()
    }

    /// Replaces the targets of every sample, keeping validity and
    /// confidence aligned pixelwise when `valid` is carried along.
    pub fn with_masks(&self, masks: &[Mask], valid: Option<Vec<bool>>) -> Self {
        Self {
            height: self.height,
            width: self.width,
            targets: masks.iter().flat_map(|m| m.data.iter().copied()).collect(),
            confidence: self.confidence.clone(),
            valid,
        }
    }
}

/// `1` where the change probability is strictly above `tau`, else `0`.
///
/// With `confidence_masking` set, pixels whose larger class probability is
/// below `tau` are excluded from the loss instead of being labelled
/// unchanged.
pub fn make_pseudo_label<T: Scalar>(change_prob: &Tensor<T>, tau: f64, confidence_masking: bool) -> PseudoLabels {
    let shape = change_prob.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let conf: Vec<f64> = change_prob.data().iter().map(|p| p.as_f64()).collect();
    let targets = conf.iter().map(|&p| (p > tau) as u8).collect();
    let valid = confidence_masking.then(|| conf.iter().map(|&p| p.max(1.0 - p) >= tau).collect());
    PseudoLabels { height: h, width: w, targets, confidence: conf, valid }
}

/// Mean pixelwise cross-entropy of `logits` against binary `target`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &[u8], valid: Option<&[bool]>) -> Result<Var> {
    tape.cross_entropy(logits, target, valid)
}

/// Cross-entropy value without building a graph.
pub fn cross_entropy_value<T: Scalar>(logits: &Tensor<T>, target: &[u8]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, target, None)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

/// Supervised loss against ground-truth masks.
pub fn supervised_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[Option<&Mask>]) -> Result<Var> {
    let mut target = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let m = l.ok_or_else(|| Error::MissingLabel(format!("batch index {i}")))?;
        target.extend_from_slice(&m.data);
    }
    tape.cross_entropy(logits, &target, None)
}

/// Mean of the two strong-view cross-entropies against their (mixed)
/// pseudo-labels.
pub fn image_consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    strong1: Var,
    strong2: Var,
    pseudo1: &PseudoLabels,
    pseudo2: &PseudoLabels,
) -> Result<Var> {
    let a = tape.cross_entropy(strong1, &pseudo1.targets, pseudo1.valid.as_deref())?;
    let b = tape.cross_entropy(strong2, &pseudo2.targets, pseudo2.valid.as_deref())?;
    let half = T::of(0.5);
    Ok(tape.weighted_sum(&[(a, half), (b, half)]))
}

/// Mean over auxiliary branches of the cross-entropy against the weak-view
/// pseudo-labels. Returns the loss and the per-branch terms; with no
/// branches the loss is a constant zero.
pub fn feature_consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    branches: &[Var],
    pseudo: &PseudoLabels,
) -> Result<(Var, Vec<Var>)> {
    if branches.is_empty() {
        return Ok((tape.constant(Tensor::scalar(T::zero())), Vec::new()));
    }
    let terms = branches
        .iter()
        .map(|&b| tape.cross_entropy(b, &pseudo.targets, pseudo.valid.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let w = T::one() / T::of(terms.len() as f64);
    let weighted: Vec<_> = terms.iter().map(|&t| (t, w)).collect();
    Ok((tape.weighted_sum(&weighted), terms))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 0.25, lambda3: 0.25 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2, lambda3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, l_s: f64, l_ui: f64, l_uf: f64) -> f64 {
        self.lambda1 * l_s + self.lambda2 * l_ui + self.lambda3 * l_uf
    }
}

/// `lambda1 * l_s + lambda2 * l_ui + lambda3 * l_uf` on the tape.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, l_s: Var, l_ui: Var, l_uf: Var, weights: &LossWeights) -> Var {
    tape.weighted_sum(&[(l_s, T::of(weights.lambda1)), (l_ui, T::of(weights.lambda2)), (l_uf, T::of(weights.lambda3))])
}

/// Loss values of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_ui: f64,
    pub l_uf: f64,
    pub total: f64,
    /// Per-branch feature-consistency terms (length K).
    pub l_uf_branches: Vec<f64>,
    /// Supervised loss of the gate decoder, optimized alongside `total`.
    pub l_gate: f64,
}

impl LossReport {
    /// Largest deviation of `total` from its weighted decomposition.
    pub fn decomposition_error(&self, weights: &LossWeights) -> f64 {
        (self.total - weights.combine(self.l_s, self.l_ui, self.l_uf)).abs()
    }
}

/// Class-probability maps used by VAT as the fixed reference distribution.
pub fn reference_distribution<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    class_probabilities(logits)
}
