use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::model::{ChangeNet, ImagePair};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel counts of the change class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    /// Counts from predictions binarized at `p > 0.5`.
    pub fn from_probs<T: Scalar>(probs: &[T], label: &[u8]) -> Result<Self> {
        if probs.len() != label.len() {
            return Err(Error::shape(format!("{} predictions vs {} labels", probs.len(), label.len())));
        }
        let mut c = Self::default();
        for (p, &l) in probs.iter().zip(label) {
            c.add(p.as_f64() > 0.5, l == 1);
        }
        Ok(c)
    }

    pub fn from_binary(pred: &[u8], label: &[u8]) -> Result<Self> {
        if pred.len() != label.len() {
            return Err(Error::shape(format!("{} predictions vs {} labels", pred.len(), label.len())));
        }
        let mut c = Self::default();
        for (&p, &l) in pred.iter().zip(label) {
            c.add(p == 1, l == 1);
        }
        Ok(c)
    }

    fn add(&mut self, pred: bool, label: bool) {
        match (pred, label) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `TP / (TP + FP + FN)`; 1 when there is neither change nor predicted
    /// change.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 { 1.0 } else { self.tp as f64 / d as f64 }
    }

    pub fn oa(&self) -> f64 {
        if self.total() == 0 { 0.0 } else { (self.tp + self.tn) as f64 / self.total() as f64 }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics { iou: self.iou(), oa: self.oa(), confusion: *self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub oa: f64,
    pub confusion: Confusion,
}

/// Metrics of probability maps against masks, from global counts.
pub fn metrics_from_maps<T: Scalar>(probs: &[Tensor<T>], labels: &[&Mask]) -> Result<Metrics> {
    if probs.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape(format!("{} maps vs {} labels", probs.len(), labels.len())));
    }
    let mut c = Confusion::default();
    for (p, l) in probs.iter().zip(labels) {
        c.merge(&Confusion::from_probs(p.data(), &l.data)?);
    }
    Ok(c.metrics())
}

/// IoU and OA of the main head over labeled samples.
pub fn evaluate<T: Scalar>(net: &ChangeNet<T>, samples: &[ImagePair], batch: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let labels = samples
        .iter()
        .map(|s| s.label.as_ref().ok_or_else(|| Error::MissingLabel(s.id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let probs = net.predict_pairs(samples, batch)?;
    metrics_from_maps(&probs, &labels)
}
