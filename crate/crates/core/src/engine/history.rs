use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::Metrics;
use crate::error::{Error, Result};
use crate::losses::LossReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_s: f64,
    pub l_ui: f64,
    pub l_uf: f64,
    pub total: f64,
    pub l_gate: f64,
    pub l_uf_branches: Vec<f64>,
    /// Share of unlabeled samples the gate sent to perturbation; absent
    /// when no feature branch runs.
    pub perturb_fraction: Option<f64>,
}

impl StepRecord {
    pub fn new(step: usize, epoch: usize, lr: f64, r: &LossReport, perturb_fraction: Option<f64>) -> Self {
        Self {
            step,
            epoch,
            lr,
            l_s: r.l_s,
            l_ui: r.l_ui,
            l_uf: r.l_uf,
            total: r.total,
            l_gate: r.l_gate,
            l_uf_branches: r.l_uf_branches.clone(),
            perturb_fraction,
        }
    }

    pub fn report(&self) -> LossReport {
        LossReport {
            l_s: self.l_s,
            l_ui: self.l_ui,
            l_uf: self.l_uf,
            total: self.total,
            l_uf_branches: self.l_uf_branches.clone(),
            l_gate: self.l_gate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Last step index of the epoch.
    pub step: usize,
    pub mean_total: f64,
    pub mean_perturb_fraction: Option<f64>,
    pub val: Option<Metrics>,
}

/// One line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Wall-clock of one epoch. Kept apart from the records so that histories
/// of identical runs compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub train_seconds: f64,
    pub val_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<HistoryRecord>,
    pub timing: Vec<EpochTiming>,
}

impl TrainingHistory {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            HistoryRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            HistoryRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn perturb_fractions(&self) -> Vec<f64> {
        self.steps().filter_map(|s| s.perturb_fraction).collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.timing.iter().map(|t| t.train_seconds + t.val_seconds).sum()
    }

    /// Step indices strictly increase and epochs never go back.
    pub fn validate(&self) -> Result<()> {
        let mut last: Option<usize> = None;
        for s in self.steps() {
            if last.is_some_and(|l| s.step <= l) {
                return Err(Error::Parse { what: "history".into(), message: format!("step {} after {last:?}", s.step) });
            }
            last = Some(s.step);
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("history record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse { what: format!("history line {}", i + 1), message: e.to_string() })
            })
            .collect::<Result<Vec<_>>>()?;
        let h = Self { records, timing: Vec::new() };
        h.validate()?;
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn save_timing(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.timing {
            writeln!(f, "{}", serde_json::to_string(t).expect("timing serializes"))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut text = String::new();
        for line in BufReader::new(f).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }
}
