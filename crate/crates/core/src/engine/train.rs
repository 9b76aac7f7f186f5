use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::{EpochBasis, ExperimentConfig, Variant};
use super::history::{EpochRecord, EpochTiming, HistoryRecord, StepRecord, TrainingHistory};
use super::metrics::{evaluate, Metrics};
use super::optim::{learning_rate, sgd_update, SgdState};
use super::step::{sample_step_inputs, step_gradients};
use crate::data::{Dataset, SplitManifest};
use crate::error::{Error, Result};
use crate::model::{ChangeNet, ImagePair};
use crate::params::derive_seed;
use crate::scalar::Scalar;

/// Endless reshuffled pass over `n` indices.
#[derive(Debug, Clone)]
pub struct Cycler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    pass: usize,
    seed: u64,
    stream: &'static str,
}

impl Cycler {
    pub fn new(n: usize, seed: u64, stream: &'static str) -> Self {
        let mut c = Self { n, order: Vec::new(), pos: 0, pass: 0, seed, stream };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("{}/{}", self.stream, self.pass)));
        self.order.shuffle(&mut rng);
        self.pos = 0;
        self.pass += 1;
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && self.n > 0 {
            if self.pos == self.n {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Samples of one run, resolved from a manifest.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub labeled: Vec<ImagePair>,
    pub unlabeled: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
}

impl TrainData {
    pub fn from_manifest(ds: &Dataset, manifest: &SplitManifest) -> Result<Self> {
        manifest.validate()?;
        let labeled = ds.select(&manifest.labeled_ids)?;
        if let Some(p) = labeled.iter().find(|p| p.label.is_none()) {
            return Err(Error::MissingLabel(p.id.clone()));
        }
        Ok(Self { labeled, unlabeled: ds.select(&manifest.unlabeled_ids)?, val: ds.select(&manifest.val_ids)? })
    }

    pub fn steps_per_epoch(&self, cfg: &ExperimentConfig) -> usize {
        if let Some(s) = cfg.train.steps_per_epoch {
            return s;
        }
        let n = match cfg.train.epoch_basis {
            EpochBasis::Unlabeled if cfg.variant != Variant::SupOnly || !self.unlabeled.is_empty() => {
                self.unlabeled.len() / cfg.train.batch_unlabeled
            }
            _ => self.labeled.len() / cfg.train.batch_labeled,
        };
        n.max(1)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `history.jsonl`, `timing.jsonl`, `config.toml`,
    /// `best.safetensors` and `last.safetensors`.
    pub out_dir: Option<PathBuf>,
}

pub struct TrainOutcome<T> {
    pub last: ChangeNet<T>,
    /// Parameters of the best validation epoch (the last epoch without a
    /// validation set).
    pub best: ChangeNet<T>,
    pub best_epoch: usize,
    pub best_val: Option<Metrics>,
    pub history: TrainingHistory,
}

fn write_outputs<T: Scalar>(opts: &TrainOptions, cfg: &ExperimentConfig, history: &TrainingHistory, nets: &[(&str, &ChangeNet<T>)]) -> Result<()> {
    let Some(dir) = &opts.out_dir else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    history.save(&dir.join("history.jsonl"))?;
    history.save_timing(&dir.join("timing.jsonl"))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    for (name, net) in nets {
        save_checkpoint(net, cfg, &dir.join(format!("{name}.safetensors")))?;
    }
    Ok(())
}

/// Full training run from freshly initialized parameters.
pub fn train<T: Scalar>(cfg: &ExperimentConfig, data: &TrainData, opts: &TrainOptions) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Empty("labeled training set".into()));
    }
    if cfg.variant != Variant::SupOnly && data.unlabeled.is_empty() {
        return Err(Error::Empty(format!("unlabeled training set (variant {})", cfg.variant)));
    }
    let mut net = ChangeNet::<T>::new(cfg.net_config())?;
    let mut state = SgdState::new();
    let mut lab = Cycler::new(data.labeled.len(), cfg.seed, "labeled");
    let mut unl = Cycler::new(data.unlabeled.len(), cfg.seed, "unlabeled");
    let spe = data.steps_per_epoch(cfg);
    let total_steps = spe * cfg.train.epochs;
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, usize, ChangeNet<T>, Metrics)> = None;

    for epoch in 0..cfg.train.epochs {
        let t0 = Instant::now();
        let (mut sum_total, mut fractions) = (0.0, Vec::new());
        for s in 0..spe {
            let step = epoch * spe + s;
            let lb: Vec<ImagePair> = lab.next_batch(cfg.train.batch_labeled).into_iter().map(|i| data.labeled[i].clone()).collect();
            let ub: Vec<ImagePair> = if cfg.variant == Variant::SupOnly {
                Vec::new()
            } else {
                unl.next_batch(cfg.train.batch_unlabeled).into_iter().map(|i| data.unlabeled[i].clone()).collect()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("step/{step}")));
            let inputs = sample_step_inputs(&lb, &ub, cfg, &mut rng)?;
            let out = step_gradients(&net, cfg, &inputs, None)?;
            let lr = learning_rate(&cfg.optim, step, total_steps);
            let record = StepRecord::new(step, epoch, lr, &out.report, out.perturb_fraction);
            history.records.push(HistoryRecord::Step(record));

            let finite = out.report.total.is_finite() && out.report.l_gate.is_finite();
            let update = if finite { sgd_update(&mut net.params, &out.grads, &mut state, &cfg.optim, lr) } else { Ok(()) };
            if let (false, _) | (_, Err(Error::Diverged { .. })) = (finite, &update) {
                let detail = match update {
                    Err(Error::Diverged { detail, .. }) => detail,
                    _ => format!("loss {:?}", out.report),
                };
                log::error!("divergence at step {step}: {detail}");
                write_outputs(opts, cfg, &history, &[("diverged", &net)])?;
                return Err(Error::Diverged { step, detail });
            }
            update?;
            net.params.apply_batch_stats(&out.stats);
            sum_total += out.report.total;
            fractions.extend(out.perturb_fraction);
        }
        let train_seconds = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let last_epoch = epoch + 1 == cfg.train.epochs;
        let val = if !data.val.is_empty() && ((epoch + 1) % cfg.train.val_every == 0 || last_epoch) {
            Some(evaluate(&net, &data.val, cfg.train.eval_batch)?)
        } else {
            None
        };
        if let Some(m) = val {
            if best.as_ref().is_none_or(|b| m.iou > b.0) {
                best = Some((m.iou, epoch, net.clone(), m));
            }
        }
        let mean_fraction = (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64);
        history.records.push(HistoryRecord::Epoch(EpochRecord {
            epoch,
            step: (epoch + 1) * spe - 1,
            mean_total: sum_total / spe as f64,
            mean_perturb_fraction: mean_fraction,
            val,
        }));
        history.timing.push(EpochTiming { epoch, train_seconds, val_seconds: t1.elapsed().as_secs_f64() });
        log::info!(
            "epoch {}/{} loss {:.4}{} ({:.1}s)",
            epoch + 1,
            cfg.train.epochs,
            sum_total / spe as f64,
            val.map_or(String::new(), |m| format!(" val IoU {:.4} OA {:.4}", m.iou, m.oa)),
            train_seconds
        );
    }

    let (best_net, best_epoch, best_val) = match best {
        Some((_, e, n, m)) => (n, e, Some(m)),
        None => (net.clone(), cfg.train.epochs - 1, None),
    };
    write_outputs(opts, cfg, &history, &[("best", &best_net), ("last", &net)])?;
    Ok(TrainOutcome { last: net, best: best_net, best_epoch, best_val, history })
}
