//! Training loop, optimizer, evaluation and checkpoints.

mod checkpoint;
mod config;
mod history;
mod metrics;
mod optim;
mod step;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use config::{
    EpochBasis, ExperimentConfig, GateConfig, GateTraining, LossConfig, ModelConfig, OptimConfig, PerturbConfig, Precision,
    TrainConfig, Variant,
};
pub use history::{EpochRecord, EpochTiming, HistoryRecord, StepRecord, TrainingHistory};
pub use metrics::{evaluate, metrics_from_maps, Confusion, Metrics};
pub use optim::{learning_rate, sgd_update, SgdState};
pub use step::{
    build_step, first_batch_stats, replay_total, sample_step_inputs, step_gradients, total_gradients, MixPlan, StepGraph,
    StepInputs, StepOutcome, StepPlan,
};
pub use train::{train, Cycler, TrainData, TrainOptions, TrainOutcome};

/// One complete step on fresh draws: sampling, forward, backward, update.
pub fn train_step<T: crate::Scalar, R: rand::Rng + ?Sized>(
    labeled: &[crate::model::ImagePair],
    unlabeled: &[crate::model::ImagePair],
    net: &mut crate::model::ChangeNet<T>,
    state: &mut SgdState<T>,
    cfg: &ExperimentConfig,
    lr: f64,
    rng: &mut R,
) -> crate::Result<(crate::losses::LossReport, Option<f64>)> {
    let inputs = sample_step_inputs(labeled, unlabeled, cfg, rng)?;
    let out = step_gradients(net, cfg, &inputs, None)?;
    if !out.report.total.is_finite() {
        return Err(crate::Error::Diverged { step: 0, detail: format!("loss {:?}", out.report) });
    }
    sgd_update(&mut net.params, &out.grads, state, &cfg.optim, lr)?;
    net.params.apply_batch_stats(&out.stats);
    Ok((out.report, out.perturb_fraction))
}
