use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, TAU};
use crate::model::{BackboneKind, NetConfig};
use crate::perturb::{FpTarget, PerturbationSpec};

/// Which loss branches take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SupOnly,
    Feature,
    Image,
    FeatureImage,
    Gtpc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::SupOnly, Variant::Feature, Variant::Image, Variant::FeatureImage, Variant::Gtpc];

    pub fn image_branch(self) -> bool {
        matches!(self, Variant::Image | Variant::FeatureImage | Variant::Gtpc)
    }

    pub fn feature_branch(self) -> bool {
        matches!(self, Variant::Feature | Variant::FeatureImage | Variant::Gtpc)
    }

    pub fn gated(self) -> bool {
        self == Variant::Gtpc
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SupOnly => "sup_only",
            Variant::Feature => "feature",
            Variant::Image => "image",
            Variant::FeatureImage => "feature_image",
            Variant::Gtpc => "gtpc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of sup_only, feature, image, feature_image, gtpc")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneKind::Resnet50, precision: Precision::F32 }
    }
}

/// Signal used to train the gate decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateTraining {
    /// Cross-entropy against ground truth on the labeled batch.
    #[default]
    Supervised,
    /// Cross-entropy against the weak-view pseudo-labels.
    PseudoLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub enabled: bool,
    /// Batch quantile of the IoU scores used as threshold; 0.5 is the median.
    pub quantile: f64,
    pub inverted: bool,
    pub bin_threshold: f64,
    pub training: GateTraining,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { enabled: true, quantile: 0.5, inverted: false, bin_threshold: 0.5, training: GateTraining::Supervised }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub fp_target: FpTarget,
    /// One auxiliary decoder per entry, in order.
    pub specs: Vec<PerturbationSpec>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { fp_target: FpTarget::D1, specs: PerturbationSpec::defaults() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub confidence_masking: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { lambda1: w.lambda1, lambda2: w.lambda2, lambda3: w.lambda3, tau: TAU, confidence_masking: false }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, lambda3: self.lambda3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Polynomial decay `lr * (1 - t/T)^power`; constant when absent.
    pub poly_power: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.02, momentum: 0.9, weight_decay: 1e-4, poly_power: None }
    }
}

/// What one epoch iterates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochBasis {
    /// One pass over the unlabeled set; the labeled loader cycles.
    #[default]
    Unlabeled,
    /// One pass over the labeled set; the unlabeled loader cycles.
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub epoch_basis: EpochBasis,
    /// Overrides the epoch length derived from `epoch_basis`.
    pub steps_per_epoch: Option<usize>,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_labeled: 4,
            batch_unlabeled: 4,
            epoch_basis: EpochBasis::Unlabeled,
            steps_per_epoch: None,
            val_every: 1,
            eval_batch: 8,
        }
    }
}

/// Every setting of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub gate: GateConfig,
    pub perturb: PerturbConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Gtpc,
            seed: 0,
            model: ModelConfig::default(),
            gate: GateConfig::default(),
            perturb: PerturbConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small CPU setting: tiny backbone on 64x64 crops.
    pub fn desk(variant: Variant, seed: u64) -> Self {
        let mut c = Self { variant, seed, ..Self::default() };
        c.model.backbone = BackboneKind::Tiny;
        c.augment.crop_size = 64;
        c.apply_variant();
        c
    }

    /// Forces the loss weights implied by the variant: supervised-only runs
    /// use `(1, 0, 0)`.
    pub fn apply_variant(&mut self) {
        if self.variant == Variant::SupOnly {
            self.loss.lambda1 = 1.0;
            self.loss.lambda2 = 0.0;
            self.loss.lambda3 = 0.0;
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        if self.variant == Variant::SupOnly && variant != Variant::SupOnly {
            c.loss = LossConfig { tau: self.loss.tau, confidence_masking: self.loss.confidence_masking, ..LossConfig::default() };
        }
        c.variant = variant;
        c.apply_variant();
        c
    }

    /// Number of auxiliary decoders in the network.
    pub fn aux_branches(&self) -> usize {
        self.perturb.specs.len()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig::for_kind(self.model.backbone, self.aux_branches(), crate::params::derive_seed(self.seed, "init"))
    }

    /// Gate verdicts are computed (rather than all set to perturb).
    pub fn gate_active(&self) -> bool {
        self.variant.gated() && self.gate.enabled
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.loss.weights();
        w.validate()?;
        if self.variant == Variant::SupOnly && (w.lambda2 != 0.0 || w.lambda3 != 0.0) {
            return Err(Error::Config("sup_only requires lambda2 = lambda3 = 0".into()));
        }
        if !(0.0..=1.0).contains(&self.loss.tau) {
            return Err(Error::Config(format!("tau {} must lie in [0, 1]", self.loss.tau)));
        }
        if !(0.0..=1.0).contains(&self.gate.quantile) {
            return Err(Error::Config(format!("gate.quantile {} must lie in [0, 1]", self.gate.quantile)));
        }
        if !(0.0..1.0).contains(&self.gate.bin_threshold) {
            return Err(Error::Config(format!("gate.bin_threshold {} must lie in [0, 1)", self.gate.bin_threshold)));
        }
        for s in &self.perturb.specs {
            s.validate()?;
        }
        if self.variant.feature_branch() && self.perturb.specs.is_empty() {
            return Err(Error::Config(format!("variant {} needs at least one perturbation spec", self.variant)));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.momentum >= 0.0 && o.momentum < 1.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("optimizer settings {o:?} out of range")));
        }
        if o.poly_power.is_some_and(|p| !(p > 0.0)) {
            return Err(Error::Config("optim.poly_power must be positive".into()));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_labeled == 0 || t.batch_unlabeled == 0 || t.val_every == 0 || t.eval_batch == 0 {
            return Err(Error::Config("train: epochs, batch sizes, val_every and eval_batch must be positive".into()));
        }
        if t.steps_per_epoch == Some(0) {
            return Err(Error::Config("train.steps_per_epoch must be positive".into()));
        }
        if self.variant.image_branch() && t.batch_unlabeled < 2 && self.augment.cutmix_prob > 0.0 {
            log::warn!("batch_unlabeled < 2: cutmix has no donor and is skipped");
        }
        self.augment.validate()?;
        let stride = self.net_config().backbone.s4();
        if self.augment.crop_size % stride != 0 {
            return Err(Error::NotDivisible { height: self.augment.crop_size, width: self.augment.crop_size, stride });
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Stable hexadecimal digest of the canonical serialized form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::params::name_hash(&text))
    }
}
