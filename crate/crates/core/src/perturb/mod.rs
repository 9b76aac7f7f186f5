//! Feature-level perturbations for the auxiliary decoders and the gate that
//! decides which samples receive them.

mod gate;
mod ops;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gate::{gate_scores, gate_select, gate_select_ids, open_gate, perturb_fraction, quantile, GateVerdict};
pub use ops::{
    component_boxes, context_masking, context_masking_edit, feature_dropout, feature_dropout_edit, feature_noise,
    feature_noise_edit, guided_cutout, guided_cutout_edit, guided_cutout_rect, normalize_rows, object_masking,
    object_masking_edit, random_dropout, random_dropout_edit, random_rect_within, random_unit, resize_labels,
    FeatureEdit, Rect,
};

use crate::error::{Error, Result};
use crate::model::{class_probabilities, ChangeNet, FeatureBundle, Forward, Head};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One feature perturbation and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    FeatureNoise { amplitude: f64 },
    FeatureDropout { quantile_range: [f64; 2] },
    ObjectMasking,
    ContextMasking,
    GuidedCutout { area_range: [f64; 2] },
    IntermediateVat { epsilon: f64, xi: f64 },
    RandomDropout { rate: f64 },
}

impl PerturbationSpec {
    /// The seven default perturbations, in branch order.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::FeatureNoise { amplitude: 0.3 },
            Self::FeatureDropout { quantile_range: [0.6, 0.9] },
            Self::ObjectMasking,
            Self::ContextMasking,
            Self::GuidedCutout { area_range: [0.1, 0.4] },
            Self::IntermediateVat { epsilon: 2.0, xi: 1e-6 },
            Self::RandomDropout { rate: 0.5 },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::FeatureNoise { .. } => "feature_noise",
            Self::FeatureDropout { .. } => "feature_dropout",
            Self::ObjectMasking => "object_masking",
            Self::ContextMasking => "context_masking",
            Self::GuidedCutout { .. } => "guided_cutout",
            Self::IntermediateVat { .. } => "intermediate_vat",
            Self::RandomDropout { .. } => "random_dropout",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name())));
        let ordered = |r: [f64; 2]| 0.0 < r[0] && r[0] <= r[1] && r[1] < 1.0;
        match *self {
            Self::FeatureNoise { amplitude } if !(amplitude > 0.0 && amplitude.is_finite()) => {
                fail(format!("amplitude must be positive, got {amplitude}"))
            }
            Self::FeatureDropout { quantile_range } if !ordered(quantile_range) => {
                fail(format!("quantile_range {quantile_range:?} must be ordered within (0, 1)"))
            }
            Self::GuidedCutout { area_range } if !ordered(area_range) => {
                fail(format!("area_range {area_range:?} must be ordered within (0, 1)"))
            }
            Self::IntermediateVat { epsilon, xi } if !(epsilon > 0.0 && xi > 0.0 && epsilon.is_finite() && xi.is_finite()) => {
                fail(format!("epsilon and xi must be positive, got {epsilon} and {xi}"))
            }
            Self::RandomDropout { rate } if !(rate > 0.0 && rate < 1.0) => fail(format!("rate must lie in (0, 1), got {rate}")),
            _ => Ok(()),
        }
    }
}

/// Which difference features the auxiliary branches perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpTarget {
    #[default]
    D1,
    D4,
    D1AndD4,
}

impl FpTarget {
    fn levels(self) -> &'static [Level] {
        match self {
            FpTarget::D1 => &[Level::D1],
            FpTarget::D4 => &[Level::D4],
            FpTarget::D1AndD4 => &[Level::D1, Level::D4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    D1,
    D4,
}

/// Inputs shared by every operator within one batch.
pub struct PerturbContext<'a, T> {
    pub net: &'a ChangeNet<T>,
    /// Difference features of the weak unlabeled batch.
    pub bundle: &'a FeatureBundle<T>,
    /// Hard pseudo-labels at image resolution, `N * H * W`.
    pub pseudo: &'a [u8],
    pub image_dims: (usize, usize),
    /// Decoder normalization mode for the VAT passes.
    pub batch_stats: bool,
}

impl<T: Scalar> PerturbContext<'_, T> {
    fn features(&self, level: Level) -> &Tensor<T> {
        match level {
            Level::D1 => &self.bundle.d1,
            Level::D4 => &self.bundle.d4,
        }
    }

    fn pseudo_at(&self, level: Level) -> Vec<u8> {
        let (n, _, h, w) = self.features(level).dims4();
        resize_labels(self.pseudo, n, self.image_dims.0, self.image_dims.1, h, w)
    }
}

/// Unit-norm (per sample) direction that most increases the divergence of
/// decoder `head` from its unperturbed prediction, by one power-iteration
/// step from a random start. Parameters are held constant.
#[allow(clippy::too_many_arguments)]
pub fn vat_direction<T: Scalar, R: Rng + ?Sized>(
    net: &ChangeNet<T>,
    head: Head,
    bundle: &FeatureBundle<T>,
    level: Level,
    xi: f64,
    batch_stats: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let target = match level {
        Level::D1 => &bundle.d1,
        Level::D4 => &bundle.d4,
    };
    let (_, _, h1, w1) = bundle.d1.dims4();
    let mut fwd = Forward::new(&net.params, batch_stats, false);
    let (d4, d1) = (fwd.constant(bundle.d4.clone()), fwd.constant(bundle.d1.clone()));
    let clean = net.decode(&mut fwd, head, d4, d1, (h1, w1))?;
    let reference = class_probabilities(fwd.value(clean));

    let start = random_unit::<T, R>(target.shape(), rng);
    let probe = target.zip_map(&start, |x, r| x + T::of(xi) * r)?;
    let mut fwd = Forward::new(&net.params, batch_stats, false);
    let x = fwd.tape.input(probe);
    let (d4, d1) = match level {
        Level::D1 => (fwd.constant(bundle.d4.clone()), x),
        Level::D4 => (x, fwd.constant(bundle.d1.clone())),
    };
    let noisy = net.decode(&mut fwd, head, d4, d1, (h1, w1))?;
    let kl = fwd.tape.kl_to_reference(noisy, &reference)?;
    let mut grads = fwd.tape.backward(kl);
    let mut dir = grads.take(x).unwrap_or_else(|| Tensor::zeros(target.shape()));
    let usable = normalize_rows(&mut dir);
    if usable.iter().any(|&u| !u) {
        let fallback = random_unit::<T, R>(target.shape(), rng);
        for (i, _) in usable.iter().enumerate().filter(|(_, &u)| !u) {
            dir.row_mut(i).copy_from_slice(fallback.row(i));
        }
    }
    Ok(dir)
}

/// `d + epsilon * r` with `r` the adversarial direction for `head`.
#[allow(clippy::too_many_arguments)]
pub fn intermediate_vat<T: Scalar, R: Rng + ?Sized>(
    net: &ChangeNet<T>,
    head: Head,
    bundle: &FeatureBundle<T>,
    level: Level,
    epsilon: f64,
    xi: f64,
    batch_stats: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let target = match level {
        Level::D1 => &bundle.d1,
        Level::D4 => &bundle.d4,
    };
    if epsilon == 0.0 {
        return Ok(target.clone());
    }
    let dir = vat_direction(net, head, bundle, level, xi, batch_stats, rng)?;
    FeatureEdit::shifted(dir.map(|r| r * T::of(epsilon))).apply(target)
}

/// Edits applied to the inputs of one auxiliary branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchEdit<T> {
    pub d1: FeatureEdit<T>,
    pub d4: FeatureEdit<T>,
}

impl<T: Scalar> BranchEdit<T> {
    pub fn identity() -> Self {
        Self { d1: FeatureEdit::identity(), d4: FeatureEdit::identity() }
    }

    pub fn apply(&self, bundle: &FeatureBundle<T>) -> Result<FeatureBundle<T>> {
        Ok(FeatureBundle { d1: self.d1.apply(&bundle.d1)?, d4: self.d4.apply(&bundle.d4)? })
    }
}

/// Edit of one operator on one feature level, for the whole batch.
pub fn operator_edit<T: Scalar, R: Rng + ?Sized>(
    ctx: &PerturbContext<'_, T>,
    branch: usize,
    spec: &PerturbationSpec,
    level: Level,
    rng: &mut R,
) -> Result<FeatureEdit<T>> {
    let d = ctx.features(level);
    let shape = d.shape();
    match *spec {
        PerturbationSpec::FeatureNoise { amplitude } => Ok(feature_noise_edit(shape, rng, amplitude)),
        PerturbationSpec::FeatureDropout { quantile_range } => feature_dropout_edit(d, rng, quantile_range),
        PerturbationSpec::ObjectMasking => object_masking_edit(shape, &ctx.pseudo_at(level)),
        PerturbationSpec::ContextMasking => context_masking_edit(shape, &ctx.pseudo_at(level)),
        PerturbationSpec::GuidedCutout { area_range } => guided_cutout_edit(shape, &ctx.pseudo_at(level), rng, area_range),
        PerturbationSpec::IntermediateVat { epsilon, xi } => {
            if epsilon == 0.0 {
                return Ok(FeatureEdit::identity());
            }
            let dir = vat_direction(ctx.net, Head::Aux(branch), ctx.bundle, level, xi, ctx.batch_stats, rng)?;
            Ok(FeatureEdit::shifted(dir.map(|r| r * T::of(epsilon))))
        }
        PerturbationSpec::RandomDropout { rate } => random_dropout_edit(shape, rng, rate),
    }
}

/// Per-branch edits: branch `k` applies `specs[k]` to the samples the gate
/// marked for perturbation and leaves the others untouched.
pub fn plan_gated_edits<T: Scalar, R: Rng + ?Sized>(
    ctx: &PerturbContext<'_, T>,
    verdicts: &[GateVerdict],
    specs: &[PerturbationSpec],
    target: FpTarget,
    rng: &mut R,
) -> Result<Vec<BranchEdit<T>>> {
    let n = ctx.bundle.d1.shape()[0];
    if verdicts.len() != n {
        return Err(Error::shape(format!("{} verdicts for a batch of {n}", verdicts.len())));
    }
    if specs.len() > ctx.net.config.aux_branches {
        return Err(Error::IndexOutOfRange { index: specs.len() - 1, valid: format!("0..{}", ctx.net.config.aux_branches) });
    }
    let keep: Vec<bool> = verdicts.iter().map(|v| v.perturb).collect();
    if !keep.iter().any(|&k| k) {
        return Ok(vec![BranchEdit::identity(); specs.len()]);
    }
    let mut out = Vec::with_capacity(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        let mut edit = BranchEdit::identity();
        for &level in target.levels() {
            let e = operator_edit(ctx, k, spec, level, rng)?.restrict_rows(&keep);
            match level {
                Level::D1 => edit.d1 = e,
                Level::D4 => edit.d4 = e,
            }
        }
        out.push(edit);
    }
    Ok(out)
}

/// The K perturbed feature batches fed to the auxiliary decoders.
pub fn apply_gated_perturbations<T: Scalar, R: Rng + ?Sized>(
    ctx: &PerturbContext<'_, T>,
    verdicts: &[GateVerdict],
    specs: &[PerturbationSpec],
    target: FpTarget,
    rng: &mut R,
) -> Result<Vec<FeatureBundle<T>>> {
    plan_gated_edits(ctx, verdicts, specs, target, rng)?.iter().map(|e| e.apply(ctx.bundle)).collect()
}

#[cfg(test)]
mod tests;
