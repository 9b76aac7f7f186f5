//! One optimization step, split into model-independent sampling
//! ([`sample_step_inputs`]), graph construction with a replayable
//! [`StepPlan`], and the parameter update.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, GateTraining, Variant};
use crate::augment::{augment_views, cutmix_batch, paste, weak_augment};
use crate::autodiff::{BatchStats, Var};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::losses::{
    feature_consistency_loss, image_consistency_loss, make_pseudo_label, supervised_loss, total_loss, LossReport,
    PseudoLabels,
};
use crate::model::{change_probability, stack_images, ChangeNet, FeatureBundle, Forward, Head, ImagePair};
use crate::perturb::{
    gate_scores, gate_select_ids, open_gate, perturb_fraction, plan_gated_edits, BranchEdit, FeatureEdit, GateVerdict,
    PerturbContext,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mixed boxes of one strong view of the unlabeled batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixPlan {
    pub masks: Vec<Option<Mask>>,
    pub donors: Vec<Option<usize>>,
}

impl MixPlan {
    /// Pastes each donor's pseudo-label (and validity) into the sample's box.
    pub fn mix_labels(&self, pseudo: &PseudoLabels) -> PseudoLabels {
        let own = pseudo.masks();
        let mut mixed = own.clone();
        let mut valid = pseudo.valid.clone();
        let plane = pseudo.height * pseudo.width;
        for (i, (m, d)) in self.masks.iter().zip(&self.donors).enumerate() {
            let (Some(m), Some(d)) = (m, d) else { continue };
            paste(&mut mixed[i].data, &own[*d].data, m, 1);
            if let (Some(v), Some(src)) = (valid.as_mut(), pseudo.valid.as_ref()) {
                let donor = src[d * plane..(d + 1) * plane].to_vec();
                paste(&mut v[i * plane..(i + 1) * plane], &donor, m, 1);
            }
        }
        pseudo.with_masks(&mixed, valid)
    }
}

/// Every random draw of a step that does not depend on the model.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    /// Weakly augmented labeled batch.
    pub labeled: Vec<ImagePair>,
    /// Weakly augmented unlabeled batch.
    pub weak: Vec<ImagePair>,
    /// The two strong views after mixing.
    pub strong: [Vec<ImagePair>; 2],
    pub mix: [MixPlan; 2],
    /// Seed of the perturbation operators.
    pub perturb_seed: u64,
}

impl StepInputs {
    pub fn unlabeled_ids(&self) -> Vec<String> {
        self.weak.iter().map(|p| p.id.clone()).collect()
    }
}

pub fn sample_step_inputs<R: Rng + ?Sized>(
    labeled: &[ImagePair],
    unlabeled: &[ImagePair],
    cfg: &ExperimentConfig,
    rng: &mut R,
) -> Result<StepInputs> {
    if labeled.is_empty() {
        return Err(Error::Empty("labeled batch".into()));
    }
    let lab = labeled.iter().map(|p| weak_augment(p, &cfg.augment, rng)).collect::<Result<Vec<_>>>()?;
    let mut inputs = StepInputs {
        labeled: lab,
        weak: Vec::new(),
        strong: [Vec::new(), Vec::new()],
        mix: [MixPlan::default(), MixPlan::default()],
        perturb_seed: 0,
    };
    if cfg.variant == Variant::SupOnly {
        return Ok(inputs);
    }
    if unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled batch".into()));
    }
    let views = unlabeled.iter().map(|p| augment_views(p, &cfg.augment, rng)).collect::<Result<Vec<_>>>()?;
    inputs.weak = views.iter().map(|v| v.weak.clone()).collect();
    if cfg.variant.image_branch() {
        let (h, w) = inputs.weak[0].dims();
        let blank = vec![Mask::zeros(h, w); views.len()];
        let s1: Vec<ImagePair> = views.iter().map(|v| v.strong1.clone()).collect();
        let s2: Vec<ImagePair> = views.iter().map(|v| v.strong2.clone()).collect();
        let m1 = cutmix_batch(&s1, &blank, &cfg.augment, rng)?;
        let m2 = cutmix_batch(&s2, &blank, &cfg.augment, rng)?;
        inputs.mix = [MixPlan { masks: m1.masks, donors: m1.donors }, MixPlan { masks: m2.masks, donors: m2.donors }];
        inputs.strong = [m1.images, m2.images];
    }
    inputs.perturb_seed = rng.random();
    Ok(inputs)
}

/// Model-dependent decisions of a step. Once derived they can be replayed
/// so that the loss becomes a smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan<T> {
    pub pseudo: Option<PseudoLabels>,
    pub pseudo_mixed: Option<[PseudoLabels; 2]>,
    pub verdicts: Vec<GateVerdict>,
    pub edits: Vec<BranchEdit<T>>,
}

impl<T> Default for StepPlan<T> {
    fn default() -> Self {
        Self { pseudo: None, pseudo_mixed: None, verdicts: Vec::new(), edits: Vec::new() }
    }
}

/// The built graph of one step.
pub struct StepGraph<'a, T> {
    pub fwd: Forward<'a, T>,
    /// `total` plus the gate decoder's own loss when it is trained.
    pub objective: Var,
    pub total: Var,
    pub report: LossReport,
    pub plan: StepPlan<T>,
    pub perturb_fraction: Option<f64>,
}

fn pair_tensors<T: Scalar>(fwd: &mut Forward<'_, T>, pairs: &[ImagePair]) -> Result<(Var, Var)> {
    let a = stack_images::<T>(&pairs.iter().map(|p| &p.image_a).collect::<Vec<_>>())?;
    let b = stack_images::<T>(&pairs.iter().map(|p| &p.image_b).collect::<Vec<_>>())?;
    Ok((fwd.constant(a), fwd.constant(b)))
}

fn scalar<T: Scalar>(fwd: &Forward<'_, T>, v: Var) -> f64 {
    fwd.value(v).data()[0].as_f64()
}

fn edit_var<T: Scalar>(fwd: &mut Forward<'_, T>, x: Var, edit: &FeatureEdit<T>) -> Result<Var> {
    if edit.is_identity() {
        return Ok(x);
    }
    fwd.tape.scale_shift(x, edit.scale.clone(), edit.shift.as_ref())
}

/// Builds the loss graph of one step. With `plan` given, pseudo-labels,
/// gate verdicts and perturbation edits are taken from it instead of being
/// derived from the current parameters.
pub fn build_step<'a, T: Scalar>(
    net: &'a ChangeNet<T>,
    cfg: &ExperimentConfig,
    inputs: &StepInputs,
    plan: Option<&StepPlan<T>>,
) -> Result<StepGraph<'a, T>> {
    let mut fwd = Forward::train(&net.params);
    let mut out_plan = plan.cloned().unwrap_or_default();
    let weights = cfg.loss.weights();
    let train_gate = cfg.gate_active();

    let (la, lb) = pair_tensors(&mut fwd, &inputs.labeled)?;
    let (h, w) = inputs.labeled[0].dims();
    let (lab_logits, lab_bundle) = net.logits(&mut fwd, Head::Main, la, lb)?;
    let labels: Vec<Option<&Mask>> = inputs.labeled.iter().map(|p| p.label.as_ref()).collect();
    let l_s = supervised_loss(&mut fwd.tape, lab_logits, &labels)?;

    let mut l_gate = None;
    if train_gate && cfg.gate.training == GateTraining::Supervised {
        let d4 = fwd.tape.detach(lab_bundle.d4);
        let d1 = fwd.tape.detach(lab_bundle.d1);
        let g = net.decode(&mut fwd, Head::Gate, d4, d1, (h, w))?;
        l_gate = Some(supervised_loss(&mut fwd.tape, g, &labels)?);
    }

    let zero = fwd.constant(Tensor::scalar(T::zero()));
    let (mut l_ui, mut l_uf, mut branch_vars) = (zero, zero, Vec::new());
    let mut fraction = None;

    if cfg.variant != Variant::SupOnly {
        let (ua, ub) = pair_tensors(&mut fwd, &inputs.weak)?;
        let (uh, uw) = inputs.weak[0].dims();
        let weak = net.features(&mut fwd, ua, ub)?;
        let cd4 = fwd.tape.detach(weak.d4);
        let cd1 = fwd.tape.detach(weak.d1);

        if out_plan.pseudo.is_none() {
            let main = net.decode(&mut fwd, Head::Main, cd4, cd1, (uh, uw))?;
            let p_main = change_probability(fwd.value(main));
            let pseudo = make_pseudo_label(&p_main, cfg.loss.tau, cfg.loss.confidence_masking);
            let ids = inputs.unlabeled_ids();
            let mut gate_logits = None;
            if cfg.variant.feature_branch() {
                out_plan.verdicts = if cfg.gate_active() {
                    let g = net.decode(&mut fwd, Head::Gate, cd4, cd1, (uh, uw))?;
                    gate_logits = Some(g);
                    let p_gate = change_probability(fwd.value(g));
                    let scores = gate_scores(&p_gate, &p_main, cfg.gate.bin_threshold)?;
                    gate_select_ids(&scores, &ids, cfg.gate.quantile, cfg.gate.inverted)?
                } else {
                    open_gate(&ids)
                };
            }
            if train_gate && cfg.gate.training == GateTraining::PseudoLabel {
                let g = match gate_logits {
                    Some(g) => g,
                    None => net.decode(&mut fwd, Head::Gate, cd4, cd1, (uh, uw))?,
                };
                l_gate = Some(fwd.tape.cross_entropy(g, &pseudo.targets, pseudo.valid.as_deref())?);
            }
            if cfg.variant.image_branch() {
                out_plan.pseudo_mixed = Some([inputs.mix[0].mix_labels(&pseudo), inputs.mix[1].mix_labels(&pseudo)]);
            }
            if cfg.variant.feature_branch() {
                let bundle = FeatureBundle { d1: fwd.value(weak.d1).clone(), d4: fwd.value(weak.d4).clone() };
                let ctx = PerturbContext {
                    net,
                    bundle: &bundle,
                    pseudo: &pseudo.targets,
                    image_dims: (uh, uw),
                    batch_stats: true,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(inputs.perturb_seed);
                out_plan.edits =
                    plan_gated_edits(&ctx, &out_plan.verdicts, &cfg.perturb.specs, cfg.perturb.fp_target, &mut rng)?;
            }
            out_plan.pseudo = Some(pseudo);
        } else if train_gate && cfg.gate.training == GateTraining::PseudoLabel {
            let pseudo = out_plan.pseudo.as_ref().expect("checked above");
            let g = net.decode(&mut fwd, Head::Gate, cd4, cd1, (uh, uw))?;
            l_gate = Some(fwd.tape.cross_entropy(g, &pseudo.targets, pseudo.valid.as_deref())?);
        }

        if cfg.variant.image_branch() {
            let mixed = out_plan.pseudo_mixed.as_ref().ok_or_else(|| Error::Config("plan lacks mixed labels".into()))?;
            let mut views = Vec::with_capacity(2);
            for s in &inputs.strong {
                let (sa, sb) = pair_tensors(&mut fwd, s)?;
                views.push(net.logits(&mut fwd, Head::Main, sa, sb)?.0);
            }
            l_ui = image_consistency_loss(&mut fwd.tape, views[0], views[1], &mixed[0], &mixed[1])?;
        }

        if cfg.variant.feature_branch() {
            let pseudo = out_plan.pseudo.as_ref().expect("pseudo-labels derived above");
            if out_plan.edits.len() != cfg.aux_branches() {
                return Err(Error::Config(format!("plan has {} edits for {} branches", out_plan.edits.len(), cfg.aux_branches())));
            }
            let mut logits = Vec::with_capacity(out_plan.edits.len());
            for (k, edit) in out_plan.edits.iter().enumerate() {
                let d1 = edit_var(&mut fwd, weak.d1, &edit.d1)?;
                let d4 = edit_var(&mut fwd, weak.d4, &edit.d4)?;
                logits.push(net.decode(&mut fwd, Head::Aux(k), d4, d1, (uh, uw))?);
            }
            let (l, terms) = feature_consistency_loss(&mut fwd.tape, &logits, pseudo)?;
            l_uf = l;
            branch_vars = terms;
            fraction = Some(perturb_fraction(&out_plan.verdicts));
        }
    }

    let total = total_loss(&mut fwd.tape, l_s, l_ui, l_uf, &weights);
    let objective = match l_gate {
        Some(g) => fwd.tape.weighted_sum(&[(total, T::one()), (g, T::one())]),
        None => total,
    };
    let report = LossReport {
        l_s: scalar(&fwd, l_s),
        l_ui: scalar(&fwd, l_ui),
        l_uf: scalar(&fwd, l_uf),
        total: scalar(&fwd, total),
        l_uf_branches: branch_vars.iter().map(|&v| scalar(&fwd, v)).collect(),
        l_gate: l_gate.map_or(0.0, |g| scalar(&fwd, g)),
    };
    Ok(StepGraph { fwd, objective, total, report, plan: out_plan, perturb_fraction: fraction })
}

/// Keeps the first statistics recorded for each normalization layer, so
/// every layer folds in one batch per step.
pub fn first_batch_stats<T>(stats: Vec<BatchStats<T>>) -> Vec<BatchStats<T>> {
    let mut seen = HashSet::new();
    stats.into_iter().filter(|s| seen.insert(s.name.clone())).collect()
}

/// Loss report, parameter gradients and batch statistics of one step.
pub struct StepOutcome<T> {
    pub report: LossReport,
    pub grads: HashMap<String, Tensor<T>>,
    pub stats: Vec<BatchStats<T>>,
    pub plan: StepPlan<T>,
    pub perturb_fraction: Option<f64>,
}

/// Forward and backward of one step; `objective` includes the gate term.
pub fn step_gradients<T: Scalar>(
    net: &ChangeNet<T>,
    cfg: &ExperimentConfig,
    inputs: &StepInputs,
    plan: Option<&StepPlan<T>>,
) -> Result<StepOutcome<T>> {
    let mut g = build_step(net, cfg, inputs, plan)?;
    let grads = g.fwd.tape.backward(g.objective);
    let param_grads = g.fwd.param_grads(&grads);
    let stats = first_batch_stats(g.fwd.tape.take_batch_stats());
    Ok(StepOutcome { report: g.report, grads: param_grads, stats, plan: g.plan, perturb_fraction: g.perturb_fraction })
}

/// Value of the weighted total under a frozen plan.
pub fn replay_total<T: Scalar>(net: &ChangeNet<T>, cfg: &ExperimentConfig, inputs: &StepInputs, plan: &StepPlan<T>) -> Result<f64> {
    let g = build_step(net, cfg, inputs, Some(plan))?;
    Ok(scalar(&g.fwd, g.total))
}

/// Gradients of the weighted total alone (without the gate term).
pub fn total_gradients<T: Scalar>(
    net: &ChangeNet<T>,
    cfg: &ExperimentConfig,
    inputs: &StepInputs,
    plan: Option<&StepPlan<T>>,
) -> Result<(f64, HashMap<String, Tensor<T>>, StepPlan<T>)> {
    let g = build_step(net, cfg, inputs, plan)?;
    let grads = g.fwd.tape.backward(g.total);
    Ok((scalar(&g.fwd, g.total), g.fwd.param_grads(&grads), g.plan))
}
