//! Acceptance suite: one pass/fail line per criterion.
//!
//! `cargo test -p gtpc-core --test acceptance` runs everything; passing
//! criterion numbers (`-- 1 4 9`) runs a subset. Criteria 7 and 8 are
//! desk-scale training outcomes: their lines are printed like the others but
//! only fail the process when `ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::time::Instant;

use gtpc_core::augment::cutmix_batch;
use gtpc_core::data::{make_split, synth_generate, Dataset};
use gtpc_core::engine::{
    evaluate, metrics_from_maps, replay_total, sample_step_inputs, total_gradients, train, Confusion, ExperimentConfig,
    TrainData, TrainOptions, TrainingHistory, Variant,
};
use gtpc_core::image::{Image, Mask, CHANNELS};
use gtpc_core::losses::make_pseudo_label;
use gtpc_core::model::{ChangeNet, FeatureBundle, Head, ImagePair, NetConfig};
use gtpc_core::perturb::{
    gate_select, intermediate_vat, operator_edit, random_dropout, FeatureEdit, Level, PerturbContext, PerturbationSpec,
};
use gtpc_core::{Scalar, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
const METRICS_RUNTIME_S: f64 = 5.0;
const GRAD_PARAMS: usize = 120;
const GRAD_STEP: f64 = 1e-7;
const GRAD_REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error: gradients below it are compared
/// absolutely.
const GRAD_REL_FLOOR: f64 = 1e-4;
const GRAD_RUNTIME_S: f64 = 120.0;
const DECOMP_TOL: f64 = 1e-9;
const VAT_NORM_TOL: f64 = 1e-6;
const PERTURB_RUNTIME_S: f64 = 60.0;
const ORDER_MARGIN_SUP: f64 = 0.05;
const ORDER_MARGIN_BRANCH: f64 = 0.01;
const ORDER_RUNTIME_S: f64 = 45.0 * 60.0;
const SWEEP_MARGIN: f64 = 0.01;

// Desk-scale training setting shared by criteria 7 and 8.
const DESK_TRAIN: usize = 400;
const DESK_VAL: usize = 50;
const DESK_TEST: usize = 100;
const DESK_SIZE: usize = 64;
const DESK_RATIO: f64 = 0.05;
const DESK_EPOCHS: usize = 40;
const DESK_STEPS_PER_EPOCH: usize = 20;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1 -------------------------------------------------------------------------

fn brute_counts(pred: &[u8], label: &[u8]) -> [u64; 4] {
    let mut c = [0u64; 4];
    for (p, l) in pred.iter().zip(label) {
        let k = match (*p, *l) {
            (1, 1) => 0,
            (0, 0) => 1,
            (1, 0) => 2,
            _ => 3,
        };
        c[k] += 1;
    }
    c
}

fn brute_iou_oa(c: [u64; 4]) -> (f64, f64) {
    let [tp, tn, fp, fn_] = c;
    let iou = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
    (iou, (tp + tn) as f64 / (tp + tn + fp + fn_) as f64)
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let mut r = rng(1);
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut global = [0u64; 4];
    let mut mismatches = 0;
    for _ in 0..1000 {
        let density: f64 = r.random();
        let p: Vec<f32> = (0..256).map(|_| if r.random_bool(density) { r.random_range(0.5001..1.0) } else { r.random_range(0.0..=0.5) }).collect();
        let l = Mask::from_vec(16, 16, (0..256).map(|_| r.random_bool(density.sqrt()) as u8).collect()).unwrap();
        let pred: Vec<u8> = p.iter().map(|&v| (v > 0.5) as u8).collect();
        let brute = brute_counts(&pred, &l.data);
        for k in 0..4 {
            global[k] += brute[k];
        }
        let c = Confusion::from_probs(&p, &l.data).unwrap();
        let (iou, oa) = brute_iou_oa(brute);
        if [c.tp, c.tn, c.fp, c.fn_] != brute || c.iou() != iou || c.oa() != oa {
            mismatches += 1;
        }
        probs.push(Tensor::from_vec(&[16, 16], p).unwrap());
        labels.push(l);
    }
    let m = metrics_from_maps(&probs, &labels.iter().collect::<Vec<_>>()).unwrap();
    let c = m.confusion;
    let (iou, oa) = brute_iou_oa(global);
    let global_ok = [c.tp, c.tn, c.fp, c.fn_] == global && m.iou == iou && m.oa == oa;
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && global_ok && secs < METRICS_RUNTIME_S,
        format!("{mismatches} per-pair mismatches, global counts match: {global_ok}, {secs:.2}s (< {METRICS_RUNTIME_S}s)"),
    )
}

// 2 -------------------------------------------------------------------------

fn criterion_2() -> Verdict {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::desk(Variant::Gtpc, 11);
    cfg.perturb.specs = vec![
        PerturbationSpec::FeatureNoise { amplitude: 0.3 },
        PerturbationSpec::IntermediateVat { epsilon: 2.0, xi: 1e-6 },
    ];
    cfg.train.batch_labeled = 2;
    cfg.train.batch_unlabeled = 2;
    let ds = synth_generate(4, 64, 21).unwrap();
    let (l, u) = ds.samples.split_at(2);
    let mut net = ChangeNet::<f64>::new(cfg.net_config()).unwrap();
    assert_eq!(net.config.aux_branches, 2);
    let inputs = sample_step_inputs(l, u, &cfg, &mut rng(2)).unwrap();
    let (_, grads, plan) = total_gradients(&net, &cfg, &inputs, None).unwrap();

    let names: Vec<String> = net.params.iter().map(|(k, _)| k.clone()).collect();
    let mut r = rng(3);
    let mut worst = (0.0f64, String::new());
    let mut failures = 0;
    for _ in 0..GRAD_PARAMS {
        let name = names.choose(&mut r).unwrap().clone();
        let len = net.params.get(&name).unwrap().len();
        let idx = r.random_range(0..len);
        let an = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
        let orig = net.params.get(&name).unwrap().data()[idx];
        let mut eval_at = |v: f64| {
            net.params.get_mut(&name).unwrap().data_mut()[idx] = v;
            replay_total(&net, &cfg, &inputs, &plan).unwrap()
        };
        let (up, down) = (eval_at(orig + GRAD_STEP), eval_at(orig - GRAD_STEP));
        net.params.get_mut(&name).unwrap().data_mut()[idx] = orig;
        let fd = (up - down) / (2.0 * GRAD_STEP);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_REL_FLOOR);
        if rel >= GRAD_REL_TOL {
            failures += 1;
        }
        if rel >= worst.0 {
            worst = (rel, format!("{name}[{idx}] analytic {an:.6e} fd {fd:.6e}"));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        failures == 0 && secs < GRAD_RUNTIME_S,
        format!(
            "{GRAD_PARAMS} parameters, {failures} above rel {GRAD_REL_TOL:e}; worst {:.2e} at {}; {secs:.1}s (< {GRAD_RUNTIME_S}s)",
            worst.0, worst.1
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn criterion_3() -> Verdict {
    let mut r = rng(4);
    let mut bad = 0;
    for _ in 0..500 {
        let mut scores: Vec<f64> = (0..4).map(|_| r.random()).collect();
        while {
            let mut s = scores.clone();
            s.sort_by(f64::total_cmp);
            s.windows(2).any(|w| w[0] == w[1])
        } {
            scores = (0..4).map(|_| r.random()).collect();
        }
        let v = gate_select(&scores, 0.5, false).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let top2 = v.iter().zip(&scores).all(|(v, &s)| v.perturb == (s >= sorted[2]));
        if v.iter().filter(|v| v.perturb).count() != 2 || !top2 {
            bad += 1;
        }
    }
    let equal = gate_select(&[0.3; 4], 0.5, false).unwrap();
    let all = equal.iter().all(|v| v.perturb);
    verdict(bad == 0 && all, format!("{bad}/500 distinct batches without exactly the top 2 selected; equal scores select all: {all}"))
}

// 4 -------------------------------------------------------------------------

fn pseudo_grid<T: Scalar>() -> Vec<u8> {
    let grid = [0.94, 0.95, 0.9500001, 1.0].map(T::of);
    make_pseudo_label(&Tensor::from_vec(&[1, 1, 4], grid.to_vec()).unwrap(), 0.95, false).targets
}

fn criterion_4() -> Verdict {
    let (a, b) = (pseudo_grid::<f64>(), pseudo_grid::<f32>());
    verdict(a == [0, 0, 1, 1] && b == [0, 0, 1, 1], format!("f64 {a:?}, f32 {b:?}, expected [0, 0, 1, 1]"))
}

// 5 -------------------------------------------------------------------------

fn small_run(variant: Variant, seed: u64, epochs: usize, steps: usize) -> (ExperimentConfig, TrainData) {
    let ds = synth_generate(40, 64, 31).unwrap();
    let m = gtpc_core::data::make_split_with_holdout(&ds.ids(), 0.25, 0.2, 0.0, seed).unwrap();
    let mut cfg = ExperimentConfig::desk(variant, seed);
    cfg.train.epochs = epochs;
    cfg.train.steps_per_epoch = Some(steps);
    (cfg, TrainData::from_manifest(&ds, &m).unwrap())
}

fn criterion_5() -> Verdict {
    let (cfg, data) = small_run(Variant::Gtpc, 5, 5, 3);
    let w = cfg.loss.weights();
    if (w.lambda1, w.lambda2, w.lambda3) != (0.5, 0.25, 0.25) {
        return verdict(false, format!("default weights are {w:?}"));
    }
    // float64: single-precision rounding of the on-tape sum alone is ~1e-8
    let out = train::<f64>(&cfg, &data, &TrainOptions::default()).unwrap();
    let mut worst = 0.0f64;
    let mut n = 0;
    for s in out.history.steps() {
        worst = worst.max((s.total - (0.5 * s.l_s + 0.25 * s.l_ui + 0.25 * s.l_uf)).abs());
        n += 1;
    }
    verdict(n == 15 && worst <= DECOMP_TOL, format!("{n} logged steps, max |total - weighted sum| {worst:.1e} (<= {DECOMP_TOL:e})"))
}

// 6 -------------------------------------------------------------------------

fn criterion_6() -> Verdict {
    let t0 = Instant::now();
    let mut problems: Vec<String> = Vec::new();
    let net = ChangeNet::<f64>::new(NetConfig::tiny(7, 5)).unwrap();
    let mut r = rng(6);
    let mut feats = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| r.random_range(0.0..2.0));
    let bundle = FeatureBundle { d1: feats(&[3, 16, 16, 16]), d4: feats(&[3, 64, 2, 2]) };
    let mut pseudo = vec![0u8; 3 * 64 * 64];
    for i in 0..3 {
        for y in 10..30 {
            for x in 20..44 {
                pseudo[(i * 64 + y) * 64 + x] = 1;
            }
        }
    }
    let ctx = PerturbContext { net: &net, bundle: &bundle, pseudo: &pseudo, image_dims: (64, 64), batch_stats: false };

    // shape and finiteness, every operator at both levels
    for (k, spec) in PerturbationSpec::defaults().iter().enumerate() {
        for (level, base) in [(Level::D1, &bundle.d1), (Level::D4, &bundle.d4)] {
            for seed in 0..5 {
                let out = operator_edit(&ctx, k, spec, level, &mut rng(seed)).and_then(|e| e.apply(base));
                match out {
                    Ok(t) if t.shape() == base.shape() && t.all_finite() => {}
                    Ok(_) => problems.push(format!("{} {level:?}: shape or finiteness", spec.name())),
                    Err(e) => problems.push(format!("{} {level:?}: {e}", spec.name())),
                }
            }
        }
    }

    // identity limits
    let d = &bundle.d1;
    let zeros = Tensor::<f64>::zeros(d.shape());
    let level_pseudo = |v: u8| vec![v; 3 * 16 * 16];
    let ident = |name: &str, out: Tensor<f64>, want: &Tensor<f64>, problems: &mut Vec<String>| {
        if &out != want {
            problems.push(format!("{name}: identity limit broken"));
        }
    };
    ident("feature_noise amplitude 0", gtpc_core::perturb::feature_noise(d, &mut rng(1), 0.0).unwrap(), d, &mut problems);
    ident("feature_dropout on zero maps", gtpc_core::perturb::feature_dropout(&zeros, &mut rng(1), [0.6, 0.9]).unwrap(), &zeros, &mut problems);
    ident("object_masking without change", gtpc_core::perturb::object_masking(d, &level_pseudo(0)).unwrap(), d, &mut problems);
    ident("context_masking with all change", gtpc_core::perturb::context_masking(d, &level_pseudo(1)).unwrap(), d, &mut problems);
    ident("guided_cutout on zero maps", gtpc_core::perturb::guided_cutout(&zeros, &level_pseudo(1), &mut rng(1), [0.1, 0.4]).unwrap(), &zeros, &mut problems);
    ident("intermediate_vat epsilon 0", intermediate_vat(&net, Head::Aux(5), &bundle, Level::D1, 0.0, 1e-6, false, &mut rng(1)).unwrap(), d, &mut problems);
    ident("random_dropout rate 0", random_dropout(d, &mut rng(1), 0.0).unwrap(), d, &mut problems);
    if !FeatureEdit::<f64>::identity().is_identity() {
        problems.push("identity edit".into());
    }

    // VAT moves every sample by exactly epsilon
    let mut vat_err = 0.0f64;
    for (level, base) in [(Level::D1, &bundle.d1), (Level::D4, &bundle.d4)] {
        for eps in [0.5, 2.0] {
            let out = intermediate_vat(&net, Head::Aux(5), &bundle, level, eps, 1e-6, false, &mut rng(2)).unwrap();
            for i in 0..3 {
                let norm = out.row(i).iter().zip(base.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                vat_err = vat_err.max((norm - eps).abs());
            }
        }
    }
    if vat_err >= VAT_NORM_TOL {
        problems.push(format!("VAT norm error {vat_err:e}"));
    }

    // random dropout zero count against binomial 3 sigma bounds, pooled
    let rate = 0.5;
    let mut dr = rng(9);
    let zeros_seen: usize = (0..100).map(|_| random_dropout(d, &mut dr, rate).unwrap().data().iter().filter(|&&v| v == 0.0).count()).sum();
    let trials = 100.0 * d.len() as f64;
    let sigma = (trials * rate * (1.0 - rate)).sqrt();
    let dev = (zeros_seen as f64 - trials * rate).abs() / sigma;
    if dev > 3.0 {
        problems.push(format!("dropout zero count {dev:.2} sigma off"));
    }

    let secs = t0.elapsed().as_secs_f64();
    verdict(
        problems.is_empty() && secs < PERTURB_RUNTIME_S,
        if problems.is_empty() {
            format!("7 operators x 2 levels ok, 7 identity limits, VAT norm error {vat_err:.1e}, dropout {dev:.2} sigma, {secs:.1}s")
        } else {
            problems.join("; ")
        },
    )
}

// 7 and 8 -------------------------------------------------------------------

struct Desk {
    train: Dataset,
    val: Vec<ImagePair>,
    test: Vec<ImagePair>,
}

impl Desk {
    fn new() -> Self {
        Self {
            train: synth_generate(DESK_TRAIN, DESK_SIZE, 100).unwrap(),
            val: synth_generate(DESK_VAL, DESK_SIZE, 200).unwrap().samples,
            test: synth_generate(DESK_TEST, DESK_SIZE, 300).unwrap().samples,
        }
    }

    fn config(variant: Variant, seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(variant, seed);
        cfg.train.epochs = DESK_EPOCHS;
        cfg.train.steps_per_epoch = Some(DESK_STEPS_PER_EPOCH);
        cfg.train.eval_batch = 10;
        cfg
    }

    /// Test IoU of the best-validation checkpoint, and the mean gate
    /// perturbation fraction.
    fn run(&self, cfg: &ExperimentConfig) -> (f64, Option<f64>) {
        let m = make_split(&self.train.ids(), DESK_RATIO, cfg.seed).unwrap();
        let data = TrainData {
            labeled: self.train.select(&m.labeled_ids).unwrap(),
            unlabeled: self.train.select(&m.unlabeled_ids).unwrap(),
            val: self.val.clone(),
        };
        let t0 = Instant::now();
        let out = train::<f32>(cfg, &data, &TrainOptions::default()).unwrap();
        let iou = evaluate(&out.best, &self.test, cfg.train.eval_batch).unwrap().iou;
        let pf = out.history.perturb_fractions();
        let pf = (!pf.is_empty()).then(|| pf.iter().sum::<f64>() / pf.len() as f64);
        println!(
            "    {:<13} q {:.2} seed {}: test IoU {:.2} (best epoch {}) perturb fraction {} [{:.0}s]",
            cfg.variant.name(),
            cfg.gate.quantile,
            cfg.seed,
            100.0 * iou,
            out.best_epoch + 1,
            pf.map_or("-".into(), |p| format!("{p:.3}")),
            t0.elapsed().as_secs_f64()
        );
        (iou, pf)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_7(desk: &Desk, gtpc_median: &mut Vec<f64>) -> Verdict {
    let t0 = Instant::now();
    let mut iou: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &seed in &DESK_SEEDS {
        for v in [Variant::SupOnly, Variant::Feature, Variant::Image, Variant::Gtpc] {
            let (x, _) = desk.run(&Desk::config(v, seed));
            iou.entry(v.name()).or_default().push(x);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let m = |k: &str| mean(&iou[k]);
    let (sup, feat, img, ours) = (m("sup_only"), m("feature"), m("image"), m("gtpc"));
    *gtpc_median = iou["gtpc"].clone();
    let pass = ours >= sup + ORDER_MARGIN_SUP && ours >= feat.max(img) - ORDER_MARGIN_BRANCH && secs < ORDER_RUNTIME_S;
    verdict(
        pass,
        format!(
            "mean test IoU sup_only {:.2}, feature {:.2}, image {:.2}, gtpc {:.2}; need gtpc >= {:.2} and >= {:.2}; {:.1} min (< {:.0})",
            100.0 * sup,
            100.0 * feat,
            100.0 * img,
            100.0 * ours,
            100.0 * (sup + ORDER_MARGIN_SUP),
            100.0 * (feat.max(img) - ORDER_MARGIN_BRANCH),
            secs / 60.0,
            ORDER_RUNTIME_S / 60.0
        ),
    )
}

fn criterion_8(desk: &Desk, median_runs: &[f64]) -> Verdict {
    let mut by_q: Vec<(f64, f64)> = Vec::new();
    for q in [0.25, 0.75] {
        let runs: Vec<f64> = DESK_SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = Desk::config(Variant::Gtpc, seed);
                cfg.gate.quantile = q;
                desk.run(&cfg).0
            })
            .collect();
        by_q.push((q, mean(&runs)));
    }
    let med = if median_runs.is_empty() {
        mean(&DESK_SEEDS.iter().map(|&s| desk.run(&Desk::config(Variant::Gtpc, s)).0).collect::<Vec<_>>())
    } else {
        mean(median_runs)
    };
    let pass = by_q.iter().all(|&(_, x)| med >= x - SWEEP_MARGIN);
    verdict(
        pass,
        format!(
            "mean test IoU q0.25 {:.2}, q0.5 {:.2}, q0.75 {:.2} (median must be >= others - {:.0})",
            100.0 * by_q[0].1,
            100.0 * med,
            100.0 * by_q[1].1,
            100.0 * SWEEP_MARGIN
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let bytes: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let (cfg, data) = small_run(Variant::Gtpc, 9, 2, 3);
            let out_dir = dir.path().join(name);
            train::<f32>(&cfg, &data, &TrainOptions { out_dir: Some(out_dir.clone()) }).unwrap();
            std::fs::read(out_dir.join("history.jsonl")).unwrap()
        })
        .collect();
    let parsed = TrainingHistory::from_jsonl(std::str::from_utf8(&bytes[0]).unwrap()).map(|h| h.steps().count());
    verdict(
        bytes[0] == bytes[1] && matches!(parsed, Ok(6)),
        format!("history files {} bytes, identical: {}, steps {:?}", bytes[0].len(), bytes[0] == bytes[1], parsed.ok()),
    )
}

// 10 ------------------------------------------------------------------------

fn random_pair(id: String, size: usize, r: &mut ChaCha8Rng) -> ImagePair {
    let mut img = || Image::from_planar(size, size, (0..CHANNELS * size * size).map(|_| r.random::<f32>()).collect()).unwrap();
    let (a, b) = (img(), img());
    ImagePair::new(id, a, b, None).unwrap()
}

fn is_rectangle(m: &Mask) -> bool {
    let (h, w) = m.dims();
    let on: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| m.get(y, x) == 1).collect();
    let Some(y0) = on.iter().map(|p| p.0).min() else { return true };
    let (y1, x0, x1) = (on.iter().map(|p| p.0).max().unwrap(), on.iter().map(|p| p.1).min().unwrap(), on.iter().map(|p| p.1).max().unwrap());
    on.len() == (y1 - y0 + 1) * (x1 - x0 + 1)
}

/// Every pixel of `mixed` inside `mask` equals `donor`, outside equals `own`.
fn pasted<T: PartialEq>(mixed: &[T], own: &[T], donor: &[T], mask: &Mask, planes: usize) -> bool {
    let n = mask.data.len();
    (0..planes * n).all(|i| &mixed[i] == if mask.data[i % n] == 1 { &donor[i] } else { &own[i] })
}

fn criterion_10() -> Verdict {
    let mut r = rng(10);
    let mut bad = Vec::new();
    let mut mixed_samples = 0;
    let cfg = ExperimentConfig::desk(Variant::Gtpc, 0);
    let mut plain_cfg = cfg.clone();
    plain_cfg.augment.cutmix_prob = 0.0;
    for batch in 0..200 {
        let n = r.random_range(2..=4);
        // direct batch mixing
        let pairs: Vec<ImagePair> = (0..n).map(|i| random_pair(format!("p{i}"), 32, &mut r)).collect();
        let labels: Vec<Mask> =
            (0..n).map(|_| Mask::from_vec(32, 32, (0..1024).map(|_| r.random_range(0..2)).collect()).unwrap()).collect();
        let out = cutmix_batch(&pairs, &labels, &cfg.augment, &mut r).unwrap();
        for i in 0..n {
            let (Some(m), Some(d)) = (&out.masks[i], out.donors[i]) else { continue };
            mixed_samples += 1;
            let ok = is_rectangle(m)
                && d != i
                && pasted(&out.images[i].image_a.data, &pairs[i].image_a.data, &pairs[d].image_a.data, m, CHANNELS)
                && pasted(&out.images[i].image_b.data, &pairs[i].image_b.data, &pairs[d].image_b.data, m, CHANNELS)
                && pasted(&out.pseudo_labels[i].data, &labels[i].data, &labels[d].data, m, 1);
            if !ok {
                bad.push(format!("batch {batch} sample {i}"));
            }
        }

        // the training path: images mixed at sampling time, pseudo-labels later
        let unl: Vec<ImagePair> = (0..n).map(|i| random_pair(format!("u{i}"), 64, &mut r)).collect();
        let lab = vec![ImagePair { label: Some(Mask::zeros(64, 64)), ..unl[0].clone() }];
        let seed = r.random();
        let mixed = sample_step_inputs(&lab, &unl, &cfg, &mut rng(seed)).unwrap();
        let plain = sample_step_inputs(&lab, &unl, &plain_cfg, &mut rng(seed)).unwrap();
        let probs = Tensor::<f64>::from_fn(&[n, 64, 64], |_| r.random());
        let pseudo = make_pseudo_label(&probs, 0.5, false);
        for v in 0..2 {
            let labels = mixed.mix[v].mix_labels(&pseudo);
            for i in 0..n {
                let (own, got) = (pseudo.mask(i), labels.mask(i));
                match (&mixed.mix[v].masks[i], mixed.mix[v].donors[i]) {
                    (Some(m), Some(d)) => {
                        mixed_samples += 1;
                        let (s, p) = (&mixed.strong[v][i], &plain.strong[v]);
                        let ok = is_rectangle(m)
                            && pasted(&s.image_a.data, &p[i].image_a.data, &p[d].image_a.data, m, CHANNELS)
                            && pasted(&s.image_b.data, &p[i].image_b.data, &p[d].image_b.data, m, CHANNELS)
                            && pasted(&got.data, &own.data, &pseudo.mask(d).data, m, 1);
                        if !ok {
                            bad.push(format!("batch {batch} view {v} sample {i}"));
                        }
                    }
                    _ => {
                        if got != own || mixed.strong[v][i] != plain.strong[v][i] {
                            bad.push(format!("batch {batch} view {v} unmixed sample {i} changed"));
                        }
                    }
                }
            }
        }
    }
    verdict(
        bad.is_empty() && mixed_samples > 0,
        if bad.is_empty() { format!("200 batches, {mixed_samples} mixed samples, all rectangles and donor pixels exact") } else { bad.join(", ") },
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |k: usize| selected.is_empty() || selected.contains(&k);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let names = [
        "metrics oracle equivalence",
        "gradient correctness",
        "gate contract",
        "pseudo-label contract",
        "loss decomposition",
        "perturbation operator suite",
        "desk-scale ordering",
        "gate sensitivity shape (soft)",
        "determinism",
        "cutmix consistency",
    ];
    let mut failed_gating = Vec::new();
    let mut median_runs = Vec::new();
    let desk = (want(7) || want(8)).then(Desk::new);
    for k in 1..=10 {
        if !want(k) {
            continue;
        }
        let t0 = Instant::now();
        let v = match k {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(desk.as_ref().unwrap(), &mut median_runs),
            8 => criterion_8(desk.as_ref().unwrap(), &median_runs),
            9 => criterion_9(),
            _ => criterion_10(),
        };
        let gating = strict || !matches!(k, 7 | 8);
        let tag = match (v.pass, gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (reported)",
        };
        println!("criterion {k:>2} [{tag}] {}: {} ({:.1}s)", names[k - 1], v.detail, t0.elapsed().as_secs_f64());
        if !v.pass && gating {
            failed_gating.push(k);
        }
    }
    if !failed_gating.is_empty() {
        eprintln!("failed criteria: {failed_gating:?}");
        std::process::exit(1);
    }
}
