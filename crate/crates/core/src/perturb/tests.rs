use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::NetConfig;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn features(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(0.0..2.0))
}

fn bundle(n: usize, seed: u64) -> FeatureBundle<f64> {
    FeatureBundle { d1: features(&[n, 16, 16, 16], seed), d4: features(&[n, 64, 2, 2], seed + 1) }
}

fn label_with_block(n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut l = vec![0u8; n * h * w];
    for i in 0..n {
        for y in 2..6 {
            for x in 3..9 {
                l[(i * h + y) * w + x] = 1;
            }
        }
    }
    l
}

#[test]
fn defaults_are_seven_distinct_valid_kinds() {
    let specs = PerturbationSpec::defaults();
    assert_eq!(specs.len(), 7);
    let mut names: Vec<_> = specs.iter().map(|s| s.name()).collect();
    names.dedup();
    assert_eq!(names.len(), 7);
    assert!(specs.iter().all(|s| s.validate().is_ok()));
    assert!(PerturbationSpec::RandomDropout { rate: 1.0 }.validate().is_err());
    assert!(PerturbationSpec::FeatureNoise { amplitude: 0.0 }.validate().is_err());
}

#[test]
fn spec_serializes_with_a_kind_tag() {
    #[derive(Serialize, Deserialize)]
    struct Wrap {
        specs: Vec<PerturbationSpec>,
    }
    let w = Wrap { specs: PerturbationSpec::defaults() };
    let text = toml::to_string(&w).unwrap();
    assert!(text.contains("kind = \"intermediate_vat\""));
    let back: Wrap = toml::from_str(&text).unwrap();
    assert_eq!(back.specs, w.specs);
    assert!(toml::from_str::<Wrap>("[[specs]]\nkind = \"random_dropout\"\nrate = 0.5\nbogus = 1\n").is_err());
}

#[test]
fn feature_noise_identity_and_bound() {
    let d = features(&[2, 4, 5, 5], 1);
    assert_eq!(feature_noise(&d, &mut rng(2), 0.0).unwrap(), d);
    let out = feature_noise(&d, &mut rng(2), 0.3).unwrap();
    assert_eq!(out.shape(), d.shape());
    for (a, b) in d.data().iter().zip(out.data()) {
        assert!((b - a).abs() <= 0.3 * a.abs() + 1e-15);
    }
    assert_ne!(out, d);
}

#[test]
fn feature_dropout_leaves_zero_maps_alone() {
    let z = Tensor::<f64>::zeros(&[2, 4, 6, 6]);
    assert_eq!(feature_dropout(&z, &mut rng(1), [0.6, 0.9]).unwrap(), z);
}

#[test]
fn feature_dropout_zeroes_the_most_active_positions() {
    let d = features(&[1, 8, 16, 16], 3);
    let mut r = rng(4);
    let mut fractions = Vec::new();
    for _ in 0..100 {
        let out = feature_dropout(&d, &mut r, [0.6, 0.9]).unwrap();
        let plane = 256;
        let mut dropped = Vec::new();
        let mut kept = Vec::new();
        for p in 0..plane {
            let att: f64 = (0..8).map(|k| d.data()[k * plane + p].abs()).sum::<f64>() / 8.0;
            let zero = (0..8).all(|k| out.data()[k * plane + p] == 0.0);
            if zero { dropped.push(att) } else { kept.push(att) }
            if !zero {
                assert!((0..8).all(|k| out.data()[k * plane + p] == d.data()[k * plane + p]));
            }
        }
        let min_dropped = dropped.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_kept = kept.iter().cloned().fold(0.0, f64::max);
        assert!(dropped.is_empty() || min_dropped > max_kept);
        fractions.push(dropped.len() as f64 / plane as f64);
    }
    let (lo, hi) = fractions.iter().fold((1.0f64, 0.0f64), |(lo, hi), &f| (lo.min(f), hi.max(f)));
    assert!(lo >= 0.09 && hi <= 0.41, "{lo} {hi}");
    let mean = fractions.iter().sum::<f64>() / 100.0;
    assert!((mean - 0.25).abs() < 0.03, "{mean}");
}

#[test]
fn masking_region_oracle() {
    let d = features(&[2, 3, 8, 12], 5);
    let label = label_with_block(2, 8, 12);
    let obj = object_masking(&d, &label).unwrap();
    let ctx = context_masking(&d, &label).unwrap();
    let plane = 96;
    for i in 0..2 {
        for k in 0..3 {
            for p in 0..plane {
                let idx = (i * 3 + k) * plane + p;
                if label[i * plane + p] == 1 {
                    assert_eq!(obj.data()[idx], 0.0);
                    assert_eq!(ctx.data()[idx].to_bits(), d.data()[idx].to_bits());
                } else {
                    assert_eq!(ctx.data()[idx], 0.0);
                    assert_eq!(obj.data()[idx].to_bits(), d.data()[idx].to_bits());
                }
            }
        }
    }
    let both = context_masking(&obj, &label).unwrap();
    assert!(both.data().iter().all(|&v| v == 0.0));
}

#[test]
fn masking_with_empty_label() {
    let d = features(&[1, 3, 4, 4], 6);
    let zero = vec![0u8; 16];
    assert_eq!(object_masking(&d, &zero).unwrap(), d);
    assert!(context_masking(&d, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(object_masking(&d, &zero[..15]).is_err());
}

#[test]
fn components_are_four_connected() {
    #[rustfmt::skip]
    let l = vec![
        1, 1, 0, 0,
        0, 1, 0, 1,
        0, 0, 1, 1,
        1, 0, 0, 0,
    ];
    let boxes = component_boxes(&l, 4, 4);
    assert_eq!(
        boxes,
        vec![
            Rect { y0: 0, x0: 0, y1: 2, x1: 2 },
            Rect { y0: 1, x0: 2, y1: 3, x1: 4 },
            Rect { y0: 3, x0: 0, y1: 4, x1: 1 },
        ]
    );
}

#[test]
fn guided_cutout_stays_inside_a_component_box() {
    let mut r = rng(7);
    for trial in 0..200 {
        let (h, w) = (16, 16);
        let mut l = vec![0u8; h * w];
        for _ in 0..3 {
            let (y, x) = (r.random_range(0..12), r.random_range(0..12));
            let (bh, bw) = (r.random_range(1..5), r.random_range(1..5));
            for yy in y..y + bh {
                for xx in x..x + bw {
                    l[yy * w + xx] = 1;
                }
            }
        }
        let boxes = component_boxes(&l, h, w);
        let mut rr = rng(trial);
        let (rect, chosen) = guided_cutout_rect(&l, h, w, [0.1, 0.4], &mut rr);
        let chosen = chosen.unwrap();
        assert!(boxes.contains(&chosen));
        assert!(rect.within(&chosen) && rect.area() >= 1);

        let d = features(&[1, 2, h, w], trial);
        let out = guided_cutout(&d, &l, &mut rng(trial), [0.1, 0.4]).unwrap();
        for k in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let idx = (k * h + y) * w + x;
                    let want = if rect.contains(y, x) { 0.0 } else { d.data()[idx] };
                    assert_eq!(out.data()[idx], want);
                }
            }
        }
    }
}

#[test]
fn guided_cutout_falls_back_without_change() {
    let (rect, chosen) = guided_cutout_rect(&[0u8; 64], 8, 8, [0.1, 0.4], &mut rng(1));
    assert!(chosen.is_none());
    assert!(rect.within(&Rect { y0: 0, x0: 0, y1: 8, x1: 8 }));
    let d = features(&[1, 2, 8, 8], 2);
    let out = guided_cutout(&d, &[0u8; 64], &mut rng(1), [0.1, 0.4]).unwrap();
    assert_eq!(out.data().iter().filter(|&&v| v == 0.0).count(), 2 * rect.area());
}

#[test]
fn random_dropout_statistics() {
    let d = features(&[1, 8, 16, 16], 8);
    assert_eq!(random_dropout(&d, &mut rng(1), 0.0).unwrap(), d);
    let mut r = rng(9);
    let n = d.len() as f64;
    let rate = 0.5;
    // pooled over all draws
    let trials = 100.0 * n;
    let sigma = (trials * rate * (1.0 - rate)).sqrt();
    let mut zeros = 0.0;
    let mut mean_sum = 0.0;
    for _ in 0..100 {
        let out = random_dropout(&d, &mut r, rate).unwrap();
        zeros += out.data().iter().filter(|&&v| v == 0.0).count() as f64;
        for (a, b) in d.data().iter().zip(out.data()) {
            assert!(*b == 0.0 || (b - 2.0 * a).abs() < 1e-12);
        }
        mean_sum += out.mean();
    }
    assert!((zeros - trials * rate).abs() <= 3.0 * sigma, "{zeros}");
    let ratio = mean_sum / 100.0 / d.mean();
    assert!((ratio - 1.0).abs() < 0.02, "{ratio}");
}

fn tiny_net(k: usize) -> ChangeNet<f64> {
    ChangeNet::new(NetConfig::tiny(k, 5)).unwrap()
}

#[test]
fn vat_moves_exactly_epsilon_per_sample() {
    let net = tiny_net(1);
    let b = bundle(3, 10);
    for level in [Level::D1, Level::D4] {
        let out = intermediate_vat(&net, Head::Aux(0), &b, level, 2.0, 1e-6, false, &mut rng(3)).unwrap();
        let base = if level == Level::D1 { &b.d1 } else { &b.d4 };
        for i in 0..3 {
            let norm: f64 = out.row(i).iter().zip(base.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!((norm - 2.0).abs() < 1e-6, "{norm}");
        }
    }
    let same = intermediate_vat(&net, Head::Aux(0), &b, Level::D1, 0.0, 1e-6, false, &mut rng(3)).unwrap();
    assert_eq!(same, b.d1);
}

#[test]
fn vat_falls_back_to_a_random_direction_on_flat_decoders() {
    let mut net = tiny_net(1);
    net.params.get_mut("aux0.classifier.weight").unwrap().data_mut().fill(0.0);
    let b = bundle(2, 11);
    let out = intermediate_vat(&net, Head::Aux(0), &b, Level::D1, 1.5, 1e-6, false, &mut rng(4)).unwrap();
    for i in 0..2 {
        let norm: f64 = out.row(i).iter().zip(b.d1.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((norm - 1.5).abs() < 1e-9);
    }
}

fn divergence(net: &ChangeNet<f64>, b: &FeatureBundle<f64>, d1: &Tensor<f64>) -> f64 {
    let mut fwd = Forward::eval(&net.params);
    let (d4v, d1v) = (fwd.constant(b.d4.clone()), fwd.constant(b.d1.clone()));
    let clean = net.decode(&mut fwd, Head::Aux(0), d4v, d1v, (16, 16)).unwrap();
    let reference = class_probabilities(fwd.value(clean));
    let moved = fwd.constant(d1.clone());
    let noisy = net.decode(&mut fwd, Head::Aux(0), d4v, moved, (16, 16)).unwrap();
    let kl = fwd.tape.kl_to_reference(noisy, &reference).unwrap();
    fwd.value(kl).data()[0]
}

#[test]
fn vat_direction_is_more_adversarial_than_random() {
    let net = tiny_net(1);
    let (mut adv, mut rnd) = (0.0, 0.0);
    for trial in 0..20 {
        let b = bundle(1, 100 + trial);
        let eps = 0.5;
        let moved = intermediate_vat(&net, Head::Aux(0), &b, Level::D1, eps, 1e-6, false, &mut rng(trial)).unwrap();
        let r = random_unit::<f64, _>(b.d1.shape(), &mut rng(1000 + trial));
        let random = b.d1.zip_map(&r, |x, r| x + eps * r).unwrap();
        adv += divergence(&net, &b, &moved);
        rnd += divergence(&net, &b, &random);
    }
    assert!(adv >= rnd, "vat {adv} vs random {rnd}");
}

fn context<'a>(net: &'a ChangeNet<f64>, b: &'a FeatureBundle<f64>, pseudo: &'a [u8]) -> PerturbContext<'a, f64> {
    PerturbContext { net, bundle: b, pseudo, image_dims: (64, 64), batch_stats: false }
}

fn verdicts(flags: &[bool]) -> Vec<GateVerdict> {
    flags.iter().enumerate().map(|(i, &p)| GateVerdict { sample_id: i.to_string(), iou_score: 0.5, perturb: p }).collect()
}

#[test]
fn closed_gate_feeds_every_branch_the_clean_batch() {
    let net = tiny_net(7);
    let b = bundle(2, 20);
    let pseudo = label_with_block(2, 64, 64);
    let out = apply_gated_perturbations(&context(&net, &b, &pseudo), &verdicts(&[false, false]), &PerturbationSpec::defaults(), FpTarget::D1, &mut rng(1)).unwrap();
    assert_eq!(out.len(), 7);
    assert!(out.iter().all(|o| o == &b));
}

#[test]
fn open_gate_gives_seven_distinct_batches() {
    let net = tiny_net(7);
    let b = bundle(2, 21);
    let pseudo = label_with_block(2, 64, 64);
    let out = apply_gated_perturbations(&context(&net, &b, &pseudo), &verdicts(&[true, true]), &PerturbationSpec::defaults(), FpTarget::D1, &mut rng(2)).unwrap();
    for (i, o) in out.iter().enumerate() {
        assert_ne!(o.d1, b.d1, "branch {i}");
        assert_eq!(o.d4, b.d4);
        assert!(o.d1.all_finite());
        for other in &out[i + 1..] {
            assert_ne!(o.d1, other.d1);
        }
    }
}

#[test]
fn mixed_gate_keeps_clean_rows_bit_identical() {
    let net = tiny_net(7);
    let b = bundle(4, 22);
    let pseudo = label_with_block(4, 64, 64);
    let flags = [true, false, true, false];
    let out = apply_gated_perturbations(&context(&net, &b, &pseudo), &verdicts(&flags), &PerturbationSpec::defaults(), FpTarget::D1AndD4, &mut rng(3)).unwrap();
    for o in &out {
        for (i, &f) in flags.iter().enumerate() {
            if !f {
                assert_eq!(o.d1.row(i), b.d1.row(i));
                assert_eq!(o.d4.row(i), b.d4.row(i));
            }
        }
    }
    assert!(out.iter().any(|o| o.d4.row(0) != b.d4.row(0)));
}

#[test]
fn too_many_specs_for_the_network() {
    let net = tiny_net(2);
    let b = bundle(1, 23);
    let pseudo = vec![0u8; 64 * 64];
    let r = plan_gated_edits(&context(&net, &b, &pseudo), &verdicts(&[true]), &PerturbationSpec::defaults(), FpTarget::D1, &mut rng(1));
    assert!(matches!(r, Err(Error::IndexOutOfRange { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stochastic_operators_preserve_shape_and_finiteness(seed in 0u64..10_000, n in 1usize..3, c in 1usize..5, h in 1usize..9, w in 1usize..9) {
        let d = features(&[n, c, h, w], seed);
        let mut r = rng(seed);
        let label: Vec<u8> = (0..n * h * w).map(|_| r.random_bool(0.3) as u8).collect();
        let outs = [
            feature_noise(&d, &mut r, 0.3).unwrap(),
            feature_dropout(&d, &mut r, [0.6, 0.9]).unwrap(),
            object_masking(&d, &label).unwrap(),
            context_masking(&d, &label).unwrap(),
            guided_cutout(&d, &label, &mut r, [0.1, 0.4]).unwrap(),
            random_dropout(&d, &mut r, 0.5).unwrap(),
        ];
        for o in &outs {
            prop_assert_eq!(o.shape(), d.shape());
            prop_assert!(o.all_finite());
        }
    }

    #[test]
    fn nearest_label_resize_picks_source_pixels(h in 1usize..20, w in 1usize..20, ho in 1usize..20, wo in 1usize..20) {
        let label: Vec<u8> = (0..h * w).map(|i| (i % 3 == 0) as u8).collect();
        let out = resize_labels(&label, 1, h, w, ho, wo);
        for y in 0..ho {
            for x in 0..wo {
                prop_assert_eq!(out[y * wo + x], label[(y * h / ho) * w + x * w / wo]);
            }
        }
    }
}
