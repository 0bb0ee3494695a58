//! Randomized invariants across modules, each checked against a second route
//! to the same quantity where one exists.

use cpak_core::attack::{random_sign_baseline, tp_untargeted, AttackConfig};
use cpak_core::cav::{fit_probe, ProbeConfig};
use cpak_core::ffv::fft::{irfft2, rfft2};
use cpak_core::ffv::{channel_fv, VisualizationConfig};
use cpak_core::freval::{frechet_distance, FrechetStats};
use cpak_core::model::{Architecture, TrainedModel};
use cpak_core::stats;
use cpak_core::synthdata::{content_hash, render_token, TextureKind};
use cpak_core::tape::reference::{forward_f64, Array64};
use cpak_core::tcav::ClassGradients;
use cpak_core::tensor::Tensor;
use cpak_oracles::graphs::{smooth_random_graph, MARGIN};
use cpak_oracles::oracles::{self, directional_derivative, rotated_covariance};
use proptest::prelude::*;

const KINDS: [TextureKind; 4] = [TextureKind::Stripes, TextureKind::Dots, TextureKind::Honeycomb, TextureKind::Checker];

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn model(arch: Architecture, seed: u64) -> TrainedModel {
    TrainedModel::build(arch.spec(&[3, 16, 16], 6), seed).unwrap()
}

fn tokens(kind: TextureKind, n: u64, seed: u64) -> Vec<Tensor> {
    (0..n).map(|i| render_token(kind, (16, 16), seed * 100 + i).unwrap()).collect()
}

fn stats_of(mean: Vec<f64>, cov: Vec<f64>) -> FrechetStats {
    FrechetStats { mean, cov, n: 50 }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn gradient_is_linear_in_the_objective(seed in 0u64..10_000, a in -3.0f32..3.0, b in -3.0f32..3.0) {
        let mut g = smooth_random_graph(seed, MARGIN);
        let (name, x) = g.inputs[0].clone();
        let xid = g.tape.find_input(&name).unwrap();
        let c = g.tape.constant(Tensor::from_fn(x.shape(), |i| ((i * 31 % 17) as f32 - 8.0) / 8.0));
        let lin = g.tape.dot(xid, c);
        let fa = g.tape.scale(g.root, a);
        let lb = g.tape.scale(lin, b);
        let combo = g.tape.add(fa, lb);
        let vals = g.tape.forward(&g.bindings()).unwrap();
        let grad = |root| g.tape.gradient(&vals, root, &[xid]).unwrap().take(xid);
        let (gf, gl, gc) = (grad(g.root), grad(lin), grad(combo));
        for i in 0..x.len() {
            let want = a as f64 * gf.data()[i] as f64 + b as f64 * gl.data()[i] as f64;
            let got = gc.data()[i] as f64;
            prop_assert!((got - want).abs() <= 1e-4 * (1.0 + want.abs()), "{got} vs {want}");
        }
    }

    #[test]
    fn forward_and_gradient_are_bitwise_deterministic(seed in 0u64..10_000) {
        let g = smooth_random_graph(seed, 0.0);
        let run = || {
            let vals = g.tape.forward(&g.bindings()).unwrap();
            let ids: Vec<_> = g.inputs.iter().map(|(n, _)| g.tape.find_input(n).unwrap()).collect();
            let mut grads = g.tape.gradient(&vals, g.root, &ids).unwrap();
            let out = vals.get(g.root).clone();
            (out, ids.iter().map(|&id| grads.take(id)).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn welch_matches_quadrature(
        a in prop::collection::vec(-10.0f64..10.0, 3..30),
        b in prop::collection::vec(-10.0f64..10.0, 3..30),
        shift in -5.0f64..5.0,
    ) {
        let b: Vec<f64> = b.iter().map(|x| x + shift).collect();
        let (t, df, p) = oracles::welch(&a, &b);
        prop_assume!(df >= 1.0);
        let got = stats::welch_t_test(&a, &b).unwrap();
        prop_assert!((got.t - t).abs() <= 1e-10 * (1.0 + t.abs()), "t {} vs {t}", got.t);
        prop_assert!((got.df - df).abs() <= 1e-9 * df, "df {} vs {df}", got.df);
        prop_assert!((got.p - p).abs() <= 1e-8, "p {} vs {p}", got.p);
    }

    #[test]
    fn frechet_is_a_symmetric_nonnegative_distance(
        m1 in prop::collection::vec(-3.0f64..3.0, 3),
        m2 in prop::collection::vec(-3.0f64..3.0, 3),
        e1 in prop::collection::vec(0.01f64..5.0, 3),
        e2 in prop::collection::vec(0.01f64..5.0, 3),
        angle in 0.0f64..3.0,
    ) {
        let a = stats_of(m1.clone(), rotated_covariance(&e1, angle));
        let b = stats_of(m2, rotated_covariance(&e2, angle * 0.5));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn frechet_grows_with_mean_separation(
        e in prop::collection::vec(0.01f64..5.0, 4),
        d in prop::collection::vec(-2.0f64..2.0, 4),
        s in 0.0f64..3.0,
        ds in 0.01f64..3.0,
    ) {
        prop_assume!(d.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let cov = rotated_covariance(&e, 0.3);
        let base = stats_of(vec![0.0; 4], cov.clone());
        let at = |k: f64| frechet_distance(&base, &stats_of(d.iter().map(|x| k * x).collect(), cov.clone())).unwrap();
        prop_assert!(at(s + ds) > at(s));
    }

    #[test]
    fn rfft_round_trips(plane in prop::collection::vec(-1.0f64..1.0, 8 * 16)) {
        let back = irfft2(&rfft2(&plane, 8, 16), 8, 16);
        for (x, y) in plane.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tokens_stay_in_range_and_seeds_differ(kind in 0usize..4, seed in 0u64..1_000_000) {
        let a = render_token(KINDS[kind], (16, 16), seed).unwrap();
        let b = render_token(KINDS[kind], (16, 16), seed + 1).unwrap();
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_ne!(content_hash(&a), content_hash(&b));
        prop_assert_eq!(&a, &render_token(KINDS[kind], (16, 16), seed).unwrap());
    }

    #[test]
    fn random_sign_noise_is_bounded(seed in 0u64..1000, eps in 0.0f32..0.1) {
        let base = tokens(TextureKind::Dots, 3, seed);
        let noisy = random_sign_baseline(&base, eps, seed);
        for (x, y) in base.iter().zip(&noisy.images) {
            prop_assert!(x.max_abs_diff(y) <= eps + 1e-7);
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

proptest! {
    #![proptest_config(config(6))]

    #[test]
    fn split_composes_to_the_full_model(seed in 0u64..100, arch_b in any::<bool>(), layer in 0usize..3) {
        let arch = if arch_b { Architecture::SmallConvNetB } else { Architecture::SmallConvNetA };
        let m = model(arch, seed);
        let layer = ["pool1", "pool2", "pool3"][layer];
        let x = tokens(TextureKind::Stripes, 2, seed);
        let split = m.split(layer).unwrap();
        let composed = split.head(&split.features(&x).unwrap()).unwrap();
        let direct = m.logits(&x).unwrap();
        prop_assert!(composed.max_abs_diff(&direct) <= 1e-5, "{}", composed.max_abs_diff(&direct));
    }

    #[test]
    fn cav_flips_with_its_labels(seed in 0u64..100) {
        let m = model(Architecture::SmallConvNetA, seed);
        let split = m.split("pool2").unwrap();
        let pos = split.features(&tokens(TextureKind::Stripes, 12, seed)).unwrap();
        let neg = split.features(&tokens(TextureKind::Dots, 12, seed)).unwrap();
        let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
        let v = fit_probe("c", "pool2", &pos, &neg, &cfg).unwrap();
        let w = fit_probe("c", "pool2", &neg, &pos, &cfg).unwrap();
        let norm = v.direction.l2_norm();
        prop_assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
        let worst = v.direction.data().iter().zip(w.direction.data()).map(|(a, b)| (a + b).abs()).fold(0f32, f32::max);
        prop_assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn sensitivity_is_linear_in_the_cav(seed in 0u64..100, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let m = model(Architecture::SmallConvNetA, seed);
        let x = tokens(TextureKind::Honeycomb, 4, seed);
        let class = m.predict(&x).unwrap()[0];
        let g = ClassGradients::compute(&m, "pool2", &x, class).unwrap();
        let split = m.split("pool2").unwrap();
        let pos = split.features(&tokens(TextureKind::Stripes, 8, seed)).unwrap();
        let neg = split.features(&tokens(TextureKind::Dots, 8, seed)).unwrap();
        let v1 = fit_probe("c", "pool2", &pos, &neg, &ProbeConfig::default()).unwrap();
        let v2 = fit_probe("c", "pool2", &neg, &split.features(&tokens(TextureKind::Checker, 8, seed)).unwrap(), &ProbeConfig::default()).unwrap();
        let mut mix = v1.clone();
        mix.direction = Tensor::from_fn(v1.direction.shape(), |i| a * v1.direction.data()[i] + b * v2.direction.data()[i]);
        let (s1, s2, sm) = (g.sensitivities(&v1).unwrap(), g.sensitivities(&v2).unwrap(), g.sensitivities(&mix).unwrap());
        for i in 0..sm.len() {
            let want = a as f64 * s1[i] + b as f64 * s2[i];
            prop_assert!((sm[i] - want).abs() <= 1e-4 * (1.0 + want.abs()));
        }
        let mean = s1.iter().sum::<f64>() / s1.len() as f64;
        prop_assert!((g.score(&v1).unwrap() - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
    }

    #[test]
    fn attack_respects_the_box_and_is_deterministic(seed in 0u64..100) {
        let m = model(Architecture::SmallConvNetA, seed);
        let x = tokens(TextureKind::Stripes, 2, seed);
        let u = tokens(TextureKind::Checker, 4, seed);
        let cfg = AttackConfig { steps: 3, seed, ..AttackConfig::default() };
        let a = tp_untargeted(&m, &x, &u, &cfg).unwrap();
        for (orig, adv) in x.iter().zip(&a.images) {
            prop_assert!(orig.max_abs_diff(adv) <= cfg.epsilon + 1e-7);
            prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        prop_assert_eq!(a, tp_untargeted(&m, &x, &u, &cfg).unwrap());
    }

    #[test]
    fn visualization_trace_has_a_running_max(seed in 0u64..100) {
        let m = model(Architecture::SmallConvNetA, seed);
        let cfg = VisualizationConfig { steps: 6, seed, ..VisualizationConfig::default() };
        let v = channel_fv(&m, "pool1", (seed % 8) as usize, &cfg).unwrap();
        let rm = v.running_max();
        prop_assert!(rm.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(*rm.last().unwrap(), v.best_objective);
    }
}

/// Backpropagated `f32` sensitivities against central differences of the
/// head evaluated in `f64` along the CAV.
#[test]
fn sensitivity_matches_a_directional_difference() {
    for seed in 0..3 {
        let m = model(Architecture::SmallConvNetA, seed);
        let split = m.split("pool2").unwrap();
        let x = tokens(TextureKind::Dots, 3, seed);
        let class = m.predict(&x).unwrap()[0];
        let g = ClassGradients::compute(&m, "pool2", &x, class).unwrap();
        let pos = split.features(&tokens(TextureKind::Stripes, 8, seed)).unwrap();
        let neg = split.features(&tokens(TextureKind::Checker, 8, seed)).unwrap();
        let cav = fit_probe("c", "pool2", &pos, &neg, &ProbeConfig::default()).unwrap();
        let kept: Vec<Tensor> = x.iter().zip(m.predict(&x).unwrap()).filter(|(_, p)| *p == class).map(|(t, _)| t.clone()).collect();
        let acts = split.features(&kept).unwrap();
        let sens = g.sensitivities(&cav).unwrap();
        let v: Vec<f64> = cav.direction.data().iter().map(|&d| d as f64).collect();
        for (i, s) in sens.iter().enumerate() {
            let a: Vec<f64> = acts.row(i).iter().map(|&d| d as f64).collect();
            let (tape, _, logits) = split.head_tape(1);
            let binds = m.weight_bindings();
            let logit = |h: &[f64]| {
                let act = Array64 { shape: vec![1, h.len()], data: h.to_vec() };
                forward_f64(&tape, &binds, &[("activation", &act)]).unwrap()[logits.index()].data[class]
            };
            let fd = directional_derivative(logit, &a, &v, 1e-6);
            assert!((s - fd).abs() <= 1e-4 * s.abs() + 1e-7, "seed {seed} input {i}: {s} vs {fd}");
        }
    }
}

#[test]
fn model_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for (i, arch) in [Architecture::SmallConvNetA, Architecture::SmallConvNetB].into_iter().enumerate() {
        let m = model(arch, 7);
        let path = dir.path().join(format!("m{i}.cpak"));
        m.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        let x = tokens(TextureKind::Stripes, 2, 1);
        assert_eq!(m.logits(&x).unwrap(), back.logits(&x).unwrap());
        assert_eq!(m.to_bundle(), back.to_bundle());
    }
}
