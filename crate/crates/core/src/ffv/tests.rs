use super::*;
use crate::model::{InputNorm, LayerKind, LayerSpec, ModelSpec};

fn tiny_model(size: usize, seed: u64) -> TrainedModel {
    let spec = ModelSpec {
        name: "tiny".into(),
        input_shape: vec![3, size, size],
        input_norm: InputNorm::standard(3),
        num_classes: 2,
        layers: vec![
            LayerSpec::new("conv1", LayerKind::Conv3x3 { out_channels: 2 }),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new("dense", LayerKind::Dense { out_features: 2 }),
        ],
    };
    TrainedModel::build(spec, seed).unwrap()
}

/// Channel 0 of conv1 responds to intensity alternating along x.
fn stripe_detector(size: usize) -> TrainedModel {
    let mut m = tiny_model(size, 0);
    let w = m.weights.get_mut("conv1.weight").unwrap();
    let per_out = 3 * 9;
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        *v = if i < per_out {
            [-1.0, 2.0, -1.0][i % 3]
        } else {
            0.0
        };
    }
    m
}

fn no_transforms(steps: usize) -> VisualizationConfig {
    VisualizationConfig {
        steps,
        transforms: TransformSchedule::none(),
        ..Default::default()
    }
}

fn unit_cav(layer: &str, direction: Vec<f32>) -> Cav {
    let n = direction.iter().map(|v| v * v).sum::<f32>().sqrt();
    Cav {
        concept: "fixture".into(),
        layer: layer.into(),
        direction: Tensor::from_vec(direction.into_iter().map(|v| v / n).collect()),
        bias: 0.0,
        accuracy: 1.0,
        probe: Default::default(),
        negative_index: None,
        warning: false,
    }
}

#[test]
fn stripe_detector_yields_vertical_stripes() {
    let m = stripe_detector(16);
    // the detector peaks at the Nyquist band, which the 1/f spectrum damps
    let cfg = VisualizationConfig {
        parameterization: Parameterization::Pixel,
        steps: 128,
        transforms: TransformSchedule {
            rotate: false,
            ..Default::default()
        },
        ..Default::default()
    };
    let vis = channel_fv(&m, "relu1", 0, &cfg).unwrap();
    let sig = signature(&vis.image).unwrap();
    let off_axis = sig.angle.min(180.0 - sig.angle);
    assert!(off_axis <= spectral::WINDOW_DEG, "{sig:?}");
    assert!(sig.ratio > 0.5, "{sig:?}");
}

#[test]
fn single_step_increases_objective() {
    let m = tiny_model(8, 3);
    for kind in [Parameterization::Pixel, Parameterization::Frequency] {
        let cfg = VisualizationConfig {
            parameterization: kind,
            lr: 0.01,
            ..no_transforms(1)
        };
        let vis = channel_fv(&m, "conv1", 1, &cfg).unwrap();
        assert_eq!(vis.trace.len(), 2);
        assert!(vis.trace[1] > vis.trace[0], "{kind:?}: {:?}", vis.trace);
    }
}

#[test]
fn same_seed_same_image() {
    let m = tiny_model(8, 1);
    let cfg = VisualizationConfig {
        steps: 8,
        seed: 11,
        ..Default::default()
    };
    let a = channel_fv(&m, "relu1", 0, &cfg).unwrap();
    let b = channel_fv(&m, "relu1", 0, &cfg).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.trace, b.trace);
    let c = channel_fv(&m, "relu1", 0, &VisualizationConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.image, c.image);
}

#[test]
fn running_max_never_decreases() {
    let m = tiny_model(8, 2);
    let vis = channel_fv(&m, "relu1", 1, &VisualizationConfig { steps: 16, ..Default::default() }).unwrap();
    let rm = vis.running_max();
    assert!(rm.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*rm.last().unwrap(), vis.best_objective);
    assert!(vis.best_objective >= vis.trace[0]);
}

#[test]
fn orthogonal_facet_reduces_to_channel_objective() {
    // ∇f_{ℓ,i} of a channel mean is supported on channel i only, so a CAV
    // that vanishes there contributes nothing
    let m = tiny_model(8, 4);
    let width = m.layer_width("relu1").unwrap();
    let plane = width / 2;
    let dir: Vec<f32> = (0..width).map(|i| if i < plane { 0.0 } else { 1.0 + (i % 3) as f32 }).collect();
    let cav = unit_cav("relu1", dir);
    let cfg = VisualizationConfig {
        steps: 12,
        facet_weight: 5.0,
        ..Default::default()
    };
    let plain = channel_fv(&m, "relu1", 0, &cfg).unwrap();
    let faceted = faceted_fv(&m, "relu1", 0, &cav, &cfg).unwrap();
    for (a, b) in plain.trace.iter().zip(&faceted.trace) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn facet_term_changes_the_objective() {
    let m = tiny_model(8, 4);
    let width = m.layer_width("relu1").unwrap();
    let cav = unit_cav("relu1", vec![1.0; width]);
    let img = Tensor::full(&[3, 8, 8], 0.3);
    let plain = Objective::channel(&m, "relu1", 0).unwrap().value(&img).unwrap();
    let faceted = Objective::faceted(&m, "relu1", 0, &cav, 10.0).unwrap().value(&img).unwrap();
    assert_ne!(plain, faceted);
}

#[test]
fn dream_toward_one_hot_cav_climbs() {
    let m = tiny_model(8, 5);
    let width = m.layer_width("relu1").unwrap();
    let mut dir = vec![0.0; width];
    dir[width / 2 + 9] = 1.0;
    let cav = unit_cav("relu1", dir);
    let cfg = VisualizationConfig {
        steps: 64,
        ..no_transforms(64)
    };
    let vis = cav_dream(&m, "relu1", &cav, &cfg).unwrap();
    let head: f64 = vis.trace[..8].iter().sum::<f64>() / 8.0;
    let tail: f64 = vis.trace[vis.trace.len() - 8..].iter().sum::<f64>() / 8.0;
    assert!(tail > head, "{head} -> {tail}");
    assert!(vis.best_objective <= 1.0 + 1e-6);
}

#[test]
fn zero_steps_rejected() {
    let m = tiny_model(8, 0);
    assert!(channel_fv(&m, "relu1", 0, &no_transforms(0)).is_err());
    let bad_scale = VisualizationConfig {
        transforms: TransformSchedule {
            scale: (1.2, 1.1),
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(bad_scale.validate().is_err());
}

#[test]
fn channel_out_of_range_rejected() {
    let m = tiny_model(8, 0);
    assert!(Objective::channel(&m, "relu1", 2).is_err());
}

#[test]
fn cav_layer_must_match() {
    let m = tiny_model(8, 0);
    let cav = unit_cav("conv1", vec![1.0; m.layer_width("conv1").unwrap()]);
    assert!(Objective::dream(&m, "relu1", &cav).is_err());
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for kind in [Parameterization::Pixel, Parameterization::Frequency] {
        let p = Param::new(kind, &[2, 8, 8], 0.3, 9).unwrap();
        let mut r = rng::rng(10);
        let weights = Tensor::from_fn(&[2, 8, 8], |_| rand::Rng::random_range(&mut r, -1.0..1.0));
        // functional L(θ) = <weights, render(θ)>
        let loss = |p: &Param| p.render().dot(&weights);
        let analytic = p.backprop(&p.render(), &weights);
        let h = 1e-3;
        for k in [0, 5, 17, 40, analytic.len() - 1] {
            let mut up = Param { theta: p.theta.clone(), scale: p.scale.clone(), ..*p_clone_meta(&p) };
            up.theta[k] += h;
            let mut down = Param { theta: p.theta.clone(), scale: p.scale.clone(), ..*p_clone_meta(&p) };
            down.theta[k] -= h;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
            assert!(
                (numeric - analytic[k]).abs() <= 1e-2 * analytic[k].abs().max(1e-2),
                "{kind:?} θ[{k}]: {numeric} vs {}",
                analytic[k]
            );
        }
    }
}

fn p_clone_meta(p: &Param) -> Box<Param> {
    Box::new(Param {
        kind: p.kind,
        c: p.c,
        h: p.h,
        w: p.w,
        theta: Vec::new(),
        scale: Vec::new(),
    })
}

#[test]
fn frequency_image_round_trips_through_the_spectrum() {
    // analysing a synthesized plane recovers the (consistent) spectrum
    let (h, w) = (32, 32);
    let mut r = rng::rng(8);
    let plane: Vec<f64> = (0..h * w).map(|_| rand::Rng::random::<f64>(&mut r)).collect();
    let spec = fft::rfft2(&plane, h, w);
    let again = fft::rfft2(&fft::irfft2(&spec, h, w), h, w);
    let err = spec
        .iter()
        .zip(&again)
        .map(|(a, b)| (a.re - b.re).abs().max((a.im - b.im).abs()))
        .fold(0.0, f64::max);
    assert!(err < 1e-4, "{err}");
}


/// Channel 0 of conv1 copies the grey level, so a facet on it paints the
/// CAV's spatial pattern.
fn grey_copier(size: usize) -> TrainedModel {
    let mut m = tiny_model(size, 0);
    let w = m.weights.get_mut("conv1.weight").unwrap();
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        *v = if i < 27 && i % 9 == 4 { 1.0 / 3.0 } else { 0.0 };
    }
    m.weights.get_mut("conv1.bias").unwrap().data_mut().fill(0.0);
    m
}

fn pattern_cav(size: usize, on: impl Fn(usize, usize) -> bool) -> Cav {
    let plane: Vec<f32> = (0..size * size).map(|p| if on(p / size, p % size) { 1.0 } else { 0.0 }).collect();
    let mean = plane.iter().sum::<f32>() / plane.len() as f32;
    let mut dir: Vec<f32> = plane.iter().map(|v| v - mean).collect();
    dir.extend(std::iter::repeat_n(0.0, size * size));
    unit_cav("conv1", dir)
}

#[test]
fn stripes_facet_is_more_oriented_than_dots_facet() {
    let m = grey_copier(16);
    let stripes = pattern_cav(16, |_, x| x % 4 < 2);
    let dots = pattern_cav(16, |y, x| y % 4 == 0 && x % 4 == 0);
    let cfg = VisualizationConfig {
        parameterization: Parameterization::Pixel,
        facet_weight: 100.0,
        ..no_transforms(64)
    };
    let s = signature(&faceted_fv(&m, "conv1", 0, &stripes, &cfg).unwrap().image).unwrap();
    let d = signature(&faceted_fv(&m, "conv1", 0, &dots, &cfg).unwrap().image).unwrap();
    assert!(s.ratio > d.ratio, "stripes {s:?} dots {d:?}");
    assert!(s.ratio > 0.5, "{s:?}");
}

#[test]
fn best_image_survives_without_transforms() {
    let cfg = VisualizationConfig {
        steps: 32,
        ..Default::default()
    };
    for seed in 0..4 {
        let m = tiny_model(16, seed);
        for ch in 0..2 {
            let vis = channel_fv(&m, "relu1", ch, &VisualizationConfig { seed, ..cfg.clone() }).unwrap();
            let raw = Objective::channel(&m, "relu1", ch).unwrap().value(&vis.image).unwrap();
            assert!(raw >= 0.5 * vis.best_objective, "seed {seed} channel {ch}: {raw} vs {}", vis.best_objective);
        }
    }
}
