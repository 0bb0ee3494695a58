//! Fast checks of every module, each against a value that is known by
//! construction.

use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Result};

use cpak_core::attack::{random_sign_baseline, PerturbedTokens};
use cpak_core::cav::{fit_probe, ProbeConfig};
use cpak_core::ffv::{channel_fv, signature, VisualizationConfig};
use cpak_core::freval::{frechet_distance, FrechetStats};
use cpak_core::harness::{self, ExperimentConfig, RunOptions, PRESETS};
use cpak_core::linalg::{sqrtm_psd, Matrix};
use cpak_core::model::{Architecture, TrainedModel};
use cpak_core::stats;
use cpak_core::synthdata::{default_classes, generate_dataset, render_texture, render_token, Texture, TextureKind};
use cpak_core::tape::{finite_difference_check, Bindings, Tape};
use cpak_core::tcav::ClassGradients;
use cpak_core::tensor::Tensor;

type Check = (&'static str, fn() -> Result<()>);

const CHECKS: [Check; 11] = [
    ("tape: conv gradient matches central differences", tape_gradient),
    ("stats: incomplete beta and t-test identities", stats_identities),
    ("linalg: square root of a diagonal matrix", linalg_sqrt),
    ("freval: scalar Fréchet distance is 2", frechet_scalar),
    ("synthdata: rendering is deterministic", synth_determinism),
    ("model: logits shape and layer names", model_shapes),
    ("cav: separable probe is exact", cav_separable),
    ("tcav: flipping the CAV flips the score", tcav_antisymmetry),
    ("attack: random-sign noise has the requested norm", attack_norms),
    ("ffv: stripes are oriented and visualizations run", ffv_basics),
    ("harness: presets validate", harness_presets),
];

/// Runs every check; with `out`, also runs and replays the smoke scenario.
pub fn run(out: Option<&Path>, verbose: bool) -> Result<bool> {
    let start = Instant::now();
    let mut ok = true;
    for (name, check) in CHECKS {
        let t = Instant::now();
        match check() {
            Ok(()) => eprintln!("ok     {name} ({:.2?})", t.elapsed()),
            Err(e) => {
                ok = false;
                eprintln!("FAILED {name}: {e:#}");
            }
        }
    }
    if let Some(dir) = out {
        let t = Instant::now();
        match smoke(dir, verbose) {
            Ok(()) => eprintln!("ok     harness: smoke run replays ({:.2?})", t.elapsed()),
            Err(e) => {
                ok = false;
                eprintln!("FAILED harness: smoke run replays: {e:#}");
            }
        }
    }
    eprintln!("selftest {} in {:.2?}", if ok { "passed" } else { "failed" }, start.elapsed());
    Ok(ok)
}

fn tape_gradient() -> Result<()> {
    let mut tape = Tape::new();
    let x = tape.input("x", &[1, 2, 5, 5]);
    let w = tape.input("w", &[3, 2, 3, 3]);
    let y = tape.conv2d(x, w, None, 1, 1);
    let sq = tape.hadamard(y, y);
    let root = tape.sum(sq);
    let xv = Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 37 % 11) as f32 - 5.0) / 7.0);
    let wv = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13 % 7) as f32 - 3.0) / 5.0);
    let inputs = Bindings::new().bind("x", &xv).bind("w", &wv);
    let err = finite_difference_check(&tape, &inputs, root, "x", 1e-3)?;
    ensure!(err < 1e-3, "relative error {err:e}");
    Ok(())
}

fn stats_identities() -> Result<()> {
    for x in [0.1, 0.5, 0.9] {
        ensure!((stats::inc_beta(1.0, 1.0, x) - x).abs() < 1e-12, "I_x(1, 1) != x at {x}");
    }
    let t = stats::welch_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])?;
    ensure!(t.t == 0.0 && (t.p - 1.0).abs() < 1e-12, "identical samples gave t={} p={}", t.t, t.p);
    let t = stats::one_sample_t_test(&[1.0, 2.0, 3.0, 2.0], 0.0)?;
    ensure!((t.t - 2.0 * 6f64.sqrt()).abs() < 1e-12, "one-sample t {}", t.t);
    Ok(())
}

fn linalg_sqrt() -> Result<()> {
    let r = sqrtm_psd(&Matrix::diag(&[4.0, 9.0, 0.25]), 1e-9)?;
    let want = Matrix::diag(&[2.0, 3.0, 0.5]);
    for i in 0..3 {
        for j in 0..3 {
            ensure!((r.get(i, j) - want.get(i, j)).abs() < 1e-12, "entry ({i}, {j}) = {}", r.get(i, j));
        }
    }
    Ok(())
}

fn frechet_scalar() -> Result<()> {
    let a = FrechetStats {
        mean: vec![0.0],
        cov: vec![1.0],
        n: 2,
    };
    let b = FrechetStats {
        mean: vec![1.0],
        cov: vec![4.0],
        n: 2,
    };
    let d = frechet_distance(&a, &b)?;
    ensure!(d == 2.0, "got {d}");
    Ok(())
}

fn synth_determinism() -> Result<()> {
    for kind in [TextureKind::Stripes, TextureKind::Dots, TextureKind::Honeycomb] {
        ensure!(render_token(kind, (16, 16), 3)? == render_token(kind, (16, 16), 3)?, "{kind} differs");
    }
    let ds = generate_dataset(&default_classes(), 2, (16, 16), 5)?;
    ensure!(ds.len() == 2 * ds.classes.len(), "{} images", ds.len());
    ensure!(ds == generate_dataset(&default_classes(), 2, (16, 16), 5)?, "dataset differs");
    Ok(())
}

fn small_model() -> Result<TrainedModel> {
    Ok(TrainedModel::build(Architecture::SmallConvNetA.spec(&[3, 16, 16], 6), 0)?)
}

fn model_shapes() -> Result<()> {
    let m = small_model()?;
    let x = vec![Tensor::full(&[3, 16, 16], 0.5); 3];
    ensure!(m.logits(&x)?.shape() == [3, 6], "logits {:?}", m.logits(&x)?.shape());
    for l in ["pool1", "pool2", "pool3"] {
        m.layer_index(l)?;
    }
    Ok(())
}

fn cav_separable() -> Result<()> {
    let pos = Tensor::new(vec![4, 2], vec![2.0, 0.1, 3.0, -0.2, 2.5, 0.3, 4.0, 0.0])?;
    let neg = Tensor::new(vec![4, 2], vec![-2.0, 0.2, -3.0, -0.1, -2.5, 0.0, -4.0, 0.1])?;
    let cav = fit_probe("x", "l", &pos, &neg, &ProbeConfig::default())?;
    ensure!(cav.accuracy == 1.0, "accuracy {}", cav.accuracy);
    ensure!(cav.direction.data()[0] > 0.9, "direction {:?}", cav.direction.data());
    Ok(())
}

fn tcav_antisymmetry() -> Result<()> {
    let m = small_model()?;
    let inputs: Vec<Tensor> = (0..4).map(|s| render_token(TextureKind::Stripes, (16, 16), s)).collect::<Result<_, _>>()?;
    let g = ClassGradients::compute(&m, "pool2", &inputs, 0)?;
    let split = m.split("pool2")?;
    let pos = split.features(&inputs)?;
    let other: Vec<Tensor> = (0..4).map(|s| render_token(TextureKind::Checker, (16, 16), s)).collect::<Result<_, _>>()?;
    let neg = split.features(&other)?;
    let cav = fit_probe("stripes", "pool2", &pos, &neg, &ProbeConfig::default())?;
    let mut flipped = cav.clone();
    flipped.direction = cav.direction.map(|v| -v);
    let (a, b) = (g.score(&cav)?, g.score(&flipped)?);
    ensure!((a + b).abs() < 1e-9, "scores {a} and {b}");
    Ok(())
}

fn attack_norms() -> Result<()> {
    let tokens = vec![Tensor::full(&[3, 8, 8], 0.5); 3];
    let eps = 8.0 / 255.0;
    let noisy = random_sign_baseline(&tokens, eps, 1);
    for l in &noisy.linf {
        ensure!((l - eps as f64).abs() < 1e-6, "linf {l}");
    }
    ensure!(PerturbedTokens::identity(&tokens).linf.iter().all(|&l| l == 0.0), "identity moved tokens");
    Ok(())
}

fn ffv_basics() -> Result<()> {
    let stripes = signature(&render_texture(&Texture::new(TextureKind::Stripes, 8.0), (32, 32), 0)?)?;
    ensure!(stripes.ratio > 0.5, "stripe ratio {}", stripes.ratio);
    let cfg = VisualizationConfig {
        steps: 8,
        ..Default::default()
    };
    let v = channel_fv(&small_model()?, "pool1", 0, &cfg)?;
    ensure!(v.trace.len() == 9, "trace has {} entries", v.trace.len());
    ensure!(v.image.data().iter().all(|x| (0.0..=1.0).contains(x)), "image out of range");
    Ok(())
}

fn harness_presets() -> Result<()> {
    for p in PRESETS {
        ExperimentConfig::preset(p)?.validate()?;
    }
    Ok(())
}

fn smoke(dir: &Path, verbose: bool) -> Result<()> {
    let cfg = ExperimentConfig::preset("smoke")?;
    let opts = RunOptions {
        out: dir.to_path_buf(),
        cache: None,
        verbose,
    };
    harness::run(&cfg, &opts)?;
    let report = harness::replay(dir)?;
    ensure!(report.ok(), "replay mismatches: {:?}", report.mismatches);
    Ok(())
}
