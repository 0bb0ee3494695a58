//! Token pushing: ℓ∞-bounded PGD that moves concept tokens' hidden
//! representations onto a centroid, plus noise baselines.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cav::{centroid, Centroid};
use crate::container::Bundle;
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::rng;
use crate::synthdata::ppm;
use crate::tape::Bindings;
use crate::tensor::Tensor;

/// Tokens per batched PGD evaluation.
const ATTACK_CHUNK: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    Untargeted,
    Targeted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub steps: usize,
    pub alpha: f32,
    pub layer: String,
    pub mode: AttackMode,
    pub seed: u64,
    /// Number of PGD runs per token; runs after the first start uniformly
    /// inside the ε-box and the lowest final objective wins.
    pub restarts: usize,
    /// Round attacked pixels to 8 bits, staying inside the ε-box.
    pub requantize: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            steps: 20,
            alpha: 2.0 / 255.0,
            layer: "pool2".into(),
            mode: AttackMode::Untargeted,
            seed: 0,
            restarts: 1,
            requantize: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if self.steps == 0 || !(self.alpha > 0.0) || self.restarts == 0 {
            return Err(Error::invalid("steps, alpha and restarts must be positive"));
        }
        Ok(())
    }
}

/// Result of PGD on a batch: final images, per-item objective traces.
#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub images: Vec<Tensor>,
    /// `traces[i][s]` is item i's objective at step s; `steps + 1` entries.
    pub traces: Vec<Vec<f64>>,
}

/// A differentiable objective over a batch of images: returns each item's
/// value and a tensor whose row i has the sign of item i's gradient.
pub trait BatchObjective: Sync {
    fn eval(&self, batch: &[Tensor]) -> Result<(Vec<f64>, Vec<Tensor>)>;
}

impl<F> BatchObjective for F
where
    F: Fn(&[Tensor]) -> Result<(Vec<f64>, Vec<Tensor>)> + Sync,
{
    fn eval(&self, batch: &[Tensor]) -> Result<(Vec<f64>, Vec<Tensor>)> {
        self(batch)
    }
}

fn project(x: &mut [f32], x0: &[f32], eps: f32) {
    for (v, &o) in x.iter_mut().zip(x0) {
        *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

fn requantize(x: &mut [f32], x0: &[f32], eps: f32) {
    for (v, &o) in x.iter_mut().zip(x0) {
        let mut q = (*v * 255.0).round() / 255.0;
        if (q - o).abs() > eps + 1e-7 {
            q -= (q - o).signum() / 255.0;
        }
        *v = q.clamp(0.0, 1.0);
    }
}

/// Signed-gradient PGD minimization under `‖x − x0‖∞ ≤ ε`, `x ∈ [0,1]`.
///
/// `start_seeds[i]` seeds item i's random starts when `restarts > 1`.
pub fn pgd_batch(
    objective: &dyn BatchObjective,
    x0: &[Tensor],
    cfg: &AttackConfig,
    start_seeds: &[u64],
) -> Result<PgdOutcome> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut best: Option<PgdOutcome> = None;
    for restart in 0..cfg.restarts {
        let mut xs: Vec<Tensor> = x0
            .iter()
            .zip(start_seeds)
            .map(|(x, &s)| {
                let mut x = x.clone();
                if restart > 0 && eps > 0.0 {
                    let mut r = rng::stream(s, restart as u64);
                    for v in x.data_mut() {
                        *v += r.random_range(-eps..=eps);
                    }
                }
                x
            })
            .collect();
        for (x, o) in xs.iter_mut().zip(x0) {
            project(x.data_mut(), o.data(), eps);
        }
        let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.steps + 1); x0.len()];
        for step in 0..=cfg.steps {
            let (values, grads) = objective.eval(&xs)?;
            for (t, v) in traces.iter_mut().zip(&values) {
                t.push(*v);
            }
            if step == cfg.steps {
                break;
            }
            for ((x, g), o) in xs.iter_mut().zip(&grads).zip(x0) {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient { step });
                }
                for (v, &gi) in x.data_mut().iter_mut().zip(g.data()) {
                    if gi > 0.0 {
                        *v -= cfg.alpha;
                    } else if gi < 0.0 {
                        *v += cfg.alpha;
                    }
                }
                project(x.data_mut(), o.data(), eps);
            }
        }
        if cfg.requantize {
            for (x, o) in xs.iter_mut().zip(x0) {
                requantize(x.data_mut(), o.data(), eps);
            }
            let (values, _) = objective.eval(&xs)?;
            for (t, v) in traces.iter_mut().zip(values) {
                *t.last_mut().expect("non-empty trace") = v;
            }
        }
        let outcome = PgdOutcome { images: xs, traces };
        best = Some(match best {
            None => outcome,
            Some(mut b) => {
                for i in 0..x0.len() {
                    if outcome.traces[i].last() < b.traces[i].last() {
                        b.images[i] = outcome.images[i].clone();
                        b.traces[i] = outcome.traces[i].clone();
                    }
                }
                b
            }
        });
    }
    Ok(best.expect("at least one restart"))
}

/// PGD on a single image with a scalar objective `x ↦ (value, gradient)`.
pub fn pgd_minimize(
    objective: impl Fn(&Tensor) -> Result<(f64, Tensor)> + Sync,
    x0: &Tensor,
    cfg: &AttackConfig,
) -> Result<(Tensor, Vec<f64>)> {
    let wrapped = |batch: &[Tensor]| -> Result<(Vec<f64>, Vec<Tensor>)> {
        let (v, g) = objective(&batch[0])?;
        Ok((vec![v], vec![g]))
    };
    let out = pgd_batch(&wrapped, std::slice::from_ref(x0), cfg, &[cfg.seed])?;
    let x = out.images.into_iter().next().expect("one image");
    let delta = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect(),
    )?;
    Ok((delta, out.traces.into_iter().next().expect("one trace")))
}

/// `Σ_i ‖f_ℓ(x_i) − μ‖²` on a batch; per-item values are the unsquared
/// distances. Squaring leaves every gradient sign unchanged.
struct CentroidDistance<'m> {
    model: &'m TrainedModel,
    layer: usize,
    target: Tensor,
}

impl BatchObjective for CentroidDistance<'_> {
    fn eval(&self, batch: &[Tensor]) -> Result<(Vec<f64>, Vec<Tensor>)> {
        let n = batch.len();
        let d = self.target.len();
        let mut g = self.model.graph(n, self.layer);
        let act = *g.layers.last().expect("layer");
        let flat = g.tape.reshape(act, &[n, d]);
        let mu = g.tape.constant(self.target.clone());
        let diff = g.tape.sub(flat, mu);
        let sq = g.tape.hadamard(diff, diff);
        let root = g.tape.sum(sq);
        let x = Tensor::stack(batch)?;
        let mut binds: Bindings<'_> = self.model.weight_bindings();
        binds.insert("x", &x);
        let vals = g.tape.forward(&binds)?;
        let dv = vals.get(diff);
        let values = (0..n)
            .map(|i| dv.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .collect();
        let mut grads = g.tape.gradient(&vals, root, &[g.input])?;
        Ok((values, grads.take(g.input).unstack()))
    }
}

/// Attacked tokens plus the evidence of how they were made.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedTokens {
    pub images: Vec<Tensor>,
    pub initial: Vec<f64>,
    pub final_: Vec<f64>,
    pub traces: Vec<Vec<f64>>,
    /// Empirical `‖x̂ − x‖∞` per token.
    pub linf: Vec<f64>,
    pub record: serde_json::Value,
}

fn linf(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) as f64
}

/// PGD toward `target` at `cfg.layer` for every token.
pub fn push_tokens(
    model: &TrainedModel,
    tokens: &[Tensor],
    target: &Centroid,
    cfg: &AttackConfig,
) -> Result<PerturbedTokens> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::EmptySet("tokens to attack".into()));
    }
    let layer = model.layer_index(&cfg.layer)?;
    if target.layer != cfg.layer {
        return Err(Error::invalid(format!(
            "centroid is at `{}` but the attack targets `{}`",
            target.layer, cfg.layer
        )));
    }
    let objective = CentroidDistance {
        model,
        layer,
        target: target.as_tensor(),
    };
    let seeds: Vec<u64> = (0..tokens.len() as u64).map(|i| rng::derive(cfg.seed, i)).collect();
    let chunks: Vec<(usize, &[Tensor])> = tokens.chunks(ATTACK_CHUNK).enumerate().collect();
    let outcomes = chunks
        .par_iter()
        .map(|&(c, chunk)| {
            let s = &seeds[c * ATTACK_CHUNK..c * ATTACK_CHUNK + chunk.len()];
            pgd_batch(&objective, chunk, cfg, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(tokens.len());
    let mut traces = Vec::with_capacity(tokens.len());
    for o in outcomes {
        images.extend(o.images);
        traces.extend(o.traces);
    }
    Ok(PerturbedTokens {
        linf: images.iter().zip(tokens).map(|(a, b)| linf(a, b)).collect(),
        initial: traces.iter().map(|t| t[0]).collect(),
        final_: traces.iter().map(|t| *t.last().expect("trace")).collect(),
        images,
        traces,
        record: serde_json::json!({
            "kind": "token-pushing",
            "config": cfg,
            "centroid": { "source": target.source, "count": target.count },
        }),
    })
}

/// Pushes `tokens` toward the centroid of the unrelated pool.
pub fn tp_untargeted(
    model: &TrainedModel,
    tokens: &[Tensor],
    unrelated: &[Tensor],
    cfg: &AttackConfig,
) -> Result<PerturbedTokens> {
    let mu = centroid(model, &cfg.layer, "U_C", unrelated)?;
    let cfg = AttackConfig {
        mode: AttackMode::Untargeted,
        ..cfg.clone()
    };
    push_tokens(model, tokens, &mu, &cfg)
}

/// Pushes `tokens` toward the centroid of a target concept's tokens.
pub fn tp_targeted(
    model: &TrainedModel,
    tokens: &[Tensor],
    target_tokens: &[Tensor],
    cfg: &AttackConfig,
) -> Result<PerturbedTokens> {
    let mu = centroid(model, &cfg.layer, "P_C'", target_tokens)?;
    let cfg = AttackConfig {
        mode: AttackMode::Targeted,
        ..cfg.clone()
    };
    push_tokens(model, tokens, &mu, &cfg)
}

/// I.i.d. `N(0, σ²)` noise for token `index`, before any clipping.
pub fn gaussian_noise(shape: &[usize], sigma: f64, seed: u64, index: u64) -> Tensor {
    let mut r = rng::stream(rng::derive_str(seed, "gaussian"), index);
    if sigma == 0.0 {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    Tensor::from_fn(shape, |_| normal.sample(&mut r) as f32)
}

/// Adds Gaussian noise and clips to [0, 1]; the ℓ∞ norm is only recorded.
pub fn gaussian_baseline(tokens: &[Tensor], sigma: f64, seed: u64) -> Result<PerturbedTokens> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    let images: Vec<Tensor> = tokens
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let noise = gaussian_noise(x.shape(), sigma, seed, i as u64);
            let mut y = x.clone();
            for (v, n) in y.data_mut().iter_mut().zip(noise.data()) {
                *v = (*v + n).clamp(0.0, 1.0);
            }
            y
        })
        .collect();
    Ok(PerturbedTokens {
        linf: images.iter().zip(tokens).map(|(a, b)| linf(a, b)).collect(),
        initial: vec![],
        final_: vec![],
        traces: vec![],
        images,
        record: serde_json::json!({ "kind": "gaussian", "sigma": sigma, "seed": seed }),
    })
}

/// The σ whose clipped noise has mean ℓ∞ norm `target` on `tokens`
/// (bisection; the same seed is used at every probe).
pub fn match_sigma(tokens: &[Tensor], target: f64, seed: u64) -> Result<f64> {
    let mean_linf = |s: f64| -> Result<f64> {
        let p = gaussian_baseline(tokens, s, seed)?;
        Ok(p.linf.iter().sum::<f64>() / p.linf.len() as f64)
    };
    if target <= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, target);
    while mean_linf(hi)? < target {
        hi *= 2.0;
        if hi > 10.0 {
            return Err(Error::invalid("cannot reach the requested noise norm"));
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if mean_linf(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Uniform random-sign perturbation with `‖δ‖∞ = ε`, clipped to [0, 1].
pub fn random_sign_baseline(tokens: &[Tensor], epsilon: f32, seed: u64) -> PerturbedTokens {
    let images: Vec<Tensor> = tokens
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = rng::stream(rng::derive_str(seed, "sign-noise"), i as u64);
            let mut y = x.clone();
            for v in y.data_mut() {
                let s = if r.random_bool(0.5) { epsilon } else { -epsilon };
                *v = (*v + s).clamp(0.0, 1.0);
            }
            y
        })
        .collect();
    PerturbedTokens {
        linf: images.iter().zip(tokens).map(|(a, b)| linf(a, b)).collect(),
        initial: vec![],
        final_: vec![],
        traces: vec![],
        images,
        record: serde_json::json!({ "kind": "random-sign", "epsilon": epsilon, "seed": seed }),
    }
}

impl PerturbedTokens {
    /// The identity perturbation.
    pub fn identity(tokens: &[Tensor]) -> Self {
        PerturbedTokens {
            images: tokens.to_vec(),
            initial: vec![],
            final_: vec![],
            traces: vec![],
            linf: vec![0.0; tokens.len()],
            record: serde_json::json!({ "kind": "identity" }),
        }
    }

    /// Writes `P_hat/NNNNN.ppm` previews, exact `tokens.cpak` and `attack.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bundle = Bundle::new("tokens", self.record.clone());
        for (i, img) in self.images.iter().enumerate() {
            ppm::write(&dir.join(format!("P_hat/{i:05}.ppm")), img)?;
            bundle.push(format!("{i:05}"), img.clone());
        }
        bundle.save(&dir.join("tokens.cpak"))?;
        let json = serde_json::json!({
            "record": self.record,
            "initial": self.initial,
            "final": self.final_,
            "linf": self.linf,
            "traces": self.traces,
        });
        fs::write(dir.join("attack.json"), serde_json::to_vec_pretty(&json)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bundle = Bundle::load(&dir.join("tokens.cpak"))?;
        let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("attack.json"))?)?;
        let floats = |key: &str| -> Vec<f64> { serde_json::from_value(json[key].clone()).unwrap_or_default() };
        Ok(PerturbedTokens {
            images: bundle.tensors.into_iter().map(|(_, t)| t).collect(),
            initial: floats("initial"),
            final_: floats("final"),
            traces: serde_json::from_value(json["traces"].clone()).unwrap_or_default(),
            linf: floats("linf"),
            record: bundle.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(eps: f32, steps: usize, alpha: f32) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            steps,
            alpha,
            ..Default::default()
        }
    }

    #[test]
    fn already_optimal_stays_put() {
        let x0 = Tensor::from_vec(vec![0.2, 0.7, 0.4]);
        let x0c = x0.clone();
        let obj = move |x: &Tensor| {
            let d: Vec<f32> = x.data().iter().zip(x0c.data()).map(|(a, b)| a - b).collect();
            let v = d.iter().map(|v| (*v as f64).powi(2)).sum();
            Ok((v, Tensor::from_vec(d.iter().map(|v| 2.0 * v).collect())))
        };
        let (delta, trace) = pgd_minimize(obj, &x0, &cfg(0.1, 5, 0.02)).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
        assert_eq!(trace.len(), 6);
    }

    #[test]
    fn sum_objective_hits_box_corner() {
        let x0 = Tensor::from_vec(vec![0.5]);
        let obj = |x: &Tensor| Ok((x.data()[0] as f64, Tensor::from_vec(vec![1.0])));
        let (delta, _) = pgd_minimize(obj, &x0, &cfg(0.1, 3, 0.05)).unwrap();
        assert!((delta.data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_budget_is_identity() {
        let x0 = Tensor::from_vec(vec![0.5, 0.25]);
        let obj = |x: &Tensor| Ok((x.data()[0] as f64, Tensor::from_vec(vec![1.0, -1.0])));
        let (delta, _) = pgd_minimize(obj, &x0, &cfg(0.0, 4, 0.05)).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let x0 = Tensor::from_vec(vec![0.5]);
        let obj = |x: &Tensor| {
            let g = if x.data()[0] < 0.5 { f32::NAN } else { 1.0 };
            Ok((0.0, Tensor::from_vec(vec![g])))
        };
        match pgd_minimize(obj, &x0, &cfg(0.1, 5, 0.01)) {
            Err(Error::NonFiniteGradient { step }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gaussian_zero_sigma_is_identity() {
        let toks = vec![Tensor::full(&[3, 8, 8], 0.5)];
        let p = gaussian_baseline(&toks, 0.0, 1).unwrap();
        assert_eq!(p.images, toks);
    }

    #[test]
    fn requantized_pixels_stay_in_box() {
        let x0 = Tensor::from_vec(vec![10.0 / 255.0, 0.5, 1.0]);
        let obj = |x: &Tensor| Ok((x.data().iter().map(|&v| v as f64).sum(), Tensor::from_vec(vec![1.0, -1.0, 1.0])));
        let c = AttackConfig {
            requantize: true,
            ..cfg(0.013, 4, 0.005)
        };
        let (delta, _) = pgd_minimize(obj, &x0, &c).unwrap();
        let x: Vec<f32> = delta.data().iter().zip(x0.data()).map(|(d, o)| d + o).collect();
        for (v, o) in x.iter().zip(x0.data()) {
            assert!((v - o).abs() <= 0.013 + 1e-6);
            assert!(((v * 255.0).round() - v * 255.0).abs() < 1e-4);
        }
    }
}
