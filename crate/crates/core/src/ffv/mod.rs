//! Feature visualization by input optimization.
//!
//! Three objectives share one optimizer: the mean activation of a channel,
//! the faceted objective `f_{ℓ,i}(x) + w · v·(f_ℓ(x) ⊙ ∇f_{ℓ,i}(x))` with the
//! gradient held constant within each step, and the cosine between `f_ℓ(x)`
//! and a CAV. Images are parameterized in pixel space or as a 1/f-scaled
//! half spectrum, squashed through a sigmoid, and randomly transformed at
//! every step.

pub mod fft;
pub mod spectral;
pub mod transform;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cav::Cav;
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::rng;
use crate::synthdata::ppm;
use crate::tape::{Bindings, NodeId, Tape};
use crate::tensor::Tensor;

pub use spectral::{signature, SpectralSignature};
pub use transform::{Transform, TransformSchedule};

/// Consecutive near-flat steps after which a run is flagged as stalled.
pub const STALL_STEPS: usize = 20;
pub const STALL_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    Pixel,
    Frequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizationConfig {
    pub parameterization: Parameterization,
    pub steps: usize,
    /// Adam step size.
    pub lr: f64,
    pub transforms: TransformSchedule,
    pub seed: u64,
    /// Weight `w` of the facet term.
    pub facet_weight: f64,
    /// Standard deviation of the initial parameters.
    pub init_std: f64,
}

impl Default for VisualizationConfig {
    fn default() -> Self {
        VisualizationConfig {
            parameterization: Parameterization::Frequency,
            steps: 256,
            lr: 0.05,
            transforms: TransformSchedule::default(),
            seed: 0,
            facet_weight: 1.0,
            init_std: 0.1,
        }
    }
}

impl VisualizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("visualization needs at least one step"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        let (a, b) = self.transforms.scale;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::invalid(format!("scale range must satisfy 0 < a <= b, got ({a}, {b})")));
        }
        if !(self.transforms.color_jitter >= 0.0 && self.transforms.color_jitter < 1.0) {
            return Err(Error::invalid("color jitter must lie in [0, 1)"));
        }
        if !(self.init_std >= 0.0 && self.facet_weight.is_finite()) {
            return Err(Error::invalid("init_std must be non-negative and facet_weight finite"));
        }
        Ok(())
    }
}

/// What a visualization maximizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "kebab-case")]
pub enum Target {
    Channel { layer: String, channel: usize },
    Faceted { layer: String, channel: usize, concept: String },
    Dream { layer: String, concept: String },
}

/// A differentiable scalar of one image, built once and re-bound per step.
pub struct Objective<'m> {
    model: &'m TrainedModel,
    target: Target,
    tape: Tape,
    x: NodeId,
    act: NodeId,
    root: NodeId,
    /// Channel node, CAV and weight of the facet term, if any.
    facet: Option<(NodeId, Vec<f32>, f32)>,
    act_shape: Vec<usize>,
}

fn check_cav(cav: &Cav, layer: &str, width: usize) -> Result<()> {
    if cav.layer != layer {
        return Err(Error::invalid(format!(
            "CAV was trained at `{}` but the objective is at `{layer}`",
            cav.layer
        )));
    }
    if cav.direction.len() != width {
        return Err(Error::ShapeMismatch {
            node: format!("CAV direction at `{layer}`"),
            expected: format!("[{width}]"),
            actual: cav.direction.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'m> Objective<'m> {
    fn base(model: &'m TrainedModel, layer: &str) -> Result<(Tape, NodeId, NodeId, Vec<usize>)> {
        let idx = model.layer_index(layer)?;
        let g = model.graph(1, idx);
        let mut act_shape = vec![1];
        act_shape.extend(model.layer_shape(layer)?);
        Ok((g.tape, g.input, g.layers[idx], act_shape))
    }

    /// Mask averaging channel `channel` of an activation of shape `act_shape`.
    fn channel_mask(act_shape: &[usize], channel: usize) -> Result<Tensor> {
        let channels = act_shape[1];
        if channel >= channels {
            return Err(Error::invalid(format!("channel {channel} out of range for {channels} channels")));
        }
        let plane: usize = act_shape[2..].iter().product();
        Ok(Tensor::from_fn(act_shape, |i| {
            if i / plane == channel {
                1.0 / plane as f32
            } else {
                0.0
            }
        }))
    }

    /// Mean activation of channel `channel` at `layer` (a unit, for flat layers).
    pub fn channel(model: &'m TrainedModel, layer: &str, channel: usize) -> Result<Self> {
        let (mut tape, x, act, act_shape) = Self::base(model, layer)?;
        let mask = tape.constant(Self::channel_mask(&act_shape, channel)?);
        let picked = tape.hadamard(act, mask);
        let root = tape.sum(picked);
        Ok(Objective {
            model,
            target: Target::Channel {
                layer: layer.into(),
                channel,
            },
            tape,
            x,
            act,
            root,
            facet: None,
            act_shape,
        })
    }

    /// Channel mean plus `weight · v·(f_ℓ ⊙ ∇f_{ℓ,i})`.
    pub fn faceted(model: &'m TrainedModel, layer: &str, channel: usize, cav: &Cav, weight: f64) -> Result<Self> {
        let (mut tape, x, act, act_shape) = Self::base(model, layer)?;
        check_cav(cav, layer, act_shape.iter().product())?;
        let mask = tape.constant(Self::channel_mask(&act_shape, channel)?);
        let picked = tape.hadamard(act, mask);
        let chan = tape.sum(picked);
        let facet_in = tape.input("facet", &act_shape);
        let prod = tape.hadamard(act, facet_in);
        let facet = tape.sum(prod);
        let scaled = tape.scale(facet, weight as f32);
        let root = tape.add(chan, scaled);
        Ok(Objective {
            model,
            target: Target::Faceted {
                layer: layer.into(),
                channel,
                concept: cav.concept.clone(),
            },
            tape,
            x,
            act,
            root,
            facet: Some((chan, cav.direction.data().to_vec(), weight as f32)),
            act_shape,
        })
    }

    /// `cos(f_ℓ(x), v)`.
    pub fn dream(model: &'m TrainedModel, layer: &str, cav: &Cav) -> Result<Self> {
        let (mut tape, x, act, act_shape) = Self::base(model, layer)?;
        check_cav(cav, layer, act_shape.iter().product())?;
        let v = tape.constant(Tensor::new(act_shape.clone(), cav.direction.data().to_vec())?);
        let num = tape.dot(act, v);
        let norm = tape.l2_norm(act);
        let tiny = tape.constant(Tensor::scalar(1e-8));
        let den = tape.add(norm, tiny);
        let root = tape.div(num, den);
        Ok(Objective {
            model,
            target: Target::Dream {
                layer: layer.into(),
                concept: cav.concept.clone(),
            },
            tape,
            x,
            act,
            root,
            facet: None,
            act_shape,
        })
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    fn batched(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != self.model.input_shape() {
            return Err(Error::ShapeMismatch {
                node: "visualization image".into(),
                expected: format!("{:?}", self.model.input_shape()),
                actual: image.shape().to_vec(),
            });
        }
        let mut shape = vec![1];
        shape.extend(image.shape());
        image.clone().reshape(&shape)
    }

    /// Objective value and its gradient with respect to `image` (`[C, H, W]`).
    pub fn eval(&self, image: &Tensor) -> Result<(f64, Tensor)> {
        let x = self.batched(image)?;
        let zeros;
        let facet_value;
        let mut binds: Bindings<'_> = self.model.weight_bindings();
        binds.insert("x", &x);
        if let Some((chan, v, _)) = &self.facet {
            // ∇f_{ℓ,i} at the current point, then frozen for this step
            zeros = Tensor::zeros(&self.act_shape);
            binds.insert("facet", &zeros);
            let vals = self.tape.forward(&binds)?;
            let mut g = self.tape.gradient(&vals, *chan, &[self.act])?;
            let g = g.take(self.act);
            facet_value = Tensor::new(
                self.act_shape.clone(),
                g.data().iter().zip(v).map(|(a, b)| a * b).collect(),
            )?;
            binds.insert("facet", &facet_value);
        }
        let vals = self.tape.forward(&binds)?;
        let value = vals.get(self.root).item() as f64;
        let mut grads = self.tape.gradient(&vals, self.root, &[self.x])?;
        let g = grads.take(self.x).reshape(image.shape())?;
        Ok((value, g))
    }

    pub fn value(&self, image: &Tensor) -> Result<f64> {
        Ok(self.eval(image)?.0)
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Image parameters and the map from them to pixels in `(0, 1)`.
struct Param {
    kind: Parameterization,
    c: usize,
    h: usize,
    w: usize,
    theta: Vec<f64>,
    /// Per-bin spectral scale (frequency parameterization only).
    scale: Vec<f64>,
}

/// Amplitude divisor applied after the inverse transform.
const SPECTRUM_DAMPING: f64 = 4.0;

impl Param {
    fn new(kind: Parameterization, shape: &[usize], init_std: f64, seed: u64) -> Result<Self> {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut r = rng::rng(rng::derive_str(seed, "ffv-init"));
        let normal = Normal::new(0.0, init_std).map_err(|e| Error::invalid(e.to_string()))?;
        let (n, scale) = match kind {
            Parameterization::Pixel => (c * h * w, Vec::new()),
            Parameterization::Frequency => {
                fft::check_size(h, w)?;
                let hw = fft::half_width(w);
                let floor = 1.0 / h.max(w) as f64;
                let norm = ((h * w) as f64).sqrt();
                let scale = (0..h * hw)
                    .map(|i| {
                        let (y, x) = (i / hw, i % hw);
                        let fy = if y <= h / 2 { y as f64 } else { y as f64 - h as f64 } / h as f64;
                        let fx = x as f64 / w as f64;
                        norm / (fy * fy + fx * fx).sqrt().max(floor)
                    })
                    .collect();
                (c * h * hw * 2, scale)
            }
        };
        let theta = (0..n).map(|_| normal.sample(&mut r)).collect();
        Ok(Param {
            kind,
            c,
            h,
            w,
            theta,
            scale,
        })
    }

    /// Pre-sigmoid values, `[C, H, W]`.
    fn logits(&self) -> Vec<f64> {
        match self.kind {
            Parameterization::Pixel => self.theta.clone(),
            Parameterization::Frequency => {
                let bins = self.h * fft::half_width(self.w);
                let mut out = Vec::with_capacity(self.c * self.h * self.w);
                for ch in 0..self.c {
                    let half: Vec<fft::Complex> = (0..bins)
                        .map(|i| {
                            let k = 2 * (ch * bins + i);
                            fft::Complex::new(self.theta[k] * self.scale[i], self.theta[k + 1] * self.scale[i])
                        })
                        .collect();
                    out.extend(fft::irfft2(&half, self.h, self.w).into_iter().map(|v| v / SPECTRUM_DAMPING));
                }
                out
            }
        }
    }

    fn render(&self) -> Tensor {
        let data = self.logits().into_iter().map(|v| sigmoid(v) as f32).collect();
        Tensor::new(vec![self.c, self.h, self.w], data).expect("parameter shape")
    }

    /// Chain rule from an image gradient to the parameters.
    fn backprop(&self, image: &Tensor, grad: &Tensor) -> Vec<f64> {
        let pre: Vec<f64> = image
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&s, &g)| g as f64 * s as f64 * (1.0 - s as f64))
            .collect();
        match self.kind {
            Parameterization::Pixel => pre,
            Parameterization::Frequency => {
                let plane = self.h * self.w;
                let bins = self.h * fft::half_width(self.w);
                let mut out = vec![0.0; self.theta.len()];
                for ch in 0..self.c {
                    let g: Vec<f64> = pre[ch * plane..(ch + 1) * plane].iter().map(|v| v / SPECTRUM_DAMPING).collect();
                    for (i, z) in fft::irfft2_adjoint(&g, self.h, self.w).into_iter().enumerate() {
                        let k = 2 * (ch * bins + i);
                        out[k] = z.re * self.scale[i];
                        out[k + 1] = z.im * self.scale[i];
                    }
                }
                out
            }
        }
    }
}

/// Adam state for gradient ascent.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn ascend(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            theta[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// A finished visualization.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Visualization {
    /// Best image seen, `[C, H, W]` in `[0, 1]`.
    #[serde(skip)]
    pub image: Tensor,
    /// Objective under that step's transform, one entry per evaluation
    /// (`steps + 1` entries).
    pub trace: Vec<f64>,
    pub best_step: usize,
    pub best_objective: f64,
    pub target: Target,
    pub config: VisualizationConfig,
    /// Objective stayed flat for [`STALL_STEPS`] consecutive steps.
    pub stalled: bool,
}

impl Visualization {
    /// Best-so-far objective after each evaluation.
    pub fn running_max(&self) -> Vec<f64> {
        self.trace
            .iter()
            .scan(f64::NEG_INFINITY, |best, &v| {
                *best = best.max(v);
                Some(*best)
            })
            .collect()
    }

    /// Writes `<stem>.ppm` and a `<stem>.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        ppm::write(&dir.join(format!("{stem}.ppm")), &self.image)?;
        let mut meta = serde_json::to_value(self)?;
        meta["spectral"] = serde_json::to_value(signature(&self.image)?)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }
}

/// Runs the optimizer on `objective`.
pub fn visualize(objective: &Objective<'_>, cfg: &VisualizationConfig) -> Result<Visualization> {
    cfg.validate()?;
    let shape = objective.model.input_shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("visualization needs a [C, H, W] input, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut param = Param::new(cfg.parameterization, &shape, cfg.init_std, cfg.seed)?;
    let mut adam = Adam::new(param.theta.len(), cfg.lr);
    let mut r = rng::rng(rng::derive_str(cfg.seed, "ffv-transforms"));
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, usize, Tensor)> = None;
    let (mut flat, mut stalled) = (0usize, false);
    for step in 0..=cfg.steps {
        let image = param.render();
        let t = cfg.transforms.sample(c, h, w, &mut r);
        let seen = Tensor::new(shape.clone(), t.apply(image.data(), c, h, w))?;
        let (value, grad) = objective.eval(&seen)?;
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::NonFiniteGradient { step });
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            flat = if (value - prev).abs() < STALL_TOLERANCE { flat + 1 } else { 0 };
            stalled |= flat >= STALL_STEPS;
        }
        trace.push(value);
        if best.as_ref().is_none_or(|b| value > b.0) {
            best = Some((value, step, image.clone()));
        }
        if step == cfg.steps {
            break;
        }
        let back = Tensor::new(shape.clone(), t.adjoint(grad.data(), c, h, w))?;
        let g = param.backprop(&image, &back);
        adam.ascend(&mut param.theta, &g);
    }
    let (best_objective, best_step, image) = best.expect("at least one evaluation");
    Ok(Visualization {
        image,
        trace,
        best_step,
        best_objective,
        target: objective.target().clone(),
        config: cfg.clone(),
        stalled,
    })
}

/// Visualizes the mean activation of one channel.
pub fn channel_fv(model: &TrainedModel, layer: &str, channel: usize, cfg: &VisualizationConfig) -> Result<Visualization> {
    visualize(&Objective::channel(model, layer, channel)?, cfg)
}

/// Faceted visualization of a channel steered by `cav`.
pub fn faceted_fv(
    model: &TrainedModel,
    layer: &str,
    channel: usize,
    cav: &Cav,
    cfg: &VisualizationConfig,
) -> Result<Visualization> {
    visualize(&Objective::faceted(model, layer, channel, cav, cfg.facet_weight)?, cfg)
}

/// DeepDream-style visualization of a CAV by cosine similarity.
pub fn cav_dream(model: &TrainedModel, layer: &str, cav: &Cav, cfg: &VisualizationConfig) -> Result<Visualization> {
    visualize(&Objective::dream(model, layer, cav)?, cfg)
}

#[cfg(test)]
mod tests;
