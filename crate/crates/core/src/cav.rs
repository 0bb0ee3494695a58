//! Linear probes on hidden activations, concept activation vectors and
//! activation centroids.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::Bundle;
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::rng;
use crate::tensor::{dot_f64, Tensor};

/// Logistic-regression probe trained by full-batch gradient descent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    /// Standardize each activation coordinate before fitting.
    pub standardize: bool,
    /// Fraction of each set held out for the accuracy estimate.
    pub holdout: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.01,
            epochs: 50,
            l2: 1e-3,
            seed: 0,
            standardize: false,
            holdout: 0.2,
        }
    }
}

/// Unit normal of a probe separating a concept from negatives in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Cav {
    pub concept: String,
    pub layer: String,
    pub direction: Tensor,
    pub bias: f64,
    pub accuracy: f64,
    pub probe: ProbeConfig,
    pub negative_index: Option<usize>,
    /// Probe accuracy is within two standard errors of chance, or the probe
    /// learned nothing.
    pub warning: bool,
}

#[derive(Serialize, Deserialize)]
struct CavMeta {
    concept: String,
    layer: String,
    bias: f64,
    accuracy: f64,
    probe: ProbeConfig,
    negative_index: Option<usize>,
    warning: bool,
}

impl Cav {
    /// Probe decision value `direction·x + bias` in the direction's scale.
    pub fn decision(&self, x: &[f32]) -> f64 {
        dot_f64(self.direction.data(), x) + self.bias
    }

    pub fn cosine(&self, other: &Cav) -> f64 {
        // both are unit vectors
        self.direction.dot(&other.direction)
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let meta = CavMeta {
            concept: self.concept.clone(),
            layer: self.layer.clone(),
            bias: self.bias,
            accuracy: self.accuracy,
            probe: self.probe.clone(),
            negative_index: self.negative_index,
            warning: self.warning,
        };
        let mut b = Bundle::new("cav", serde_json::to_value(meta)?);
        b.push("direction", self.direction.clone());
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Malformed {
            path: origin.to_path_buf(),
            reason,
        };
        if b.kind != "cav" {
            return Err(bad(format!("expected a cav, found `{}`", b.kind)));
        }
        let m: CavMeta = serde_json::from_value(b.meta.clone()).map_err(|e| bad(e.to_string()))?;
        let direction = b.get("direction").ok_or_else(|| bad("no direction tensor".into()))?.clone();
        Ok(Cav {
            concept: m.concept,
            layer: m.layer,
            direction,
            bias: m.bias,
            accuracy: m.accuracy,
            probe: m.probe,
            negative_index: m.negative_index,
            warning: m.warning,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::load(path)?, path)
    }
}

/// Writes several CAVs to one container, in order.
pub fn save_cav_set(cavs: &[Cav], path: &Path) -> Result<()> {
    let metas = cavs
        .iter()
        .map(|c| CavMeta {
            concept: c.concept.clone(),
            layer: c.layer.clone(),
            bias: c.bias,
            accuracy: c.accuracy,
            probe: c.probe.clone(),
            negative_index: c.negative_index,
            warning: c.warning,
        })
        .collect::<Vec<_>>();
    let mut b = Bundle::new("cav-set", serde_json::to_value(metas)?);
    for (i, c) in cavs.iter().enumerate() {
        b.push(format!("{i:04}"), c.direction.clone());
    }
    b.save(path)
}

pub fn load_cav_set(path: &Path) -> Result<Vec<Cav>> {
    let b = Bundle::load(path)?;
    let bad = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    if b.kind != "cav-set" {
        return Err(bad(format!("expected a cav-set, found `{}`", b.kind)));
    }
    let metas: Vec<CavMeta> = serde_json::from_value(b.meta.clone()).map_err(|e| bad(e.to_string()))?;
    if metas.len() != b.tensors.len() {
        return Err(bad(format!("{} records but {} directions", metas.len(), b.tensors.len())));
    }
    Ok(metas
        .into_iter()
        .zip(b.tensors)
        .map(|(m, (_, direction))| Cav {
            concept: m.concept,
            layer: m.layer,
            direction,
            bias: m.bias,
            accuracy: m.accuracy,
            probe: m.probe,
            negative_index: m.negative_index,
            warning: m.warning,
        })
        .collect())
}

/// Flattened layer activations, one row per image.
pub fn activations(model: &TrainedModel, layer: &str, images: &[Tensor]) -> Result<Tensor> {
    model.split(layer)?.features(images)
}

/// Deterministic (train, test) split of `0..n`, keyed by `(seed, n)`.
fn holdout_split(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(rng::derive_str(seed, "probe-split"), n as u64));
    let n_test = ((n as f64 * frac).round() as usize).clamp(1, n - 1);
    let (test, train) = idx.split_at(n_test);
    (train.to_vec(), test.to_vec())
}

/// Fits the probe on activation matrices `pos` `[P, d]` and `neg` `[N, d]`.
///
/// The logistic loss is class-balanced (each side weighs one half), so
/// unequal set sizes do not bias the normal vector. Weights start at zero.
pub fn fit_probe(concept: &str, layer: &str, pos: &Tensor, neg: &Tensor, cfg: &ProbeConfig) -> Result<Cav> {
    let (np, nn) = (pos.rows(), neg.rows());
    if np < 2 || nn < 2 {
        return Err(Error::invalid(format!(
            "probe needs at least two examples per side, got {np} positive and {nn} negative"
        )));
    }
    let d = pos.shape()[1];
    if neg.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            node: "probe negatives".into(),
            expected: format!("[N, {d}]"),
            actual: neg.shape().to_vec(),
        });
    }
    if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.holdout) || cfg.holdout == 0.0 {
        return Err(Error::invalid("probe lr must be positive and holdout in (0, 1)"));
    }
    let (ptrain, ptest) = holdout_split(np, cfg.holdout, cfg.seed);
    let (ntrain, ntest) = holdout_split(nn, cfg.holdout, cfg.seed);

    // optional per-coordinate standardization from the training rows
    let (shift, scale) = if cfg.standardize {
        let rows: Vec<&[f32]> = ptrain
            .iter()
            .map(|&i| pos.row(i))
            .chain(ntrain.iter().map(|&i| neg.row(i)))
            .collect();
        let n = rows.len() as f64;
        let mut mean = vec![0f64; d];
        let mut var = vec![0f64; d];
        for r in &rows {
            for j in 0..d {
                mean[j] += r[j] as f64 / n;
            }
        }
        for r in &rows {
            for j in 0..d {
                var[j] += (r[j] as f64 - mean[j]).powi(2) / n;
            }
        }
        let scale = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        (mean, scale)
    } else {
        (vec![0f64; d], vec![1f64; d])
    };
    let feat = |r: &[f32]| -> Vec<f64> { (0..d).map(|j| (r[j] as f64 - shift[j]) * scale[j]).collect() };
    let xp: Vec<Vec<f64>> = ptrain.iter().map(|&i| feat(pos.row(i))).collect();
    let xn: Vec<Vec<f64>> = ntrain.iter().map(|&i| feat(neg.row(i))).collect();

    let mut w = vec![0f64; d];
    let mut b = 0f64;
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let dotw = |w: &[f64], x: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..cfg.epochs {
        let mut gw: Vec<f64> = w.iter().map(|wi| cfg.l2 * wi).collect();
        let mut gb = 0.0;
        for (set, y, weight) in [(&xp, 1.0, 0.5 / xp.len() as f64), (&xn, 0.0, 0.5 / xn.len() as f64)] {
            for x in set.iter() {
                let r = (sigmoid(dotw(&w, x) + b) - y) * weight;
                gb += r;
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += r * xi;
                }
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g;
        }
        b -= cfg.lr * gb;
    }

    // fold the standardization back into raw-activation coordinates
    let w_raw: Vec<f64> = (0..d).map(|j| w[j] * scale[j]).collect();
    let b_raw = b - (0..d).map(|j| w_raw[j] * shift[j]).sum::<f64>();
    let norm = w_raw.iter().map(|v| v * v).sum::<f64>().sqrt();

    let correct = ptest
        .iter()
        .filter(|&&i| dotw(&w_raw, &to64(pos.row(i))) + b_raw > 0.0)
        .count()
        + ntest
            .iter()
            .filter(|&&i| dotw(&w_raw, &to64(neg.row(i))) + b_raw <= 0.0)
            .count();
    let n_test = ptest.len() + ntest.len();
    let accuracy = correct as f64 / n_test as f64;
    let chance_band = 0.5 + 2.0 * (0.25 / n_test as f64).sqrt();

    let (direction, bias, degenerate) = if norm > 0.0 && norm.is_finite() {
        let dir: Vec<f32> = w_raw.iter().map(|v| (v / norm) as f32).collect();
        (dir, b_raw / norm, false)
    } else {
        // nothing learned: fall back to the positive mean direction
        let mut m = vec![0f64; d];
        for i in 0..np {
            for (mj, x) in m.iter_mut().zip(pos.row(i)) {
                *mj += *x as f64;
            }
        }
        let mn = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir = if mn > 0.0 {
            m.iter().map(|v| (v / mn) as f32).collect()
        } else {
            let mut e = vec![0f32; d];
            e[0] = 1.0;
            e
        };
        (dir, 0.0, true)
    };
    let direction = renormalize(direction);
    Ok(Cav {
        concept: concept.to_string(),
        layer: layer.to_string(),
        direction: Tensor::from_vec(direction),
        bias,
        accuracy,
        probe: cfg.clone(),
        negative_index: None,
        warning: degenerate || accuracy <= chance_band,
    })
}

fn to64(r: &[f32]) -> Vec<f64> {
    r.iter().map(|&v| v as f64).collect()
}

/// Re-normalizes in `f64` so the `f32` vector has unit norm to ~1e-7.
fn renormalize(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    for x in &mut v {
        *x = (*x as f64 / n) as f32;
    }
    v
}

/// Trains a CAV for `concept` at `layer` from positive and negative images.
pub fn train_cav(
    model: &TrainedModel,
    layer: &str,
    concept: &str,
    positives: &[Tensor],
    negatives: &[Tensor],
    cfg: &ProbeConfig,
) -> Result<Cav> {
    let split = model.split(layer)?;
    let pos = split.features(positives)?;
    let neg = split.features(negatives)?;
    fit_probe(concept, layer, &pos, &neg, cfg)
}

/// Mean of a set's flattened activations at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub layer: String,
    pub vector: Vec<f64>,
    pub source: String,
    pub count: usize,
}

impl Centroid {
    pub fn from_activations(layer: &str, source: &str, acts: &Tensor) -> Result<Self> {
        if acts.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                node: format!("activations of `{source}`"),
                expected: "[N, d]".into(),
                actual: acts.shape().to_vec(),
            });
        }
        let n = acts.rows();
        if n == 0 {
            return Err(Error::EmptySet(format!("centroid of `{source}`")));
        }
        let d = acts.shape()[1];
        let mut vector = vec![0f64; d];
        for i in 0..n {
            for (m, &x) in vector.iter_mut().zip(acts.row(i)) {
                *m += x as f64;
            }
        }
        for m in &mut vector {
            *m /= n as f64;
        }
        Ok(Centroid {
            layer: layer.to_string(),
            vector,
            source: source.to_string(),
            count: n,
        })
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_vec(self.vector.iter().map(|&v| v as f32).collect())
    }
}

pub fn centroid(model: &TrainedModel, layer: &str, source: &str, images: &[Tensor]) -> Result<Centroid> {
    if images.is_empty() {
        return Err(Error::EmptySet(format!("centroid of `{source}`")));
    }
    Centroid::from_activations(layer, source, &activations(model, layer, images)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn clusters(n: usize, center: [f32; 2], seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        let data = (0..n)
            .flat_map(|_| [center[0] + r.random_range(-0.2..0.2), center[1] + r.random_range(-0.2..0.2)])
            .collect();
        Tensor::new(vec![n, 2], data).unwrap()
    }

    #[test]
    fn separable_toy_clusters() {
        let pos = clusters(40, [1.0, 1.0], 1);
        let neg = clusters(40, [-1.0, -1.0], 2);
        let cav = fit_probe("c", "l", &pos, &neg, &ProbeConfig::default()).unwrap();
        assert_eq!(cav.accuracy, 1.0);
        assert!(!cav.warning);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let cos = cav.direction.data()[0] as f64 * s + cav.direction.data()[1] as f64 * s;
        assert!(cos > 0.99, "{cos}");
        assert!((cav.direction.l2_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_sets_warn() {
        let pos = clusters(30, [0.5, 0.2], 3);
        let cav = fit_probe("c", "l", &pos, &pos, &ProbeConfig::default()).unwrap();
        assert!((cav.accuracy - 0.5).abs() <= 0.1, "{}", cav.accuracy);
        assert!(cav.warning);
        assert!((cav.direction.l2_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn label_flip_negates_direction() {
        let pos = clusters(25, [0.3, 1.0], 4);
        let neg = clusters(35, [-0.4, 0.1], 5);
        let cfg = ProbeConfig::default();
        let a = fit_probe("c", "l", &pos, &neg, &cfg).unwrap();
        let b = fit_probe("c", "l", &neg, &pos, &cfg).unwrap();
        assert!(a.direction.data().iter().zip(b.direction.data()).all(|(x, y)| (x + y).abs() < 1e-4));
    }

    #[test]
    fn standardized_probe_still_separates() {
        let pos = clusters(30, [2.0, 50.0], 6);
        let neg = clusters(30, [-2.0, 50.0], 7);
        let cfg = ProbeConfig {
            standardize: true,
            ..Default::default()
        };
        let cav = fit_probe("c", "l", &pos, &neg, &cfg).unwrap();
        assert_eq!(cav.accuracy, 1.0);
        assert!(cav.direction.data()[0] > 0.0);
    }

    #[test]
    fn centroid_basics() {
        let acts = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();
        let c = Centroid::from_activations("l", "s", &acts).unwrap();
        assert_eq!(c.vector, vec![2.0, 2.0, 2.0]);
        let first = Tensor::new(vec![1, 3], acts.row(0).to_vec()).unwrap();
        let one = Centroid::from_activations("l", "s", &first).unwrap();
        assert_eq!(one.vector, vec![1.0, 2.0, 3.0]);
        let dup = Tensor::stack(&[acts.row_tensor(0), acts.row_tensor(1), acts.row_tensor(0), acts.row_tensor(1)])
            .unwrap();
        assert_eq!(Centroid::from_activations("l", "s", &dup).unwrap().vector, c.vector);
    }

    #[test]
    fn bundle_round_trip() {
        let pos = clusters(10, [1.0, 0.0], 8);
        let neg = clusters(10, [0.0, 1.0], 9);
        let cav = fit_probe("stripes", "pool2", &pos, &neg, &ProbeConfig::default()).unwrap();
        let back = Cav::from_bundle(&cav.to_bundle().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, cav);
    }

    #[test]
    fn cav_set_round_trip() {
        let pos = clusters(10, [1.0, 0.0], 10);
        let cfg = ProbeConfig::default();
        let cavs: Vec<Cav> = (0..3)
            .map(|i| fit_probe("dots", "pool1", &pos, &clusters(10, [0.0, 1.0], 11 + i), &cfg).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.cpak");
        save_cav_set(&cavs, &path).unwrap();
        assert_eq!(load_cav_set(&path).unwrap(), cavs);
        cavs[0].save(&path).unwrap();
        assert!(load_cav_set(&path).is_err());
    }
}
