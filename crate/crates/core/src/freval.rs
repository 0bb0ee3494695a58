//! Fréchet distances between sets of images embedded by a frozen encoder,
//! and the interpretation divergence used to score attacks.

use serde::{Deserialize, Serialize};

use crate::cav::activations;
use crate::error::{Error, Result};
use crate::linalg::{clamp_psd, sqrtm_psd, sym_eigen, Matrix};
use crate::model::TrainedModel;
use crate::tensor::Tensor;

/// Eigenvalues down to `-PSD_TOLERANCE` count as zero.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// Default embedding layer of a SmallConvNet-A encoder (64 channels).
pub const DEFAULT_EMBEDDING_LAYER: &str = "relu3";

/// A frozen model whose spatially pooled activations serve as embeddings.
pub struct EncoderModel {
    model: TrainedModel,
    layer: String,
    dim: usize,
}

impl EncoderModel {
    pub fn new(model: TrainedModel, layer: &str) -> Result<Self> {
        let shape = model.layer_shape(layer)?;
        let dim = shape[0];
        Ok(EncoderModel {
            layer: layer.to_string(),
            dim,
            model,
        })
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model(&self) -> &TrainedModel {
        &self.model
    }
}

/// One embedding row per image: channel means of the embedding layer.
pub fn embed(encoder: &EncoderModel, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let acts = activations(&encoder.model, &encoder.layer, images)?;
    let e = encoder.dim;
    let plane = acts.shape()[1] / e;
    Ok((0..acts.rows())
        .map(|i| {
            acts.row(i)
                .chunks(plane)
                .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
                .collect()
        })
        .collect())
}

/// Sample mean and unbiased covariance of a set of embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetStats {
    pub mean: Vec<f64>,
    /// Row-major `e × e`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FrechetStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> Matrix {
        Matrix {
            n: self.dim(),
            data: self.cov.clone(),
        }
    }

    /// Symmetry within 1e-6 and eigenvalues at least `-PSD_TOLERANCE`.
    pub fn validate(&self) -> Result<()> {
        let e = self.dim();
        if self.cov.len() != e * e {
            return Err(Error::ShapeMismatch {
                node: "covariance".into(),
                expected: format!("[{e}, {e}]"),
                actual: vec![self.cov.len()],
            });
        }
        if self.n < 2 {
            return Err(Error::invalid(format!("Gaussian fitted from {} samples", self.n)));
        }
        let c = self.cov_matrix();
        if c.asymmetry() > 1e-6 {
            return Err(Error::invalid(format!("covariance asymmetric by {:e}", c.asymmetry())));
        }
        clamp_psd(&sym_eigen(&c)?.values, PSD_TOLERANCE)?;
        Ok(())
    }
}

pub fn fit_gaussian(embeddings: &[Vec<f64>]) -> Result<FrechetStats> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::invalid(format!("fitting a Gaussian needs n >= 2, got {n}")));
    }
    let e = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|r| r.len() != e) {
        return Err(Error::ShapeMismatch {
            node: "embedding row".into(),
            expected: format!("[{e}]"),
            actual: vec![bad.len()],
        });
    }
    let mut mean = vec![0f64; e];
    for row in embeddings {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0f64; e * e];
    for row in embeddings {
        let d: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..e {
            for j in i..e {
                cov[i * e + j] += d[i] * d[j];
            }
        }
    }
    for i in 0..e {
        for j in i..e {
            let v = cov[i * e + j] / (n - 1) as f64;
            cov[i * e + j] = v;
            cov[j * e + i] = v;
        }
    }
    Ok(FrechetStats { mean, cov, n })
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            node: "Fréchet distance".into(),
            expected: format!("[{}]", a.dim()),
            actual: vec![b.dim()],
        });
    }
    a.validate()?;
    b.validate()?;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (ca, cb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = sqrtm_psd(&ca, PSD_TOLERANCE)?;
    let inner = root_a.matmul(&cb).matmul(&root_a);
    let lambdas = clamp_psd(&sym_eigen(&inner)?.values, PSD_TOLERANCE)?;
    let cross: f64 = lambdas.iter().map(|l| l.sqrt()).sum();
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// An interpretation output that [`divergence`] can compare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Interpretation {
    Tcav { score: f64 },
    /// Encoder embeddings of a visualization set.
    Ffv { embeddings: Vec<Vec<f64>> },
}

impl Interpretation {
    pub fn method(&self) -> &'static str {
        match self {
            Interpretation::Tcav { .. } => "tcav",
            Interpretation::Ffv { .. } => "ffv",
        }
    }
}

/// Interpretation divergence: absolute score difference for TCAV, Fréchet
/// distance between the embedded sets for FFV.
pub fn divergence(a: &Interpretation, b: &Interpretation) -> Result<f64> {
    match (a, b) {
        (Interpretation::Tcav { score: x }, Interpretation::Tcav { score: y }) => Ok((x - y).abs()),
        (Interpretation::Ffv { embeddings: x }, Interpretation::Ffv { embeddings: y }) => {
            frechet_distance(&fit_gaussian(x)?, &fit_gaussian(y)?)
        }
        _ => Err(Error::invalid(format!(
            "cannot compare a {} output with a {} output",
            a.method(),
            b.method()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use rand::Rng as _;

    fn stats(mean: Vec<f64>, cov: Vec<f64>) -> FrechetStats {
        FrechetStats { mean, cov, n: 10 }
    }

    #[test]
    fn scalar_case_by_hand() {
        let d = frechet_distance(&stats(vec![0.0], vec![1.0]), &stats(vec![1.0], vec![4.0])).unwrap();
        assert_eq!(d, 2.0);
    }

    #[test]
    fn two_point_covariance() {
        let s = fit_gaussian(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.cov, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_points_have_zero_covariance() {
        let s = fit_gaussian(&vec![vec![0.5, -1.0, 2.0]; 4]).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
        assert!(fit_gaussian(&[vec![1.0]]).is_err());
    }

    #[test]
    fn self_distance_is_zero() {
        let mut r = crate::rng::rng(1);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let s = fit_gaussian(&rows).unwrap();
        assert!(frechet_distance(&s, &s).unwrap() < 1e-8);
    }

    #[test]
    fn rejects_mismatch_and_indefinite() {
        assert!(frechet_distance(&stats(vec![0.0], vec![1.0]), &stats(vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0])).is_err());
        let bad = stats(vec![0.0; 2], vec![1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(frechet_distance(&bad, &bad), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn divergence_matches_methods() {
        let t = Interpretation::Tcav { score: 0.25 };
        assert_eq!(divergence(&t, &Interpretation::Tcav { score: 0.75 }).unwrap(), 0.5);
        assert_eq!(divergence(&t, &t).unwrap(), 0.0);
        let f = Interpretation::Ffv {
            embeddings: vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]],
        };
        assert!(divergence(&f, &f).unwrap() < 1e-8);
        assert!(divergence(&t, &f).is_err());
    }

    #[test]
    fn embedding_rows_and_purity() {
        let m = TrainedModel::build(ModelSpec::small_convnet_a(&[3, 16, 16], 3), 2).unwrap();
        let enc = EncoderModel::new(m, DEFAULT_EMBEDDING_LAYER).unwrap();
        assert_eq!(enc.dim(), 64);
        let img = Tensor::full(&[3, 16, 16], 0.4);
        let rows = embed(&enc, &[img.clone(), img.clone()]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].len(), 64);
        assert_eq!(rows[0], rows[1]);
        assert_eq!(embed(&enc, &[img]).unwrap().len(), 1);
        assert!(embed(&enc, &[Tensor::zeros(&[3, 8, 8])]).is_err());
    }
}
