//! Conceptual sensitivity, magnitude and relative TCAV scores, and their
//! significance against random concepts.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cav::{fit_probe, Cav, ProbeConfig};
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::stats;
use crate::synthdata::content_hash;
use crate::tensor::{dot_f64, Tensor};

/// Gradients of logit `class` at layer `layer` for every input predicted as
/// `class`.
#[derive(Clone, Debug)]
pub struct ClassGradients {
    pub layer: String,
    pub class: usize,
    /// `[|D_k|, d_ℓ]`.
    pub grads: Tensor,
    /// Mean gradient, accumulated in `f64`.
    pub mean: Vec<f64>,
    pub n_filtered: usize,
}

impl ClassGradients {
    /// Filters `inputs` to those predicted as `class` and differentiates
    /// logit `class` with respect to their layer activations.
    pub fn compute(model: &TrainedModel, layer: &str, inputs: &[Tensor], class: usize) -> Result<Self> {
        let pred = model.predict(inputs)?;
        let kept: Vec<Tensor> = inputs
            .iter()
            .zip(&pred)
            .filter(|(_, &p)| p == class)
            .map(|(x, _)| x.clone())
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyClassSet {
                class,
                filtered: inputs.len(),
                total: inputs.len(),
            });
        }
        let split = model.split(layer)?;
        let grads = split.head_gradient(&split.features(&kept)?, class)?;
        let d = grads.shape()[1];
        let mut mean = vec![0f64; d];
        for i in 0..grads.rows() {
            for (m, &g) in mean.iter_mut().zip(grads.row(i)) {
                *m += g as f64;
            }
        }
        let n = grads.rows() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(ClassGradients {
            layer: layer.to_string(),
            class,
            grads,
            mean,
            n_filtered: inputs.len() - kept.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.grads.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-input sensitivities `∇h_{ℓ,k}(f_ℓ(x))·v`.
    pub fn sensitivities(&self, cav: &Cav) -> Result<Vec<f64>> {
        self.check(cav)?;
        Ok((0..self.len())
            .map(|i| dot_f64(self.grads.row(i), cav.direction.data()))
            .collect())
    }

    /// Magnitude score: the mean sensitivity over `D_k`.
    pub fn score(&self, cav: &Cav) -> Result<f64> {
        self.check(cav)?;
        Ok(self
            .mean
            .iter()
            .zip(cav.direction.data())
            .map(|(m, &v)| m * v as f64)
            .sum())
    }

    fn check(&self, cav: &Cav) -> Result<()> {
        if cav.layer != self.layer {
            return Err(Error::invalid(format!(
                "CAV was trained at `{}` but scores are requested at `{}`",
                cav.layer, self.layer
            )));
        }
        if cav.direction.len() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                node: format!("CAV direction at `{}`", self.layer),
                expected: format!("[{}]", self.mean.len()),
                actual: cav.direction.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// `S_{C,k,ℓ}(x)`.
pub fn sensitivity(model: &TrainedModel, layer: &str, cav: &Cav, x: &Tensor, class: usize) -> Result<f64> {
    if cav.layer != layer {
        return Err(Error::invalid(format!(
            "CAV was trained at `{}` but sensitivity is requested at `{layer}`",
            cav.layer
        )));
    }
    let split = model.split(layer)?;
    let acts = split.features(std::slice::from_ref(x))?;
    let g = split.head_gradient(&acts, class)?;
    if g.len() != cav.direction.len() {
        return Err(Error::ShapeMismatch {
            node: format!("CAV direction at `{layer}`"),
            expected: format!("[{}]", g.len()),
            actual: cav.direction.shape().to_vec(),
        });
    }
    Ok(dot_f64(g.data(), cav.direction.data()))
}

/// Mean sensitivity over the inputs predicted as `class`.
pub fn magnitude_score(model: &TrainedModel, layer: &str, cav: &Cav, inputs: &[Tensor], class: usize) -> Result<f64> {
    if cav.layer != layer {
        return Err(Error::invalid(format!(
            "CAV was trained at `{}` but the score is requested at `{layer}`",
            cav.layer
        )));
    }
    ClassGradients::compute(model, layer, inputs, class)?.score(cav)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcavResult {
    pub concept: String,
    pub class: usize,
    pub layer: String,
    /// Mean of the per-negative-set scores.
    pub score: f64,
    pub per_set: Vec<f64>,
    pub random_scores: Vec<f64>,
    pub random_mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub n_inputs: usize,
    pub n_filtered: usize,
    pub mean_probe_accuracy: f64,
    pub probe_warnings: usize,
}

/// A significance run with the CAVs it trained.
#[derive(Clone, Debug)]
pub struct TcavRun {
    pub result: TcavResult,
    pub cavs: Vec<Cav>,
    pub random_cavs: Vec<Cav>,
}

/// Significance from precomputed activations at one layer.
///
/// Trains one concept CAV per negative set and one random-concept CAV per
/// negative set (random set `i mod R` against the same negatives), then runs
/// Welch's test between the two score samples.
pub fn significance_from_activations(
    concept: &str,
    grads: &ClassGradients,
    positives: &Tensor,
    negatives: &[Tensor],
    random_positives: &[Tensor],
    probe: &ProbeConfig,
) -> Result<TcavRun> {
    if negatives.len() < 2 {
        return Err(Error::invalid(format!(
            "significance needs at least two negative sets, got {}",
            negatives.len()
        )));
    }
    if random_positives.is_empty() {
        return Err(Error::EmptySet("random concept pool".into()));
    }
    let cavs = fit_cavs(concept, &grads.layer, positives, negatives, probe)?;
    let random_cavs = fit_random_cavs(&grads.layer, negatives, random_positives, probe)?;
    let result = summarize(concept, grads, &cavs, &random_cavs)?;
    Ok(TcavRun {
        result,
        cavs,
        random_cavs,
    })
}

/// One CAV per negative set.
pub fn fit_cavs(concept: &str, layer: &str, positives: &Tensor, negatives: &[Tensor], probe: &ProbeConfig) -> Result<Vec<Cav>> {
    negatives
        .par_iter()
        .enumerate()
        .map(|(i, neg)| {
            let mut cav = fit_probe(concept, layer, positives, neg, probe)?;
            cav.negative_index = Some(i);
            Ok(cav)
        })
        .collect()
}

/// One random-concept CAV per negative set: random set `i mod R` against
/// negative set `i`.
pub fn fit_random_cavs(
    layer: &str,
    negatives: &[Tensor],
    random_positives: &[Tensor],
    probe: &ProbeConfig,
) -> Result<Vec<Cav>> {
    if random_positives.is_empty() {
        return Err(Error::EmptySet("random concept pool".into()));
    }
    negatives
        .par_iter()
        .enumerate()
        .map(|(i, neg)| {
            let mut cav = fit_probe("random", layer, &random_positives[i % random_positives.len()], neg, probe)?;
            cav.negative_index = Some(i);
            Ok(cav)
        })
        .collect()
}

/// Scores concept and random CAVs on `D_k` and tests the two samples.
pub fn summarize(concept: &str, grads: &ClassGradients, cavs: &[Cav], random_cavs: &[Cav]) -> Result<TcavResult> {
    let per_set = cavs.iter().map(|c| grads.score(c)).collect::<Result<Vec<_>>>()?;
    let random_scores = random_cavs.iter().map(|c| grads.score(c)).collect::<Result<Vec<_>>>()?;
    let test = stats::welch_t_test(&per_set, &random_scores)?;
    let (ci_lo, ci_hi) = stats::mean_ci(&per_set, 0.95)?;
    Ok(TcavResult {
        concept: concept.to_string(),
        class: grads.class,
        layer: grads.layer.clone(),
        score: stats::mean(&per_set),
        random_mean: stats::mean(&random_scores),
        per_set,
        random_scores,
        ci_lo,
        ci_hi,
        t: test.t,
        df: test.df,
        p: test.p,
        n_inputs: grads.len(),
        n_filtered: grads.n_filtered,
        mean_probe_accuracy: stats::mean(&cavs.iter().map(|c| c.accuracy).collect::<Vec<_>>()),
        probe_warnings: cavs.iter().filter(|c| c.warning).count(),
    })
}

/// Trains the CAVs, scores them on `D_k` and tests against random concepts.
#[allow(clippy::too_many_arguments)]
pub fn significance(
    model: &TrainedModel,
    layer: &str,
    concept: &str,
    positives: &[Tensor],
    negatives: &[Vec<Tensor>],
    random_pool: &[Vec<Tensor>],
    inputs: &[Tensor],
    class: usize,
    probe: &ProbeConfig,
) -> Result<TcavRun> {
    let split = model.split(layer)?;
    let grads = ClassGradients::compute(model, layer, inputs, class)?;
    let pos = split.features(positives)?;
    let neg = negatives.iter().map(|n| split.features(n)).collect::<Result<Vec<_>>>()?;
    let rnd = random_pool.iter().map(|r| split.features(r)).collect::<Result<Vec<_>>>()?;
    significance_from_activations(concept, &grads, &pos, &neg, &rnd, probe)
}

/// Fails if any image appears in both sets.
pub fn check_disjoint(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    let seen: HashSet<String> = a.iter().map(content_hash).collect();
    if let Some(i) = b.iter().position(|x| seen.contains(&content_hash(x))) {
        return Err(Error::Overlap(format!("image {i} of the comparison set is also a positive token")));
    }
    Ok(())
}

/// Relative TCAV: the CAV separates `positives` from the tokens of a second
/// concept instead of random negatives.
#[allow(clippy::too_many_arguments)]
pub fn relative_score(
    model: &TrainedModel,
    layer: &str,
    concept: &str,
    positives: &[Tensor],
    other: &[Tensor],
    inputs: &[Tensor],
    class: usize,
    probe: &ProbeConfig,
) -> Result<(f64, Cav)> {
    check_disjoint(positives, other)?;
    let cav = crate::cav::train_cav(model, layer, concept, positives, other, probe)?;
    let score = magnitude_score(model, layer, &cav, inputs, class)?;
    Ok((score, cav))
}
