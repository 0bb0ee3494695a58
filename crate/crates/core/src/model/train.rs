use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TrainedModel;
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::Bindings;
use crate::tensor::Tensor;

/// Mini-batch SGD with momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fraction of each class held out for evaluation.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.02,
            momentum: 0.9,
            epochs: 20,
            batch: 32,
            seed: 0,
            holdout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out accuracy after each epoch.
    pub heldout_accuracy: Vec<f64>,
    /// Accuracy of the untrained model on the held-out split.
    pub initial_accuracy: f64,
    pub train_indices: Vec<usize>,
    pub heldout_indices: Vec<usize>,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> f64 {
        self.heldout_accuracy.last().copied().unwrap_or(self.initial_accuracy)
    }
}

/// Per-class deterministic split into (train, held-out) indices.
pub(crate) fn stratified_split(labels: &[usize], holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng::stream(seed, c as u64));
        let n_held = ((idx.len() as f64 * holdout).round() as usize).min(idx.len().saturating_sub(1));
        held.extend_from_slice(&idx[..n_held]);
        train.extend_from_slice(&idx[n_held..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// Trains `model` in place on `(images, labels)`.
pub fn train(
    model: &mut TrainedModel,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(Error::EmptySet("training set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let d = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= d) {
        return Err(Error::invalid(format!("label {bad} out of range for {d} classes")));
    }
    if cfg.batch == 0 || !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::invalid("batch must be positive and holdout in [0, 1)"));
    }
    model.check_images(images)?;

    let (train_idx, held_idx) = stratified_split(labels, cfg.holdout, rng::derive_str(cfg.seed, "split"));
    let held_images: Vec<Tensor> = held_idx.iter().map(|&i| images[i].clone()).collect();
    let held_labels: Vec<usize> = held_idx.iter().map(|&i| labels[i]).collect();
    let eval = |m: &TrainedModel| -> Result<f64> {
        if held_images.is_empty() {
            Ok(f64::NAN)
        } else {
            m.accuracy(&held_images, &held_labels)
        }
    };
    let initial_accuracy = eval(model)?;

    let names: Vec<String> = model.weights.keys().cloned().collect();
    let mut velocity: BTreeMap<String, Tensor> = model
        .weights
        .iter()
        .map(|(k, w)| (k.clone(), Tensor::zeros(w.shape())))
        .collect();
    let last = model.spec.layers.len() - 1;
    let mut order = train_idx.clone();
    let mut shuffler = rng::rng(rng::derive_str(cfg.seed, "shuffle"));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut heldout_accuracy = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffler);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch) {
            let n = batch.len();
            let xs: Vec<Tensor> = batch.iter().map(|&i| images[i].clone()).collect();
            let x = Tensor::stack(&xs)?;
            let onehot = Tensor::from_fn(&[n, d], |j| if labels[batch[j / d]] == j % d { 1.0 } else { 0.0 });

            let mut g = model.graph(n, last);
            let logits = *g.layers.last().expect("at least one layer");
            let targets = g.tape.input("targets", &[n, d]);
            let loss = g.tape.softmax_cross_entropy(logits, targets);
            let wrt: Vec<_> = names
                .iter()
                .map(|name| g.tape.find_input(name).expect("weight input on tape"))
                .collect();

            let mut grads = {
                let mut binds: Bindings<'_> = model.weight_bindings();
                binds.insert("x", &x);
                binds.insert("targets", &onehot);
                let vals = g.tape.forward(&binds)?;
                let l = vals.get(loss).item();
                if !l.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                loss_sum += l as f64 * n as f64;
                g.tape.gradient(&vals, loss, &wrt)?
            };
            for (name, &node) in names.iter().zip(&wrt) {
                let grad = grads.take(node);
                let v = velocity.get_mut(name).expect("velocity per weight");
                for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
                    *vi = cfg.momentum * *vi + gi;
                }
                let w = model.weights.get_mut(name).expect("weight");
                for (wi, vi) in w.data_mut().iter_mut().zip(v.data()) {
                    *wi -= cfg.lr * vi;
                }
            }
        }
        let mean = loss_sum / order.len().max(1) as f64;
        if !mean.is_finite() || model.weights.values().any(|w| !w.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mean);
        heldout_accuracy.push(eval(model)?);
    }

    model.meta.epochs += cfg.epochs;
    model.meta.final_accuracy = heldout_accuracy.last().copied().filter(|a| a.is_finite());
    Ok(TrainReport {
        epoch_losses,
        heldout_accuracy,
        initial_accuracy,
        train_indices: train_idx,
        heldout_indices: held_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let (train, held) = stratified_split(&labels, 0.2, 5);
        assert_eq!(held.len(), 12);
        assert_eq!(train.len() + held.len(), 60);
        for c in 0..3 {
            assert_eq!(held.iter().filter(|&&i| labels[i] == c).count(), 4);
        }
        assert!(train.iter().all(|i| !held.contains(i)));
        assert_eq!(stratified_split(&labels, 0.2, 5), (train, held));
    }
}
