//! Small layered classifiers with named split points.

mod io;
mod spec;
mod train;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Bindings, NodeId, Tape};
use crate::tensor::Tensor;

pub use spec::{Architecture, InputNorm, LayerKind, LayerSpec, ModelSpec};
pub use train::{train, TrainConfig, TrainReport};

/// Images evaluated per forward pass when a caller hands over a large set.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_accuracy: Option<f64>,
}

/// A model spec plus its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub weights: BTreeMap<String, Tensor>,
    pub meta: ModelMeta,
    shapes: Vec<Vec<usize>>,
}

/// A tape computing every layer of a model for a fixed batch size.
pub struct Graph {
    pub tape: Tape,
    pub input: NodeId,
    /// Output node of each layer built, in layer order.
    pub layers: Vec<NodeId>,
}

impl TrainedModel {
    /// Fresh weights: uniform in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.layer_shapes()?;
        let mut weights = BTreeMap::new();
        for (name, shape) in spec.parameter_shapes()? {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let (fan_in, fan_out) = if shape.len() == 4 {
                    let rf = shape[2] * shape[3];
                    (shape[1] * rf, shape[0] * rf)
                } else {
                    (shape[0], shape[1])
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let mut r = rng::rng(rng::derive_str(seed, &name));
                Tensor::from_fn(&shape, |_| r.random_range(-limit..limit))
            };
            weights.insert(name, t);
        }
        Ok(TrainedModel {
            spec,
            weights,
            meta: ModelMeta {
                seed,
                ..Default::default()
            },
            shapes,
        })
    }

    pub(crate) fn from_parts(spec: ModelSpec, weights: BTreeMap<String, Tensor>, meta: ModelMeta) -> Result<Self> {
        let shapes = spec.layer_shapes()?;
        for (name, shape) in spec.parameter_shapes()? {
            match weights.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        node: format!("weight `{name}`"),
                        expected: format!("{shape:?}"),
                        actual: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::invalid(format!("missing weight `{name}`"))),
            }
        }
        Ok(TrainedModel {
            spec,
            weights,
            meta,
            shapes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.spec.layer_names()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.spec.layer_index(name)
    }

    /// Output shape of a layer, without the batch dimension.
    pub fn layer_shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.shapes[self.layer_index(name)?])
    }

    /// Flattened width `d_ℓ` of a layer's output.
    pub fn layer_width(&self, name: &str) -> Result<usize> {
        Ok(self.layer_shape(name)?.iter().product())
    }

    /// The names of the output layers of each convolutional block (the
    /// max-pool after each conv).
    pub fn conv_block_outputs(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut in_block = false;
        for l in &self.spec.layers {
            match l.kind {
                LayerKind::Conv3x3 { .. } => in_block = true,
                LayerKind::Maxpool2x2 if in_block => {
                    out.push(l.name.clone());
                    in_block = false;
                }
                _ => {}
            }
        }
        out
    }

    pub fn weight_bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        for (name, t) in &self.weights {
            b.insert(name, t);
        }
        b
    }

    /// `(x − mean) / std` per channel, ahead of the first layer.
    fn standardize(&self, tape: &mut Tape, x: NodeId, batch: usize) -> NodeId {
        let norm = &self.spec.input_norm;
        let mut shape = vec![batch];
        shape.extend(&self.spec.input_shape);
        let plane: usize = self.spec.input_shape[1..].iter().product();
        let channels = self.spec.input_shape[0];
        let mean = Tensor::from_fn(&shape, |i| norm.mean[(i / plane) % channels]);
        let m = tape.constant(mean);
        let centered = tape.sub(x, m);
        tape.scale(centered, 1.0 / norm.std)
    }

    /// Appends layers `range` to `tape` starting from node `x`, whose batched
    /// shape must be `[batch, ...]` of the layer preceding `range.start`.
    pub(crate) fn append_layers(
        &self,
        tape: &mut Tape,
        mut x: NodeId,
        batch: usize,
        range: std::ops::Range<usize>,
    ) -> Vec<NodeId> {
        let mut outs = Vec::with_capacity(range.len());
        for i in range {
            let layer = &self.spec.layers[i];
            if i == 0 {
                x = self.standardize(tape, x, batch);
            }
            x = match &layer.kind {
                LayerKind::Conv3x3 { .. } => {
                    let w = tape.input(&format!("{}.weight", layer.name), self.weights[&format!("{}.weight", layer.name)].shape());
                    let b = tape.input(&format!("{}.bias", layer.name), self.weights[&format!("{}.bias", layer.name)].shape());
                    tape.conv2d(x, w, Some(b), 1, 1)
                }
                LayerKind::Relu => tape.relu(x),
                LayerKind::Maxpool2x2 => tape.maxpool2x2(x),
                LayerKind::Flatten => {
                    let mut shape = vec![batch];
                    shape.extend(&self.shapes[i]);
                    tape.reshape(x, &shape)
                }
                LayerKind::Dense { .. } => {
                    let w = tape.input(&format!("{}.weight", layer.name), self.weights[&format!("{}.weight", layer.name)].shape());
                    let b = tape.input(&format!("{}.bias", layer.name), self.weights[&format!("{}.bias", layer.name)].shape());
                    let y = tape.matmul(x, w);
                    tape.add(y, b)
                }
            };
            tape.set_label(x, layer.name.clone());
            outs.push(x);
        }
        outs
    }

    /// Tape from a `[batch, C, H, W]` input named `"x"` through layer `upto`
    /// (inclusive).
    pub fn graph(&self, batch: usize, upto: usize) -> Graph {
        let mut tape = Tape::new();
        let mut shape = vec![batch];
        shape.extend(&self.spec.input_shape);
        let input = tape.input("x", &shape);
        let layers = self.append_layers(&mut tape, input, batch, 0..upto + 1);
        Graph { tape, input, layers }
    }

    fn check_images(&self, images: &[Tensor]) -> Result<()> {
        for img in images {
            if img.shape() != self.spec.input_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    node: "model input".into(),
                    expected: format!("{:?}", self.spec.input_shape),
                    actual: img.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Flattened outputs of layer index `layer` for each image, `[N, d_ℓ]`.
    pub(crate) fn layer_output(&self, layer: usize, images: &[Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::EmptySet("no images to evaluate".into()));
        }
        self.check_images(images)?;
        let width: usize = self.shapes[layer].iter().product();
        let mut data = Vec::with_capacity(images.len() * width);
        for chunk in images.chunks(EVAL_CHUNK) {
            let g = self.graph(chunk.len(), layer);
            let x = Tensor::stack(chunk)?;
            let mut binds = self.weight_bindings();
            binds.insert("x", &x);
            let vals = g.tape.forward(&binds)?;
            data.extend_from_slice(vals.get(g.layers[layer]).data());
        }
        Tensor::new(vec![images.len(), width], data)
    }

    /// Logits `[N, d]`.
    pub fn logits(&self, images: &[Tensor]) -> Result<Tensor> {
        self.layer_output(self.spec.layers.len() - 1, images)
    }

    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok((0..logits.rows()).map(|i| crate::tensor::argmax(logits.row(i))).collect())
    }

    pub fn accuracy(&self, images: &[Tensor], labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Splits the model at `layer` into `f_ℓ` and `h_ℓ`.
    pub fn split(&self, layer: &str) -> Result<Split<'_>> {
        let index = self.layer_index(layer)?;
        Ok(Split { model: self, index })
    }
}

/// `f = h_ℓ ∘ f_ℓ` at one layer boundary.
#[derive(Clone, Copy)]
pub struct Split<'m> {
    model: &'m TrainedModel,
    index: usize,
}

impl<'m> Split<'m> {
    pub fn model(&self) -> &'m TrainedModel {
        self.model
    }

    pub fn layer(&self) -> &str {
        &self.model.spec.layers[self.index].name
    }

    pub fn layer_index(&self) -> usize {
        self.index
    }

    /// `d_ℓ`.
    pub fn width(&self) -> usize {
        self.model.shapes[self.index].iter().product()
    }

    /// `f_ℓ`: images to flattened activations `[N, d_ℓ]`.
    pub fn features(&self, images: &[Tensor]) -> Result<Tensor> {
        self.model.layer_output(self.index, images)
    }

    /// Tape for `h_ℓ` taking an `[batch, d_ℓ]` input named `"activation"`;
    /// returns `(tape, activation node, logits node)`.
    pub fn head_tape(&self, batch: usize) -> (Tape, NodeId, NodeId) {
        let mut tape = Tape::new();
        let act = tape.input("activation", &[batch, self.width()]);
        let mut shape = vec![batch];
        shape.extend(&self.model.shapes[self.index]);
        let start = tape.reshape(act, &shape);
        let outs = self
            .model
            .append_layers(&mut tape, start, batch, self.index + 1..self.model.spec.layers.len());
        let logits = match outs.last() {
            Some(&l) => l,
            // split at the final layer: h_ℓ is the identity on logits
            None => tape.reshape(start, &[batch, self.width()]),
        };
        (tape, act, logits)
    }

    fn check_acts(&self, acts: &Tensor) -> Result<()> {
        if acts.shape().len() != 2 || acts.shape()[1] != self.width() {
            return Err(Error::ShapeMismatch {
                node: format!("activation at `{}`", self.layer()),
                expected: format!("[N, {}]", self.width()),
                actual: acts.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `h_ℓ`: activations `[N, d_ℓ]` to logits `[N, d]`.
    pub fn head(&self, acts: &Tensor) -> Result<Tensor> {
        self.check_acts(acts)?;
        let n = acts.rows();
        let (tape, _, logits) = self.head_tape(n);
        let mut binds = self.model.weight_bindings();
        binds.insert("activation", acts);
        let vals = tape.forward(&binds)?;
        Ok(vals.take(logits))
    }

    /// `∇h_{ℓ,k}` evaluated at each activation row, `[N, d_ℓ]`.
    pub fn head_gradient(&self, acts: &Tensor, class: usize) -> Result<Tensor> {
        self.check_acts(acts)?;
        if class >= self.model.num_classes() {
            return Err(Error::invalid(format!(
                "class {class} out of range for {} classes",
                self.model.num_classes()
            )));
        }
        let n = acts.rows();
        let width = self.width();
        let mut out = Vec::with_capacity(n * width);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let b = end - start;
            let chunk = Tensor::new(vec![b, width], acts.data()[start * width..end * width].to_vec())?;
            let (mut tape, act, logits) = self.head_tape(b);
            let d = self.model.num_classes();
            let mask = Tensor::from_fn(&[b, d], |i| if i % d == class { 1.0 } else { 0.0 });
            let mask = tape.constant(mask);
            let picked = tape.hadamard(logits, mask);
            let root = tape.sum(picked);
            let mut binds = self.model.weight_bindings();
            binds.insert("activation", &chunk);
            let vals = tape.forward(&binds)?;
            let mut g = tape.gradient(&vals, root, &[act])?;
            out.extend_from_slice(g.take(act).data());
        }
        Tensor::new(vec![n, width], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TrainedModel {
        TrainedModel::build(ModelSpec::small_convnet_a(&[3, 32, 32], 6), 11).unwrap()
    }

    fn images(n: usize, seed: u64) -> Vec<Tensor> {
        let mut r = rng::rng(seed);
        (0..n)
            .map(|_| Tensor::from_fn(&[3, 32, 32], |_| r.random_range(0.0..1.0)))
            .collect()
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(model().weights, model().weights);
        let other = TrainedModel::build(ModelSpec::small_convnet_a(&[3, 32, 32], 6), 12).unwrap();
        assert_ne!(model().weights, other.weights);
    }

    #[test]
    fn forward_width_matches_shape_arithmetic() {
        let m = model();
        let acts = m.split("pool2").unwrap().features(&images(2, 1)).unwrap();
        assert_eq!(acts.shape(), &[2, 2048]);
    }

    #[test]
    fn split_composition_matches_full_model() {
        let m = model();
        let x = images(16, 2);
        let full = m.logits(&x).unwrap();
        for layer in ["pool1", "pool2", "pool3", "conv2", "relu3", "dense"] {
            let s = m.split(layer).unwrap();
            let via = s.head(&s.features(&x).unwrap()).unwrap();
            assert!(via.max_abs_diff(&full) <= 1e-6, "{layer}: {}", via.max_abs_diff(&full));
        }
    }

    #[test]
    fn final_split_head_is_identity() {
        let m = model();
        let x = images(3, 3);
        let s = m.split("dense").unwrap();
        let logits = s.features(&x).unwrap();
        assert_eq!(s.head(&logits).unwrap(), logits);
    }

    #[test]
    fn head_gradient_matches_full_graph_slice() {
        let m = model();
        let x = images(4, 4);
        let class = 2;
        for layer in ["pool1", "pool2", "pool3"] {
            let s = m.split(layer).unwrap();
            let via_head = s.head_gradient(&s.features(&x).unwrap(), class).unwrap();

            // oracle: gradient at the intermediate node of the full graph
            let idx = m.layer_index(layer).unwrap();
            let mut g = m.graph(x.len(), m.spec.layers.len() - 1);
            let logits = *g.layers.last().unwrap();
            let mask = Tensor::from_fn(&[x.len(), 6], |i| if i % 6 == class { 1.0 } else { 0.0 });
            let mask = g.tape.constant(mask);
            let picked = g.tape.hadamard(logits, mask);
            let root = g.tape.sum(picked);
            let xs = Tensor::stack(&x).unwrap();
            let mut binds = m.weight_bindings();
            binds.insert("x", &xs);
            let vals = g.tape.forward(&binds).unwrap();
            let grads = g.tape.gradient(&vals, root, &[g.layers[idx]]).unwrap();
            let full = grads.get(g.layers[idx]);
            let diff = full
                .data()
                .iter()
                .zip(via_head.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(diff <= 1e-6, "{layer}: {diff}");
        }
    }

    #[test]
    fn unknown_split_layer() {
        assert!(matches!(model().split("nope"), Err(Error::UnknownLayer { .. })));
    }

    #[test]
    fn conv_block_outputs_of_both_architectures() {
        assert_eq!(model().conv_block_outputs(), vec!["pool1", "pool2", "pool3"]);
        let b = TrainedModel::build(ModelSpec::small_convnet_b(&[3, 32, 32], 6), 1).unwrap();
        assert_eq!(b.conv_block_outputs(), vec!["pool1", "pool2", "pool3"]);
    }
}
