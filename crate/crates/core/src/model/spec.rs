use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer vocabulary. Convolutions are 3×3, stride 1, padding 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3 { out_channels: usize },
    Relu,
    Maxpool2x2,
    Flatten,
    Dense { out_features: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
        }
    }
}

/// Fixed input standardization `(x − mean[c]) / std` applied before the
/// first layer. Not a split point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f32>,
    pub std: f32,
}

impl InputNorm {
    pub fn standard(channels: usize) -> Self {
        InputNorm {
            mean: vec![0.5; channels],
            std: 0.25,
        }
    }
}

/// Ordered named layers mapping a `[C, H, W]` image to `num_classes` logits.
///
/// Every layer boundary is a split point `f = h_ℓ ∘ f_ℓ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub input_norm: InputNorm,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// The two fixed architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// Widths 16/32/64, single dense head.
    #[serde(rename = "A")]
    SmallConvNetA,
    /// Widths 24/48/48 plus a hidden dense layer.
    #[serde(rename = "B")]
    SmallConvNetB,
}

impl Architecture {
    pub fn spec(self, input_shape: &[usize], num_classes: usize) -> ModelSpec {
        match self {
            Architecture::SmallConvNetA => ModelSpec::small_convnet_a(input_shape, num_classes),
            Architecture::SmallConvNetB => ModelSpec::small_convnet_b(input_shape, num_classes),
        }
    }
}

fn conv_block(i: usize, width: usize) -> [LayerSpec; 3] {
    [
        LayerSpec::new(&format!("conv{i}"), LayerKind::Conv3x3 { out_channels: width }),
        LayerSpec::new(&format!("relu{i}"), LayerKind::Relu),
        LayerSpec::new(&format!("pool{i}"), LayerKind::Maxpool2x2),
    ]
}

impl ModelSpec {
    pub fn small_convnet_a(input_shape: &[usize], num_classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> = [16, 32, 64]
            .iter()
            .enumerate()
            .flat_map(|(i, &w)| conv_block(i + 1, w))
            .collect();
        layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
        layers.push(LayerSpec::new(
            "dense",
            LayerKind::Dense {
                out_features: num_classes,
            },
        ));
        ModelSpec {
            name: "SmallConvNet-A".into(),
            input_shape: input_shape.to_vec(),
            input_norm: InputNorm::standard(input_shape.first().copied().unwrap_or(0)),
            num_classes,
            layers,
        }
    }

    pub fn small_convnet_b(input_shape: &[usize], num_classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> = [24, 48, 48]
            .iter()
            .enumerate()
            .flat_map(|(i, &w)| conv_block(i + 1, w))
            .collect();
        layers.extend([
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new("dense1", LayerKind::Dense { out_features: 64 }),
            LayerSpec::new("relu4", LayerKind::Relu),
            LayerSpec::new(
                "dense2",
                LayerKind::Dense {
                    out_features: num_classes,
                },
            ),
        ]);
        ModelSpec {
            name: "SmallConvNet-B".into(),
            input_shape: input_shape.to_vec(),
            input_norm: InputNorm::standard(input_shape.first().copied().unwrap_or(0)),
            num_classes,
            layers,
        }
    }

    /// Checks the model spec and returns each layer's output shape (no batch dim).
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec {
                layer: "<none>".into(),
                reason: "a model needs at least one layer".into(),
            });
        }
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec {
                layer: "<input>".into(),
                reason: format!("input shape must be [C, H, W], got {:?}", self.input_shape),
            });
        }
        let norm = &self.input_norm;
        if norm.mean.len() != self.input_shape[0] || !(norm.std > 0.0 && norm.std.is_finite()) {
            return Err(Error::InvalidSpec {
                layer: "<input>".into(),
                reason: format!("input norm needs {} channel means and a positive std", self.input_shape[0]),
            });
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec {
                layer: "<output>".into(),
                reason: "need at least two classes".into(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let fail = |reason: String| Error::InvalidSpec {
                layer: layer.name.clone(),
                reason,
            };
            if !seen.insert(layer.name.as_str()) {
                return Err(fail("duplicate layer name".into()));
            }
            shape = match &layer.kind {
                LayerKind::Conv3x3 { out_channels } => {
                    if shape.len() != 3 {
                        return Err(fail(format!("conv needs a [C, H, W] input, got {shape:?}")));
                    }
                    if *out_channels == 0 {
                        return Err(fail("zero output channels".into()));
                    }
                    vec![*out_channels, shape[1], shape[2]]
                }
                LayerKind::Relu => shape,
                LayerKind::Maxpool2x2 => {
                    if shape.len() != 3 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
                        return Err(fail(format!("max-pool needs even spatial dims, got {shape:?}")));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerKind::Flatten => vec![shape.iter().product()],
                LayerKind::Dense { out_features } => {
                    if shape.len() != 1 {
                        return Err(fail(format!("dense needs a flat input, got {shape:?}")));
                    }
                    if *out_features == 0 {
                        return Err(fail("zero output features".into()));
                    }
                    vec![*out_features]
                }
            };
            shapes.push(shape.clone());
        }
        let last = self.layers.last().expect("non-empty");
        if shape != [self.num_classes] {
            return Err(Error::InvalidSpec {
                layer: last.name.clone(),
                reason: format!("final layer outputs {shape:?}, expected [{}] logits", self.num_classes),
            });
        }
        Ok(shapes)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// Index of `name`, or an error listing valid names.
    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer {
                name: name.to_string(),
                valid: self.layer_names().join(", "),
            })
    }

    /// Shapes of the trainable tensors of each layer, in layer order.
    pub(crate) fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.layer_shapes()?;
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = if i == 0 { &self.input_shape } else { &shapes[i - 1] };
            match &layer.kind {
                LayerKind::Conv3x3 { out_channels } => {
                    params.push((format!("{}.weight", layer.name), vec![*out_channels, in_shape[0], 3, 3]));
                    params.push((format!("{}.bias", layer.name), vec![*out_channels]));
                }
                LayerKind::Dense { out_features } => {
                    params.push((format!("{}.weight", layer.name), vec![in_shape[0], *out_features]));
                    params.push((format!("{}.bias", layer.name), vec![*out_features]));
                }
                _ => {}
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let spec = ModelSpec::small_convnet_a(&[3, 32, 32], 6);
        let shapes = spec.layer_shapes().unwrap();
        let pool2 = spec.layer_index("pool2").unwrap();
        assert_eq!(shapes[pool2], vec![32, 8, 8]);
        assert_eq!(shapes[pool2].iter().product::<usize>(), 2048);
        assert_eq!(shapes.last().unwrap(), &vec![6]);
        assert!(ModelSpec::small_convnet_b(&[3, 32, 32], 6).layer_shapes().is_ok());
    }

    #[test]
    fn rejects_zero_layers() {
        let mut spec = ModelSpec::small_convnet_a(&[3, 32, 32], 6);
        spec.layers.clear();
        assert!(matches!(spec.layer_shapes(), Err(Error::InvalidSpec { .. })));
    }

    #[test]
    fn names_first_offending_layer() {
        let mut spec = ModelSpec::small_convnet_a(&[3, 32, 32], 6);
        spec.layers.insert(1, LayerSpec::new("early_dense", LayerKind::Dense { out_features: 4 }));
        match spec.layer_shapes() {
            Err(Error::InvalidSpec { layer, .. }) => assert_eq!(layer, "early_dense"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_layer_lists_valid_names() {
        let spec = ModelSpec::small_convnet_a(&[3, 32, 32], 6);
        match spec.layer_index("conv9") {
            Err(Error::UnknownLayer { valid, .. }) => assert!(valid.contains("pool2")),
            other => panic!("{other:?}"),
        }
    }
}
