use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::cav::ProbeConfig;
use crate::error::{Error, Result};
use crate::ffv::{TransformSchedule, VisualizationConfig};
use crate::model::{Architecture, TrainConfig};
use crate::synthdata::{default_classes, ConceptCounts, TextureKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    UntargetedTcav,
    TargetedTcav,
    RelativeTcav,
    FfvFid,
    Transfer,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::UntargetedTcav => "untargeted-tcav",
            Scenario::TargetedTcav => "targeted-tcav",
            Scenario::RelativeTcav => "relative-tcav",
            Scenario::FfvFid => "ffv-fid",
            Scenario::Transfer => "transfer",
        }
    }
}

/// Concept-set sizes: the desk preset or the full-size counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn counts(self) -> ConceptCounts {
        match self {
            Scale::Desk => ConceptCounts::DESK,
            Scale::Paper => ConceptCounts::PAPER,
        }
    }
}

/// Synthetic data used to train models and to score TCAV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_per_class: 200,
            eval_per_class: 50,
            train_seed: 1,
            eval_seed: 77,
            image_size: 32,
        }
    }
}

/// A model trained on the synthetic data, or loaded from `path`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSource {
    pub architecture: Architecture,
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::trained(Architecture::SmallConvNetA, 1)
    }
}

impl ModelSource {
    pub fn trained(architecture: Architecture, seed: u64) -> Self {
        ModelSource {
            architecture,
            seed,
            path: None,
            train: TrainConfig {
                seed,
                ..Default::default()
            },
        }
    }
}

/// One concept/class pair to study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub concept: TextureKind,
    /// Class name, e.g. `stripe-class`.
    pub class: String,
    /// Centroid source of the targeted attack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_concept: Option<TextureKind>,
    /// Comparison concepts of the relative scenario.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<TextureKind>,
}

impl PairConfig {
    pub fn new(concept: TextureKind, class: &str) -> Self {
        PairConfig {
            concept,
            class: class.into(),
            target_concept: None,
            comparisons: Vec::new(),
        }
    }

    pub fn tag(&self) -> String {
        format!("{}_{}", self.concept.name(), self.class)
    }
}

/// Settings of the visualization study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FfvStudy {
    pub visualization: VisualizationConfig,
    /// Visualize at most this many channels per layer (all when unset).
    pub max_channels: Option<usize>,
    /// Layer of the CAV DeepDream check.
    pub dream_layer: String,
    /// Random-concept dreams used to calibrate the orientation threshold.
    pub dream_random: usize,
    pub dream: VisualizationConfig,
}

impl Default for FfvStudy {
    fn default() -> Self {
        FfvStudy {
            visualization: VisualizationConfig {
                steps: 64,
                facet_weight: 100.0,
                ..Default::default()
            },
            max_channels: None,
            dream_layer: "pool3".into(),
            dream_random: 5,
            // quarter turns would average oriented patterns away
            dream: VisualizationConfig {
                transforms: TransformSchedule {
                    rotate: false,
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Master seed; every other stochastic choice is derived from it.
    pub seed: u64,
    pub scale: Scale,
    /// Overrides the scale's number of negative sets.
    pub negative_sets: Option<usize>,
    pub data: DataConfig,
    pub subject: ModelSource,
    pub transfer_subject: Option<ModelSource>,
    pub encoder: Option<ModelSource>,
    pub pairs: Vec<PairConfig>,
    /// `attack.layer` is the primary attack layer; `attack_layers` adds rows.
    pub attack: AttackConfig,
    pub attack_layers: Vec<String>,
    pub eval_layers: Vec<String>,
    pub probe: ProbeConfig,
    pub ffv: FfvStudy,
    /// Claim ids that must pass for a zero exit status.
    pub claims: Vec<String>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::UntargetedTcav,
            seed: 0,
            scale: Scale::Desk,
            negative_sets: None,
            data: DataConfig::default(),
            subject: ModelSource::default(),
            transfer_subject: None,
            encoder: None,
            pairs: vec![PairConfig::new(TextureKind::Stripes, "stripe-class")],
            attack: AttackConfig::default(),
            attack_layers: vec!["pool1".into(), "pool2".into(), "pool3".into()],
            eval_layers: vec!["pool1".into(), "pool2".into(), "pool3".into()],
            probe: ProbeConfig::default(),
            ffv: FfvStudy::default(),
            claims: Vec::new(),
            output_dir: None,
        }
    }
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 7] = [
    "untargeted-stripes",
    "untargeted-all",
    "targeted-dots-honeycomb",
    "relative-stripes-dots",
    "ffv-fid",
    "transfer-a-b",
    "smoke",
];

impl ExperimentConfig {
    /// Named configurations mirroring the studied concept/class pairs.
    pub fn preset(name: &str) -> Result<Self> {
        use TextureKind::*;
        let base = ExperimentConfig::default();
        let cfg = match name {
            "untargeted-stripes" => ExperimentConfig {
                claims: vec!["baseline-significant".into(), "same-layer-drop".into()],
                ..base
            },
            "untargeted-all" => ExperimentConfig {
                pairs: default_classes()
                    .into_iter()
                    .map(|c| PairConfig::new(c.texture, &c.name))
                    .collect(),
                claims: vec![
                    "baseline-significant".into(),
                    "same-layer-drop".into(),
                    "cross-layer-drop".into(),
                    "gaussian-ordering".into(),
                ],
                ..base
            },
            "targeted-dots-honeycomb" => ExperimentConfig {
                scenario: Scenario::TargetedTcav,
                pairs: vec![PairConfig {
                    target_concept: Some(Honeycomb),
                    ..PairConfig::new(Dots, "honeycomb-class")
                }],
                attack: AttackConfig {
                    mode: crate::attack::AttackMode::Targeted,
                    ..Default::default()
                },
                attack_layers: Vec::new(),
                claims: vec!["targeted-increase".into(), "self-target-control".into()],
                ..base
            },
            "relative-stripes-dots" => ExperimentConfig {
                scenario: Scenario::RelativeTcav,
                pairs: vec![PairConfig {
                    comparisons: vec![Dots, Checker],
                    ..PairConfig::new(Stripes, "stripe-class")
                }],
                attack_layers: Vec::new(),
                claims: vec!["relative-before".into(), "relative-flip".into()],
                ..base
            },
            "ffv-fid" => ExperimentConfig {
                scenario: Scenario::FfvFid,
                encoder: Some(ModelSource::trained(Architecture::SmallConvNetA, 2)),
                attack_layers: Vec::new(),
                eval_layers: vec!["pool1".into(), "pool2".into()],
                claims: vec!["fid-gap".into(), "fid-gaussian".into(), "dream-non-detection".into()],
                ..base
            },
            "transfer-a-b" => ExperimentConfig {
                scenario: Scenario::Transfer,
                transfer_subject: Some(ModelSource::trained(Architecture::SmallConvNetB, 3)),
                attack_layers: Vec::new(),
                claims: vec!["transfer-drop".into(), "transfer-beats-noise".into()],
                ..base
            },
            "smoke" => ExperimentConfig {
                data: DataConfig {
                    train_per_class: 20,
                    eval_per_class: 10,
                    image_size: 16,
                    ..Default::default()
                },
                subject: ModelSource {
                    train: TrainConfig {
                        epochs: 2,
                        seed: 1,
                        ..Default::default()
                    },
                    ..ModelSource::default()
                },
                negative_sets: Some(3),
                attack: AttackConfig {
                    steps: 2,
                    ..Default::default()
                },
                attack_layers: Vec::new(),
                eval_layers: vec!["pool2".into()],
                ..base
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn counts(&self) -> ConceptCounts {
        let mut c = self.scale.counts();
        if let Some(n) = self.negative_sets {
            c.negative_sets = n;
        }
        c
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.data.image_size, self.data.image_size)
    }

    /// Attack layers in row order: the primary layer first, then the rest.
    pub fn all_attack_layers(&self) -> Vec<String> {
        let mut layers = vec![self.attack.layer.clone()];
        for l in &self.attack_layers {
            if !layers.contains(l) {
                layers.push(l.clone());
            }
        }
        layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_layers.is_empty() {
            return Err(Error::invalid("eval_layers must not be empty"));
        }
        if self.pairs.is_empty() {
            return Err(Error::invalid("at least one concept/class pair is required"));
        }
        self.attack.validate()?;
        let counts = self.counts();
        if counts.negative_sets < 2 {
            return Err(Error::invalid("at least two negative sets are required"));
        }
        let classes = default_classes();
        for p in &self.pairs {
            if !classes.iter().any(|c| c.name == p.class) {
                let names: Vec<_> = classes.iter().map(|c| c.name.as_str()).collect();
                return Err(Error::invalid(format!(
                    "unknown class `{}` (known: {})",
                    p.class,
                    names.join(", ")
                )));
            }
            if self.scenario == Scenario::TargetedTcav && p.target_concept.is_none() {
                return Err(Error::invalid(format!("pair {} needs a target_concept", p.tag())));
            }
            if self.scenario == Scenario::RelativeTcav && p.comparisons.is_empty() {
                return Err(Error::invalid(format!("pair {} needs comparison concepts", p.tag())));
            }
            if p.comparisons.contains(&p.concept) {
                return Err(Error::invalid(format!("pair {} compares a concept with itself", p.tag())));
            }
        }
        match self.scenario {
            Scenario::Transfer => {
                let t = self
                    .transfer_subject
                    .as_ref()
                    .ok_or_else(|| Error::invalid("transfer needs a transfer_subject"))?;
                if t.architecture == self.subject.architecture && t.path.is_none() && self.subject.path.is_none() {
                    return Err(Error::invalid("transfer subject must use a different architecture"));
                }
            }
            Scenario::FfvFid => {
                if self.encoder.is_none() {
                    return Err(Error::invalid("ffv-fid needs an encoder model"));
                }
                if self.encoder.as_ref() == Some(&self.subject) {
                    return Err(Error::invalid("the encoder must not be the model under study"));
                }
                self.ffv.visualization.validate()?;
                self.ffv.dream.validate()?;
                if self.ffv.dream_random < 2 {
                    return Err(Error::invalid("dream_random must be at least 2"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, excluding the output path.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            ExperimentConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"scenario": "untargeted-tcav", "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"attack": {"epsilon": 0.1, "bogus": 1}}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"scenario": "transfer", "transfer_subject": {"architecture": "B"}}"#)
            .unwrap();
        assert_eq!(cfg.scenario, Scenario::Transfer);
    }

    #[test]
    fn empty_eval_layers_rejected() {
        let cfg = ExperimentConfig {
            eval_layers: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_architecture_transfer_rejected() {
        let cfg = ExperimentConfig {
            scenario: Scenario::Transfer,
            transfer_subject: Some(ModelSource::trained(Architecture::SmallConvNetA, 9)),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: Some("elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::preset("targeted-dots-honeycomb").unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }
}
