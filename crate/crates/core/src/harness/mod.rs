//! Declarative end-to-end experiments.
//!
//! A run takes an [`ExperimentConfig`], provisions models, concept sets and
//! attacked tokens, fills score (and FID) tables, evaluates the configured
//! claims and persists everything under one output directory:
//!
//! ```text
//! results.json  scores.csv  fid.csv  claims.json  config.json
//! models/       data/eval/  concepts/  tokens/  cavs/  vis/  dream/
//! ```
//!
//! Every table cell names the artifacts it was computed from, and
//! [`replay`] recomputes the tables from those artifacts alone.

mod artifacts;
mod claims;
mod config;
mod replay;
mod scenarios;
mod tables;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use artifacts::{file_sha256, model_key, train_model, training_data, ArtifactRecord, Workspace};
pub use claims::Claim;
pub use config::{
    DataConfig, ExperimentConfig, FfvStudy, ModelSource, PairConfig, Scale, Scenario, PRESETS,
};
pub use replay::{replay, ReplayReport};
pub use tables::{diff_csv, scores_csv, CellDiff, FidTable, ScoreKind, ScoreRecord, SCORES_HEADER};

pub const RESULTS_FILE: &str = "results.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const FID_FILE: &str = "fid.csv";
pub const CLAIMS_FILE: &str = "claims.json";
pub const CONFIG_FILE: &str = "config.json";

/// Significance level of every claim.
pub const ALPHA: f64 = 0.05;

/// Where a run writes, and where trained models may be cached.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// Summary of one set of perturbed tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub pair: String,
    pub tag: String,
    pub tokens: String,
    pub mean_linf: f64,
    /// Mean objective before and after PGD, when the row is an attack.
    pub mean_initial: Option<f64>,
    pub mean_final: Option<f64>,
}

/// Images behind one FID condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidSet {
    pub condition: String,
    pub images: Vec<String>,
}

/// Oriented-energy ratios of CAV dreams and the threshold calibrated on
/// random-concept dreams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DreamReport {
    pub layer: String,
    pub concept: String,
    pub clean_ratio: f64,
    pub attacked_ratio: f64,
    pub random_ratios: Vec<f64>,
    /// Mean plus two standard deviations of `random_ratios`.
    pub threshold: f64,
    pub images: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub scenario: Scenario,
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Every derived seed, by purpose.
    pub seeds: BTreeMap<String, u64>,
    pub scores: Vec<ScoreRecord>,
    pub attacks: Vec<AttackSummary>,
    pub fid: Option<FidTable>,
    pub fid_sets: Vec<FidSet>,
    pub dream: Option<DreamReport>,
    pub claims: Vec<Claim>,
    pub artifacts: Vec<ArtifactRecord>,
}

impl ExperimentResult {
    /// All configured claims were evaluated and passed.
    pub fn configured_claims_pass(&self) -> bool {
        self.config
            .claims
            .iter()
            .all(|id| self.claims.iter().any(|c| &c.id == id && c.passed))
    }

    pub fn claim(&self, id: &str) -> Option<&Claim> {
        self.claims.iter().find(|c| c.id == id)
    }

    /// Cells of one table, in row order.
    pub fn cells(&self, pair_concept: &str, class: &str, tag: &str) -> Vec<&ScoreRecord> {
        self.scores
            .iter()
            .filter(|r| r.concept == pair_concept && r.class == class && r.attack_tag == tag)
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RESULTS_FILE);
        let bytes = fs::read(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
            path,
            reason: e.to_string(),
        })
    }
}

/// Wraps a stage's error with the stage name.
pub(crate) fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name.to_string(),
            source: Box::new(other),
        },
    })
}

/// Runs a scenario and writes its outputs under `opts.out`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    let ws = Workspace::new(&opts.out, opts.cache.as_deref())?;
    fs::write(ws.path(CONFIG_FILE), serde_json::to_vec_pretty(cfg)?)?;
    let mut result = scenarios::execute(cfg, &ws, opts.verbose)?;
    result.claims = claims::evaluate(&result);
    let scores = scores_csv(&result.scores);
    fs::write(ws.path(SCORES_FILE), &scores)?;
    if let Some(fid) = &result.fid {
        fs::write(ws.path(FID_FILE), fid.to_csv())?;
    }
    fs::write(ws.path(CLAIMS_FILE), serde_json::to_vec_pretty(&result.claims)?)?;
    result.artifacts = ws.inventory(&[RESULTS_FILE, SCORES_FILE, FID_FILE, CLAIMS_FILE, CONFIG_FILE])?;
    fs::write(ws.path(RESULTS_FILE), serde_json::to_vec_pretty(&result)?)?;
    Ok(result)
}
