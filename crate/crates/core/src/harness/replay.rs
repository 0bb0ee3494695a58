use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::scenarios::{class_inputs, fid_table, relative_summary, EVAL_DIR};
use super::tables::{diff_csv, scores_csv, ScoreKind, ScoreRecord};
use super::{file_sha256, ExperimentResult, FID_FILE, SCORES_FILE};
use crate::cav::load_cav_set;
use crate::error::{Error, Result};
use crate::ffv::signature;
use crate::freval::{EncoderModel, DEFAULT_EMBEDDING_LAYER};
use crate::model::TrainedModel;
use crate::synthdata::{ppm, Dataset};
use crate::tcav::{summarize, ClassGradients};

/// Outcome of recomputing a run's tables from its persisted artifacts.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReplayReport {
    pub artifacts_checked: usize,
    pub cells_checked: usize,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Verifies artifact hashes and recomputes scores, FID and dream ratios.
pub fn replay(dir: &Path) -> Result<ReplayReport> {
    let result = ExperimentResult::load(dir)?;
    let mut report = ReplayReport::default();
    for a in &result.artifacts {
        let path = dir.join(&a.path);
        match file_sha256(&path) {
            Ok(h) if h == a.sha256 => {}
            Ok(h) => report
                .mismatches
                .push(format!("{}: sha256 {h}, recorded {}", a.path, a.sha256)),
            Err(e) => report.mismatches.push(format!("{}: {e}", a.path)),
        }
        report.artifacts_checked += 1;
    }
    if !report.ok() {
        return Ok(report);
    }

    if !result.scores.is_empty() {
        let recomputed = recompute_scores(dir, &result.scores)?;
        let expected = fs::read_to_string(dir.join(SCORES_FILE))?;
        if let Some(d) = diff_csv(&expected, &scores_csv(&recomputed)) {
            report.mismatches.push(format!("{SCORES_FILE}: {d}"));
        }
        report.cells_checked += recomputed.len() * 5;
    }

    if let Some(table) = &result.fid {
        let encoder = EncoderModel::new(TrainedModel::load(&dir.join("models/encoder.cpak"))?, DEFAULT_EMBEDDING_LAYER)?;
        let images = result
            .fid_sets
            .iter()
            .map(|s| s.images.iter().map(|p| ppm::read(&dir.join(p))).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let recomputed = fid_table(&encoder, &images)?;
        let expected = fs::read_to_string(dir.join(FID_FILE))?;
        if let Some(d) = diff_csv(&expected, &recomputed.to_csv()) {
            report.mismatches.push(format!("{FID_FILE}: {d}"));
        }
        report.cells_checked += table.conditions.len() * table.conditions.len();
    }

    if let Some(dream) = &result.dream {
        for (name, path) in &dream.images {
            let ratio = signature(&ppm::read(&dir.join(path))?)?.ratio;
            let expected = match name.as_str() {
                "clean" => Some(dream.clean_ratio),
                "attacked" => Some(dream.attacked_ratio),
                other => other
                    .strip_prefix("random-")
                    .and_then(|i| i.parse::<usize>().ok())
                    .and_then(|i| dream.random_ratios.get(i).copied()),
            };
            if expected != Some(ratio) {
                report
                    .mismatches
                    .push(format!("dream {name}: ratio {ratio}, recorded {expected:?}"));
            }
            report.cells_checked += 1;
        }
    }
    Ok(report)
}

fn recompute_scores(dir: &Path, records: &[ScoreRecord]) -> Result<Vec<ScoreRecord>> {
    let eval = Dataset::load(&dir.join(EVAL_DIR))?;
    let mut models: BTreeMap<String, TrainedModel> = BTreeMap::new();
    let mut grads: BTreeMap<(String, String, usize), ClassGradients> = BTreeMap::new();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        if !models.contains_key(&rec.model) {
            let m = TrainedModel::load(&dir.join(format!("models/{}.cpak", rec.model)))?;
            models.insert(rec.model.clone(), m);
        }
        let model = &models[&rec.model];
        let key = (rec.model.clone(), rec.layer.clone(), rec.class_id);
        if !grads.contains_key(&key) {
            let g = ClassGradients::compute(model, &rec.layer, &class_inputs(&eval, rec.class_id), rec.class_id)?;
            grads.insert(key.clone(), g);
        }
        let g = &grads[&key];
        let cavs = load_cav_set(&dir.join(&rec.cavs))?;
        let mut fresh = rec.clone();
        match rec.kind {
            ScoreKind::Magnitude => {
                let random_path = rec.random_cavs.as_ref().ok_or_else(|| Error::Malformed {
                    path: dir.join(SCORES_FILE),
                    reason: format!("magnitude cell {}@{} has no random CAVs", rec.concept, rec.layer),
                })?;
                let random = load_cav_set(&dir.join(random_path))?;
                let r = summarize(&rec.concept, g, &cavs, &random)?;
                fresh.score = r.score;
                fresh.ci_lo = r.ci_lo;
                fresh.ci_hi = r.ci_hi;
                fresh.t = r.t;
                fresh.p = r.p;
            }
            ScoreKind::Relative => {
                let per_set = cavs.iter().map(|c| g.score(c)).collect::<Result<Vec<_>>>()?;
                let (score, lo, hi, test) = relative_summary(&per_set)?;
                fresh.score = score;
                fresh.ci_lo = lo;
                fresh.ci_hi = hi;
                fresh.t = test.t;
                fresh.p = test.p;
            }
        }
        out.push(fresh);
    }
    Ok(out)
}
