//! Pass/fail checks over a finished run.
//!
//! Unless noted, attacked cells are the rows of the primary attack layer
//! (`tp-<attack.layer>`).

use serde::{Deserialize, Serialize};

use super::scenarios::{relative_label, tp_tag, BASELINE, GAUSSIAN, NOISE};
use super::tables::{ScoreKind, ScoreRecord};
use super::{ExperimentResult, ALPHA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

impl Claim {
    fn new(id: &str, description: &str, passed: bool, detail: String) -> Self {
        Claim {
            id: id.into(),
            description: description.into(),
            passed,
            detail,
        }
    }
}

/// Every claim the run's scenario supports.
pub fn evaluate(r: &ExperimentResult) -> Vec<Claim> {
    use super::Scenario::*;
    match r.scenario {
        UntargetedTcav => vec![
            baseline_significant(r),
            same_layer_drop(r),
            cross_layer_drop(r),
            gaussian_ordering(r),
        ],
        TargetedTcav => vec![targeted_increase(r), self_target_control(r)],
        RelativeTcav => vec![relative_before(r), relative_flip(r)],
        FfvFid => vec![fid_gap(r), fid_gaussian(r), dream_non_detection(r)],
        Transfer => vec![transfer_drop(r), transfer_beats_noise(r)],
    }
}

fn magnitude<'a>(r: &'a ExperimentResult, tag: &str) -> impl Iterator<Item = &'a ScoreRecord> + 'a {
    let tag = tag.to_string();
    r.scores
        .iter()
        .filter(move |s| s.kind == ScoreKind::Magnitude && s.attack_tag == tag)
}

fn find<'a>(r: &'a ExperimentResult, concept: &str, class: &str, layer: &str, tag: &str) -> Option<&'a ScoreRecord> {
    r.scores
        .iter()
        .find(|s| s.concept == concept && s.class == class && s.layer == layer && s.attack_tag == tag)
}

fn primary(r: &ExperimentResult) -> String {
    tp_tag(&r.config.attack.layer)
}

fn ratio(hits: usize, n: usize) -> String {
    format!("{hits}/{n}")
}

fn baseline_significant(r: &ExperimentResult) -> Claim {
    let cells: Vec<_> = magnitude(r, BASELINE).collect();
    let bad: Vec<String> = cells
        .iter()
        .filter(|c| !c.significant(ALPHA))
        .map(|c| format!("{}/{}@{} p={:.3}", c.concept, c.class, c.layer, c.p))
        .collect();
    Claim::new(
        "baseline-significant",
        "clean concepts score significantly above random concepts at every layer",
        !cells.is_empty() && bad.is_empty(),
        if bad.is_empty() {
            format!("{} cells significant", cells.len())
        } else {
            format!("not significant: {}", bad.join(", "))
        },
    )
}

fn same_layer_drop(r: &ExperimentResult) -> Claim {
    let layer = &r.config.attack.layer;
    let cells: Vec<_> = magnitude(r, &primary(r)).filter(|c| &c.layer == layer).collect();
    let hits = cells.iter().filter(|c| c.p >= ALPHA || c.score < c.random_mean).count();
    let need = (cells.len() * 5).div_ceil(6);
    Claim::new(
        "same-layer-drop",
        "attacking at a layer removes significance at that layer",
        !cells.is_empty() && hits >= need,
        format!("{} pairs insignificant at {layer} (need {need})", ratio(hits, cells.len())),
    )
}

fn cross_layer_drop(r: &ExperimentResult) -> Claim {
    let mut n = 0;
    let mut hits = 0;
    for a in r.config.all_attack_layers() {
        for c in magnitude(r, &tp_tag(&a)).filter(|c| c.layer != a) {
            n += 1;
            hits += usize::from(c.significant_drop(ALPHA));
        }
    }
    Claim::new(
        "cross-layer-drop",
        "attacks at one layer significantly lower scores at other layers",
        n > 0 && 2 * hits >= n,
        format!("{} off-diagonal cells dropped", ratio(hits, n)),
    )
}

fn gaussian_ordering(r: &ExperimentResult) -> Claim {
    let pair = &r.config.pairs[0];
    let layer = &r.config.attack.layer;
    let get = |tag: &str| find(r, pair.concept.name(), &pair.class, layer, tag).map(|c| c.score);
    let (passed, detail) = match (get(BASELINE), get(GAUSSIAN), get(&primary(r))) {
        (Some(b), Some(g), Some(t)) => {
            let (dg, dt) = (b - g, b - t);
            (dg > 0.0 && dg < dt, format!("drop gaussian {dg:.4}, drop attack {dt:.4}"))
        }
        _ => (false, "missing cells".to_string()),
    };
    Claim::new(
        "gaussian-ordering",
        "matched Gaussian noise lowers the score, but less than the attack",
        passed,
        detail,
    )
}

fn targeted_increase(r: &ExperimentResult) -> Claim {
    let cells: Vec<_> = magnitude(r, &primary(r)).collect();
    let hits = cells
        .iter()
        .filter(|c| {
            find(r, &c.concept, &c.class, &c.layer, BASELINE).is_some_and(|b| c.score > b.score)
        })
        .count();
    Claim::new(
        "targeted-increase",
        "pushing tokens toward another concept raises the score for that concept's class",
        !cells.is_empty() && 4 * hits >= 3 * cells.len(),
        format!("{} layers increased", ratio(hits, cells.len())),
    )
}

fn self_target_control(r: &ExperimentResult) -> Claim {
    let tag = format!("self-{}", r.config.attack.layer);
    let cells: Vec<_> = magnitude(r, &tag).collect();
    let moved: Vec<String> = cells
        .iter()
        .filter(|c| c.vs_baseline_p.is_none_or(|p| p < ALPHA))
        .map(|c| c.layer.clone())
        .collect();
    Claim::new(
        "self-target-control",
        "pushing tokens toward their own centroid leaves scores unchanged",
        !cells.is_empty() && moved.is_empty(),
        if moved.is_empty() {
            format!("{} layers unchanged", cells.len())
        } else {
            format!("changed at {}", moved.join(", "))
        },
    )
}

fn relative_cells<'a>(r: &'a ExperimentResult, tag: &'a str) -> Vec<&'a ScoreRecord> {
    let pair = &r.config.pairs[0];
    let Some(first) = pair.comparisons.first() else {
        return Vec::new();
    };
    let label = relative_label(pair.concept.name(), first.name());
    r.scores
        .iter()
        .filter(|s| s.kind == ScoreKind::Relative && s.concept == label && s.attack_tag == tag)
        .collect()
}

fn relative_before(r: &ExperimentResult) -> Claim {
    let cells = relative_cells(r, BASELINE);
    let hits = cells.iter().filter(|c| c.score > 0.0 && c.p < ALPHA).count();
    Claim::new(
        "relative-before",
        "before the attack the concept is preferred over the comparison concept",
        !cells.is_empty() && hits == cells.len(),
        format!("{} layers positive and significant", ratio(hits, cells.len())),
    )
}

fn relative_flip(r: &ExperimentResult) -> Claim {
    let tag = primary(r);
    let cells = relative_cells(r, &tag);
    let hits = cells.iter().filter(|c| c.score < 0.0).count();
    let need = (2 * cells.len()).div_ceil(3);
    Claim::new(
        "relative-flip",
        "after the attack the comparison concept is preferred",
        !cells.is_empty() && hits >= need,
        format!("{} layers negative (need {need})", ratio(hits, cells.len())),
    )
}

fn fid(r: &ExperimentResult, a: &str, b: &str) -> Option<f64> {
    r.fid.as_ref().and_then(|f| f.get(a, b))
}

fn fid_gap(r: &ExperimentResult) -> Claim {
    let (passed, detail) = match (fid(r, "TP", "FFV1"), fid(r, "FFV2", "FFV1")) {
        (Some(tp), Some(ff)) => (tp >= 2.0 * ff, format!("FID(TP, FFV1) {tp:.4}, FID(FFV2, FFV1) {ff:.4}")),
        _ => (false, "no FID table".into()),
    };
    Claim::new(
        "fid-gap",
        "attacked faceted visualizations are at least twice as far from the clean ones as a resampled concept",
        passed,
        detail,
    )
}

fn fid_gaussian(r: &ExperimentResult) -> Claim {
    let (passed, detail) = match (fid(r, "Gaussian", "FFV1"), fid(r, "FFV2", "FFV1")) {
        (Some(g), Some(ff)) => (g > ff, format!("FID(Gaussian, FFV1) {g:.4}, FID(FFV2, FFV1) {ff:.4}")),
        _ => (false, "no FID table".into()),
    };
    Claim::new(
        "fid-gaussian",
        "noisy tokens move faceted visualizations further than resampling the concept",
        passed,
        detail,
    )
}

fn dream_non_detection(r: &ExperimentResult) -> Claim {
    let (passed, detail) = match &r.dream {
        Some(d) => (
            d.clean_ratio > d.threshold && d.attacked_ratio > d.threshold,
            format!(
                "clean {:.4}, attacked {:.4}, threshold {:.4}",
                d.clean_ratio, d.attacked_ratio, d.threshold
            ),
        ),
        None => (false, "no dream report".into()),
    };
    Claim::new(
        "dream-non-detection",
        "CAV dreams of clean and attacked concepts both still show the concept's orientation",
        passed,
        detail,
    )
}

/// Attacked cells of the transfer model at layers where its clean score is
/// significant, each with its baseline score.
fn transfer_cells(r: &ExperimentResult) -> (Vec<(&ScoreRecord, f64)>, Vec<String>) {
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for c in magnitude(r, &primary(r)) {
        match find(r, &c.concept, &c.class, &c.layer, BASELINE) {
            Some(b) if b.significant(ALPHA) => cells.push((c, b.score)),
            _ => skipped.push(c.layer.clone()),
        }
    }
    (cells, skipped)
}

fn skipped_note(skipped: &[String]) -> String {
    if skipped.is_empty() {
        String::new()
    } else {
        format!("; clean score not significant at {}", skipped.join(", "))
    }
}

fn transfer_drop(r: &ExperimentResult) -> Claim {
    let (cells, skipped) = transfer_cells(r);
    let hits = cells.iter().filter(|(c, base)| c.score < *base).count();
    Claim::new(
        "transfer-drop",
        "tokens attacked on one model lower scores on another architecture",
        !cells.is_empty() && 2 * hits >= cells.len(),
        format!("{} sensitive layers below baseline{}", ratio(hits, cells.len()), skipped_note(&skipped)),
    )
}

fn transfer_beats_noise(r: &ExperimentResult) -> Claim {
    let (cells, skipped) = transfer_cells(r);
    let hits = cells
        .iter()
        .filter(|(c, _)| find(r, &c.concept, &c.class, &c.layer, NOISE).is_some_and(|n| c.score < n.score))
        .count();
    Claim::new(
        "transfer-beats-noise",
        "transferred attacks lower scores more than random-sign noise of the same budget",
        !cells.is_empty() && 2 * hits > cells.len(),
        format!("{} sensitive layers below noise{}", ratio(hits, cells.len()), skipped_note(&skipped)),
    )
}
