use serde::{Deserialize, Serialize};

use crate::tcav::TcavResult;

pub const SCORES_HEADER: [&str; 9] = ["concept", "class", "layer", "attack-tag", "score", "ci_lo", "ci_hi", "t", "p"];

/// How a score cell was computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// Concept CAVs against random-concept CAVs (Welch).
    Magnitude,
    /// Relative CAVs, one-sample test against zero.
    Relative,
}

/// One cell of a score table with the evidence behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub concept: String,
    pub class: String,
    pub class_id: usize,
    pub layer: String,
    pub attack_tag: String,
    /// `subject` or `transfer`.
    pub model: String,
    pub kind: ScoreKind,
    pub score: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub random_mean: f64,
    pub per_set: Vec<f64>,
    pub random_scores: Vec<f64>,
    /// Welch test of this cell's per-set scores against the baseline row.
    pub vs_baseline_t: Option<f64>,
    pub vs_baseline_p: Option<f64>,
    pub n_inputs: usize,
    pub n_filtered: usize,
    pub mean_probe_accuracy: f64,
    pub probe_warnings: usize,
    /// CAV set behind `per_set`, relative to the output directory.
    pub cavs: String,
    /// Random-concept CAV set, for magnitude cells.
    pub random_cavs: Option<String>,
    /// Persisted tokens the CAVs were trained from.
    pub tokens: String,
}

impl ScoreRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn from_tcav(
        r: &TcavResult,
        class: &str,
        attack_tag: &str,
        model: &str,
        cavs: String,
        random_cavs: String,
        tokens: String,
    ) -> Self {
        ScoreRecord {
            concept: r.concept.clone(),
            class: class.to_string(),
            class_id: r.class,
            layer: r.layer.clone(),
            attack_tag: attack_tag.to_string(),
            model: model.to_string(),
            kind: ScoreKind::Magnitude,
            score: r.score,
            ci_lo: r.ci_lo,
            ci_hi: r.ci_hi,
            t: r.t,
            df: r.df,
            p: r.p,
            random_mean: r.random_mean,
            per_set: r.per_set.clone(),
            random_scores: r.random_scores.clone(),
            vs_baseline_t: None,
            vs_baseline_p: None,
            n_inputs: r.n_inputs,
            n_filtered: r.n_filtered,
            mean_probe_accuracy: r.mean_probe_accuracy,
            probe_warnings: r.probe_warnings,
            cavs,
            random_cavs: Some(random_cavs),
            tokens,
        }
    }

    pub fn csv_fields(&self) -> [String; 9] {
        [
            self.concept.clone(),
            self.class.clone(),
            self.layer.clone(),
            self.attack_tag.clone(),
            num(self.score),
            num(self.ci_lo),
            num(self.ci_hi),
            num(self.t),
            num(self.p),
        ]
    }

    /// Significantly above the random concept.
    pub fn significant(&self, alpha: f64) -> bool {
        self.p < alpha && self.score > self.random_mean
    }

    /// Significantly below the baseline row.
    pub fn significant_drop(&self, alpha: f64) -> bool {
        matches!((self.vs_baseline_t, self.vs_baseline_p), (Some(t), Some(p)) if t < 0.0 && p < alpha)
    }
}

/// Shortest round-trip decimal form; the CSVs must replay exactly.
pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn scores_csv(records: &[ScoreRecord]) -> String {
    let mut out = SCORES_HEADER.join(",");
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_fields().join(","));
        out.push('\n');
    }
    out
}

/// Symmetric matrix of Fréchet distances between conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidTable {
    pub conditions: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl FidTable {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.conditions.iter().position(|c| c == a)?;
        let j = self.conditions.iter().position(|c| c == b)?;
        Some(self.matrix[i][j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("condition,{}\n", self.conditions.join(","));
        for (name, row) in self.conditions.iter().zip(&self.matrix) {
            let cells: Vec<String> = row.iter().map(|&v| num(v)).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// First differing cell between an expected and an actual CSV document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellDiff {
    /// 1-based line number, counting the header as line 1.
    pub line: usize,
    pub column: String,
    pub expected: String,
    pub actual: String,
}

impl std::fmt::Display for CellDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "line {}, column `{}`: expected `{}`, found `{}`",
            self.line, self.column, self.expected, self.actual
        )
    }
}

pub fn diff_csv(expected: &str, actual: &str) -> Option<CellDiff> {
    let exp: Vec<Vec<&str>> = expected.lines().map(|l| l.split(',').collect()).collect();
    let act: Vec<Vec<&str>> = actual.lines().map(|l| l.split(',').collect()).collect();
    let header = exp.first().cloned().unwrap_or_default();
    for i in 0..exp.len().max(act.len()) {
        let (e, a) = (exp.get(i), act.get(i));
        let width = e.map_or(0, |r| r.len()).max(a.map_or(0, |r| r.len()));
        for j in 0..width {
            let ev = e.and_then(|r| r.get(j)).copied().unwrap_or("<missing>");
            let av = a.and_then(|r| r.get(j)).copied().unwrap_or("<missing>");
            if ev != av {
                return Some(CellDiff {
                    line: i + 1,
                    column: header.get(j).map_or_else(|| format!("#{}", j + 1), |h| h.to_string()),
                    expected: ev.to_string(),
                    actual: av.to_string(),
                });
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_names_the_cell() {
        let a = "concept,score\nstripes,0.5\ndots,0.25\n";
        assert_eq!(diff_csv(a, a), None);
        let d = diff_csv(a, "concept,score\nstripes,0.5\ndots,0.3\n").unwrap();
        assert_eq!((d.line, d.column.as_str()), (3, "score"));
        assert_eq!(d.to_string(), "line 3, column `score`: expected `0.25`, found `0.3`");
        let missing = diff_csv(a, "concept,score\nstripes,0.5\n").unwrap();
        assert_eq!(missing.actual, "<missing>");
    }

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-12, f64::INFINITY] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn fid_csv_layout() {
        let t = FidTable {
            conditions: vec!["A".into(), "B".into()],
            matrix: vec![vec![0.0, 1.5], vec![1.5, 0.0]],
        };
        assert_eq!(t.to_csv(), "condition,A,B\nA,0,1.5\nB,1.5,0\n");
        assert_eq!(t.get("B", "A"), Some(1.5));
    }
}
