//! Confusion-count metrics, rank-based AUROC and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores ({scores}) and labels ({labels}) differ in length")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {value} at position {index} is outside [0, 1]")]
    ScoreRange { index: usize, value: f64 },
    #[error("label {value} at position {index} is not 0 or 1")]
    BadLabel { index: usize, value: u8 },
    #[error("report needs at least one row")]
    EmptyReport,
}

/// Exact confusion counts at a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Predicted positive iff `score >= threshold`.
pub fn confusion(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<ConfusionCounts, MetricsError> {
    check_inputs(scores, labels)?;
    let mut counts = ConfusionCounts {
        tp: 0,
        tn: 0,
        fp: 0,
        fn_: 0,
    };
    for (&score, &label) in scores.iter().zip(labels) {
        let predicted = score >= threshold;
        match (predicted, label == 1) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }
    Ok(counts)
}

/// `None` when the denominator is empty; undefined is a value, not an error.
pub fn accuracy(counts: &ConfusionCounts) -> Option<f64> {
    let total = counts.total();
    (total > 0).then(|| (counts.tp + counts.tn) as f64 / total as f64)
}

pub fn precision(counts: &ConfusionCounts) -> Option<f64> {
    let denom = counts.tp + counts.fp;
    (denom > 0).then(|| counts.tp as f64 / denom as f64)
}

pub fn recall(counts: &ConfusionCounts) -> Option<f64> {
    let denom = counts.tp + counts.fn_;
    (denom > 0).then(|| counts.tp as f64 / denom as f64)
}

/// Probability that a random positive outranks a random negative, ties
/// counted half. Computed through tie-averaged rank sums in O(n log n);
/// `None` when either class is absent.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    for (index, &value) in labels.iter().enumerate() {
        if value > 1 {
            return Err(MetricsError::BadLabel { index, value });
        }
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average ranks across tie groups, 1-based.
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            rank[idx] = avg;
        }
        i = j;
    }

    let positive_rank_sum: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let p = positives as f64;
    let n = negatives as f64;
    Ok(Some((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Metrics for one (model, dataset) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub auroc: Option<f64>,
    pub n: usize,
    pub threshold: f64,
}

impl EvalReport {
    pub fn from_scores(
        scores: &[f64],
        labels: &[u8],
        threshold: f64,
    ) -> Result<Self, MetricsError> {
        let counts = confusion(scores, labels, threshold)?;
        Ok(Self {
            counts,
            accuracy: accuracy(&counts),
            precision: precision(&counts),
            recall: recall(&counts),
            auroc: auroc(scores, labels)?,
            n: scores.len(),
            threshold,
        })
    }
}

fn fmt_opt2(value: Option<f64>) -> String {
    value.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

fn fmt_opt_full(value: Option<f64>) -> String {
    value.map_or_else(String::new, |v| v.to_string())
}

/// Fixed-width text table, two decimals, `n/a` for undefined metrics.
pub fn render_report_text(rows: &[(String, EvalReport)]) -> Result<String, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyReport);
    }
    let name_width = rows
        .iter()
        .map(|(name, _)| name.len())
        .chain(std::iter::once("model".len()))
        .max()
        .unwrap();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_width$}  {:>8}  {:>9}  {:>6}  {:>5}",
        "model", "accuracy", "precision", "recall", "auc"
    );
    for (name, report) in rows {
        let _ = writeln!(
            out,
            "{:<name_width$}  {:>8}  {:>9}  {:>6}  {:>5}",
            name,
            fmt_opt2(report.accuracy),
            fmt_opt2(report.precision),
            fmt_opt2(report.recall),
            fmt_opt2(report.auroc),
        );
    }
    Ok(out)
}

/// Full-precision CSV; undefined metrics render as empty cells.
pub fn render_report_csv(rows: &[(String, EvalReport)]) -> Result<String, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyReport);
    }
    let mut out = String::from("model,accuracy,precision,recall,auc,n,tp,tn,fp,fn\n");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            name,
            fmt_opt_full(r.accuracy),
            fmt_opt_full(r.precision),
            fmt_opt_full(r.recall),
            fmt_opt_full(r.auroc),
            r.n,
            r.counts.tp,
            r.counts.tn,
            r.counts.fp,
            r.counts.fn_,
        );
    }
    Ok(out)
}

/// Twenty equal-width bins over [0, 1]; the last bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub bins: Vec<usize>,
}

pub const SCORE_BINS: usize = 20;

pub fn score_histogram(scores: &[f64]) -> Result<ScoreHistogram, MetricsError> {
    let mut bins = vec![0usize; SCORE_BINS];
    for (index, &value) in scores.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::ScoreRange { index, value });
        }
        let bin = ((value * SCORE_BINS as f64) as usize).min(SCORE_BINS - 1);
        bins[bin] += 1;
    }
    Ok(ScoreHistogram { bins })
}

impl ScoreHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, count) in self.bins.iter().enumerate() {
            let low = i as f64 / SCORE_BINS as f64;
            let high = (i + 1) as f64 / SCORE_BINS as f64;
            let _ = writeln!(out, "{low},{high},{count}");
        }
        out
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    for (index, &value) in scores.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::ScoreRange { index, value });
        }
    }
    for (index, &value) in labels.iter().enumerate() {
        if value > 1 {
            return Err(MetricsError::BadLabel { index, value });
        }
    }
    Ok(())
}

/// O(n^2) pair-enumeration AUROC. Test oracle for the rank-based routine;
/// kept out of the production path.
#[doc(hidden)]
pub fn auroc_by_pair_enumeration(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        for (&sj, &lj) in scores[i + 1..].iter().zip(&labels[i + 1..]) {
            let (pos, neg) = match (li, lj) {
                (1, 0) => (si, sj),
                (0, 1) => (sj, si),
                _ => continue,
            };
            pairs += 1;
            if pos > neg {
                wins += 1.0;
            } else if pos == neg {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_direct_counting() {
        let counts = confusion(&[0.9, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!(
            counts,
            ConfusionCounts {
                tp: 1,
                tn: 1,
                fp: 0,
                fn_: 0
            }
        );
    }

    #[test]
    fn confusion_threshold_is_inclusive() {
        let counts = confusion(&[0.5], &[0], 0.5).unwrap();
        assert_eq!(counts.fp, 1);
    }

    #[test]
    fn confusion_all_missed_positives() {
        let counts = confusion(&[0.0; 4], &[1; 4], 0.5).unwrap();
        assert_eq!(counts.fn_, 4);
    }

    #[test]
    fn confusion_rejects_length_mismatch() {
        assert!(matches!(
            confusion(&[0.5], &[1, 0], 0.5),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ratio_metrics() {
        let counts = ConfusionCounts {
            tp: 2,
            tn: 0,
            fp: 1,
            fn_: 0,
        };
        assert_eq!(precision(&counts), Some(2.0 / 3.0));

        let zero = ConfusionCounts {
            tp: 0,
            tn: 3,
            fp: 0,
            fn_: 0,
        };
        assert_eq!(precision(&zero), None);

        let even = ConfusionCounts {
            tp: 1,
            tn: 1,
            fp: 1,
            fn_: 1,
        };
        assert_eq!(accuracy(&even), Some(0.5));
    }

    #[test]
    fn auroc_mixed_pair() {
        // Two positive-negative pairs: one ranked correctly, one not.
        let value = auroc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap().unwrap();
        assert!((value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auroc_perfect_separation() {
        let value = auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])
            .unwrap()
            .unwrap();
        assert_eq!(value, 1.0);
    }

    #[test]
    fn auroc_all_ties() {
        let value = auroc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap().unwrap();
        assert!((value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auroc_single_class_is_undefined() {
        assert_eq!(auroc(&[0.1, 0.9], &[1, 1]).unwrap(), None);
    }

    #[test]
    fn report_rendering_rounds_and_marks_undefined() {
        let report = EvalReport {
            counts: ConfusionCounts {
                tp: 0,
                tn: 173,
                fp: 0,
                fn_: 10,
            },
            accuracy: Some(0.946),
            precision: None,
            recall: Some(0.0),
            auroc: Some(0.501),
            n: 183,
            threshold: 0.5,
        };
        let rows = vec![("m".to_string(), report)];
        let text = render_report_text(&rows).unwrap();
        assert!(text.contains("0.95"));
        assert!(text.contains("n/a"));
        let csv = render_report_csv(&rows).unwrap();
        let line = csv.lines().nth(1).unwrap();
        assert!(line.starts_with("m,0.946,,0,"));
    }

    #[test]
    fn report_preserves_row_order() {
        let r = EvalReport {
            counts: ConfusionCounts {
                tp: 1,
                tn: 1,
                fp: 0,
                fn_: 0,
            },
            accuracy: Some(1.0),
            precision: Some(1.0),
            recall: Some(1.0),
            auroc: Some(1.0),
            n: 2,
            threshold: 0.5,
        };
        let rows = vec![("zeta".to_string(), r.clone()), ("alpha".to_string(), r)];
        let csv = render_report_csv(&rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[1].starts_with("zeta,"));
        assert!(lines[2].starts_with("alpha,"));
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(matches!(
            render_report_text(&[]),
            Err(MetricsError::EmptyReport)
        ));
    }

    #[test]
    fn histogram_edges() {
        let hist = score_histogram(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(hist.bins[0], 3);

        let hist = score_histogram(&[1.0]).unwrap();
        assert_eq!(hist.bins[19], 1);

        let grid: Vec<f64> = (0..20).map(|i| (i as f64 + 0.5) / 20.0).collect();
        let hist = score_histogram(&grid).unwrap();
        assert!(hist.bins.iter().all(|&c| c == 1));
    }

    #[test]
    fn histogram_rejects_out_of_range() {
        assert!(matches!(
            score_histogram(&[1.2]),
            Err(MetricsError::ScoreRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_enumeration(
            raw in proptest::collection::vec((0u8..=1, 0u8..=10), 2..80)
        ) {
            // Quantized scores force plenty of ties.
            let labels: Vec<u8> = raw.iter().map(|&(l, _)| l).collect();
            let scores: Vec<f64> = raw.iter().map(|&(_, q)| q as f64 / 10.0).collect();
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_by_pair_enumeration(&scores, &labels);
            match (fast, slow) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn auroc_is_monotone_invariant(
            raw in proptest::collection::vec((0u8..=1, 0.0f64..=1.0), 2..60)
        ) {
            let labels: Vec<u8> = raw.iter().map(|&(l, _)| l).collect();
            let scores: Vec<f64> = raw.iter().map(|&(_, s)| s).collect();
            // x^3 is strictly monotone on [0, 1].
            let transformed: Vec<f64> = scores.iter().map(|&s| s * s * s).collect();
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc(&transformed, &labels).unwrap();
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn auroc_flips_under_score_reversal(
            raw in proptest::collection::vec((0u8..=1, 0u8..=10), 2..60)
        ) {
            // Grid scores keep 1 - s collision-free apart from true ties.
            let labels: Vec<u8> = raw.iter().map(|&(l, _)| l).collect();
            let scores: Vec<f64> = raw.iter().map(|&(_, q)| q as f64 / 10.0).collect();
            let flipped: Vec<f64> = scores.iter().map(|&s| 1.0 - s).collect();
            if let (Some(a), Some(b)) = (
                auroc(&scores, &labels).unwrap(),
                auroc(&flipped, &labels).unwrap(),
            ) {
                prop_assert!((a - (1.0 - b)).abs() < 1e-12);
            }
        }

        #[test]
        fn confusion_metrics_match_naive_recount(
            raw in proptest::collection::vec((0u8..=1, 0.0f64..=1.0), 1..60),
            threshold in 0.0f64..=1.0
        ) {
            let labels: Vec<u8> = raw.iter().map(|&(l, _)| l).collect();
            let scores: Vec<f64> = raw.iter().map(|&(_, s)| s).collect();
            let counts = confusion(&scores, &labels, threshold).unwrap();
            let tp = scores.iter().zip(&labels).filter(|(&s, &l)| s >= threshold && l == 1).count();
            let fp = scores.iter().zip(&labels).filter(|(&s, &l)| s >= threshold && l == 0).count();
            prop_assert_eq!(counts.tp, tp);
            prop_assert_eq!(counts.fp, fp);
            prop_assert_eq!(counts.total(), scores.len());
        }
    }
}
