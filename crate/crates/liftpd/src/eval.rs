//! Confusion metrics, ROC/AUC, and the leave-one-subject-out evaluation
//! harness.
//!
//! Thresholding is inclusive (score ≥ threshold predicts positive) and
//! zero-denominator metrics surface as undefined, never as silent zeros.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Recording;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Tabulate predictions at a threshold: predicted positive iff
/// `score ≥ threshold`.
pub fn confusion_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if scores.is_empty() {
        return Err(Error::Empty("no scores to tabulate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts {
        true_pos: 0,
        false_pos: 0,
        true_neg: 0,
        false_neg: 0,
    };
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, y) {
            (true, 1) => c.true_pos += 1,
            (true, 0) => c.false_pos += 1,
            (false, 0) => c.true_neg += 1,
            (false, 1) => c.false_neg += 1,
            (_, other) => {
                return Err(Error::Shape(format!("label {other} not in {{0,1}}")));
            }
        }
    }
    Ok(c)
}

/// Classification metrics; a `None` marks a zero-denominator metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

pub fn classification_metrics(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    let sensitivity = ratio(c.true_pos, c.true_pos + c.false_neg);
    let specificity = ratio(c.true_neg, c.true_neg + c.false_pos);
    let precision = ratio(c.true_pos, c.true_pos + c.false_pos);
    let accuracy = ratio(c.true_pos + c.true_neg, c.total());
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    Metrics {
        sensitivity,
        specificity,
        precision,
        accuracy,
        f1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve with strictly decreasing thresholds; the first point is the
/// above-every-score sentinel at (0,0) and the last reaches (1,1). Tied
/// scores collapse to one point.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!(
            "ROC needs both classes, got {pos} positive / {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group at this threshold
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve over fpr. Equals the pairwise
/// concordance statistic (ties ½) up to roundoff.
pub fn auc(curve: &RocCurve) -> f64 {
    let mut area = 0.0;
    for w in curve.points.windows(2) {
        area += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
    }
    area
}

/// `threshold,fpr,tpr` rows; byte-stable under fixed inputs.
pub fn write_roc_csv<W: Write>(curve: &RocCurve, mut out: W) -> Result<()> {
    writeln!(out, "threshold,fpr,tpr")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    Ok(())
}

/// One leave-one-subject-out fold: indices into the recording list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LosoFold {
    pub test_subject: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct subject, in sorted subject order. All trials of a
/// subject land on the same side.
pub fn loso_folds(recordings: &[Recording]) -> Result<Vec<LosoFold>> {
    let mut subjects: Vec<String> = recordings.iter().map(|r| r.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    if subjects.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-subject-out needs ≥ 2 subjects, got {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .map(|subject| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..recordings.len()).partition(|&i| recordings[i].subject_id == subject);
            LosoFold {
                test_subject: subject,
                train,
                test,
            }
        })
        .collect())
}

/// Per-fold evaluation results feeding the aggregate report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub subject: String,
    pub n_test_windows: usize,
    pub auc: Option<f64>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    /// Population standard deviation over the defined folds.
    pub std: f64,
    pub defined: usize,
    pub total: usize,
}

/// Per-metric unweighted mean and std across folds; undefined metrics are
/// excluded from the mean, with the defined count recorded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub folds: Vec<FoldMetrics>,
    pub aggregate: BTreeMap<String, AggregateStat>,
}

pub fn aggregate_report(per_fold: &[FoldMetrics]) -> Result<Report> {
    if per_fold.is_empty() {
        return Err(Error::Empty("no folds to aggregate".into()));
    }
    let total = per_fold.len();
    let mut aggregate = BTreeMap::new();
    let metric = |name: &str, values: Vec<Option<f64>>| {
        let defined: Vec<f64> = values.into_iter().flatten().collect();
        let n = defined.len();
        if n == 0 {
            return (name.to_string(), None);
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        (
            name.to_string(),
            Some(AggregateStat {
                mean,
                std: var.sqrt(),
                defined: n,
                total,
            }),
        )
    };
    let rows: Vec<(&str, Vec<Option<f64>>)> = vec![
        ("auc", per_fold.iter().map(|f| f.auc).collect()),
        (
            "sensitivity",
            per_fold.iter().map(|f| f.metrics.sensitivity).collect(),
        ),
        (
            "specificity",
            per_fold.iter().map(|f| f.metrics.specificity).collect(),
        ),
        (
            "precision",
            per_fold.iter().map(|f| f.metrics.precision).collect(),
        ),
        (
            "accuracy",
            per_fold.iter().map(|f| f.metrics.accuracy).collect(),
        ),
        ("f1", per_fold.iter().map(|f| f.metrics.f1).collect()),
    ];
    for (name, values) in rows {
        if let (key, Some(stat)) = metric(name, values) {
            aggregate.insert(key, stat);
        }
    }
    Ok(Report {
        folds: per_fold.to_vec(),
        aggregate,
    })
}
