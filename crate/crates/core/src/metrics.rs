//! GLUE evaluation metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::average_ranks;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// QNLI, SST-2, RTE.
    Accuracy,
    /// MRPC, QQP; positive class is label 1.
    F1,
    /// CoLA.
    Matthews,
    /// STS-B.
    Spearman,
    /// MNLI matched / mismatched.
    MatchedMismatchedAccuracy,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1 => "f1",
            MetricKind::Matthews => "matthews",
            MetricKind::Spearman => "spearman",
            MetricKind::MatchedMismatchedAccuracy => "matched_mismatched_accuracy",
        }
    }

    pub fn is_regression(self) -> bool {
        self == MetricKind::Spearman
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            MetricKind::Accuracy,
            MetricKind::F1,
            MetricKind::Matthews,
            MetricKind::Spearman,
            MetricKind::MatchedMismatchedAccuracy,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown metric `{s}`")))
    }
}

/// A metric result; MNLI-style metrics report two accuracies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Single(f64),
    Pair { matched: f64, mismatched: f64 },
}

impl MetricValue {
    /// Scalar used for model selection: the value itself, or the mean of a pair.
    pub fn score(&self) -> f64 {
        match *self {
            MetricValue::Single(v) => v,
            MetricValue::Pair { matched, mismatched } => (matched + mismatched) / 2.0,
        }
    }
}

/// Model outputs in the form a metric consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictions<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

/// Gold labels. `partitions` flags matched (`true`) / mismatched (`false`)
/// examples and is required only by [`MetricKind::MatchedMismatchedAccuracy`].
#[derive(Clone, Debug, PartialEq)]
pub enum Labels<'a> {
    Classes {
        labels: &'a [usize],
        partitions: Option<&'a [bool]>,
    },
    Values(&'a [f64]),
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

struct Confusion {
    tp: f64,
    tn: f64,
    fp: f64,
    fn_: f64,
}

fn confusion(preds: &[usize], labels: &[usize]) -> Confusion {
    let mut c = Confusion {
        tp: 0.0,
        tn: 0.0,
        fp: 0.0,
        fn_: 0.0,
    };
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => c.tp += 1.0,
            (false, false) => c.tn += 1.0,
            (true, false) => c.fp += 1.0,
            (false, true) => c.fn_ += 1.0,
        }
    }
    c
}

/// F1 of the positive class (label 1). Zero when there are no true positives.
pub fn f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let c = confusion(preds, labels);
    let denom = 2.0 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0.0 { 0.0 } else { 2.0 * c.tp / denom })
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn matthews(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let c = confusion(preds, labels);
    let denom = ((c.tp + c.fp) * (c.tp + c.fn_) * (c.tn + c.fp) * (c.tn + c.fn_)).sqrt();
    Ok(if denom == 0.0 {
        0.0
    } else {
        (c.tp * c.tn - c.fp * c.fn_) / denom
    })
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len())?;
    let rx = average_ranks(x)?;
    let ry = average_ranks(y)?;
    pearson(&rx, &ry).ok_or(Error::UndefinedMetric("spearman correlation with zero rank variance"))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 || b == 0 {
        return Err(Error::Empty("metric inputs"));
    }
    if a != b {
        return Err(Error::shape("metric", format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

pub fn evaluate_metric(kind: MetricKind, predictions: &Predictions<'_>, labels: &Labels<'_>) -> Result<MetricValue> {
    let mismatch = || {
        Error::InvalidArgument(format!(
            "{kind} cannot be computed from these prediction/label types"
        ))
    };
    match (kind, predictions, labels) {
        (MetricKind::Spearman, Predictions::Values(p), Labels::Values(l)) => spearman(p, l).map(MetricValue::Single),
        (MetricKind::Spearman, ..) => Err(mismatch()),
        (_, Predictions::Classes(p), Labels::Classes { labels: l, partitions }) => match kind {
            MetricKind::Accuracy => accuracy(p, l).map(MetricValue::Single),
            MetricKind::F1 => f1(p, l).map(MetricValue::Single),
            MetricKind::Matthews => matthews(p, l).map(MetricValue::Single),
            MetricKind::MatchedMismatchedAccuracy => {
                let parts = partitions.ok_or_else(|| {
                    Error::InvalidArgument("matched/mismatched accuracy needs partition flags".into())
                })?;
                check_lengths(p.len(), parts.len())?;
                let split = |want: bool| -> Result<f64> {
                    let (pp, ll): (Vec<usize>, Vec<usize>) = p
                        .iter()
                        .zip(l.iter())
                        .zip(parts.iter())
                        .filter(|(_, &m)| m == want)
                        .map(|((a, b), _)| (*a, *b))
                        .unzip();
                    accuracy(&pp, &ll)
                };
                Ok(MetricValue::Pair {
                    matched: split(true)?,
                    mismatched: split(false)?,
                })
            }
            MetricKind::Spearman => unreachable!(),
        },
        _ => Err(mismatch()),
    }
}
