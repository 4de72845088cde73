//! Evaluation of predicted label sets against gold annotations: confusion
//! counts, precision/recall/F-score/accuracy, multi-run boxplot statistics
//! and the sentence-versus-paragraph granularity comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::parse_lines;

pub type LabelSet = BTreeSet<String>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions and gold cover different units (missing predictions: {missing_pred:?}, missing gold: {missing_gold:?})")]
    UnitMismatch {
        missing_pred: Vec<String>,
        missing_gold: Vec<String>,
    },
    #[error("{path}: duplicate unit {unit}")]
    DuplicateUnit { path: String, unit: String },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("{0}")]
    Io(String),
    #[error("aggregating runs needs at least one report")]
    NoRuns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Predicted set equals the gold set.
    #[default]
    Exact,
    /// The sets intersect, or both are empty.
    AnyOverlap,
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(MatchMode::Exact),
            "overlap" | "any_overlap" | "any-overlap" => Ok(MatchMode::AnyOverlap),
            other => Err(format!("unknown match mode {other:?} (expected exact or overlap)")),
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMode::Exact => "exact",
            MatchMode::AnyOverlap => "any_overlap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    PerLabel,
    #[default]
    Micro,
    Macro,
}

impl FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "micro" => Ok(Averaging::Micro),
            "macro" => Ok(Averaging::Macro),
            "per-label" | "per_label" => Ok(Averaging::PerLabel),
            other => Err(format!("unknown averaging {other:?} (expected micro, macro or per-label)")),
        }
    }
}

pub fn match_mode(predicted: &LabelSet, gold: &LabelSet, mode: MatchMode) -> bool {
    match mode {
        MatchMode::Exact => predicted == gold,
        MatchMode::AnyOverlap => {
            (predicted.is_empty() && gold.is_empty()) || predicted.intersection(gold).next().is_some()
        }
    }
}

// ---------------------------------------------------------------------------
// input records

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    #[serde(alias = "unit", alias = "prov_id", alias = "passage_ref")]
    pub unit_ref: String,
    #[serde(alias = "labels", alias = "rule_ids")]
    pub gold_labels: LabelSet,
    #[serde(default)]
    pub split: String,
}

/// One unit's predicted labels. Reads classification records, compliance
/// findings, or plain `{unit_ref, labels}` lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredRecord {
    #[serde(alias = "unit", alias = "prov_id", alias = "passage_ref")]
    pub unit_ref: String,
    #[serde(alias = "rule_ids")]
    pub labels: LabelSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredSource {
    Records,
    ComplianceReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub units: BTreeMap<String, LabelSet>,
    pub parse_failures: usize,
}

fn read(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}

fn lines<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>, EvalError> {
    parse_lines(text)
        .map(|v| v.into_iter().map(|(_, r)| r).collect())
        .map_err(|(line, e)| EvalError::Format {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })
}

pub fn parse_gold(path: &Path, text: &str) -> Result<Vec<GoldRecord>, EvalError> {
    let records: Vec<GoldRecord> = lines(path, text)?;
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(r.unit_ref.as_str()) {
            return Err(EvalError::DuplicateUnit {
                path: path.display().to_string(),
                unit: r.unit_ref.clone(),
            });
        }
    }
    Ok(records)
}

pub fn load_gold(path: &Path) -> Result<Vec<GoldRecord>, EvalError> {
    parse_gold(path, &read(path)?)
}

#[derive(Deserialize)]
struct ReportFindings {
    findings: Vec<PredRecord>,
}

/// A file holding a single JSON object with a `findings` array is read as a
/// compliance report; anything else as line-delimited prediction records.
pub fn parse_predictions(path: &Path, text: &str) -> Result<(Predictions, PredSource), EvalError> {
    let (records, source) = match serde_json::from_str::<ReportFindings>(text) {
        Ok(r) => (r.findings, PredSource::ComplianceReport),
        Err(_) => (lines::<PredRecord>(path, text)?, PredSource::Records),
    };
    let mut preds = Predictions::default();
    for r in records {
        preds.parse_failures += usize::from(r.parse_error.is_some());
        if preds.units.insert(r.unit_ref.clone(), r.labels).is_some() {
            return Err(EvalError::DuplicateUnit {
                path: path.display().to_string(),
                unit: r.unit_ref,
            });
        }
    }
    Ok((preds, source))
}

pub fn load_predictions(path: &Path) -> Result<(Predictions, PredSource), EvalError> {
    parse_predictions(path, &read(path)?)
}

// ---------------------------------------------------------------------------
// confusion counts

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub units: usize,
    pub labels: BTreeMap<String, LabelCounts>,
    /// Units whose predicted set equals the gold set.
    pub exact_correct: usize,
    /// Units whose sets intersect or are both empty.
    pub overlap_correct: usize,
}

/// Per-label counts over the units of `gold`. The label universe is every
/// label seen in either side plus `extra_labels` (e.g. a full ruleset, so
/// rules never mentioned still count their true negatives).
pub fn confusion(
    predicted: &BTreeMap<String, LabelSet>,
    gold: &[GoldRecord],
    extra_labels: &[String],
) -> Result<ConfusionCounts, EvalError> {
    let gold_units: BTreeSet<&str> = gold.iter().map(|g| g.unit_ref.as_str()).collect();
    let missing_pred: Vec<String> = gold_units
        .iter()
        .filter(|u| !predicted.contains_key(**u))
        .map(|u| u.to_string())
        .collect();
    let missing_gold: Vec<String> = predicted
        .keys()
        .filter(|u| !gold_units.contains(u.as_str()))
        .cloned()
        .collect();
    if !missing_pred.is_empty() || !missing_gold.is_empty() {
        return Err(EvalError::UnitMismatch {
            missing_pred,
            missing_gold,
        });
    }

    let mut universe: BTreeSet<&str> = extra_labels.iter().map(String::as_str).collect();
    for g in gold {
        universe.extend(g.gold_labels.iter().map(String::as_str));
    }
    for p in predicted.values() {
        universe.extend(p.iter().map(String::as_str));
    }

    let mut c = ConfusionCounts {
        units: gold.len(),
        labels: universe.iter().map(|l| (l.to_string(), LabelCounts::default())).collect(),
        ..Default::default()
    };
    for g in gold {
        let p = &predicted[&g.unit_ref];
        c.exact_correct += usize::from(match_mode(p, &g.gold_labels, MatchMode::Exact));
        c.overlap_correct += usize::from(match_mode(p, &g.gold_labels, MatchMode::AnyOverlap));
        for (label, counts) in c.labels.iter_mut() {
            match (p.contains(label), g.gold_labels.contains(label)) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(c)
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl Scores {
    pub fn from_counts(c: &LabelCounts) -> Scores {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        Scores {
            precision,
            recall,
            f1: f1(precision, recall),
            accuracy: ratio(c.tp + c.tn, c.total()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    #[serde(flatten)]
    pub counts: LabelCounts,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub units: usize,
    pub averaging: Averaging,
    pub match_mode: MatchMode,
    /// Fraction of units judged correct under `match_mode`.
    pub accuracy: f64,
    pub subset_accuracy: f64,
    pub overlap_accuracy: f64,
    /// Mean over labels of (TP+TN)/units.
    pub label_accuracy: f64,
    pub micro: Scores,
    pub macro_avg: Scores,
    pub per_label: BTreeMap<String, LabelMetrics>,
    pub parse_failure_count: usize,
}

impl MetricsReport {
    /// Precision, recall and F1 under the report's averaging; per-label
    /// reports have no single headline and fall back to micro.
    pub fn headline(&self) -> Scores {
        match self.averaging {
            Averaging::Macro => self.macro_avg,
            Averaging::Micro | Averaging::PerLabel => self.micro,
        }
    }

    /// The scalar metrics that multi-run aggregation tracks.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        let h = self.headline();
        vec![
            ("accuracy", self.accuracy),
            ("precision", h.precision),
            ("recall", h.recall),
            ("f1", h.f1),
        ]
    }
}

pub fn metrics(c: &ConfusionCounts, averaging: Averaging, mode: MatchMode, parse_failures: usize) -> MetricsReport {
    let per_label: BTreeMap<String, LabelMetrics> = c
        .labels
        .iter()
        .map(|(l, counts)| {
            (
                l.clone(),
                LabelMetrics {
                    counts: *counts,
                    scores: Scores::from_counts(counts),
                },
            )
        })
        .collect();

    let pooled = c.labels.values().fold(LabelCounts::default(), |a, b| LabelCounts {
        tp: a.tp + b.tp,
        fp: a.fp + b.fp,
        fn_: a.fn_ + b.fn_,
        tn: a.tn + b.tn,
    });
    let micro = Scores::from_counts(&pooled);

    let n = per_label.len();
    let mean = |f: fn(&Scores) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_label.values().map(|m| f(&m.scores)).sum::<f64>() / n as f64
        }
    };
    let macro_avg = Scores {
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
        accuracy: mean(|s| s.accuracy),
    };

    let subset_accuracy = ratio(c.exact_correct, c.units);
    let overlap_accuracy = ratio(c.overlap_correct, c.units);
    MetricsReport {
        units: c.units,
        averaging,
        match_mode: mode,
        accuracy: match mode {
            MatchMode::Exact => subset_accuracy,
            MatchMode::AnyOverlap => overlap_accuracy,
        },
        subset_accuracy,
        overlap_accuracy,
        label_accuracy: macro_avg.accuracy,
        micro,
        macro_avg,
        per_label,
        parse_failure_count: parse_failures,
    }
}

pub fn evaluate(
    preds: &Predictions,
    gold: &[GoldRecord],
    extra_labels: &[String],
    averaging: Averaging,
    mode: MatchMode,
) -> Result<MetricsReport, EvalError> {
    let c = confusion(&preds.units, gold, extra_labels)?;
    Ok(metrics(&c, averaging, mode, preds.parse_failures))
}

// ---------------------------------------------------------------------------
// multi-run aggregation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    /// Most extreme observations within 1.5 IQR of the quartiles.
    pub lower_whisker: f64,
    pub upper_whisker: f64,
}

/// Quantile by linear interpolation between closest ranks: position
/// `(n - 1) * p` in the sorted sample.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Boxplot statistics of a non-empty sample.
pub fn box_stats(values: &[f64]) -> BoxStats {
    assert!(!values.is_empty(), "box_stats of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile(&v, 0.25);
    let q3 = quantile(&v, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    BoxStats {
        // summing in sorted order keeps the mean independent of run order
        mean: v.iter().sum::<f64>() / v.len() as f64,
        median: quantile(&v, 0.5),
        q1,
        q3,
        min: v[0],
        max: v[v.len() - 1],
        lower_whisker: v.iter().copied().find(|x| *x >= lo_fence).unwrap_or(v[0]),
        upper_whisker: v.iter().rev().copied().find(|x| *x <= hi_fence).unwrap_or(v[v.len() - 1]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub metrics: IndexMap<String, BoxStats>,
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<RunAggregate, EvalError> {
    let first = reports.first().ok_or(EvalError::NoRuns)?;
    let metrics = first
        .scalars()
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let values: Vec<f64> = reports.iter().map(|r| r.scalars()[i].1).collect();
            (name.to_string(), box_stats(&values))
        })
        .collect();
    Ok(RunAggregate {
        runs: reports.len(),
        metrics,
    })
}

/// Tab-separated boxplot table, one metric per row.
pub fn render_box_table(agg: &RunAggregate) -> String {
    let mut out = String::from("metric\tmean\tmedian\tq1\tq3\tmin\tmax\tlower_whisker\tupper_whisker\n");
    for (name, s) in &agg.metrics {
        out.push_str(&format!(
            "{name}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            s.mean, s.median, s.q1, s.q3, s.min, s.max, s.lower_whisker, s.upper_whisker
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// granularity comparison

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Improved,
    Unchanged,
    Worsened,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityDelta {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub model: String,
    pub sentence: f64,
    pub paragraph: f64,
    /// `paragraph - sentence`, rounded to nine decimals so that accuracies
    /// given to two places yield exact two-place deltas.
    pub delta: f64,
    pub direction: Direction,
}

pub fn compare_granularity(sentence_acc: f64, paragraph_acc: f64) -> GranularityDelta {
    let delta = ((paragraph_acc - sentence_acc) * 1e9).round() / 1e9;
    let direction = if delta > 0.0 {
        Direction::Improved
    } else if delta < 0.0 {
        Direction::Worsened
    } else {
        Direction::Unchanged
    };
    GranularityDelta {
        model: String::new(),
        sentence: sentence_acc,
        paragraph: paragraph_acc,
        delta: if delta == 0.0 { 0.0 } else { delta },
        direction,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityComparison {
    pub models: Vec<GranularityDelta>,
    /// Unrounded mean of the per-model deltas.
    pub mean_delta: f64,
}

pub fn compare_granularity_batch<'a>(
    runs: impl IntoIterator<Item = (&'a str, f64, f64)>,
) -> GranularityComparison {
    let models: Vec<GranularityDelta> = runs
        .into_iter()
        .map(|(model, s, p)| GranularityDelta {
            model: model.to_string(),
            ..compare_granularity(s, p)
        })
        .collect();
    let mean_delta = if models.is_empty() {
        0.0
    } else {
        models.iter().map(|m| m.delta).sum::<f64>() / models.len() as f64
    };
    GranularityComparison { models, mean_delta }
}
