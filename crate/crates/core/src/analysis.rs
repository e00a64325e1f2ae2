//! Diagnostics over loss traces and evaluation reports: loss-reduction ratios,
//! per-class rank correlation, bias contributors, error-set overlap and
//! bucket accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bias_lab::EvalReport;

#[derive(Error, Debug, PartialEq)]
pub enum AnalysisError {
    #[error("need at least 2 checkpoints, trace has {0}")]
    TooFewCheckpoints(usize),
    #[error("checkpoint index {index} out of range for trace of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("correlation undefined: {0} has zero rank variance")]
    ConstantVector(&'static str),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("k={k} exceeds class count {classes}")]
    TooManyRequested { k: usize, classes: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("at most 6 error sets are supported, got {0}")]
    TooManySets(usize),
    #[error("all error sets are empty")]
    EmptyUnion,
    #[error("case `{0}` is not in the universe")]
    UnknownCase(String),
    #[error("report is missing case `{0}`")]
    MissingCase(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Threshold below which a validation-loss reduction is treated as zero.
pub const RATIO_EPSILON: f64 = 1e-9;

/// Losses recorded at one point of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Where in training the point was taken, e.g. `start` or `portion 3`.
    pub label: String,
    pub mean_train_loss: f64,
    pub mean_val_loss: f64,
    pub per_class_train_loss: Vec<f64>,
    pub per_class_val_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub checkpoints: Vec<LossPoint>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.checkpoints.first().map_or(0, |p| p.per_class_train_loss.len())
    }

    /// Checks the structural invariants: finite non-negative losses and a
    /// consistent class count.
    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes();
        for p in &self.checkpoints {
            if p.per_class_train_loss.len() != c || p.per_class_val_loss.len() != c {
                return Err(AnalysisError::InvalidTrace(format!(
                    "checkpoint `{}` has inconsistent class count",
                    p.label
                )));
            }
            let all = [p.mean_train_loss, p.mean_val_loss]
                .into_iter()
                .chain(p.per_class_train_loss.iter().copied())
                .chain(p.per_class_val_loss.iter().copied());
            for v in all {
                if !v.is_finite() || v < 0.0 {
                    return Err(AnalysisError::InvalidTrace(format!(
                        "checkpoint `{}` has loss {v}",
                        p.label
                    )));
                }
            }
        }
        Ok(())
    }

    fn point(&self, index: usize) -> Result<&LossPoint> {
        self.checkpoints.get(index).ok_or(AnalysisError::IndexOutOfRange {
            index,
            len: self.checkpoints.len(),
        })
    }
}

/// Train/val loss reduction between two consecutive checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEntry {
    pub from: usize,
    pub to: usize,
    pub train_reduction: f64,
    pub val_reduction: f64,
    /// `None` when the validation reduction is below [`RATIO_EPSILON`].
    pub ratio: Option<f64>,
    pub flagged: bool,
}

/// Signed ratio of train to val loss reduction for each consecutive pair.
pub fn loss_ratio_trace(trace: &LossTrace) -> Result<Vec<RatioEntry>> {
    if trace.len() < 2 {
        return Err(AnalysisError::TooFewCheckpoints(trace.len()));
    }
    Ok(trace
        .checkpoints
        .windows(2)
        .enumerate()
        .map(|(t, w)| {
            let dt = w[0].mean_train_loss - w[1].mean_train_loss;
            let dv = w[0].mean_val_loss - w[1].mean_val_loss;
            let flagged = dv.abs() < RATIO_EPSILON;
            RatioEntry {
                from: t,
                to: t + 1,
                train_reduction: dt,
                val_reduction: dv,
                ratio: (!flagged).then(|| dt / dv),
                flagged,
            }
        })
        .collect())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(format!(
            "{} vs {} values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(AnalysisError::TooFewClasses(x.len()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(AnalysisError::ConstantVector("first vector"));
    }
    if syy == 0.0 {
        return Err(AnalysisError::ConstantVector("second vector"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-class (train, val) loss reductions from checkpoint `t0` to `t1`.
pub fn per_class_reductions(trace: &LossTrace, t0: usize, t1: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, b) = (trace.point(t0)?, trace.point(t1)?);
    if a.per_class_train_loss.len() != b.per_class_train_loss.len()
        || a.per_class_val_loss.len() != a.per_class_train_loss.len()
        || b.per_class_val_loss.len() != b.per_class_train_loss.len()
    {
        return Err(AnalysisError::LengthMismatch(
            "per-class loss vectors differ in length".into(),
        ));
    }
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p - q).collect::<Vec<_>>();
    Ok((
        diff(&a.per_class_train_loss, &b.per_class_train_loss),
        diff(&a.per_class_val_loss, &b.per_class_val_loss),
    ))
}

/// Spearman's rho between per-class train and val loss reductions over `t0 -> t1`.
pub fn per_class_spearman(trace: &LossTrace, t0: usize, t1: usize) -> Result<f64> {
    let (train, val) = per_class_reductions(trace, t0, t1)?;
    if train.len() < 2 {
        return Err(AnalysisError::TooFewClasses(train.len()));
    }
    spearman(&train, &val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasContributor {
    pub class: usize,
    /// Train-loss reduction minus val-loss reduction.
    pub gap: f64,
    pub train_reduction: f64,
    pub val_reduction: f64,
}

/// Classes whose train-loss reduction most exceeds their val-loss reduction
/// over the whole trace (first to last checkpoint).
pub fn top_bias_contributors(trace: &LossTrace, k: usize) -> Result<Vec<BiasContributor>> {
    if trace.len() < 2 {
        return Err(AnalysisError::TooFewCheckpoints(trace.len()));
    }
    top_bias_contributors_between(trace, 0, trace.len() - 1, k)
}

pub fn top_bias_contributors_between(
    trace: &LossTrace,
    t0: usize,
    t1: usize,
    k: usize,
) -> Result<Vec<BiasContributor>> {
    let (train, val) = per_class_reductions(trace, t0, t1)?;
    rank_gaps(&train, &val, k)
}

/// Sorts classes by `train - val` descending (ties by class index) and keeps `k`.
pub fn rank_gaps(train: &[f64], val: &[f64], k: usize) -> Result<Vec<BiasContributor>> {
    if train.len() != val.len() {
        return Err(AnalysisError::LengthMismatch(format!(
            "{} vs {} classes",
            train.len(),
            val.len()
        )));
    }
    if k > train.len() {
        return Err(AnalysisError::TooManyRequested {
            k,
            classes: train.len(),
        });
    }
    let mut rows: Vec<BiasContributor> = train
        .iter()
        .zip(val)
        .enumerate()
        .map(|(class, (&t, &v))| BiasContributor {
            class,
            gap: t - v,
            train_reduction: t,
            val_reduction: v,
        })
        .collect();
    rows.sort_by(|a, b| b.gap.total_cmp(&a.gap).then(a.class.cmp(&b.class)));
    rows.truncate(k);
    Ok(rows)
}

/// Cases each sub-model answered incorrectly, over a shared universe.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorSets {
    pub universe: BTreeSet<String>,
    pub sets: Vec<BTreeSet<String>>,
}

impl ErrorSets {
    pub fn new(universe: BTreeSet<String>, sets: Vec<BTreeSet<String>>) -> Result<Self> {
        for s in &sets {
            if let Some(id) = s.iter().find(|id| !universe.contains(*id)) {
                return Err(AnalysisError::UnknownCase(id.clone()));
            }
        }
        Ok(Self { universe, sets })
    }

    /// Builds error sets from per-model evaluation reports; the universe is the
    /// first report's case ids and every report must cover exactly those cases.
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        let universe: BTreeSet<String> = reports
            .first()
            .map(|r| r.per_case_correct.keys().cloned().collect())
            .unwrap_or_default();
        let mut sets = Vec::with_capacity(reports.len());
        for r in reports {
            if let Some(id) = universe.iter().find(|id| !r.per_case_correct.contains_key(*id)) {
                return Err(AnalysisError::MissingCase(id.clone()));
            }
            let errs: BTreeSet<String> = r
                .per_case_correct
                .iter()
                .filter(|(_, ok)| !**ok)
                .map(|(id, _)| id.clone())
                .collect();
            sets.push(errs);
        }
        Self::new(universe, sets)
    }

    pub fn k(&self) -> usize {
        self.sets.len()
    }

    /// Number of error sets containing `id`.
    pub fn appearances(&self, id: &str) -> usize {
        self.sets.iter().filter(|s| s.contains(id)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Number of sub-model error sets containing the case.
    pub n: usize,
    pub count: usize,
    pub correct: usize,
    /// Fused-model accuracy; `None` for an empty bucket.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub buckets: Vec<Bucket>,
}

impl BucketReport {
    pub fn accuracy(&self, n: usize) -> Option<f64> {
        self.buckets.get(n).and_then(|b| b.accuracy)
    }
}

/// Fused-model accuracy grouped by how many sub-models got each case wrong.
pub fn bucket_accuracy(errs: &ErrorSets, fused: &EvalReport) -> Result<BucketReport> {
    let k = errs.k();
    let mut count = vec![0usize; k + 1];
    let mut correct = vec![0usize; k + 1];
    for id in &errs.universe {
        let ok = *fused
            .per_case_correct
            .get(id)
            .ok_or_else(|| AnalysisError::MissingCase(id.clone()))?;
        let n = errs.appearances(id);
        count[n] += 1;
        correct[n] += usize::from(ok);
    }
    let buckets = (0..=k)
        .map(|n| Bucket {
            n,
            count: count[n],
            correct: correct[n],
            accuracy: (count[n] > 0).then(|| correct[n] as f64 / count[n] as f64),
        })
        .collect();
    Ok(BucketReport { buckets })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VennEntry {
    /// Bit j set when sub-model j errs on the cases counted here.
    pub mask: u32,
    pub members: Vec<usize>,
    pub count: usize,
    pub fraction: f64,
}

pub const MAX_VENN_SETS: usize = 6;

/// Share of the error union falling in each membership signature. Every
/// non-zero mask is listed, including empty regions.
pub fn venn_fractions(errs: &ErrorSets) -> Result<Vec<VennEntry>> {
    let k = errs.k();
    if k > MAX_VENN_SETS {
        return Err(AnalysisError::TooManySets(k));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    let union: BTreeSet<&String> = errs.sets.iter().flatten().collect();
    if union.is_empty() {
        return Err(AnalysisError::EmptyUnion);
    }
    for id in &union {
        let mask = errs
            .sets
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(*id))
            .fold(0u32, |m, (j, _)| m | 1 << j);
        *counts.entry(mask).or_default() += 1;
    }
    let total = union.len() as f64;
    Ok((1u32..1 << k)
        .map(|mask| {
            let count = counts.get(&mask).copied().unwrap_or(0);
            VennEntry {
                mask,
                members: (0..k).filter(|j| mask & (1 << j) != 0).collect(),
                count,
                fraction: count as f64 / total,
            }
        })
        .collect())
}

pub fn loss_ratio_csv(entries: &[RatioEntry]) -> String {
    let mut s = String::from("from,to,train_reduction,val_reduction,ratio,flagged\n");
    for e in entries {
        let ratio = e.ratio.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.from, e.to, e.train_reduction, e.val_reduction, ratio, e.flagged
        );
    }
    s
}

pub fn reductions_csv(train: &[f64], val: &[f64]) -> String {
    let mut s = String::from("class,train_reduction,val_reduction\n");
    for (c, (t, v)) in train.iter().zip(val).enumerate() {
        let _ = writeln!(s, "{c},{t},{v}");
    }
    s
}

pub fn contributors_csv(rows: &[BiasContributor]) -> String {
    let mut s = String::from("class,gap,train_reduction,val_reduction\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.class, r.gap, r.train_reduction, r.val_reduction);
    }
    s
}

pub fn venn_csv(entries: &[VennEntry]) -> String {
    let mut s = String::from("mask,members,count,fraction\n");
    for e in entries {
        let members: Vec<String> = e.members.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(s, "{},{},{},{}", e.mask, members.join(" "), e.count, e.fraction);
    }
    s
}

pub fn buckets_csv(report: &BucketReport) -> String {
    let mut s = String::from("n,count,correct,accuracy\n");
    for b in &report.buckets {
        let acc = b.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", b.n, b.count, b.correct, acc);
    }
    s
}
