//! Stratified k-fold cross-validation and confusion-matrix metrics.
//!
//! HPT is the positive class. Metrics come from the pooled matrix (sum of the
//! per-fold test matrices). A metric whose denominator is zero is undefined
//! and is rendered as `n/a`, never as 0 or NaN.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::par;
use crate::tree::{self, TreeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_folds: usize,
    pub shuffle_seed: u64,
    pub stratified: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_folds: 5,
            shuffle_seed: 42,
            stratified: true,
        }
    }
}

/// Test-fold index sets, each sorted ascending.
pub fn make_folds(labels: &[ClassLabel], config: &EvalConfig) -> Result<Vec<Vec<usize>>> {
    let k = config.k_folds;
    if k < 2 {
        return Err(Error::Config(format!("eval.k_folds must be at least 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let groups: Vec<Vec<usize>> = if config.stratified {
        ClassLabel::ALL
            .iter()
            .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect::<Vec<_>>())
            .collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    for (g, members) in groups.iter().enumerate() {
        if members.len() < k {
            let what = if config.stratified {
                format!("class {} has {} samples", ClassLabel::ALL[g], members.len())
            } else {
                format!("dataset has {} samples", members.len())
            };
            return Err(Error::Input(format!("{k}-fold cross-validation impossible: {what}")));
        }
    }
    let mut folds = vec![Vec::new(); k];
    let mut pos = 0usize;
    for mut members in groups {
        members.shuffle(&mut rng);
        for i in members {
            folds[pos % k].push(i);
            pos += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fn_: u64, tn: u64, fp: u64) -> Self {
        Self { tp, fn_, tn, fp }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn record(&mut self, predicted: ClassLabel, truth: ClassLabel) {
        match (truth, predicted) {
            (ClassLabel::Hpt, ClassLabel::Hpt) => self.tp += 1,
            (ClassLabel::Hpt, ClassLabel::Normal) => self.fn_ += 1,
            (ClassLabel::Normal, ClassLabel::Normal) => self.tn += 1,
            (ClassLabel::Normal, ClassLabel::Hpt) => self.fp += 1,
        }
    }

    /// The same counts with Normal treated as the positive class.
    pub fn flipped(&self) -> Self {
        Self::new(self.tn, self.fp, self.tp, self.fn_)
    }

    /// 2×2 table, rows actual, columns predicted.
    pub fn render(&self) -> String {
        format!(
            "{:<14}{:>15}{:>18}\n{:<14}{:>15}{:>18}\n{:<14}{:>15}{:>18}\n",
            "",
            "predicted HPT",
            "predicted Normal",
            "actual HPT",
            self.tp,
            self.fn_,
            "actual Normal",
            self.fp,
            self.tn
        )
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fn_ + o.fn_, self.tn + o.tn, self.fp + o.fp)
    }
}

pub fn confusion(predictions: &[ClassLabel], truths: &[ClassLabel]) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} ground-truth labels",
            predictions.len(),
            truths.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        cm.record(p, t);
    }
    Ok(cm)
}

/// A metric value in [0, 1], or undefined when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric(pub Option<f64>);

impl Metric {
    fn ratio(num: u64, den: u64) -> Self {
        Metric((den > 0).then(|| num as f64 / den as f64))
    }

    pub fn value(self) -> Option<f64> {
        self.0
    }

    pub fn percent(self) -> Option<f64> {
        self.0.map(|v| 100.0 * v)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.percent() {
            Some(p) => write!(f, "{p:.4}"),
            None => f.write_str("n/a"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("n/a"),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Metric(Some(v))),
            Raw::Text(t) if t == "n/a" => Ok(Metric(None)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad metric {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: Metric,
    pub rec: Metric,
    pub spe: Metric,
    pub pre: Metric,
    pub f1: Metric,
}

impl MetricsReport {
    pub const NAMES: [&'static str; 5] = ["Acc", "Rec", "Spe", "Pre", "F1"];

    pub fn values(&self) -> [Metric; 5] {
        [self.acc, self.rec, self.spe, self.pre, self.f1]
    }
}

/// Accuracy, recall, specificity, precision and F1 from one matrix.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let acc = Metric::ratio(cm.tp + cm.tn, cm.total());
    let rec = Metric::ratio(cm.tp, cm.tp + cm.fn_);
    let spe = Metric::ratio(cm.tn, cm.tn + cm.fp);
    let pre = Metric::ratio(cm.tp, cm.tp + cm.fp);
    let f1 = match (pre.0, rec.0) {
        (Some(p), Some(r)) if p + r > 0.0 => Metric(Some(2.0 * p * r / (p + r))),
        _ => Metric(None),
    };
    MetricsReport { acc, rec, spe, pre, f1 }
}

/// Acc/Rec/Spe/Pre/F1 listing, one labelled row per report.
pub fn render_metrics_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<width$}", "");
    for n in MetricsReport::NAMES {
        out.push_str(&format!("{n:>10}"));
    }
    out.push('\n');
    for (label, m) in rows {
        out.push_str(&format!("{label:<width$}"));
        for v in m.values() {
            out.push_str(&format!("{:>10}", v.to_string()));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k_folds: usize,
    pub seed: u64,
    pub stratified: bool,
    pub fold_sizes: Vec<usize>,
    pub folds: Vec<ConfusionMatrix>,
    pub pooled: ConfusionMatrix,
    pub metrics: MetricsReport,
}

/// Trains on k-1 folds and tests on the held-out fold, for every fold.
/// Folds run on up to `workers` threads; results are collected in fold order.
pub fn cross_validate(
    rows: &[Vec<f64>],
    labels: &[ClassLabel],
    tree_config: &TreeConfig,
    config: &EvalConfig,
    workers: usize,
) -> Result<CvReport> {
    tree_config.validate()?;
    if rows.len() != labels.len() {
        return Err(Error::Input(format!("{} rows vs {} labels", rows.len(), labels.len())));
    }
    let folds = make_folds(labels, config)?;
    let mut fold_of = vec![0usize; rows.len()];
    for (f, members) in folds.iter().enumerate() {
        for &i in members {
            fold_of[i] = f;
        }
    }
    let fold_ids: Vec<usize> = (0..folds.len()).collect();
    let per_fold = par::try_map_ordered(&fold_ids, workers, |&f| {
        let (train_x, train_y): (Vec<Vec<f64>>, Vec<ClassLabel>) = (0..rows.len())
            .filter(|&i| fold_of[i] != f)
            .map(|i| (rows[i].clone(), labels[i]))
            .unzip();
        let model = tree::fit(&train_x, &train_y, tree_config)?;
        let mut cm = ConfusionMatrix::default();
        for &i in &folds[f] {
            cm.record(model.predict(&rows[i])?.0, labels[i]);
        }
        Ok(cm)
    })?;
    let pooled = per_fold.iter().fold(ConfusionMatrix::default(), |a, &b| a + b);
    if pooled.total() != rows.len() as u64 {
        return Err(Error::Invariant(format!(
            "pooled matrix covers {} of {} samples",
            pooled.total(),
            rows.len()
        )));
    }
    Ok(CvReport {
        k_folds: config.k_folds,
        seed: config.shuffle_seed,
        stratified: config.stratified,
        fold_sizes: folds.iter().map(Vec::len).collect(),
        folds: per_fold,
        pooled,
        metrics: metrics(&pooled),
    })
}
