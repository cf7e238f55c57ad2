//! Binary Gini decision tree (CART-style, axis-aligned, midpoint thresholds).
//!
//! Candidate splits are ranked with exact integer arithmetic, so ties are
//! real ties and the documented tie-break (lowest feature, then lowest
//! threshold) is reproducible everywhere. An impure node splits on its best
//! candidate even when the impurity decrease is zero; that is what lets the
//! tree separate XOR-like layouts where no single cut helps.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};

pub const MODEL_SCHEMA: &str = "hptscreen-tree/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Impurity {
    Gini,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    /// `None` grows until leaves are pure or unsplittable.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub impurity: Impurity,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            impurity: Impurity::Gini,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_samples_leaf < 1 {
            return Err(Error::Config("tree.min_samples_leaf must be at least 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(Error::Config("tree.min_samples_split must be at least 2".into()));
        }
        if self.max_depth == Some(0) {
            return Err(Error::Config("tree.max_depth must be at least 1 when set".into()));
        }
        Ok(())
    }
}

/// 1 - Σ (n_c / n)².
pub fn gini(counts: &[usize]) -> Result<f64> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::Input("gini impurity of an empty node".into()));
    }
    let n = n as f64;
    Ok(1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// Parent impurity minus the size-weighted child impurity.
    pub decrease: f64,
}

/// Σ_children (a² + b²) / n_child as an exact fraction. Larger is purer.
#[derive(Debug, Clone, Copy)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn of(left: [usize; 2], right: [usize; 2]) -> Self {
        let sq = |c: [usize; 2]| (c[0] as u128).pow(2) + (c[1] as u128).pow(2);
        let nl = (left[0] + left[1]) as u128;
        let nr = (right[0] + right[1]) as u128;
        Purity {
            num: sq(left) * nr + sq(right) * nl,
            den: nl * nr,
        }
    }

    fn cmp(&self, other: &Purity) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

fn class_counts(labels: &[ClassLabel], idx: &[usize]) -> [usize; 2] {
    let mut c = [0usize; 2];
    for &i in idx {
        c[labels[i].index()] += 1;
    }
    c
}

fn decrease(parent: [usize; 2], left: [usize; 2]) -> f64 {
    let right = [parent[0] - left[0], parent[1] - left[1]];
    let n = (parent[0] + parent[1]) as f64;
    let nl = (left[0] + left[1]) as f64;
    let nr = (right[0] + right[1]) as f64;
    gini(&parent).unwrap_or(0.0) - (nl / n) * gini(&left).unwrap_or(0.0) - (nr / n) * gini(&right).unwrap_or(0.0)
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = 0.5 * (lo + hi);
    if mid >= lo && mid < hi {
        mid
    } else {
        lo
    }
}

/// Best split of the rows in `idx`; `None` when the node is pure or no cut
/// respects `min_samples_leaf`.
fn best_split_idx(
    rows: &[Vec<f64>],
    labels: &[ClassLabel],
    idx: &[usize],
    n_features: usize,
    min_leaf: usize,
) -> Option<Split> {
    let parent = class_counts(labels, idx);
    let n = idx.len();
    if parent[0] == 0 || parent[1] == 0 || n < 2 * min_leaf {
        return None;
    }
    let mut best: Option<(Purity, usize, f64, [usize; 2])> = None;
    let mut order = idx.to_vec();
    for f in 0..n_features {
        order.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]));
        let mut left = [0usize; 2];
        for pos in 1..n {
            left[labels[order[pos - 1]].index()] += 1;
            if pos < min_leaf || n - pos < min_leaf {
                continue;
            }
            let lo = rows[order[pos - 1]][f];
            let hi = rows[order[pos]][f];
            if lo == hi {
                continue;
            }
            let right = [parent[0] - left[0], parent[1] - left[1]];
            let p = Purity::of(left, right);
            if best.as_ref().is_none_or(|(b, ..)| p.cmp(b) == Ordering::Greater) {
                best = Some((p, f, midpoint(lo, hi), left));
            }
        }
    }
    best.map(|(_, feature, threshold, left)| Split {
        feature,
        threshold,
        decrease: decrease(parent, left),
    })
}

fn check_rows(rows: &[Vec<f64>], labels: &[ClassLabel]) -> Result<usize> {
    if rows.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if rows.len() != labels.len() {
        return Err(Error::Input(format!("{} rows vs {} labels", rows.len(), labels.len())));
    }
    let width = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::Input(format!("row {i} has {} features, expected {width}", r.len())));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite feature {j} in row {i}")));
        }
    }
    Ok(width)
}

/// Exhaustive best split over all rows.
pub fn best_split(rows: &[Vec<f64>], labels: &[ClassLabel], config: &TreeConfig) -> Result<Option<Split>> {
    let width = check_rows(rows, labels)?;
    if rows.len() < config.min_samples_split {
        return Ok(None);
    }
    let idx: Vec<usize> = (0..rows.len()).collect();
    Ok(best_split_idx(rows, labels, &idx, width, config.min_samples_leaf))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        label: ClassLabel,
        /// Indexed by class ordinal (HPT, Normal).
        probabilities: [f64; 2],
        counts: [usize; 2],
    },
}

fn leaf(counts: [usize; 2]) -> Node {
    let n = (counts[0] + counts[1]) as f64;
    let label = if counts[1] > counts[0] {
        ClassLabel::Normal
    } else {
        ClassLabel::Hpt
    };
    Node::Leaf {
        label,
        probabilities: [counts[0] as f64 / n, counts[1] as f64 / n],
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub schema: String,
    pub n_features: usize,
    pub root: usize,
    pub nodes: Vec<Node>,
}

pub fn fit(rows: &[Vec<f64>], labels: &[ClassLabel], config: &TreeConfig) -> Result<TreeModel> {
    config.validate()?;
    let width = check_rows(rows, labels)?;
    let placeholder = Node::Leaf {
        label: ClassLabel::Hpt,
        probabilities: [1.0, 0.0],
        counts: [0, 0],
    };
    let mut nodes = vec![placeholder.clone()];
    let mut stack = vec![(0usize, (0..rows.len()).collect::<Vec<_>>(), 0usize)];
    while let Some((slot, idx, depth)) = stack.pop() {
        let counts = class_counts(labels, &idx);
        let stop = counts[0] == 0
            || counts[1] == 0
            || idx.len() < config.min_samples_split
            || config.max_depth.is_some_and(|d| depth >= d);
        let split = if stop {
            None
        } else {
            best_split_idx(rows, labels, &idx, width, config.min_samples_leaf)
        };
        let Some(split) = split else {
            nodes[slot] = leaf(counts);
            continue;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| rows[i][split.feature] <= split.threshold);
        let left = nodes.len();
        nodes.push(placeholder.clone());
        let right = nodes.len();
        nodes.push(placeholder.clone());
        nodes[slot] = Node::Internal {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        stack.push((right, right_idx, depth + 1));
        stack.push((left, left_idx, depth + 1));
    }
    Ok(TreeModel {
        schema: MODEL_SCHEMA.to_string(),
        n_features: width,
        root: 0,
        nodes,
    })
}

impl TreeModel {
    /// Descends from the root, going left iff value <= threshold.
    pub fn predict(&self, features: &[f64]) -> Result<(ClassLabel, [f64; 2])> {
        if features.len() != self.n_features {
            return Err(Error::Input(format!(
                "feature vector has {} values, model expects {}",
                features.len(),
                self.n_features
            )));
        }
        let mut at = self.root;
        loop {
            match self.nodes.get(at) {
                Some(Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                }) => at = if features[*feature] <= *threshold { *left } else { *right },
                Some(Node::Leaf {
                    label, probabilities, ..
                }) => return Ok((*label, *probabilities)),
                None => return Err(Error::Invariant(format!("tree node {at} out of range"))),
            }
        }
    }

    pub fn depth(&self) -> usize {
        let mut max = 0;
        let mut stack = vec![(self.root, 0usize)];
        while let Some((at, d)) = stack.pop() {
            max = max.max(d);
            if let Some(Node::Internal { left, right, .. }) = self.nodes.get(at) {
                stack.push((*left, d + 1));
                stack.push((*right, d + 1));
            }
        }
        max
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Structural checks: every node reachable exactly once, children in
    /// range, leaf distributions normalized.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(at) = stack.pop() {
            let Some(node) = self.nodes.get(at) else {
                return Err(Error::Invariant(format!("node {at} out of range")));
            };
            if std::mem::replace(&mut seen[at], true) {
                return Err(Error::Invariant(format!("node {at} reached twice")));
            }
            match node {
                Node::Internal {
                    feature, left, right, ..
                } => {
                    if *feature >= self.n_features {
                        return Err(Error::Invariant(format!("node {at} splits on feature {feature}")));
                    }
                    stack.push(*left);
                    stack.push(*right);
                }
                Node::Leaf { probabilities, .. } => {
                    let sum: f64 = probabilities.iter().sum();
                    if probabilities.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                        return Err(Error::Invariant(format!("leaf {at} probabilities {probabilities:?}")));
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invariant("unreachable tree nodes".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: TreeModel =
            serde_json::from_str(text).map_err(|e| Error::Input(format!("malformed tree document: {e}")))?;
        if model.schema != MODEL_SCHEMA {
            return Err(Error::Input(format!("unsupported tree schema {:?}", model.schema)));
        }
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::data(path, "document", e.to_string()))
    }
}
