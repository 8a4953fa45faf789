use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How each predicted label is scored: as a true label, or as nothing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelAlignment {
    pub mapping: BTreeMap<String, Option<String>>,
}

/// Rule used by [`align_labels`], as printed in report headers.
pub const ALIGNMENT_RULE: &str =
    "greedy: known and true labels fixed; other labels matched to unclaimed true labels by descending overlap, ties lexicographic";

impl LabelAlignment {
    pub fn get(&self, predicted: &str) -> Option<&str> {
        self.mapping.get(predicted).and_then(|t| t.as_deref())
    }

    pub fn apply<'a>(&'a self, pred: &'a [String]) -> Vec<Option<&'a str>> {
        pred.iter().map(|p| self.get(p)).collect()
    }
}

/// Aligns predicted labels to true ones.
///
/// A predicted label that is a known (training) label or occurs among the
/// true labels scores as itself. Every other predicted label, typically a
/// `novel-<i>` class, is matched to at most one true label that nothing else
/// claims, greedily by overlap count; ties prefer the lexicographically
/// smaller predicted label, then true label. Leftovers map to nothing.
pub fn align_labels(pred: &[String], truth: &[String], known: &[String]) -> Result<LabelAlignment> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let true_set: BTreeSet<&str> = truth.iter().map(String::as_str).collect();
    let known_set: BTreeSet<&str> = known.iter().map(String::as_str).collect();
    let is_fixed = |l: &str| true_set.contains(l) || known_set.contains(l);

    let mut mapping = BTreeMap::new();
    let mut claimed: BTreeSet<&str> = known_set.clone();
    let mut overlap: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (p, t) in pred.iter().zip(truth) {
        if is_fixed(p) {
            mapping.insert(p.clone(), Some(p.clone()));
            claimed.insert(p);
        } else {
            *overlap.entry((p.as_str(), t.as_str())).or_default() += 1;
        }
    }
    let mut pairs: Vec<((&str, &str), usize)> =
        overlap.into_iter().filter(|((_, t), _)| !claimed.contains(t)).collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for ((p, t), _) in pairs {
        if mapping.contains_key(p) || claimed.contains(t) {
            continue;
        }
        mapping.insert(p.to_owned(), Some(t.to_owned()));
        claimed.insert(t);
    }
    for p in pred {
        mapping.entry(p.clone()).or_insert(None);
    }
    Ok(LabelAlignment { mapping })
}

/// Unweighted mean over the true classes of the per-class F1.
pub fn mean_f1(pred: &[String], truth: &[String], alignment: &LabelAlignment) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::invalid("mean-F1 of an empty truth sequence"));
    }
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let mut true_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pred_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut hits: BTreeMap<&str, usize> = BTreeMap::new();
    for (p, t) in alignment.apply(pred).into_iter().zip(truth) {
        *true_counts.entry(t).or_default() += 1;
        if let Some(p) = p {
            *pred_counts.entry(p).or_default() += 1;
            if p == t {
                *hits.entry(t).or_default() += 1;
            }
        }
    }
    let total: f64 = true_counts
        .iter()
        .map(|(c, &n)| {
            let tp = hits.get(c).copied().unwrap_or(0) as f64;
            let np = pred_counts.get(c).copied().unwrap_or(0) as f64;
            let precision = if np > 0.0 { tp / np } else { 0.0 };
            let recall = tp / n as f64;
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / true_counts.len() as f64)
}

/// Aligns and scores in one go.
pub fn score(pred: &[String], truth: &[String], known: &[String]) -> Result<f64> {
    let a = align_labels(pred, truth, known)?;
    mean_f1(pred, truth, &a)
}

/// Number of distinct predicted labels.
pub fn count_distinct(pred: &[String]) -> usize {
    pred.iter().collect::<BTreeSet<_>>().len()
}
