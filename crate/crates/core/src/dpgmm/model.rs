use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::hyper::NIWHyper;
use super::predictive::log_predictive;
use super::stats::ClassStats;
use crate::error::{Error, Result};
use crate::prob::normalize_log;

/// Prefix of labels minted for classes discovered online.
pub const NOVEL_PREFIX: &str = "novel-";

pub fn novel_label(index: usize) -> String {
    format!("{NOVEL_PREFIX}{index}")
}

pub fn is_novel_label(label: &str) -> bool {
    label
        .strip_prefix(NOVEL_PREFIX)
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

/// One outcome of the class posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Existing(usize),
    Novel,
}

/// Normalized CRP log prior: `log n_j − log(α + N)` for every existing class
/// and `log α − log(α + N)` for a new one, where `N = Σ n_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrpLogWeights {
    pub existing: Vec<f64>,
    pub novel: f64,
}

pub fn crp_log_weights_for(classes: &[ClassStats], alpha: f64) -> CrpLogWeights {
    let total: usize = classes.iter().map(ClassStats::count).sum();
    let denom = alpha + total as f64;
    if denom <= 0.0 {
        return CrpLogWeights {
            existing: Vec::new(),
            novel: 0.0,
        };
    }
    let log_denom = denom.ln();
    CrpLogWeights {
        existing: classes.iter().map(|c| (c.count() as f64).ln() - log_denom).collect(),
        novel: alpha.ln() - log_denom,
    }
}

/// Posterior over the existing classes (in class order) plus a new class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub existing: Vec<f64>,
    pub novel: f64,
}

impl ClassPosterior {
    /// Probabilities in draw order: existing classes, then the new class.
    pub fn probs(&self) -> Vec<f64> {
        let mut p = self.existing.clone();
        p.push(self.novel);
        p
    }

    pub fn outcome(&self, index: usize) -> Outcome {
        if index < self.existing.len() {
            Outcome::Existing(index)
        } else {
            Outcome::Novel
        }
    }

    /// Most probable outcome; ties go to the lexicographically smallest label,
    /// with the new class named `novel_name`.
    pub fn map_outcome(&self, classes: &[ClassStats], novel_name: &str) -> Outcome {
        let mut best = (Outcome::Novel, self.novel, novel_name);
        for (j, (&p, c)) in self.existing.iter().zip(classes).enumerate() {
            if p > best.1 || (p == best.1 && c.label.as_str() < best.2) {
                best = (Outcome::Existing(j), p, c.label.as_str());
            }
        }
        best.0
    }
}

/// Class posterior of one observation against a set of classes.
pub fn posterior_for(x: &DVector<f64>, classes: &[ClassStats], hyper: &NIWHyper) -> Result<ClassPosterior> {
    let crp = crp_log_weights_for(classes, hyper.alpha);
    let densities = classes
        .iter()
        .map(|c| log_predictive(x, Some(c), hyper))
        .collect::<Result<Vec<_>>>()?;
    let novel_density = if crp.novel == f64::NEG_INFINITY {
        // Skipped: the prior already rules the outcome out.
        0.0
    } else {
        log_predictive(x, None, hyper)?
    };
    combine_posterior(&crp, &densities, novel_density)
}

/// Multiplies prior by likelihood in log space and normalizes.
pub fn combine_posterior(crp: &CrpLogWeights, log_densities: &[f64], novel_log_density: f64) -> Result<ClassPosterior> {
    let mut logs: Vec<f64> = crp.existing.iter().zip(log_densities).map(|(w, d)| w + d).collect();
    logs.push(if crp.novel == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        crp.novel + novel_log_density
    });
    let mut probs = normalize_log(&logs).ok_or(Error::Degenerate)?;
    let novel = probs.pop().expect("novel outcome present");
    Ok(ClassPosterior { existing: probs, novel })
}

/// Smallest `novel-<i>` with `i >= *next` not already used; advances `next`.
pub(crate) fn mint_novel_label(classes: &[ClassStats], next: &mut usize) -> String {
    loop {
        let label = novel_label(*next);
        *next += 1;
        if !classes.iter().any(|c| c.label == label) {
            return label;
        }
    }
}

/// Training classes plus classes discovered online, with the stream counters
/// the CRP prior needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub hyper: NIWHyper,
    classes: Vec<ClassStats>,
    online_counts: Vec<usize>,
    n_train: usize,
    n_online_seen: usize,
    next_novel_index: usize,
}

impl ModelState {
    /// Training classes are ordered by label.
    pub fn from_training(hyper: NIWHyper, xs: &[DVector<f64>], labels: &[String]) -> Result<Self> {
        if xs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len(),
                actual: labels.len(),
            });
        }
        let mut groups: BTreeMap<&str, Vec<&DVector<f64>>> = BTreeMap::new();
        for (x, l) in xs.iter().zip(labels) {
            if x.len() != hyper.dim() {
                return Err(Error::DimensionMismatch {
                    expected: hyper.dim(),
                    actual: x.len(),
                });
            }
            groups.entry(l.as_str()).or_default().push(x);
        }
        let classes = groups
            .into_iter()
            .map(|(l, pts)| ClassStats::from_points(l, pts))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_classes(hyper, classes))
    }

    pub fn from_classes(hyper: NIWHyper, classes: Vec<ClassStats>) -> Self {
        let n_train = classes.iter().map(ClassStats::count).sum();
        let online_counts = vec![0; classes.len()];
        Self {
            hyper,
            classes,
            online_counts,
            n_train,
            n_online_seen: 0,
            next_novel_index: 1,
        }
    }

    pub fn classes(&self) -> &[ClassStats] {
        &self.classes
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.label.as_str())
    }

    pub fn class(&self, label: &str) -> Option<&ClassStats> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn online_count(&self, label: &str) -> usize {
        self.classes
            .iter()
            .position(|c| c.label == label)
            .map_or(0, |j| self.online_counts[j])
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_online_seen(&self) -> usize {
        self.n_online_seen
    }

    pub fn crp_log_weights(&self) -> CrpLogWeights {
        crp_log_weights_for(&self.classes, self.hyper.alpha)
    }

    pub fn posterior(&self, x: &DVector<f64>) -> Result<ClassPosterior> {
        posterior_for(x, &self.classes, &self.hyper)
    }

    /// Label a new class would receive.
    pub fn peek_novel_label(&self) -> String {
        let mut next = self.next_novel_index;
        mint_novel_label(&self.classes, &mut next)
    }

    /// Adds `x` to the chosen class, creating it for [`Outcome::Novel`].
    pub fn commit(&mut self, outcome: Outcome, x: &DVector<f64>) -> Result<String> {
        let label = match outcome {
            Outcome::Existing(j) => {
                let class = self
                    .classes
                    .get_mut(j)
                    .ok_or_else(|| Error::invalid(format!("no class at index {j}")))?;
                class.push(x)?;
                self.online_counts[j] += 1;
                class.label.clone()
            }
            Outcome::Novel => {
                let label = mint_novel_label(&self.classes, &mut self.next_novel_index);
                self.classes.push(ClassStats::singleton(label.clone(), x)?);
                self.online_counts.push(1);
                label
            }
        };
        self.n_online_seen += 1;
        Ok(label)
    }

    /// Checks the bookkeeping invariants after a reload.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.online_counts.len() != self.classes.len() {
            return Err(Error::Snapshot("class and count tables differ in length".into()));
        }
        if self.online_counts.iter().sum::<usize>() != self.n_online_seen {
            return Err(Error::Snapshot("online counts do not sum to records seen".into()));
        }
        let total: usize = self.classes.iter().map(ClassStats::count).sum();
        if total != self.n_train + self.n_online_seen {
            return Err(Error::Snapshot("class sizes disagree with record counters".into()));
        }
        let mut labels: Vec<&str> = self.labels().collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.classes.len() {
            return Err(Error::Snapshot("duplicate class labels".into()));
        }
        if self.classes.iter().any(|c| c.dim() != self.hyper.dim()) {
            return Err(Error::Snapshot("class dimension differs from prior".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn hyper(h: usize, alpha: f64) -> NIWHyper {
        NIWHyper::new(DVector::zeros(h), DMatrix::identity(h, h), 1.0, h as f64 + 2.0, alpha).unwrap()
    }

    fn class_of_size(label: &str, n: usize, h: usize) -> ClassStats {
        let pts: Vec<_> = (0..n).map(|i| DVector::from_element(h, i as f64 * 0.01)).collect();
        ClassStats::from_points(label, &pts).unwrap()
    }

    #[test]
    fn crp_prior_hand_case() {
        let classes = vec![class_of_size("a", 10, 1), class_of_size("b", 90, 1)];
        let w = crp_log_weights_for(&classes, 100.0);
        assert!((w.existing[0].exp() - 10.0 / 200.0).abs() < 1e-15);
        assert!((w.novel.exp() - 0.5).abs() < 1e-15);
        let total: f64 = w.existing.iter().map(|v| v.exp()).sum::<f64>() + w.novel.exp();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn crp_tiny_alpha_and_empty_training() {
        let classes = vec![class_of_size("a", 3, 1)];
        assert!(crp_log_weights_for(&classes, 1e-300).novel.exp() < 1e-300);
        assert_eq!(crp_log_weights_for(&classes, 0.0).novel, f64::NEG_INFINITY);
        assert_eq!(crp_log_weights_for(&[], 2.0).novel, 0.0);
    }

    #[test]
    fn equal_density_and_size_alpha_split_evenly() {
        let classes = vec![class_of_size("a", 7, 1)];
        let crp = crp_log_weights_for(&classes, 7.0);
        let post = combine_posterior(&crp, &[-3.25], -3.25).unwrap();
        assert!((post.existing[0] - 0.5).abs() < 1e-15);
        assert!((post.novel - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_matches_manual_two_term_sum() {
        let h = hyper(1, 1.0);
        let classes = vec![ClassStats::singleton("a", &DVector::zeros(1)).unwrap()];
        let x = DVector::from_element(1, 0.3);
        let post = posterior_for(&x, &classes, &h).unwrap();
        let la = 0.5f64.ln() + log_predictive(&x, Some(&classes[0]), &h).unwrap();
        let ln = 0.5f64.ln() + log_predictive(&x, None, &h).unwrap();
        let manual = 1.0 / (1.0 + (ln - la).exp());
        assert!((post.existing[0] - manual).abs() < 1e-14);
        assert!((post.existing[0] + post.novel - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_never_opens_a_class() {
        let h = hyper(1, 0.0);
        let classes = vec![class_of_size("a", 4, 1)];
        let post = posterior_for(&DVector::from_element(1, 50.0), &classes, &h).unwrap();
        assert_eq!(post.novel, 0.0);
        assert_eq!(post.existing, vec![1.0]);
    }

    #[test]
    fn commit_mints_fresh_labels() {
        let h = hyper(1, 1.0);
        let mut classes = vec![class_of_size("novel-1", 2, 1)];
        classes.push(class_of_size("b", 2, 1));
        let mut m = ModelState::from_classes(h, classes);
        let l = m.commit(Outcome::Novel, &DVector::from_element(1, 3.0)).unwrap();
        assert_eq!(l, "novel-2");
        let l = m.commit(Outcome::Existing(1), &DVector::from_element(1, 3.0)).unwrap();
        assert_eq!(l, "b");
        assert_eq!(m.n_online_seen(), 2);
        assert_eq!(m.online_count("b"), 1);
        m.validate().unwrap();
    }

    #[test]
    fn novel_label_pattern() {
        assert!(is_novel_label("novel-12"));
        assert!(!is_novel_label("novel-"));
        assert!(!is_novel_label("novel-x"));
        assert!(!is_novel_label("alice"));
    }

    #[test]
    fn snapshot_roundtrip_is_exact() {
        let h = hyper(2, 3.0);
        let xs = vec![
            DVector::from_vec(vec![0.1, 0.7]),
            DVector::from_vec(vec![1.0 / 3.0, 0.2]),
            DVector::from_vec(vec![0.9, 0.4]),
        ];
        let labels: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let m = ModelState::from_training(h, &xs, &labels).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: ModelState = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
        let x = DVector::from_vec(vec![0.5, 0.5]);
        assert_eq!(m.posterior(&x).unwrap(), back.posterior(&x).unwrap());
    }
}
