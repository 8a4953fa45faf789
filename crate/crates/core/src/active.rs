//! Entropy-driven selection of records for human labelling, and
//! reconditioning of the particle ensemble on the labels received.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dpgmm::{log_predictive, novel_label, ClassStats};
use crate::error::{Error, Result};
use crate::particle::{Ensemble, Particle};
use crate::rng::{self, Purpose};

/// Labels with less aggregated mass than this do not count towards `|J|`.
pub const SUPPORT_EPS: f64 = 1e-12;
/// Entropy must exceed the threshold by more than this to trigger a query,
/// so a numerically uniform posterior at `τ = 1` stays unqueried.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    /// Queries go to a person; the stream waits for the answer.
    Interactive,
    /// Queries are answered from the ground-truth labels.
    Oracle,
    /// Never query.
    #[default]
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveConfig {
    pub tau: f64,
    pub budget: Option<usize>,
    pub mode: QueryMode,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            budget: None,
            mode: QueryMode::Off,
        }
    }
}

impl ActiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }

    pub fn budget_left(&self, used: usize) -> bool {
        self.budget.is_none_or(|b| used < b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "label")]
pub enum Resolution {
    Answered(String),
    Skipped,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEvent {
    pub record_id: String,
    pub index: usize,
    pub distribution: Vec<(String, f64)>,
    pub entropy: f64,
    pub threshold: f64,
    pub resolution: Resolution,
}

/// `−Σ p ln p`, with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> f64 {
    let h: f64 = dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

/// Number of outcomes with non-negligible mass.
pub fn support_size(dist: &[f64]) -> usize {
    dist.iter().filter(|&&p| p > SUPPORT_EPS).count()
}

/// `τ · ln |J|`.
pub fn query_threshold(dist: &[f64], tau: f64) -> f64 {
    let j = support_size(dist).max(1);
    tau * (j as f64).ln()
}

/// Entropy rule alone, ignoring mode and budget. `τ = 0` asks about every
/// record, point masses included.
pub fn is_uncertain(dist: &[f64], tau: f64) -> bool {
    if tau == 0.0 {
        return true;
    }
    entropy(dist) > query_threshold(dist, tau) + TIE_EPS
}

/// Whether to ask for the label of a record with posterior `dist`, given
/// `used` queries so far.
pub fn should_query(dist: &[f64], config: &ActiveConfig, used: usize) -> bool {
    config.mode != QueryMode::Off && config.budget_left(used) && is_uncertain(dist, config.tau)
}

/// Per-record coin of the random-selection baseline: record `index` is
/// queried with probability `p`, from the stream `(seed, RandomSelection, index, 0)`.
pub fn random_selection(seed: u64, index: usize, p: f64) -> bool {
    let mut r = rng::stream(seed, Purpose::RandomSelection, index as u64, 0);
    r.random::<f64>() < p
}

/// Outcome of conditioning the ensemble on one true label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackOutcome {
    /// Particles whose assignment changed.
    pub changed: usize,
    pub enp: f64,
    pub resampled: bool,
}

/// Moves the current record of `particle` into class `truth` and returns the
/// particle's new unnormalized log weight.
fn relabel_particle(
    particle: &mut Particle,
    x: &DVector<f64>,
    truth: &str,
    ens_hyper: &crate::dpgmm::NIWHyper,
) -> Result<f64> {
    let position = particle.assignments.len() - 1;
    if particle.assignments[position] == truth {
        return Ok(particle.weight.ln());
    }
    let wrong = particle.assignments[position].clone();
    let k = particle
        .classes
        .iter()
        .position(|c| c.label == wrong)
        .ok_or_else(|| Error::invalid(format!("particle lost class {wrong}")))?;
    if particle.classes[k].count() == 1 {
        // Born at this record: drop it and give its name back.
        particle.classes.remove(k);
        if particle.next_novel > 1 && wrong == novel_label(particle.next_novel - 1) {
            particle.next_novel -= 1;
        }
    } else {
        particle.classes[k].remove(x)?;
    }
    let factor = match particle.classes.iter_mut().find(|c| c.label == truth) {
        Some(c) => {
            let f = log_predictive(x, Some(c), ens_hyper)?;
            c.push(x)?;
            f
        }
        None => {
            let f = log_predictive(x, None, ens_hyper)?;
            particle.classes.push(ClassStats::singleton(truth, x)?);
            f
        }
    };
    particle.assignments[position] = truth.to_owned();
    let logw = particle.weight.ln() - particle.last_log_factor + factor;
    particle.last_log_factor = factor;
    Ok(logw)
}

/// Conditions every particle on the true label of record `position`, which
/// must be the most recent one. A label unknown to a particle becomes a new
/// class in it. Weights are renormalized and resampled if ENP falls to the
/// threshold.
pub fn apply_feedback(ensemble: &mut Ensemble, position: usize, truth: &str) -> Result<FeedbackOutcome> {
    if ensemble.processed == 0 || position + 1 != ensemble.processed {
        return Err(Error::Position {
            requested: position,
            processed: ensemble.processed,
        });
    }
    if truth.trim().is_empty() {
        return Err(Error::invalid("feedback label is empty"));
    }
    let x = ensemble
        .last_record
        .clone()
        .ok_or_else(|| Error::invalid("no record to attach feedback to"))?;
    let hyper = ensemble.hyper.clone();
    let mut changed = 0;
    let mut logs = Vec::with_capacity(ensemble.particles.len());
    for p in &mut ensemble.particles {
        if p.assignments[position] != truth {
            changed += 1;
        }
        logs.push(relabel_particle(p, &x, truth, &hyper)?);
    }
    if changed > 0 {
        ensemble.set_log_weights(&logs)?;
    }
    let enp = ensemble.enp();
    let resampled = changed > 0 && ensemble.maybe_resample(1);
    Ok(FeedbackOutcome {
        changed,
        enp,
        resampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpgmm::NIWHyper;
    use crate::particle::{pf_init, ParticleConfig};
    use nalgebra::DMatrix;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert!((entropy(&[0.5, 0.5, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn query_rule_examples() {
        let cfg = |tau| ActiveConfig {
            tau,
            budget: None,
            mode: QueryMode::Oracle,
        };
        assert!(should_query(&[0.25; 4], &cfg(0.5), 0));
        assert!(!should_query(&[1.0], &cfg(0.5), 0));
        assert!(!should_query(&[1.0, 0.0], &cfg(1e-6), 0));
        assert!(!should_query(&[0.25; 4], &cfg(1.0), 0));
        assert!(!should_query(&[1.0 / 3.0; 3], &cfg(1.0), 0));
        assert!(should_query(&[1.0], &cfg(0.0), 0));
        let off = ActiveConfig {
            mode: QueryMode::Off,
            ..cfg(0.5)
        };
        assert!(!should_query(&[0.25; 4], &off, 0));
        let capped = ActiveConfig {
            budget: Some(2),
            ..cfg(0.5)
        };
        assert!(should_query(&[0.25; 4], &capped, 1));
        assert!(!should_query(&[0.25; 4], &capped, 2));
    }

    #[test]
    fn tiny_masses_do_not_count_towards_support() {
        assert_eq!(support_size(&[1.0 - 1e-14, 1e-14]), 1);
        assert_eq!(query_threshold(&[1.0 - 1e-14, 1e-14], 0.5), 0.0);
    }

    #[test]
    fn tau_out_of_range_rejected() {
        let bad = ActiveConfig {
            tau: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn random_selection_rate() {
        let n = 10_000;
        let p = 0.3;
        let hits = (0..n).filter(|&i| random_selection(7, i, p)).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((hits - n as f64 * p).abs() < 3.0 * sigma);
        assert!((0..1000).all(|i| random_selection(1, i, 1.0 - 1e-12)));
        assert!((0..1000).all(|i| !random_selection(1, i, 1e-12)));
    }

    fn scalar_hyper() -> NIWHyper {
        NIWHyper::new(DVector::zeros(1), DMatrix::identity(1, 1), 1.0, 3.0, 1.0).unwrap()
    }

    fn two_class_ensemble(m: usize) -> Ensemble {
        let pts = |c: f64| -> Vec<DVector<f64>> {
            [-0.5, 0.0, 0.5]
                .iter()
                .map(|d| DVector::from_element(1, c + d))
                .collect()
        };
        let classes = vec![
            ClassStats::from_points("A", &pts(-2.0)).unwrap(),
            ClassStats::from_points("B", &pts(2.0)).unwrap(),
        ];
        pf_init(
            scalar_hyper(),
            classes,
            &ParticleConfig {
                num_particles: m,
                enp_threshold: Some(0.0),
                seed: 11,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn confirming_every_assignment_changes_nothing() {
        let mut e = two_class_ensemble(1);
        let x = DVector::from_element(1, -2.1);
        e.step(&x).unwrap();
        let label = e.particles()[0].assignments()[0].clone();
        let before = e.clone();
        let out = apply_feedback(&mut e, 0, &label).unwrap();
        assert_eq!(out.changed, 0);
        assert_eq!(e, before);
    }

    #[test]
    fn two_particle_hand_case() {
        let mut e = two_class_ensemble(2);
        let x = DVector::from_element(1, 0.7);
        // Hand-place the record: particle 0 in A, particle 1 in B.
        let hyper = scalar_hyper();
        let before: Vec<_> = e.particles.iter().map(|p| p.classes.clone()).collect();
        for (p, l) in e.particles.iter_mut().zip(["A", "B"]) {
            let k = p.classes.iter().position(|c| c.label == l).unwrap();
            p.last_log_factor = log_predictive(&x, Some(&p.classes[k]), &hyper).unwrap();
            p.classes[k].push(&x).unwrap();
            p.assignments.push(l.into());
        }
        let logs: Vec<f64> = e.particles.iter().map(|p| 0.5f64.ln() + p.last_log_factor).collect();
        e.set_log_weights(&logs).unwrap();
        e.processed = 1;
        e.last_record = Some(x.clone());
        let out = apply_feedback(&mut e, 0, "B").unwrap();
        assert_eq!(out.changed, 1);
        let b_density = |classes: &[ClassStats]| {
            let c = classes.iter().find(|c| c.label == "B").unwrap();
            log_predictive(&x, Some(c), &hyper).unwrap().exp()
        };
        // Weights ∝ density of x under B given each particle's pre-record data.
        let d0 = b_density(&before[0]);
        let d1 = b_density(&before[1]);
        let w = e.weights();
        assert!((w[0] - d0 / (d0 + d1)).abs() < 1e-12);
        assert!((w[1] - d1 / (d0 + d1)).abs() < 1e-12);
        for p in e.particles() {
            assert_eq!(p.assignments()[0], "B");
            assert_eq!(p.class("A").unwrap().count(), 3);
            assert_eq!(p.class("B").unwrap().count(), 4);
        }
    }

    #[test]
    fn feedback_only_for_current_record() {
        let mut e = two_class_ensemble(4);
        assert!(apply_feedback(&mut e, 0, "A").is_err());
        e.step(&DVector::from_element(1, 0.0)).unwrap();
        e.step(&DVector::from_element(1, 1.0)).unwrap();
        assert!(matches!(apply_feedback(&mut e, 0, "A"), Err(Error::Position { .. })));
        apply_feedback(&mut e, 1, "A").unwrap();
    }

    #[test]
    fn brand_new_label_creates_class_everywhere() {
        let mut e = two_class_ensemble(8);
        e.step(&DVector::from_element(1, 30.0)).unwrap();
        apply_feedback(&mut e, 0, "Zed").unwrap();
        for p in e.particles() {
            assert_eq!(p.assignments()[0], "Zed");
            assert_eq!(p.class("Zed").unwrap().count(), 1);
            // Any novel class born at this record is gone.
            assert_eq!(p.novel_count(), 0);
            assert_eq!(p.next_novel, 1);
        }
        e.validate().unwrap();
    }
}
