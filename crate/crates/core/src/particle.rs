//! Sequential importance sampling with resampling over class assignments.
//!
//! Every particle carries one complete hypothesis of the online assignments
//! together with the class statistics it implies. A record is absorbed by
//! drawing its class from the CRP prior of each particle, multiplying the
//! particle weight by the predictive density of the record under the drawn
//! class (given the data before it), and normalizing. When the effective
//! number of particles drops to the threshold, particles are resampled and
//! the weights reset to uniform.
//!
//! Novel classes are named `novel-1`, `novel-2`, … in birth order within each
//! particle, and prediction aggregates weight by label string, so `novel-t`
//! in different particles counts as the same outcome.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpgmm::{crp_log_weights_for, log_predictive, mint_novel_label, ClassStats, NIWHyper};
use crate::error::{Error, Result};
use crate::prob::normalize_log;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub(crate) assignments: Vec<String>,
    pub(crate) classes: Vec<ClassStats>,
    /// Index of the next `novel-<i>` label to try.
    pub(crate) next_novel: usize,
    /// Normalized weight.
    pub(crate) weight: f64,
    /// Log predictive density applied for the most recent record.
    pub(crate) last_log_factor: f64,
}

impl Particle {
    pub fn assignments(&self) -> &[String] {
        &self.assignments
    }

    pub fn classes(&self) -> &[ClassStats] {
        &self.classes
    }

    pub fn class(&self, label: &str) -> Option<&ClassStats> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Number of novel classes currently alive in this particle.
    pub fn novel_count(&self) -> usize {
        self.classes
            .iter()
            .filter(|c| crate::dpgmm::is_novel_label(&c.label))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleScheme {
    /// One shared uniform offset across the M strata. Each particle of weight
    /// `w` receives `⌊wM⌋` or `⌈wM⌉` copies.
    #[default]
    Systematic,
    /// An independent uniform in every stratum.
    Stratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleConfig {
    pub num_particles: usize,
    /// Resample when ENP ≤ this; defaults to M/2.
    pub enp_threshold: Option<f64>,
    pub seed: u64,
    pub scheme: ResampleScheme,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self {
            num_particles: 100,
            enp_threshold: None,
            seed: 0,
            scheme: ResampleScheme::Systematic,
        }
    }
}

/// Aggregated prediction for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    /// `(label, mass)` sorted by descending mass, then label.
    pub distribution: Vec<(String, f64)>,
}

impl Prediction {
    pub fn probs(&self) -> Vec<f64> {
        self.distribution.iter().map(|(_, p)| *p).collect()
    }

    pub fn mass(&self, label: &str) -> f64 {
        self.distribution
            .iter()
            .find(|(l, _)| l == label)
            .map_or(0.0, |(_, p)| *p)
    }
}

/// What happened while absorbing one record.
#[derive(Debug, Clone, PartialEq)]
pub struct PfStep {
    pub index: usize,
    /// ENP after reweighting, before any resampling.
    pub enp: f64,
    pub resampled: bool,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub(crate) particles: Vec<Particle>,
    pub(crate) hyper: NIWHyper,
    pub(crate) n_train: usize,
    pub(crate) enp_threshold: f64,
    pub(crate) seed: u64,
    pub(crate) scheme: ResampleScheme,
    pub(crate) processed: usize,
    #[serde(with = "opt_vector")]
    pub(crate) last_record: Option<DVector<f64>>,
    pub(crate) resample_count: usize,
}

mod opt_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<DVector<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|v| v.as_slice().to_vec()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DVector<f64>>, D::Error> {
        Ok(Option::<Vec<f64>>::deserialize(d)?.map(DVector::from_vec))
    }
}

/// Fresh ensemble: every particle holds the training statistics, an empty
/// history, and weight 1/M.
pub fn pf_init(hyper: NIWHyper, train: Vec<ClassStats>, config: &ParticleConfig) -> Result<Ensemble> {
    let m = config.num_particles;
    if m < 1 {
        return Err(Error::invalid("at least one particle is required"));
    }
    hyper.validate()?;
    if let Some(c) = train.iter().find(|c| c.dim() != hyper.dim()) {
        return Err(Error::DimensionMismatch {
            expected: hyper.dim(),
            actual: c.dim(),
        });
    }
    let enp_threshold = config.enp_threshold.unwrap_or(m as f64 / 2.0);
    if !(enp_threshold >= 0.0) {
        return Err(Error::invalid("ENP threshold must be non-negative"));
    }
    let n_train = train.iter().map(ClassStats::count).sum();
    let particle = Particle {
        assignments: Vec::new(),
        classes: train,
        next_novel: 1,
        weight: 1.0 / m as f64,
        last_log_factor: 0.0,
    };
    Ok(Ensemble {
        particles: vec![particle; m],
        hyper,
        n_train,
        enp_threshold,
        seed: config.seed,
        scheme: config.scheme,
        processed: 0,
        last_record: None,
        resample_count: 0,
    })
}

/// Draws the class of `x` for one particle from its CRP prior, applies the
/// predictive density to its weight (in log space, unnormalized), and adds
/// `x` to the drawn class. Returns the particle's new log weight.
pub fn propagate_particle<R: Rng + ?Sized>(
    particle: &mut Particle,
    x: &DVector<f64>,
    hyper: &NIWHyper,
    rng: &mut R,
) -> Result<f64> {
    let crp = crp_log_weights_for(&particle.classes, hyper.alpha);
    let mut logs = crp.existing.clone();
    logs.push(crp.novel);
    let probs = normalize_log(&logs).ok_or(Error::Degenerate)?;
    let choice = rng::categorical(rng, &probs);
    let factor = if choice < particle.classes.len() {
        let f = log_predictive(x, Some(&particle.classes[choice]), hyper)?;
        particle.classes[choice].push(x)?;
        particle.assignments.push(particle.classes[choice].label.clone());
        f
    } else {
        let f = log_predictive(x, None, hyper)?;
        let label = mint_novel_label(&particle.classes, &mut particle.next_novel);
        particle.classes.push(ClassStats::singleton(label.clone(), x)?);
        particle.assignments.push(label);
        f
    };
    particle.last_log_factor = factor;
    Ok(particle.weight.ln() + factor)
}

/// `1 / Σ w²` of normalized weights, clamped to `[1, M]`.
pub fn effective_particles(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().map(|w| w * w).sum();
    (1.0 / s).clamp(1.0, weights.len().max(1) as f64)
}

/// Stratum points `(j + u_j)/M` mapped through the inverse CDF of `weights`.
///
/// `uniforms` holds one value for systematic resampling or M values for
/// stratified resampling.
pub fn resample_indices(weights: &[f64], uniforms: &[f64]) -> Vec<usize> {
    let m = weights.len();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(m);
    let mut cumulative = weights[0] / total;
    let mut i = 0;
    for j in 0..m {
        let u = uniforms[if uniforms.len() == 1 { 0 } else { j }];
        let point = (j as f64 + u) / m as f64;
        while point >= cumulative && i + 1 < m {
            i += 1;
            cumulative += weights[i] / total;
        }
        out.push(i);
    }
    out
}

impl Ensemble {
    pub fn num_particles(&self) -> usize {
        self.particles.len()
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn hyper(&self) -> &NIWHyper {
        &self.hyper
    }

    pub fn processed(&self) -> usize {
        self.processed
    }

    pub fn enp_threshold(&self) -> f64 {
        self.enp_threshold
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn resample_count(&self) -> usize {
        self.resample_count
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    /// Number of distinct labels across all particles' classes.
    pub fn class_count_range(&self) -> (usize, usize) {
        let counts = self.particles.iter().map(|p| p.classes.len());
        let lo = counts.clone().min().unwrap_or(0);
        let hi = counts.max().unwrap_or(0);
        (lo, hi)
    }

    /// Effective number of particles `1 / Σ w²`, clamped to `[1, M]`.
    pub fn enp(&self) -> f64 {
        effective_particles(&self.weights())
    }

    /// Replaces weights from unnormalized log weights.
    pub(crate) fn set_log_weights(&mut self, logs: &[f64]) -> Result<()> {
        let w = normalize_log(logs).ok_or(Error::Degenerate)?;
        for (p, w) in self.particles.iter_mut().zip(w) {
            p.weight = w;
        }
        Ok(())
    }

    /// Propagates every particle with `x` and normalizes the weights.
    ///
    /// Particle `m` at record `i` draws from the stream `(seed, Propagate, m, i)`,
    /// so the outcome does not depend on execution order.
    pub fn propagate(&mut self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.hyper.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.hyper.dim(),
                actual: x.len(),
            });
        }
        let index = self.processed as u64;
        let seed = self.seed;
        let hyper = &self.hyper;
        let logs = self
            .particles
            .par_iter_mut()
            .enumerate()
            .map(|(m, p)| {
                let mut r = rng::stream(seed, Purpose::Propagate, m as u64, index);
                propagate_particle(p, x, hyper, &mut r)
            })
            .collect::<Result<Vec<f64>>>()?;
        self.set_log_weights(&logs)?;
        self.processed += 1;
        self.last_record = Some(x.clone());
        Ok(())
    }

    /// Resamples with the given random source and resets weights to 1/M.
    pub fn resample_with<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let m = self.particles.len();
        let uniforms: Vec<f64> = match self.scheme {
            ResampleScheme::Systematic => vec![rng.random()],
            ResampleScheme::Stratified => (0..m).map(|_| rng.random()).collect(),
        };
        let picks = resample_indices(&self.weights(), &uniforms);
        let uniform = 1.0 / m as f64;
        self.particles = picks
            .into_iter()
            .map(|i| {
                let mut p = self.particles[i].clone();
                p.weight = uniform;
                p
            })
            .collect();
        self.resample_count += 1;
    }

    /// Resamples from the stream `(seed, Resample, record index, round)`.
    pub fn resample(&mut self, round: u64) {
        let mut r = rng::stream(self.seed, Purpose::Resample, self.processed as u64, round);
        self.resample_with(&mut r);
    }

    /// Resamples if ENP ≤ threshold; returns whether it did.
    pub fn maybe_resample(&mut self, round: u64) -> bool {
        if self.enp() <= self.enp_threshold {
            self.resample(round);
            true
        } else {
            false
        }
    }

    /// Sums particle weights by the label each particle gave record `position`.
    /// The predicted label has the largest mass; ties go to the smallest label.
    pub fn predict(&self, position: usize) -> Result<Prediction> {
        if position >= self.processed {
            return Err(Error::Position {
                requested: position,
                processed: self.processed,
            });
        }
        let mut mass: BTreeMap<&str, f64> = BTreeMap::new();
        for p in &self.particles {
            *mass.entry(p.assignments[position].as_str()).or_default() += p.weight;
        }
        let mut distribution: Vec<(String, f64)> = mass.into_iter().map(|(l, w)| (l.to_owned(), w)).collect();
        distribution.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Prediction {
            label: distribution[0].0.clone(),
            distribution,
        })
    }

    /// Absorbs one record: propagate, normalize, resample if needed, predict.
    pub fn step(&mut self, x: &DVector<f64>) -> Result<PfStep> {
        self.propagate(x)?;
        let enp = self.enp();
        let resampled = self.maybe_resample(0);
        let index = self.processed - 1;
        Ok(PfStep {
            index,
            enp,
            resampled,
            prediction: self.predict(index)?,
        })
    }

    /// Checks structural invariants after a reload.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.particles.is_empty() {
            return Err(Error::Snapshot("ensemble has no particles".into()));
        }
        let total: f64 = self.weights().iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Snapshot(format!("weights sum to {total}")));
        }
        for p in &self.particles {
            if p.assignments.len() != self.processed {
                return Err(Error::Snapshot("assignment history length mismatch".into()));
            }
            let n: usize = p.classes.iter().map(ClassStats::count).sum();
            if n != self.n_train + self.processed {
                return Err(Error::Snapshot("class sizes disagree with record counts".into()));
            }
        }
        Ok(())
    }
}

/// Runs the filter over a stream and returns one prediction per record.
pub fn pf_run(ensemble: &mut Ensemble, stream: &[DVector<f64>]) -> Result<Vec<Prediction>> {
    stream.iter().map(|x| ensemble.step(x).map(|s| s.prediction)).collect()
}
