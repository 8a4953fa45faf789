//! One-pass Gibbs sampler.
//!
//! Each arriving record draws its class once from the class posterior given
//! the training data and every earlier assignment, and the draw is committed
//! immediately: later records condition on it as if it were observed.
//!
//! The draw for the i-th online record (0-based) consumes a single uniform
//! from the stream `(seed, Gibbs, i, 0)` and selects by inverse CDF over the
//! existing classes in model order followed by the new-class outcome.

use nalgebra::DVector;
use rand::Rng;

use crate::dpgmm::{ClassPosterior, ModelState, Outcome};
use crate::error::Result;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Assignment {
    /// Draw from the posterior.
    #[default]
    Sample,
    /// Take the most probable outcome; ties go to the smallest label.
    Map,
}

/// Result of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsStep {
    pub label: String,
    /// Labels of the outcomes in `posterior`, the new class last.
    pub labels: Vec<String>,
    pub posterior: ClassPosterior,
}

impl GibbsStep {
    /// `(label, probability)` for every outcome with positive mass.
    pub fn distribution(&self) -> Vec<(String, f64)> {
        self.labels
            .iter()
            .cloned()
            .zip(self.posterior.probs())
            .filter(|(_, p)| *p > 0.0)
            .collect()
    }
}

/// Samples the class of `x`, commits it and returns the chosen label.
pub fn gibbs_step<R: Rng + ?Sized>(
    model: &mut ModelState,
    x: &DVector<f64>,
    rng: &mut R,
    assignment: Assignment,
) -> Result<GibbsStep> {
    let posterior = model.posterior(x)?;
    let novel_name = model.peek_novel_label();
    let outcome = match assignment {
        Assignment::Sample => posterior.outcome(rng::categorical(rng, &posterior.probs())),
        Assignment::Map => posterior.map_outcome(model.classes(), &novel_name),
    };
    let mut labels: Vec<String> = model.labels().map(str::to_owned).collect();
    labels.push(novel_name);
    let label = model.commit(outcome, x)?;
    debug_assert!(matches!(outcome, Outcome::Existing(_)) || labels.last() == Some(&label));
    Ok(GibbsStep {
        label,
        labels,
        posterior,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GibbsOptions {
    pub seed: u64,
    pub assignment: Assignment,
}

/// Predictions of a complete pass over a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsRun {
    pub predictions: Vec<String>,
    pub seed: u64,
}

/// Sampler bound to a model; step indices continue from the model's own
/// online counter, so a restored model resumes the same random streams.
#[derive(Debug, Clone)]
pub struct GibbsSampler {
    pub model: ModelState,
    pub options: GibbsOptions,
}

impl GibbsSampler {
    pub fn new(model: ModelState, options: GibbsOptions) -> Self {
        Self { model, options }
    }

    pub fn step(&mut self, x: &DVector<f64>) -> Result<GibbsStep> {
        let index = self.model.n_online_seen() as u64;
        let mut r = rng::stream(self.options.seed, Purpose::Gibbs, index, 0);
        gibbs_step(&mut self.model, x, &mut r, self.options.assignment)
    }
}

/// Runs the sampler over `stream` in order, mutating `model`.
pub fn gibbs_run(model: &mut ModelState, stream: &[DVector<f64>], options: GibbsOptions) -> Result<GibbsRun> {
    let mut sampler = GibbsSampler::new(model.clone(), options);
    let predictions = stream
        .iter()
        .map(|x| sampler.step(x).map(|s| s.label))
        .collect::<Result<Vec<_>>>()?;
    *model = sampler.model;
    Ok(GibbsRun {
        predictions,
        seed: options.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpgmm::{ClassStats, NIWHyper};
    use nalgebra::DMatrix;

    fn model(alpha: f64, centers: &[(&str, f64, usize)]) -> ModelState {
        let hyper = NIWHyper::new(DVector::zeros(1), DMatrix::identity(1, 1), 1.0, 3.0, alpha).unwrap();
        let classes = centers
            .iter()
            .map(|(l, c, n)| {
                let pts: Vec<_> = (0..*n)
                    .map(|i| DVector::from_element(1, c + (i as f64 / (*n as f64 - 1.0).max(1.0) - 0.5) * 0.5))
                    .collect();
                ClassStats::from_points(*l, &pts).unwrap()
            })
            .collect();
        ModelState::from_classes(hyper, classes)
    }

    #[test]
    fn zero_alpha_single_class_always_chosen() {
        let mut m = model(0.0, &[("a", 0.0, 3)]);
        let stream: Vec<_> = (0..20).map(|i| DVector::from_element(1, i as f64)).collect();
        let run = gibbs_run(&mut m, &stream, GibbsOptions::default()).unwrap();
        assert!(run.predictions.iter().all(|l| l == "a"));
        assert_eq!(m.classes().len(), 1);
    }

    #[test]
    fn near_certain_class_always_drawn() {
        let m = model(1e-12, &[("a", 0.0, 50), ("b", 40.0, 50)]);
        let x = DVector::from_element(1, 0.0);
        let post = m.posterior(&x).unwrap();
        assert!(post.existing[0] > 1.0 - 1e-9);
        for t in 0..1000 {
            let mut m2 = m.clone();
            let mut r = rng::stream(t, Purpose::Gibbs, 0, 0);
            assert_eq!(gibbs_step(&mut m2, &x, &mut r, Assignment::Sample).unwrap().label, "a");
        }
        m.validate().unwrap();
    }

    #[test]
    fn symmetric_classes_split_evenly() {
        let m = model(1e-9, &[("a", -5.0, 10), ("b", 5.0, 10)]);
        let x = DVector::from_element(1, 0.0);
        let post = m.posterior(&x).unwrap();
        assert!((post.existing[0] - post.existing[1]).abs() < 1e-12);
        let trials = 10_000;
        let mut a = 0;
        for t in 0..trials {
            let mut m2 = m.clone();
            let mut r = rng::stream(99, Purpose::Gibbs, t, 0);
            if gibbs_step(&mut m2, &x, &mut r, Assignment::Sample).unwrap().label == "a" {
                a += 1;
            }
        }
        let freq = a as f64 / trials as f64;
        assert!((freq - post.existing[0]).abs() < 0.05, "freq {freq}");
    }

    #[test]
    fn empty_stream_leaves_model_untouched() {
        let mut m = model(1.0, &[("a", 0.0, 3)]);
        let before = m.clone();
        let run = gibbs_run(&mut m, &[], GibbsOptions::default()).unwrap();
        assert!(run.predictions.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn same_seed_same_predictions() {
        let stream: Vec<_> = (0..40)
            .map(|i| DVector::from_element(1, (i % 7) as f64 * 3.0))
            .collect();
        let opts = GibbsOptions {
            seed: 5,
            assignment: Assignment::Sample,
        };
        let mut m1 = model(2.0, &[("a", 0.0, 3), ("b", 6.0, 3)]);
        let mut m2 = m1.clone();
        let r1 = gibbs_run(&mut m1, &stream, opts).unwrap();
        let r2 = gibbs_run(&mut m2, &stream, opts).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn counts_and_classes_track_the_stream() {
        let stream: Vec<_> = (0..60)
            .map(|i| DVector::from_element(1, (i % 5) as f64 * 8.0))
            .collect();
        let mut m = model(5.0, &[("a", 0.0, 4)]);
        let mut sampler = GibbsSampler::new(
            m.clone(),
            GibbsOptions {
                seed: 1,
                ..Default::default()
            },
        );
        let mut prev_classes = m.classes().len();
        for x in &stream {
            let step = sampler.step(x).unwrap();
            let now = sampler.model.classes().len();
            assert!(now == prev_classes || (now == prev_classes + 1 && step.label.starts_with("novel-")));
            prev_classes = now;
            let total: f64 = step.posterior.probs().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        m = sampler.model;
        assert_eq!(m.n_online_seen(), stream.len());
        let online: usize = m.labels().map(|l| m.online_count(l)).sum();
        assert_eq!(online, stream.len());
        m.validate().unwrap();
    }

    #[test]
    fn map_mode_picks_argmax() {
        let mut m = model(1.0, &[("a", 0.0, 10), ("b", 10.0, 10)]);
        let mut r = rng::stream(0, Purpose::Gibbs, 0, 0);
        let step = gibbs_step(&mut m, &DVector::from_element(1, 9.5), &mut r, Assignment::Map).unwrap();
        assert_eq!(step.label, "b");
    }
}
