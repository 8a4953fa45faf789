use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_jittered};
use crate::serde_mat;

/// Normal × inverse-Wishart base measure plus the DP concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NIWHyper {
    #[serde(with = "serde_mat::vector")]
    pub mu0: DVector<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub sigma0: DMatrix<f64>,
    pub kappa: f64,
    pub m: f64,
    pub alpha: f64,
}

impl NIWHyper {
    pub fn new(mu0: DVector<f64>, sigma0: DMatrix<f64>, kappa: f64, m: f64, alpha: f64) -> Result<Self> {
        let hyper = Self {
            mu0,
            sigma0,
            kappa,
            m,
            alpha,
        };
        hyper.validate()?;
        Ok(hyper)
    }

    /// Latent dimension.
    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// `m + 1 − h`, the predictive degrees of freedom of an empty class.
    pub fn base_dof(&self) -> f64 {
        self.m + 1.0 - self.dim() as f64
    }

    /// A concentration of zero is accepted; it switches off new classes.
    pub fn validate(&self) -> Result<()> {
        let h = self.dim();
        if h == 0 {
            return Err(Error::invalid("latent dimension must be positive"));
        }
        if self.sigma0.shape() != (h, h) {
            return Err(Error::DimensionMismatch {
                expected: h,
                actual: self.sigma0.nrows(),
            });
        }
        if !linalg::all_finite(&self.mu0) || self.sigma0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hyperparameters"));
        }
        if self.sigma0 != self.sigma0.transpose() {
            return Err(Error::invalid("sigma0 must be symmetric"));
        }
        if nalgebra::Cholesky::new(self.sigma0.clone()).is_none() {
            return Err(Error::invalid("sigma0 must be positive definite"));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.base_dof() > 0.0 && self.m.is_finite()) {
            return Err(Error::invalid(format!(
                "m + 1 - h must be positive (m = {}, h = {h})",
                self.m
            )));
        }
        Ok(())
    }
}

/// User-tunable prior settings; the rest is estimated from training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub alpha: f64,
    pub kappa: f64,
    /// `m = h + m_offset`.
    pub m_offset: f64,
    #[serde(default)]
    pub sigma0_scale: Sigma0Scale,
}

/// How the pooled covariance becomes `Σ0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sigma0Scale {
    /// `Σ0` is the pooled covariance itself.
    #[default]
    Pooled,
    /// `Σ0` is the pooled covariance times `m − h − 1`, so that the prior
    /// mean of a class covariance equals the pooled covariance.
    ExpectedCovariance,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            kappa: 100.0,
            m_offset: 100.0,
            sigma0_scale: Sigma0Scale::Pooled,
        }
    }
}

/// Prior mean = grand mean of the training vectors; `Σ0` = pooled within-class
/// covariance `Σ_j (n_j − 1) S_j / (N − k)`.
///
/// Singleton classes contribute no scatter. When `N − k <= 0` the scatter is
/// taken as zero, and the matrix is jittered to positive definite either way.
pub fn estimate_hyperparams(xs: &[DVector<f64>], labels: &[String], config: &HyperConfig) -> Result<NIWHyper> {
    if xs.is_empty() {
        return Err(Error::invalid("at least one training record is required"));
    }
    if xs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            actual: labels.len(),
        });
    }
    let h = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != h) {
        return Err(Error::DimensionMismatch {
            expected: h,
            actual: bad.len(),
        });
    }
    if !xs.iter().all(linalg::all_finite) {
        return Err(Error::NonFinite("training vectors"));
    }

    let n = xs.len();
    let mu0 = xs.iter().fold(DVector::zeros(h), |acc, x| acc + x) / n as f64;

    let mut groups: BTreeMap<&str, Vec<&DVector<f64>>> = BTreeMap::new();
    for (x, l) in xs.iter().zip(labels) {
        groups.entry(l.as_str()).or_default().push(x);
    }
    let mut scatter = DMatrix::zeros(h, h);
    for members in groups.values() {
        let mean = members.iter().fold(DVector::zeros(h), |acc, x| acc + *x) / members.len() as f64;
        for x in members {
            let d = *x - &mean;
            scatter += &d * d.transpose();
        }
    }
    let denom = n as f64 - groups.len() as f64;
    let mut sigma0 = if denom > 0.0 {
        scatter / denom
    } else {
        log::warn!(
            "pooled covariance undefined ({n} records, {} classes); using jitter",
            groups.len()
        );
        DMatrix::zeros(h, h)
    };
    linalg::symmetrize(&mut sigma0);
    let (_, jitter) = cholesky_jittered(&sigma0)?;
    for i in 0..h {
        sigma0[(i, i)] += jitter;
    }

    let m = h as f64 + config.m_offset;
    if config.sigma0_scale == Sigma0Scale::ExpectedCovariance {
        let factor = m - h as f64 - 1.0;
        if !(factor > 0.0) {
            return Err(Error::invalid("expected-covariance scaling needs m > h + 1"));
        }
        sigma0 *= factor;
    }
    NIWHyper::new(mu0, sigma0, config.kappa, m, config.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    #[test]
    fn defaults_for_h10() {
        let xs: Vec<_> = (0..4)
            .map(|i| DVector::from_fn(10, |j, _| ((i * 3 + j) % 7) as f64))
            .collect();
        let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let h = estimate_hyperparams(&xs, &labels, &HyperConfig::default()).unwrap();
        assert_eq!(h.m, 110.0);
        assert_eq!(h.kappa, 100.0);
        assert_eq!(h.alpha, 100.0);
    }

    #[test]
    fn pooled_covariance_hand_case() {
        let xs = vec![v(&[0.0, 0.0]), v(&[2.0, 0.0]), v(&[0.0, 2.0]), v(&[0.0, 0.0])];
        let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let h = estimate_hyperparams(&xs, &labels, &HyperConfig::default()).unwrap();
        let expect = DMatrix::identity(2, 2);
        assert!((&h.sigma0 - expect).abs().max() < 1e-15);
        assert_eq!(h.mu0, v(&[0.5, 0.5]));
    }

    #[test]
    fn single_record_falls_back_to_jitter() {
        let h = estimate_hyperparams(&[v(&[1.0, 2.0])], &["a".into()], &HyperConfig::default()).unwrap();
        assert_eq!(h.sigma0, DMatrix::identity(2, 2) * crate::linalg::JITTER_START);
    }

    #[test]
    fn empty_training_is_an_error() {
        assert!(estimate_hyperparams(&[], &[], &HyperConfig::default()).is_err());
    }

    #[test]
    fn invalid_dof_rejected() {
        let r = NIWHyper::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), 1.0, 1.0, 1.0);
        assert!(r.is_err());
        let ok = NIWHyper::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), 1.0, 1.5, 0.0);
        assert!(ok.is_ok());
    }
}
