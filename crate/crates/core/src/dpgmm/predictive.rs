use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use super::hyper::NIWHyper;
use super::stats::ClassStats;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, log_det, mahalanobis_sq};

/// Location, scale and degrees of freedom of a multivariate student-t.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveParams {
    pub mean: DVector<f64>,
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

/// Posterior predictive of a class under the NIW prior.
///
/// `None` stands for a class with no members: the predictive of a brand-new
/// class, where every data term vanishes.
pub fn predictive_params(stats: Option<&ClassStats>, hyper: &NIWHyper) -> PredictiveParams {
    let h = hyper.dim() as f64;
    let kappa = hyper.kappa;
    let m = hyper.m;
    match stats {
        None => PredictiveParams {
            mean: hyper.mu0.clone(),
            scale: &hyper.sigma0 * ((kappa + 1.0) / (kappa * (m + 1.0 - h))),
            dof: m + 1.0 - h,
        },
        Some(s) => {
            let n = s.count() as f64;
            let mean = (s.mean() * n + &hyper.mu0 * kappa) / (n + kappa);
            let d = &hyper.mu0 - s.mean();
            let inner = &hyper.sigma0 + s.scatter() + (&d * d.transpose()) * (n * kappa / (n + kappa));
            let factor = (n + kappa + 1.0) / ((n + kappa) * (n + m + 1.0 - h));
            PredictiveParams {
                mean,
                scale: inner * factor,
                dof: n + m + 1.0 - h,
            }
        }
    }
}

/// Log density of the h-dimensional student-t, evaluated through a Cholesky
/// factor of the scale matrix.
pub fn studentt_logpdf(x: &DVector<f64>, p: &PredictiveParams) -> Result<f64> {
    let h = p.mean.len();
    if x.len() != h {
        return Err(Error::DimensionMismatch {
            expected: h,
            actual: x.len(),
        });
    }
    let (chol, _) = cholesky_jittered(&p.scale)?;
    let q = x - &p.mean;
    let maha = mahalanobis_sq(&chol, &q);
    let hf = h as f64;
    let v = p.dof;
    let value = ln_gamma((v + hf) / 2.0)
        - ln_gamma(v / 2.0)
        - 0.5 * hf * (v * PI).ln()
        - 0.5 * log_det(&chol)
        - 0.5 * (v + hf) * (maha / v).ln_1p();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("student-t log density"))
    }
}

/// `log p(x | class)` under the posterior predictive of `stats` (or of an
/// empty class).
pub fn log_predictive(x: &DVector<f64>, stats: Option<&ClassStats>, hyper: &NIWHyper) -> Result<f64> {
    studentt_logpdf(x, &predictive_params(stats, hyper))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper1(mu0: f64, s0: f64, kappa: f64, m: f64) -> NIWHyper {
        NIWHyper::new(
            DVector::from_element(1, mu0),
            DMatrix::from_element(1, 1, s0),
            kappa,
            m,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn empty_class_with_default_prior() {
        let h = 10;
        let hyper = NIWHyper::new(
            DVector::from_element(h, 0.3),
            DMatrix::identity(h, h) * 2.0,
            100.0,
            h as f64 + 100.0,
            100.0,
        )
        .unwrap();
        let p = predictive_params(None, &hyper);
        assert_eq!(p.mean, hyper.mu0);
        assert_eq!(p.dof, 101.0);
        let expect = &hyper.sigma0 / 100.0;
        assert!((&p.scale - expect).abs().max() < 1e-15);
    }

    #[test]
    fn dof_for_five_members() {
        let h = 10;
        let hyper = NIWHyper::new(DVector::zeros(h), DMatrix::identity(h, h), 100.0, 110.0, 1.0).unwrap();
        let pts: Vec<_> = (0..5).map(|i| DVector::from_element(h, i as f64)).collect();
        let s = ClassStats::from_points("a", &pts).unwrap();
        assert_eq!(predictive_params(Some(&s), &hyper).dof, 106.0);
    }

    #[test]
    fn scalar_student_t_closed_form() {
        // h = 1, location 0, scale 1, dof 3 at x = 0.
        let p = PredictiveParams {
            mean: DVector::zeros(1),
            scale: DMatrix::identity(1, 1),
            dof: 3.0,
        };
        let got = studentt_logpdf(&DVector::zeros(1), &p).unwrap();
        // Γ(2) = 1, Γ(1.5) = √π / 2.
        let expect = (1.0 / ((PI.sqrt() / 2.0) * (3.0 * PI).sqrt())).ln();
        assert!((got - expect).abs() < 1e-13, "{got} vs {expect}");
    }

    #[test]
    fn hand_expanded_scalar_forms() {
        let (mu0, s0, kappa, m) = (0.5, 2.0, 3.0, 4.0);
        let hyper = hyper1(mu0, s0, kappa, m);

        let one = ClassStats::singleton("a", &DVector::from_element(1, 2.0)).unwrap();
        let p = predictive_params(Some(&one), &hyper);
        // n = 1: mean (2 + 1.5)/4, scale 5/(4·5)·(2 + 0 + 3/4·2.25), dof 5.
        assert!((p.mean[0] - 3.5 / 4.0).abs() < 1e-15);
        assert!((p.scale[(0, 0)] - 0.25 * (2.0 + 0.75 * 2.25)).abs() < 1e-15);
        assert_eq!(p.dof, 5.0);
    }

    #[test]
    fn dimension_mismatch() {
        let p = predictive_params(None, &hyper1(0.0, 1.0, 1.0, 3.0));
        assert!(studentt_logpdf(&DVector::zeros(2), &p).is_err());
    }
}
