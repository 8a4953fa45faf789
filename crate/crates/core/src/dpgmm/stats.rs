use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::serde_mat;

/// Count, mean and scatter `Σ (x − mean)(x − mean)ᵀ` of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: String,
    n: usize,
    #[serde(with = "serde_mat::vector")]
    mean: DVector<f64>,
    #[serde(with = "serde_mat::matrix")]
    scatter: DMatrix<f64>,
}

impl ClassStats {
    pub fn singleton(label: impl Into<String>, x: &DVector<f64>) -> Result<Self> {
        check_finite(x)?;
        let h = x.len();
        Ok(Self {
            label: label.into(),
            n: 1,
            mean: x.clone(),
            scatter: DMatrix::zeros(h, h),
        })
    }

    /// Two-pass batch statistics.
    pub fn from_points<'a, I>(label: impl Into<String>, points: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a DVector<f64>>,
    {
        let points: Vec<&DVector<f64>> = points.into_iter().collect();
        let first = points
            .first()
            .ok_or_else(|| Error::invalid("a class needs at least one point"))?;
        let h = first.len();
        for p in &points {
            if p.len() != h {
                return Err(Error::DimensionMismatch {
                    expected: h,
                    actual: p.len(),
                });
            }
            check_finite(p)?;
        }
        let n = points.len();
        let mean = points.iter().fold(DVector::zeros(h), |acc, p| acc + *p) / n as f64;
        let mut scatter = DMatrix::zeros(h, h);
        for p in &points {
            let d = *p - &mean;
            scatter += &d * d.transpose();
        }
        Ok(Self {
            label: label.into(),
            n,
            mean,
            scatter,
        })
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// `(n − 1)·S`, the sum of squared deviations.
    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Welford update with one more point.
    pub fn push(&mut self, x: &DVector<f64>) -> Result<()> {
        self.check(x)?;
        let old_n = self.n as f64;
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        // (x − m)(x − m')ᵀ = (n/(n+1))·δδᵀ, written symmetrically.
        self.scatter += (&delta * delta.transpose()) * (old_n / self.n as f64);
        Ok(())
    }

    /// Exact inverse of [`push`](Self::push). A class cannot drop below one point.
    pub fn remove(&mut self, x: &DVector<f64>) -> Result<()> {
        self.check(x)?;
        if self.n < 2 {
            return Err(Error::invalid(format!(
                "cannot remove a point from class `{}` with {} member(s)",
                self.label, self.n
            )));
        }
        let n = self.n as f64;
        let prev_mean = (&self.mean * n - x) / (n - 1.0);
        let delta = x - &prev_mean;
        self.scatter -= (&delta * delta.transpose()) * ((n - 1.0) / n);
        self.mean = prev_mean;
        self.n -= 1;
        if self.n == 1 {
            self.scatter.fill(0.0);
        }
        Ok(())
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        check_finite(x)
    }
}

fn check_finite(x: &DVector<f64>) -> Result<()> {
    if linalg::all_finite(x) {
        Ok(())
    } else {
        Err(Error::NonFinite("observation"))
    }
}
