//! Small dense linear-algebra helpers shared by the density code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added on the first retry, as a multiple of `trace / h`.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-2;

/// Cholesky factor of a symmetric matrix, adding diagonal jitter when the
/// plain factorization fails.
///
/// The jitter schedule is `1e-8 * trace/h`, escalated by ×10 up to
/// `1e-2 * trace/h`. Returns the factor and the absolute jitter that was used.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let h = m.nrows().max(1) as f64;
    let mut scale = m.trace() / h;
    if !(scale.is_finite() && scale > 0.0) {
        scale = 1.0;
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok((c, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        jitter: JITTER_MAX * scale,
    })
}

/// `log |A|` from a Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `qᵀ A⁻¹ q` via a triangular solve against the Cholesky factor.
pub fn mahalanobis_sq(chol: &Cholesky<f64, Dyn>, q: &DVector<f64>) -> f64 {
    let l = chol.l();
    let z = l
        .solve_lower_triangular(q)
        .expect("cholesky factor has a positive diagonal");
    z.norm_squared()
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Forces exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
