//! Batch non-negative matrix factorization and per-record projection onto
//! the learned basis.
//!
//! Training records are factorized as `X ≈ C·B` (n×h coefficients times an
//! h×d basis) with Lee–Seung multiplicative updates on the squared Frobenius
//! loss. Records arriving later are embedded by solving a non-negative least
//! squares problem against the frozen basis.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Guards the multiplicative-update denominators against 0/0. Enlarging a
/// denominator keeps the update a majorize–minimize step.
const DENOM_EPS: f64 = 1e-300;

/// h×d non-negative basis; each row is one basis vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    matrix: DMatrix<f64>,
}

impl Basis {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("basis"));
        }
        if matrix.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("basis entries must be non-negative"));
        }
        if matrix.nrows() == 0 || matrix.nrows() > matrix.ncols() {
            return Err(Error::invalid(format!(
                "basis must satisfy 1 <= h <= d, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { matrix })
    }

    /// Latent dimension.
    pub fn rank(&self) -> usize {
        self.matrix.nrows()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Plain-text matrix: a `h d` header then one row per line.
    ///
    /// Values use the shortest representation that parses back to the same
    /// bits, so a reload is exact.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.rank(), self.dim())?;
        for r in 0..self.rank() {
            let row: Vec<String> = (0..self.dim()).map(|c| format!("{}", self.matrix[(r, c)])).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing header".into(),
        })??;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?;
        let [h, d] = dims[..] else {
            return Err(Error::Parse {
                line: 1,
                message: "header must be `h d`".into(),
            });
        };
        let mut data = Vec::with_capacity(h * d);
        for r in 0..h {
            let line = lines.next().ok_or_else(|| Error::Parse {
                line: r + 2,
                message: "truncated basis".into(),
            })??;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: r + 2,
                    message: format!("bad value: {e}"),
                })?;
            if row.len() != d {
                return Err(Error::Parse {
                    line: r + 2,
                    message: format!("expected {d} values, found {}", row.len()),
                });
            }
            data.extend(row);
        }
        Self::new(DMatrix::from_row_slice(h, d, &data))
    }
}

/// Non-negative embedding of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(DVector<f64>);

impl LatentVector {
    pub fn new(v: DVector<f64>) -> Result<Self> {
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("latent vector"));
        }
        if v.iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("latent coefficients must be non-negative"));
        }
        Ok(Self(v))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnmfOptions {
    pub max_iters: usize,
    /// Stop once the relative decrease of the loss falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for NnmfOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NnmfFit {
    /// n×h coefficients of the training rows.
    pub coefficients: DMatrix<f64>,
    pub basis: Basis,
    /// Squared Frobenius error before the first update and after each one.
    pub history: Vec<f64>,
}

impl NnmfFit {
    pub fn final_error(&self) -> f64 {
        *self.history.last().expect("history holds the initial error")
    }
}

fn frobenius_error(x: &DMatrix<f64>, c: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (x - c * b).norm_squared()
}

/// Factorizes a non-negative n×d matrix into n×h coefficients and an h×d basis.
pub fn nnmf_fit(x: &DMatrix<f64>, h: usize, opts: &NnmfOptions) -> Result<NnmfFit> {
    let (n, d) = x.shape();
    if h == 0 || h > n.min(d) {
        return Err(Error::invalid(format!("latent dimension {h} outside 1..={}", n.min(d))));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix"));
    }
    if x.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("feature matrix must be non-negative"));
    }
    let mean = x.mean();
    if mean <= 0.0 {
        return Err(Error::invalid("cannot factorize an all-zero matrix"));
    }

    let mut rng = rng::stream(opts.seed, Purpose::Factorization, 0, 0);
    let scale = (mean / h as f64).sqrt();
    // (0, 1] so no factor starts at an absorbing zero.
    let mut init = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| (1.0 - rng.random::<f64>()) * scale);
    let mut c = init(n, h);
    let mut b = init(h, d);

    let mut history = vec![frobenius_error(x, &c, &b)];
    for _ in 0..opts.max_iters {
        let num_b = c.transpose() * x;
        let den_b = (c.transpose() * &c) * &b;
        b.zip_zip_apply(&num_b, &den_b, |v, num, den| *v *= num / (den + DENOM_EPS));

        let num_c = x * b.transpose();
        let den_c = &c * (&b * b.transpose());
        c.zip_zip_apply(&num_c, &den_c, |v, num, den| *v *= num / (den + DENOM_EPS));

        let err = frobenius_error(x, &c, &b);
        let prev = *history.last().unwrap();
        history.push(err);
        if err == 0.0 || (prev - err) / prev < opts.tol {
            break;
        }
    }

    Ok(NnmfFit {
        coefficients: c,
        basis: Basis::new(b)?,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnlsOptions {
    /// KKT residual tolerance.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for NnlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 10_000,
        }
    }
}

/// Quadratic `‖x − cB‖²` expressed through the Gram matrix `G = BBᵀ` and
/// `b = Bx`: `cᵀGc − 2bᵀc + xᵀx`.
struct Quadratic {
    gram: DMatrix<f64>,
    lin: DVector<f64>,
    constant: f64,
}

impl Quadratic {
    fn value(&self, c: &DVector<f64>) -> f64 {
        (c.dot(&(&self.gram * c)) - 2.0 * self.lin.dot(c) + self.constant).max(0.0)
    }

    fn gradient(&self, c: &DVector<f64>) -> DVector<f64> {
        2.0 * (&self.gram * c - &self.lin)
    }
}

/// Worst violation of the non-negativity KKT conditions.
pub fn kkt_residual(c: &DVector<f64>, grad: &DVector<f64>, tol: f64) -> f64 {
    c.iter()
        .zip(grad.iter())
        .map(|(&cj, &gj)| if cj <= tol { (-gj).max(0.0) } else { gj.abs() })
        .fold(0.0, f64::max)
}

/// Objective `‖x − cB‖²` for a coefficient vector.
pub fn projection_objective(x: &DVector<f64>, c: &DVector<f64>, basis: &Basis) -> f64 {
    (x - basis.matrix().transpose() * c).norm_squared()
}

/// Embeds one d-dimensional record as non-negative coefficients over the basis.
///
/// Projected gradient descent with Barzilai–Borwein trial steps and Armijo
/// backtracking along the projection arc; stops when the KKT residual is
/// within `tol`.
pub fn nnls_project(x: &DVector<f64>, basis: &Basis, opts: &NnlsOptions) -> Result<LatentVector> {
    if x.len() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            actual: x.len(),
        });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("record features"));
    }
    let b = basis.matrix();
    let q = Quadratic {
        gram: b * b.transpose(),
        lin: b * x,
        constant: x.norm_squared(),
    };
    let h = basis.rank();
    // Largest eigenvalue bound of the Hessian 2G for a safe fallback step.
    let lipschitz = 2.0 * q.gram.row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max);
    if lipschitz == 0.0 {
        return LatentVector::new(DVector::zeros(h));
    }

    let mut c = DVector::zeros(h);
    let mut f = q.value(&c);
    let mut g = q.gradient(&c);
    let mut step = 1.0 / lipschitz;
    for _ in 0..opts.max_iters {
        if kkt_residual(&c, &g, opts.tol) <= opts.tol {
            break;
        }
        let mut t = step;
        let (c_new, f_new) = loop {
            let trial = (&c - t * &g).map(|v| v.max(0.0));
            let f_trial = q.value(&trial);
            let decrease = g.dot(&(&trial - &c));
            if f_trial <= f + 1e-4 * decrease || t < 1e-20 {
                break (trial, f_trial);
            }
            t *= 0.5;
        };
        let g_new = q.gradient(&c_new);
        let s = &c_new - &c;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        step = if sy > 0.0 {
            (s.norm_squared() / sy).clamp(1e-12 / lipschitz, 1e12 / lipschitz)
        } else {
            1.0 / lipschitz
        };
        if s.norm_squared() == 0.0 && t < 1e-20 {
            break;
        }
        c = c_new;
        f = f_new;
        g = g_new;
    }
    LatentVector::new(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(rows: usize, cols: usize, data: &[f64]) -> Basis {
        Basis::new(DMatrix::from_row_slice(rows, cols, data)).unwrap()
    }

    #[test]
    fn identity_basis_reproduces_input() {
        let b = basis(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = nnls_project(&DVector::from_vec(vec![0.5, 0.2]), &b, &Default::default()).unwrap();
        assert!((c.as_vector()[0] - 0.5).abs() < 1e-6);
        assert!((c.as_vector()[1] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_input_projects_to_zero() {
        let b = basis(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let c = nnls_project(&DVector::from_vec(vec![0.0, 0.0, 3.0]), &b, &Default::default()).unwrap();
        assert_eq!(c.as_vector(), &DVector::zeros(2));
    }

    #[test]
    fn negative_unconstrained_solution_is_clipped() {
        // Unconstrained optimum is c = (-0.8, 1); clipped: c = (0, 0.6).
        let b = basis(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![0.2, 1.0]);
        let c = nnls_project(&x, &b, &Default::default()).unwrap();
        assert!(c.as_vector()[0].abs() < 1e-9);
        assert!((c.as_vector()[1] - 0.6).abs() < 1e-6);
        let g = 2.0 * (b.matrix() * b.matrix().transpose() * c.as_vector() - b.matrix() * &x);
        assert!(kkt_residual(c.as_vector(), &g, 1e-6) <= 1e-6);
    }

    #[test]
    fn non_finite_input_rejected() {
        let b = basis(1, 2, &[1.0, 1.0]);
        let x = DVector::from_vec(vec![f64::NAN, 0.0]);
        assert!(matches!(
            nnls_project(&x, &b, &Default::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn zero_basis_row_contributes_nothing() {
        let b = basis(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let c = nnls_project(&DVector::from_vec(vec![1.0, 2.0]), &b, &Default::default()).unwrap();
        assert!((c.as_vector()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn rank_out_of_range() {
        let x = DMatrix::from_element(3, 2, 1.0);
        assert!(nnmf_fit(&x, 0, &Default::default()).is_err());
        assert!(nnmf_fit(&x, 3, &Default::default()).is_err());
    }

    #[test]
    fn zero_matrix_rejected() {
        let x = DMatrix::zeros(3, 3);
        assert!(nnmf_fit(&x, 1, &Default::default()).is_err());
    }

    #[test]
    fn diagonal_two_by_two_factorizes_exactly() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let opts = NnmfOptions {
            max_iters: 5000,
            tol: 0.0,
            seed: 3,
        };
        let fit = nnmf_fit(&x, 2, &opts).unwrap();
        assert!(fit.final_error() < 1e-8, "error {}", fit.final_error());
    }

    #[test]
    fn fit_is_reproducible_from_seed() {
        let x = DMatrix::from_fn(5, 4, |i, j| ((i * 7 + j * 3) % 5) as f64);
        let opts = NnmfOptions {
            max_iters: 50,
            tol: 0.0,
            seed: 11,
        };
        let a = nnmf_fit(&x, 2, &opts).unwrap();
        let b = nnmf_fit(&x, 2, &opts).unwrap();
        assert_eq!(a.basis, b.basis);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn basis_text_reload_is_bit_exact() {
        let b = basis(2, 3, &[0.1, 1.0 / 3.0, 2e-300, 7.0, 0.0, std::f64::consts::PI]);
        let mut buf = Vec::new();
        b.write(&mut buf).unwrap();
        let back = Basis::read(buf.as_slice()).unwrap();
        for (u, v) in b.matrix().iter().zip(back.matrix().iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn truncated_basis_file_rejected() {
        assert!(Basis::read("2 2\n1 0\n".as_bytes()).is_err());
        assert!(Basis::read("".as_bytes()).is_err());
    }
}
