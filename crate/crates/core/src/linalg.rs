//! Sparse matrices, Hermitian spectral helpers and matrix exponentials.

use nalgebra::{DMatrix, DVector};

use crate::error::{LabError, Result};
use crate::lattice::C64;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Square complex matrix in compressed sparse row form.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<C64>,
}

/// Row-wise accumulator; duplicate entries are summed on `build`.
pub struct SparseBuilder {
    dim: usize,
    rows: Vec<Vec<(usize, C64)>>,
}

impl SparseBuilder {
    pub fn new(dim: usize) -> Self {
        SparseBuilder {
            dim,
            rows: vec![Vec::new(); dim],
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: C64) {
        if value != ZERO {
            self.rows[row].push((col, value));
        }
    }

    pub fn build(self) -> SparseMatrix {
        let mut row_ptr = Vec::with_capacity(self.dim + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in self.rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            dim: self.dim,
            row_ptr,
            col_idx,
            values,
        }
    }
}

impl SparseMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec_into(&self, x: &[C64], y: &mut [C64]) {
        for (row, out) in y.iter_mut().enumerate() {
            let mut acc = ZERO;
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *out = acc;
        }
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![ZERO; self.dim];
        self.matvec_into(x, &mut y);
        y
    }

    /// `<x, A x>`.
    pub fn expectation(&self, x: &[C64]) -> C64 {
        let y = self.matvec(x);
        dot(x, &y)
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::from_element(self.dim, self.dim, ZERO);
        for row in 0..self.dim {
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                m[(row, self.col_idx[k])] += self.values[k];
            }
        }
        m
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim).flat_map(move |row| {
            (self.row_ptr[row]..self.row_ptr[row + 1])
                .map(move |k| (row, self.col_idx[k], self.values[k]))
        })
    }

    /// Largest `|A_ij - conj(A_ji)|`.
    pub fn hermiticity_residual(&self) -> f64 {
        let lookup = |r: usize, c: usize| -> C64 {
            let slice = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
            match slice.binary_search(&c) {
                Ok(k) => self.values[self.row_ptr[r] + k],
                Err(_) => ZERO,
            }
        };
        self.entries()
            .map(|(r, c, v)| (v - lookup(c, r).conj()).norm())
            .fold(0.0, f64::max)
    }

    /// Cheap upper bound on the spectral norm (max absolute row sum).
    pub fn norm_bound(&self) -> f64 {
        (0..self.dim)
            .map(|r| {
                self.values[self.row_ptr[r]..self.row_ptr[r + 1]]
                    .iter()
                    .map(|v| v.norm())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

/// `sum conj(a_i) b_i`.
pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn diff_norm(a: &[C64], b: &[C64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &DMatrix<C64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn hermiticity_residual_dense(m: &DMatrix<C64>) -> f64 {
    (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `exp(-i H t)` for a dense Hermitian `H`, by eigendecomposition.
pub fn unitary_propagator(h: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
    let eig = h.clone().symmetric_eigen();
    let u = &eig.eigenvectors;
    let phases = DMatrix::from_diagonal(&DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&e| C64::new(0.0, -e * t).exp()),
    ));
    u * phases * u.adjoint()
}

/// Dense matrix exponential by scaling and squaring of a Taylor series.
pub fn expm_taylor(a: &DMatrix<C64>) -> DMatrix<C64> {
    let n = a.nrows();
    let norm1 = (0..n)
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > 0.5 {
        (norm1 / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / C64::new(2f64.powi(squarings as i32), 0.0);
    let mut result = DMatrix::<C64>::identity(n, n);
    let mut term = DMatrix::<C64>::identity(n, n);
    for k in 1..40 {
        term = &term * &scaled / C64::new(k as f64, 0.0);
        result += &term;
        if term.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// `exp(A) v` for an operator given by its action, via sub-stepped Taylor series.
///
/// `norm_bound` must bound `||A||`; the interval is cut into pieces with
/// `||A|| / pieces <= 1` and each piece is summed until the term drops below
/// `tol` relative to the accumulated vector.
pub fn taylor_action(
    apply: impl Fn(&[C64], &mut [C64]),
    v: &[C64],
    norm_bound: f64,
    tol: f64,
) -> Vec<C64> {
    let pieces = norm_bound.ceil().max(1.0) as usize;
    let scale = 1.0 / pieces as f64;
    let mut current = v.to_vec();
    let mut term = vec![ZERO; v.len()];
    let mut next = vec![ZERO; v.len()];
    for _ in 0..pieces {
        term.copy_from_slice(&current);
        let mut acc = current.clone();
        for k in 1..200 {
            apply(&term, &mut next);
            let f = scale / k as f64;
            for (t, n) in term.iter_mut().zip(&next) {
                *t = n * f;
            }
            for (a, t) in acc.iter_mut().zip(&term) {
                *a += t;
            }
            if norm(&term) <= tol * norm(&acc).max(f64::MIN_POSITIVE) {
                break;
            }
        }
        current = acc;
    }
    current
}

/// Settings for Lanczos propagation of `exp(-i H t) v`.
#[derive(Clone, Copy, Debug)]
pub struct KrylovSettings {
    pub subspace_dim: usize,
    /// Target error per unit of propagated time.
    pub tolerance: f64,
    pub max_substeps: usize,
}

impl Default for KrylovSettings {
    fn default() -> Self {
        KrylovSettings {
            subspace_dim: 30,
            tolerance: 1e-12,
            max_substeps: 100_000,
        }
    }
}

/// `exp(-i H t) v` for Hermitian sparse `H`, Lanczos with adaptive sub-stepping.
pub fn krylov_propagate(
    h: &SparseMatrix,
    v: &[C64],
    t: f64,
    settings: &KrylovSettings,
) -> Result<Vec<C64>> {
    let mut state = v.to_vec();
    if t == 0.0 {
        return Ok(state);
    }
    let total = t.abs();
    let sign = t.signum();
    let mut done = 0.0;
    let mut tau = (1.0 / h.norm_bound().max(1e-12)).min(total) * 5.0;
    tau = tau.min(total);
    let mut substeps = 0;
    while done < total * (1.0 - 1e-15) {
        tau = tau.min(total - done);
        let beta0 = norm(&state);
        if beta0 == 0.0 {
            return Ok(state);
        }
        let basis = lanczos(h, &state, settings.subspace_dim);
        loop {
            substeps += 1;
            if substeps > settings.max_substeps {
                return Err(LabError::KrylovNonConvergence { residual: f64::NAN });
            }
            let (coeffs, err) = basis.exp_coefficients(sign * tau);
            let err = err * beta0;
            // the a-posteriori estimate cannot go below round-off of the step
            let allowed = (settings.tolerance * tau.max(1e-3 * total)).max(64.0 * f64::EPSILON * beta0);
            if err <= allowed || basis.exhausted {
                let mut next = vec![ZERO; state.len()];
                for (c, q) in coeffs.iter().zip(&basis.vectors) {
                    for (n, x) in next.iter_mut().zip(q) {
                        *n += c * x * beta0;
                    }
                }
                state = next;
                done += tau;
                if err > 0.0 {
                    let grow = 0.9 * (allowed / err).powf(1.0 / basis.len() as f64);
                    tau *= grow.clamp(1.0, 2.0);
                } else {
                    tau *= 2.0;
                }
                break;
            }
            let shrink = 0.9 * (allowed / err).powf(1.0 / basis.len() as f64);
            tau *= shrink.clamp(0.1, 0.9);
            if tau < total * 1e-14 {
                return Err(LabError::KrylovNonConvergence { residual: err });
            }
        }
        if !state.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(LabError::IntegrationFailure {
                last_valid_time: sign * done,
                reason: "non-finite amplitudes in Krylov propagation".into(),
            });
        }
    }
    Ok(state)
}

struct LanczosBasis {
    vectors: Vec<Vec<C64>>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    /// Norm of the residual vector beyond the last basis vector.
    beta_next: f64,
    exhausted: bool,
}

impl LanczosBasis {
    fn len(&self) -> usize {
        self.vectors.len()
    }

    /// Coefficients of `exp(-i T t) e_1` and the a-posteriori error estimate.
    fn exp_coefficients(&self, t: f64) -> (Vec<C64>, f64) {
        let m = self.len();
        let tri = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                self.alpha[i]
            } else if i + 1 == j {
                self.beta[i]
            } else if j + 1 == i {
                self.beta[j]
            } else {
                0.0
            }
        });
        // Taylor keeps the small trailing coefficient relatively accurate,
        // which the error estimate depends on.
        let exp = expm_taylor(&tri.map(|x| C64::new(0.0, -x * t)));
        let coeffs: Vec<C64> = exp.column(0).iter().copied().collect();
        let err = if self.exhausted {
            0.0
        } else {
            self.beta_next * coeffs[m - 1].norm()
        };
        (coeffs, err)
    }
}

fn lanczos(h: &SparseMatrix, v: &[C64], m: usize) -> LanczosBasis {
    let dim = v.len();
    let m = m.min(dim).max(1);
    let beta0 = norm(v);
    let mut vectors = vec![v.iter().map(|z| z / beta0).collect::<Vec<_>>()];
    let mut alpha = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    let mut w = vec![ZERO; dim];
    let mut beta_next = 0.0;
    let mut exhausted = false;
    for j in 0..m {
        h.matvec_into(&vectors[j], &mut w);
        let a = dot(&vectors[j], &w).re;
        alpha.push(a);
        // full reorthogonalization, twice
        for _ in 0..2 {
            for q in &vectors {
                let c = dot(q, &w);
                for (x, y) in w.iter_mut().zip(q) {
                    *x -= c * y;
                }
            }
        }
        let b = norm(&w);
        if b < 1e-13 * (1.0 + a.abs()) {
            exhausted = true;
            break;
        }
        if j + 1 == m {
            beta_next = b;
            break;
        }
        beta.push(b);
        vectors.push(w.iter().map(|z| z / b).collect());
    }
    LanczosBasis {
        vectors,
        alpha,
        beta,
        beta_next,
        exhausted: exhausted || dim <= m,
    }
}
