//! Exact dynamics of `N` bosons on `M` lattice modes.
//!
//! States live in the occupation-number basis of the symmetric `N`-particle
//! space. The mean-field Hamiltonian in second quantization is
//!
//! ```text
//! H = sum_pq h_pq a*_p a_q + (kappa / 2N) sum_pq v_pq a*_p a*_q a_q a_p
//! ```
//!
//! with site modes `c_p = sqrt(h) phi(x_p)` and `v_pq = V(x_p - x_q)`.
//! Reduced densities are normalized to unit trace:
//! `gamma^(k)_{P,Q} = <a*_Q a_P> / (N (N-1) ... (N-k+1))`, where `a_P` is the
//! product of annihilators for the multi-index `P = (p1, ..., pk)`, `p1` most
//! significant when flattened.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use log::debug;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::lattice::{WaveFunction, C64};
use crate::linalg::{self, KrylovSettings, SparseBuilder, SparseMatrix};
use crate::solvers::{self, EffectiveModel, Interaction, Scheme, SolverConfig};

/// Default cap on the basis dimension.
pub const DEFAULT_BASIS_CAP: usize = 200_000;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Occupation-number basis of `N` bosons in `M` modes.
///
/// Canonical order is reverse lexicographic: `(N, 0, ..., 0)` first,
/// `(0, ..., 0, N)` last.
#[derive(Debug)]
pub struct BosonBasis {
    modes: usize,
    particles: usize,
    occupations: Vec<u32>,
    index: HashMap<Box<[u32]>, usize>,
}

impl BosonBasis {
    /// Basis with an explicit cap; `particles = 0` is allowed (the vacuum sector).
    pub fn with_cap(modes: usize, particles: usize, cap: usize) -> Result<Self> {
        if modes == 0 {
            return Err(LabError::InvalidInput("basis needs at least one mode".into()));
        }
        let dimension = binomial(particles + modes - 1, particles);
        if dimension > cap as f64 {
            return Err(LabError::Size {
                dimension: dimension.min(usize::MAX as f64) as usize,
                cap,
            });
        }
        let dimension = dimension as usize;
        let mut occupations = Vec::with_capacity(dimension * modes);
        let mut current = vec![0u32; modes];
        enumerate(&mut current, 0, particles as u32, &mut occupations);
        let index = occupations
            .chunks(modes)
            .enumerate()
            .map(|(i, occ)| (occ.to_vec().into_boxed_slice(), i))
            .collect();
        let basis = BosonBasis {
            modes,
            particles,
            occupations,
            index,
        };
        debug_assert_eq!(basis.dimension(), dimension);
        Ok(basis)
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn dimension(&self) -> usize {
        self.occupations.len() / self.modes
    }

    pub fn occupation(&self, i: usize) -> &[u32] {
        &self.occupations[i * self.modes..(i + 1) * self.modes]
    }

    pub fn occupations(&self) -> impl Iterator<Item = &[u32]> {
        self.occupations.chunks(self.modes)
    }

    pub fn index_of(&self, occupation: &[u32]) -> Option<usize> {
        self.index.get(occupation).copied()
    }
}

impl PartialEq for BosonBasis {
    fn eq(&self, other: &Self) -> bool {
        self.modes == other.modes && self.particles == other.particles
    }
}

fn enumerate(current: &mut [u32], pos: usize, remaining: u32, out: &mut Vec<u32>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.extend_from_slice(current);
        return;
    }
    for n in (0..=remaining).rev() {
        current[pos] = n;
        enumerate(current, pos + 1, remaining - n, out);
    }
    current[pos] = 0;
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64).round()
}

/// `N`-particle basis over `M` modes with the default cap.
pub fn build_basis(modes: usize, particles: usize) -> Result<BosonBasis> {
    if particles == 0 {
        return Err(LabError::InvalidInput("particle number must be >= 1".into()));
    }
    BosonBasis::with_cap(modes, particles, DEFAULT_BASIS_CAP)
}

/// `ln(n!)` for `n = 0..=max`.
pub(crate) fn ln_factorials(max: usize) -> Vec<f64> {
    let mut table = vec![0.0; max + 1];
    for n in 1..=max {
        table[n] = table[n - 1] + (n as f64).ln();
    }
    table
}

/// `a_p` from the `n`-particle sector into the `(n-1)`-particle sector.
pub(crate) fn annihilate(from: &BosonBasis, to: &BosonBasis, p: usize, x: &[C64]) -> Vec<C64> {
    debug_assert_eq!(from.particles, to.particles + 1);
    let mut out = vec![ZERO; to.dimension()];
    let mut occ = vec![0u32; from.modes];
    for (i, amp) in x.iter().enumerate() {
        let src = from.occupation(i);
        if src[p] == 0 || *amp == ZERO {
            continue;
        }
        occ.copy_from_slice(src);
        occ[p] -= 1;
        let j = to.index_of(&occ).expect("target occupation in basis");
        out[j] += amp * (src[p] as f64).sqrt();
    }
    out
}

/// `a*_p` from the `n`-particle sector into the `(n+1)`-particle sector.
pub(crate) fn create(from: &BosonBasis, to: &BosonBasis, p: usize, x: &[C64]) -> Vec<C64> {
    debug_assert_eq!(from.particles + 1, to.particles);
    let mut out = vec![ZERO; to.dimension()];
    let mut occ = vec![0u32; from.modes];
    for (i, amp) in x.iter().enumerate() {
        if *amp == ZERO {
            continue;
        }
        occ.copy_from_slice(from.occupation(i));
        occ[p] += 1;
        let j = to.index_of(&occ).expect("target occupation in basis");
        out[j] += amp * (occ[p] as f64).sqrt();
    }
    out
}

#[derive(Clone, Debug)]
pub struct ManyBodyState {
    basis: Arc<BosonBasis>,
    coefficients: Vec<C64>,
}

impl ManyBodyState {
    pub fn new(basis: Arc<BosonBasis>, coefficients: Vec<C64>) -> Result<Self> {
        if coefficients.len() != basis.dimension() {
            return Err(LabError::dim("many-body coefficients", basis.dimension(), coefficients.len()));
        }
        if !coefficients.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(LabError::InvalidInput("many-body coefficients must be finite".into()));
        }
        Ok(ManyBodyState { basis, coefficients })
    }

    /// `|n>` for the basis element with index `i`.
    pub fn basis_state(basis: Arc<BosonBasis>, i: usize) -> Self {
        let mut coefficients = vec![ZERO; basis.dimension()];
        coefficients[i] = C64::new(1.0, 0.0);
        ManyBodyState { basis, coefficients }
    }

    /// The symmetric product `c^{(x) N}` for mode coefficients `c`.
    ///
    /// Coefficient of `|n>` is `sqrt(N! / prod n_p!) prod c_p^{n_p}`; the norm is `|c|^{2N}`.
    pub fn product(basis: Arc<BosonBasis>, c: &[C64]) -> Result<Self> {
        if c.len() != basis.modes {
            return Err(LabError::dim("orbital modes", basis.modes, c.len()));
        }
        let lnf = ln_factorials(basis.particles);
        let coefficients = basis
            .occupations()
            .map(|occ| {
                let mut log_mag = 0.5 * lnf[basis.particles];
                let mut phase = 0.0;
                for (&n, z) in occ.iter().zip(c) {
                    if n == 0 {
                        continue;
                    }
                    if *z == ZERO {
                        return ZERO;
                    }
                    log_mag += n as f64 * z.norm().ln() - 0.5 * lnf[n as usize];
                    phase += n as f64 * z.arg();
                }
                C64::from_polar(log_mag.exp(), phase)
            })
            .collect();
        Ok(ManyBodyState { basis, coefficients })
    }

    /// `phi^{(x) N}` for a lattice wave function; site modes are `sqrt(h) phi`.
    pub fn from_wave_function(basis: Arc<BosonBasis>, phi: &WaveFunction) -> Result<Self> {
        Self::product(basis, &site_modes(phi))
    }

    pub fn basis(&self) -> &Arc<BosonBasis> {
        &self.basis
    }

    pub fn coefficients(&self) -> &[C64] {
        &self.coefficients
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.coefficients)
    }

    pub fn inner(&self, other: &ManyBodyState) -> Result<C64> {
        if *self.basis != *other.basis {
            return Err(LabError::InvalidInput("states live in different bases".into()));
        }
        Ok(linalg::dot(&self.coefficients, &other.coefficients))
    }
}

/// Site-mode coefficients `sqrt(h) phi_j`, orthonormal for the lattice inner product.
pub fn site_modes(phi: &WaveFunction) -> Vec<C64> {
    let s = phi.grid().spacing().sqrt();
    phi.amplitudes().iter().map(|z| z * s).collect()
}

/// Mode-space description of a lattice model: one-body matrix, interaction
/// table and signed coupling (negative for attractive models).
#[derive(Clone, Debug)]
pub struct LatticeModel {
    pub one_body: DMatrix<C64>,
    pub interaction: DMatrix<f64>,
    pub coupling: f64,
}

impl LatticeModel {
    pub fn new(one_body: DMatrix<C64>, interaction: DMatrix<f64>, coupling: f64) -> Result<Self> {
        let m = one_body.nrows();
        if one_body.ncols() != m {
            return Err(LabError::dim("one-body matrix columns", m, one_body.ncols()));
        }
        if interaction.nrows() != m || interaction.ncols() != m {
            return Err(LabError::dim("interaction table", m, interaction.nrows()));
        }
        let herm = linalg::hermiticity_residual_dense(&one_body);
        if herm > 1e-12 * (1.0 + one_body.camax()) {
            return Err(LabError::InvalidInput(format!(
                "one-body matrix is not Hermitian (residual {herm:e})"
            )));
        }
        let asym = (&interaction - interaction.transpose()).camax();
        if asym > 1e-12 * (1.0 + interaction.camax()) {
            return Err(LabError::InvalidInput(format!(
                "interaction table is not symmetric (residual {asym:e})"
            )));
        }
        if !coupling.is_finite() {
            return Err(LabError::InvalidInput("coupling must be finite".into()));
        }
        Ok(LatticeModel {
            one_body,
            interaction,
            coupling,
        })
    }

    /// Kinetic site matrix plus external potential; contact interactions use the lattice delta.
    pub fn from_effective(model: &EffectiveModel) -> Result<Self> {
        let grid = model.grid();
        let mut one_body = model.kinetic().site_matrix(grid)?.map(|x| C64::new(x, 0.0));
        for (j, v) in model.external().iter().enumerate() {
            one_body[(j, j)] += v;
        }
        let interaction = match model.interaction() {
            Interaction::Kernel(k) => k.interaction_table(),
            Interaction::Contact => {
                DMatrix::from_diagonal_element(grid.num_sites(), grid.num_sites(), 1.0 / grid.spacing())
            }
        };
        Self::new(one_body, interaction, model.interaction_strength())
    }

    pub fn modes(&self) -> usize {
        self.one_body.nrows()
    }
}

/// Hermitian many-body operator on a fixed basis.
#[derive(Clone, Debug)]
pub struct ManyBodyOperator {
    basis: Arc<BosonBasis>,
    matrix: SparseMatrix,
}

impl ManyBodyOperator {
    pub fn basis(&self) -> &Arc<BosonBasis> {
        &self.basis
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        self.matrix.to_dense()
    }

    pub fn hermiticity_residual(&self) -> f64 {
        self.matrix.hermiticity_residual()
    }

    pub fn apply(&self, psi: &ManyBodyState) -> Result<ManyBodyState> {
        self.check_basis(psi)?;
        Ok(ManyBodyState {
            basis: self.basis.clone(),
            coefficients: self.matrix.matvec(&psi.coefficients),
        })
    }

    /// `<psi, H psi>` (not divided by the norm).
    pub fn expectation(&self, psi: &ManyBodyState) -> Result<f64> {
        self.check_basis(psi)?;
        Ok(self.matrix.expectation(&psi.coefficients).re)
    }

    fn check_basis(&self, psi: &ManyBodyState) -> Result<()> {
        if *psi.basis != *self.basis {
            return Err(LabError::InvalidInput(format!(
                "state basis (M={}, N={}) does not match operator basis (M={}, N={})",
                psi.basis.modes, psi.basis.particles, self.basis.modes, self.basis.particles
            )));
        }
        Ok(())
    }
}

/// `sum h_pq a*_p a_q + (w / 2) sum v_pq a*_p a*_q a_q a_p` on one particle-number sector.
pub(crate) fn second_quantized(
    h: &DMatrix<C64>,
    v: &DMatrix<f64>,
    weight: f64,
    basis: &BosonBasis,
) -> SparseMatrix {
    let m = basis.modes;
    let mut builder = SparseBuilder::new(basis.dimension());
    let mut occ = vec![0u32; m];
    for (s, src) in basis.occupations().enumerate() {
        let mut diag = 0.0;
        for p in 0..m {
            let np = src[p] as f64;
            diag += h[(p, p)].re * np;
            for q in 0..m {
                let nq = src[q] as f64;
                let pair = if p == q { np * (np - 1.0) } else { np * nq };
                diag += 0.5 * weight * v[(p, q)] * pair;
            }
        }
        builder.add(s, s, C64::new(diag, 0.0));
        for q in 0..m {
            if src[q] == 0 {
                continue;
            }
            for p in 0..m {
                if p == q || h[(p, q)] == ZERO {
                    continue;
                }
                occ.copy_from_slice(src);
                occ[q] -= 1;
                occ[p] += 1;
                let amp = (src[q] as f64 * occ[p] as f64).sqrt();
                let t = basis.index_of(&occ).expect("hop stays in the sector");
                builder.add(t, s, h[(p, q)] * amp);
            }
        }
    }
    builder.build()
}

/// The mean-field Hamiltonian with the `1/N` weight for `N = basis.particles()`.
pub fn build_mean_field_hamiltonian(
    h: &DMatrix<C64>,
    v: &DMatrix<f64>,
    kappa: f64,
    basis: Arc<BosonBasis>,
) -> Result<ManyBodyOperator> {
    let model = LatticeModel::new(h.clone(), v.clone(), kappa)?;
    model_hamiltonian(&model, basis)
}

pub fn model_hamiltonian(model: &LatticeModel, basis: Arc<BosonBasis>) -> Result<ManyBodyOperator> {
    if model.modes() != basis.modes {
        return Err(LabError::dim("lattice model modes", basis.modes, model.modes()));
    }
    let weight = model.coupling / basis.particles.max(1) as f64;
    let matrix = second_quantized(&model.one_body, &model.interaction, weight, &basis);
    Ok(ManyBodyOperator { basis, matrix })
}

#[derive(Clone, Copy, Debug)]
pub struct PropagationSettings {
    /// Dimensions below this use a dense eigendecomposition.
    pub dense_threshold: usize,
    pub krylov: KrylovSettings,
    /// Allowed relative norm drift.
    pub norm_tolerance: f64,
}

impl Default for PropagationSettings {
    fn default() -> Self {
        PropagationSettings {
            dense_threshold: 400,
            krylov: KrylovSettings::default(),
            norm_tolerance: 1e-10,
        }
    }
}

/// Reusable `exp(-i H t)`; the dense path caches the eigendecomposition.
pub struct Propagator<'a> {
    op: &'a ManyBodyOperator,
    settings: PropagationSettings,
    eigen: Option<(Vec<f64>, DMatrix<C64>)>,
}

impl<'a> Propagator<'a> {
    pub fn new(op: &'a ManyBodyOperator, settings: PropagationSettings) -> Self {
        let eigen = (op.basis.dimension() < settings.dense_threshold).then(|| {
            let eig = op.to_dense().symmetric_eigen();
            (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
        });
        Propagator { op, settings, eigen }
    }

    pub fn apply(&self, psi: &ManyBodyState, t: f64) -> Result<ManyBodyState> {
        self.op.check_basis(psi)?;
        let coefficients = match &self.eigen {
            Some((values, vectors)) => {
                let x = nalgebra::DVector::from_column_slice(&psi.coefficients);
                let mut y = vectors.adjoint() * x;
                for (yi, e) in y.iter_mut().zip(values) {
                    *yi *= C64::new(0.0, -e * t).exp();
                }
                (vectors * y).iter().copied().collect()
            }
            None => linalg::krylov_propagate(&self.op.matrix, &psi.coefficients, t, &self.settings.krylov)?,
        };
        if !coefficients.iter().all(|z: &C64| z.re.is_finite() && z.im.is_finite()) {
            return Err(LabError::IntegrationFailure {
                last_valid_time: 0.0,
                reason: "non-finite many-body amplitudes".into(),
            });
        }
        let before = psi.norm();
        let after = linalg::norm(&coefficients);
        let drift = (after - before).abs() / before.max(f64::MIN_POSITIVE);
        if drift > self.settings.norm_tolerance {
            return Err(LabError::Invariant(format!("norm drift {drift:e} in propagation")));
        }
        Ok(ManyBodyState {
            basis: psi.basis.clone(),
            coefficients,
        })
    }
}

/// `exp(-i H t) psi`.
pub fn propagate(
    psi: &ManyBodyState,
    h: &ManyBodyOperator,
    t: f64,
    settings: &PropagationSettings,
) -> Result<ManyBodyState> {
    Propagator::new(h, *settings).apply(psi, t)
}

/// Trace-one `k`-particle reduced density, an `M^k x M^k` Hermitian matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedDensity {
    order: usize,
    modes: usize,
    matrix: DMatrix<C64>,
}

impl ReducedDensity {
    pub fn new(order: usize, modes: usize, matrix: DMatrix<C64>) -> Result<Self> {
        let size = modes.checked_pow(order as u32).unwrap_or(usize::MAX);
        if matrix.nrows() != size || matrix.ncols() != size {
            return Err(LabError::dim("reduced density size", size, matrix.nrows()));
        }
        Ok(ReducedDensity { order, modes, matrix })
    }

    /// `(|c><c|)^{(x) k}`.
    pub fn pure_product(c: &[C64], order: usize) -> Self {
        let m = c.len();
        let size = m.pow(order as u32);
        let amp: Vec<C64> = (0..size)
            .map(|idx| {
                let mut z = C64::new(1.0, 0.0);
                let mut rest = idx;
                for _ in 0..order {
                    z *= c[rest % m];
                    rest /= m;
                }
                z
            })
            .collect();
        let matrix = DMatrix::from_fn(size, size, |p, q| amp[p] * amp[q].conj());
        ReducedDensity {
            order,
            modes: m,
            matrix,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn hermiticity_residual(&self) -> f64 {
        linalg::hermiticity_residual_dense(&self.matrix)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::hermitian_eigenvalues(&self.matrix)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// `tr(O gamma)`.
    pub fn expectation(&self, observable: &DMatrix<C64>) -> Result<C64> {
        if observable.shape() != self.matrix.shape() {
            return Err(LabError::dim("observable size", self.matrix.nrows(), observable.nrows()));
        }
        Ok((observable * &self.matrix).trace())
    }

    /// Contracts the last slot: `gamma^(k) -> gamma^(k-1)`.
    pub fn partial_trace(&self) -> Result<ReducedDensity> {
        if self.order < 2 {
            return Err(LabError::InvalidInput("cannot contract a one-particle density".into()));
        }
        let m = self.modes;
        let size = self.matrix.nrows() / m;
        let matrix = DMatrix::from_fn(size, size, |p, q| {
            (0..m).map(|r| self.matrix[(p * m + r, q * m + r)]).sum()
        });
        Ok(ReducedDensity {
            order: self.order - 1,
            modes: m,
            matrix,
        })
    }

    /// Largest deviation under swapping any two slots in both indices.
    pub fn permutation_residual(&self) -> f64 {
        let (m, k) = (self.modes, self.order);
        let size = self.matrix.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                let perm: Vec<usize> = (0..size).map(|idx| swap_slots(idx, i, j, m, k)).collect();
                for p in 0..size {
                    for q in 0..size {
                        let d = self.matrix[(perm[p], perm[q])] - self.matrix[(p, q)];
                        worst = worst.max(d.norm());
                    }
                }
            }
        }
        worst
    }

    /// Max violation among trace, Hermiticity and positivity.
    pub fn invariant_residual(&self) -> f64 {
        let trace = (self.trace() - C64::new(1.0, 0.0)).norm();
        trace
            .max(self.hermiticity_residual())
            .max((-self.min_eigenvalue()).max(0.0))
    }
}

/// Flattened index with slots `i` and `j` exchanged (slot 0 most significant).
pub(crate) fn swap_slots(idx: usize, i: usize, j: usize, m: usize, k: usize) -> usize {
    let mut digits = vec![0; k];
    let mut rest = idx;
    for d in (0..k).rev() {
        digits[d] = rest % m;
        rest /= m;
    }
    digits.swap(i, j);
    digits.iter().fold(0, |acc, d| acc * m + d)
}

/// Densities of order `k` above this edge length are refused.
pub const MAX_DENSITY_SIZE: usize = 4096;

/// `gamma^(k)` of a state, normalized to unit trace.
pub fn reduced_density(psi: &ManyBodyState, k: usize) -> Result<ReducedDensity> {
    let basis = &psi.basis;
    let (m, n) = (basis.modes, basis.particles);
    if k == 0 || k > n {
        return Err(LabError::InvalidInput(format!("order k = {k} outside 1..={n}")));
    }
    let size = m.checked_pow(k as u32).filter(|&s| s <= MAX_DENSITY_SIZE).ok_or_else(|| {
        LabError::InvalidInput(format!("M^k too large for k = {k}, M = {m}"))
    })?;
    let norm_sqr = psi.norm().powi(2);
    if norm_sqr == 0.0 {
        return Err(LabError::Degenerate("zero state has no reduced density".into()));
    }

    // A_P = a_{p_k} ... a_{p_1} psi, built level by level.
    let mut sectors = vec![basis.clone()];
    for level in 1..=k {
        sectors.push(Arc::new(BosonBasis::with_cap(m, n - level, usize::MAX)?));
    }
    let mut level_vectors = vec![psi.coefficients.clone()];
    for level in 1..=k {
        let (from, to) = (&sectors[level - 1], &sectors[level]);
        level_vectors = level_vectors
            .par_iter()
            .flat_map_iter(|x| (0..m).map(move |p| annihilate(from, to, p, x)))
            .collect();
    }
    debug_assert_eq!(level_vectors.len(), size);

    let falling: f64 = (0..k).map(|i| (n - i) as f64).product();
    let scale = 1.0 / (falling * norm_sqr);
    let rows = sectors[k].dimension();
    let a = DMatrix::from_fn(size, rows, |p, r| level_vectors[p][r]);
    let mut matrix = &a * a.adjoint() * C64::new(scale, 0.0);
    // exact Hermitian symmetrization against round-off
    matrix = (&matrix + matrix.adjoint()) * C64::new(0.5, 0.0);
    Ok(ReducedDensity { order: k, modes: m, matrix })
}

/// `tr |rho - sigma|`.
pub fn trace_distance(rho: &ReducedDensity, sigma: &ReducedDensity) -> Result<f64> {
    if rho.order != sigma.order || rho.modes != sigma.modes {
        return Err(LabError::dim("reduced density size", rho.matrix.nrows(), sigma.matrix.nrows()));
    }
    let diff = &rho.matrix - &sigma.matrix;
    Ok(linalg::hermitian_eigenvalues(&diff).iter().map(|e| e.abs()).sum())
}

/// First-quantized embedding of a state as an `M^N` tensor (slot 0 most significant).
///
/// Intended for spot checks at small `N`.
pub fn to_first_quantized(psi: &ManyBodyState) -> Result<Vec<C64>> {
    let (m, n) = (psi.basis.modes, psi.basis.particles);
    let size = m
        .checked_pow(n as u32)
        .filter(|&s| s <= 1 << 22)
        .ok_or_else(|| LabError::InvalidInput("first-quantized tensor too large".into()))?;
    let lnf = ln_factorials(n);
    let mut out = vec![ZERO; size];
    let mut occ = vec![0u32; m];
    for (idx, slot) in out.iter_mut().enumerate() {
        occ.iter_mut().for_each(|o| *o = 0);
        let mut rest = idx;
        for _ in 0..n {
            occ[rest % m] += 1;
            rest /= m;
        }
        let i = psi.basis.index_of(&occ).expect("occupation in basis");
        // each occupation pattern spreads over N! / prod n! tensor entries
        let log_mult = lnf[n] - occ.iter().map(|&o| lnf[o as usize]).sum::<f64>();
        *slot = psi.coefficients[i] * (-0.5 * log_mult).exp();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct SweepSettings {
    pub hartree_dt: f64,
    pub hartree_scheme: Scheme,
    pub basis_cap: usize,
    pub propagation: PropagationSettings,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            hartree_dt: 1e-3,
            hartree_scheme: Scheme::FourthOrderSplit,
            basis_cap: DEFAULT_BASIS_CAP,
            propagation: PropagationSettings::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub particles: usize,
    pub dimension: usize,
    pub trace_distance: f64,
    pub wall_time: f64,
}

/// Effective-equation solution at time `t`, as normalized site modes.
pub(crate) fn hartree_modes(
    phi0: &WaveFunction,
    model: &EffectiveModel,
    t: f64,
    dt: f64,
    scheme: Scheme,
) -> Result<Vec<C64>> {
    if t == 0.0 {
        return Ok(site_modes(phi0));
    }
    let cfg = SolverConfig::new(dt, t, scheme).record_every(usize::MAX);
    let traj = solvers::evolve(phi0, model, &cfg)?;
    if traj.blowup_time.is_some() {
        return Err(LabError::IntegrationFailure {
            last_valid_time: *traj.times.last().unwrap_or(&0.0),
            reason: "reference trajectory flagged blow-up".into(),
        });
    }
    Ok(site_modes(traj.last()))
}

/// For each `N`, propagates `phi0^{(x) N}` and measures `tr |gamma^(1)_{N,t} - |phi_t><phi_t||`.
///
/// Rows come back sorted by `N`.
pub fn convergence_sweep(
    phi0: &WaveFunction,
    model: &EffectiveModel,
    ns: &[usize],
    t: f64,
    settings: &SweepSettings,
) -> Result<Vec<SweepRow>> {
    let phi0 = phi0.normalized()?;
    let lattice = LatticeModel::from_effective(model)?;
    let reference = hartree_modes(&phi0, model, t, settings.hartree_dt, settings.hartree_scheme)?;
    let target = ReducedDensity::pure_product(&reference, 1);
    let c0 = site_modes(&phi0);
    let mut ns: Vec<usize> = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let rows: Result<Vec<SweepRow>> = ns
        .par_iter()
        .map(|&n| {
            let start = Instant::now();
            let basis = Arc::new(BosonBasis::with_cap(lattice.modes(), n, settings.basis_cap)?);
            if n == 0 {
                return Err(LabError::InvalidInput("particle number must be >= 1".into()));
            }
            let h = model_hamiltonian(&lattice, basis.clone())?;
            let psi0 = ManyBodyState::product(basis.clone(), &c0)?;
            let psi_t = propagate(&psi0, &h, t, &settings.propagation)?;
            let gamma = reduced_density(&psi_t, 1)?;
            let distance = trace_distance(&gamma, &target)?;
            debug!("sweep N = {n}: distance {distance:e}");
            Ok(SweepRow {
                particles: n,
                dimension: basis.dimension(),
                trace_distance: distance,
                wall_time: start.elapsed().as_secs_f64(),
            })
        })
        .collect();
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{Grid, Kernel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_c(rng: &mut ChaCha8Rng) -> C64 {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    fn random_hermitian(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<C64> {
        let a = DMatrix::from_fn(m, m, |_, _| random_c(rng));
        (&a + a.adjoint()) * C64::new(0.5, 0.0)
    }

    fn random_symmetric(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    fn random_state(basis: Arc<BosonBasis>, rng: &mut ChaCha8Rng) -> ManyBodyState {
        let coeffs: Vec<C64> = (0..basis.dimension()).map(|_| random_c(rng)).collect();
        let nrm = linalg::norm(&coeffs);
        ManyBodyState::new(basis, coeffs.iter().map(|z| z / nrm).collect()).unwrap()
    }

    fn normalized_c(c: &[C64]) -> Vec<C64> {
        let nrm = linalg::norm(c);
        c.iter().map(|z| z / nrm).collect()
    }

    #[test]
    fn basis_dimensions_and_order() {
        assert_eq!(build_basis(2, 2).unwrap().dimension(), 3);
        assert_eq!(build_basis(4, 3).unwrap().dimension(), 20);
        for n in [1, 5, 40] {
            assert_eq!(build_basis(1, n).unwrap().dimension(), 1);
        }
        let b = build_basis(3, 2).unwrap();
        let occs: Vec<Vec<u32>> = b.occupations().map(|o| o.to_vec()).collect();
        assert_eq!(occs[0], vec![2, 0, 0]);
        assert_eq!(occs[5], vec![0, 0, 2]);
        assert!(occs.windows(2).all(|w| w[0] > w[1]));
        for (i, occ) in b.occupations().enumerate() {
            assert_eq!(b.index_of(occ), Some(i));
        }
        assert!(matches!(
            BosonBasis::with_cap(10, 10, 1000),
            Err(LabError::Size { dimension: 92378, cap: 1000 })
        ));
        assert!(build_basis(0, 3).is_err());
        assert!(build_basis(3, 0).is_err());
    }

    #[test]
    fn free_hamiltonian_is_diagonal_in_eigenmodes() {
        let eps = [0.3, -1.2, 2.5];
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            3,
            eps.iter().map(|&e| C64::new(e, 0.0)),
        ));
        let v = DMatrix::from_element(3, 3, 1.0);
        let basis = Arc::new(build_basis(3, 4).unwrap());
        let op = build_mean_field_hamiltonian(&h, &v, 0.0, basis.clone()).unwrap();
        let dense = op.to_dense();
        for (i, occ) in basis.occupations().enumerate() {
            let e: f64 = occ.iter().zip(eps).map(|(&n, e)| n as f64 * e).sum();
            assert!((dense[(i, i)].re - e).abs() < 1e-14);
        }
        assert_eq!(op.matrix().nnz(), basis.dimension());
    }

    /// First-quantized `sum_j h_j + (kappa/N) sum_{i<j} v(x_i, x_j)` on `M^N`.
    fn first_quantized_hamiltonian(h: &DMatrix<C64>, v: &DMatrix<f64>, kappa: f64, n: usize) -> DMatrix<C64> {
        let m = h.nrows();
        let size = m.pow(n as u32);
        let digits = |idx: usize| {
            let mut d = vec![0; n];
            let mut rest = idx;
            for s in (0..n).rev() {
                d[s] = rest % m;
                rest /= m;
            }
            d
        };
        DMatrix::from_fn(size, size, |a, b| {
            let (da, db) = (digits(a), digits(b));
            let mut z = ZERO;
            for j in 0..n {
                if (0..n).all(|s| s == j || da[s] == db[s]) {
                    z += h[(da[j], db[j])];
                }
            }
            if a == b {
                for i in 0..n {
                    for j in i + 1..n {
                        z += kappa / n as f64 * v[(da[i], da[j])];
                    }
                }
            }
            z
        })
    }

    #[test]
    fn matches_first_quantized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, n) in [(3, 2), (2, 3), (3, 3)] {
            let h = random_hermitian(m, &mut rng);
            let v = random_symmetric(m, &mut rng);
            let kappa = 1.7;
            let basis = Arc::new(build_basis(m, n).unwrap());
            let op = build_mean_field_hamiltonian(&h, &v, kappa, basis.clone()).unwrap();
            assert!(op.hermiticity_residual() <= 1e-12);
            let fq = first_quantized_hamiltonian(&h, &v, kappa, n);
            let dim = basis.dimension();
            let embed = DMatrix::from_fn(m.pow(n as u32), dim, |r, c| {
                to_first_quantized(&ManyBodyState::basis_state(basis.clone(), c)).unwrap()[r]
            });
            assert!((embed.adjoint() * &embed - DMatrix::identity(dim, dim)).camax() < 1e-12);
            let projected = embed.adjoint() * fq * &embed;
            assert!((projected - op.to_dense()).camax() < 1e-12, "M={m} N={n}");
        }
    }

    #[test]
    fn rejects_bad_model_inputs() {
        let mut h = DMatrix::from_element(2, 2, C64::new(0.0, 0.0));
        h[(0, 1)] = C64::new(1.0, 0.0);
        let v = DMatrix::from_element(2, 2, 1.0);
        let basis = Arc::new(build_basis(2, 2).unwrap());
        assert!(build_mean_field_hamiltonian(&h, &v, 1.0, basis.clone()).is_err());
        let h3 = DMatrix::from_element(3, 3, C64::new(1.0, 0.0));
        assert!(matches!(
            build_mean_field_hamiltonian(&h3, &DMatrix::from_element(3, 3, 1.0), 1.0, basis),
            Err(LabError::Dimension { .. })
        ));
    }

    #[test]
    fn propagation_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, n) = (4, 4); // dimension 35
        let basis = Arc::new(build_basis(m, n).unwrap());
        let op = build_mean_field_hamiltonian(
            &random_hermitian(m, &mut rng),
            &random_symmetric(m, &mut rng),
            2.0,
            basis.clone(),
        )
        .unwrap();
        let psi = random_state(basis, &mut rng);
        let t = 0.8;
        let oracle = linalg::expm_taylor(&(op.to_dense() * C64::new(0.0, -t)))
            * nalgebra::DVector::from_column_slice(psi.coefficients());
        let dense = propagate(&psi, &op, t, &PropagationSettings::default()).unwrap();
        let krylov_settings = PropagationSettings {
            dense_threshold: 0,
            ..Default::default()
        };
        let krylov = propagate(&psi, &op, t, &krylov_settings).unwrap();
        for out in [dense, krylov] {
            assert!(linalg::diff_norm(out.coefficients(), oracle.as_slice()) < 1e-9);
            assert!((out.norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eigenstate_picks_up_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let basis = Arc::new(build_basis(3, 3).unwrap());
        let op = build_mean_field_hamiltonian(
            &random_hermitian(3, &mut rng),
            &random_symmetric(3, &mut rng),
            1.0,
            basis.clone(),
        )
        .unwrap();
        let eig = op.to_dense().symmetric_eigen();
        let e = eig.eigenvalues[2];
        let v: Vec<C64> = eig.eigenvectors.column(2).iter().copied().collect();
        let psi = ManyBodyState::new(basis, v.clone()).unwrap();
        let t = 1.3;
        let out = propagate(&psi, &op, t, &PropagationSettings::default()).unwrap();
        let expected: Vec<C64> = v.iter().map(|z| z * C64::new(0.0, -e * t).exp()).collect();
        assert!(linalg::diff_norm(out.coefficients(), &expected) < 1e-10);
    }

    #[test]
    fn energy_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let basis = Arc::new(build_basis(3, 6).unwrap());
        let op = build_mean_field_hamiltonian(
            &random_hermitian(3, &mut rng),
            &random_symmetric(3, &mut rng),
            1.5,
            basis.clone(),
        )
        .unwrap();
        let psi = random_state(basis, &mut rng);
        let e0 = op.expectation(&psi).unwrap();
        for settings in [
            PropagationSettings::default(),
            PropagationSettings {
                dense_threshold: 0,
                ..Default::default()
            },
        ] {
            let out = propagate(&psi, &op, 2.0, &settings).unwrap();
            assert!((op.expectation(&out).unwrap() - e0).abs() < 1e-10);
        }
    }

    #[test]
    fn product_state_densities_factorize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = normalized_c(&(0..3).map(|_| random_c(&mut rng)).collect::<Vec<_>>());
        let basis = Arc::new(build_basis(3, 5).unwrap());
        let psi = ManyBodyState::product(basis, &c).unwrap();
        assert!((psi.norm() - 1.0).abs() < 1e-13);
        for k in 1..=3 {
            let gamma = reduced_density(&psi, k).unwrap();
            let expected = ReducedDensity::pure_product(&c, k);
            assert!((gamma.matrix() - expected.matrix()).camax() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn product_state_survives_large_n() {
        let c = normalized_c(&[C64::new(0.6, 0.1), C64::new(-0.3, 0.7)]);
        let basis = Arc::new(build_basis(2, 512).unwrap());
        let psi = ManyBodyState::product(basis, &c).unwrap();
        assert!((psi.norm() - 1.0).abs() < 1e-11);
        let gamma = reduced_density(&psi, 1).unwrap();
        assert!((gamma.matrix() - ReducedDensity::pure_product(&c, 1).matrix()).camax() < 1e-11);
    }

    #[test]
    fn random_state_density_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let basis = Arc::new(build_basis(3, 4).unwrap());
        for _ in 0..5 {
            let psi = random_state(basis.clone(), &mut rng);
            let densities: Vec<ReducedDensity> = (1..=4).map(|k| reduced_density(&psi, k).unwrap()).collect();
            for g in &densities {
                assert!(g.invariant_residual() <= 1e-12);
                assert!(g.permutation_residual() <= 1e-12);
            }
            for k in 1..4 {
                let contracted = densities[k].partial_trace().unwrap();
                assert!((contracted.matrix() - densities[k - 1].matrix()).camax() <= 1e-12);
            }
        }
        let psi = random_state(basis, &mut rng);
        assert!(reduced_density(&psi, 0).is_err());
        assert!(reduced_density(&psi, 5).is_err());
    }

    /// Direct partial trace of `|Psi><Psi|` over the last `N - k` slots.
    fn first_quantized_density(psi: &[C64], m: usize, n: usize, k: usize) -> DMatrix<C64> {
        let size = m.pow(k as u32);
        let rest = m.pow((n - k) as u32);
        DMatrix::from_fn(size, size, |p, q| {
            (0..rest).map(|r| psi[p * rest + r] * psi[q * rest + r].conj()).sum()
        })
    }

    #[test]
    fn k_body_observables_match_first_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for (m, n) in [(3, 2), (2, 3), (3, 3)] {
            let basis = Arc::new(build_basis(m, n).unwrap());
            let psi = random_state(basis, &mut rng);
            let fq = to_first_quantized(&psi).unwrap();
            for k in 1..=n {
                let gamma = reduced_density(&psi, k).unwrap();
                let oracle = first_quantized_density(&fq, m, n, k);
                assert!((gamma.matrix() - &oracle).camax() < 1e-12);
                // <psi, (O (x) 1) psi> against tr(O gamma)
                let obs = random_hermitian(m.pow(k as u32), &mut rng);
                let rest = m.pow((n - k) as u32);
                let mut direct = ZERO;
                for p in 0..obs.nrows() {
                    for q in 0..obs.ncols() {
                        for r in 0..rest {
                            direct += fq[p * rest + r].conj() * obs[(p, q)] * fq[q * rest + r];
                        }
                    }
                }
                assert!((gamma.expectation(&obs).unwrap() - direct).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn trace_distance_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis = Arc::new(build_basis(3, 3).unwrap());
        let a = reduced_density(&random_state(basis.clone(), &mut rng), 1).unwrap();
        let b = reduced_density(&random_state(basis, &mut rng), 1).unwrap();
        assert_eq!(trace_distance(&a, &a).unwrap(), 0.0);
        let ab = trace_distance(&a, &b).unwrap();
        assert!((ab - trace_distance(&b, &a).unwrap()).abs() < 1e-14);
        // singular values of a Hermitian difference are the absolute eigenvalues
        let svd: f64 = (a.matrix() - b.matrix()).singular_values().iter().sum();
        assert!((ab - svd).abs() < 1e-12);

        let e0 = ReducedDensity::pure_product(&[C64::new(1.0, 0.0), ZERO], 1);
        let e1 = ReducedDensity::pure_product(&[ZERO, C64::new(1.0, 0.0)], 1);
        assert!((trace_distance(&e0, &e1).unwrap() - 2.0).abs() < 1e-14);
        assert!(trace_distance(&e0, &ReducedDensity::pure_product(&[C64::new(1.0, 0.0), ZERO], 2)).is_err());
    }

    #[test]
    fn symmetry_spot_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (m, n) in [(3, 2), (3, 3)] {
            let basis = Arc::new(build_basis(m, n).unwrap());
            let fq = to_first_quantized(&random_state(basis, &mut rng)).unwrap();
            for idx in 0..fq.len() {
                for i in 0..n {
                    for j in i + 1..n {
                        assert!((fq[swap_slots(idx, i, j, m, n)] - fq[idx]).norm() < 1e-15);
                    }
                }
            }
        }
    }

    fn two_site_model(kappa: f64) -> (EffectiveModel, WaveFunction) {
        let grid = Grid::new(2, 2.0).unwrap();
        let kernel = Kernel::from_distance(grid.clone(), |d| 1.0 + d).unwrap();
        let model = EffectiveModel::hartree(kernel, kappa).unwrap();
        let phi = WaveFunction::new(grid, vec![C64::new(0.9, 0.0), C64::new(0.2, 0.3)]).unwrap();
        (model, phi)
    }

    #[test]
    fn non_interacting_sweep_is_exact() {
        let (model, phi) = two_site_model(0.0);
        let rows = convergence_sweep(&phi, &model, &[16, 4, 8], 1.0, &SweepSettings::default()).unwrap();
        assert_eq!(rows.iter().map(|r| r.particles).collect::<Vec<_>>(), vec![4, 8, 16]);
        assert!(rows.iter().all(|r| r.trace_distance <= 1e-10));
        assert_eq!(rows[2].dimension, 17);
    }

    #[test]
    fn interacting_sweep_decreases() {
        let (model, phi) = two_site_model(1.0);
        let rows = convergence_sweep(&phi, &model, &[4, 8, 16, 32], 1.0, &SweepSettings::default()).unwrap();
        assert!(rows.windows(2).all(|w| w[1].trace_distance < w[0].trace_distance));
        assert!(rows[0].trace_distance > 1e-4);
    }

    #[test]
    fn lattice_model_mean_field_energy_matches_solver() {
        let (model, phi) = two_site_model(1.3);
        let phi = phi.normalized().unwrap();
        let lattice = LatticeModel::from_effective(&model).unwrap();
        let n = 40;
        let basis = Arc::new(build_basis(2, n).unwrap());
        let h = model_hamiltonian(&lattice, basis.clone()).unwrap();
        let psi = ManyBodyState::from_wave_function(basis, &phi).unwrap();
        // <H>/N = E_kin + (kappa/2)(1 - 1/N) sum v |c|^2 |c|^2
        let c = site_modes(&phi);
        let mut interaction = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                interaction += lattice.interaction[(p, q)] * c[p].norm_sqr() * c[q].norm_sqr();
            }
        }
        let e_solver = solvers::energy(&phi, &model).unwrap();
        let expected = e_solver - 0.5 * 1.3 * interaction / n as f64;
        assert!((h.expectation(&psi).unwrap() / n as f64 - expected).abs() < 1e-12);
    }
}
