//! Truncated bosonic Fock space over `M` lattice modes.
//!
//! The space keeps all sectors with at most `n_max` particles. Mode functions
//! `f` are site-mode coefficient vectors; `a(f) = sum_p conj(f_p) a_p` and
//! `a*(f) = sum_p f_p a*_p`, so `[a(f), a*(g)] = <f, g>`. Operators are the
//! compressions `P A P` to the truncated space, which keeps Hermitian
//! generators Hermitian.
//!
//! The fluctuation generator around a Hartree trajectory `c_t` is
//!
//! ```text
//! L(t) = sum h_pq a*_p a_q + kappa sum_p (v |c|^2)_p a*_p a_p + kappa sum v_pq c_p conj(c_q) a*_p a_q
//!      + (kappa / 2) sum v_pq (c_p c_q a*_p a*_q + h.c.)
//!      + (kappa / sqrt N) sum v_pq a*_p (c_q a*_q + conj(c_q) a_q) a_p
//!      + (kappa / 2N) sum v_pq a*_p a*_q a_q a_p - (kappa N / 2) sum v_pq |c_p|^2 |c_q|^2
//! ```
//!
//! The last c-number makes `i d/dt U(t;0) = L(t) U(t;0)` hold exactly for
//! `U(t;0) = W*(sqrt N c_t) exp(-i H_N t) W(sqrt N c_0)`, phase included.
//! The limit generator keeps only the quadratic part.

use std::sync::Arc;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::harness::format_float;
use crate::lattice::{WaveFunction, C64};
use crate::linalg::{self, KrylovSettings, SparseBuilder, SparseMatrix};
use crate::manybody::{self, BosonBasis, LatticeModel, ManyBodyState, ReducedDensity};
use crate::solvers::{self, EffectiveModel, Scheme, SolverConfig};

/// Default cap on the total truncated dimension.
pub const DEFAULT_FOCK_CAP: usize = 200_000;
/// Leakage above this fraction of the mass rejects a fluctuation run.
pub const LEAKAGE_REJECTION: f64 = 1e-4;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Smallest `n_max` allowed for a coherent state of mean occupation `mean`.
pub fn cutoff_rule(mean: f64) -> usize {
    // round-off in |phi|^2 must not demand an extra sector
    (mean + 6.0 * mean.sqrt() + 10.0 - 1e-9).ceil() as usize
}

#[derive(Debug)]
pub struct TruncatedFock {
    modes: usize,
    n_max: usize,
    sectors: Vec<Arc<BosonBasis>>,
    offsets: Vec<usize>,
}

impl TruncatedFock {
    pub fn new(modes: usize, n_max: usize) -> Result<Self> {
        Self::with_cap(modes, n_max, DEFAULT_FOCK_CAP)
    }

    pub fn with_cap(modes: usize, n_max: usize, cap: usize) -> Result<Self> {
        if modes == 0 {
            return Err(LabError::InvalidInput("Fock space needs at least one mode".into()));
        }
        // sum_{n <= n_max} C(n + M - 1, n) = C(n_max + M, n_max)
        let total = manybody::binomial(n_max + modes, n_max);
        if total > cap as f64 {
            return Err(LabError::Size {
                dimension: total.min(usize::MAX as f64) as usize,
                cap,
            });
        }
        let sectors = (0..=n_max)
            .map(|n| BosonBasis::with_cap(modes, n, cap).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let mut offsets = Vec::with_capacity(n_max + 2);
        offsets.push(0);
        for s in &sectors {
            offsets.push(offsets.last().unwrap() + s.dimension());
        }
        Ok(TruncatedFock {
            modes,
            n_max,
            sectors,
            offsets,
        })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn sector_dims(&self) -> Vec<usize> {
        self.sectors.iter().map(|s| s.dimension()).collect()
    }

    pub fn total_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn sector(&self, n: usize) -> &Arc<BosonBasis> {
        &self.sectors[n]
    }

    pub fn offset(&self, n: usize) -> usize {
        self.offsets[n]
    }

    /// Global index of an occupation tuple, if it lies in the space.
    pub fn index_of(&self, occupation: &[u32]) -> Option<usize> {
        let n = occupation.iter().sum::<u32>() as usize;
        if n > self.n_max {
            return None;
        }
        self.sectors[n].index_of(occupation).map(|i| self.offsets[n] + i)
    }

    /// Iterates `(global index, particle number, occupation)`.
    fn states(&self) -> impl Iterator<Item = (usize, usize, &[u32])> {
        self.sectors.iter().enumerate().flat_map(move |(n, basis)| {
            let off = self.offsets[n];
            basis.occupations().enumerate().map(move |(i, occ)| (off + i, n, occ))
        })
    }

    /// Sparse matrix of `P a(f) P` or `P a*(f) P`.
    pub fn ladder_matrix(&self, kind: Ladder, f: &[C64]) -> Result<SparseMatrix> {
        self.check_modes(f.len())?;
        let mut builder = SparseBuilder::new(self.total_dim());
        let mut occ = vec![0u32; self.modes];
        for (col, n, src) in self.states() {
            for p in 0..self.modes {
                occ.copy_from_slice(src);
                let (amp, coeff) = match kind {
                    Ladder::Annihilate => {
                        if src[p] == 0 {
                            continue;
                        }
                        occ[p] -= 1;
                        ((src[p] as f64).sqrt(), f[p].conj())
                    }
                    Ladder::Create => {
                        if n == self.n_max {
                            continue;
                        }
                        occ[p] += 1;
                        ((occ[p] as f64).sqrt(), f[p])
                    }
                };
                let row = self.index_of(&occ).expect("neighbour in space");
                builder.add(row, col, coeff * amp);
            }
        }
        Ok(builder.build())
    }

    fn check_modes(&self, len: usize) -> Result<()> {
        if len != self.modes {
            return Err(LabError::dim("mode function length", self.modes, len));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ladder {
    Create,
    Annihilate,
}

#[derive(Clone, Debug)]
pub struct FockVector {
    space: Arc<TruncatedFock>,
    coefficients: Vec<C64>,
}

impl FockVector {
    pub fn new(space: Arc<TruncatedFock>, coefficients: Vec<C64>) -> Result<Self> {
        if coefficients.len() != space.total_dim() {
            return Err(LabError::dim("Fock coefficients", space.total_dim(), coefficients.len()));
        }
        if !coefficients.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(LabError::InvalidInput("Fock coefficients must be finite".into()));
        }
        Ok(FockVector { space, coefficients })
    }

    pub fn vacuum(space: Arc<TruncatedFock>) -> Self {
        let mut coefficients = vec![ZERO; space.total_dim()];
        coefficients[0] = ONE;
        FockVector { space, coefficients }
    }

    /// Embeds an `n`-particle state as a Fock vector.
    pub fn from_sector(space: Arc<TruncatedFock>, psi: &ManyBodyState) -> Result<Self> {
        let n = psi.basis().particles();
        if n > space.n_max || psi.basis().modes() != space.modes {
            return Err(LabError::InvalidInput("state does not fit the Fock space".into()));
        }
        let mut coefficients = vec![ZERO; space.total_dim()];
        let off = space.offsets[n];
        coefficients[off..off + psi.coefficients().len()].copy_from_slice(psi.coefficients());
        Ok(FockVector { space, coefficients })
    }

    pub fn space(&self) -> &Arc<TruncatedFock> {
        &self.space
    }

    pub fn coefficients(&self) -> &[C64] {
        &self.coefficients
    }

    pub fn sector(&self, n: usize) -> &[C64] {
        &self.coefficients[self.space.offsets[n]..self.space.offsets[n + 1]]
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.coefficients)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.coefficients.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn inner(&self, other: &FockVector) -> Result<C64> {
        self.check_space(other)?;
        Ok(linalg::dot(&self.coefficients, &other.coefficients))
    }

    pub fn distance(&self, other: &FockVector) -> Result<f64> {
        self.check_space(other)?;
        Ok(linalg::diff_norm(&self.coefficients, &other.coefficients))
    }

    /// Squared norm of each sector, `n = 0..=n_max`.
    pub fn sector_weights(&self) -> Vec<f64> {
        (0..=self.space.n_max)
            .map(|n| self.sector(n).iter().map(|z| z.norm_sqr()).sum())
            .collect()
    }

    /// `<(-1)^N>` over the squared norm.
    pub fn parity(&self) -> f64 {
        let w = self.sector_weights();
        let total: f64 = w.iter().sum();
        w.iter()
            .enumerate()
            .map(|(n, x)| if n % 2 == 0 { *x } else { -x })
            .sum::<f64>()
            / total
    }

    /// `|| (N + shift)^{1/2} psi ||`.
    pub fn number_root_norm(&self, shift: f64) -> f64 {
        self.sector_weights()
            .iter()
            .enumerate()
            .map(|(n, w)| (n as f64 + shift) * w)
            .sum::<f64>()
            .sqrt()
    }

    fn check_space(&self, other: &FockVector) -> Result<()> {
        if !Arc::ptr_eq(&self.space, &other.space)
            && (self.space.modes != other.space.modes || self.space.n_max != other.space.n_max)
        {
            return Err(LabError::InvalidInput("vectors live in different Fock spaces".into()));
        }
        Ok(())
    }

    fn with(&self, coefficients: Vec<C64>) -> FockVector {
        FockVector {
            space: self.space.clone(),
            coefficients,
        }
    }
}

/// A ladder operator applied to a vector, with the norm pushed past `n_max`.
#[derive(Clone, Debug)]
pub struct LadderOutput {
    pub vector: FockVector,
    /// Norm of the component that the truncation dropped (creation only).
    pub truncated: f64,
}

pub fn apply_ladder(kind: Ladder, f: &[C64], psi: &FockVector) -> Result<LadderOutput> {
    let space = &psi.space;
    space.check_modes(f.len())?;
    let mut coefficients = vec![ZERO; space.total_dim()];
    let mut truncated = 0.0;
    match kind {
        Ladder::Annihilate => {
            for n in 1..=space.n_max {
                let (from, to) = (&space.sectors[n], &space.sectors[n - 1]);
                let off = space.offsets[n - 1];
                for p in 0..space.modes {
                    if f[p] == ZERO {
                        continue;
                    }
                    let part = manybody::annihilate(from, to, p, psi.sector(n));
                    for (c, x) in coefficients[off..].iter_mut().zip(part) {
                        *c += f[p].conj() * x;
                    }
                }
            }
        }
        Ladder::Create => {
            for n in 0..=space.n_max {
                let from = &space.sectors[n];
                let to = if n < space.n_max {
                    space.sectors[n + 1].clone()
                } else {
                    Arc::new(BosonBasis::with_cap(space.modes, n + 1, usize::MAX)?)
                };
                let mut acc = vec![ZERO; to.dimension()];
                for p in 0..space.modes {
                    if f[p] == ZERO {
                        continue;
                    }
                    let part = manybody::create(from, &to, p, psi.sector(n));
                    for (a, x) in acc.iter_mut().zip(part) {
                        *a += f[p] * x;
                    }
                }
                if n < space.n_max {
                    let off = space.offsets[n + 1];
                    coefficients[off..off + acc.len()].copy_from_slice(&acc);
                } else {
                    truncated = linalg::norm(&acc);
                }
            }
        }
    }
    Ok(LadderOutput {
        vector: psi.with(coefficients),
        truncated,
    })
}

/// Weyl parameter: `W(phi) = exp(a*(phi) - a(phi))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Displacement {
    orbital: Vec<C64>,
}

impl Displacement {
    pub fn new(orbital: Vec<C64>) -> Result<Self> {
        if !orbital.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(LabError::InvalidInput("displacement must be finite".into()));
        }
        Ok(Displacement { orbital })
    }

    pub fn orbital(&self) -> &[C64] {
        &self.orbital
    }

    pub fn norm_sqr(&self) -> f64 {
        self.orbital.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn negated(&self) -> Self {
        Displacement {
            orbital: self.orbital.iter().map(|z| -z).collect(),
        }
    }
}

/// Relative tolerance of the Taylor series used for Weyl operators.
pub const WEYL_TOLERANCE: f64 = 1e-16;

/// `W(phi) psi`, exponentiating `P (a*(phi) - a(phi)) P` by a sub-stepped Taylor series.
pub fn weyl(phi: &Displacement, psi: &FockVector) -> Result<FockVector> {
    let space = &psi.space;
    space.check_modes(phi.orbital.len())?;
    let create = space.ladder_matrix(Ladder::Create, &phi.orbital)?;
    let annihilate = space.ladder_matrix(Ladder::Annihilate, &phi.orbital)?;
    let generator = combine(&create, 1.0, &annihilate, -1.0);
    let bound = 2.0 * phi.norm_sqr().sqrt() * ((space.n_max + 1) as f64).sqrt();
    let out = linalg::taylor_action(
        |x, y| generator.matvec_into(x, y),
        &psi.coefficients,
        bound,
        WEYL_TOLERANCE,
    );
    Ok(psi.with(out))
}

/// `W(phi) Omega` from the explicit series `exp(-|phi|^2/2) sum a*(phi)^n / n! Omega`.
pub fn coherent_state(phi: &Displacement, space: Arc<TruncatedFock>) -> Result<FockVector> {
    space.check_modes(phi.orbital.len())?;
    let mean = phi.norm_sqr();
    let required = cutoff_rule(mean);
    if space.n_max < required {
        return Err(LabError::Cutoff {
            n_max: space.n_max,
            mean,
            suggested_n_max: required,
        });
    }
    let mut current = FockVector::vacuum(space.clone());
    current.coefficients[0] = C64::new((-0.5 * mean).exp(), 0.0);
    let mut total = current.coefficients.clone();
    for j in 1..=space.n_max {
        let next = apply_ladder(Ladder::Create, &phi.orbital, &current)?.vector;
        current = next.with(next.coefficients.iter().map(|z| z / j as f64).collect());
        for (t, c) in total.iter_mut().zip(&current.coefficients) {
            *t += c;
        }
    }
    Ok(current.with(total))
}

/// Residuals of `W*(phi) a(f) W(phi) = a(f) + <f, phi>` and its adjoint on basis states.
///
/// Test states are all basis states of the sectors `s <= 3` for which
/// `n_max >= m + 10 sqrt(m) + 10` with `m = |phi|^2 + s`, so that the
/// truncation stays invisible at the tested precision.
pub fn weyl_conjugate_check(phi: &Displacement, f: &[C64], space: Arc<TruncatedFock>) -> Result<(f64, f64)> {
    space.check_modes(f.len())?;
    let margin = |m: f64| (m + 10.0 * m.sqrt() + 10.0).ceil() as usize;
    let mean = phi.norm_sqr();
    let Some(top) = (0..=3usize.min(space.n_max)).rev().find(|&s| margin(mean + s as f64) <= space.n_max) else {
        return Err(LabError::Cutoff {
            n_max: space.n_max,
            mean,
            suggested_n_max: margin(mean),
        });
    };
    let shift = linalg::dot(f, &phi.orbital);
    let back = phi.negated();
    let mut r_annihilate: f64 = 0.0;
    let mut r_create: f64 = 0.0;
    for i in 0..space.offsets[top + 1] {
        let mut e = vec![ZERO; space.total_dim()];
        e[i] = ONE;
        let psi = FockVector::new(space.clone(), e)?;
        let w = weyl(phi, &psi)?;
        for (kind, slot) in [(Ladder::Annihilate, &mut r_annihilate), (Ladder::Create, &mut r_create)] {
            let lhs = weyl(&back, &apply_ladder(kind, f, &w)?.vector)?;
            let direct = apply_ladder(kind, f, &psi)?.vector;
            let c = if kind == Ladder::Annihilate { shift } else { shift.conj() };
            let rhs: Vec<C64> = direct
                .coefficients
                .iter()
                .zip(&psi.coefficients)
                .map(|(a, x)| a + c * x)
                .collect();
            *slot = slot.max(linalg::diff_norm(&lhs.coefficients, &rhs));
        }
    }
    Ok((r_annihilate, r_create))
}

/// Block-diagonal operator on the truncated space.
#[derive(Clone, Debug)]
pub struct FockOperator {
    space: Arc<TruncatedFock>,
    blocks: Vec<SparseMatrix>,
}

impl FockOperator {
    pub fn space(&self) -> &Arc<TruncatedFock> {
        &self.space
    }

    pub fn sector_block(&self, n: usize) -> &SparseMatrix {
        &self.blocks[n]
    }

    /// The full matrix (block diagonal by construction).
    pub fn matrix(&self) -> SparseMatrix {
        let mut builder = SparseBuilder::new(self.space.total_dim());
        for (n, block) in self.blocks.iter().enumerate() {
            let off = self.space.offsets[n];
            for (r, c, v) in block.entries() {
                builder.add(off + r, off + c, v);
            }
        }
        builder.build()
    }

    /// Largest entry of `[H, N]`; zero when the operator preserves particle number.
    pub fn number_commutator_residual(&self) -> f64 {
        let full = self.matrix();
        let sector_of = |i: usize| self.space.offsets.partition_point(|&o| o <= i) - 1;
        full.entries()
            .map(|(r, c, v)| v.norm() * (sector_of(r) as f64 - sector_of(c) as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn apply(&self, psi: &FockVector) -> FockVector {
        let mut out = vec![ZERO; psi.coefficients.len()];
        for (n, block) in self.blocks.iter().enumerate() {
            let (a, b) = (self.space.offsets[n], self.space.offsets[n + 1]);
            block.matvec_into(&psi.coefficients[a..b], &mut out[a..b]);
        }
        psi.with(out)
    }

    pub fn expectation(&self, psi: &FockVector) -> f64 {
        linalg::dot(&psi.coefficients, &self.apply(psi).coefficients).re
    }

    /// `exp(-i H t) psi`, sector by sector.
    pub fn propagate(&self, psi: &FockVector, t: f64, krylov: &KrylovSettings) -> Result<FockVector> {
        let mut out = vec![ZERO; psi.coefficients.len()];
        for (n, block) in self.blocks.iter().enumerate() {
            let (a, b) = (self.space.offsets[n], self.space.offsets[n + 1]);
            let x = &psi.coefficients[a..b];
            if x.iter().all(|z| *z == ZERO) {
                continue;
            }
            let y = if b - a < 400 {
                let u = linalg::unitary_propagator(&block.to_dense(), t);
                (u * nalgebra::DVector::from_column_slice(x)).iter().copied().collect()
            } else {
                linalg::krylov_propagate(block, x, t, krylov)?
            };
            out[a..b].copy_from_slice(&y);
        }
        Ok(psi.with(out))
    }
}

/// `H_N` on the truncated space: every sector carries the mean-field
/// Hamiltonian with the fixed weight `kappa / N`.
pub fn fock_hamiltonian(model: &LatticeModel, n: usize, space: Arc<TruncatedFock>) -> Result<FockOperator> {
    if n == 0 {
        return Err(LabError::InvalidInput("N must be >= 1".into()));
    }
    if model.modes() != space.modes {
        return Err(LabError::dim("lattice model modes", space.modes, model.modes()));
    }
    let weight = model.coupling / n as f64;
    let blocks = space
        .sectors
        .iter()
        .map(|basis| manybody::second_quantized(&model.one_body, &model.interaction, weight, basis))
        .collect();
    Ok(FockOperator { space, blocks })
}

/// `<N>` over the squared norm.
pub fn number_expectation(psi: &FockVector) -> f64 {
    let w = psi.sector_weights();
    let total: f64 = w.iter().sum();
    w.iter().enumerate().map(|(n, x)| n as f64 * x).sum::<f64>() / total
}

/// `Gamma^(1)_pq = <a*_q a_p> / <N>`, trace one.
pub fn gamma1_fock(psi: &FockVector) -> Result<ReducedDensity> {
    let space = &psi.space;
    let mean = number_expectation(psi) * psi.norm_sqr();
    if !(mean > 0.0) {
        return Err(LabError::Degenerate("<N> = 0: one-particle density undefined".into()));
    }
    let m = space.modes;
    let lowered: Vec<Vec<C64>> = (0..m)
        .map(|p| {
            let mut e = vec![ZERO; m];
            e[p] = ONE;
            apply_ladder(Ladder::Annihilate, &e, psi).map(|o| o.vector.coefficients)
        })
        .collect::<Result<_>>()?;
    let matrix = DMatrix::from_fn(m, m, |p, q| linalg::dot(&lowered[q], &lowered[p]) / mean);
    let matrix = (&matrix + matrix.adjoint()) * C64::new(0.5, 0.0);
    ReducedDensity::new(1, m, matrix)
}

/// `e^{n/2} n^{-n/2} sqrt(n!)`.
pub fn d_n(n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let x = n as f64;
    let ln_fact = manybody::ln_factorials(n)[n];
    (0.5 * x - 0.5 * x * x.ln() + 0.5 * ln_fact).exp()
}

#[derive(Clone, Debug)]
pub struct SectorProjection {
    pub vector: FockVector,
    /// Norm of the projected vector.
    pub norm: f64,
    /// `1 / norm`: equals `d_n` for `W(sqrt(n) phi) Omega` with `|phi| = 1`.
    pub constant: f64,
}

impl SectorProjection {
    /// The normalized `n`-particle part as a many-body state.
    pub fn normalized_state(&self, n: usize) -> Result<ManyBodyState> {
        let part: Vec<C64> = self.vector.sector(n).iter().map(|z| z / self.norm).collect();
        ManyBodyState::new(self.vector.space.sectors[n].clone(), part)
    }
}

pub fn sector_projection(psi: &FockVector, n: usize) -> Result<SectorProjection> {
    let space = &psi.space;
    if n > space.n_max {
        return Err(LabError::InvalidInput(format!("sector {n} above n_max = {}", space.n_max)));
    }
    let mut coefficients = vec![ZERO; space.total_dim()];
    let (a, b) = (space.offsets[n], space.offsets[n + 1]);
    coefficients[a..b].copy_from_slice(&psi.coefficients[a..b]);
    let norm = linalg::norm(&coefficients);
    if norm == 0.0 {
        return Err(LabError::Degenerate(format!("sector {n} carries no amplitude")));
    }
    Ok(SectorProjection {
        vector: psi.with(coefficients),
        norm,
        constant: 1.0 / norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorVariant {
    /// The full generator `L(t)`.
    Full,
    /// The quadratic limit `L_inf(t)`.
    Limit,
}

/// Matrix elements `(row, col, amplitude)` of a fixed operator word.
type Block = Vec<(usize, usize, f64)>;

/// Fluctuation generator around a Hartree trajectory, assembled from fixed operator blocks.
pub struct FluctuationGenerator {
    variant: GeneratorVariant,
    particles: usize,
    model: LatticeModel,
    space: Arc<TruncatedFock>,
    /// `a*_p a_q`, index `p * M + q`.
    hopping: Vec<Block>,
    /// `a*_p a*_q`, index `p * M + q`.
    pairing: Vec<Block>,
    /// `a*_p a*_q a_p`, index `p * M + q`.
    cubic: Vec<Block>,
    /// `(1/2) sum v_pq a*_p a*_q a_q a_p`, diagonal.
    quartic: Vec<f64>,
}

/// Applies a word of ladder operators (rightmost first) to an occupation.
fn apply_word(occ: &[u32], word: &[(Ladder, usize)]) -> Option<(Vec<u32>, f64)> {
    let mut out = occ.to_vec();
    let mut amp = 1.0;
    for &(kind, p) in word.iter().rev() {
        match kind {
            Ladder::Annihilate => {
                if out[p] == 0 {
                    return None;
                }
                amp *= (out[p] as f64).sqrt();
                out[p] -= 1;
            }
            Ladder::Create => {
                out[p] += 1;
                amp *= (out[p] as f64).sqrt();
            }
        }
    }
    Some((out, amp))
}

fn word_block(space: &TruncatedFock, word: &[(Ladder, usize)]) -> Block {
    space
        .states()
        .filter_map(|(col, _, occ)| {
            let (target, amp) = apply_word(occ, word)?;
            space.index_of(&target).map(|row| (row, col, amp))
        })
        .collect()
}

impl FluctuationGenerator {
    pub fn new(
        variant: GeneratorVariant,
        particles: usize,
        model: &LatticeModel,
        space: Arc<TruncatedFock>,
    ) -> Result<Self> {
        if particles == 0 {
            return Err(LabError::InvalidInput("N must be >= 1".into()));
        }
        if model.modes() != space.modes {
            return Err(LabError::dim("lattice model modes", space.modes, model.modes()));
        }
        use Ladder::{Annihilate as A, Create as C};
        let m = space.modes;
        let mut hopping = Vec::with_capacity(m * m);
        let mut pairing = Vec::with_capacity(m * m);
        let mut cubic = Vec::with_capacity(m * m);
        for p in 0..m {
            for q in 0..m {
                hopping.push(word_block(&space, &[(C, p), (A, q)]));
                pairing.push(word_block(&space, &[(C, p), (C, q)]));
                cubic.push(if variant == GeneratorVariant::Full {
                    word_block(&space, &[(C, p), (C, q), (A, p)])
                } else {
                    Vec::new()
                });
            }
        }
        let quartic = space
            .states()
            .map(|(_, _, occ)| {
                let mut e = 0.0;
                for p in 0..m {
                    for q in 0..m {
                        let (np, nq) = (occ[p] as f64, occ[q] as f64);
                        let pair = if p == q { np * (np - 1.0) } else { np * nq };
                        e += 0.5 * model.interaction[(p, q)] * pair;
                    }
                }
                e
            })
            .collect();
        Ok(FluctuationGenerator {
            variant,
            particles,
            model: model.clone(),
            space,
            hopping,
            pairing,
            cubic,
            quartic,
        })
    }

    pub fn variant(&self) -> GeneratorVariant {
        self.variant
    }

    pub fn space(&self) -> &Arc<TruncatedFock> {
        &self.space
    }

    /// The generator for the Hartree orbital `c` (normalized site modes).
    pub fn matrix_at(&self, c: &[C64]) -> Result<SparseMatrix> {
        self.space.check_modes(c.len())?;
        let m = self.space.modes;
        let kappa = self.model.coupling;
        let v = &self.model.interaction;
        let h = &self.model.one_body;
        let mean_field: Vec<f64> = (0..m)
            .map(|p| (0..m).map(|q| v[(p, q)] * c[q].norm_sqr()).sum())
            .collect();
        let mut builder = SparseBuilder::new(self.space.total_dim());
        let mut add_block = |block: &Block, coeff: C64, adjoint_too: bool| {
            if coeff == ZERO {
                return;
            }
            for &(r, col, amp) in block {
                builder.add(r, col, coeff * amp);
                if adjoint_too {
                    builder.add(col, r, coeff.conj() * amp);
                }
            }
        };
        for p in 0..m {
            for q in 0..m {
                let idx = p * m + q;
                let mut hop = h[(p, q)] + kappa * v[(p, q)] * c[p] * c[q].conj();
                if p == q {
                    hop += kappa * mean_field[p];
                }
                add_block(&self.hopping[idx], hop, false);
                add_block(&self.pairing[idx], 0.5 * kappa * v[(p, q)] * c[p] * c[q], true);
                if self.variant == GeneratorVariant::Full {
                    let coeff = kappa / (self.particles as f64).sqrt() * v[(p, q)] * c[q];
                    add_block(&self.cubic[idx], coeff, true);
                }
            }
        }
        if self.variant == GeneratorVariant::Full {
            let n = self.particles as f64;
            let mut scalar = 0.0;
            for p in 0..m {
                scalar += mean_field[p] * c[p].norm_sqr();
            }
            let scalar = -0.5 * kappa * n * scalar;
            for (i, e) in self.quartic.iter().enumerate() {
                builder.add(i, i, C64::new(kappa / n * e + scalar, 0.0));
            }
        }
        Ok(builder.build())
    }
}

/// Hartree orbital along `[0, T]` with cubic Hermite interpolation between nodes.
pub struct HartreePath {
    times: Vec<f64>,
    values: Vec<Vec<C64>>,
    slopes: Vec<Vec<C64>>,
}

impl HartreePath {
    /// Solves the effective equation with `solver_dt` and keeps a node every `node_spacing`.
    pub fn solve(
        phi0: &WaveFunction,
        model: &EffectiveModel,
        lattice: &LatticeModel,
        t_end: f64,
        node_spacing: f64,
        solver_dt: f64,
    ) -> Result<Self> {
        let ratio = node_spacing / solver_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 - 1e-9 {
            return Err(LabError::InvalidInput(format!(
                "node spacing {node_spacing} must be a multiple of the solver step {solver_dt}"
            )));
        }
        let cfg = SolverConfig::new(solver_dt, t_end, Scheme::FourthOrderSplit).record_every(ratio.round() as usize);
        let traj = solvers::evolve(phi0, model, &cfg)?;
        if traj.blowup_time.is_some() {
            return Err(LabError::IntegrationFailure {
                last_valid_time: *traj.times.last().unwrap(),
                reason: "Hartree reference flagged blow-up".into(),
            });
        }
        let values: Vec<Vec<C64>> = traj.snapshots.iter().map(manybody::site_modes).collect();
        let slopes = values.iter().map(|c| hartree_velocity(lattice, c)).collect();
        Ok(HartreePath {
            times: traj.times.clone(),
            values,
            slopes,
        })
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn at(&self, t: f64) -> Vec<C64> {
        let last = self.times.len() - 1;
        let i = self.times.partition_point(|&s| s <= t).clamp(1, last) - 1;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let dt = t1 - t0;
        let s = (t - t0) / dt;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        (0..self.values[i].len())
            .map(|p| {
                self.values[i][p] * h00
                    + self.slopes[i][p] * (h10 * dt)
                    + self.values[i + 1][p] * h01
                    + self.slopes[i + 1][p] * (h11 * dt)
            })
            .collect()
    }
}

/// `dc/dt = -i (h c + kappa (v |c|^2) c)` in site modes.
pub fn hartree_velocity(model: &LatticeModel, c: &[C64]) -> Vec<C64> {
    let m = c.len();
    (0..m)
        .map(|p| {
            let mut g: C64 = (0..m).map(|q| model.one_body[(p, q)] * c[q]).sum();
            let mf: f64 = (0..m).map(|q| model.interaction[(p, q)] * c[q].norm_sqr()).sum();
            g += model.coupling * mf * c[p];
            g * C64::new(0.0, -1.0)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FluctuationPath {
    /// `W*(sqrt N c_t) exp(-i H_N t) W(sqrt N c_0) Omega`.
    Conjugation,
    /// Direct integration of `i d/dt psi = L(t) psi`.
    Direct,
}

#[derive(Clone, Copy, Debug)]
pub struct FluctuationSettings {
    /// Cutoff; `None` applies the cutoff rule to `N`.
    pub n_max: Option<usize>,
    /// Step of the time-dependent integrator and node spacing of the Hartree path.
    pub dt: f64,
    /// Step of the Hartree solver.
    pub hartree_dt: f64,
    /// Record every this many steps.
    pub record_every: usize,
    pub krylov: KrylovSettings,
}

impl Default for FluctuationSettings {
    fn default() -> Self {
        FluctuationSettings {
            n_max: None,
            dt: 5e-3,
            hartree_dt: 1e-3,
            record_every: 20,
            krylov: KrylovSettings::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FluctuationTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<FockVector>,
    /// Weight in the sectors `n > 3 n_max / 4` (plus, for the conjugation path,
    /// the norm lost by the truncated coherent state), per record.
    pub leakage: Vec<f64>,
    /// `max | |psi_t| - 1 |`.
    pub norm_drift: f64,
}

impl FluctuationTrajectory {
    pub fn last(&self) -> &FockVector {
        self.states.last().expect("trajectory holds t = 0")
    }

    pub fn max_leakage(&self) -> f64 {
        self.leakage.iter().copied().fold(0.0, f64::max)
    }

    pub fn leakage_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "max_leakage": self.max_leakage(),
            "norm_drift": self.norm_drift,
            "records": self.times.iter().zip(&self.leakage)
                .map(|(t, l)| serde_json::json!({"t": t, "leakage": l}))
                .collect::<Vec<_>>(),
        }))
        .expect("plain JSON values")
    }
}

/// Relative weight in the top quarter of the sectors, `n > 3 n_max / 4`.
fn boundary_weight(psi: &FockVector) -> f64 {
    let w = psi.sector_weights();
    let from = 3 * psi.space.n_max / 4 + 1;
    w[from.min(w.len())..].iter().sum::<f64>() / w.iter().sum::<f64>()
}

/// `U(t; 0) Omega` along the Hartree trajectory of `phi0`.
pub fn evolve_fluctuation(
    phi0: &WaveFunction,
    model: &EffectiveModel,
    particles: usize,
    variant: GeneratorVariant,
    path: FluctuationPath,
    t_end: f64,
    settings: &FluctuationSettings,
) -> Result<FluctuationTrajectory> {
    if particles == 0 {
        return Err(LabError::InvalidInput("N must be >= 1".into()));
    }
    if !(t_end >= 0.0 && t_end.is_finite() && settings.dt > 0.0 && settings.record_every > 0) {
        return Err(LabError::InvalidInput("need t_end >= 0, dt > 0 and record_every > 0".into()));
    }
    if path == FluctuationPath::Conjugation && variant == GeneratorVariant::Limit {
        return Err(LabError::InvalidInput(
            "the limit generator has no conjugation formula; use the direct path".into(),
        ));
    }
    let phi0 = phi0.normalized()?;
    let lattice = LatticeModel::from_effective(model)?;
    let n_max = settings.n_max.unwrap_or_else(|| cutoff_rule(particles as f64));
    let space = Arc::new(TruncatedFock::new(lattice.modes(), n_max)?);
    let steps = (t_end / settings.dt - 1e-9).ceil().max(0.0) as usize;
    let dt = if steps == 0 { 0.0 } else { t_end / steps as f64 };
    let hartree = if steps == 0 {
        None
    } else {
        Some(HartreePath::solve(&phi0, model, &lattice, t_end, dt, dt / (dt / settings.hartree_dt).round().max(1.0))?)
    };
    let root_n = (particles as f64).sqrt();
    let mut traj = FluctuationTrajectory {
        times: vec![0.0],
        states: vec![FockVector::vacuum(space.clone())],
        leakage: vec![0.0],
        norm_drift: 0.0,
    };
    let record = |step: usize| step % settings.record_every == 0 || step == steps;

    match path {
        FluctuationPath::Conjugation => {
            let h = fock_hamiltonian(&lattice, particles, space.clone())?;
            let c0 = manybody::site_modes(&phi0);
            let start = Displacement::new(c0.iter().map(|z| z * root_n).collect())?;
            let coherent = coherent_state(&start, space.clone())?;
            let lost = 1.0 - coherent.norm_sqr();
            let hartree = hartree.as_ref();
            for step in (1..=steps).filter(|&s| record(s)) {
                let t = step as f64 * dt;
                let evolved = h.propagate(&coherent, t, &settings.krylov)?;
                let ct = hartree.expect("steps > 0").at(t);
                let back = Displacement::new(ct.iter().map(|z| -z * root_n).collect())?;
                let psi = weyl(&back, &evolved)?;
                traj.leakage.push(lost + boundary_weight(&evolved).max(boundary_weight(&psi)));
                traj.norm_drift = traj.norm_drift.max((psi.norm() - 1.0).abs());
                traj.times.push(t);
                traj.states.push(psi);
            }
        }
        FluctuationPath::Direct => {
            let generator = FluctuationGenerator::new(variant, particles, &lattice, space.clone())?;
            let hartree = hartree.as_ref();
            // fourth-order commutator-free Magnus step at the Gauss nodes
            let r3 = 3f64.sqrt();
            let (g1, g2) = (0.5 - r3 / 6.0, 0.5 + r3 / 6.0);
            let (a1, a2) = ((3.0 - 2.0 * r3) / 12.0, (3.0 + 2.0 * r3) / 12.0);
            let mut psi = FockVector::vacuum(space.clone()).coefficients;
            for step in 1..=steps {
                let t0 = (step - 1) as f64 * dt;
                let path = hartree.expect("steps > 0");
                let l1 = generator.matrix_at(&path.at(t0 + g1 * dt))?;
                let l2 = generator.matrix_at(&path.at(t0 + g2 * dt))?;
                let first = combine(&l1, a2, &l2, a1);
                let second = combine(&l1, a1, &l2, a2);
                psi = linalg::krylov_propagate(&first, &psi, dt, &settings.krylov)?;
                psi = linalg::krylov_propagate(&second, &psi, dt, &settings.krylov)?;
                if record(step) {
                    let v = FockVector::new(space.clone(), psi.clone())?;
                    traj.leakage.push(boundary_weight(&v));
                    traj.norm_drift = traj.norm_drift.max((v.norm() - 1.0).abs());
                    traj.times.push(step as f64 * dt);
                    traj.states.push(v);
                }
            }
        }
    }
    let leak = traj.max_leakage();
    if leak > LEAKAGE_REJECTION {
        return Err(LabError::Truncation {
            leakage: leak,
            suggested_n_max: (3 * n_max).div_ceil(2),
        });
    }
    if leak > 1e-8 {
        warn!("fluctuation run leaks {leak:e} of its mass through n_max = {n_max}");
    }
    debug!("fluctuation run: {} records, norm drift {:e}", traj.times.len(), traj.norm_drift);
    Ok(traj)
}

fn combine(a: &SparseMatrix, wa: f64, b: &SparseMatrix, wb: f64) -> SparseMatrix {
    let mut builder = SparseBuilder::new(a.dim());
    for (r, c, v) in a.entries() {
        builder.add(r, c, v * wa);
    }
    for (r, c, v) in b.entries() {
        builder.add(r, c, v * wb);
    }
    builder.build()
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `C` in the bound `C e^{D t}`; raised so the bound covers every sample.
    pub c: f64,
    pub d: f64,
    /// RMS residual of the log-linear least-squares fit.
    pub fit_residual: f64,
}

/// `<N>` along a fluctuation trajectory, with an exponential envelope fit.
pub fn number_growth(traj: &FluctuationTrajectory) -> Result<GrowthSeries> {
    let values: Vec<f64> = traj.states.iter().map(number_expectation).collect();
    let pts: Vec<(f64, f64)> = traj
        .times
        .iter()
        .zip(&values)
        .filter(|(_, &y)| y > 0.0)
        .map(|(&t, &y)| (t, y.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(LabError::Degenerate("growth series has fewer than two positive samples".into()));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let d = if stt > 0.0 {
        pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum::<f64>() / stt
    } else {
        0.0
    };
    let ln_c = my - d * mt;
    let fit_residual = (pts.iter().map(|p| (p.1 - ln_c - d * p.0).powi(2)).sum::<f64>() / n).sqrt();
    let c = traj
        .times
        .iter()
        .zip(&values)
        .map(|(&t, &y)| y * (-d * t).exp())
        .fold(ln_c.exp(), f64::max);
    Ok(GrowthSeries {
        times: traj.times.clone(),
        values,
        c,
        d,
        fit_residual,
    })
}

impl GrowthSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,number\n");
        for (t, y) in self.times.iter().zip(&self.values) {
            out.push_str(&format!("{},{}\n", format_float(*t), format_float(*y)));
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RateRow {
    pub particles: usize,
    pub n_max: usize,
    pub dimension: usize,
    pub leakage: f64,
    pub trace_distance: f64,
    pub wall_time: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct RateSettings {
    pub hartree_dt: f64,
    pub krylov: KrylovSettings,
}

impl Default for RateSettings {
    fn default() -> Self {
        RateSettings {
            hartree_dt: 1e-3,
            krylov: KrylovSettings::default(),
        }
    }
}

/// For each `N`: evolve `W(sqrt N phi0) Omega` under `H_N` and compare
/// `Gamma^(1)` with the Hartree projector. Rows sorted by `N`.
pub fn rate_sweep(
    phi0: &WaveFunction,
    model: &EffectiveModel,
    ns: &[usize],
    t: f64,
    settings: &RateSettings,
) -> Result<Vec<RateRow>> {
    let phi0 = phi0.normalized()?;
    let lattice = LatticeModel::from_effective(model)?;
    let reference = manybody::hartree_modes(&phi0, model, t, settings.hartree_dt, Scheme::FourthOrderSplit)?;
    let target = ReducedDensity::pure_product(&reference, 1);
    let c0 = manybody::site_modes(&phi0);
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    ns.par_iter()
        .map(|&n| {
            let start = Instant::now();
            if n == 0 {
                return Err(LabError::InvalidInput("N must be >= 1".into()));
            }
            let n_max = cutoff_rule(n as f64);
            let space = Arc::new(TruncatedFock::new(lattice.modes(), n_max)?);
            let root = (n as f64).sqrt();
            let coherent = coherent_state(&Displacement::new(c0.iter().map(|z| z * root).collect())?, space.clone())?;
            let leakage = 1.0 - coherent.norm_sqr();
            let h = fock_hamiltonian(&lattice, n, space.clone())?;
            let evolved = h.propagate(&coherent, t, &settings.krylov)?;
            let gamma = gamma1_fock(&evolved)?;
            Ok(RateRow {
                particles: n,
                n_max,
                dimension: space.total_dim(),
                leakage: leakage + evolved.sector(n_max).iter().map(|z| z.norm_sqr()).sum::<f64>(),
                trace_distance: manybody::trace_distance(&gamma, &target)?,
                wall_time: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{Grid, Kernel};
    use crate::manybody::{build_basis, model_hamiltonian};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rc(rng: &mut ChaCha8Rng) -> C64 {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    fn random_vector(space: &Arc<TruncatedFock>, below: usize, rng: &mut ChaCha8Rng) -> FockVector {
        let mut c = vec![ZERO; space.total_dim()];
        for z in c.iter_mut().take(space.offset(below + 1)) {
            *z = rc(rng);
        }
        FockVector::new(space.clone(), c).unwrap()
    }

    fn model(m: usize, kappa: f64) -> EffectiveModel {
        let grid = Grid::new(m, 2.0 * PI).unwrap();
        let kernel = Kernel::from_distance(grid, |d| 1.0 + 0.5 * (-d * d).exp()).unwrap();
        EffectiveModel::hartree(kernel, kappa).unwrap()
    }

    fn orbital(m: usize) -> WaveFunction {
        let grid = Grid::new(m, 2.0 * PI).unwrap();
        WaveFunction::from_fn(grid, |x| C64::new(1.0 + 0.4 * x.cos(), 0.3 * x.sin()))
            .normalized()
            .unwrap()
    }

    #[test]
    fn space_dimensions() {
        let s = TruncatedFock::new(2, 3).unwrap();
        assert_eq!(s.sector_dims(), vec![1, 2, 3, 4]);
        assert_eq!(s.total_dim(), 10);
        let s = TruncatedFock::new(3, 4).unwrap();
        assert_eq!(s.total_dim(), 35);
        assert!(matches!(TruncatedFock::with_cap(6, 30, 1000), Err(LabError::Size { .. })));
    }

    #[test]
    fn vacuum_is_annihilated() {
        let space = Arc::new(TruncatedFock::new(3, 5).unwrap());
        let f = [C64::new(0.3, 0.1), C64::new(-1.0, 0.0), C64::new(0.0, 2.0)];
        let out = apply_ladder(Ladder::Annihilate, &f, &FockVector::vacuum(space)).unwrap();
        assert_eq!(out.vector.norm(), 0.0);
    }

    #[test]
    fn ladder_adjointness_and_ccr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let space = Arc::new(TruncatedFock::new(3, 6).unwrap());
        for _ in 0..10 {
            let f: Vec<C64> = (0..3).map(|_| rc(&mut rng)).collect();
            let g: Vec<C64> = (0..3).map(|_| rc(&mut rng)).collect();
            let psi = random_vector(&space, 4, &mut rng);
            let chi = random_vector(&space, 4, &mut rng);
            let lhs = apply_ladder(Ladder::Create, &f, &psi).unwrap().vector.inner(&chi).unwrap();
            let rhs = psi.inner(&apply_ladder(Ladder::Annihilate, &f, &chi).unwrap().vector).unwrap();
            assert!((lhs - rhs).norm() < 1e-12);
            // <psi, [a(f), a*(g)] psi> = <f, g> |psi|^2
            let ag = apply_ladder(Ladder::Create, &g, &psi).unwrap().vector;
            let fa = apply_ladder(Ladder::Annihilate, &f, &ag).unwrap().vector;
            let af = apply_ladder(Ladder::Annihilate, &f, &psi).unwrap().vector;
            let gaf = apply_ladder(Ladder::Create, &g, &af).unwrap().vector;
            let comm: Vec<C64> = fa.coefficients().iter().zip(gaf.coefficients()).map(|(a, b)| a - b).collect();
            let value = linalg::dot(psi.coefficients(), &comm);
            let expected = linalg::dot(&f, &g) * psi.norm_sqr();
            assert!((value - expected).norm() < 1e-10 * (1.0 + expected.norm()));
        }
    }

    #[test]
    fn ladder_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let space = Arc::new(TruncatedFock::new(2, 12).unwrap());
        for _ in 0..100 {
            let f: Vec<C64> = (0..2).map(|_| rc(&mut rng)).collect();
            let nf = linalg::norm(&f);
            let psi = random_vector(&space, 12, &mut rng);
            let a = apply_ladder(Ladder::Annihilate, &f, &psi).unwrap().vector.norm();
            let c = apply_ladder(Ladder::Create, &f, &psi).unwrap();
            assert!(a <= nf * psi.number_root_norm(0.0) * (1.0 + 1e-12));
            assert!(c.vector.norm() <= nf * psi.number_root_norm(1.0) * (1.0 + 1e-12));
            // nothing is lost when the boundary sector is kept
            let full = (c.vector.norm_sqr() + c.truncated.powi(2)).sqrt();
            assert!(full <= nf * psi.number_root_norm(1.0) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn coherent_state_is_poisson() {
        let phi = Displacement::new(vec![C64::new(1.5, 0.5), C64::new(-0.5, 1.2)]).unwrap();
        let mean = phi.norm_sqr();
        let space = Arc::new(TruncatedFock::new(2, 40).unwrap());
        let coh = coherent_state(&phi, space.clone()).unwrap();
        assert!((coh.norm() - 1.0).abs() < 1e-10);
        let lnf = manybody::ln_factorials(space.n_max());
        for (n, w) in coh.sector_weights().iter().enumerate() {
            let poisson = (-mean + n as f64 * mean.ln() - lnf[n]).exp();
            assert!((w - poisson).abs() < 1e-10);
        }
        assert!((number_expectation(&coh) - mean).abs() < 1e-9);
        let f = [C64::new(0.2, -0.7), C64::new(1.1, 0.4)];
        let af = apply_ladder(Ladder::Annihilate, &f, &coh).unwrap().vector;
        let ev = linalg::dot(&f, phi.orbital());
        let expected: Vec<C64> = coh.coefficients().iter().map(|z| z * ev).collect();
        assert!(linalg::diff_norm(af.coefficients(), &expected) < 1e-9);
        assert!(matches!(
            coherent_state(&phi, Arc::new(TruncatedFock::new(2, 10).unwrap())),
            Err(LabError::Cutoff { suggested_n_max, .. }) if suggested_n_max == cutoff_rule(mean)
        ));
    }

    #[test]
    fn weyl_matches_series_and_is_unitary() {
        let phi = Displacement::new(vec![C64::new(0.8, 0.2), C64::new(-0.3, 0.9)]).unwrap();
        let space = Arc::new(TruncatedFock::new(2, 30).unwrap());
        let series = coherent_state(&phi, space.clone()).unwrap();
        let exp = weyl(&phi, &FockVector::vacuum(space.clone())).unwrap();
        assert!(exp.distance(&series).unwrap() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let psi = random_vector(&space, 30, &mut rng);
        assert!((weyl(&phi, &psi).unwrap().norm() - psi.norm()).abs() < 1e-10 * psi.norm());
        let back = weyl(&phi.negated(), &weyl(&phi, &psi).unwrap()).unwrap();
        assert!(back.distance(&psi).unwrap() < 1e-10 * psi.norm());
    }

    #[test]
    fn weyl_shift_relation() {
        let space = Arc::new(TruncatedFock::new(2, 30).unwrap());
        let zero = Displacement::new(vec![ZERO; 2]).unwrap();
        let f = [C64::new(0.4, 0.1), C64::new(-0.2, 0.5)];
        let (r1, r2) = weyl_conjugate_check(&zero, &f, space.clone()).unwrap();
        assert!(r1 < 1e-14 && r2 < 1e-14);
        let phi = Displacement::new(vec![C64::new(0.5, -0.3), C64::new(0.2, 0.6)]).unwrap();
        let (r1, r2) = weyl_conjugate_check(&phi, &f, space).unwrap();
        assert!(r1 <= 1e-8 && r2 <= 1e-8, "{r1:e} {r2:e}");
    }

    #[test]
    fn fock_hamiltonian_blocks_match_manybody() {
        let eff = model(3, 1.4);
        let lattice = LatticeModel::from_effective(&eff).unwrap();
        let space = Arc::new(TruncatedFock::new(3, 6).unwrap());
        let h = fock_hamiltonian(&lattice, 4, space.clone()).unwrap();
        assert_eq!(h.number_commutator_residual(), 0.0);
        let exact = model_hamiltonian(&lattice, Arc::new(build_basis(3, 4).unwrap())).unwrap();
        assert!((h.sector_block(4).to_dense() - exact.to_dense()).camax() < 1e-12);
        assert_eq!(h.expectation(&FockVector::vacuum(space)), 0.0);
    }

    #[test]
    fn gamma1_of_coherent_state_is_rank_one() {
        let c = [C64::new(0.6, 0.3), C64::new(-0.2, 0.7), C64::new(0.1, -0.1)];
        let phi = Displacement::new(c.iter().map(|z| z * 2.0).collect()).unwrap();
        let space = Arc::new(TruncatedFock::new(3, cutoff_rule(phi.norm_sqr())).unwrap());
        let coh = coherent_state(&phi, space.clone()).unwrap();
        let gamma = gamma1_fock(&coh).unwrap();
        let nrm = linalg::norm(&c);
        let unit: Vec<C64> = c.iter().map(|z| z / nrm).collect();
        assert!((gamma.matrix() - ReducedDensity::pure_product(&unit, 1).matrix()).camax() < 1e-10);
        let ev = gamma.eigenvalues();
        assert!(ev[1].abs() <= 1e-12 && ev[0].abs() <= 1e-12);
        assert!(gamma1_fock(&FockVector::vacuum(space.clone())).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = gamma1_fock(&random_vector(&space, 6, &mut rng)).unwrap();
        assert!((g.trace().re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sector_projection_recovers_product_state() {
        assert!((d_n(1) - 0.5f64.exp()).abs() < 1e-15);
        assert!((d_n(1) - 1.64872).abs() < 1e-5);
        let c = manybody::site_modes(&orbital(2));
        for n in [3usize, 8] {
            let space = Arc::new(TruncatedFock::new(2, cutoff_rule(n as f64)).unwrap());
            let root = (n as f64).sqrt();
            let coh = coherent_state(&Displacement::new(c.iter().map(|z| z * root).collect()).unwrap(), space).unwrap();
            let proj = sector_projection(&coh, n).unwrap();
            assert!((proj.constant - d_n(n)).abs() < 1e-10 * d_n(n));
            let state = proj.normalized_state(n).unwrap();
            let product = ManyBodyState::product(state.basis().clone(), &c).unwrap();
            assert!(linalg::diff_norm(state.coefficients(), product.coefficients()) < 1e-10);
        }
        let ratios: Vec<f64> = [4usize, 16, 64].iter().map(|&n| d_n(n) / (n as f64).powf(0.25)).collect();
        assert!((ratios[2] / ratios[1] - 1.0).abs() < 0.01);
        assert!(((2.0 * PI).powf(0.25) / ratios[2] - 1.0).abs() < 0.01);
    }

    #[test]
    fn generator_is_hermitian() {
        let eff = model(2, 1.0);
        let lattice = LatticeModel::from_effective(&eff).unwrap();
        let space = Arc::new(TruncatedFock::new(2, 12).unwrap());
        let c = manybody::site_modes(&orbital(2));
        for variant in [GeneratorVariant::Full, GeneratorVariant::Limit] {
            let g = FluctuationGenerator::new(variant, 5, &lattice, space.clone()).unwrap();
            assert!(g.matrix_at(&c).unwrap().hermiticity_residual() < 1e-12);
        }
    }

    #[test]
    fn generator_matches_conjugated_hamiltonian() {
        // W* (H_N - i d/dt) W  at a Hartree point, on low sectors
        let eff = model(2, 1.2);
        let lattice = LatticeModel::from_effective(&eff).unwrap();
        let n = 6;
        let space = Arc::new(TruncatedFock::new(2, 60).unwrap());
        let c = manybody::site_modes(&orbital(2));
        let root = (n as f64).sqrt();
        let shift = Displacement::new(c.iter().map(|z| z * root).collect()).unwrap();
        let h = fock_hamiltonian(&lattice, n, space.clone()).unwrap();
        let gen = FluctuationGenerator::new(GeneratorVariant::Full, n, &lattice, space.clone())
            .unwrap()
            .matrix_at(&c)
            .unwrap();
        let dc = hartree_velocity(&lattice, &c);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let psi = random_vector(&space, 2, &mut rng);
        // W* H W psi
        let conj = weyl(&shift.negated(), &h.apply(&weyl(&shift, &psi).unwrap())).unwrap();
        // i (d/dt W*) W psi = -i (a*(f') - a(f')) psi + Im<f, f'> psi with f = sqrt(N) c
        let fdot: Vec<C64> = dc.iter().map(|z| z * root).collect();
        let cre = apply_ladder(Ladder::Create, &fdot, &psi).unwrap().vector;
        let ann = apply_ladder(Ladder::Annihilate, &fdot, &psi).unwrap().vector;
        let im = linalg::dot(&c, &dc).im * n as f64;
        let expected: Vec<C64> = (0..psi.coefficients().len())
            .map(|i| {
                conj.coefficients()[i] - C64::new(0.0, 1.0) * (cre.coefficients()[i] - ann.coefficients()[i])
                    + psi.coefficients()[i] * im
            })
            .collect();
        let direct = gen.matvec(psi.coefficients());
        assert!(linalg::diff_norm(&direct, &expected) < 1e-8 * psi.norm());
    }

    #[test]
    fn limit_dynamics_preserves_parity() {
        let eff = model(2, 1.0);
        let settings = FluctuationSettings {
            n_max: Some(48),
            ..Default::default()
        };
        let traj = evolve_fluctuation(&orbital(2), &eff, 8, GeneratorVariant::Limit, FluctuationPath::Direct, 1.0, &settings).unwrap();
        assert_eq!(traj.times.len(), 11);
        for psi in &traj.states {
            assert!((psi.parity() - 1.0).abs() <= 1e-8);
            for p in 0..2 {
                let mut e = vec![ZERO; 2];
                e[p] = ONE;
                let af = apply_ladder(Ladder::Annihilate, &e, psi).unwrap().vector;
                assert!(linalg::dot(psi.coefficients(), af.coefficients()).norm() <= 1e-8);
            }
        }
        assert!(traj.norm_drift <= 1e-8);
        let growth = number_growth(&traj).unwrap();
        assert!(growth.c.is_finite() && growth.d.is_finite());
        for (t, y) in growth.times.iter().zip(&growth.values) {
            assert!(*y <= growth.c * (growth.d * t).exp() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn paths_agree_and_t0_is_identity() {
        let eff = model(2, 1.0);
        let settings = FluctuationSettings {
            n_max: Some(60),
            ..Default::default()
        };
        let t0 = evolve_fluctuation(&orbital(2), &eff, 4, GeneratorVariant::Full, FluctuationPath::Direct, 0.0, &settings).unwrap();
        assert_eq!(t0.states.len(), 1);
        assert_eq!(t0.last().coefficients()[0], ONE);
        let run = |path| {
            evolve_fluctuation(&orbital(2), &eff, 4, GeneratorVariant::Full, path, 0.5, &settings).unwrap()
        };
        let a = run(FluctuationPath::Conjugation);
        let b = run(FluctuationPath::Direct);
        assert_eq!(a.times.len(), b.times.len());
        assert!(a.last().distance(b.last()).unwrap() < 1e-6);
        assert!(evolve_fluctuation(&orbital(2), &eff, 4, GeneratorVariant::Limit, FluctuationPath::Conjugation, 0.5, &settings).is_err());
    }

    #[test]
    fn leakage_is_rejected() {
        let eff = model(2, 1.0);
        let settings = FluctuationSettings {
            n_max: Some(6),
            ..Default::default()
        };
        let out = evolve_fluctuation(&orbital(2), &eff, 50, GeneratorVariant::Limit, FluctuationPath::Direct, 1.0, &settings);
        assert!(matches!(out, Err(LabError::Truncation { .. })), "{out:?}");
    }

    #[test]
    fn hermite_path_interpolates() {
        let eff = model(3, 1.0);
        let lattice = LatticeModel::from_effective(&eff).unwrap();
        let path = HartreePath::solve(&orbital(3), &eff, &lattice, 1.0, 1e-2, 1e-3).unwrap();
        let fine = HartreePath::solve(&orbital(3), &eff, &lattice, 1.0, 1e-3, 1e-3).unwrap();
        for &t in &[0.0, 0.0137, 0.5, 0.9991, 1.0] {
            let a = path.at(t);
            let b = fine.at(t);
            assert!(linalg::diff_norm(&a, &b) < 1e-9, "t = {t}");
        }
        assert!((path.end_time() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rate_sweep_rows_sorted_and_exact_without_interaction() {
        let free = model(2, 0.0);
        let rows = rate_sweep(&orbital(2), &free, &[4, 2], 1.0, &RateSettings::default()).unwrap();
        assert_eq!(rows[0].particles, 2);
        assert!(rows.iter().all(|r| r.trace_distance < 1e-10 && r.leakage < 1e-9));
    }
}
