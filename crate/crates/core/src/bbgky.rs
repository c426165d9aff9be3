//! The BBGKY hierarchy for reduced densities on the lattice.
//!
//! In site modes, with multiplication operators `v_ij = v(x_i, x_j)`:
//!
//! ```text
//! i d/dt gamma^(k) = sum_j [h_j, gamma^(k)]
//!                  + (kappa / N) sum_{i<j<=k} [v_ij, gamma^(k)]
//!                  + kappa (1 - k/N) sum_{j<=k} tr_{k+1} [v_{j,k+1}, gamma^(k+1)]
//! ```
//!
//! For infinitely many particles `1/N -> 0` and `1 - k/N -> 1`. The partial
//! trace is an exact finite contraction.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::harness::format_float;
use crate::lattice::C64;
use crate::linalg;
use crate::manybody::{self, LatticeModel, ManyBodyState, ReducedDensity};
use crate::solvers::{EffectiveModel, SolverConfig, Trajectory};

/// Invariant violations above this are flagged along hierarchy trajectories.
pub const INVARIANT_FLAG: f64 = 1e-6;

const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParticleNumber {
    Finite(usize),
    Infinite,
}

impl ParticleNumber {
    /// `1/N`, zero for infinitely many particles.
    pub fn inverse(self) -> f64 {
        match self {
            ParticleNumber::Finite(n) => 1.0 / n as f64,
            ParticleNumber::Infinite => 0.0,
        }
    }

    /// `1 - k/N`.
    pub fn collision_coefficient(self, k: usize) -> f64 {
        match self {
            ParticleNumber::Finite(n) if k == n => 0.0,
            ParticleNumber::Finite(n) => 1.0 - k as f64 / n as f64,
            ParticleNumber::Infinite => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosureRule {
    /// `gamma^(K+1) = 0`.
    TruncateZero,
    /// `gamma^(K+1)` replaced by the slot-symmetrized product `gamma^(K) (x) gamma^(1)`.
    FactorizeTop,
}

#[derive(Clone, Debug)]
pub struct HierarchyState {
    densities: Vec<ReducedDensity>,
    particles: ParticleNumber,
}

impl HierarchyState {
    /// `densities[k-1]` must have order `k`; checks invariants and partial-trace compatibility.
    pub fn new(densities: Vec<ReducedDensity>, particles: ParticleNumber) -> Result<Self> {
        let state = Self::unchecked(densities, particles)?;
        let residual = state.invariant_residual().max(state.consistency_residual());
        if residual > 1e-8 {
            return Err(LabError::InvalidInput(format!(
                "initial hierarchy is inconsistent (residual {residual:e})"
            )));
        }
        Ok(state)
    }

    fn unchecked(densities: Vec<ReducedDensity>, particles: ParticleNumber) -> Result<Self> {
        let depth = densities.len();
        if depth == 0 {
            return Err(LabError::InvalidInput("hierarchy needs at least gamma^(1)".into()));
        }
        if let ParticleNumber::Finite(n) = particles {
            if depth > n {
                return Err(LabError::InvalidInput(format!("depth {depth} exceeds N = {n}")));
            }
        }
        let m = densities[0].modes();
        for (i, d) in densities.iter().enumerate() {
            if d.order() != i + 1 || d.modes() != m {
                return Err(LabError::InvalidInput(format!(
                    "density {} has order {} over {} modes",
                    i + 1,
                    d.order(),
                    d.modes()
                )));
            }
        }
        Ok(HierarchyState { densities, particles })
    }

    /// The reduced densities `gamma^(1..=depth)` of an exact state.
    pub fn from_state(psi: &ManyBodyState, depth: usize) -> Result<Self> {
        let n = psi.basis().particles();
        let densities = (1..=depth)
            .map(|k| manybody::reduced_density(psi, k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(densities, ParticleNumber::Finite(n))
    }

    /// `(|c><c|)^{(x) k}` for `k = 1..=depth`; `c` must be normalized.
    pub fn factorized(c: &[C64], depth: usize, particles: ParticleNumber) -> Result<Self> {
        let densities = (1..=depth).map(|k| ReducedDensity::pure_product(c, k)).collect();
        Self::new(densities, particles)
    }

    pub fn depth(&self) -> usize {
        self.densities.len()
    }

    pub fn particles(&self) -> ParticleNumber {
        self.particles
    }

    pub fn modes(&self) -> usize {
        self.densities[0].modes()
    }

    pub fn densities(&self) -> &[ReducedDensity] {
        &self.densities
    }

    pub fn density(&self, k: usize) -> Option<&ReducedDensity> {
        k.checked_sub(1).and_then(|i| self.densities.get(i))
    }

    /// Max over orders of trace, Hermiticity and positivity violations.
    pub fn invariant_residual(&self) -> f64 {
        self.densities
            .iter()
            .map(|d| d.invariant_residual())
            .fold(0.0, f64::max)
    }

    pub fn trace_error(&self) -> f64 {
        self.densities
            .iter()
            .map(|d| (d.trace() - C64::new(1.0, 0.0)).norm())
            .fold(0.0, f64::max)
    }

    pub fn hermiticity_residual(&self) -> f64 {
        self.densities
            .iter()
            .map(|d| d.hermiticity_residual())
            .fold(0.0, f64::max)
    }

    /// Max entrywise deviation of `tr_{k+1} gamma^(k+1)` from `gamma^(k)`.
    pub fn consistency_residual(&self) -> f64 {
        self.densities
            .windows(2)
            .map(|w| {
                let contracted = w[1].partial_trace().expect("order >= 2");
                (contracted.matrix() - w[0].matrix()).camax()
            })
            .fold(0.0, f64::max)
    }
}

/// Per-order operators of the hierarchy for one lattice model.
struct HierarchyOperators {
    modes: usize,
    coupling: f64,
    interaction: DMatrix<f64>,
    /// Kronecker sum `sum_j h_j` on `M^k`.
    kinetic: Vec<DMatrix<C64>>,
    /// `sum_{i<j} v(p_i, p_j)` per multi-index.
    intra: Vec<Vec<f64>>,
    /// `sum_j v(p_j, r)` per multi-index `P` (rows) and extra mode `r` (columns).
    attached: Vec<DMatrix<f64>>,
}

impl HierarchyOperators {
    fn new(model: &LatticeModel, depth: usize) -> Self {
        let m = model.modes();
        let v = &model.interaction;
        let mut kinetic = Vec::with_capacity(depth);
        let mut intra = Vec::with_capacity(depth);
        let mut attached = Vec::with_capacity(depth);
        for k in 1..=depth {
            let size = m.pow(k as u32);
            let mut sum = DMatrix::<C64>::zeros(size, size);
            for j in 0..k {
                let left = DMatrix::<C64>::identity(m.pow(j as u32), m.pow(j as u32));
                let right = DMatrix::<C64>::identity(m.pow((k - 1 - j) as u32), m.pow((k - 1 - j) as u32));
                sum += left.kronecker(&model.one_body).kronecker(&right);
            }
            kinetic.push(sum);
            let digits: Vec<Vec<usize>> = (0..size).map(|idx| digits(idx, m, k)).collect();
            intra.push(
                digits
                    .iter()
                    .map(|d| {
                        let mut w = 0.0;
                        for i in 0..k {
                            for j in i + 1..k {
                                w += v[(d[i], d[j])];
                            }
                        }
                        w
                    })
                    .collect(),
            );
            attached.push(DMatrix::from_fn(size, m, |p, r| {
                digits[p].iter().map(|&pj| v[(pj, r)]).sum()
            }));
        }
        HierarchyOperators {
            modes: m,
            coupling: model.coupling,
            interaction: v.clone(),
            kinetic,
            intra,
            attached,
        }
    }

    /// Bound on the spectral radius of the order-`k` generator.
    fn frequency_bound(&self, k: usize, inv_n: f64) -> f64 {
        let h = self.kinetic[0].camax() * self.modes as f64;
        let v = self.interaction.camax();
        2.0 * k as f64 * h + self.coupling.abs() * v * (k * k) as f64 * inv_n + 2.0 * self.coupling.abs() * v * k as f64
    }

    /// `i d/dt gamma^(k)` given `gamma^(k)` and, if the collision term is active, `gamma^(k+1)`.
    fn rhs(
        &self,
        k: usize,
        gamma: &DMatrix<C64>,
        next: Option<&DMatrix<C64>>,
        particles: ParticleNumber,
    ) -> DMatrix<C64> {
        let kin = &self.kinetic[k - 1];
        let mut out = kin * gamma - gamma * kin;
        let inv_n = particles.inverse();
        if inv_n != 0.0 && k >= 2 {
            let w = &self.intra[k - 1];
            let scale = self.coupling * inv_n;
            for q in 0..gamma.ncols() {
                for p in 0..gamma.nrows() {
                    out[(p, q)] += scale * (w[p] - w[q]) * gamma[(p, q)];
                }
            }
        }
        let coeff = self.coupling * particles.collision_coefficient(k);
        if let (Some(next), true) = (next, coeff != 0.0) {
            let m = self.modes;
            let u = &self.attached[k - 1];
            for q in 0..gamma.ncols() {
                for p in 0..gamma.nrows() {
                    let mut acc = C64::new(0.0, 0.0);
                    for r in 0..m {
                        acc += (u[(p, r)] - u[(q, r)]) * next[(p * m + r, q * m + r)];
                    }
                    out[(p, q)] += coeff * acc;
                }
            }
        }
        out
    }
}

fn digits(idx: usize, m: usize, k: usize) -> Vec<usize> {
    let mut d = vec![0; k];
    let mut rest = idx;
    for s in (0..k).rev() {
        d[s] = rest % m;
        rest /= m;
    }
    d
}

/// Slot-symmetrized `top (x) one`, averaging the position of the `one` slot.
fn factorize_top(top: &DMatrix<C64>, one: &DMatrix<C64>, m: usize, k: usize) -> DMatrix<C64> {
    let size = m.pow(k as u32 + 1);
    let weight = 1.0 / (k + 1) as f64;
    DMatrix::from_fn(size, size, |p, q| {
        let (dp, dq) = (digits(p, m, k + 1), digits(q, m, k + 1));
        let mut acc = C64::new(0.0, 0.0);
        for s in 0..=k {
            let fold = |d: &[usize]| {
                d.iter()
                    .enumerate()
                    .filter(|&(i, _)| i != s)
                    .fold(0, |acc, (_, &x)| acc * m + x)
            };
            acc += top[(fold(&dp), fold(&dq))] * one[(dp[s], dq[s])];
        }
        acc * weight
    })
}

fn closure_matrix(
    rule: ClosureRule,
    densities: &[DMatrix<C64>],
    m: usize,
) -> Option<DMatrix<C64>> {
    match rule {
        ClosureRule::TruncateZero => None,
        ClosureRule::FactorizeTop => {
            let k = densities.len();
            Some(factorize_top(&densities[k - 1], &densities[0], m, k))
        }
    }
}

fn stacked_rhs(
    ops: &HierarchyOperators,
    densities: &[DMatrix<C64>],
    particles: ParticleNumber,
    rule: ClosureRule,
) -> Vec<DMatrix<C64>> {
    let depth = densities.len();
    let top_needed = particles.collision_coefficient(depth) != 0.0;
    let closure = if top_needed {
        closure_matrix(rule, densities, ops.modes)
    } else {
        None
    };
    (1..=depth)
        .into_par_iter()
        .map(|k| {
            let next = if k < depth { densities.get(k) } else { closure.as_ref() };
            ops.rhs(k, &densities[k - 1], next, particles)
        })
        .collect()
}

/// `i d/dt gamma^(k)` for the hierarchy state. At `k = depth` the collision
/// term needs a closure unless its coefficient vanishes.
pub fn bbgky_rhs(
    state: &HierarchyState,
    k: usize,
    model: &LatticeModel,
    closure: Option<ClosureRule>,
) -> Result<DMatrix<C64>> {
    let depth = state.depth();
    if k == 0 || k > depth {
        return Err(LabError::InvalidInput(format!("order {k} outside 1..={depth}")));
    }
    if model.modes() != state.modes() {
        return Err(LabError::dim("hierarchy modes", state.modes(), model.modes()));
    }
    let ops = HierarchyOperators::new(model, depth);
    let matrices: Vec<DMatrix<C64>> = state.densities.iter().map(|d| d.matrix().clone()).collect();
    let closure_value;
    let next = if k < depth {
        Some(&matrices[k])
    } else if state.particles.collision_coefficient(k) == 0.0 {
        None
    } else {
        let rule = closure.ok_or_else(|| {
            LabError::InvalidInput(format!("gamma^({}) is missing and no closure was given", k + 1))
        })?;
        closure_value = closure_matrix(rule, &matrices, ops.modes);
        closure_value.as_ref()
    };
    Ok(ops.rhs(k, &matrices[k - 1], next, state.particles))
}

#[derive(Clone, Debug, Serialize)]
pub struct HierarchyDiagnostics {
    pub time: f64,
    pub trace_error: f64,
    pub hermiticity: f64,
    pub consistency: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct HierarchyTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<HierarchyState>,
    pub diagnostics: Vec<HierarchyDiagnostics>,
}

impl HierarchyTrajectory {
    pub fn flagged(&self) -> bool {
        self.diagnostics.iter().any(|d| d.flagged)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,trace_error,hermiticity,consistency,flagged\n");
        for d in &self.diagnostics {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                format_float(d.time),
                format_float(d.trace_error),
                format_float(d.hermiticity),
                format_float(d.consistency),
                u8::from(d.flagged)
            ));
        }
        out
    }
}

fn diagnose(state: &HierarchyState, time: f64) -> HierarchyDiagnostics {
    let trace_error = state.trace_error();
    let hermiticity = state.hermiticity_residual();
    let consistency = state.consistency_residual();
    HierarchyDiagnostics {
        time,
        trace_error,
        hermiticity,
        consistency,
        flagged: trace_error.max(hermiticity).max(consistency) > INVARIANT_FLAG,
    }
}

/// Integrates the stacked hierarchy with classical RK4 (the scheme field of `cfg` is not consulted).
pub fn evolve_hierarchy(
    init: &HierarchyState,
    rule: ClosureRule,
    model: &LatticeModel,
    cfg: &SolverConfig,
) -> Result<HierarchyTrajectory> {
    cfg.validate()?;
    if model.modes() != init.modes() {
        return Err(LabError::dim("hierarchy modes", init.modes(), model.modes()));
    }
    let depth = init.depth();
    let ops = HierarchyOperators::new(model, depth);
    let (steps, tau) = cfg.steps();
    let omega = ops.frequency_bound(depth, init.particles.inverse());
    if tau.abs() * omega > 2.5 {
        return Err(LabError::InvalidInput(format!(
            "time step {} too large for the hierarchy; use dt <= {:e}",
            tau.abs(),
            2.5 / omega
        )));
    }
    let particles = init.particles;
    let wrap = |mats: &[DMatrix<C64>]| -> Result<HierarchyState> {
        let densities = mats
            .iter()
            .enumerate()
            .map(|(i, m)| ReducedDensity::new(i + 1, ops.modes, m.clone()))
            .collect::<Result<Vec<_>>>()?;
        HierarchyState::unchecked(densities, particles)
    };
    let deriv = |mats: &[DMatrix<C64>]| -> Vec<DMatrix<C64>> {
        stacked_rhs(&ops, mats, particles, rule)
            .into_iter()
            .map(|r| r * (-I))
            .collect()
    };
    let axpy = |base: &[DMatrix<C64>], k: &[DMatrix<C64>], s: f64| -> Vec<DMatrix<C64>> {
        base.iter().zip(k).map(|(b, d)| b + d * C64::new(s, 0.0)).collect()
    };

    let mut current: Vec<DMatrix<C64>> = init.densities.iter().map(|d| d.matrix().clone()).collect();
    let mut traj = HierarchyTrajectory {
        times: vec![0.0],
        states: vec![init.clone()],
        diagnostics: vec![diagnose(init, 0.0)],
    };
    for step in 1..=steps {
        let k1 = deriv(&current);
        let k2 = deriv(&axpy(&current, &k1, 0.5 * tau));
        let k3 = deriv(&axpy(&current, &k2, 0.5 * tau));
        let k4 = deriv(&axpy(&current, &k3, tau));
        for (i, c) in current.iter_mut().enumerate() {
            *c += (&k1[i] + &k2[i] * C64::new(2.0, 0.0) + &k3[i] * C64::new(2.0, 0.0) + &k4[i])
                * C64::new(tau / 6.0, 0.0);
        }
        let time = step as f64 * tau;
        if current.iter().any(|c| c.iter().any(|z| !(z.re.is_finite() && z.im.is_finite()))) {
            return Err(LabError::IntegrationFailure {
                last_valid_time: (step - 1) as f64 * tau,
                reason: "non-finite hierarchy entries".into(),
            });
        }
        if step % cfg.record_every == 0 || step == steps {
            let state = wrap(&current)?;
            traj.diagnostics.push(diagnose(&state, time));
            traj.times.push(time);
            traj.states.push(state);
        }
    }
    Ok(traj)
}

/// Derivative of `(|c><c|)^{(x) k}` given `c` and `dc/dt`.
fn product_derivative(c: &[C64], dc: &[C64], k: usize) -> DMatrix<C64> {
    let m = c.len();
    let size = m.pow(k as u32);
    let mut a = vec![C64::new(0.0, 0.0); size];
    let mut da = vec![C64::new(0.0, 0.0); size];
    for (idx, (ai, dai)) in a.iter_mut().zip(da.iter_mut()).enumerate() {
        let d = digits(idx, m, k);
        *ai = d.iter().map(|&p| c[p]).product();
        *dai = (0..k)
            .map(|j| {
                d.iter()
                    .enumerate()
                    .map(|(s, &p)| if s == j { dc[p] } else { c[p] })
                    .product::<C64>()
            })
            .sum();
    }
    DMatrix::from_fn(size, size, |p, q| da[p] * a[q].conj() + a[p] * da[q].conj())
}

/// Residual tolerance the finite-difference time derivative is sized for.
const FD_TARGET: f64 = 1e-7;

/// `max_t || i d/dt gamma^(k) - RHS_inf(gamma^(k), gamma^(k+1)) ||_F` for
/// `gamma^(k) = (|phi_t><phi_t|)^{(x) k}` along a sampled trajectory, for `k = 1..=k_max`.
///
/// The time derivative is the five-point central difference over the
/// recorded snapshots, which must be equally spaced.
pub fn infinite_hierarchy_residual(
    traj: &Trajectory,
    k_max: usize,
    model: &EffectiveModel,
) -> Result<Vec<f64>> {
    if k_max == 0 {
        return Err(LabError::InvalidInput("k_max must be >= 1".into()));
    }
    if traj.len() < 5 {
        return Err(LabError::InvalidInput(format!(
            "residual needs at least 5 snapshots, trajectory has {}",
            traj.len()
        )));
    }
    let delta = traj.times[1] - traj.times[0];
    if traj
        .times
        .windows(2)
        .any(|w| ((w[1] - w[0]) - delta).abs() > 1e-9 * delta.abs().max(1e-12))
    {
        return Err(LabError::InvalidInput("snapshots must be equally spaced".into()));
    }
    let lattice = LatticeModel::from_effective(model)?;
    if lattice.modes() != traj.snapshots[0].grid().num_sites() {
        return Err(LabError::dim("trajectory modes", lattice.modes(), traj.snapshots[0].grid().num_sites()));
    }
    let ops = HierarchyOperators::new(&lattice, k_max);

    // five-point error ~ omega^5 delta^4 / 30
    let omega = linalg::hermitian_eigenvalues(&lattice.one_body)
        .iter()
        .fold(0.0f64, |a, e| a.max(e.abs()))
        + lattice.coupling.abs() * lattice.interaction.camax();
    let required = (30.0 * FD_TARGET / omega.powi(5).max(f64::MIN_POSITIVE)).powf(0.25);
    if delta.abs() > required {
        return Err(LabError::InvalidInput(format!(
            "trajectory too coarse for the time derivative: spacing {delta:e}, need <= {required:e}"
        )));
    }

    let modes: Vec<Vec<C64>> = traj.snapshots.iter().map(manybody::site_modes).collect();
    let mut worst = vec![0.0f64; k_max];
    for i in 2..modes.len() - 2 {
        let c = &modes[i];
        let dc: Vec<C64> = (0..c.len())
            .map(|p| {
                (modes[i - 2][p] - modes[i - 1][p] * 8.0 + modes[i + 1][p] * 8.0 - modes[i + 2][p])
                    / (12.0 * delta)
            })
            .collect();
        for k in 1..=k_max {
            let gamma = ReducedDensity::pure_product(c, k).into_matrix();
            let next = ReducedDensity::pure_product(c, k + 1).into_matrix();
            let rhs = ops.rhs(k, &gamma, Some(&next), ParticleNumber::Infinite);
            let lhs = product_derivative(c, &dc, k) * I;
            worst[k - 1] = worst[k - 1].max((lhs - rhs).norm());
        }
    }
    Ok(worst)
}

pub fn residual_csv(residuals: &[f64]) -> String {
    let mut out = String::from("k,residual\n");
    for (k, r) in residuals.iter().enumerate() {
        out.push_str(&format!("{},{}\n", k + 1, format_float(*r)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{Grid, Kernel, WaveFunction};
    use crate::manybody::{build_basis, model_hamiltonian, propagate, PropagationSettings};
    use crate::solvers::{evolve_hartree, Scheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn model(m: usize, kappa: f64) -> EffectiveModel {
        let grid = Grid::new(m, 2.0 * PI).unwrap();
        let kernel = Kernel::from_distance(grid, |d| (-d * d / 2.0).exp()).unwrap();
        EffectiveModel::hartree(kernel, kappa).unwrap()
    }

    fn initial(m: usize) -> WaveFunction {
        let grid = Grid::new(m, 2.0 * PI).unwrap();
        WaveFunction::from_fn(grid, |x| C64::new(1.0 + 0.5 * x.cos(), 0.3 * (2.0 * x).sin()))
            .normalized()
            .unwrap()
    }

    fn random_state(m: usize, n: usize, seed: u64) -> ManyBodyState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = Arc::new(build_basis(m, n).unwrap());
        let c: Vec<C64> = (0..basis.dimension())
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let nrm = linalg::norm(&c);
        ManyBodyState::new(basis, c.iter().map(|z| z / nrm).collect()).unwrap()
    }

    #[test]
    fn collision_coefficient_vanishes_at_top() {
        for n in 1..6 {
            assert_eq!(ParticleNumber::Finite(n).collision_coefficient(n), 0.0);
        }
        assert_eq!(ParticleNumber::Infinite.collision_coefficient(7), 1.0);
        assert_eq!(ParticleNumber::Infinite.inverse(), 0.0);
        // full depth needs no closure
        let lattice = LatticeModel::from_effective(&model(3, 1.0)).unwrap();
        let state = HierarchyState::from_state(&random_state(3, 3, 1), 3).unwrap();
        assert!(bbgky_rhs(&state, 3, &lattice, None).is_ok());
        let shallow = HierarchyState::from_state(&random_state(3, 3, 1), 2).unwrap();
        assert!(bbgky_rhs(&shallow, 2, &lattice, None).is_err());
        assert!(bbgky_rhs(&shallow, 2, &lattice, Some(ClosureRule::TruncateZero)).is_ok());
    }

    #[test]
    fn free_rhs_is_kinetic_commutator() {
        let lattice = LatticeModel::from_effective(&model(3, 0.0)).unwrap();
        let state = HierarchyState::from_state(&random_state(3, 3, 2), 3).unwrap();
        let h = &lattice.one_body;
        let id = DMatrix::<C64>::identity(3, 3);
        let h2 = h.kronecker(&id) + id.kronecker(h);
        let g = state.density(2).unwrap().matrix();
        let direct = &h2 * g - g * &h2;
        let rhs = bbgky_rhs(&state, 2, &lattice, None).unwrap();
        assert!((rhs - direct).norm() < 1e-12);
    }

    #[test]
    fn rhs_is_traceless_and_hermitian_generator() {
        let lattice = LatticeModel::from_effective(&model(3, 2.0)).unwrap();
        let state = HierarchyState::from_state(&random_state(3, 4, 3), 3).unwrap();
        for k in 1..=3 {
            let rhs = bbgky_rhs(&state, k, &lattice, Some(ClosureRule::FactorizeTop)).unwrap();
            assert!(rhs.trace().norm() < 1e-12);
            // commutators of Hermitian matrices are anti-Hermitian
            assert!((&rhs + rhs.adjoint()).camax() < 1e-12);
        }
    }

    #[test]
    fn rhs_matches_finite_difference_of_exact_dynamics() {
        let (m, n) = (2, 3);
        let eff = model(m, 1.5);
        let lattice = LatticeModel::from_effective(&eff).unwrap();
        let psi = random_state(m, n, 4);
        let h = model_hamiltonian(&lattice, psi.basis().clone()).unwrap();
        let settings = PropagationSettings::default();
        let eps = 1e-3;
        let state = HierarchyState::from_state(&psi, n).unwrap();
        let at = |t: f64| HierarchyState::from_state(&propagate(&psi, &h, t, &settings).unwrap(), n).unwrap();
        let (m2, m1, p1, p2) = (at(-2.0 * eps), at(-eps), at(eps), at(2.0 * eps));
        for k in 1..=n {
            let g = |s: &HierarchyState| s.density(k).unwrap().matrix().clone();
            let fd = (g(&m2) - g(&m1) * C64::new(8.0, 0.0) + g(&p1) * C64::new(8.0, 0.0) - g(&p2))
                / C64::new(12.0 * eps, 0.0);
            let rhs = bbgky_rhs(&state, k, &lattice, None).unwrap();
            assert!((fd * I - rhs).camax() < 1e-6, "k = {k}");
        }
    }

    #[test]
    fn full_depth_hierarchy_tracks_exact_densities() {
        let (m, n) = (3, 3);
        let eff = model(m, 1.0);
        let lattice = LatticeModel::from_effective(&eff).unwrap();
        let basis = Arc::new(build_basis(m, n).unwrap());
        let psi = ManyBodyState::from_wave_function(basis, &initial(m)).unwrap();
        let init = HierarchyState::from_state(&psi, n).unwrap();
        let cfg = SolverConfig::new(1e-3, 1.0, Scheme::ExplicitRk4).record_every(100);
        let traj = evolve_hierarchy(&init, ClosureRule::TruncateZero, &lattice, &cfg).unwrap();
        let h = model_hamiltonian(&lattice, psi.basis().clone()).unwrap();
        let mut worst: f64 = 0.0;
        for (t, state) in traj.times.iter().zip(&traj.states) {
            let exact = propagate(&psi, &h, *t, &PropagationSettings::default()).unwrap();
            for k in 1..=n {
                let reference = manybody::reduced_density(&exact, k).unwrap();
                worst = worst.max(manybody::trace_distance(state.density(k).unwrap(), &reference).unwrap());
            }
        }
        assert!(worst <= 1e-6, "worst {worst:e}");
        assert!(!traj.flagged());
        assert_eq!(traj.times.len(), 11);
    }

    #[test]
    fn free_hierarchy_is_conjugation() {
        let m = 3;
        let lattice = LatticeModel::from_effective(&model(m, 0.0)).unwrap();
        let state = HierarchyState::from_state(&random_state(m, 3, 6), 2).unwrap();
        let t = 0.7;
        let cfg = SolverConfig::new(1e-3, t, Scheme::ExplicitRk4).record_every(10_000);
        let traj = evolve_hierarchy(&state, ClosureRule::TruncateZero, &lattice, &cfg).unwrap();
        let u1 = linalg::unitary_propagator(&lattice.one_body, t);
        let u2 = u1.kronecker(&u1);
        let last = traj.states.last().unwrap();
        let e1 = &u1 * state.density(1).unwrap().matrix() * u1.adjoint();
        let e2 = &u2 * state.density(2).unwrap().matrix() * u2.adjoint();
        assert!((last.density(1).unwrap().matrix() - e1).camax() < 1e-10);
        assert!((last.density(2).unwrap().matrix() - e2).camax() < 1e-10);
    }

    #[test]
    fn factorized_closure_reproduces_hartree() {
        let m = 4;
        let eff = model(m, 1.3);
        let lattice = LatticeModel::from_effective(&eff).unwrap();
        let phi0 = initial(m);
        let c0 = manybody::site_modes(&phi0);
        let init = HierarchyState::factorized(&c0, 1, ParticleNumber::Infinite).unwrap();
        let cfg = SolverConfig::new(1e-3, 1.0, Scheme::ExplicitRk4).record_every(100);
        let traj = evolve_hierarchy(&init, ClosureRule::FactorizeTop, &lattice, &cfg).unwrap();
        let hartree_cfg = SolverConfig::new(1e-3, 1.0, Scheme::FourthOrderSplit).record_every(100);
        let hartree = evolve_hartree(&phi0, &eff, &hartree_cfg).unwrap();
        for (state, phi) in traj.states.iter().zip(&hartree.snapshots) {
            let projector = ReducedDensity::pure_product(&manybody::site_modes(phi), 1);
            assert!((state.density(1).unwrap().matrix() - projector.matrix()).camax() < 1e-8);
        }
    }

    #[test]
    fn factorize_top_is_symmetric_product() {
        let c = [C64::new(0.6, 0.0), C64::new(0.0, 0.8)];
        let g1 = ReducedDensity::pure_product(&c, 1).into_matrix();
        let g2 = ReducedDensity::pure_product(&c, 2).into_matrix();
        let g3 = factorize_top(&g2, &g1, 2, 2);
        assert!((g3 - ReducedDensity::pure_product(&c, 3).into_matrix()).camax() < 1e-15);
    }

    #[test]
    fn rejects_inconsistent_and_coarse_inputs() {
        let c = [C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        let d = [C64::new(0.0, 0.0), C64::new(1.0, 0.0)];
        let bad = HierarchyState::new(
            vec![ReducedDensity::pure_product(&c, 1), ReducedDensity::pure_product(&d, 2)],
            ParticleNumber::Infinite,
        );
        assert!(bad.is_err());
        assert!(HierarchyState::factorized(&c, 3, ParticleNumber::Finite(2)).is_err());

        let eff = model(4, 1.0);
        let cfg = SolverConfig::new(0.05, 1.0, Scheme::FourthOrderSplit);
        let traj = evolve_hartree(&initial(4), &eff, &cfg).unwrap();
        assert!(infinite_hierarchy_residual(&traj, 2, &eff).is_err());

        let lattice = LatticeModel::from_effective(&eff).unwrap();
        let init = HierarchyState::factorized(&manybody::site_modes(&initial(4)), 1, ParticleNumber::Infinite).unwrap();
        let big = SolverConfig::new(2.0, 4.0, Scheme::ExplicitRk4);
        assert!(evolve_hierarchy(&init, ClosureRule::FactorizeTop, &lattice, &big).is_err());
    }

    #[test]
    fn residual_separates_hartree_from_free_flow() {
        let m = 4;
        let eff = model(m, 1.0);
        let free = model(m, 0.0);
        let cfg = SolverConfig::new(1e-3, 0.5, Scheme::FourthOrderSplit).record_every(2);
        let hartree = evolve_hartree(&initial(m), &eff, &cfg).unwrap();
        let r = infinite_hierarchy_residual(&hartree, 3, &eff).unwrap();
        assert!(r.iter().all(|&x| x <= 1e-6), "{r:?}");
        let free_traj = evolve_hartree(&initial(m), &free, &cfg).unwrap();
        let r_free = infinite_hierarchy_residual(&free_traj, 3, &free).unwrap();
        assert!(r_free.iter().all(|&x| x <= 1e-10), "{r_free:?}");
        let r_bad = infinite_hierarchy_residual(&free_traj, 3, &eff).unwrap();
        assert!(r_bad.iter().all(|&x| x > 1e-2), "{r_bad:?}");
        assert_eq!(residual_csv(&r).lines().count(), 4);
    }
}
