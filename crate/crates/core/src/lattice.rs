//! Periodic one-dimensional mode lattice: the discretized one-particle space.
//!
//! Positions are `x_j = j h` for `j = 0..M`, with `h = L / M`. The Fourier
//! transform is unitary with respect to the weighted inner product
//! `<f, g> = h * sum(conj(f_j) g_j)`:
//!
//! ```text
//! fhat_n = sqrt(h / M) * sum_j f_j exp(-2 pi i j n / M)
//! ```
//!
//! Mode `n` carries wavenumber `2 pi m / L` where `m` is the signed index of
//! `n`. For even `M` the Nyquist mode `n = M / 2` takes the negative branch
//! `m = -M / 2`.

use std::sync::Arc;

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{LabError, Result};

pub type C64 = Complex64;

#[derive(Clone, Debug)]
pub struct Grid {
    num_sites: usize,
    length: f64,
    spacing: f64,
    wavenumbers: Vec<f64>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.num_sites == other.num_sites && self.length == other.length
    }
}

impl Grid {
    pub fn new(num_sites: usize, length: f64) -> Result<Self> {
        if num_sites < 2 {
            return Err(LabError::InvalidInput(format!(
                "grid needs at least 2 sites, got {num_sites}"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(LabError::InvalidInput(format!(
                "grid length must be positive and finite, got {length}"
            )));
        }
        let wavenumbers = (0..num_sites)
            .map(|n| 2.0 * std::f64::consts::PI * signed_index(n, num_sites) as f64 / length)
            .collect();
        Ok(Grid {
            num_sites,
            length,
            spacing: length / num_sites as f64,
            wavenumbers,
        })
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.num_sites).map(|j| j as f64 * self.spacing).collect()
    }

    /// Distance from site `j` to the origin on the ring.
    pub fn periodic_distance(&self, j: usize) -> f64 {
        let j = j % self.num_sites;
        j.min(self.num_sites - j) as f64 * self.spacing
    }

    pub(crate) fn check_same(&self, other: &Grid, context: &'static str) -> Result<()> {
        if self != other {
            return Err(LabError::dim(context, self.num_sites, other.num_sites));
        }
        Ok(())
    }
}

/// Signed mode index for DFT slot `n` of `m` slots, Nyquist on the negative branch.
pub fn signed_index(n: usize, m: usize) -> i64 {
    if n < (m + 1) / 2 {
        n as i64
    } else {
        n as i64 - m as i64
    }
}

/// Forward/inverse FFT pair for one grid size, with the unitary weighting applied.
#[derive(Clone)]
pub struct FourierPlan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    forward_scale: f64,
    inverse_scale: f64,
}

impl FourierPlan {
    pub fn new(grid: &Grid) -> Self {
        let mut planner = FftPlanner::new();
        let m = grid.num_sites as f64;
        FourierPlan {
            forward: planner.plan_fft_forward(grid.num_sites),
            inverse: planner.plan_fft_inverse(grid.num_sites),
            forward_scale: (grid.spacing / m).sqrt(),
            inverse_scale: 1.0 / (grid.spacing * m).sqrt(),
        }
    }

    pub fn forward(&self, data: &mut [C64]) {
        self.forward.process(data);
        for z in data.iter_mut() {
            *z *= self.forward_scale;
        }
    }

    pub fn inverse(&self, data: &mut [C64]) {
        self.inverse.process(data);
        for z in data.iter_mut() {
            *z *= self.inverse_scale;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveFunction {
    grid: Grid,
    amplitudes: Vec<C64>,
}

impl WaveFunction {
    pub fn new(grid: Grid, amplitudes: Vec<C64>) -> Result<Self> {
        if amplitudes.len() != grid.num_sites {
            return Err(LabError::dim(
                "wave function amplitudes",
                grid.num_sites,
                amplitudes.len(),
            ));
        }
        if amplitudes.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(LabError::InvalidInput(
                "wave function has non-finite entries".into(),
            ));
        }
        Ok(WaveFunction { grid, amplitudes })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.num_sites;
        WaveFunction {
            grid,
            amplitudes: vec![C64::new(0.0, 0.0); n],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> C64) -> Self {
        let amplitudes = grid.positions().into_iter().map(f).collect();
        WaveFunction { grid, amplitudes }
    }

    /// `amplitude * exp(i k x)` for the wavenumber of signed mode index `mode`.
    pub fn plane_wave(grid: Grid, mode: i64, amplitude: C64) -> Self {
        let k = 2.0 * std::f64::consts::PI * mode as f64 / grid.length;
        Self::from_fn(grid, |x| amplitude * C64::new(0.0, k * x).exp())
    }

    /// Builds a wave function from orthonormal site-mode coefficients `c_j = sqrt(h) psi(x_j)`.
    pub fn from_mode_coefficients(grid: Grid, coefficients: &[C64]) -> Result<Self> {
        let scale = 1.0 / grid.spacing.sqrt();
        let amplitudes = coefficients.iter().map(|c| c * scale).collect();
        Self::new(grid, amplitudes)
    }

    pub fn mode_coefficients(&self) -> Vec<C64> {
        let scale = self.grid.spacing.sqrt();
        self.amplitudes.iter().map(|z| z * scale).collect()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amplitudes
    }

    pub fn is_finite(&self) -> bool {
        self.amplitudes
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn density(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|z| z.norm_sqr()).collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.grid.spacing * self.amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Lattice inner product, antilinear in `self`.
    pub fn inner(&self, other: &WaveFunction) -> Result<C64> {
        self.grid.check_same(&other.grid, "inner product")?;
        let s: C64 = self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum();
        Ok(s * self.grid.spacing)
    }

    pub fn distance(&self, other: &WaveFunction) -> Result<f64> {
        self.grid.check_same(&other.grid, "distance")?;
        let s: f64 = self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        Ok((s * self.grid.spacing).sqrt())
    }

    pub fn scaled(&self, factor: C64) -> WaveFunction {
        WaveFunction {
            grid: self.grid.clone(),
            amplitudes: self.amplitudes.iter().map(|z| z * factor).collect(),
        }
    }

    pub fn normalized(&self) -> Result<WaveFunction> {
        let n = self.norm();
        if n == 0.0 {
            return Err(LabError::Degenerate("cannot normalize the zero function".into()));
        }
        Ok(self.scaled(C64::new(1.0 / n, 0.0)))
    }

    pub fn transform(&self) -> Vec<C64> {
        let mut data = self.amplitudes.clone();
        FourierPlan::new(&self.grid).forward(&mut data);
        data
    }
}

/// Real Fourier symbol of a translation-invariant one-body operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Multiplier {
    symbol: Vec<f64>,
}

impl Multiplier {
    pub fn new(symbol: Vec<f64>) -> Result<Self> {
        if symbol.iter().any(|s| !s.is_finite()) {
            return Err(LabError::InvalidInput("multiplier symbol must be finite".into()));
        }
        Ok(Multiplier { symbol })
    }

    /// `-Delta`, symbol `k^2`.
    pub fn laplacian(grid: &Grid) -> Self {
        Multiplier {
            symbol: grid.wavenumbers.iter().map(|k| k * k).collect(),
        }
    }

    /// `sqrt(1 - Delta)`, symbol `sqrt(1 + k^2)`.
    pub fn relativistic(grid: &Grid) -> Self {
        Multiplier {
            symbol: grid.wavenumbers.iter().map(|k| (1.0 + k * k).sqrt()).collect(),
        }
    }

    pub fn symbol(&self) -> &[f64] {
        &self.symbol
    }

    pub fn len(&self) -> usize {
        self.symbol.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbol.is_empty()
    }

    /// Matrix of the operator in the orthonormal site-mode basis.
    ///
    /// Real symmetric because every symbol here is even in `k`.
    pub fn site_matrix(&self, grid: &Grid) -> Result<DMatrix<f64>> {
        let m = grid.num_sites;
        if self.symbol.len() != m {
            return Err(LabError::dim("multiplier symbol", m, self.symbol.len()));
        }
        let mut column = vec![0.0; m];
        // K_pq depends on (p - q) mod M only.
        for (d, out) in column.iter_mut().enumerate() {
            let mut s = C64::new(0.0, 0.0);
            for (n, sym) in self.symbol.iter().enumerate() {
                let phase = 2.0 * std::f64::consts::PI * ((n * d) % m) as f64 / m as f64;
                s += sym * C64::new(0.0, phase).exp();
            }
            *out = s.re / m as f64;
        }
        Ok(DMatrix::from_fn(m, m, |p, q| column[(p + m - q) % m]))
    }
}

/// Even two-body kernel sampled on the lattice, `values[j] = v(x_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    grid: Grid,
    values: Vec<f64>,
}

impl Kernel {
    /// Ingests kernel samples, symmetrizing `(v(x) + v(-x)) / 2`.
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let m = grid.num_sites;
        if values.len() != m {
            return Err(LabError::dim("kernel values", m, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LabError::InvalidInput("kernel values must be finite".into()));
        }
        let sym: Vec<f64> = (0..m)
            .map(|j| 0.5 * (values[j] + values[(m - j) % m]))
            .collect();
        let asym = values
            .iter()
            .zip(&sym)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if asym > 1e-14 * values.iter().map(|v| v.abs()).fold(1.0, f64::max) {
            warn!("kernel is not even (max asymmetry {asym:e}); symmetrized on ingestion");
        }
        Ok(Kernel { grid, values: sym })
    }

    /// Kernel `v(|x|)` evaluated at the periodic distance of each site.
    pub fn from_distance(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..grid.num_sites)
            .map(|j| f(grid.periodic_distance(j)))
            .collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: Grid, c: f64) -> Result<Self> {
        let m = grid.num_sites;
        Self::new(grid, vec![c; m])
    }

    /// Discrete delta, `1/h` at the origin: identity under `convolve`.
    pub fn delta(grid: Grid) -> Self {
        let mut values = vec![0.0; grid.num_sites];
        values[0] = 1.0 / grid.spacing;
        Kernel { grid, values }
    }

    /// Periodic regularized Coulomb kernel `1 / (dist(x) + alpha)`.
    pub fn regularized_coulomb(grid: Grid, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LabError::InvalidInput(format!(
                "regularization alpha must be > 0, got {alpha}"
            )));
        }
        Self::from_distance(grid, |d| 1.0 / (d + alpha))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Interaction table `v_pq = v(x_p - x_q)` over site modes.
    pub fn interaction_table(&self) -> DMatrix<f64> {
        let m = self.grid.num_sites;
        DMatrix::from_fn(m, m, |p, q| self.values[(p + m - q) % m])
    }
}

pub fn apply_multiplier(m: &Multiplier, psi: &WaveFunction) -> Result<WaveFunction> {
    if m.symbol.len() != psi.grid.num_sites {
        return Err(LabError::dim(
            "multiplier vs wave function",
            psi.grid.num_sites,
            m.symbol.len(),
        ));
    }
    let plan = FourierPlan::new(&psi.grid);
    let mut data = psi.amplitudes.clone();
    plan.forward(&mut data);
    for (z, s) in data.iter_mut().zip(&m.symbol) {
        *z *= s;
    }
    plan.inverse(&mut data);
    Ok(WaveFunction {
        grid: psi.grid.clone(),
        amplitudes: data,
    })
}

/// Periodic convolution `(v * rho)(x_i) = h * sum_j v(x_i - x_j) rho(x_j)`.
pub fn convolve(v: &Kernel, rho: &[f64]) -> Result<Vec<f64>> {
    let plan = FourierPlan::new(&v.grid);
    convolve_with(&plan, v, rho)
}

pub(crate) fn convolve_with(plan: &FourierPlan, v: &Kernel, rho: &[f64]) -> Result<Vec<f64>> {
    let m = v.grid.num_sites;
    if rho.len() != m {
        return Err(LabError::dim("convolution density", m, rho.len()));
    }
    let mut vh: Vec<C64> = v.values.iter().map(|&x| C64::new(x, 0.0)).collect();
    let mut rh: Vec<C64> = rho.iter().map(|&x| C64::new(x, 0.0)).collect();
    plan.forward(&mut vh);
    plan.forward(&mut rh);
    // Unitary weighting: hat(v * rho) = sqrt(h M) * hat(v) * hat(rho).
    let factor = (v.grid.spacing * m as f64).sqrt();
    for (a, b) in rh.iter_mut().zip(&vh) {
        *a *= b * factor;
    }
    plan.inverse(&mut rh);
    Ok(rh.into_iter().map(|z| z.re).collect())
}

/// `( sum_k sqrt(1 + k^2) |psi_hat(k)|^2 )^(1/2)`.
pub fn sobolev_half_norm(psi: &WaveFunction) -> f64 {
    let plan = FourierPlan::new(&psi.grid);
    sobolev_half_norm_with(&plan, psi)
}

pub(crate) fn sobolev_half_norm_with(plan: &FourierPlan, psi: &WaveFunction) -> f64 {
    let mut data = psi.amplitudes.clone();
    plan.forward(&mut data);
    data.iter()
        .zip(&psi.grid.wavenumbers)
        .map(|(z, k)| (1.0 + k * k).sqrt() * z.norm_sqr())
        .sum::<f64>()
        .sqrt()
}
