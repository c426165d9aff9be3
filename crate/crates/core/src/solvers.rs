//! Time integration of the effective one-particle equations
//!
//! ```text
//! i d/dt phi = K phi + V_ext phi + g (v * |phi|^2) phi      (kernel models)
//! i d/dt phi = K phi + V_ext phi + g |phi|^2 phi            (contact model)
//! ```
//!
//! with `K` either `-Delta` or `sqrt(1 - Delta)` and `g` the signed
//! interaction strength. The split-step schemes treat `K` exactly in Fourier
//! space and the local potential exactly as a phase; `|phi|^2` is invariant
//! under the phase step, so the nonlinear substep is exact.

use crate::error::{LabError, Result};
use crate::harness::format_float;
use crate::lattice::{
    convolve_with, sobolev_half_norm_with, FourierPlan, Grid, Kernel, Multiplier, WaveFunction,
    C64,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KineticKind {
    /// `-Delta`
    Laplacian,
    /// `sqrt(1 - Delta)`
    Relativistic,
}

#[derive(Clone, Debug)]
pub enum Interaction {
    Kernel(Kernel),
    /// Local cubic term `|phi|^2 phi`.
    Contact,
}

#[derive(Clone, Debug)]
pub struct EffectiveModel {
    grid: Grid,
    kinetic_kind: KineticKind,
    kinetic: Multiplier,
    external: Vec<f64>,
    interaction: Interaction,
    coupling: f64,
    regularization: f64,
    attractive: bool,
}

impl EffectiveModel {
    /// `-Delta + kappa (v * |phi|^2)`.
    pub fn hartree(kernel: Kernel, kappa: f64) -> Result<Self> {
        check_coupling(kappa)?;
        let grid = kernel.grid().clone();
        Ok(EffectiveModel {
            kinetic: Multiplier::laplacian(&grid),
            external: vec![0.0; grid.num_sites()],
            grid,
            kinetic_kind: KineticKind::Laplacian,
            interaction: Interaction::Kernel(kernel),
            coupling: kappa,
            regularization: 0.0,
            attractive: false,
        })
    }

    /// `-Delta + 8 pi a0 |phi|^2`.
    pub fn gross_pitaevskii(grid: Grid, a0: f64) -> Result<Self> {
        check_coupling(a0)?;
        Ok(EffectiveModel {
            kinetic: Multiplier::laplacian(&grid),
            external: vec![0.0; grid.num_sites()],
            grid,
            kinetic_kind: KineticKind::Laplacian,
            interaction: Interaction::Contact,
            coupling: 8.0 * std::f64::consts::PI * a0,
            regularization: 0.0,
            attractive: false,
        })
    }

    /// `sqrt(1 - Delta) - kappa (1/(|.| + alpha) * |phi|^2)`; `kappa > 0` attracts.
    pub fn semi_relativistic(grid: Grid, kappa: f64, alpha: f64) -> Result<Self> {
        check_coupling(kappa)?;
        let kernel = Kernel::regularized_coulomb(grid.clone(), alpha)?;
        Ok(EffectiveModel {
            kinetic: Multiplier::relativistic(&grid),
            external: vec![0.0; grid.num_sites()],
            grid,
            kinetic_kind: KineticKind::Relativistic,
            interaction: Interaction::Kernel(kernel),
            coupling: kappa,
            regularization: alpha,
            attractive: true,
        })
    }

    /// Default semi-relativistic cutoff, one lattice unit of `1/M`.
    pub fn default_regularization(grid: &Grid) -> f64 {
        1.0 / grid.num_sites() as f64
    }

    pub fn with_external(mut self, external: Vec<f64>) -> Result<Self> {
        if external.len() != self.grid.num_sites() {
            return Err(LabError::dim(
                "external potential",
                self.grid.num_sites(),
                external.len(),
            ));
        }
        if external.iter().any(|v| !v.is_finite()) {
            return Err(LabError::InvalidInput("external potential must be finite".into()));
        }
        self.external = external;
        Ok(self)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kinetic_kind(&self) -> KineticKind {
        self.kinetic_kind
    }

    pub fn kinetic(&self) -> &Multiplier {
        &self.kinetic
    }

    pub fn external(&self) -> &[f64] {
        &self.external
    }

    pub fn interaction(&self) -> &Interaction {
        &self.interaction
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn is_attractive(&self) -> bool {
        self.attractive
    }

    /// Coefficient in front of the interaction term in the generator.
    pub fn interaction_strength(&self) -> f64 {
        if self.attractive {
            -self.coupling
        } else {
            self.coupling
        }
    }

    /// Local potential `V_ext + g (v * |phi|^2)` (or `g |phi|^2`) seen by `phi`.
    fn potential(&self, plan: &FourierPlan, psi: &WaveFunction) -> Result<Vec<f64>> {
        let g = self.interaction_strength();
        let rho = psi.density();
        let mean_field = match &self.interaction {
            Interaction::Kernel(k) => convolve_with(plan, k, &rho)?,
            Interaction::Contact => rho,
        };
        Ok(self
            .external
            .iter()
            .zip(mean_field)
            .map(|(v, u)| v + g * u)
            .collect())
    }

    /// Right-hand side `K phi + P(phi) phi` of `i d/dt phi = ...`.
    pub fn generator(&self, psi: &WaveFunction) -> Result<WaveFunction> {
        self.grid.check_same(psi.grid(), "generator")?;
        let plan = FourierPlan::new(&self.grid);
        self.generator_with(&plan, psi)
    }

    fn generator_with(&self, plan: &FourierPlan, psi: &WaveFunction) -> Result<WaveFunction> {
        let pot = self.potential(plan, psi)?;
        let mut data = psi.amplitudes().to_vec();
        plan.forward(&mut data);
        for (z, s) in data.iter_mut().zip(self.kinetic.symbol()) {
            *z *= s;
        }
        plan.inverse(&mut data);
        for ((z, a), p) in data.iter_mut().zip(psi.amplitudes()).zip(&pot) {
            *z += a * p;
        }
        WaveFunction::new(self.grid.clone(), data)
    }
}

fn check_coupling(c: f64) -> Result<()> {
    if !c.is_finite() {
        return Err(LabError::InvalidInput(format!("coupling must be finite, got {c}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    StrangSplit,
    FourthOrderSplit,
    ExplicitRk4,
}

impl Scheme {
    pub fn order(self) -> u32 {
        match self {
            Scheme::StrangSplit => 2,
            Scheme::FourthOrderSplit | Scheme::ExplicitRk4 => 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub dt: f64,
    /// Final time; negative values integrate backward.
    pub t_end: f64,
    pub scheme: Scheme,
    pub record_every: usize,
    /// `None`: no monitoring, except for the semi-relativistic solver which
    /// then uses 20 times the initial `H^{1/2}` norm.
    pub blowup_threshold: Option<f64>,
}

impl SolverConfig {
    pub fn new(dt: f64, t_end: f64, scheme: Scheme) -> Self {
        SolverConfig {
            dt,
            t_end,
            scheme,
            record_every: 1,
            blowup_threshold: None,
        }
    }

    pub fn record_every(mut self, n: usize) -> Self {
        self.record_every = n;
        self
    }

    pub fn blowup_threshold(mut self, threshold: f64) -> Self {
        self.blowup_threshold = Some(threshold);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(LabError::InvalidInput(format!("dt must be positive, got {}", self.dt)));
        }
        if !self.t_end.is_finite() {
            return Err(LabError::InvalidInput("t_end must be finite".into()));
        }
        if self.t_end != 0.0 && self.dt > self.t_end.abs() * (1.0 + 1e-12) {
            return Err(LabError::InvalidInput(format!(
                "dt = {} exceeds |t_end| = {}",
                self.dt,
                self.t_end.abs()
            )));
        }
        if self.record_every == 0 {
            return Err(LabError::InvalidInput("record_every must be positive".into()));
        }
        if let Some(th) = self.blowup_threshold {
            if !(th > 0.0 && th.is_finite()) {
                return Err(LabError::InvalidInput(format!(
                    "blow-up threshold must be positive, got {th}"
                )));
            }
        }
        Ok(())
    }

    /// Number of steps and the signed step actually taken (evenly dividing `t_end`).
    pub fn steps(&self) -> (usize, f64) {
        if self.t_end == 0.0 {
            return (0, 0.0);
        }
        let n = (self.t_end.abs() / self.dt - 1e-9).ceil().max(1.0) as usize;
        (n, self.t_end / n as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<WaveFunction>,
    pub mass_series: Vec<f64>,
    pub energy_series: Vec<f64>,
    pub h_half_series: Vec<f64>,
    pub blowup_time: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &WaveFunction {
        self.snapshots.last().expect("trajectory always holds the initial state")
    }

    /// `sup_t ||phi_t||_{H^{1/2}}` over the recorded times.
    pub fn h_half_sup(&self) -> f64 {
        self.h_half_series.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_mass_drift(&self) -> f64 {
        let m0 = self.mass_series[0];
        self.mass_series
            .iter()
            .map(|m| (m - m0).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_energy_drift(&self) -> f64 {
        let e0 = self.energy_series[0];
        self.energy_series
            .iter()
            .map(|e| (e - e0).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with columns `t, mass, energy, h_half, blowup_flag`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mass,energy,h_half,blowup_flag\n");
        for i in 0..self.times.len() {
            let flagged = self.blowup_time.is_some_and(|tb| self.times[i] >= tb);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                format_float(self.times[i]),
                format_float(self.mass_series[i]),
                format_float(self.energy_series[i]),
                format_float(self.h_half_series[i]),
                u8::from(flagged)
            ));
        }
        out
    }
}

struct Stepper<'a> {
    model: &'a EffectiveModel,
    plan: FourierPlan,
}

impl Stepper<'_> {
    fn potential_phase(&self, psi: &mut WaveFunction, tau: f64) -> Result<()> {
        let pot = self.model.potential(&self.plan, psi)?;
        for (z, p) in psi.amplitudes_mut().iter_mut().zip(pot) {
            *z *= C64::new(0.0, -tau * p).exp();
        }
        Ok(())
    }

    fn kinetic_phase(&self, psi: &mut WaveFunction, tau: f64) {
        let data = psi.amplitudes_mut();
        self.plan.forward(data);
        for (z, s) in data.iter_mut().zip(self.model.kinetic.symbol()) {
            *z *= C64::new(0.0, -tau * s).exp();
        }
        self.plan.inverse(data);
    }

    fn strang(&self, psi: &mut WaveFunction, tau: f64) -> Result<()> {
        self.potential_phase(psi, 0.5 * tau)?;
        self.kinetic_phase(psi, tau);
        self.potential_phase(psi, 0.5 * tau)
    }

    fn rhs(&self, psi: &WaveFunction) -> Result<Vec<C64>> {
        let g = self.model.generator_with(&self.plan, psi)?;
        Ok(g.into_amplitudes()
            .into_iter()
            .map(|z| C64::new(z.im, -z.re))
            .collect())
    }

    fn rk4(&self, psi: &mut WaveFunction, tau: f64) -> Result<()> {
        let grid = psi.grid().clone();
        let base = psi.amplitudes().to_vec();
        let shifted = |k: &[C64], f: f64| -> Result<WaveFunction> {
            WaveFunction::new(
                grid.clone(),
                base.iter().zip(k).map(|(a, b)| a + b * f).collect(),
            )
        };
        let k1 = self.rhs(psi)?;
        let k2 = self.rhs(&shifted(&k1, 0.5 * tau)?)?;
        let k3 = self.rhs(&shifted(&k2, 0.5 * tau)?)?;
        let k4 = self.rhs(&shifted(&k3, tau)?)?;
        for (i, z) in psi.amplitudes_mut().iter_mut().enumerate() {
            *z = base[i] + (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) * (tau / 6.0);
        }
        Ok(())
    }

    fn step(&self, scheme: Scheme, psi: &mut WaveFunction, tau: f64) -> Result<()> {
        match scheme {
            Scheme::StrangSplit => self.strang(psi, tau),
            Scheme::FourthOrderSplit => {
                // Yoshida triple jump
                let cbrt2 = 2f64.powf(1.0 / 3.0);
                let w1 = 1.0 / (2.0 - cbrt2);
                let w0 = -cbrt2 / (2.0 - cbrt2);
                self.strang(psi, w1 * tau)?;
                self.strang(psi, w0 * tau)?;
                self.strang(psi, w1 * tau)
            }
            Scheme::ExplicitRk4 => self.rk4(psi, tau),
        }
    }

    fn energy(&self, psi: &WaveFunction) -> Result<f64> {
        energy_with(&self.plan, psi, self.model)
    }
}

/// Integrates `i d/dt phi = K phi + P(phi) phi` for any effective model.
pub fn evolve(phi0: &WaveFunction, model: &EffectiveModel, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate()?;
    model.grid.check_same(phi0.grid(), "initial state vs model")?;
    if !phi0.is_finite() {
        return Err(LabError::InvalidInput("initial state is not finite".into()));
    }
    let stepper = Stepper {
        model,
        plan: FourierPlan::new(&model.grid),
    };
    let h_half0 = sobolev_half_norm_with(&stepper.plan, phi0);
    let threshold = match (cfg.blowup_threshold, model.kinetic_kind) {
        (Some(th), _) => Some(th),
        (None, KineticKind::Relativistic) => Some(20.0 * h_half0),
        (None, KineticKind::Laplacian) => None,
    };
    if let Some(th) = threshold {
        if th <= h_half0 {
            return Err(LabError::InvalidInput(format!(
                "blow-up threshold {th} must exceed the initial H^1/2 norm {h_half0}"
            )));
        }
    }

    let (n_steps, tau) = cfg.steps();
    let mut traj = Trajectory {
        times: vec![0.0],
        snapshots: vec![phi0.clone()],
        mass_series: vec![phi0.norm_sqr()],
        energy_series: vec![stepper.energy(phi0)?],
        h_half_series: vec![h_half0],
        blowup_time: None,
    };
    let mut psi = phi0.clone();
    for step in 1..=n_steps {
        let t_prev = (step - 1) as f64 * tau;
        stepper.step(cfg.scheme, &mut psi, tau)?;
        if !psi.is_finite() {
            return Err(LabError::IntegrationFailure {
                last_valid_time: t_prev,
                reason: "non-finite amplitudes".into(),
            });
        }
        if step % cfg.record_every == 0 || step == n_steps {
            let t = step as f64 * tau;
            let h_half = sobolev_half_norm_with(&stepper.plan, &psi);
            traj.times.push(t);
            traj.mass_series.push(psi.norm_sqr());
            traj.energy_series.push(stepper.energy(&psi)?);
            traj.h_half_series.push(h_half);
            traj.snapshots.push(psi.clone());
            if threshold.is_some_and(|th| h_half > th) {
                traj.blowup_time = Some(t);
                break;
            }
        }
    }
    Ok(traj)
}

/// Hartree flow `i d/dt phi = -Delta phi + V_ext phi + kappa (v * |phi|^2) phi`.
pub fn evolve_hartree(
    phi0: &WaveFunction,
    model: &EffectiveModel,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    if matches!(model.interaction, Interaction::Contact) {
        return Err(LabError::InvalidInput(
            "Hartree evolution needs a kernel, not a contact interaction".into(),
        ));
    }
    evolve(phi0, model, cfg)
}

/// Gross-Pitaevskii flow `i d/dt phi = -Delta phi + 8 pi a0 |phi|^2 phi`.
pub fn evolve_gp(phi0: &WaveFunction, a0: f64, cfg: &SolverConfig) -> Result<Trajectory> {
    let model = EffectiveModel::gross_pitaevskii(phi0.grid().clone(), a0)?;
    evolve(phi0, &model, cfg)
}

/// Semi-relativistic Hartree flow with blow-up monitoring.
pub fn evolve_semirel(
    phi0: &WaveFunction,
    model: &EffectiveModel,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    if model.kinetic_kind != KineticKind::Relativistic {
        return Err(LabError::InvalidInput(
            "semi-relativistic evolution needs the sqrt(1 - Delta) kinetic term".into(),
        ));
    }
    if matches!(model.interaction, Interaction::Contact) || !model.attractive {
        return Err(LabError::InvalidInput(
            "semi-relativistic evolution needs the attractive regularized kernel".into(),
        ));
    }
    evolve(phi0, model, cfg)
}

/// Conserved energy of the selected model.
///
/// Kinetic quadratic form, external term, and half the interaction term; for
/// the contact model the last piece is `(g/2) int |phi|^4`, i.e.
/// `4 pi a0 int |phi|^4`.
pub fn energy(phi: &WaveFunction, model: &EffectiveModel) -> Result<f64> {
    model.grid.check_same(phi.grid(), "energy")?;
    energy_with(&FourierPlan::new(&model.grid), phi, model)
}

fn energy_with(plan: &FourierPlan, phi: &WaveFunction, model: &EffectiveModel) -> Result<f64> {
    let h = model.grid.spacing();
    let mut hat = phi.amplitudes().to_vec();
    plan.forward(&mut hat);
    let kinetic: f64 = hat
        .iter()
        .zip(model.kinetic.symbol())
        .map(|(z, s)| s * z.norm_sqr())
        .sum();
    let rho = phi.density();
    let external: f64 = h * rho.iter().zip(&model.external).map(|(r, v)| r * v).sum::<f64>();
    let g = model.interaction_strength();
    let interaction = match &model.interaction {
        Interaction::Kernel(k) => {
            let conv = convolve_with(plan, k, &rho)?;
            0.5 * g * h * conv.iter().zip(&rho).map(|(c, r)| c * r).sum::<f64>()
        }
        Interaction::Contact => 0.5 * g * h * rho.iter().map(|r| r * r).sum::<f64>(),
    };
    Ok(kinetic + external + interaction)
}

/// First recorded time whose `H^{1/2}` norm exceeds `threshold`.
pub fn detect_blowup(tr: &Trajectory, threshold: f64) -> Option<f64> {
    tr.times
        .iter()
        .zip(&tr.h_half_series)
        .find(|(_, &n)| n > threshold)
        .map(|(&t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ring(m: usize) -> Grid {
        Grid::new(m, 2.0 * PI).unwrap()
    }

    fn gaussian(grid: &Grid, center: f64, width: f64, kick: f64) -> WaveFunction {
        let psi = WaveFunction::from_fn(grid.clone(), |x| {
            let d = x - center;
            C64::new(0.0, kick * x).exp() * (-d * d / (2.0 * width * width)).exp()
        });
        psi.normalized().unwrap()
    }

    fn smooth_kernel(grid: &Grid) -> Kernel {
        Kernel::from_distance(grid.clone(), |d| (-d * d).exp() + 0.3 * (d).cos()).unwrap()
    }

    #[test]
    fn free_plane_wave_phase() {
        let g = ring(32);
        let k0 = 3;
        let phi0 = WaveFunction::plane_wave(g.clone(), k0, C64::new(0.4, 0.0));
        let model = EffectiveModel::hartree(smooth_kernel(&g), 0.0).unwrap();
        let cfg = SolverConfig::new(1e-3, 1.0, Scheme::StrangSplit).record_every(100);
        let tr = evolve_hartree(&phi0, &model, &cfg).unwrap();
        let exact = phi0.scaled(C64::new(0.0, -((k0 * k0) as f64)).exp());
        assert!(tr.last().distance(&exact).unwrap() < 1e-8);
    }

    #[test]
    fn constant_kernel_adds_global_phase() {
        let g = ring(32);
        let phi0 = gaussian(&g, 3.0, 0.7, 1.0).scaled(C64::new(1.3, 0.0));
        let c = 0.8;
        let kappa = 1.5;
        let model = EffectiveModel::hartree(Kernel::constant(g.clone(), c).unwrap(), kappa).unwrap();
        let cfg = SolverConfig::new(1e-3, 1.0, Scheme::StrangSplit).record_every(1000);
        let tr = evolve_hartree(&phi0, &model, &cfg).unwrap();
        let free_model = EffectiveModel::hartree(Kernel::constant(g, c).unwrap(), 0.0).unwrap();
        let free = evolve_hartree(&phi0, &free_model, &cfg).unwrap();
        let phase = C64::new(0.0, -kappa * c * phi0.norm_sqr()).exp();
        assert!(tr.last().distance(&free.last().scaled(phase)).unwrap() < 1e-8);
    }

    #[test]
    fn split_matches_refined_rk4() {
        let g = ring(32);
        let phi0 = gaussian(&g, 2.0, 0.8, 2.0);
        let model = EffectiveModel::hartree(smooth_kernel(&g), 2.0).unwrap();
        let cfg = SolverConfig::new(1e-3, 1.0, Scheme::FourthOrderSplit).record_every(1000);
        let split = evolve_hartree(&phi0, &model, &cfg).unwrap();
        let reference = SolverConfig::new(1e-4, 1.0, Scheme::ExplicitRk4).record_every(10000);
        let rk = evolve_hartree(&phi0, &model, &reference).unwrap();
        assert!(split.last().distance(rk.last()).unwrap() <= 1e-6);
    }

    #[test]
    fn gp_plane_wave_dispersion() {
        let g = ring(16);
        let (k0, amp, a0) = (2, 0.5, 0.3);
        let phi0 = WaveFunction::plane_wave(g.clone(), k0, C64::new(amp, 0.0));
        let cfg = SolverConfig::new(1e-3, 1.0, Scheme::StrangSplit).record_every(1000);
        let tr = evolve_gp(&phi0, a0, &cfg).unwrap();
        let omega = (k0 * k0) as f64 + 8.0 * PI * a0 * amp * amp;
        let exact = phi0.scaled(C64::new(0.0, -omega).exp());
        assert!(tr.last().distance(&exact).unwrap() / phi0.norm() < 1e-8);

        let free = evolve_gp(&phi0, 0.0, &cfg).unwrap();
        let exact = phi0.scaled(C64::new(0.0, -((k0 * k0) as f64)).exp());
        assert!(free.last().distance(&exact).unwrap() < 1e-8);
    }

    #[test]
    fn gp_energy_of_plane_wave() {
        let g = ring(16);
        let (amp, a0) = (0.7, 0.2);
        let model = EffectiveModel::gross_pitaevskii(g.clone(), a0).unwrap();
        let phi = WaveFunction::plane_wave(g.clone(), 3, C64::new(amp, 0.0));
        let expected = g.length() * (amp * amp * 9.0 + 4.0 * PI * a0 * amp.powi(4));
        assert!((energy(&phi, &model).unwrap() - expected).abs() < 1e-12);
        assert_eq!(energy(&WaveFunction::zeros(g), &model).unwrap(), 0.0);
    }

    #[test]
    fn interaction_energy_matches_double_loop() {
        let g = ring(12);
        let kernel = smooth_kernel(&g);
        let kappa = 0.9;
        let model = EffectiveModel::hartree(kernel.clone(), kappa).unwrap();
        let phi = gaussian(&g, 1.0, 0.9, 1.0);
        let free = EffectiveModel::hartree(kernel.clone(), 0.0).unwrap();
        let interaction = energy(&phi, &model).unwrap() - energy(&phi, &free).unwrap();
        let h = g.spacing();
        let rho = phi.density();
        let m = g.num_sites();
        let mut direct = 0.0;
        for i in 0..m {
            for j in 0..m {
                direct += h * h * kernel.values()[(i + m - j) % m] * rho[i] * rho[j];
            }
        }
        assert!((interaction - 0.5 * kappa * direct).abs() < 1e-12);
    }

    #[test]
    fn time_reversal_recovers_initial_state() {
        let g = ring(32);
        let phi0 = gaussian(&g, 3.0, 0.6, 1.0);
        let model = EffectiveModel::hartree(smooth_kernel(&g), 1.0).unwrap();
        let fwd = SolverConfig::new(1e-3, 1.0, Scheme::StrangSplit).record_every(1000);
        let there = evolve_hartree(&phi0, &model, &fwd).unwrap();
        let back = SolverConfig::new(1e-3, -1.0, Scheme::StrangSplit).record_every(1000);
        let home = evolve_hartree(there.last(), &model, &back).unwrap();
        assert!(home.last().distance(&phi0).unwrap() < 1e-7);
    }

    #[test]
    fn scheme_order_is_observed() {
        let g = ring(16);
        let phi0 = gaussian(&g, 3.0, 0.8, 1.0);
        let model = EffectiveModel::hartree(smooth_kernel(&g), 1.5).unwrap();
        let run = |dt: f64, scheme: Scheme| {
            let cfg = SolverConfig::new(dt, 0.5, scheme).record_every(1_000_000);
            evolve_hartree(&phi0, &model, &cfg).unwrap().last().clone()
        };
        let dt = 0.02;
        let reference = run(dt / 10.0, Scheme::ExplicitRk4);
        for scheme in [Scheme::StrangSplit, Scheme::FourthOrderSplit] {
            let e1 = run(dt, scheme).distance(&reference).unwrap();
            let e2 = run(dt / 2.0, scheme).distance(&reference).unwrap();
            let expected = 2f64.powf(scheme.order() as f64 - 0.5);
            assert!(e1 / e2 >= expected, "{scheme:?}: ratio {}", e1 / e2);
        }
    }

    #[test]
    fn semirel_free_flow_conserves_sobolev_norm() {
        let g = ring(64);
        let phi0 = gaussian(&g, 3.0, 0.5, 0.0);
        let model = EffectiveModel::semi_relativistic(g.clone(), 0.0, 0.1).unwrap();
        let cfg = SolverConfig::new(1e-3, 1.0, Scheme::StrangSplit).record_every(50);
        let tr = evolve_semirel(&phi0, &model, &cfg).unwrap();
        let n0 = tr.h_half_series[0];
        assert!(tr.h_half_series.iter().all(|n| (n - n0).abs() < 1e-10));
        assert!(tr.blowup_time.is_none());
        assert_eq!(detect_blowup(&tr, 20.0 * n0), None);

        let k0 = 2i64;
        let pw = WaveFunction::plane_wave(g, k0, C64::new(0.3, 0.0));
        let tr = evolve_semirel(&pw, &model, &cfg).unwrap();
        let omega = (1.0 + (k0 * k0) as f64).sqrt();
        assert!(tr.last().distance(&pw.scaled(C64::new(0.0, -omega).exp())).unwrap() < 1e-8);
    }

    #[test]
    fn semirel_rejects_wrong_model() {
        let g = ring(16);
        let model = EffectiveModel::hartree(smooth_kernel(&g), 1.0).unwrap();
        let phi0 = gaussian(&g, 1.0, 0.5, 0.0);
        let cfg = SolverConfig::new(1e-3, 0.01, Scheme::StrangSplit);
        assert!(evolve_semirel(&phi0, &model, &cfg).is_err());
        let gp = EffectiveModel::gross_pitaevskii(g, 0.1).unwrap();
        assert!(evolve_hartree(&phi0, &gp, &cfg).is_err());
    }

    #[test]
    fn synthetic_blowup_series() {
        let g = ring(4);
        let psi = WaveFunction::zeros(g);
        let tr = Trajectory {
            times: (0..10).map(|i| i as f64 * 0.1).collect(),
            snapshots: vec![psi; 10],
            mass_series: vec![1.0; 10],
            energy_series: vec![0.0; 10],
            h_half_series: (0..10).map(|i| 1.0 + i as f64).collect(),
            blowup_time: None,
        };
        assert_eq!(detect_blowup(&tr, 7.5), Some(0.7000000000000001));
        assert_eq!(detect_blowup(&tr, 100.0), None);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::new(0.0, 1.0, Scheme::StrangSplit).validate().is_err());
        assert!(SolverConfig::new(2.0, 1.0, Scheme::StrangSplit).validate().is_err());
        assert!(SolverConfig::new(1e-3, 1.0, Scheme::StrangSplit)
            .record_every(0)
            .validate()
            .is_err());
        let (n, tau) = SolverConfig::new(0.3, 1.0, Scheme::StrangSplit).steps();
        assert_eq!(n, 4);
        assert!((tau - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nan_input_is_rejected() {
        let g = ring(8);
        assert!(WaveFunction::new(g, vec![C64::new(f64::NAN, 0.0); 8]).is_err());
    }

    #[test]
    fn trajectory_csv_layout() {
        let g = ring(16);
        let phi0 = gaussian(&g, 3.0, 0.6, 0.0);
        let model = EffectiveModel::semi_relativistic(g, 0.0, 0.1).unwrap();
        let cfg = SolverConfig::new(0.01, 0.05, Scheme::StrangSplit);
        let csv = evolve_semirel(&phi0, &model, &cfg).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,mass,energy,h_half,blowup_flag");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].ends_with(",0"));
    }
}
