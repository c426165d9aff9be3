//! Zero-energy radial scattering and the scattering length.
//!
//! For a spherically symmetric potential the zero-energy equation
//! `(-Delta + V/2) f = 0` with `f -> 1` reduces, with `u = r f`, to
//!
//! ```text
//! u'' = V(r) u / 2,    u(0) = 0
//! ```
//!
//! Beyond the support `u` is exactly linear, `u = A (r - a0)`. The scattering
//! length is read off that line (asymptote estimator) and, independently,
//! from `a0 = (1 / 8 pi) int V f dx = (1 / 2A) int_0^inf V(r) u(r) r dr`
//! (integral estimator).

use log::warn;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::harness::format_float;

/// Default cap on the number of integration cells.
pub const DEFAULT_CELL_CAP: usize = 50_000_000;

/// Relative estimator disagreement tolerated silently.
pub const ESTIMATOR_AGREEMENT: f64 = 1e-5;
/// Relative estimator disagreement at which the result is rejected.
pub const ESTIMATOR_REJECTION: f64 = 1e-3;

/// Radial potential sampled at half-step resolution of the integration mesh.
///
/// `samples[i] = V(i * mesh_size / 2)` for `i = 0..=2 * cells`; the RK4
/// stages of a step `[r, r + mesh_size]` use the three samples it covers. At
/// a jump discontinuity the sample holds the mean of both one-sided limits.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialPotential {
    r_max: f64,
    mesh_size: f64,
    support_radius: f64,
    samples: Vec<f64>,
}

impl RadialPotential {
    pub fn new(r_max: f64, support_radius: f64, cells: usize, samples: Vec<f64>) -> Result<Self> {
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(LabError::InvalidInput(format!("r_max must be positive, got {r_max}")));
        }
        if !(support_radius > 0.0) {
            return Err(LabError::InvalidInput(
                "support radius must be positive".into(),
            ));
        }
        if support_radius >= r_max {
            return Err(LabError::InvalidInput(format!(
                "potential tail does not vanish inside the mesh (support {support_radius} >= r_max {r_max})"
            )));
        }
        if cells == 0 || samples.len() != 2 * cells + 1 {
            return Err(LabError::dim("radial samples", 2 * cells + 1, samples.len()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(LabError::InvalidInput("potential samples must be finite".into()));
        }
        let mesh_size = r_max / cells as f64;
        let half = 0.5 * mesh_size;
        if let Some(i) = samples
            .iter()
            .enumerate()
            .position(|(i, v)| *v != 0.0 && i as f64 * half > support_radius * (1.0 + 1e-12))
        {
            return Err(LabError::InvalidInput(format!(
                "potential does not vanish beyond its support (r = {})",
                i as f64 * half
            )));
        }
        Ok(RadialPotential {
            r_max,
            mesh_size,
            support_radius,
            samples,
        })
    }

    /// Samples `f` on `[0, r_max]`, zero beyond `support_radius`.
    pub fn from_fn(
        r_max: f64,
        support_radius: f64,
        cells: usize,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let half = 0.5 * r_max / cells.max(1) as f64;
        let samples = (0..=2 * cells)
            .map(|i| {
                let r = i as f64 * half;
                if r > support_radius * (1.0 + 1e-12) {
                    0.0
                } else {
                    f(r)
                }
            })
            .collect();
        Self::new(r_max, support_radius, cells, samples)
    }

    /// `V = v0` on `r < radius`, zero outside.
    pub fn square_well(v0: f64, radius: f64, r_max: f64, cells: usize) -> Result<Self> {
        let tol = 1e-9 * radius;
        Self::from_fn(r_max, radius, cells, |r| {
            if (r - radius).abs() <= tol {
                0.5 * v0
            } else if r < radius {
                v0
            } else {
                0.0
            }
        })
    }

    pub fn zero(r_max: f64, support_radius: f64, cells: usize) -> Result<Self> {
        Self::from_fn(r_max, support_radius, cells, |_| 0.0)
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn mesh_size(&self) -> f64 {
        self.mesh_size
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn cells(&self) -> usize {
        (self.samples.len() - 1) / 2
    }

    /// `lambda V`.
    pub fn scaled(&self, lambda: f64) -> Self {
        RadialPotential {
            samples: self.samples.iter().map(|v| v * lambda).collect(),
            ..self.clone()
        }
    }

    /// `n^2 V(n r)` on the same `[0, r_max]`, with the mesh refined `n` times.
    pub fn rescaled(&self, n: usize, cell_cap: usize) -> Result<Self> {
        if n == 0 {
            return Err(LabError::InvalidInput("rescaling factor must be >= 1".into()));
        }
        let cells = self.cells().checked_mul(n).unwrap_or(usize::MAX);
        if cells > cell_cap {
            return Err(LabError::MeshResolution {
                required_cells: cells,
                cap: cell_cap,
            });
        }
        let scale = (n * n) as f64;
        // new half-node i sits at r = i h / (2n); n r is old half-node i.
        let samples = (0..=2 * cells)
            .map(|i| self.samples.get(i).map_or(0.0, |v| v * scale))
            .collect();
        Self::new(self.r_max, self.support_radius / n as f64, cells, samples)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScatteringResult {
    /// `f(r)` on the integration nodes `r_i = i * mesh_size`.
    pub f_profile: Vec<f64>,
    pub a0_asymptote: f64,
    pub a0_integral: f64,
    pub mesh_size: f64,
    pub r_max: f64,
    pub support_radius: f64,
}

impl ScatteringResult {
    /// Relative disagreement between the two estimators. Lengths below
    /// `1e-8 r_max` (accumulated round-off) count as zero.
    pub fn discrepancy(&self) -> f64 {
        let scale = self
            .a0_asymptote
            .abs()
            .max(self.a0_integral.abs())
            .max(1e-8 * self.r_max);
        (self.a0_asymptote - self.a0_integral).abs() / scale
    }

    pub fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.f_profile.len()).map(move |i| i as f64 * self.mesh_size)
    }

    pub fn to_json(&self) -> String {
        let meta = serde_json::json!({
            "a0_asymptote": self.a0_asymptote,
            "a0_integral": self.a0_integral,
            "relative_discrepancy": self.discrepancy(),
            "mesh_size": self.mesh_size,
            "r_max": self.r_max,
            "support_radius": self.support_radius,
            "nodes": self.f_profile.len(),
        });
        serde_json::to_string_pretty(&meta).expect("plain JSON values")
    }

    pub fn profile_csv(&self) -> String {
        let mut out = String::from("r,f\n");
        for (r, f) in self.radii().zip(&self.f_profile) {
            out.push_str(&format!("{},{}\n", format_float(r), format_float(*f)));
        }
        out
    }
}

/// Integrates the zero-energy radial equation and fills both estimators.
pub fn solve_zero_energy(potential: &RadialPotential) -> Result<ScatteringResult> {
    let cells = potential.cells();
    let h = potential.mesh_size;
    if potential.support_radius / h < 100.0 {
        return Err(LabError::MeshResolution {
            required_cells: (100.0 * potential.r_max / potential.support_radius).ceil() as usize,
            cap: cells,
        });
    }
    let g = |i: usize| 0.5 * potential.samples[i];

    let mut u = Vec::with_capacity(cells + 1);
    let (mut y, mut dy) = (0.0f64, 1.0f64);
    u.push(y);
    for i in 0..cells {
        let (g0, gm, g1) = (g(2 * i), g(2 * i + 1), g(2 * i + 2));
        let k1 = (dy, g0 * y);
        let k2 = (dy + 0.5 * h * k1.1, gm * (y + 0.5 * h * k1.0));
        let k3 = (dy + 0.5 * h * k2.1, gm * (y + 0.5 * h * k2.0));
        let k4 = (dy + h * k3.1, g1 * (y + h * k3.0));
        y += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        dy += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        if !(y.is_finite() && dy.is_finite()) {
            return Err(LabError::IntegrationFailure {
                last_valid_time: i as f64 * h,
                reason: "radial solution overflowed".into(),
            });
        }
        if y <= 0.0 {
            return Err(LabError::InvalidInput(format!(
                "zero-energy solution changes sign at r = {} (bound state; attractive potentials are not supported)",
                (i + 1) as f64 * h
            )));
        }
        u.push(y);
    }

    // least-squares line through the outer 20% of the region beyond the support
    let start_r = potential.support_radius + 0.8 * (potential.r_max - potential.support_radius);
    let start = ((start_r / h).ceil() as usize).min(cells.saturating_sub(2));
    let (slope, intercept) = linear_fit(
        (start..=cells).map(|i| i as f64 * h),
        u[start..].iter().copied(),
    );
    if !(slope > 0.0) {
        return Err(LabError::Degenerate(format!(
            "outer slope {slope:e} cannot normalize f to 1"
        )));
    }
    if slope < 1e-8 * dy.abs().max(1.0) {
        warn!("zero-energy solution has nearly vanishing slope at r_max; result is ill-conditioned");
    }
    let a0_asymptote = -intercept / slope;

    let f_profile: Vec<f64> = u
        .iter()
        .enumerate()
        .map(|(i, &ui)| if i == 0 { 1.0 / slope } else { ui / (slope * i as f64 * h) })
        .collect();

    // trapezoid on integration nodes
    let integrand = |i: usize| potential.samples[2 * i] * u[i] * i as f64 * h;
    let mut integral = 0.5 * (integrand(0) + integrand(cells));
    for i in 1..cells {
        integral += integrand(i);
    }
    integral *= h;
    let a0_integral = integral / (2.0 * slope);

    Ok(ScatteringResult {
        f_profile,
        a0_asymptote,
        a0_integral,
        mesh_size: h,
        r_max: potential.r_max,
        support_radius: potential.support_radius,
    })
}

fn linear_fit(x: impl Iterator<Item = f64>, y: impl Iterator<Item = f64>) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = x.zip(y).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// The scattering length (asymptote estimator), checked against the integral estimator.
pub fn scattering_length(res: &ScatteringResult) -> Result<f64> {
    let d = res.discrepancy();
    if d > ESTIMATOR_REJECTION {
        return Err(LabError::EstimatorDisagreement {
            asymptote: res.a0_asymptote,
            integral: res.a0_integral,
            relative: d,
        });
    }
    if d > ESTIMATOR_AGREEMENT {
        warn!(
            "scattering-length estimators differ by {d:e} (relative); refine the mesh (h = {})",
            res.mesh_size
        );
    }
    Ok(res.a0_asymptote)
}

/// Scattering length of `n^2 V(n .)`, solved directly on a mesh refined `n` times.
pub fn scaled_length(potential: &RadialPotential, n: usize) -> Result<f64> {
    scaled_length_with_cap(potential, n, DEFAULT_CELL_CAP)
}

pub fn scaled_length_with_cap(potential: &RadialPotential, n: usize, cell_cap: usize) -> Result<f64> {
    let rescaled = potential.rescaled(n, cell_cap)?;
    scattering_length(&solve_zero_energy(&rescaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form square-well scattering length, `R - tanh(g R) / g` with `g = sqrt(V0 / 2)`.
    fn square_well_oracle(v0: f64, r: f64) -> f64 {
        let g = (v0 / 2.0).sqrt();
        r - (g * r).tanh() / g
    }

    #[test]
    fn free_potential_has_zero_length() {
        let v = RadialPotential::zero(10.0, 1.0, 2000).unwrap();
        let res = solve_zero_energy(&v).unwrap();
        assert!(res.a0_asymptote.abs() < 1e-10);
        assert_eq!(res.a0_integral, 0.0);
        assert!(res.f_profile.iter().all(|f| (f - 1.0).abs() < 1e-12));
        assert!(scattering_length(&res).unwrap().abs() < 1e-10);
    }

    #[test]
    fn square_well_matches_closed_form() {
        let v = RadialPotential::square_well(10.0, 1.0, 8.0, 80_000).unwrap();
        let res = solve_zero_energy(&v).unwrap();
        let exact = square_well_oracle(10.0, 1.0);
        assert!((exact - (1.0 - 5f64.sqrt().tanh() / 5f64.sqrt())).abs() < 1e-15);
        let a0 = scattering_length(&res).unwrap();
        assert!(((a0 - exact) / exact).abs() < 1e-6, "a0 = {a0}, exact = {exact}");
        assert!(res.discrepancy() < 1e-5);
    }

    #[test]
    fn hard_sphere_limit_approaches_radius_from_below() {
        let mut last = 0.0;
        for v0 in [1e2, 1e3, 1e4] {
            let v = RadialPotential::square_well(v0, 1.0, 6.0, 120_000).unwrap();
            let a0 = solve_zero_energy(&v).unwrap().a0_asymptote;
            let exact = square_well_oracle(v0, 1.0);
            assert!(((a0 - exact) / exact).abs() < 1e-5);
            assert!(a0 < 1.0 && a0 > last);
            last = a0;
        }
        assert!(1.0 - last < 0.02);
    }

    #[test]
    fn profile_is_monotone_and_bounded() {
        let v = RadialPotential::square_well(50.0, 1.0, 6.0, 6000).unwrap();
        let res = solve_zero_energy(&v).unwrap();
        assert!(res.f_profile.iter().all(|&f| (0.0..=1.0 + 1e-12).contains(&f)));
        assert!(res.f_profile.windows(2).all(|w| w[1] >= w[0] - 1e-14));
        let tail = 1.0 - res.a0_asymptote / res.r_max;
        assert!((res.f_profile.last().unwrap() - tail).abs() < 1e-10);
    }

    #[test]
    fn estimators_converge_at_second_order() {
        let gap = |cells: usize| {
            let v = RadialPotential::square_well(10.0, 1.0, 4.0, cells).unwrap();
            let r = solve_zero_energy(&v).unwrap();
            (r.a0_asymptote - r.a0_integral).abs()
        };
        let (g1, g2, g3) = (gap(800), gap(1600), gap(3200));
        for ratio in [g1 / g2, g2 / g3] {
            assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
        }
    }

    #[test]
    fn larger_potential_gives_larger_length() {
        let a = |v0: f64| {
            let v = RadialPotential::square_well(v0, 1.0, 5.0, 5000).unwrap();
            solve_zero_energy(&v).unwrap().a0_asymptote
        };
        let values: Vec<f64> = [0.5, 1.0, 5.0, 20.0, 80.0].iter().map(|&v| a(v)).collect();
        assert!(values.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rescaling_divides_length() {
        let v = RadialPotential::square_well(10.0, 1.0, 5.0, 20_000).unwrap();
        let a0 = scattering_length(&solve_zero_energy(&v).unwrap()).unwrap();
        assert_eq!(scaled_length(&v, 1).unwrap(), a0);
        let a10 = scaled_length(&v, 10).unwrap();
        assert!(((a10 - a0 / 10.0) / (a0 / 10.0)).abs() < 1e-5);
        assert!(a10 > 0.0);
        assert!(matches!(
            scaled_length_with_cap(&v, 10, 1000),
            Err(LabError::MeshResolution { required_cells: 200_000, .. })
        ));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(RadialPotential::square_well(1.0, 5.0, 5.0, 1000).is_err());
        let coarse = RadialPotential::square_well(1.0, 1.0, 5.0, 100).unwrap();
        assert!(matches!(
            solve_zero_energy(&coarse),
            Err(LabError::MeshResolution { .. })
        ));
        let attractive = RadialPotential::square_well(-50.0, 1.0, 5.0, 5000).unwrap();
        assert!(solve_zero_energy(&attractive).is_err());
    }

    #[test]
    fn born_limit() {
        // smooth bump (1 - r^2)^2, int V dx = 32 pi / 105
        let bump = RadialPotential::from_fn(6.0, 1.0, 6000, |r| (1.0 - r * r).powi(2)).unwrap();
        let born = 32.0 * std::f64::consts::PI / 105.0 / (8.0 * std::f64::consts::PI);
        let lambda = 1e-3;
        let a0 = scattering_length(&solve_zero_energy(&bump.scaled(lambda)).unwrap()).unwrap();
        assert!((a0 / (lambda * born) - 1.0).abs() < 0.01);
    }

    #[test]
    fn json_and_csv_outputs() {
        let v = RadialPotential::square_well(10.0, 1.0, 3.0, 300).unwrap();
        let res = solve_zero_energy(&v).unwrap();
        let json: serde_json::Value = serde_json::from_str(&res.to_json()).unwrap();
        assert_eq!(json["nodes"], 301);
        let csv = res.profile_csv();
        assert!(csv.starts_with("r,f\n"));
        assert_eq!(csv.lines().count(), 302);
    }
}
