//! Quarter-wave resonator frequencies from layout.
//!
//! The resonator is shorted at `x = 0`, loaded by `c0` at the open end
//! `x = d`, and coupled to its partner through `c_c` at `x = x_c`. The mode
//! function is `B sin(kx)` below the coupling point and `cos(k(x−d) − θ)`
//! above it, with `tan θ = C0 Z0 ω` at the open end and the current balance
//! `cot(k x_c) + tan(k(x_c−d) − θ) = C_c Z0 ω` at the coupling point.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuarterWaveGeometry {
    /// Resonator length (m).
    pub d: f64,
    /// Coupling point measured from the shorted end (m).
    pub x_c: f64,
    /// Open-end load capacitance (F).
    pub c0: f64,
    /// Coupling capacitance (F).
    pub c_c: f64,
    /// Inductance per unit length (H/m).
    pub l: f64,
    /// Capacitance per unit length (F/m).
    pub c: f64,
}

impl QuarterWaveGeometry {
    /// Build from line impedance (ohm) and phase velocity (m/s) instead of
    /// per-length inductance and capacitance.
    pub fn from_line(d: f64, x_c: f64, c0: f64, c_c: f64, z0: f64, v: f64) -> Result<Self> {
        if !(z0 > 0.0 && v > 0.0) {
            return Err(Error::invalid(format!("line impedance and velocity must be positive, got Z0={z0}, v={v}")));
        }
        let g = QuarterWaveGeometry { d, x_c, c0, c_c, l: z0 / v, c: 1.0 / (z0 * v) };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::invalid(format!("length must be positive, got {}", self.d)));
        }
        if !(self.x_c > 0.0 && self.x_c < self.d) {
            return Err(Error::invalid(format!("coupling point {} must lie strictly inside (0, {})", self.x_c, self.d)));
        }
        if !(self.l > 0.0 && self.c > 0.0) {
            return Err(Error::invalid("per-length inductance and capacitance must be positive"));
        }
        if !(self.c0 >= 0.0 && self.c_c >= 0.0) {
            return Err(Error::invalid("load and coupling capacitances must be >= 0"));
        }
        Ok(())
    }

    pub fn z0(&self) -> f64 {
        (self.l / self.c).sqrt()
    }

    pub fn v(&self) -> f64 {
        1.0 / (self.l * self.c).sqrt()
    }

    /// Unloaded quarter-wave frequency `πv/(2d)`.
    pub fn bare_omega(&self) -> f64 {
        FRAC_PI_2 * self.v() / self.d
    }

    fn theta(&self, omega: f64) -> f64 {
        (self.c0 * self.z0() * omega).atan()
    }

    /// Coupling-point equation multiplied through by
    /// `sin(k x_c) cos(k(x_c−d) − θ)`, which removes the tangent poles.
    fn smooth_residual(&self, omega: f64) -> f64 {
        let k = omega / self.v();
        let theta = self.theta(omega);
        let phi = k * (self.x_c - self.d) - theta;
        (k * self.d + theta).cos() - self.c_c * self.z0() * omega * (k * self.x_c).sin() * phi.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSolution {
    pub omega: f64,
    pub theta: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative tolerance on ω.
    pub rel_tol: f64,
    /// Search window as multiples of the unloaded frequency.
    pub window: (f64, f64),
    /// Number of scan intervals used to bracket the first root.
    pub scan_points: usize,
    pub max_iterations: usize,
    /// Largest acceptable raw boundary residual.
    pub residual_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { rel_tol: 1e-12, window: (1e-3, 2.0), scan_points: 4000, max_iterations: 200, residual_tol: 1e-10 }
    }
}

/// Raw residuals `(tan θ − C0 Z0 ω, cot(k x_c) + tan(k(x_c−d)−θ) − C_c Z0 ω)`.
pub fn boundary_residuals(geom: &QuarterWaveGeometry, omega: f64, theta: f64) -> (f64, f64) {
    let z0 = geom.z0();
    let k = omega / geom.v();
    let open_end = theta.tan() - geom.c0 * z0 * omega;
    let coupling = 1.0 / (k * geom.x_c).tan() + (k * (geom.x_c - geom.d) - theta).tan() - geom.c_c * z0 * omega;
    (open_end, coupling)
}

pub fn solve_fundamental_mode(geom: &QuarterWaveGeometry) -> Result<ModeSolution> {
    solve_fundamental_mode_with(geom, &SolverOptions::default())
}

pub fn solve_fundamental_mode_with(geom: &QuarterWaveGeometry, opts: &SolverOptions) -> Result<ModeSolution> {
    geom.validate()?;
    let w0 = geom.bare_omega();
    let (lo, hi) = (opts.window.0 * w0, opts.window.1 * w0);
    let n = opts.scan_points.max(2);
    let step = (hi - lo) / n as f64;

    let mut bracket = None;
    let mut prev = (lo, geom.smooth_residual(lo));
    if prev.1 == 0.0 {
        bracket = Some((lo, lo));
    }
    for i in 1..=n {
        if bracket.is_some() {
            break;
        }
        let w = lo + step * i as f64;
        let f = geom.smooth_residual(w);
        if f == 0.0 || f.signum() != prev.1.signum() {
            bracket = Some((prev.0, w));
        }
        prev = (w, f);
    }
    let (mut a, mut b) = bracket.ok_or(Error::NoFundamentalMode { lo, hi })?;

    let mut fa = geom.smooth_residual(a);
    let mut iterations = 0;
    while b - a > opts.rel_tol * a.abs() * 1e-3 && iterations < opts.max_iterations {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = geom.smooth_residual(m);
        if fm == 0.0 {
            a = m;
            b = m;
            break;
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
        iterations += 1;
    }
    let omega = 0.5 * (a + b);
    if (b - a) > opts.rel_tol * omega {
        return Err(Error::Convergence { residual: geom.smooth_residual(omega).abs(), iterations });
    }

    let theta = geom.theta(omega);
    let (r_open, r_coupling) = boundary_residuals(geom, omega, theta);
    let residual = r_open.abs().max(r_coupling.abs());
    if !(residual < opts.residual_tol) {
        return Err(Error::Convergence { residual, iterations });
    }
    let k = omega / geom.v();
    let b_scale = (k * (geom.x_c - geom.d) - theta).cos() / (k * geom.x_c).sin();
    Ok(ModeSolution { omega, theta, b: b_scale })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanParameter {
    Length,
    CouplingCapacitance,
    LoadCapacitance,
}

impl ScanParameter {
    pub fn apply(self, template: &QuarterWaveGeometry, value: f64) -> QuarterWaveGeometry {
        let mut g = *template;
        match self {
            ScanParameter::Length => g.d = value,
            ScanParameter::CouplingCapacitance => g.c_c = value,
            ScanParameter::LoadCapacitance => g.c0 = value,
        }
        g
    }
}

/// Solve the fundamental mode for each parameter value. A failing row is
/// reported with its index.
pub fn design_scan(template: &QuarterWaveGeometry, parameter: ScanParameter, values: &[f64]) -> Result<Vec<(f64, ModeSolution)>> {
    values
        .iter()
        .enumerate()
        .map(|(row, &v)| {
            solve_fundamental_mode(&parameter.apply(template, v))
                .map(|sol| (v, sol))
                .map_err(|e| Error::Row { row, source: Box::new(e) })
        })
        .collect()
}

/// Resonator length whose fundamental mode lands on `target_omega`, holding
/// the coupling point at the same fraction of the length.
pub fn length_for_frequency(template: &QuarterWaveGeometry, target_omega: f64) -> Result<f64> {
    if !(target_omega > 0.0) {
        return Err(Error::invalid("target frequency must be positive"));
    }
    let frac = template.x_c / template.d;
    let omega_at = |d: f64| -> Result<f64> {
        let mut g = *template;
        g.d = d;
        g.x_c = frac * d;
        Ok(solve_fundamental_mode(&g)?.omega)
    };
    // Loading only lowers the frequency, so the bare length is an upper bound.
    let mut hi = FRAC_PI_2 * template.v() / target_omega;
    let mut lo = 0.5 * hi;
    let mut expand = 0;
    while omega_at(lo)? < target_omega {
        lo *= 0.5;
        expand += 1;
        if expand > 60 {
            return Err(Error::Convergence { residual: f64::NAN, iterations: expand });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if omega_at(mid)? > target_omega {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{ff, ghz};
    use approx::assert_relative_eq;

    fn loaded() -> QuarterWaveGeometry {
        QuarterWaveGeometry::from_line(4.3e-3, 0.5e-3, ff(5.0), ff(2.0), 50.0, 1.2e8).unwrap()
    }

    #[test]
    fn unloaded_limit() {
        let g = QuarterWaveGeometry::from_line(4.3e-3, 0.5e-3, 0.0, 0.0, 50.0, 1.2e8).unwrap();
        let sol = solve_fundamental_mode(&g).unwrap();
        assert_eq!(sol.theta, 0.0);
        assert_relative_eq!(sol.omega, g.bare_omega(), max_relative = 1e-9);
    }

    #[test]
    fn load_lowers_frequency() {
        let g = QuarterWaveGeometry::from_line(4.3e-3, 0.5e-3, ff(5.0), 0.0, 50.0, 1.2e8).unwrap();
        assert!(solve_fundamental_mode(&g).unwrap().omega < g.bare_omega());
    }

    #[test]
    fn loaded_solution_satisfies_both_conditions() {
        let g = loaded();
        let sol = solve_fundamental_mode(&g).unwrap();
        let (r1, r2) = boundary_residuals(&g, sol.omega, sol.theta);
        assert!(r1.abs() < 1e-10 && r2.abs() < 1e-10, "{r1} {r2}");
        let k = sol.omega / g.v();
        // Mode function is continuous at the coupling point.
        assert_relative_eq!(sol.b * (k * g.x_c).sin(), (k * (g.x_c - g.d) - sol.theta).cos(), max_relative = 1e-12);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(QuarterWaveGeometry::from_line(4.3e-3, 5e-3, 0.0, 0.0, 50.0, 1.2e8).is_err());
        assert!(QuarterWaveGeometry::from_line(4.3e-3, 1e-3, -1e-15, 0.0, 50.0, 1.2e8).is_err());
        assert!(QuarterWaveGeometry::from_line(4.3e-3, 1e-3, 0.0, 0.0, 0.0, 1.2e8).is_err());
    }

    #[test]
    fn empty_window_reports_no_mode() {
        let opts = SolverOptions { window: (0.1, 0.5), ..SolverOptions::default() };
        let err = solve_fundamental_mode_with(&loaded(), &opts).unwrap_err();
        assert!(matches!(err, Error::NoFundamentalMode { .. }));
    }

    #[test]
    fn length_scan_is_inverse_proportional() {
        let g = QuarterWaveGeometry::from_line(4.3e-3, 0.5e-3, 0.0, 0.0, 50.0, 1.2e8).unwrap();
        let lengths: Vec<f64> = (0..=10).map(|i| 4.3e-3 * (0.9 + 0.02 * i as f64)).collect();
        for (d, sol) in design_scan(&g, ScanParameter::Length, &lengths).unwrap() {
            assert_relative_eq!(sol.omega * d, g.bare_omega() * g.d, max_relative = 1e-9);
        }
    }

    #[test]
    fn load_scan_is_decreasing() {
        let values: Vec<f64> = (0..20).map(|i| ff(i as f64)).collect();
        let rows = design_scan(&loaded(), ScanParameter::LoadCapacitance, &values).unwrap();
        assert!(rows.windows(2).all(|w| w[1].1.omega < w[0].1.omega));
    }

    #[test]
    fn scan_row_errors_carry_index() {
        let values = [4.3e-3, 0.4e-3];
        let err = design_scan(&loaded(), ScanParameter::Length, &values).unwrap_err();
        assert!(matches!(err, Error::Row { row: 1, .. }), "{err}");
    }

    #[test]
    fn lengths_for_target_comb() {
        let g = loaded();
        let targets = [6.4, 6.56, 6.72, 6.88, 7.04];
        let mut prev = f64::INFINITY;
        for f in targets {
            let d = length_for_frequency(&g, ghz(f)).unwrap();
            assert!(d < prev);
            prev = d;
            let mut check = g;
            check.d = d;
            check.x_c = g.x_c / g.d * d;
            assert_relative_eq!(solve_fundamental_mode(&check).unwrap().omega, ghz(f), max_relative = 1e-10);
        }
    }
}
