//! Pulsed response of the filter/resonator pair and measurement-induced
//! dephasing.
//!
//! Fields are propagated in the frame of the drive carrier. Between grid
//! points the drive is held constant, so each step is the exact solution of
//! the linear system: `x ← E x + F u` with `E = exp(M dt)` and
//! `F = ∫₀^dt exp(M s) ds`.

use nalgebra::{Matrix2, Matrix4, Vector2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use std::f64::consts::SQRT_2;

use crate::circuit::{FeedlineSpec, QubitState, ReadoutChain, TwoModeSystem};
use crate::{Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Fields below this fraction of their peak are treated as decayed.
pub const DECAY_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseShape {
    Square,
    GaussianFilteredSquare,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    pub shape: PulseShape,
    /// Plateau length (s).
    pub tau_p: f64,
    /// Gaussian kernel width (s); ignored for square pulses.
    pub sigma_filter: f64,
    /// Input field amplitude, `√(photons/s)`.
    pub amplitude: f64,
    pub carrier_omega: f64,
    /// Start of the plateau (s).
    pub t_start: f64,
}

impl PulseSpec {
    pub fn square(tau_p: f64, amplitude: f64, carrier_omega: f64) -> Self {
        PulseSpec { shape: PulseShape::Square, tau_p, sigma_filter: 0.0, amplitude, carrier_omega, t_start: 0.0 }
    }

    /// Square pulse convolved with a unit-area Gaussian of width `sigma`. The
    /// plateau starts late enough that the leading tail is resolved from
    /// `t = 0`.
    pub fn gaussian_filtered(tau_p: f64, sigma: f64, amplitude: f64, carrier_omega: f64) -> Self {
        PulseSpec {
            shape: PulseShape::GaussianFilteredSquare,
            tau_p,
            sigma_filter: sigma,
            amplitude,
            carrier_omega,
            t_start: 6.0 * sigma,
        }
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_p > 0.0 && self.tau_p.is_finite()) {
            return Err(Error::invalid(format!("pulse length must be positive, got {}", self.tau_p)));
        }
        if self.shape == PulseShape::GaussianFilteredSquare && !(self.sigma_filter > 0.0) {
            return Err(Error::invalid("filtered pulse needs a positive kernel width"));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::invalid(format!("pulse amplitude must be >= 0, got {}", self.amplitude)));
        }
        if !(self.t_start >= 0.0) {
            return Err(Error::invalid("pulse start must be >= 0"));
        }
        Ok(())
    }

    /// Time after which the drive is negligible.
    pub fn end(&self) -> f64 {
        match self.shape {
            PulseShape::Square => self.t_start + self.tau_p,
            PulseShape::GaussianFilteredSquare => self.t_start + self.tau_p + 6.0 * self.sigma_filter,
        }
    }

    /// Unit-amplitude envelope at time `t`.
    pub fn shape_at(&self, t: f64) -> f64 {
        match self.shape {
            PulseShape::Square => {
                if t >= self.t_start && t < self.t_start + self.tau_p {
                    1.0
                } else {
                    0.0
                }
            }
            PulseShape::GaussianFilteredSquare => {
                let s = SQRT_2 * self.sigma_filter;
                0.5 * (erf((t - self.t_start) / s) - erf((t - self.t_start - self.tau_p) / s))
            }
        }
    }

    /// Drive value held over the cell `[t, t + dt)`: the cell average for a
    /// square pulse, the midpoint value for the smooth shape.
    fn cell_value(&self, t: f64, dt: f64) -> f64 {
        let unit = match self.shape {
            PulseShape::Square => {
                let lo = t.max(self.t_start);
                let hi = (t + dt).min(self.t_start + self.tau_p);
                ((hi - lo) / dt).max(0.0)
            }
            PulseShape::GaussianFilteredSquare => self.shape_at(t + 0.5 * dt),
        };
        self.amplitude * unit
    }
}

/// Time-gridded fields of one chain for one qubit state.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTrace {
    pub dt: f64,
    pub t: Vec<f64>,
    pub a: Vec<Complex64>,
    pub b: Vec<Complex64>,
    /// Field leaving towards the feedline output.
    pub output: Vec<Complex64>,
    /// Field leaving back towards the input port.
    pub reflected: Vec<Complex64>,
    pub qubit_state: QubitState,
    pub carrier_omega: f64,
}

impl FieldTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn check_grid(&self, other: &FieldTrace) -> Result<()> {
        if self.len() != other.len() || self.dt != other.dt {
            return Err(Error::GridMismatch(format!(
                "{} samples at dt={:e} vs {} samples at dt={:e}",
                self.len(),
                self.dt,
                other.len(),
                other.dt
            )));
        }
        if self.carrier_omega != other.carrier_omega {
            return Err(Error::GridMismatch("traces use different drive carriers".into()));
        }
        Ok(())
    }
}

/// Largest time step accepted by [`simulate_response`].
pub fn recommended_dt(sys: &TwoModeSystem) -> f64 {
    let fastest = sys.loss_a.max(sys.delta_a.abs()).max(sys.delta_b.abs()).max(sys.j).max(sys.loss_b);
    if fastest == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (20.0 * fastest)
    }
}

/// Slowest amplitude decay rate of the coupled pair, `min |Re λ|`.
pub fn slowest_decay_rate(sys: &TwoModeSystem) -> f64 {
    sys.eigenvalues().iter().map(|l| l.re.abs()).fold(f64::INFINITY, f64::min)
}

/// End time that leaves the fields decayed far below [`DECAY_FLOOR`] after
/// the pulse.
pub fn auto_t_end(chain: &ReadoutChain, feedline: &FeedlineSpec, pulse: &PulseSpec) -> Result<f64> {
    let slowest = QubitState::BOTH
        .iter()
        .map(|&s| slowest_decay_rate(&TwoModeSystem::new(chain, feedline, pulse.carrier_omega, s)))
        .fold(f64::INFINITY, f64::min);
    if !(slowest > 0.0) {
        return Err(Error::Singular("a lossless mode never decays"));
    }
    Ok(pulse.end() + 12.0 / slowest)
}

/// Step size for a chain under `pulse`: the recommended bound, capped at
/// 0.1 ns.
pub fn default_dt(chain: &ReadoutChain, feedline: &FeedlineSpec, pulse: &PulseSpec) -> f64 {
    QubitState::BOTH
        .iter()
        .map(|&s| recommended_dt(&TwoModeSystem::new(chain, feedline, pulse.carrier_omega, s)))
        .fold(1e-10, f64::min)
}

/// One-step propagator pair `(E, F)`.
fn step_propagator(m: &Matrix2<Complex64>, dt: f64) -> (Matrix2<Complex64>, Matrix2<Complex64>) {
    let one = Complex64::new(1.0, 0.0);
    let mut aug = Matrix4::<Complex64>::zeros();
    aug.fixed_view_mut::<2, 2>(0, 0).copy_from(m);
    aug[(0, 2)] = one;
    aug[(1, 3)] = one;
    let exp = (aug * Complex64::new(dt, 0.0)).exp();
    (exp.fixed_view::<2, 2>(0, 0).into_owned(), exp.fixed_view::<2, 2>(0, 2).into_owned())
}

pub(crate) fn system_matrix(sys: &TwoModeSystem) -> Matrix2<Complex64> {
    let m = sys.matrix();
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

/// Integrate the two-mode equations under `pulse` from empty modes.
pub fn simulate_response(
    chain: &ReadoutChain,
    feedline: &FeedlineSpec,
    pulse: &PulseSpec,
    qubit_state: QubitState,
    dt: f64,
    t_end: f64,
) -> Result<FieldTrace> {
    chain.validate()?;
    pulse.validate()?;
    let sys = TwoModeSystem::new(chain, feedline, pulse.carrier_omega, qubit_state);
    if let Some(l) = sys.eigenvalues().iter().find(|l| l.re > 0.0) {
        return Err(Error::Unstable(l.re));
    }
    let limit = recommended_dt(&sys);
    if !(dt > 0.0 && dt <= limit * (1.0 + 1e-9)) {
        return Err(Error::invalid(format!("time step {dt:e} s exceeds the stable-resolution bound {limit:e} s")));
    }
    let kappa_r = 2.0 * slowest_decay_rate(&sys);
    if kappa_r > 0.0 && t_end < pulse.end() + 5.0 / kappa_r {
        return Err(Error::invalid(format!(
            "t_end {t_end:e} s must reach {:e} s to cover the ring-down",
            pulse.end() + 5.0 / kappa_r
        )));
    }
    Ok(propagate(&sys, pulse, qubit_state, dt, t_end))
}

fn propagate(sys: &TwoModeSystem, pulse: &PulseSpec, qubit_state: QubitState, dt: f64, t_end: f64) -> FieldTrace {
    let steps = (t_end / dt).ceil() as usize;
    let (e, f) = step_propagator(&system_matrix(sys), dt);
    let drive_in = f.column(0) * sys.drive_coupling;

    let mut t = Vec::with_capacity(steps + 1);
    let mut a = Vec::with_capacity(steps + 1);
    let mut b = Vec::with_capacity(steps + 1);
    let mut output = Vec::with_capacity(steps + 1);
    let mut reflected = Vec::with_capacity(steps + 1);
    let mut x = Vector2::new(ZERO, ZERO);
    for k in 0..=steps {
        let tk = k as f64 * dt;
        let input = Complex64::new(pulse.cell_value(tk, dt), 0.0);
        t.push(tk);
        a.push(x[0]);
        b.push(x[1]);
        output.push(sys.output(x[0], input));
        reflected.push(input + sys.reflected_coupling * x[0]);
        x = e * x + drive_in * input;
    }
    FieldTrace { dt, t, a, b, output, reflected, qubit_state, carrier_omega: pulse.carrier_omega }
}

/// Ground and excited traces on a shared grid with automatic step and length.
pub fn simulate_pair(chain: &ReadoutChain, feedline: &FeedlineSpec, pulse: &PulseSpec) -> Result<(FieldTrace, FieldTrace)> {
    let dt = default_dt(chain, feedline, pulse);
    let t_end = auto_t_end(chain, feedline, pulse)?;
    Ok((
        simulate_response(chain, feedline, pulse, QubitState::Ground, dt, t_end)?,
        simulate_response(chain, feedline, pulse, QubitState::Excited, dt, t_end)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotonSeries {
    pub n: Vec<f64>,
    /// Time spent above 1 % of the peak photon number (s).
    pub occupation_time: f64,
}

pub fn photon_number(trace: &FieldTrace) -> PhotonSeries {
    let n: Vec<f64> = trace.b.iter().map(|b| b.norm_sqr()).collect();
    let peak = n.iter().cloned().fold(0.0, f64::max);
    let occupation_time = if peak == 0.0 {
        0.0
    } else {
        let above = |v: &f64| *v > 0.01 * peak;
        match (n.iter().position(above), n.iter().rposition(above)) {
            (Some(first), Some(last)) => (last - first) as f64 * trace.dt,
            _ => 0.0,
        }
    };
    PhotonSeries { n, occupation_time }
}

/// Input amplitude giving `target_photons` in the driven steady state at the
/// pulse carrier, averaged over the two qubit states. The photon number is
/// quadratic in amplitude, so the inverse is closed-form.
pub fn calibrate_amplitude(chain: &ReadoutChain, feedline: &FeedlineSpec, pulse: &PulseSpec, target_photons: f64) -> Result<f64> {
    if !(target_photons >= 0.0 && target_photons.is_finite()) {
        return Err(Error::invalid(format!("target photon number must be >= 0, got {target_photons}")));
    }
    let unit = QubitState::BOTH
        .iter()
        .map(|&s| {
            TwoModeSystem::new(chain, feedline, pulse.carrier_omega, s)
                .steady_state(Complex64::new(1.0, 0.0))
                .map(|(_, b)| b.norm_sqr())
        })
        .sum::<Result<f64>>()?
        / 2.0;
    if !(unit > 0.0 && unit.is_finite()) {
        return Err(Error::Convergence { residual: target_photons, iterations: 0 });
    }
    Ok((target_photons / unit).sqrt())
}

/// `Γ(t) = 2χ Im(b_g b_e*)`.
pub fn instantaneous_dephasing(trace_g: &FieldTrace, trace_e: &FieldTrace, chi: f64) -> Result<Vec<f64>> {
    trace_g.check_grid(trace_e)?;
    Ok(trace_g.b.iter().zip(&trace_e.b).map(|(bg, be)| 2.0 * chi * (bg * be.conj()).im).collect())
}

/// Index one past the last sample where either trace still carries field
/// above the decay floor. Errors if the traces end before decaying.
fn decayed_extent(trace_g: &FieldTrace, trace_e: &FieldTrace) -> Result<usize> {
    let mut peak: f64 = 0.0;
    for tr in [trace_g, trace_e] {
        for z in tr.a.iter().chain(&tr.b) {
            peak = peak.max(z.norm());
        }
    }
    if peak == 0.0 {
        return Ok(trace_g.len());
    }
    let floor = DECAY_FLOOR * peak;
    let last = (0..trace_g.len())
        .rev()
        .find(|&k| {
            trace_g.a[k].norm() >= floor || trace_g.b[k].norm() >= floor || trace_e.a[k].norm() >= floor || trace_e.b[k].norm() >= floor
        })
        .unwrap_or(0);
    if last + 1 >= trace_g.len() {
        let end = trace_g.len() - 1;
        let ratio = [trace_g.a[end], trace_g.b[end], trace_e.a[end], trace_e.b[end]].iter().map(|z| z.norm()).fold(0.0, f64::max) / peak;
        return Err(Error::TraceTooShort { ratio, limit: DECAY_FLOOR });
    }
    Ok(last + 2)
}

fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => dt * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1])),
    }
}

/// `∫ Γ(t) dt`, truncated once both traces have decayed.
pub fn integrated_dephasing(trace_g: &FieldTrace, trace_e: &FieldTrace, chi: f64) -> Result<f64> {
    let rate = instantaneous_dephasing(trace_g, trace_e, chi)?;
    let extent = decayed_extent(trace_g, trace_e)?;
    Ok(trapezoid(&rate[..extent], trace_g.dt))
}

/// `Γ = (1/τ_m) ∫ Γ(t) dt`.
pub fn average_dephasing_rate(trace_g: &FieldTrace, trace_e: &FieldTrace, chi: f64, tau_m: f64) -> Result<f64> {
    if !(tau_m > 0.0) {
        return Err(Error::invalid("measurement time must be positive"));
    }
    Ok(integrated_dephasing(trace_g, trace_e, chi)? / tau_m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DephasingMatrix {
    /// `gamma[i][j]`: dephasing of qubit `i` while chain `j` is read out (1/s).
    pub gamma: Vec<Vec<f64>>,
    /// Pulse length used to normalise each column (s).
    pub tau_m: Vec<f64>,
}

/// Average dephasing of every qubit under every chain's readout pulse. Each
/// chain responds independently to the common feedline drive.
pub fn crosstalk_dephasing_matrix(chains: &[ReadoutChain], feedline: &FeedlineSpec, pulses: &[PulseSpec]) -> Result<DephasingMatrix> {
    if chains.len() != pulses.len() {
        return Err(Error::invalid(format!("{} chains but {} readout pulses", chains.len(), pulses.len())));
    }
    let n = chains.len();
    let entries: Vec<Result<f64>> = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            let chain = &chains[i];
            let pulse = &pulses[j];
            let dt = default_dt(chain, feedline, pulse);
            let t_end = auto_t_end(chain, feedline, pulse)?;
            let g = simulate_response(chain, feedline, pulse, QubitState::Ground, dt, t_end)?;
            let e = simulate_response(chain, feedline, pulse, QubitState::Excited, dt, t_end)?;
            average_dephasing_rate(&g, &e, chain.chi, pulse.tau_p)
        })
        .collect();
    let mut gamma = vec![vec![0.0; n]; n];
    for (idx, v) in entries.into_iter().enumerate() {
        gamma[idx / n][idx % n] = v.map_err(|e| Error::Row { row: idx / n, source: Box::new(e) })?;
    }
    Ok(DephasingMatrix { gamma, tau_m: pulses.iter().map(|p| p.tau_p).collect() })
}

/// `P_φ = (1 − exp(−Γτ))/2`.
pub fn phase_error_probability(gamma: f64, tau_m: f64) -> Result<f64> {
    if !(gamma >= 0.0) || !(tau_m >= 0.0) {
        return Err(Error::invalid(format!("dephasing rate and time must be >= 0, got {gamma}, {tau_m}")));
    }
    Ok(-0.5 * (-gamma * tau_m).exp_m1())
}

/// Ramsey contrast `c/c₀ = exp(−Γτ ξ²)` for drive amplitudes `ξ` times the
/// pulse amplitude.
pub fn ramsey_contrast_curve(chain: &ReadoutChain, feedline: &FeedlineSpec, pulse: &PulseSpec, scale_factors: &[f64]) -> Result<Vec<(f64, f64)>> {
    if let Some(x) = scale_factors.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::invalid(format!("scale factor must be >= 0, got {x}")));
    }
    let (g, e) = simulate_pair(chain, feedline, pulse)?;
    let gamma_tau = integrated_dephasing(&g, &e, chain.chi)?;
    Ok(scale_factors.iter().map(|&x| (x, (-gamma_tau * x * x).exp())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamseyFit {
    /// Dephasing rate at unit amplitude (1/s).
    pub gamma: f64,
    pub c0: f64,
    /// Root-mean-square residual of the log-contrast fit.
    pub residual: f64,
}

/// Least-squares fit of `ln c = ln c₀ − Γτ ξ²`.
pub fn fit_ramsey_contrast(curve: &[(f64, f64)], tau_m: f64) -> Result<RamseyFit> {
    if curve.len() < 2 {
        return Err(Error::invalid("need at least two contrast points"));
    }
    if curve.iter().any(|(_, c)| !(*c > 0.0)) {
        return Err(Error::invalid("contrast values must be positive"));
    }
    let n = curve.len() as f64;
    let xs: Vec<f64> = curve.iter().map(|(x, _)| x * x).collect();
    let ys: Vec<f64> = curve.iter().map(|(_, c)| c.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("contrast points need distinct scale factors"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    Ok(RamseyFit { gamma: -slope / tau_m, c0: intercept.exp(), residual })
}
