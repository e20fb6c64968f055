//! Frequency-domain model of the feedline, Purcell filter and readout
//! resonator network.
//!
//! The filter (mode `a`) couples to the feedline next to an input capacitor;
//! the capacitor's reflection coefficient renormalises the filter linewidth
//! and frequency. The readout resonator (mode `b`) couples to the filter with
//! rate `J` and weakly to a qubit drive line with rate `kappa_b`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QubitState {
    #[serde(alias = "g")]
    Ground,
    #[serde(alias = "e")]
    Excited,
}

impl QubitState {
    pub const BOTH: [QubitState; 2] = [QubitState::Ground, QubitState::Excited];

    pub fn label(self) -> &'static str {
        match self {
            QubitState::Ground => "g",
            QubitState::Excited => "e",
        }
    }
}

/// Feedline with a series input capacitor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedlineSpec {
    /// Characteristic impedance (ohm).
    pub z0: f64,
    /// Input capacitance (F). Zero means no capacitor.
    pub c_in: f64,
}

impl FeedlineSpec {
    pub fn new(z0: f64, c_in: f64) -> Result<Self> {
        let spec = FeedlineSpec { z0, c_in };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z0 > 0.0 && self.z0.is_finite()) {
            return Err(Error::invalid(format!("Z0 must be positive, got {}", self.z0)));
        }
        if !(self.c_in >= 0.0) {
            return Err(Error::invalid(format!("C_in must be >= 0, got {}", self.c_in)));
        }
        Ok(())
    }

    /// Reflection coefficient of the input capacitor at angular frequency `omega`.
    pub fn reflection(&self, omega: f64) -> Complex64 {
        reflection_coefficient(self, omega)
    }

    /// Fraction of the field emitted at the filter that travels towards the
    /// output port, `(1 + |Γ|²)/2`.
    pub fn directionality(&self, omega: f64) -> f64 {
        (1.0 + self.reflection(omega).norm_sqr()) / 2.0
    }
}

/// `Γ(ω) = 1/(1 + 2iωZ₀C_in)`. `C_in = 0` is the single-port limit `Γ = 1`;
/// `C_in = ∞` shorts the capacitor and gives `Γ = 0` for `ω > 0`.
pub fn reflection_coefficient(feedline: &FeedlineSpec, omega: f64) -> Complex64 {
    if feedline.c_in == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    if feedline.c_in.is_infinite() {
        return if omega == 0.0 { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) };
    }
    let x = 2.0 * omega * feedline.z0 * feedline.c_in;
    Complex64::new(1.0, x).inv()
}

/// Circuit parameters of one qubit readout chain. Angular units throughout.
///
/// `omega_p_bare`/`kappa_p_bare` describe the filter as it would appear when
/// coupled to a single port (`Γ → 1`). Spectroscopy reports the renormalised
/// values; use [`ReadoutChain::with_effective_filter`] to enter those.
///
/// Dispersive convention: the resonator sits at `omega_r - chi` with the qubit
/// in the ground state and at `omega_r + chi` in the excited state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutChain {
    pub omega_p_bare: f64,
    pub kappa_p_bare: f64,
    pub omega_r: f64,
    pub j: f64,
    pub kappa_b: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub chi: f64,
    pub g: f64,
    pub omega_q: f64,
    pub t1: f64,
    pub p_therm: f64,
}

impl ReadoutChain {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("kappa_P", self.kappa_p_bare),
            ("J", self.j),
            ("kappa_b", self.kappa_b),
            ("gamma_a", self.gamma_a),
            ("gamma_b", self.gamma_b),
            ("g", self.g),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite rate >= 0, got {v}")));
            }
        }
        for (name, v) in [("omega_P", self.omega_p_bare), ("omega_R", self.omega_r), ("omega_Q", self.omega_q)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.chi.is_finite() {
            return Err(Error::invalid("chi must be finite"));
        }
        if !(self.t1 > 0.0) {
            return Err(Error::invalid(format!("T1 must be positive, got {}", self.t1)));
        }
        if !(0.0..=1.0).contains(&self.p_therm) {
            return Err(Error::invalid(format!("P_therm must lie in [0, 1], got {}", self.p_therm)));
        }
        Ok(())
    }

    pub fn resonator_frequency(&self, state: QubitState) -> f64 {
        match state {
            QubitState::Ground => self.omega_r - self.chi,
            QubitState::Excited => self.omega_r + self.chi,
        }
    }

    /// Set the bare filter frequency and linewidth such that the renormalised
    /// values seen through `feedline` equal the given ones.
    pub fn with_effective_filter(mut self, feedline: &FeedlineSpec, omega_p_eff: f64, kappa_p_eff: f64) -> Self {
        let (omega, kappa) = bare_filter_from_effective(feedline, omega_p_eff, kappa_p_eff);
        self.omega_p_bare = omega;
        self.kappa_p_bare = kappa;
        self
    }
}

/// Inverts `κ̃ = κ(1+ReΓ)/2`, `ω̃ = ω + κ ImΓ/4` with `Γ` taken at the bare
/// filter frequency. Fixed-point iteration; `Γ` varies slowly so this
/// converges in a handful of steps.
pub fn bare_filter_from_effective(feedline: &FeedlineSpec, omega_eff: f64, kappa_eff: f64) -> (f64, f64) {
    let mut omega = omega_eff;
    let mut kappa = kappa_eff;
    for _ in 0..200 {
        let gamma = feedline.reflection(omega);
        let kappa_next = 2.0 * kappa_eff / (1.0 + gamma.re);
        let omega_next = omega_eff - kappa_next * gamma.im / 4.0;
        let done = (omega_next - omega).abs() <= 1e-15 * omega_eff.abs() && (kappa_next - kappa).abs() <= 1e-15 * kappa_eff.abs();
        omega = omega_next;
        kappa = kappa_next;
        if done {
            break;
        }
    }
    (omega, kappa)
}

/// Filter parameters after renormalisation by the feedline, plus the
/// resulting readout-resonator linewidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveChainParams {
    pub omega_p_eff: f64,
    pub kappa_p_eff: f64,
    pub kappa_r_eff: f64,
    /// Filter minus resonator frequency, `ω̃_a − ω_b`.
    pub delta_ab: f64,
    /// Reflection coefficient used for the renormalisation (at the bare filter
    /// frequency).
    pub reflection: Complex64,
}

pub fn effective_filter_params(chain: &ReadoutChain, feedline: &FeedlineSpec) -> EffectiveChainParams {
    let gamma = feedline.reflection(chain.omega_p_bare);
    let kappa_p_eff = chain.kappa_p_bare * (1.0 + gamma.re) / 2.0;
    let omega_p_eff = chain.omega_p_bare + chain.kappa_p_bare * gamma.im / 4.0;
    let delta_ab = omega_p_eff - chain.omega_r;
    EffectiveChainParams {
        omega_p_eff,
        kappa_p_eff,
        kappa_r_eff: effective_readout_linewidth(kappa_p_eff, chain.j, delta_ab),
        delta_ab,
        reflection: gamma,
    }
}

/// Exact effective readout linewidth from the hybridised filter/resonator
/// eigenvalue: `κ_R = ½(κ̃ − Re√(−16J² + (κ̃ − 2iΔ)²))`, principal root.
pub fn effective_readout_linewidth(kappa_p_eff: f64, j: f64, delta_ab: f64) -> f64 {
    if j == 0.0 {
        return 0.0;
    }
    let z = Complex64::new(-16.0 * j * j, 0.0) + (Complex64::new(kappa_p_eff, -2.0 * delta_ab)).powi(2);
    (0.5 * (kappa_p_eff - z.sqrt().re)).max(0.0)
}

/// Weak-coupling limit `4J²κ̃/(κ̃² + 4Δ²)`.
pub fn approx_readout_linewidth(kappa_p_eff: f64, j: f64, delta_ab: f64) -> f64 {
    4.0 * j * j * kappa_p_eff / (kappa_p_eff * kappa_p_eff + 4.0 * delta_ab * delta_ab)
}

/// Scattering model of one filter/resonator pair expressed in the
/// renormalised filter parameters. Shared by the forward model and the
/// spectrum fitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineModel {
    pub omega_p: f64,
    pub kappa_p: f64,
    pub omega_b: f64,
    pub j: f64,
    pub kappa_b: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub reflection: Complex64,
}

impl LineModel {
    pub fn new(chain: &ReadoutChain, feedline: &FeedlineSpec, omega_b: f64) -> Self {
        let eff = effective_filter_params(chain, feedline);
        LineModel {
            omega_p: eff.omega_p_eff,
            kappa_p: eff.kappa_p_eff,
            omega_b,
            j: chain.j,
            kappa_b: chain.kappa_b,
            gamma_a: chain.gamma_a,
            gamma_b: chain.gamma_b,
            reflection: eff.reflection,
        }
    }

    fn denominators(&self, omega_d: f64) -> (Complex64, Complex64) {
        let a = Complex64::new(self.gamma_a + self.kappa_p, 2.0 * (self.omega_p - omega_d));
        let b = Complex64::new(self.gamma_b + self.kappa_b, 2.0 * (self.omega_b - omega_d));
        (a, b)
    }

    /// Feedline transmission normalised by the input-coupler insertion loss,
    /// `S21/(1−Γ)`.
    pub fn s21_normalized(&self, omega_d: f64) -> Complex64 {
        let (a, b) = self.denominators(omega_d);
        let four_j2 = 4.0 * self.j * self.j;
        // κ̃B/(4J² + AB), rearranged so B = 0 and J = 0 are both regular.
        let term = if b == Complex64::new(0.0, 0.0) {
            if four_j2 == 0.0 {
                self.kappa_p / a
            } else {
                Complex64::new(0.0, 0.0)
            }
        } else {
            self.kappa_p / (a + four_j2 / b)
        };
        let g = self.reflection;
        Complex64::new(1.0, 0.0) - (1.0 + g) / (1.0 + g.re) * term
    }

    /// Transmission from the weakly coupled drive line to the feedline output.
    pub fn s23(&self, omega_d: f64) -> Complex64 {
        if self.j == 0.0 || self.kappa_b == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let (a, b) = self.denominators(omega_d);
        let g = self.reflection;
        let kappa_a_bare = 2.0 * self.kappa_p / (1.0 + g.re);
        let prefactor = (1.0 + g) / (2.0 * (1.0 + g.re)).sqrt();
        prefactor * 4.0 * I * self.j * kappa_a_bare.sqrt() * self.kappa_b.sqrt() / (4.0 * self.j * self.j + a * b)
    }
}

pub fn s21(chain: &ReadoutChain, feedline: &FeedlineSpec, omega_d: f64, state: QubitState) -> Complex64 {
    LineModel::new(chain, feedline, chain.resonator_frequency(state)).s21_normalized(omega_d)
}

/// Drive-line to output transmission with the resonator at its mean
/// frequency `omega_r`.
pub fn s23(chain: &ReadoutChain, feedline: &FeedlineSpec, omega_d: f64) -> Complex64 {
    LineModel::new(chain, feedline, chain.omega_r).s23(omega_d)
}

/// Linear two-mode (filter `a`, resonator `b`) system in the frame rotating
/// at a drive carrier. `d/dt (a, b) = M (a, b) + (drive_coupling · c_in, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoModeSystem {
    pub delta_a: f64,
    pub delta_b: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub j: f64,
    /// Input field to filter drive: `(√κ_a/2)(1−Γ)`.
    pub drive_coupling: Complex64,
    /// Filter amplitude to output field: `−(√κ_a/2)(1+Γ)`.
    pub output_coupling: Complex64,
    /// Direct input-to-output transmission `1−Γ`.
    pub feedthrough: Complex64,
    /// Filter amplitude to the reflected (input-side) field: `−(√κ_a/2)(1−Γ)`.
    pub reflected_coupling: Complex64,
}

impl TwoModeSystem {
    /// `omega_b` overrides the resonator frequency; `None` uses the mean
    /// `omega_r`.
    pub fn with_resonator(chain: &ReadoutChain, feedline: &FeedlineSpec, carrier: f64, omega_b: f64) -> Self {
        let eff = effective_filter_params(chain, feedline);
        let g = eff.reflection;
        let half_root = chain.kappa_p_bare.sqrt() / 2.0;
        TwoModeSystem {
            delta_a: eff.omega_p_eff - carrier,
            delta_b: omega_b - carrier,
            loss_a: eff.kappa_p_eff + chain.gamma_a,
            loss_b: chain.kappa_b + chain.gamma_b,
            j: chain.j,
            drive_coupling: half_root * (1.0 - g),
            output_coupling: -half_root * (1.0 + g),
            feedthrough: 1.0 - g,
            reflected_coupling: -half_root * (1.0 - g),
        }
    }

    pub fn new(chain: &ReadoutChain, feedline: &FeedlineSpec, carrier: f64, state: QubitState) -> Self {
        Self::with_resonator(chain, feedline, carrier, chain.resonator_frequency(state))
    }

    pub fn matrix(&self) -> [[Complex64; 2]; 2] {
        [
            [Complex64::new(-self.loss_a / 2.0, -self.delta_a), -I * self.j],
            [-I * self.j, Complex64::new(-self.loss_b / 2.0, -self.delta_b)],
        ]
    }

    pub fn eigenvalues(&self) -> [Complex64; 2] {
        let m = self.matrix();
        let half_tr = (m[0][0] + m[1][1]) / 2.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let disc = (half_tr * half_tr - det).sqrt();
        [half_tr + disc, half_tr - disc]
    }

    /// Fields `(a, b)` for a constant input amplitude.
    pub fn steady_state(&self, amplitude: Complex64) -> Result<(Complex64, Complex64)> {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.norm() == 0.0 {
            return Err(Error::Singular("steady state of lossless resonant two-mode system"));
        }
        let u = self.drive_coupling * amplitude;
        // x = -M⁻¹ (u, 0)
        let a = -(m[1][1] * u) / det;
        let b = (m[1][0] * u) / det;
        Ok((a, b))
    }

    pub fn output(&self, a: Complex64, input: Complex64) -> Complex64 {
        self.feedthrough * input + self.output_coupling * a
    }
}

/// Steady-state resonator photon number `|b|²` for a constant input amplitude
/// at `omega_d`, with the resonator at its mean frequency.
pub fn steady_state_photon(chain: &ReadoutChain, feedline: &FeedlineSpec, omega_d: f64, amplitude: Complex64) -> Result<f64> {
    let sys = TwoModeSystem::with_resonator(chain, feedline, omega_d, chain.omega_r);
    Ok(sys.steady_state(amplitude)?.1.norm_sqr())
}

/// Same quantity for a bare resonator of linewidth `kappa_r` driven directly,
/// i.e. without a Purcell filter.
pub fn steady_state_photon_unfiltered(kappa_r: f64, detuning: f64, amplitude: Complex64) -> Result<f64> {
    let denom = Complex64::new(kappa_r / 2.0, detuning);
    if denom.norm() == 0.0 {
        return Err(Error::Singular("lossless resonator driven on resonance"));
    }
    Ok((kappa_r.sqrt() * amplitude / denom).norm_sqr())
}

/// Purcell-limited qubit lifetime for a qubit detuned by `delta_q` from the
/// readout resonator. The qubit enters as a linear mode coupled with `g`;
/// with the filter the mode set is (qubit, resonator, filter), without it the
/// resonator decays directly at the chain's effective linewidth.
pub fn purcell_t1_limit(chain: &ReadoutChain, feedline: &FeedlineSpec, delta_q: f64, with_filter: bool) -> Result<f64> {
    if !(delta_q.is_finite() && delta_q != 0.0) {
        return Err(Error::invalid("qubit-resonator detuning must be non-zero"));
    }
    if chain.g == 0.0 {
        return Ok(f64::INFINITY);
    }
    let eff = effective_filter_params(chain, feedline);
    let c = Complex64::new;
    let resonator_loss = chain.kappa_b + chain.gamma_b;
    let m = if with_filter {
        DMatrix::from_row_slice(
            3,
            3,
            &[
                c(0.0, -delta_q),
                c(0.0, -chain.g),
                c(0.0, 0.0),
                c(0.0, -chain.g),
                c(-resonator_loss / 2.0, 0.0),
                c(0.0, -chain.j),
                c(0.0, 0.0),
                c(0.0, -chain.j),
                c(-(eff.kappa_p_eff + chain.gamma_a) / 2.0, -eff.delta_ab),
            ],
        )
    } else {
        DMatrix::from_row_slice(
            2,
            2,
            &[c(0.0, -delta_q), c(0.0, -chain.g), c(0.0, -chain.g), c(-(eff.kappa_r_eff + resonator_loss) / 2.0, 0.0)],
        )
    };
    let (rate, weight) = qubit_like_eigenvalue(&m)?;
    if weight <= 0.5 + 1e-6 {
        return Err(Error::AmbiguousQubitMode { weight });
    }
    if rate.re == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / (2.0 * rate.re.abs()))
}

/// Eigenvalue whose eigenvector has the largest weight on mode 0, with that
/// normalised weight.
fn qubit_like_eigenvalue(m: &DMatrix<Complex64>) -> Result<(Complex64, f64)> {
    let n = m.nrows();
    let (_, t) = m.clone().schur().unpack();
    let mut best: Option<(Complex64, f64)> = None;
    for k in 0..n {
        let mu = t[(k, k)];
        let shifted = m - DMatrix::<Complex64>::identity(n, n) * mu;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.ok_or(Error::Singular("eigenvector decomposition"))?;
        let (idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .ok_or(Error::Singular("empty spectrum"))?;
        let v = v_t.row(idx);
        let total: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        let weight = v[0].norm_sqr() / total;
        if best.is_none_or(|(_, w)| weight > w) {
            best = Some((mu, weight));
        }
    }
    best.ok_or(Error::Singular("empty spectrum"))
}

/// `n_crit = Δ²/(4g²)` with `Δ = ω_Q − ω_R`.
pub fn critical_photon_number(g: f64, omega_q: f64, omega_r: f64) -> Result<f64> {
    let delta = omega_q - omega_r;
    if delta == 0.0 {
        return Err(Error::invalid("critical photon number undefined at zero qubit-resonator detuning"));
    }
    Ok(delta * delta / (4.0 * g * g))
}
