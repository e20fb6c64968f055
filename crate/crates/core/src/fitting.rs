//! Least-squares recovery of chain parameters from transmission spectra.
//!
//! Parameters are effective filter values as they appear in a measured line
//! shape; the feedline reflection is taken as known. A complex amplitude and
//! a linear baseline absorb the insertion loss and slow background.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::circuit::{bare_filter_from_effective, effective_filter_params, FeedlineSpec, LineModel, ReadoutChain};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumSource {
    S21,
    S23,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumData {
    pub omega_d: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub phase: Option<Vec<f64>>,
    pub source: SpectrumSource,
}

impl SpectrumData {
    pub fn new(omega_d: Vec<f64>, magnitude: Vec<f64>, phase: Option<Vec<f64>>, source: SpectrumSource) -> Result<Self> {
        let data = SpectrumData { omega_d, magnitude, phase, source };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.omega_d.len() != self.magnitude.len() {
            return Err(Error::invalid("frequency and magnitude columns differ in length"));
        }
        if self.omega_d.len() < 2 {
            return Err(Error::invalid("spectrum needs at least two points"));
        }
        if let Some(p) = &self.phase {
            if p.len() != self.omega_d.len() || p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("phase column must match the grid and be finite"));
            }
        }
        if let Some(k) = self.omega_d.windows(2).position(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::invalid(format!("frequency grid is not strictly increasing at point {}", k + 1)));
        }
        if let Some(k) = self.magnitude.iter().position(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::invalid(format!("magnitude at point {k} is negative or not finite")));
        }
        Ok(())
    }

    /// Noise-free samples of a line model.
    pub fn synthesize(model: &LineModel, omega_d: &[f64], source: SpectrumSource) -> Result<Self> {
        let values: Vec<Complex64> = omega_d
            .iter()
            .map(|&w| match source {
                SpectrumSource::S21 => model.s21_normalized(w),
                SpectrumSource::S23 => model.s23(w),
            })
            .collect();
        SpectrumData::new(
            omega_d.to_vec(),
            values.iter().map(|z| z.norm()).collect(),
            Some(values.iter().map(|z| z.arg()).collect()),
            source,
        )
    }

    /// Reads `frequency_hz, magnitude[, phase_rad]` with a header row.
    /// Lines starting with `#` are skipped.
    pub fn from_csv<R: Read>(reader: R, source: SpectrumSource) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::invalid(format!("spectrum CSV header: {e}")))?.clone();
        let column = |name: &str| headers.iter().position(|h| h == name);
        let f_col = column("frequency_hz").ok_or_else(|| Error::invalid("spectrum CSV lacks a frequency_hz column"))?;
        let m_col = column("magnitude").ok_or_else(|| Error::invalid("spectrum CSV lacks a magnitude column"))?;
        let p_col = column("phase_rad");
        let (mut omega, mut mag, mut phase) = (Vec::new(), Vec::new(), Vec::new());
        for record in rdr.records() {
            let record = record.map_err(|e| Error::invalid(format!("spectrum CSV: {e}")))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let field = |col: usize| -> Result<f64> {
                let text = record.get(col).ok_or_else(|| Error::invalid(format!("line {line}: missing column {col}")))?;
                text.parse::<f64>().map_err(|_| Error::invalid(format!("line {line}: cannot parse {text:?} as a number")))
            };
            omega.push(2.0 * std::f64::consts::PI * field(f_col)?);
            mag.push(field(m_col)?);
            if let Some(c) = p_col {
                phase.push(field(c)?);
            }
        }
        SpectrumData::new(omega, mag, p_col.map(|_| phase), source)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| Error::invalid(format!("writing spectrum CSV: {e}"));
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["frequency_hz", "magnitude"];
        if self.phase.is_some() {
            header.push("phase_rad");
        }
        w.write_record(&header).map_err(io)?;
        for k in 0..self.omega_d.len() {
            let mut row = vec![format!("{:e}", self.omega_d[k] / (2.0 * std::f64::consts::PI)), format!("{:e}", self.magnitude[k])];
            if let Some(p) = &self.phase {
                row.push(format!("{:e}", p[k]));
            }
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::invalid(format!("writing spectrum CSV: {e}")))
    }
}

/// Chain parameters as seen in a spectrum, angular units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParameters {
    pub omega_p: f64,
    pub omega_r: f64,
    pub kappa_p: f64,
    pub j: f64,
    pub kappa_b: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    /// Half the splitting of paired fits.
    pub chi: Option<f64>,
}

impl FitParameters {
    /// Effective parameters of `chain` with the resonator at `omega_r`.
    pub fn from_chain(chain: &ReadoutChain, feedline: &FeedlineSpec, omega_r: f64) -> Self {
        let eff = effective_filter_params(chain, feedline);
        FitParameters {
            omega_p: eff.omega_p_eff,
            omega_r,
            kappa_p: eff.kappa_p_eff,
            j: chain.j,
            kappa_b: chain.kappa_b,
            gamma_a: chain.gamma_a,
            gamma_b: chain.gamma_b,
            chi: None,
        }
    }

    pub fn line_model(&self, feedline: &FeedlineSpec, omega_b: f64) -> LineModel {
        let (omega_bare, _) = bare_filter_from_effective(feedline, self.omega_p, self.kappa_p);
        LineModel {
            omega_p: self.omega_p,
            kappa_p: self.kappa_p,
            omega_b,
            j: self.j,
            kappa_b: self.kappa_b,
            gamma_a: self.gamma_a,
            gamma_b: self.gamma_b,
            reflection: feedline.reflection(omega_bare),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LevenbergMarquardt,
    NelderMead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Also fit the internal losses and the drive-port coupling.
    pub fit_losses: bool,
    pub use_phase: bool,
    pub baseline: bool,
    pub method: Method,
    /// Fall back to the simplex when the derivative-based search fails.
    pub fallback: bool,
    pub max_iterations: usize,
    /// Largest accepted cosine between the residual and any Jacobian column.
    pub gradient_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            fit_losses: false,
            use_phase: false,
            baseline: true,
            method: Method::LevenbergMarquardt,
            fallback: true,
            max_iterations: 500,
            gradient_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedValue {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FitParameters,
    pub chi_std_error: Option<f64>,
    /// Free parameters in covariance order.
    pub free: Vec<FittedValue>,
    pub covariance: Vec<Vec<f64>>,
    pub amplitude: Complex64,
    pub baseline_slope: f64,
    pub residual_norm: f64,
    pub gradient_cosine: f64,
    pub converged: bool,
    pub iterations: usize,
    pub method: Method,
}

impl FitResult {
    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.free.iter().find(|v| v.name == name).map(|v| v.std_error)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    OmegaP,
    OmegaRg,
    OmegaRe,
    KappaP,
    J,
    KappaB,
    GammaA,
    GammaB,
    Amplitude,
    Phase,
    Slope,
}

impl Slot {
    fn name(self) -> &'static str {
        match self {
            Slot::OmegaP => "omega_p",
            Slot::OmegaRg => "omega_r",
            Slot::OmegaRe => "omega_r_e",
            Slot::KappaP => "kappa_p",
            Slot::J => "j",
            Slot::KappaB => "kappa_b",
            Slot::GammaA => "gamma_a",
            Slot::GammaB => "gamma_b",
            Slot::Amplitude => "amplitude",
            Slot::Phase => "phase",
            Slot::Slope => "baseline_slope",
        }
    }
}

const N_SLOTS: usize = 11;

/// Full physical parameter vector indexed by `Slot`.
type Physical = [f64; N_SLOTS];

struct Problem<'a> {
    datasets: Vec<(&'a SpectrumData, Slot)>,
    feedline: &'a FeedlineSpec,
    options: FitOptions,
    free: Vec<Slot>,
    base: Physical,
    scale: Physical,
    lower: Physical,
    center: f64,
    span: f64,
}

impl<'a> Problem<'a> {
    fn new(
        datasets: Vec<(&'a SpectrumData, Slot)>,
        feedline: &'a FeedlineSpec,
        initial: &FitParameters,
        initial_e: Option<f64>,
        options: FitOptions,
    ) -> Result<Self> {
        feedline.validate()?;
        for (d, _) in &datasets {
            d.validate()?;
            if options.use_phase && d.phase.is_none() {
                return Err(Error::invalid("phase fitting requested but the spectrum has no phase column"));
            }
        }
        let init = [initial.omega_p, initial.omega_r, initial.kappa_p, initial.j, initial.kappa_b, initial.gamma_a, initial.gamma_b];
        if init.iter().any(|v| !v.is_finite()) || initial.kappa_p <= 0.0 || initial.omega_p <= 0.0 || initial.omega_r <= 0.0 {
            return Err(Error::invalid("initial guess must be finite with positive frequencies and filter linewidth"));
        }
        if initial.j < 0.0 || initial.kappa_b < 0.0 || initial.gamma_a < 0.0 || initial.gamma_b < 0.0 {
            return Err(Error::invalid("initial guess rates must be non-negative"));
        }
        let lo = datasets.iter().map(|(d, _)| d.omega_d[0]).fold(f64::INFINITY, f64::min);
        let hi = datasets.iter().map(|(d, _)| *d.omega_d.last().unwrap()).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 5.0 * initial.kappa_p {
            log::warn!("spectrum spans {:.2} filter linewidths; fewer than 5 may bias the fit", (hi - lo) / initial.kappa_p);
        }

        let mut free = vec![Slot::OmegaP, Slot::OmegaRg];
        if initial_e.is_some() {
            free.push(Slot::OmegaRe);
        }
        free.extend([Slot::KappaP, Slot::J]);
        if options.fit_losses {
            free.extend([Slot::KappaB, Slot::GammaA, Slot::GammaB]);
        }
        free.push(Slot::Amplitude);
        if options.use_phase {
            free.push(Slot::Phase);
        }
        if options.baseline {
            free.push(Slot::Slope);
        }

        let mut base = [0.0; N_SLOTS];
        base[Slot::OmegaP as usize] = initial.omega_p;
        base[Slot::OmegaRg as usize] = initial.omega_r;
        base[Slot::OmegaRe as usize] = initial_e.unwrap_or(initial.omega_r);
        base[Slot::KappaP as usize] = initial.kappa_p;
        base[Slot::J as usize] = initial.j;
        base[Slot::KappaB as usize] = initial.kappa_b;
        base[Slot::GammaA as usize] = initial.gamma_a;
        base[Slot::GammaB as usize] = initial.gamma_b;
        let k = initial.kappa_p;
        let mut scale = [k; N_SLOTS];
        scale[Slot::Phase as usize] = 1.0;
        scale[Slot::Slope as usize] = 1.0;
        let mut lower = [f64::NEG_INFINITY; N_SLOTS];
        lower[Slot::KappaP as usize] = 1e-6 * k;
        for s in [Slot::J, Slot::KappaB, Slot::GammaA, Slot::GammaB, Slot::Amplitude] {
            lower[s as usize] = 0.0;
        }

        let mut problem = Problem { datasets, feedline, options, free, base, scale, lower, center: 0.5 * (lo + hi), span: hi - lo };
        // Amplitude and phase from a projection of the data onto the unit-amplitude model.
        problem.base[Slot::Amplitude as usize] = 1.0;
        let (num, den) = problem.datasets.iter().fold((Complex64::new(0.0, 0.0), 0.0), |(num, den), (d, slot)| {
            let model = problem.model_values(&problem.base, d, *slot);
            d.magnitude.iter().enumerate().fold((num, den), |(n, dd), (i, &m)| {
                let overlap = match (&d.phase, options.use_phase) {
                    (Some(p), true) => Complex64::from_polar(m, p[i]) * model[i].conj(),
                    _ => Complex64::new(m * model[i].norm(), 0.0),
                };
                (n + overlap, dd + model[i].norm_sqr())
            })
        });
        let amp0 = if den > 0.0 { num / den } else { Complex64::new(1.0, 0.0) };
        let amp_abs = if amp0.norm() > 0.0 { amp0.norm() } else { 1.0 };
        problem.base[Slot::Amplitude as usize] = amp_abs;
        problem.base[Slot::Phase as usize] = if options.use_phase { amp0.arg() } else { 0.0 };
        problem.scale[Slot::Amplitude as usize] = amp_abs;
        Ok(problem)
    }

    fn physical(&self, x: &[f64]) -> Physical {
        let mut p = self.base;
        for (xi, &slot) in x.iter().zip(&self.free) {
            p[slot as usize] = self.base[slot as usize] + self.scale[slot as usize] * xi;
        }
        p
    }

    fn bounds(&self) -> Vec<f64> {
        self.free.iter().map(|&s| (self.lower[s as usize] - self.base[s as usize]) / self.scale[s as usize]).collect()
    }

    fn params(&self, p: &Physical) -> FitParameters {
        FitParameters {
            omega_p: p[Slot::OmegaP as usize],
            omega_r: p[Slot::OmegaRg as usize],
            kappa_p: p[Slot::KappaP as usize],
            j: p[Slot::J as usize],
            kappa_b: p[Slot::KappaB as usize],
            gamma_a: p[Slot::GammaA as usize],
            gamma_b: p[Slot::GammaB as usize],
            chi: None,
        }
    }

    fn model_values(&self, p: &Physical, data: &SpectrumData, resonator: Slot) -> Vec<Complex64> {
        let line = self.params(p).line_model(self.feedline, p[resonator as usize]);
        let amp = Complex64::from_polar(p[Slot::Amplitude as usize], p[Slot::Phase as usize]);
        let slope = p[Slot::Slope as usize];
        data.omega_d
            .iter()
            .map(|&w| {
                let shape = match data.source {
                    SpectrumSource::S21 => line.s21_normalized(w),
                    SpectrumSource::S23 => line.s23(w),
                };
                amp * (1.0 + slope * (w - self.center) / self.span) * shape
            })
            .collect()
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let p = self.physical(x);
        let mut r = Vec::new();
        for (d, slot) in &self.datasets {
            let model = self.model_values(&p, d, *slot);
            match (&d.phase, self.options.use_phase) {
                (Some(phase), true) => {
                    for i in 0..model.len() {
                        let diff = model[i] - Complex64::from_polar(d.magnitude[i], phase[i]);
                        r.push(diff.re);
                        r.push(diff.im);
                    }
                }
                _ => r.extend(model.iter().zip(&d.magnitude).map(|(m, obs)| m.norm() - obs)),
            }
        }
        r
    }
}

fn cost(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

fn project(x: &mut [f64], lower: &[f64]) {
    for (xi, lo) in x.iter_mut().zip(lower) {
        if *xi < *lo {
            *xi = *lo;
        }
    }
}

/// Central differences, one-sided next to a bound. `None` on a non-finite entry.
fn jacobian(problem: &Problem, x: &[f64], lower: &[f64]) -> Option<DMatrix<f64>> {
    const H: f64 = 1e-5;
    let r0 = problem.residuals(x);
    let mut jac = DMatrix::zeros(r0.len(), x.len());
    for k in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += H;
        xm[k] -= H;
        let (rp, rm, width) = if xm[k] < lower[k] { (problem.residuals(&xp), r0.clone(), H) } else { (problem.residuals(&xp), problem.residuals(&xm), 2.0 * H) };
        for i in 0..r0.len() {
            let v = (rp[i] - rm[i]) / width;
            if !v.is_finite() {
                return None;
            }
            jac[(i, k)] = v;
        }
    }
    Some(jac)
}

/// Largest cosine between the residual and a Jacobian column whose descent
/// direction is not blocked by an active bound.
fn gradient_cosine(jac: &DMatrix<f64>, r: &[f64], x: &[f64], lower: &[f64]) -> f64 {
    let rv = DVector::from_column_slice(r);
    let rn = rv.norm();
    if rn == 0.0 {
        return 0.0;
    }
    let largest = (0..jac.ncols()).map(|k| jac.column(k).norm()).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for k in 0..jac.ncols() {
        let col = jac.column(k);
        let g = col.dot(&rv);
        if x[k] <= lower[k] && g > 0.0 {
            continue;
        }
        // Directions the data does not constrain carry only rounding noise.
        let cn = col.norm();
        if cn > 1e-6 * largest {
            worst = worst.max(g.abs() / (cn * rn));
        }
    }
    worst
}

struct Outcome {
    x: Vec<f64>,
    iterations: usize,
    jacobian_failed: bool,
}

fn levenberg_marquardt(problem: &Problem, x0: &[f64], lower: &[f64], data_norm: f64) -> Outcome {
    let mut x = x0.to_vec();
    let mut r = problem.residuals(&x);
    let mut c = cost(&r);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < problem.options.max_iterations {
        iterations += 1;
        let Some(jac) = jacobian(problem, &x, lower) else {
            return Outcome { x, iterations, jacobian_failed: true };
        };
        if converged(problem, &jac, &r, &x, lower, data_norm) {
            break;
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * DVector::from_column_slice(&r);
        let mut improved = false;
        while lambda < 1e16 {
            let mut lhs = jtj.clone();
            for k in 0..lhs.nrows() {
                lhs[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = lhs.cholesky().map(|ch| ch.solve(&(-&grad))) else {
                lambda *= 4.0;
                continue;
            };
            let mut trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            project(&mut trial, lower);
            let r_trial = problem.residuals(&trial);
            let c_trial = cost(&r_trial);
            if c_trial.is_finite() && c_trial < c {
                let moved = trial.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let gain = c - c_trial;
                x = trial;
                r = r_trial;
                c = c_trial;
                lambda = (lambda / 3.0).max(1e-12);
                improved = moved > 1e-15 && gain > 1e-30 * c.max(1e-300);
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    Outcome { x, iterations, jacobian_failed: false }
}

fn converged(problem: &Problem, jac: &DMatrix<f64>, r: &[f64], x: &[f64], lower: &[f64], data_norm: f64) -> bool {
    let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    rn <= 1e-10 * data_norm || gradient_cosine(jac, r, x, lower) <= problem.options.gradient_tol
}

fn nelder_mead(problem: &Problem, x0: &[f64], lower: &[f64], max_evals: usize) -> Outcome {
    let n = x0.len();
    let f = |x: &[f64]| {
        let c = cost(&problem.residuals(x));
        if c.is_finite() {
            c
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for k in 0..n {
        let mut v = x0.to_vec();
        v[k] += 0.1;
        project(&mut v, lower);
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let mut evals = n + 1;
    let mut iterations = 0;
    while evals < max_evals {
        iterations += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if (worst - best).abs() <= 1e-15 * best.abs().max(1e-300) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|v| v.0[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| {
            let mut p: Vec<f64> = (0..n).map(|k| centroid[k] + t * (simplex[n].0[k] - centroid[k])).collect();
            project(&mut p, lower);
            p
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let xc = if fr < simplex[n].1 { along(-0.5) } else { along(0.5) };
            let fc = f(&xc);
            evals += 1;
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for k in 0..n {
                        v.0[k] = x_best[k] + 0.5 * (v.0[k] - x_best[k]);
                    }
                    v.1 = f(&v.0);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    Outcome { x: simplex.swap_remove(0).0, iterations, jacobian_failed: false }
}

/// Moves each resonator frequency to the best point of a coarse scan over one
/// filter linewidth either side of the guess, other parameters held fixed.
/// A narrow resonator feature offset from the data otherwise leaves the local
/// search in the decoupled minimum.
fn resonator_prescan(problem: &Problem, mut x: Vec<f64>) -> Vec<f64> {
    const STEPS: usize = 400;
    for (k, slot) in problem.free.iter().enumerate() {
        if !matches!(slot, Slot::OmegaRg | Slot::OmegaRe) {
            continue;
        }
        let mut best = (x[k], cost(&problem.residuals(&x)));
        for i in 0..=STEPS {
            let mut trial = x.clone();
            trial[k] = -1.0 + 2.0 * i as f64 / STEPS as f64;
            let c = cost(&problem.residuals(&trial));
            if c < best.1 {
                best = (trial[k], c);
            }
        }
        x[k] = best.0;
    }
    x
}

fn solve(problem: Problem) -> Result<FitResult> {
    let lower = problem.bounds();
    let x0 = vec![0.0; problem.free.len()];
    let data_norm: f64 = problem.datasets.iter().flat_map(|(d, _)| d.magnitude.iter()).map(|m| m * m).sum::<f64>().sqrt();

    let x0 = resonator_prescan(&problem, x0);
    let mut method = problem.options.method;
    let mut outcome = match method {
        Method::LevenbergMarquardt => levenberg_marquardt(&problem, &x0, &lower, data_norm),
        Method::NelderMead => nelder_mead(&problem, &x0, &lower, 40_000),
    };
    let mut iterations = outcome.iterations;
    let check = |x: &[f64]| -> Option<(DMatrix<f64>, Vec<f64>, bool)> {
        let jac = jacobian(&problem, x, &lower)?;
        let r = problem.residuals(x);
        let ok = converged(&problem, &jac, &r, x, &lower, data_norm);
        Some((jac, r, ok))
    };
    let mut state = if outcome.jacobian_failed { None } else { check(&outcome.x) };
    let needs_fallback = !matches!(state, Some((_, _, true)));
    if needs_fallback && problem.options.fallback && method == Method::LevenbergMarquardt {
        log::info!("derivative-based fit stalled; retrying with the simplex");
        let nm = nelder_mead(&problem, &outcome.x, &lower, 40_000);
        iterations += nm.iterations;
        method = Method::NelderMead;
        let polished = levenberg_marquardt(&problem, &nm.x, &lower, data_norm);
        iterations += polished.iterations;
        outcome = if !polished.jacobian_failed && cost(&problem.residuals(&polished.x)) <= cost(&problem.residuals(&nm.x)) { polished } else { nm };
        state = check(&outcome.x);
    }
    let Some((jac, r, ok)) = state else {
        return Err(Error::FitDidNotConverge("model Jacobian is not finite".into()));
    };
    let residual_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !residual_norm.is_finite() {
        return Err(Error::FitDidNotConverge("residual is not finite".into()));
    }
    let cosine = gradient_cosine(&jac, &r, &outcome.x, &lower);
    if !ok {
        return Err(Error::FitDidNotConverge(format!("gradient cosine {cosine:.3e} after {iterations} iterations")));
    }

    let m = r.len();
    let n = problem.free.len();
    let sigma2 = if m > n { residual_norm * residual_norm / (m - n) as f64 } else { 0.0 };
    let jtj = jac.transpose() * &jac;
    let inv = jtj.clone().pseudo_inverse(1e-14 * jtj.norm()).unwrap_or_else(|_| DMatrix::zeros(n, n));
    let covariance: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| sigma2 * inv[(a, b)] * problem.scale[problem.free[a] as usize] * problem.scale[problem.free[b] as usize])
                .collect()
        })
        .collect();
    let p = problem.physical(&outcome.x);
    let free: Vec<FittedValue> = problem
        .free
        .iter()
        .enumerate()
        .map(|(k, &s)| FittedValue { name: s.name().to_string(), value: p[s as usize], std_error: covariance[k][k].max(0.0).sqrt() })
        .collect();

    let mut params = problem.params(&p);
    let mut chi_std_error = None;
    if let Some(ie) = problem.free.iter().position(|&s| s == Slot::OmegaRe) {
        let ig = problem.free.iter().position(|&s| s == Slot::OmegaRg).expect("ground resonator slot is always free");
        let (wg, we) = (p[Slot::OmegaRg as usize], p[Slot::OmegaRe as usize]);
        params.omega_r = 0.5 * (wg + we);
        params.chi = Some(0.5 * (we - wg));
        let var = 0.25 * (covariance[ig][ig] + covariance[ie][ie] - 2.0 * covariance[ig][ie]);
        chi_std_error = Some(var.max(0.0).sqrt());
    }
    Ok(FitResult {
        params,
        chi_std_error,
        free,
        covariance,
        amplitude: Complex64::from_polar(p[Slot::Amplitude as usize], p[Slot::Phase as usize]),
        baseline_slope: p[Slot::Slope as usize],
        residual_norm,
        gradient_cosine: cosine,
        converged: ok,
        iterations,
        method,
    })
}

/// Fits one spectrum. The fitted `omega_r` is the resonator frequency for
/// whichever qubit state the data was taken in.
pub fn fit_s21(data: &SpectrumData, feedline: &FeedlineSpec, initial: &FitParameters, options: &FitOptions) -> Result<FitResult> {
    solve(Problem::new(vec![(data, Slot::OmegaRg)], feedline, initial, None, *options)?)
}

/// Joint fit of ground and excited spectra sharing every parameter except
/// the resonator frequency. Reports the mean resonator frequency and
/// `χ = (ω_e − ω_g)/2`.
pub fn fit_dispersive_shift(
    data_g: &SpectrumData,
    data_e: &SpectrumData,
    feedline: &FeedlineSpec,
    initial: &FitParameters,
    options: &FitOptions,
) -> Result<FitResult> {
    let chi0 = initial.chi.unwrap_or(0.0);
    let mut guess = *initial;
    guess.omega_r = initial.omega_r - chi0;
    solve(Problem::new(
        vec![(data_g, Slot::OmegaRg), (data_e, Slot::OmegaRe)],
        feedline,
        &guess,
        Some(initial.omega_r + chi0),
        *options,
    )?)
}

/// Heuristic starting point for `fit_s21` from an `S21` magnitude trace.
///
/// The filter appears as a broad dip whose half-power points give its
/// linewidth; the resonator shows up as a transmission peak inside it. The
/// coupling is then picked by a one-dimensional search.
pub fn initial_guess_from_spectrum(data: &SpectrumData, feedline: &FeedlineSpec) -> Result<FitParameters> {
    data.validate()?;
    if data.source != SpectrumSource::S21 {
        return Err(Error::invalid("initial guesses are derived from feedline transmission spectra"));
    }
    let w = &data.omega_d;
    let m = &data.magnitude;
    let n = m.len();
    let top = m.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return Err(Error::NoDip);
    }
    let power: Vec<f64> = m.iter().map(|v| (v / top).powi(2)).collect();
    let deep: Vec<bool> = power.iter().map(|&p| p <= 0.5).collect();

    // Runs of points below half power.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut k = 0;
    while k < n {
        if deep[k] {
            let start = k;
            while k < n && deep[k] {
                k += 1;
            }
            runs.push((start, k - 1));
        } else {
            k += 1;
        }
    }
    let interior: Vec<(usize, usize)> = runs.into_iter().filter(|&(a, b)| a > 0 && b < n - 1).collect();
    if interior.is_empty() {
        return Err(Error::NoDip);
    }
    // Merge runs split by a peak narrower than the runs around it.
    let mut dips: Vec<(usize, usize)> = Vec::new();
    for run in interior {
        if let Some(last) = dips.last_mut() {
            let gap = w[run.0] - w[last.1];
            let widths = (w[last.1] - w[last.0]).max(w[run.1] - w[run.0]);
            if gap < widths {
                last.1 = run.1;
                continue;
            }
        }
        dips.push(run);
    }
    let middle = 0.5 * (w[0] + w[n - 1]);
    let crossing = |i: usize, j: usize| -> f64 {
        // Linear interpolation of the half-power crossing between samples i and j.
        let (pi, pj) = (power[i], power[j]);
        if (pj - pi).abs() < 1e-300 {
            w[i]
        } else {
            w[i] + (0.5 - pi) / (pj - pi) * (w[j] - w[i])
        }
    };
    let edges: Vec<(f64, f64, usize, usize)> = dips.iter().map(|&(a, b)| (crossing(a - 1, a), crossing(b, b + 1), a, b)).collect();
    if edges.len() > 1 {
        log::warn!("{} dips in the spectrum; using the one nearest the window centre", edges.len());
    }
    let &(lo, hi, a, b) = edges
        .iter()
        .min_by(|x, y| (0.5 * (x.0 + x.1) - middle).abs().total_cmp(&(0.5 * (y.0 + y.1) - middle).abs()))
        .expect("at least one dip");
    let omega_p = 0.5 * (lo + hi);
    let kappa_p = hi - lo;
    if !(kappa_p > 0.0) {
        return Err(Error::NoDip);
    }

    // Highest local maximum strictly inside the dip.
    let omega_r = (a + 1..b)
        .filter(|&i| m[i] >= m[i - 1] && m[i] >= m[i + 1])
        .max_by(|&i, &j| m[i].total_cmp(&m[j]))
        .map(|i| w[i])
        .unwrap_or(w[(a..=b).min_by(|&i, &j| m[i].total_cmp(&m[j])).unwrap()]);

    let mut guess = FitParameters { omega_p, omega_r, kappa_p, j: 0.0, kappa_b: 0.0, gamma_a: 0.0, gamma_b: 0.0, chi: None };
    let misfit = |j: f64| -> f64 {
        let mut trial = guess;
        trial.j = j;
        let line = trial.line_model(feedline, omega_r);
        let model: Vec<f64> = w.iter().map(|&x| line.s21_normalized(x).norm()).collect();
        let den: f64 = model.iter().map(|v| v * v).sum();
        let amp = if den > 0.0 { model.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / den } else { 0.0 };
        model.iter().zip(m).map(|(a, b)| (amp * a - b).powi(2)).sum()
    };
    let grid = 240;
    let (lo_j, hi_j) = (0.01 * kappa_p, 1.5 * kappa_p);
    guess.j = (0..=grid)
        .map(|i| lo_j * (hi_j / lo_j).powf(i as f64 / grid as f64))
        .min_by(|x, y| misfit(*x).total_cmp(&misfit(*y)))
        .expect("non-empty grid");
    Ok(guess)
}
