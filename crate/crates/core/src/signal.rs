//! Matched filters, single-shot histogram analysis and the readout error
//! budget.
//!
//! Integrated signals are expressed in units of the single-shot noise width:
//! a filter applied to pure output noise yields a unit-variance Gaussian.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::SQRT_2;

use crate::dynamics::FieldTrace;
use crate::{Error, Result};

/// Integration weights `conj(r_e − r_g)`, scaled for unit noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedFilter {
    pub weights: Vec<Complex64>,
    pub dt: f64,
    pub channel_omega: f64,
    /// `∫|r_e − r_g|² dt` of the traces the filter was built from.
    pub separation_energy: f64,
}

/// Variance of `Re ∫ w ξ dt` per unit `∫|w|² dt` for the output noise.
const NOISE_DENSITY: f64 = 0.5;

impl MatchedFilter {
    pub fn build(trace_g: &FieldTrace, trace_e: &FieldTrace) -> Result<Self> {
        if trace_g.len() != trace_e.len() || trace_g.dt != trace_e.dt || trace_g.carrier_omega != trace_e.carrier_omega {
            return Err(Error::GridMismatch("matched filter needs traces on a shared grid".into()));
        }
        let diff: Vec<Complex64> = trace_e.output.iter().zip(&trace_g.output).map(|(e, g)| e - g).collect();
        let energy: f64 = diff.iter().map(|z| z.norm_sqr()).sum::<f64>() * trace_g.dt;
        let scale: f64 = trace_g.output.iter().chain(&trace_e.output).map(|z| z.norm_sqr()).sum::<f64>() * trace_g.dt;
        if !(energy > 1e-24 * scale) || energy == 0.0 {
            return Err(Error::NoStateInformation);
        }
        let norm = (NOISE_DENSITY * energy).sqrt();
        Ok(MatchedFilter {
            weights: diff.iter().map(|z| z.conj() / norm).collect(),
            dt: trace_g.dt,
            channel_omega: trace_g.carrier_omega,
            separation_energy: energy,
        })
    }

    /// Noise-free integrated signal of an output field record.
    pub fn integrate(&self, field: &[Complex64]) -> f64 {
        self.weights.iter().zip(field).map(|(w, r)| (w * r).re).sum::<f64>() * self.dt
    }

    /// Separation of the mean ground and excited signals at unit efficiency.
    pub fn ideal_snr(&self) -> f64 {
        (self.separation_energy / NOISE_DENSITY).sqrt()
    }

    /// Running share of the final separation accumulated up to each sample.
    pub fn separation_profile(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().map(|w| w.norm_sqr()).sum();
        let mut acc = 0.0;
        self.weights
            .iter()
            .map(|w| {
                acc += w.norm_sqr();
                acc / total
            })
            .collect()
    }

    /// First time at which half the separation has been collected.
    pub fn half_separation_time(&self) -> f64 {
        let idx = self.separation_profile().iter().position(|c| *c >= 0.5).unwrap_or(0);
        idx as f64 * self.dt
    }
}

pub fn build_matched_filter(trace_g: &FieldTrace, trace_e: &FieldTrace) -> Result<MatchedFilter> {
    MatchedFilter::build(trace_g, trace_e)
}

/// Best achievable SNR for arbitrary `weights` on the same traces, optimising
/// only the global phase of the weights.
pub fn snr_with_weights(weights: &[Complex64], trace_g: &FieldTrace, trace_e: &FieldTrace) -> f64 {
    let dt = trace_g.dt;
    let overlap: Complex64 =
        weights.iter().zip(trace_e.output.iter().zip(&trace_g.output)).map(|(w, (e, g))| w * (e - g)).sum::<Complex64>() * dt;
    let power: f64 = weights.iter().map(|w| w.norm_sqr()).sum::<f64>() * dt;
    if power == 0.0 {
        return 0.0;
    }
    overlap.norm() / (NOISE_DENSITY * power).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramFit {
    pub mu_g: f64,
    pub mu_e: f64,
    pub sigma: f64,
    pub weight_g: f64,
    pub weight_e: f64,
    /// The data did not support two components; both means hold the merged
    /// mean and `weight_g = 1`.
    pub degenerate: bool,
}

/// Joint fit of the two preparations with shared means and width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointHistogramFit {
    pub mu_g: f64,
    pub mu_e: f64,
    pub sigma: f64,
    /// Excited-component weight for the unflipped preparation.
    pub excited_weight_0: f64,
    /// Excited-component weight for the π preparation.
    pub excited_weight_pi: f64,
    pub degenerate: bool,
}

impl JointHistogramFit {
    pub fn as_histogram(&self) -> HistogramFit {
        HistogramFit {
            mu_g: self.mu_g,
            mu_e: self.mu_e,
            sigma: self.sigma,
            weight_g: 1.0 - self.excited_weight_pi,
            weight_e: self.excited_weight_pi,
            degenerate: self.degenerate,
        }
    }
}

pub fn snr_from_histogram(fit: &HistogramFit) -> f64 {
    (fit.mu_e - fit.mu_g) / fit.sigma
}

/// Probability mass of one Gaussian beyond the midpoint, `½ erfc(SNR/(2√2))`.
pub fn overlap_error(snr: f64) -> f64 {
    0.5 * erfc(snr.abs() / (2.0 * SQRT_2))
}

/// Largest excess over unity tolerated before an efficiency is declared
/// unphysical.
pub const EFFICIENCY_TOLERANCE: f64 = 0.02;

/// `η = SNR²/(4Γτ)`.
pub fn measurement_efficiency(snr: f64, gamma_ii: f64, tau_m: f64) -> Result<f64> {
    if !(gamma_ii > 0.0 && tau_m > 0.0) {
        return Err(Error::invalid("dephasing rate and measurement time must be positive"));
    }
    let eta = snr * snr / (4.0 * gamma_ii * tau_m);
    if eta > 1.0 + EFFICIENCY_TOLERANCE {
        return Err(Error::UnphysicalEfficiency(eta));
    }
    Ok(eta)
}

/// Samples binned finely enough that binned likelihoods match the raw ones.
struct Binned {
    centers: Vec<f64>,
    counts: Vec<f64>,
    total: f64,
}

const BINS: usize = 4096;

fn bin_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, (hi - lo) / BINS as f64)
    } else {
        (lo - 0.5, 1.0 / BINS as f64)
    }
}

fn bin(samples: &[f64], lo: f64, width: f64) -> Binned {
    let mut counts = vec![0.0; BINS];
    for &s in samples {
        let k = (((s - lo) / width) as isize).clamp(0, BINS as isize - 1) as usize;
        counts[k] += 1.0;
    }
    Binned { centers: (0..BINS).map(|k| lo + (k as f64 + 0.5) * width).collect(), counts, total: samples.len() as f64 }
}

fn moments(b: &Binned) -> (f64, f64) {
    let mean = b.centers.iter().zip(&b.counts).map(|(x, c)| x * c).sum::<f64>() / b.total;
    let var = b.centers.iter().zip(&b.counts).map(|(x, c)| c * (x - mean).powi(2)).sum::<f64>() / b.total;
    (mean, var)
}

fn normal_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Shared-width two-component EM over one or more binned sets, each with its
/// own mixture weight. Returns `(mu_g, mu_e, sigma, excited weights, loglik)`.
fn em_shared(sets: &[&Binned], mut mu: (f64, f64), mut sigma: f64, mut w: Vec<f64>) -> (f64, f64, f64, Vec<f64>, f64) {
    let mut loglik = f64::NEG_INFINITY;
    for _ in 0..2000 {
        let mut s0 = 0.0;
        let mut s0x = 0.0;
        let mut s1 = 0.0;
        let mut s1x = 0.0;
        let mut sq = 0.0;
        let mut total = 0.0;
        let mut ll = 0.0;
        let mut new_w = Vec::with_capacity(sets.len());
        let mut resp = Vec::with_capacity(sets.len());
        for (set, &we) in sets.iter().zip(&w) {
            let mut r_set = Vec::with_capacity(BINS);
            let mut set_e = 0.0;
            for (&x, &c) in set.centers.iter().zip(&set.counts) {
                if c == 0.0 {
                    r_set.push(0.0);
                    continue;
                }
                let lg = (1.0 - we).ln() + normal_logpdf(x, mu.0, sigma);
                let le = we.ln() + normal_logpdf(x, mu.1, sigma);
                let m = lg.max(le);
                let norm = m + ((lg - m).exp() + (le - m).exp()).ln();
                ll += c * norm;
                let r = (le - norm).exp();
                r_set.push(r);
                set_e += c * r;
                s1 += c * r;
                s1x += c * r * x;
                s0 += c * (1.0 - r);
                s0x += c * (1.0 - r) * x;
                total += c;
            }
            new_w.push((set_e / set.total).clamp(1e-12, 1.0 - 1e-12));
            resp.push(r_set);
        }
        let new_mu = (if s0 > 0.0 { s0x / s0 } else { mu.0 }, if s1 > 0.0 { s1x / s1 } else { mu.1 });
        for (set, r_set) in sets.iter().zip(&resp) {
            for ((&x, &c), &r) in set.centers.iter().zip(&set.counts).zip(r_set) {
                sq += c * ((1.0 - r) * (x - new_mu.0).powi(2) + r * (x - new_mu.1).powi(2));
            }
        }
        let new_sigma = (sq / total).sqrt().max(1e-300);
        let converged = (ll - loglik).abs() <= 1e-10 * ll.abs().max(1.0);
        mu = new_mu;
        sigma = new_sigma;
        w = new_w;
        loglik = ll;
        if converged {
            break;
        }
    }
    (mu.0, mu.1, sigma, w, loglik)
}

/// Two-means split used to seed EM.
fn seed_means(b: &Binned) -> (f64, f64) {
    let (mean, var) = moments(b);
    let sd = var.sqrt();
    let mut mu = (mean - sd, mean + sd);
    for _ in 0..100 {
        let cut = 0.5 * (mu.0 + mu.1);
        let (mut n0, mut x0, mut n1, mut x1) = (0.0, 0.0, 0.0, 0.0);
        for (&x, &c) in b.centers.iter().zip(&b.counts) {
            if x < cut {
                n0 += c;
                x0 += c * x;
            } else {
                n1 += c;
                x1 += c * x;
            }
        }
        let next = (if n0 > 0.0 { x0 / n0 } else { mu.0 }, if n1 > 0.0 { x1 / n1 } else { mu.1 });
        if next == mu {
            break;
        }
        mu = next;
    }
    mu
}

fn single_loglik(b: &Binned, mean: f64, sd: f64) -> f64 {
    b.centers.iter().zip(&b.counts).filter(|(_, c)| **c > 0.0).map(|(x, c)| c * normal_logpdf(*x, mean, sd)).sum()
}

/// Bayesian information criterion prefers the single Gaussian, or the two
/// components are too close to be told apart.
fn is_degenerate(ll_single: f64, ll_double: f64, extra_params: f64, n: f64, mu: (f64, f64), sigma: f64) -> bool {
    let bic_single = -2.0 * ll_single;
    let bic_double = -2.0 * ll_double + extra_params * n.ln();
    bic_double >= bic_single || (mu.1 - mu.0).abs() < 0.1 * sigma
}

/// Maximum-likelihood two-Gaussian fit with a shared width. The lower mean is
/// labelled ground.
pub fn fit_double_gaussian(samples: &[f64]) -> Result<HistogramFit> {
    if samples.len() < 2 {
        return Err(Error::invalid("double-Gaussian fit needs at least two samples"));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (start, width) = bin_range(lo, hi);
    let b = bin(samples, start, width);
    let (mean, var) = moments(&b);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(HistogramFit { mu_g: mean, mu_e: mean, sigma: width, weight_g: 1.0, weight_e: 0.0, degenerate: true });
    }
    let mu0 = seed_means(&b);
    let (mu_g, mu_e, sigma, w, ll) = em_shared(&[&b], mu0, sd * 0.5, vec![0.5]);
    let ll_single = single_loglik(&b, mean, sd);
    if !ll.is_finite() {
        return Err(Error::FitDidNotConverge("double-Gaussian likelihood is not finite".into()));
    }
    if is_degenerate(ll_single, ll, 2.0, b.total, (mu_g, mu_e), sigma) || w[0] < 1e-4 || w[0] > 1.0 - 1e-4 {
        return Ok(HistogramFit { mu_g: mean, mu_e: mean, sigma: sd, weight_g: 1.0, weight_e: 0.0, degenerate: true });
    }
    let (mu_g, mu_e, we) = if mu_g <= mu_e { (mu_g, mu_e, w[0]) } else { (mu_e, mu_g, 1.0 - w[0]) };
    Ok(HistogramFit { mu_g, mu_e, sigma, weight_g: 1.0 - we, weight_e: we, degenerate: false })
}

/// Simultaneous fit of both preparations: shared means and width, separate
/// weights. The ground component is the one dominating `samples_0`.
pub fn fit_double_gaussian_joint(samples_0: &[f64], samples_pi: &[f64]) -> Result<JointHistogramFit> {
    if samples_0.len() < 2 || samples_pi.len() < 2 {
        return Err(Error::invalid("joint fit needs samples for both preparations"));
    }
    let all = samples_0.iter().chain(samples_pi);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let (start, width) = bin_range(lo, hi);
    let b0 = bin(samples_0, start, width);
    let b1 = bin(samples_pi, start, width);
    let (m0, v0) = moments(&b0);
    let (m1, v1) = moments(&b1);
    let pooled = ((v0 * b0.total + v1 * b1.total) / (b0.total + b1.total)).sqrt();
    if pooled == 0.0 && m0 == m1 {
        return Ok(JointHistogramFit { mu_g: m0, mu_e: m0, sigma: width, excited_weight_0: 0.0, excited_weight_pi: 0.0, degenerate: true });
    }
    let sigma0 = pooled.max(width);
    let (mu_g, mu_e, sigma, w, ll) = em_shared(&[&b0, &b1], (m0, m1), sigma0, vec![0.1, 0.9]);
    if !ll.is_finite() {
        return Err(Error::FitDidNotConverge("joint double-Gaussian likelihood is not finite".into()));
    }
    let mut merged = Binned { centers: b0.centers.clone(), counts: b0.counts.clone(), total: b0.total + b1.total };
    for (c, d) in merged.counts.iter_mut().zip(&b1.counts) {
        *c += d;
    }
    let (mean, var) = moments(&merged);
    let ll_single = single_loglik(&merged, mean, var.sqrt());
    if is_degenerate(ll_single, ll, 3.0, merged.total, (mu_g, mu_e), sigma) {
        return Ok(JointHistogramFit {
            mu_g: mean,
            mu_e: mean,
            sigma: var.sqrt(),
            excited_weight_0: 0.0,
            excited_weight_pi: 0.0,
            degenerate: true,
        });
    }
    let (mu_g, mu_e, w0, w1) = if w[0] <= 0.5 { (mu_g, mu_e, w[0], w[1]) } else { (mu_e, mu_g, 1.0 - w[0], 1.0 - w[1]) };
    Ok(JointHistogramFit { mu_g, mu_e, sigma, excited_weight_0: w0, excited_weight_pi: w1, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    /// Signals strictly above the threshold are assigned `e`.
    pub threshold: f64,
    pub p_cor: f64,
    pub p_e_given_0: f64,
    pub p_g_given_pi: f64,
}

/// Assignment probabilities for a fixed threshold.
pub fn evaluate_threshold(samples_0: &[f64], samples_pi: &[f64], threshold: f64) -> Result<ThresholdResult> {
    if samples_0.is_empty() || samples_pi.is_empty() {
        return Err(Error::invalid("threshold evaluation needs samples for both preparations"));
    }
    let e0 = samples_0.iter().filter(|s| **s > threshold).count() as f64 / samples_0.len() as f64;
    let g1 = samples_pi.iter().filter(|s| **s <= threshold).count() as f64 / samples_pi.len() as f64;
    Ok(ThresholdResult { threshold, p_cor: 1.0 - 0.5 * (e0 + g1), p_e_given_0: e0, p_g_given_pi: g1 })
}

/// Threshold maximising `[P(g|0) + P(e|π)]/2`, searched over midpoints of the
/// sorted pooled samples. Ties resolve to the lowest such midpoint.
pub fn optimize_threshold(samples_0: &[f64], samples_pi: &[f64]) -> Result<ThresholdResult> {
    if samples_0.is_empty() || samples_pi.is_empty() {
        return Err(Error::invalid("threshold optimisation needs samples for both preparations"));
    }
    if samples_0.iter().chain(samples_pi).any(|s| !s.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let n0 = samples_0.len() as f64;
    let n1 = samples_pi.len() as f64;
    let mut pooled: Vec<(f64, bool)> = samples_0.iter().map(|&s| (s, false)).chain(samples_pi.iter().map(|&s| (s, true))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Threshold below everything: every shot assigned e.
    let mut g0 = 0.0;
    let mut g1 = 0.0;
    let mut best = (0.5 * (0.0 / n0 + 1.0), pooled[0].0 - 1.0);
    let mut k = 0;
    while k < pooled.len() {
        let value = pooled[k].0;
        while k < pooled.len() && pooled[k].0 == value {
            if pooled[k].1 {
                g1 += 1.0;
            } else {
                g0 += 1.0;
            }
            k += 1;
        }
        let cut = if k < pooled.len() { 0.5 * (value + pooled[k].0) } else { value + 1.0 };
        let p = 0.5 * (g0 / n0 + 1.0 - g1 / n1);
        if p > best.0 {
            best = (p, cut);
        }
    }
    evaluate_threshold(samples_0, samples_pi, best.1)
}

/// Split of the assignment infidelity `1 − P_cor` into overlap, mixing and
/// decay. Each preparation contributes half of its error to `1 − P_cor`,
/// so the mixing and decay shares carry that factor too.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub overlap: f64,
    pub mixing: f64,
    pub decay: f64,
    pub total: f64,
}

pub fn error_budget(snr: f64, assignment: &ThresholdResult) -> ErrorBudget {
    let overlap = overlap_error(snr);
    ErrorBudget {
        overlap,
        mixing: 0.5 * (assignment.p_e_given_0 - overlap),
        decay: 0.5 * (assignment.p_g_given_pi - overlap),
        total: 1.0 - assignment.p_cor,
    }
}

/// Small-error estimate of the decay contribution to `P(g|π)`: the chance
/// of decaying before the signal-weighted midpoint of the record.
pub fn analytic_decay_error(pre_readout_delay: f64, half_separation_time: f64, t1: f64) -> f64 {
    -(-(pre_readout_delay + half_separation_time) / t1).exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::QubitState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use statrs::function::erf::erfc_inv;

    fn gaussian(n: usize, mu: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mu, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    fn mixture(n: usize, mu_g: f64, mu_e: f64, weight_e: f64, seed: u64) -> Vec<f64> {
        let n_e = (n as f64 * weight_e).round() as usize;
        let mut v = gaussian(n - n_e, mu_g, seed);
        v.extend(gaussian(n_e, mu_e, seed + 1));
        v
    }

    fn synthetic_trace(output: Vec<Complex64>, state: QubitState) -> FieldTrace {
        let n = output.len();
        FieldTrace {
            dt: 1e-9,
            t: (0..n).map(|k| k as f64 * 1e-9).collect(),
            a: vec![Complex64::new(0.0, 0.0); n],
            b: vec![Complex64::new(0.0, 0.0); n],
            reflected: vec![Complex64::new(0.0, 0.0); n],
            output,
            qubit_state: state,
            carrier_omega: 0.0,
        }
    }

    fn ramp_pair(phase: f64) -> (FieldTrace, FieldTrace) {
        let rot = Complex64::from_polar(1.0, phase);
        let g: Vec<Complex64> = (0..200).map(|k| rot * Complex64::new(1.0, 0.0) * (k as f64 / 200.0)).collect();
        let e: Vec<Complex64> = (0..200).map(|k| rot * Complex64::new(0.8, 0.3 * (k as f64 / 40.0).sin()) * (k as f64 / 200.0)).collect();
        (synthetic_trace(g, QubitState::Ground), synthetic_trace(e, QubitState::Excited))
    }

    #[test]
    fn identical_traces_carry_no_information() {
        let (g, _) = ramp_pair(0.0);
        assert!(matches!(MatchedFilter::build(&g, &g), Err(Error::NoStateInformation)));
    }

    #[test]
    fn matched_filter_separation_equals_ideal_snr() {
        let (g, e) = ramp_pair(0.3);
        let f = MatchedFilter::build(&g, &e).unwrap();
        let sep = f.integrate(&e.output) - f.integrate(&g.output);
        assert!((sep - f.ideal_snr()).abs() < 1e-12 * sep);
        // Unit noise: ∫|w|² dt · ½ = 1.
        let power: f64 = f.weights.iter().map(|w| w.norm_sqr()).sum::<f64>() * f.dt;
        assert!((NOISE_DENSITY * power - 1.0).abs() < 1e-12);
    }

    #[test]
    fn snr_is_phase_covariant_and_beats_boxcar() {
        let (g, e) = ramp_pair(0.0);
        let (g2, e2) = ramp_pair(1.3);
        let a = MatchedFilter::build(&g, &e).unwrap().ideal_snr();
        let b = MatchedFilter::build(&g2, &e2).unwrap().ideal_snr();
        assert!((a - b).abs() < 1e-12 * a);
        let boxcar = vec![Complex64::new(1.0, 0.0); g.len()];
        assert!(snr_with_weights(&boxcar, &g, &e) < a);
    }

    #[test]
    fn snr_from_fit() {
        let fit = HistogramFit { mu_g: 1.0, mu_e: 1.0, sigma: 1.0, weight_g: 1.0, weight_e: 0.0, degenerate: true };
        assert_eq!(snr_from_histogram(&fit), 0.0);
        // ½ erfc(SNR/(2√2)) = 3.1 % inverted.
        let snr = 2.0 * SQRT_2 * erfc_inv(2.0 * 0.031);
        assert!((snr - 3.73).abs() < 0.01, "{snr}");
        assert!((overlap_error(snr) - 0.031).abs() < 1e-9);
    }

    #[test]
    fn efficiency_relation() {
        assert!((measurement_efficiency(2.0, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let full = measurement_efficiency(2.0, 2e7, 80e-9).unwrap();
        let half = measurement_efficiency(1.0, 2e7, 80e-9).unwrap();
        assert!((half - full / 4.0).abs() < 1e-15);
        assert!(matches!(measurement_efficiency(3.0, 1.0, 1.0), Err(Error::UnphysicalEfficiency(_))));
        // SNR and Γτ giving the tabulated Q2 efficiency.
        let gamma_tau: f64 = 5.0;
        let snr = (4.0 * 0.518 * gamma_tau).sqrt();
        assert!((measurement_efficiency(snr, gamma_tau / 80e-9, 80e-9).unwrap() - 0.518).abs() < 1e-12);
    }

    #[test]
    fn single_gaussian_is_degenerate() {
        let s = gaussian(50_000, 2.0, 7);
        let fit = fit_double_gaussian(&s).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.weight_g, 1.0);
        assert_eq!(fit.mu_g, fit.mu_e);
        assert!((fit.mu_g - 2.0).abs() < 0.02);
    }

    #[test]
    fn mixture_weights_recovered() {
        let s = mixture(1_000_000, 0.0, 4.0, 0.05, 11);
        let fit = fit_double_gaussian(&s).unwrap();
        assert!(!fit.degenerate);
        assert!((fit.weight_e - 0.05).abs() < 0.005, "{fit:?}");
        assert!((fit.sigma - 1.0).abs() < 0.01);
    }

    #[test]
    fn q2_like_overlap() {
        let snr = 2.0 * SQRT_2 * erfc_inv(2.0 * 0.031);
        let s0 = gaussian(200_000, 0.0, 3);
        let s1 = gaussian(200_000, snr, 4);
        let fit = fit_double_gaussian_joint(&s0, &s1).unwrap();
        let ov = overlap_error(snr_from_histogram(&fit.as_histogram()));
        assert!((ov - 0.031).abs() < 0.002, "{ov}");
    }

    #[test]
    fn symmetric_threshold_at_midpoint() {
        let s0 = gaussian(200_000, 0.0, 21);
        let s1 = gaussian(200_000, 3.0, 22);
        let r = optimize_threshold(&s0, &s1).unwrap();
        assert!((r.threshold - 1.5).abs() < 0.05, "{r:?}");
        for delta in [-0.1, 0.1] {
            let p = evaluate_threshold(&s0, &s1, r.threshold + delta).unwrap().p_cor;
            assert!(p <= r.p_cor + 2.0 / (200_000f64).sqrt());
        }
    }

    #[test]
    fn perfect_separation() {
        let r = optimize_threshold(&[0.0, 0.1, -0.2], &[5.0, 6.0]).unwrap();
        assert_eq!(r.p_cor, 1.0);
        assert!(r.threshold > 0.1 && r.threshold < 5.0);
        assert!(optimize_threshold(&[], &[1.0]).is_err());
    }

    #[test]
    fn budget_sums_to_infidelity() {
        let s0 = mixture(200_000, 0.0, 4.0, 0.01, 31);
        let s1 = mixture(200_000, 4.0, 0.0, 0.04, 33);
        let r = optimize_threshold(&s0, &s1).unwrap();
        let b = error_budget(4.0, &r);
        assert!((b.overlap + b.mixing + b.decay - b.total).abs() < 1e-12);
        let ideal = error_budget(1e3, &ThresholdResult { threshold: 0.0, p_cor: 1.0, p_e_given_0: 0.0, p_g_given_pi: 0.0 });
        assert_eq!((ideal.overlap, ideal.mixing, ideal.decay), (0.0, 0.0, 0.0));
    }
}
