//! Single-shot record synthesis for one or several multiplexed chains.
//!
//! Each shot runs through a herald, the preparation pulse, an optional delay
//! and the readout window. During the window each qubit follows a two-state
//! jump process (decay at `1/T1`, upward mixing at `mixing_rate`); the mean
//! integrated signal follows the qubit, switching between the ground and
//! excited responses at the jump times. Unit-variance Gaussian noise is then
//! added per channel.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{FeedlineSpec, QubitState, ReadoutChain};
use crate::dynamics::{auto_t_end, default_dt, simulate_response, FieldTrace, PulseSpec};
use crate::signal::MatchedFilter;
use crate::{Error, Result};

/// Per-qubit error channels of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitErrorModel {
    /// Measurement efficiency in `(0, 1]`.
    pub eta: f64,
    /// Energy relaxation time (s).
    pub t1: f64,
    /// Upward transition rate during the readout window (1/s).
    pub mixing_rate: f64,
    /// Thermal excited-state population before the herald.
    pub p_therm: f64,
}

impl QubitErrorModel {
    /// Unit efficiency, no decay, no mixing, no thermal population.
    pub fn ideal() -> Self {
        QubitErrorModel { eta: 1.0, t1: f64::INFINITY, mixing_rate: 0.0, p_therm: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::invalid(format!("efficiency must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.t1 > 0.0) {
            return Err(Error::invalid(format!("T1 must be positive, got {}", self.t1)));
        }
        if !(self.mixing_rate >= 0.0 && self.mixing_rate.is_finite()) {
            return Err(Error::invalid(format!("mixing rate must be >= 0, got {}", self.mixing_rate)));
        }
        if !(0.0..=1.0).contains(&self.p_therm) {
            return Err(Error::invalid(format!("thermal population must lie in [0, 1], got {}", self.p_therm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotGeneratorConfig {
    pub qubits: Vec<QubitErrorModel>,
    pub herald: bool,
    pub n_rep: usize,
    pub rng_seed: u64,
    /// Idle time between the preparation pulse and the readout (s).
    pub pre_readout_delay: f64,
}

impl ShotGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for q in &self.qubits {
            q.validate()?;
        }
        if !(self.pre_readout_delay >= 0.0) {
            return Err(Error::invalid("pre-readout delay must be >= 0"));
        }
        Ok(())
    }
}

/// Every preparation of `n` qubits in binary order, qubit 0 as the most
/// significant bit; `true` marks a π pulse.
pub fn all_preparations(n: usize) -> Vec<Vec<bool>> {
    (0..1usize << n).map(|r| index_to_bits(r, n)).collect()
}

pub fn index_to_bits(index: usize, n: usize) -> Vec<bool> {
    (0..n).map(|q| (index >> (n - 1 - q)) & 1 == 1).collect()
}

pub fn bits_to_index(bits: &[bool]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
}

/// Matched filters and running integrated signals for a set of chains read
/// out simultaneously on a common time grid.
#[derive(Debug, Clone)]
pub struct MultiplexedReadout {
    pub dt: f64,
    pub samples: usize,
    pub filters: Vec<MatchedFilter>,
    pub traces: Vec<(FieldTrace, FieldTrace)>,
    /// `cumulative[i][j][s][k]`: channel `i`'s integrated signal from chain
    /// `j` in state `s` over the first `k` samples.
    cumulative: Vec<Vec<[Vec<f64>; 2]>>,
}

impl MultiplexedReadout {
    /// Simulate every chain under its own pulse on a shared grid and build
    /// the per-channel matched filters.
    pub fn new(chains: &[ReadoutChain], feedline: &FeedlineSpec, pulses: &[PulseSpec]) -> Result<Self> {
        if chains.is_empty() || chains.len() != pulses.len() {
            return Err(Error::invalid(format!("{} chains but {} pulses", chains.len(), pulses.len())));
        }
        let mut dt: f64 = f64::INFINITY;
        let mut t_end: f64 = 0.0;
        for (c, p) in chains.iter().zip(pulses) {
            dt = dt.min(default_dt(c, feedline, p));
            t_end = t_end.max(auto_t_end(c, feedline, p)?);
        }
        let traces = chains
            .par_iter()
            .zip(pulses)
            .map(|(c, p)| {
                Ok((
                    simulate_response(c, feedline, p, QubitState::Ground, dt, t_end)?,
                    simulate_response(c, feedline, p, QubitState::Excited, dt, t_end)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let filters = traces.iter().map(|(g, e)| MatchedFilter::build(g, e)).collect::<Result<Vec<_>>>()?;
        let samples = traces[0].0.len();

        let cumulative = filters
            .par_iter()
            .map(|f| {
                traces
                    .iter()
                    .map(|(g, e)| {
                        let shift = g.carrier_omega - f.channel_omega;
                        [running_signal(f, &g.output, shift, dt), running_signal(f, &e.output, shift, dt)]
                    })
                    .collect()
            })
            .collect();
        Ok(MultiplexedReadout { dt, samples, filters, traces, cumulative })
    }

    pub fn channels(&self) -> usize {
        self.filters.len()
    }

    /// End of the simulated record (s).
    pub fn window(&self) -> f64 {
        (self.samples - 1) as f64 * self.dt
    }

    fn cum_at(&self, i: usize, j: usize, state: QubitState, t: f64) -> f64 {
        let c = &self.cumulative[i][j][state as usize];
        let x = (t / self.dt).clamp(0.0, (c.len() - 1) as f64);
        let k = (x.floor() as usize).min(c.len() - 2);
        let frac = x - k as f64;
        c[k] + frac * (c[k + 1] - c[k])
    }

    /// Noise-free signal of channel `i` at unit efficiency for chain `j`
    /// following `path`.
    pub fn mean_contribution(&self, i: usize, j: usize, path: &QubitPath) -> f64 {
        let mut total = 0.0;
        let mut state = path.initial;
        let mut start = 0.0;
        for &(t, next) in &path.jumps {
            total += self.cum_at(i, j, state, t) - self.cum_at(i, j, state, start);
            start = t;
            state = next;
        }
        total + self.cum_at(i, j, state, self.window() + self.dt) - self.cum_at(i, j, state, start)
    }

    /// Noise-free channel signal when every qubit stays in `states`.
    pub fn static_signal(&self, i: usize, states: &[QubitState]) -> f64 {
        states.iter().enumerate().map(|(j, &s)| self.mean_contribution(i, j, &QubitPath { initial: s, jumps: vec![] })).sum()
    }
}

/// `cum[k] = Re Σ_{m<k} w[m] r[m] e^{−iδ t_m} dt`.
fn running_signal(filter: &MatchedFilter, output: &[Complex64], shift: f64, dt: f64) -> Vec<f64> {
    let mut cum = Vec::with_capacity(output.len() + 1);
    let mut acc = 0.0;
    cum.push(0.0);
    for (k, (w, r)) in filter.weights.iter().zip(output).enumerate() {
        let rot = if shift == 0.0 { Complex64::new(1.0, 0.0) } else { Complex64::from_polar(1.0, -shift * k as f64 * dt) };
        acc += (w * r * rot).re * dt;
        cum.push(acc);
    }
    cum
}

/// Qubit state at the start of the readout window and the transitions
/// inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitPath {
    pub initial: QubitState,
    pub jumps: Vec<(f64, QubitState)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePath {
    /// Thermally excited before the herald.
    pub thermal: Vec<bool>,
    /// Decayed during the pre-readout delay.
    pub decayed_before_readout: Vec<bool>,
    pub readout: Vec<QubitPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub index: u64,
    /// Integrated signal per channel in units of the noise width.
    pub s: Vec<f64>,
    /// Preparation per qubit, `true` for a π pulse.
    pub prepared: Vec<bool>,
    pub herald_pass: bool,
    pub true_path: TruePath,
}

fn exponential(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

fn check_inputs(cfg: &ShotGeneratorConfig, readout: &MultiplexedReadout, preparations: &[Vec<bool>]) -> Result<()> {
    cfg.validate()?;
    let n = readout.channels();
    if cfg.qubits.len() != n {
        return Err(Error::invalid(format!("{} qubit error models for {} chains", cfg.qubits.len(), n)));
    }
    if let Some((row, p)) = preparations.iter().enumerate().find(|(_, p)| p.len() != n) {
        return Err(Error::invalid(format!("preparation {row} has {} labels for {} qubits", p.len(), n)));
    }
    Ok(())
}

/// Draw one shot. The generator is seeded per shot so any shot can be
/// reproduced independently of how the work is scheduled.
fn draw_shot(cfg: &ShotGeneratorConfig, readout: &MultiplexedReadout, prepared: &[bool], index: u64) -> ShotRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(index);
    let n = prepared.len();
    let window = readout.window();

    let thermal: Vec<bool> = cfg.qubits.iter().map(|q| rng.random::<f64>() < q.p_therm).collect();
    let herald_pass = !cfg.herald || !thermal.iter().any(|&t| t);

    let mut decayed_before_readout = vec![false; n];
    let mut paths = Vec::with_capacity(n);
    for q in 0..n {
        let model = &cfg.qubits[q];
        let start_excited = thermal[q] && !cfg.herald;
        let mut state = if start_excited ^ prepared[q] { QubitState::Excited } else { QubitState::Ground };
        if state == QubitState::Excited && cfg.pre_readout_delay > 0.0 && exponential(&mut rng, 1.0 / model.t1) < cfg.pre_readout_delay {
            state = QubitState::Ground;
            decayed_before_readout[q] = true;
        }
        let initial = state;
        let mut jumps = Vec::new();
        let mut t = 0.0;
        loop {
            let rate = match state {
                QubitState::Excited => 1.0 / model.t1,
                QubitState::Ground => model.mixing_rate,
            };
            t += exponential(&mut rng, rate);
            if t >= window {
                break;
            }
            state = match state {
                QubitState::Excited => QubitState::Ground,
                QubitState::Ground => QubitState::Excited,
            };
            jumps.push((t, state));
        }
        paths.push(QubitPath { initial, jumps });
    }

    let s = (0..n)
        .map(|i| {
            let mean: f64 = (0..n).map(|j| readout.mean_contribution(i, j, &paths[j])).sum();
            let noise: f64 = rng.sample(StandardNormal);
            cfg.qubits[i].eta.sqrt() * mean + noise
        })
        .collect();

    ShotRecord {
        index,
        s,
        prepared: prepared.to_vec(),
        herald_pass,
        true_path: TruePath { thermal, decayed_before_readout, readout: paths },
    }
}

/// `n_rep` shots per preparation, ordered by preparation then repetition.
pub fn generate_shots(cfg: &ShotGeneratorConfig, readout: &MultiplexedReadout, preparations: &[Vec<bool>]) -> Result<Vec<ShotRecord>> {
    check_inputs(cfg, readout, preparations)?;
    let n_rep = cfg.n_rep as u64;
    let total = preparations.len() as u64 * n_rep;
    Ok((0..total)
        .into_par_iter()
        .map(|idx| draw_shot(cfg, readout, &preparations[(idx / n_rep) as usize], idx))
        .collect())
}

/// Heralded signals of every channel for one preparation, without keeping
/// whole records. Rows are `signals[channel][shot]`.
pub fn generate_signals(cfg: &ShotGeneratorConfig, readout: &MultiplexedReadout, preparation: &[bool], first_index: u64) -> Result<Vec<Vec<f64>>> {
    check_inputs(cfg, readout, std::slice::from_ref(&preparation.to_vec()))?;
    let n = readout.channels();
    let kept: Vec<Vec<f64>> = (0..cfg.n_rep as u64)
        .into_par_iter()
        .filter_map(|k| {
            let shot = draw_shot(cfg, readout, preparation, first_index + k);
            shot.herald_pass.then_some(shot.s)
        })
        .collect();
    let mut out = vec![Vec::with_capacity(kept.len()); n];
    for s in kept {
        for (ch, v) in s.into_iter().enumerate() {
            out[ch].push(v);
        }
    }
    Ok(out)
}

/// Outcome histogram of one preparation row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowCounts {
    /// Indexed by assigned outcome, qubit 0 as most significant bit,
    /// `1` meaning excited.
    pub outcomes: Vec<u64>,
    pub heralded_out: u64,
}

/// Assign every heralded shot with per-channel thresholds and count joint
/// outcomes per preparation. Only integer counts cross threads, so the
/// result does not depend on scheduling.
pub fn generate_assignment_counts(
    cfg: &ShotGeneratorConfig,
    readout: &MultiplexedReadout,
    preparations: &[Vec<bool>],
    thresholds: &[f64],
) -> Result<Vec<RowCounts>> {
    check_inputs(cfg, readout, preparations)?;
    let n = readout.channels();
    if thresholds.len() != n {
        return Err(Error::invalid(format!("{} thresholds for {} channels", thresholds.len(), n)));
    }
    let n_rep = cfg.n_rep as u64;
    let outcomes = 1usize << n;
    preparations
        .iter()
        .enumerate()
        .map(|(row, prep)| {
            let first = row as u64 * n_rep;
            let (counts, out) = (0..n_rep)
                .into_par_iter()
                .fold(
                    || (vec![0u64; outcomes], 0u64),
                    |(mut counts, mut out), k| {
                        let shot = draw_shot(cfg, readout, prep, first + k);
                        if shot.herald_pass {
                            let idx = shot.s.iter().zip(thresholds).fold(0usize, |acc, (s, th)| (acc << 1) | (*s > *th) as usize);
                            counts[idx] += 1;
                        } else {
                            out += 1;
                        }
                        (counts, out)
                    },
                )
                .reduce(
                    || (vec![0u64; outcomes], 0u64),
                    |(mut a, oa), (b, ob)| {
                        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                        (a, oa + ob)
                    },
                );
            Ok(RowCounts { outcomes: counts, heralded_out: out })
        })
        .collect()
}

/// Small-rate estimate of the mixing rate that produces an upward error
/// probability `p_mix`: a transition counts once it happens before the
/// signal-weighted midpoint of the record.
pub fn mixing_rate_for_error(p_mix: f64, half_separation_time: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p_mix) || !(half_separation_time > 0.0) {
        return Err(Error::invalid("mixing error must lie in [0, 1) and the midpoint time must be positive"));
    }
    Ok(-(1.0 - p_mix).ln() / half_separation_time)
}
