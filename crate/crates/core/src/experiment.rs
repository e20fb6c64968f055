//! End-to-end runs on a configured device: individual and multiplexed
//! single-shot readout, crosstalk dephasing and the combined report.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::analysis::{correlation_from_counts, cross_fidelity, AssignmentMatrix, ChainSummary, QubitReadoutSummary, ReadoutReport};
use crate::circuit::{critical_photon_number, effective_filter_params, effective_readout_linewidth, approx_readout_linewidth, purcell_t1_limit};
use crate::config::Device;
use crate::dynamics::{crosstalk_dephasing_matrix, integrated_dephasing, photon_number, PulseShape};
use crate::shots::{all_preparations, generate_assignment_counts, generate_signals, MultiplexedReadout, RowCounts, ShotGeneratorConfig};
use crate::signal::{
    analytic_decay_error, error_budget, fit_double_gaussian_joint, measurement_efficiency, optimize_threshold, snr_from_histogram,
    JointHistogramFit, ThresholdResult,
};
use crate::units::{to_ghz, to_mhz};
use crate::Result;

/// Stable 64-bit seed for one subsystem of a run.
pub fn derive_seed(seed: u64, purpose: &str, qubit: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update((qubit.len() as u64).to_le_bytes());
    h.update(qubit.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn chain_summaries(device: &Device) -> Result<Vec<ChainSummary>> {
    device
        .chains
        .iter()
        .zip(&device.names)
        .map(|(chain, name)| {
            let eff = effective_filter_params(chain, &device.feedline);
            let delta_q = chain.omega_q - chain.omega_r;
            Ok(ChainSummary {
                name: name.clone(),
                resonator_ghz: to_ghz(chain.omega_r),
                filter_ghz: to_ghz(eff.omega_p_eff),
                filter_linewidth_mhz: to_mhz(eff.kappa_p_eff),
                coupling_mhz: to_mhz(chain.j),
                readout_linewidth_mhz: to_mhz(effective_readout_linewidth(eff.kappa_p_eff, chain.j, eff.delta_ab)),
                readout_linewidth_approx_mhz: to_mhz(approx_readout_linewidth(eff.kappa_p_eff, chain.j, eff.delta_ab)),
                dispersive_shift_mhz: to_mhz(chain.chi),
                critical_photons: critical_photon_number(chain.g, chain.omega_q, chain.omega_r)?,
                purcell_t1_us: purcell_t1_limit(chain, &device.feedline, delta_q, true)? * 1e6,
                purcell_t1_unfiltered_us: purcell_t1_limit(chain, &device.feedline, delta_q, false)? * 1e6,
            })
        })
        .collect()
}

/// Signals and analysis of one qubit read out on its own.
#[derive(Debug, Clone)]
pub struct SingleQubitRun {
    pub summary: QubitReadoutSummary,
    pub fit: JointHistogramFit,
    pub threshold: ThresholdResult,
    pub signals_0: Vec<f64>,
    pub signals_pi: Vec<f64>,
}

/// Prepare qubit `k` in `0` and `π`, `n_rep` times each, and analyse the
/// heralded histograms.
pub fn single_qubit_run(device: &Device, k: usize, n_rep: usize, seed: u64) -> Result<SingleQubitRun> {
    let chain = &device.chains[k];
    let pulse = &device.pulses[k];
    let readout = MultiplexedReadout::new(std::slice::from_ref(chain), &device.feedline, std::slice::from_ref(pulse))?;
    let cfg = ShotGeneratorConfig {
        qubits: vec![device.generator.qubits[k]],
        herald: device.generator.herald,
        n_rep,
        rng_seed: seed,
        pre_readout_delay: device.generator.pre_readout_delay,
    };
    let signals_0 = generate_signals(&cfg, &readout, &[false], 0)?.swap_remove(0);
    let signals_pi = generate_signals(&cfg, &readout, &[true], n_rep as u64)?.swap_remove(0);
    let fit = fit_double_gaussian_joint(&signals_0, &signals_pi)?;
    let snr = snr_from_histogram(&fit.as_histogram());
    let threshold = optimize_threshold(&signals_0, &signals_pi)?;
    let filter = &readout.filters[0];
    let (trace_g, trace_e) = &readout.traces[0];
    let dephasing = integrated_dephasing(trace_g, trace_e, chain.chi)?;
    let efficiency_estimate = match measurement_efficiency(snr, dephasing / pulse.tau_p, pulse.tau_p) {
        Ok(eta) => Some(eta),
        Err(e) => {
            log::warn!("{}: {e}", device.names[k]);
            None
        }
    };
    let occupation = photon_number(trace_g).occupation_time.max(photon_number(trace_e).occupation_time);
    let summary = QubitReadoutSummary {
        name: device.names[k].clone(),
        threshold: threshold.threshold,
        snr,
        p_cor_individual: threshold.p_cor,
        p_cor_multiplexed: None,
        p_e_given_0: threshold.p_e_given_0,
        p_g_given_pi: threshold.p_g_given_pi,
        budget: error_budget(snr, &threshold),
        analytic_decay_error: analytic_decay_error(cfg.pre_readout_delay, filter.half_separation_time(), chain.t1),
        self_dephasing_per_s: dephasing / pulse.tau_p,
        efficiency_estimate,
        occupation_time_ns: occupation * 1e9,
    };
    Ok(SingleQubitRun { summary, fit, threshold, signals_0, signals_pi })
}

/// Joint outcome counts of all `2^N` preparations read out simultaneously.
pub fn multiplexed_counts(device: &Device, thresholds: &[f64], n_rep: usize, seed: u64) -> Result<Vec<RowCounts>> {
    let readout = MultiplexedReadout::new(&device.chains, &device.feedline, &device.pulses)?;
    let cfg = ShotGeneratorConfig { n_rep, rng_seed: seed, ..device.generator.clone() };
    generate_assignment_counts(&cfg, &readout, &all_preparations(device.chains.len()), thresholds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub n_rep_single: usize,
    pub n_rep_multiplexed: usize,
    pub dephasing: bool,
}

/// Everything the report covers, seeded from the device's generator seed.
pub fn build_report(device: &Device, options: &ReportOptions) -> Result<ReadoutReport> {
    let seed = device.generator.rng_seed;
    let chains = chain_summaries(device)?;
    let runs = (0..device.chains.len())
        .into_par_iter()
        .map(|k| single_qubit_run(device, k, options.n_rep_single, derive_seed(seed, "single", &device.names[k])))
        .collect::<Result<Vec<_>>>()?;
    let mut readout: Vec<QubitReadoutSummary> = runs.into_iter().map(|r| r.summary).collect();

    let (mut assignment, mut fidelity, mut correlation) = (None, None, None);
    if options.n_rep_multiplexed > 0 {
        let thresholds: Vec<f64> = readout.iter().map(|q| q.threshold).collect();
        let counts = multiplexed_counts(device, &thresholds, options.n_rep_multiplexed, derive_seed(seed, "multiplexed", ""))?;
        let matrix = AssignmentMatrix::from_counts(&counts)?;
        for (k, q) in readout.iter_mut().enumerate() {
            q.p_cor_multiplexed = Some(matrix.p_cor(k));
        }
        fidelity = Some(cross_fidelity(&matrix));
        correlation = Some(correlation_from_counts(&counts)?);
        assignment = Some(matrix);
    }

    let (mut square, mut filtered) = (None, None);
    if options.dephasing {
        square = Some(crosstalk_dephasing_matrix(&device.chains, &device.feedline, &device.pulses_with_shape(PulseShape::Square)?)?.gamma);
        filtered = Some(
            crosstalk_dephasing_matrix(&device.chains, &device.feedline, &device.pulses_with_shape(PulseShape::GaussianFilteredSquare)?)?
                .gamma,
        );
    }

    Ok(ReadoutReport {
        qubits: device.names.clone(),
        chains,
        readout,
        assignment,
        cross_fidelity: fidelity,
        correlation,
        dephasing_square: square,
        dephasing_filtered: filtered,
    })
}
