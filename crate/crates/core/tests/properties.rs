#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;

use muxread::analysis::{correlation_from_counts, cross_fidelity, AssignmentMatrix};
use muxread::circuit::{effective_filter_params, FeedlineSpec, LineModel, ReadoutChain};
use muxread::config::DeviceConfig;
use muxread::dynamics::{crosstalk_dephasing_matrix, simulate_pair, PulseSpec};
use muxread::experiment::derive_seed;
use muxread::fitting::{fit_s21, FitOptions, FitParameters, SpectrumData, SpectrumSource};
use muxread::geometry::{boundary_residuals, solve_fundamental_mode, QuarterWaveGeometry};
use muxread::shots::{generate_signals, MultiplexedReadout, QubitErrorModel, RowCounts, ShotGeneratorConfig};
use muxread::units::{ff, ghz, mhz, ns};

fn chain(f_r: f64, f_p: f64, kappa_p: f64, j: f64, feedline: &FeedlineSpec) -> ReadoutChain {
    ReadoutChain {
        omega_p_bare: 0.0,
        kappa_p_bare: 0.0,
        omega_r: ghz(f_r),
        j: mhz(j),
        kappa_b: 0.0,
        gamma_a: 0.0,
        gamma_b: 0.0,
        chi: mhz(-2.0),
        g: mhz(110.0),
        omega_q: ghz(f_r - 1.0),
        t1: 6e-6,
        p_therm: 0.05,
    }
    .with_effective_filter(feedline, ghz(f_p), mhz(kappa_p))
}

fn counts_strategy(n_qubits: usize) -> impl Strategy<Value = Vec<RowCounts>> {
    let size = 1usize << n_qubits;
    prop::collection::vec(
        (prop::collection::vec(0u64..500, size), 0u64..50)
            .prop_filter("row needs shots", |(o, _)| o.iter().sum::<u64>() > 0)
            .prop_map(|(outcomes, heralded_out)| RowCounts { outcomes, heralded_out }),
        size,
    )
}

/// Swap qubit labels `a` and `b` in a bit-packed index of `n` qubits.
fn swap_bits(index: usize, n: usize, a: usize, b: usize) -> usize {
    let (sa, sb) = (n - 1 - a, n - 1 - b);
    let (ba, bb) = ((index >> sa) & 1, (index >> sb) & 1);
    if ba == bb {
        index
    } else {
        index ^ ((1 << sa) | (1 << sb))
    }
}

proptest! {
    #[test]
    fn reflection_stays_on_the_unit_disk(z0 in 1.0..200.0f64, c_in in 0.0..200.0f64, f in 1.0..12.0f64) {
        let line = FeedlineSpec::new(z0, ff(c_in)).unwrap();
        let gamma = line.reflection(ghz(f));
        prop_assert!(gamma.norm() <= 1.0 + 1e-12);
        let d = line.directionality(ghz(f));
        prop_assert!((0.5 - 1e-12..=1.0 + 1e-12).contains(&d));
    }

    #[test]
    fn effective_linewidths_stay_in_range(
        c_in in 0.0..80.0f64,
        f_r in 6.0..7.5f64,
        detuning in -30.0..30.0f64,
        kappa_p in 10.0..80.0f64,
        j in 0.0..15.0f64,
    ) {
        let line = FeedlineSpec::new(50.0, ff(c_in)).unwrap();
        let c = chain(f_r, f_r + detuning * 1e-3, kappa_p, j, &line);
        let eff = effective_filter_params(&c, &line);
        let lower = c.kappa_p_bare / 2.0 * (1.0 + eff.reflection.re);
        prop_assert!(eff.kappa_p_eff >= lower * (1.0 - 1e-9) && eff.kappa_p_eff <= c.kappa_p_bare * (1.0 + 1e-9));
        prop_assert!(eff.kappa_r_eff >= 0.0);
        prop_assert!(eff.kappa_r_eff <= eff.kappa_p_eff * (1.0 + 1e-9));
    }

    #[test]
    fn loaded_modes_satisfy_both_boundaries(
        x_frac in 0.05..0.95f64,
        c0 in 0.0..100.0f64,
        c_c in 0.0..30.0f64,
        d_mm in 3.0..6.0f64,
    ) {
        let (z0, v) = (50.0, 1.2e8);
        let d = d_mm * 1e-3;
        let geom = QuarterWaveGeometry::from_line(d, x_frac * d, ff(c0), ff(c_c), z0, v).unwrap();
        let sol = solve_fundamental_mode(&geom).unwrap();
        let (r1, r2) = boundary_residuals(&geom, sol.omega, sol.theta);
        prop_assert!(r1.abs() < 1e-10 && r2.abs() < 1e-10, "{r1} {r2}");
        prop_assert!(sol.omega > 0.0);
        prop_assert!(sol.omega <= geom.bare_omega() * (1.0 + 1e-12));
    }

    #[test]
    fn assignment_rows_are_stochastic(rows in counts_strategy(3)) {
        let m = AssignmentMatrix::from_counts(&rows).unwrap();
        for row in &m.probs {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        let f = cross_fidelity(&m);
        for (i, row) in f.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&m.p_cor(i)));
            for v in row {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(v));
            }
        }
    }

    #[test]
    fn correlation_is_symmetric_with_unit_diagonal(rows in counts_strategy(3)) {
        let c = correlation_from_counts(&rows).unwrap();
        for i in 0..3 {
            prop_assert_eq!(c[i][i], 1.0);
            for j in 0..3 {
                prop_assert_eq!(c[i][j], c[j][i]);
                prop_assert!(c[i][j].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn relabelling_qubits_permutes_the_matrices(rows in counts_strategy(3), a in 0usize..3, b in 0usize..3) {
        let n = 3;
        let mut swapped = rows.clone();
        for (r, row) in rows.iter().enumerate() {
            let target = &mut swapped[swap_bits(r, n, a, b)];
            target.heralded_out = row.heralded_out;
            for (s, &count) in row.outcomes.iter().enumerate() {
                target.outcomes[swap_bits(s, n, a, b)] = count;
            }
        }
        let perm = |q: usize| if q == a { b } else if q == b { a } else { q };
        let f = cross_fidelity(&AssignmentMatrix::from_counts(&rows).unwrap());
        let fs = cross_fidelity(&AssignmentMatrix::from_counts(&swapped).unwrap());
        let c = correlation_from_counts(&rows).unwrap();
        let cs = correlation_from_counts(&swapped).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((f[i][j] - fs[perm(i)][perm(j)]).abs() < 1e-12);
                prop_assert!((c[i][j] - cs[perm(i)][perm(j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeds_depend_on_every_field(seed in any::<u64>(), purpose in "[a-z]{1,8}", qubit in "Q[0-9]") {
        let base = derive_seed(seed, &purpose, &qubit);
        prop_assert_eq!(base, derive_seed(seed, &purpose, &qubit));
        prop_assert_ne!(base, derive_seed(seed.wrapping_add(1), &purpose, &qubit));
        prop_assert_ne!(base, derive_seed(seed, &format!("{purpose}x"), &qubit));
    }

    #[test]
    fn config_survives_a_json_round_trip(seed in any::<u64>(), n_rep in 1usize..1_000_000, photons in 0.0..50.0f64, herald in any::<bool>()) {
        let mut cfg = DeviceConfig::reference_device();
        cfg.generator.seed = seed;
        cfg.generator.n_rep = n_rep;
        cfg.generator.herald = herald;
        cfg.chains[1].readout.photons.0 = photons;
        let back = DeviceConfig::from_json_str(&cfg.to_json_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn traces_start_empty_on_a_uniform_grid(tau in 20.0..200.0f64, amp in 1e3..1e5f64) {
        let line = FeedlineSpec::new(50.0, ff(40.0)).unwrap();
        let c = chain(6.898, 6.898, 38.3, 8.7, &line);
        let pulse = PulseSpec::square(ns(tau), amp, ghz(6.891));
        let (g, e) = simulate_pair(&c, &line, &pulse).unwrap();
        for trace in [&g, &e] {
            prop_assert_eq!(trace.a[0].norm(), 0.0);
            prop_assert_eq!(trace.b[0].norm(), 0.0);
            for w in trace.t.windows(2) {
                prop_assert!(((w[1] - w[0]) / trace.dt - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dephasing_matrix_is_non_negative(spacing in 120.0..300.0f64, tau in 40.0..120.0f64) {
        let line = FeedlineSpec::new(50.0, ff(40.0)).unwrap();
        let f2 = 6.9 + spacing * 1e-3;
        let chains = [chain(6.9, 6.9, 38.0, 8.7, &line), chain(f2, f2, 38.0, 8.7, &line)];
        let pulses = [PulseSpec::square(ns(tau), 2e4, ghz(6.9)), PulseSpec::square(ns(tau), 2e4, ghz(f2))];
        let m = crosstalk_dephasing_matrix(&chains, &line, &pulses).unwrap();
        for j in 0..2 {
            let scale = m.gamma[j][j];
            for i in 0..2 {
                prop_assert!(m.gamma[i][j] >= -1e-9 * scale);
            }
            prop_assert!(m.gamma[j][j] > m.gamma[1 - j][j]);
        }
    }

    #[test]
    fn shots_are_reproducible_per_seed(seed in any::<u64>(), first in 0u64..1000) {
        let line = FeedlineSpec::new(50.0, ff(40.0)).unwrap();
        let c = chain(6.898, 6.898, 38.3, 8.7, &line);
        let pulse = PulseSpec::square(ns(80.0), 2e4, ghz(6.891));
        let readout = MultiplexedReadout::new(std::slice::from_ref(&c), &line, std::slice::from_ref(&pulse)).unwrap();
        let model = QubitErrorModel { eta: 0.5, t1: 6e-6, mixing_rate: 1e4, p_therm: 0.05 };
        let cfg = ShotGeneratorConfig { qubits: vec![model], herald: true, n_rep: 200, rng_seed: seed, pre_readout_delay: 0.0 };
        let a = generate_signals(&cfg, &readout, &[true], first).unwrap();
        let b = generate_signals(&cfg, &readout, &[true], first).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fit_is_invariant_to_overall_scale(scale in 0.05..20.0f64) {
        let line = FeedlineSpec::new(50.0, ff(40.0)).unwrap();
        let c = chain(6.898, 6.898, 38.3, 8.7, &line);
        let truth = FitParameters::from_chain(&c, &line, c.omega_r);
        let model: LineModel = truth.line_model(&line, truth.omega_r);
        let omegas: Vec<f64> = (0..401).map(|i| truth.omega_p + truth.kappa_p * (-4.0 + 8.0 * i as f64 / 400.0)).collect();
        let unit = SpectrumData::synthesize(&model, &omegas, SpectrumSource::S21).unwrap();
        let scaled = SpectrumData::new(omegas, unit.magnitude.iter().map(|m| m * scale).collect(), None, SpectrumSource::S21).unwrap();
        let guess = FitParameters { kappa_p: truth.kappa_p * 1.05, j: truth.j * 0.95, ..truth };
        let a = fit_s21(&unit, &line, &guess, &FitOptions::default()).unwrap();
        let b = fit_s21(&scaled, &line, &guess, &FitOptions::default()).unwrap();
        for (x, y) in [(a.params.kappa_p, b.params.kappa_p), (a.params.j, b.params.j), (a.params.omega_r, b.params.omega_r)] {
            prop_assert!((x / y - 1.0).abs() < 1e-6, "{x} {y}");
        }
        prop_assert!((b.amplitude.norm() / a.amplitude.norm() / scale - 1.0).abs() < 1e-6);
    }
}
