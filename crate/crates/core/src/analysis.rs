//! Multi-qubit assignment statistics: the joint assignment matrix, the
//! cross-fidelity matrix and the outcome correlation matrix, plus the report
//! that bundles them.

use serde::{Deserialize, Serialize};

use crate::shots::{bits_to_index, index_to_bits, RowCounts, ShotRecord};
use crate::signal::ErrorBudget;
use crate::{Error, Result};

/// Rows with fewer heralded shots than this are flagged as unreliable.
pub const MIN_SHOTS_PER_ROW: u64 = 1000;

/// `probs[ζ][s] = P(s|ζ)` for all preparations `ζ` and assignments `s`,
/// both in binary order with qubit 0 as the most significant bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    pub n_qubits: usize,
    pub probs: Vec<Vec<f64>>,
    pub n_per_row: Vec<u64>,
}

pub fn preparation_label(index: usize, n: usize) -> String {
    index_to_bits(index, n).iter().map(|&b| if b { 'π' } else { '0' }).collect()
}

pub fn outcome_label(index: usize, n: usize) -> String {
    index_to_bits(index, n).iter().map(|&b| if b { 'e' } else { 'g' }).collect()
}

impl AssignmentMatrix {
    pub fn from_counts(rows: &[RowCounts]) -> Result<Self> {
        let size = rows.len();
        if size == 0 || !size.is_power_of_two() {
            return Err(Error::invalid(format!("{size} preparation rows is not a power of two")));
        }
        let n_qubits = size.trailing_zeros() as usize;
        let mut probs = Vec::with_capacity(size);
        let mut n_per_row = Vec::with_capacity(size);
        for (row, r) in rows.iter().enumerate() {
            if r.outcomes.len() != size {
                return Err(Error::invalid(format!("row {row} has {} outcomes, expected {size}", r.outcomes.len())));
            }
            let n: u64 = r.outcomes.iter().sum();
            if n == 0 {
                return Err(Error::MissingPreparation(row));
            }
            if n < MIN_SHOTS_PER_ROW {
                log::warn!("preparation {} has only {n} heralded shots", preparation_label(row, n_qubits));
            }
            probs.push(r.outcomes.iter().map(|&c| c as f64 / n as f64).collect());
            n_per_row.push(n);
        }
        Ok(AssignmentMatrix { n_qubits, probs, n_per_row })
    }

    /// `P(s_i = e | ζ)` for one preparation row.
    pub fn p_excited(&self, row: usize, qubit: usize) -> f64 {
        let shift = self.n_qubits - 1 - qubit;
        self.probs[row].iter().enumerate().filter(|(s, _)| (s >> shift) & 1 == 1).map(|(_, p)| p).sum()
    }

    fn rows_with(&self, qubit: usize, pi: bool) -> impl Iterator<Item = usize> + '_ {
        let shift = self.n_qubits - 1 - qubit;
        (0..self.probs.len()).filter(move |r| ((r >> shift) & 1 == 1) == pi)
    }

    /// `P(e_i | 0_j)` averaged over every other qubit's preparation.
    pub fn p_e_given_0(&self, i: usize, j: usize) -> f64 {
        let rows: Vec<usize> = self.rows_with(j, false).collect();
        rows.iter().map(|&r| self.p_excited(r, i)).sum::<f64>() / rows.len() as f64
    }

    /// `P(g_i | π_j)` averaged over every other qubit's preparation.
    pub fn p_g_given_pi(&self, i: usize, j: usize) -> f64 {
        let rows: Vec<usize> = self.rows_with(j, true).collect();
        rows.iter().map(|&r| 1.0 - self.p_excited(r, i)).sum::<f64>() / rows.len() as f64
    }

    /// Marginal correct-assignment probability of qubit `i`.
    pub fn p_cor(&self, i: usize) -> f64 {
        1.0 - 0.5 * (self.p_e_given_0(i, i) + self.p_g_given_pi(i, i))
    }

    /// Long-format rows `(preparation, outcome, probability)` for heatmaps.
    pub fn long_format(&self) -> Vec<(String, String, f64)> {
        let n = self.n_qubits;
        let mut out = Vec::with_capacity(self.probs.len() * self.probs.len());
        for (r, row) in self.probs.iter().enumerate() {
            for (s, &p) in row.iter().enumerate() {
                out.push((preparation_label(r, n), outcome_label(s, n), p));
            }
        }
        out
    }
}

fn counts_from_shots(shots: &[ShotRecord], thresholds: &[f64]) -> Result<Vec<RowCounts>> {
    let n = thresholds.len();
    let size = 1usize << n;
    let mut rows = vec![RowCounts { outcomes: vec![0; size], heralded_out: 0 }; size];
    for shot in shots {
        if shot.prepared.len() != n || shot.s.len() != n {
            return Err(Error::invalid(format!("shot {} does not match {n} thresholds", shot.index)));
        }
        let row = bits_to_index(&shot.prepared);
        if !shot.herald_pass {
            rows[row].heralded_out += 1;
            continue;
        }
        let outcome = shot.s.iter().zip(thresholds).fold(0usize, |acc, (s, th)| (acc << 1) | (*s > *th) as usize);
        rows[row].outcomes[outcome] += 1;
    }
    Ok(rows)
}

/// Empirical `P(s|ζ)` over heralded shots.
pub fn assignment_matrix(shots: &[ShotRecord], thresholds: &[f64]) -> Result<AssignmentMatrix> {
    AssignmentMatrix::from_counts(&counts_from_shots(shots, thresholds)?)
}

/// `F_ij = 1 − P(e_i|0_j) − P(g_i|π_j)`.
pub fn cross_fidelity(matrix: &AssignmentMatrix) -> Vec<Vec<f64>> {
    let n = matrix.n_qubits;
    (0..n).map(|i| (0..n).map(|j| 1.0 - matrix.p_e_given_0(i, j) - matrix.p_g_given_pi(i, j)).collect()).collect()
}

/// Per-preparation Pearson correlation of the `σ_z = ±1` outcomes, averaged
/// with equal weight over preparations. Preparations where either qubit's
/// outcome never varies are left out of that pair's average.
pub fn correlation_from_counts(rows: &[RowCounts]) -> Result<Vec<Vec<f64>>> {
    let matrix = AssignmentMatrix::from_counts(rows)?;
    let n = matrix.n_qubits;
    let z = |s: usize, q: usize| if (s >> (n - 1 - q)) & 1 == 1 { -1.0 } else { 1.0 };
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        c[i][i] = 1.0;
        for j in i + 1..n {
            let mut sum = 0.0;
            let mut used = 0usize;
            for (r, probs) in matrix.probs.iter().enumerate() {
                let (mut ei, mut ej, mut eij) = (0.0, 0.0, 0.0);
                for (s, &p) in probs.iter().enumerate() {
                    ei += p * z(s, i);
                    ej += p * z(s, j);
                    eij += p * z(s, i) * z(s, j);
                }
                let vi = 1.0 - ei * ei;
                let vj = 1.0 - ej * ej;
                if vi <= 0.0 || vj <= 0.0 {
                    log::warn!(
                        "preparation {} has constant outcomes for qubit {}; excluded from the ({i}, {j}) correlation",
                        preparation_label(r, n),
                        if vi <= 0.0 { i } else { j }
                    );
                    continue;
                }
                sum += ((eij - ei * ej) / (vi * vj).sqrt()).clamp(-1.0, 1.0);
                used += 1;
            }
            let value = if used == 0 {
                log::warn!("no preparation with varying outcomes for qubits ({i}, {j}); correlation set to 0");
                0.0
            } else {
                sum / used as f64
            };
            c[i][j] = value;
            c[j][i] = value;
        }
    }
    Ok(c)
}

pub fn correlation_matrix(shots: &[ShotRecord], thresholds: &[f64]) -> Result<Vec<Vec<f64>>> {
    correlation_from_counts(&counts_from_shots(shots, thresholds)?)
}

/// Per-chain circuit quantities in boundary units (GHz, MHz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub name: String,
    pub resonator_ghz: f64,
    pub filter_ghz: f64,
    pub filter_linewidth_mhz: f64,
    pub coupling_mhz: f64,
    pub readout_linewidth_mhz: f64,
    pub readout_linewidth_approx_mhz: f64,
    pub dispersive_shift_mhz: f64,
    pub critical_photons: f64,
    pub purcell_t1_us: f64,
    pub purcell_t1_unfiltered_us: f64,
}

/// Single-qubit readout figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitReadoutSummary {
    pub name: String,
    pub threshold: f64,
    pub snr: f64,
    pub p_cor_individual: f64,
    pub p_cor_multiplexed: Option<f64>,
    pub p_e_given_0: f64,
    pub p_g_given_pi: f64,
    pub budget: ErrorBudget,
    pub analytic_decay_error: f64,
    pub self_dephasing_per_s: f64,
    pub efficiency_estimate: Option<f64>,
    pub occupation_time_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReadoutReport {
    pub qubits: Vec<String>,
    pub chains: Vec<ChainSummary>,
    pub readout: Vec<QubitReadoutSummary>,
    pub assignment: Option<AssignmentMatrix>,
    pub cross_fidelity: Option<Vec<Vec<f64>>>,
    pub correlation: Option<Vec<Vec<f64>>>,
    pub dephasing_square: Option<Vec<Vec<f64>>>,
    pub dephasing_filtered: Option<Vec<Vec<f64>>>,
}

fn matrix_csv(names: &[String], m: &[Vec<f64>]) -> String {
    let mut out = String::from("row,");
    out.push_str(&names.join(","));
    out.push('\n');
    for (name, row) in names.iter().zip(m) {
        out.push_str(name);
        for v in row {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}

impl ReadoutReport {
    /// CSV tables keyed by file stem.
    pub fn csv_bundle(&self) -> Vec<(String, String)> {
        let mut files = Vec::new();
        if !self.chains.is_empty() {
            let mut s = String::from(
                "chain,resonator_ghz,filter_ghz,filter_linewidth_mhz,coupling_mhz,readout_linewidth_mhz,readout_linewidth_approx_mhz,dispersive_shift_mhz,critical_photons,purcell_t1_us,purcell_t1_unfiltered_us\n",
            );
            for c in &self.chains {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    c.name,
                    c.resonator_ghz,
                    c.filter_ghz,
                    c.filter_linewidth_mhz,
                    c.coupling_mhz,
                    c.readout_linewidth_mhz,
                    c.readout_linewidth_approx_mhz,
                    c.dispersive_shift_mhz,
                    c.critical_photons,
                    c.purcell_t1_us,
                    c.purcell_t1_unfiltered_us
                ));
            }
            files.push(("chains".to_string(), s));
        }
        if !self.readout.is_empty() {
            let mut s = String::from(
                "qubit,threshold,snr,p_cor_individual,p_cor_multiplexed,p_e_given_0,p_g_given_pi,overlap,mixing,decay,analytic_decay_error,self_dephasing_per_s,efficiency_estimate,occupation_time_ns\n",
            );
            for q in &self.readout {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    q.name,
                    q.threshold,
                    q.snr,
                    q.p_cor_individual,
                    q.p_cor_multiplexed.map(|v| v.to_string()).unwrap_or_default(),
                    q.p_e_given_0,
                    q.p_g_given_pi,
                    q.budget.overlap,
                    q.budget.mixing,
                    q.budget.decay,
                    q.analytic_decay_error,
                    q.self_dephasing_per_s,
                    q.efficiency_estimate.map(|v| v.to_string()).unwrap_or_default(),
                    q.occupation_time_ns
                ));
            }
            files.push(("readout".to_string(), s));
        }
        if let Some(a) = &self.assignment {
            let mut s = String::from("preparation,outcome,probability\n");
            for (r, c, p) in a.long_format() {
                s.push_str(&format!("{r},{c},{p:e}\n"));
            }
            files.push(("assignment".to_string(), s));
        }
        for (stem, m) in [
            ("cross_fidelity", &self.cross_fidelity),
            ("correlation", &self.correlation),
            ("dephasing_square", &self.dephasing_square),
            ("dephasing_filtered", &self.dephasing_filtered),
        ] {
            if let Some(m) = m {
                files.push((stem.to_string(), matrix_csv(&self.qubits, m)));
            }
        }
        files
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_counts(n: usize, per_row: u64) -> Vec<RowCounts> {
        let size = 1 << n;
        (0..size)
            .map(|r| {
                let mut outcomes = vec![0; size];
                outcomes[r] = per_row;
                RowCounts { outcomes, heralded_out: 0 }
            })
            .collect()
    }

    /// Independent qubits with symmetric flip probability `p` per qubit.
    fn independent_counts(n: usize, p: f64, per_row: f64) -> Vec<RowCounts> {
        let size = 1usize << n;
        (0..size)
            .map(|r| RowCounts {
                outcomes: (0..size)
                    .map(|s| {
                        let flips = (r ^ s).count_ones() as i32;
                        (per_row * p.powi(flips) * (1.0 - p).powi(n as i32 - flips)).round() as u64
                    })
                    .collect(),
                heralded_out: 0,
            })
            .collect()
    }

    #[test]
    fn ideal_matrix_is_identity() {
        let m = AssignmentMatrix::from_counts(&identity_counts(3, 1000)).unwrap();
        for (r, row) in m.probs.iter().enumerate() {
            for (s, &p) in row.iter().enumerate() {
                assert_eq!(p, if r == s { 1.0 } else { 0.0 });
            }
        }
        let f = cross_fidelity(&m);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(f[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let m = AssignmentMatrix::from_counts(&independent_counts(3, 0.03, 1e6)).unwrap();
        for row in &m.probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_row_is_reported() {
        let mut rows = identity_counts(2, 1000);
        rows[2].outcomes = vec![0; 4];
        assert!(matches!(AssignmentMatrix::from_counts(&rows), Err(Error::MissingPreparation(2))));
        assert!(AssignmentMatrix::from_counts(&rows[..3]).is_err());
    }

    #[test]
    fn diagonal_fidelity_matches_single_qubit_errors() {
        let m = AssignmentMatrix::from_counts(&independent_counts(2, 0.05, 1e6)).unwrap();
        let f = cross_fidelity(&m);
        assert!((f[0][0] - (1.0 - 0.05 - 0.05)).abs() < 1e-5);
        assert!(f[0][1].abs() < 1e-5);
        assert!((m.p_cor(1) - 0.95).abs() < 1e-5);
    }

    #[test]
    fn copied_outcomes_correlate() {
        // Qubit 1 copies qubit 0, whose outcome is random in every row.
        let rows: Vec<RowCounts> = (0..4).map(|_| RowCounts { outcomes: vec![500, 0, 0, 500], heralded_out: 0 }).collect();
        let c = correlation_from_counts(&rows).unwrap();
        assert_eq!(c[0][0], 1.0);
        assert!((c[0][1] - 1.0).abs() < 1e-12);
        let anti: Vec<RowCounts> = (0..4).map(|_| RowCounts { outcomes: vec![0, 500, 500, 0], heralded_out: 0 }).collect();
        let c = correlation_from_counts(&anti).unwrap();
        assert!((c[1][0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_outcomes_do_not_correlate() {
        let c = correlation_from_counts(&independent_counts(3, 0.1, 1e6)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(c[i][j].abs() < 1e-4);
                }
                assert_eq!(c[i][j], c[j][i]);
            }
        }
    }

    #[test]
    fn constant_cells_are_skipped() {
        let c = correlation_from_counts(&identity_counts(2, 1000)).unwrap();
        assert_eq!(c[0][1], 0.0);
    }

    #[test]
    fn relabelling_permutes_matrices() {
        // Qubit 0 flips with 2 %, qubit 1 with 8 %.
        let size = 4;
        let rows: Vec<RowCounts> = (0..size)
            .map(|r| RowCounts {
                outcomes: (0..size)
                    .map(|s| {
                        let f0 = ((r ^ s) >> 1) & 1 == 1;
                        let f1 = (r ^ s) & 1 == 1;
                        let p = if f0 { 0.02 } else { 0.98 } * if f1 { 0.08 } else { 0.92 };
                        (p * 1e6f64).round() as u64
                    })
                    .collect(),
                heralded_out: 0,
            })
            .collect();
        let swap = |i: usize| ((i & 1) << 1) | (i >> 1);
        let swapped: Vec<RowCounts> = (0..size)
            .map(|r| RowCounts { outcomes: (0..size).map(|s| rows[swap(r)].outcomes[swap(s)]).collect(), heralded_out: 0 })
            .collect();
        let a = cross_fidelity(&AssignmentMatrix::from_counts(&rows).unwrap());
        let b = cross_fidelity(&AssignmentMatrix::from_counts(&swapped).unwrap());
        assert!((a[0][0] - b[1][1]).abs() < 1e-15);
        assert!((a[0][1] - b[1][0]).abs() < 1e-15);
    }

    #[test]
    fn labels() {
        assert_eq!(preparation_label(5, 3), "π0π");
        assert_eq!(outcome_label(6, 3), "eeg");
    }

    #[test]
    fn report_bundle_contains_matrices() {
        let m = AssignmentMatrix::from_counts(&identity_counts(1, 10)).unwrap();
        let report = ReadoutReport {
            qubits: vec!["Q1".into()],
            cross_fidelity: Some(cross_fidelity(&m)),
            assignment: Some(m),
            ..ReadoutReport::default()
        };
        let files = report.csv_bundle();
        assert!(files.iter().any(|(n, s)| n == "assignment" && s.lines().count() == 5));
        assert!(files.iter().any(|(n, _)| n == "cross_fidelity"));
    }
}
