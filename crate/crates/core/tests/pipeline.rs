use muxread::config::DeviceConfig;
use muxread::experiment::{build_report, ReportOptions};

#[test]
fn report_on_the_reference_device_is_consistent_and_reproducible() {
    let device = DeviceConfig::reference_device().build().unwrap();
    let options = ReportOptions { n_rep_single: 5_000, n_rep_multiplexed: 1_000, dephasing: true };
    let report = build_report(&device, &options).unwrap();

    let stems: Vec<String> = report.csv_bundle().into_iter().map(|(s, _)| s).collect();
    assert_eq!(stems, ["chains", "readout", "assignment", "cross_fidelity", "correlation", "dephasing_square", "dephasing_filtered"]);

    let m = report.assignment.as_ref().unwrap();
    assert_eq!(m.probs.len(), 32);
    let f = report.cross_fidelity.as_ref().unwrap();
    for (i, q) in report.readout.iter().enumerate() {
        let p_cor = q.p_cor_multiplexed.unwrap();
        assert!((f[i][i] - (2.0 * p_cor - 1.0)).abs() < 1e-12);
        assert!(q.p_cor_individual > 0.8 && q.p_cor_individual < 1.0, "{}", q.p_cor_individual);
    }
    let square = report.dephasing_square.as_ref().unwrap();
    let filtered = report.dephasing_filtered.as_ref().unwrap();
    for j in 0..5 {
        for i in (0..5).filter(|i| *i != j) {
            assert!(square[j][j] > 100.0 * square[i][j]);
            assert!(filtered[i][j] < square[i][j]);
        }
    }

    let again = build_report(&device, &options).unwrap();
    assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn a_single_chain_device_runs_end_to_end() {
    let mut cfg = DeviceConfig::reference_device();
    cfg.chains.retain(|c| c.name == "Q6");
    cfg.generator.qubits.retain(|q| q.name == "Q6");
    let device = cfg.build().unwrap();
    let report = build_report(&device, &ReportOptions { n_rep_single: 5_000, n_rep_multiplexed: 2_000, dephasing: true }).unwrap();
    assert_eq!(report.assignment.unwrap().probs.len(), 2);
    assert_eq!(report.dephasing_square.unwrap().len(), 1);
}
