use std::path::Path;
use std::process::{Command, Output};

fn muxread(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muxread")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Data lines without the `#` header.
fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

fn matrix(text: &str) -> Vec<Vec<f64>> {
    data_lines(text)[1..].iter().map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn shots_are_byte_identical_for_a_seed() {
    let args = ["shots", "--qubit", "Q6", "--preparation", "π", "--n-rep", "500", "--seed", "11"];
    let a = stdout(&muxread(&args));
    let b = stdout(&muxread(&args));
    assert_eq!(a, b);
    let other = stdout(&muxread(&["shots", "--qubit", "Q6", "--preparation", "π", "--n-rep", "500", "--seed", "12"]));
    assert_ne!(data_lines(&a), data_lines(&other));
    // Shots failing the herald are dropped.
    let kept = data_lines(&a).len() - 1;
    assert!((400..=500).contains(&kept), "{kept}");
}

#[test]
fn thread_cap_does_not_change_output() {
    let args = ["shots", "--preparation", "0π0π0", "--n-rep", "300"];
    let default = stdout(&muxread(&args));
    let capped = Command::new(env!("CARGO_BIN_EXE_muxread")).args(args).env("MUXREAD_THREADS", "1").output().unwrap();
    assert_eq!(stdout(&capped), default);
    let bad = Command::new(env!("CARGO_BIN_EXE_muxread")).args(args).env("MUXREAD_THREADS", "many").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn zero_shots_give_a_header_only_csv() {
    let text = stdout(&muxread(&["shots", "--n-rep", "0"]));
    let lines = data_lines(&text);
    assert_eq!(lines, ["shot,signal_Q2,signal_Q3,signal_Q5,signal_Q6,signal_Q7"]);
    assert!(text.lines().any(|l| l.starts_with("# config_sha256: ")));
    assert!(text.lines().any(|l| l == "# seed: 1"));
}

#[test]
fn config_round_trip_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("device.json");
    let first = stdout(&muxread(&["config"]));
    std::fs::write(&path, &first).unwrap();
    let second = stdout(&muxread(&["--config", path.to_str().unwrap(), "config"]));
    assert_eq!(first, second);
}

#[test]
fn shipped_config_matches_the_built_in_device() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference_device.json");
    let text = std::fs::read_to_string(shipped).unwrap();
    assert_eq!(text, stdout(&muxread(&["config"])));
}

#[test]
fn exit_codes_follow_the_contract() {
    assert_eq!(muxread(&["spectrum", "--chain", "Q9"]).status.code(), Some(1));
    assert_eq!(muxread(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(muxread(&["shots", "--preparation", "0x"]).status.code(), Some(1));
    // So much load capacitance that the mode falls out of the search window.
    let out = muxread(&["geometry", "--length-um", "4400", "--coupling-um", "3000", "--c0-ff", "1e9"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(muxread(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_config_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("device.json");
    let text = stdout(&muxread(&["config"])).replacen("\"t1_us\": 5.7", "\"t1_us\": -5.7", 1);
    let line = text.lines().position(|l| l.contains("-5.7")).unwrap() + 1;
    std::fs::write(&path, text).unwrap();
    let out = muxread(&["--config", path.to_str().unwrap(), "config"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("line {line}")), "{err}");
}

#[test]
fn zero_span_spectrum_has_one_row() {
    let text = stdout(&muxread(&["spectrum", "--chain", "Q6", "--range", "6.9,6.9"]));
    assert_eq!(data_lines(&text).len(), 2);
}

#[test]
fn feedline_sweep_shows_one_dip_per_chain() {
    let text = stdout(&muxread(&["spectrum", "--range", "6.2,7.4", "--points", "6001"]));
    let low: Vec<f64> = data_lines(&text)[1..]
        .iter()
        .map(|l| l.split(',').take(2).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .filter(|v| v[1] < 0.5)
        .map(|v| v[0])
        .collect();
    // The resonator peak splits each filter dip; group by frequency gaps.
    let groups = 1 + low.windows(2).filter(|w| w[1] - w[0] > 60e6).count();
    assert_eq!(groups, 5);
}

#[test]
fn paired_spectrum_has_both_states() {
    let text = stdout(&muxread(&["spectrum", "--chain", "Q6", "--state", "both", "--points", "11"]));
    assert_eq!(data_lines(&text)[0], "frequency_hz,magnitude_g,phase_rad_g,magnitude_e,phase_rad_e");
    assert_eq!(data_lines(&text).len(), 12);
}

#[test]
fn spectrum_output_fits_back_to_the_chain() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.csv");
    let e = dir.path().join("e.csv");
    stdout(&muxread(&["spectrum", "--chain", "Q6", "--out", g.to_str().unwrap()]));
    stdout(&muxread(&["spectrum", "--chain", "Q6", "--state", "e", "--out", e.to_str().unwrap()]));
    let fit: serde_json::Value = serde_json::from_str(&stdout(&muxread(&["fit", "--data", g.to_str().unwrap()]))).unwrap();
    let kappa_mhz = fit["result"]["params"]["kappa_p"].as_f64().unwrap() / (2.0 * std::f64::consts::PI) / 1e6;
    assert!((kappa_mhz / 38.3 - 1.0).abs() < 1e-3, "{kappa_mhz}");
    let pair: serde_json::Value =
        serde_json::from_str(&stdout(&muxread(&["fit", "--data", g.to_str().unwrap(), "--data-e", e.to_str().unwrap(), "--chain", "Q6"]))).unwrap();
    let chi_mhz = pair["result"]["params"]["chi"].as_f64().unwrap() / (2.0 * std::f64::consts::PI) / 1e6;
    assert!((chi_mhz + 2.66).abs() < 1e-3, "{chi_mhz}");
}

#[test]
fn gaussian_pulses_suppress_crosstalk_dephasing() {
    let square = matrix(&stdout(&muxread(&["dephasing", "--pulse", "square"])));
    let gaussian = matrix(&stdout(&muxread(&["dephasing", "--pulse", "gaussian"])));
    for i in 0..5 {
        for j in 0..5 {
            if i == j {
                assert!((gaussian[i][j] / square[i][j] - 1.0).abs() < 0.5);
            } else {
                assert!(square[i][j] / gaussian[i][j] >= 100.0, "({i},{j}) {} vs {}", square[i][j], gaussian[i][j]);
            }
        }
    }
}

#[test]
fn partial_assignment_rows_are_normalised() {
    let text = stdout(&muxread(&["assignment", "--preparations", "00000,πππππ", "--n-rep", "2000", "--n-rep-threshold", "5000"]));
    let lines = data_lines(&text);
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("preparation,ggggg,"));
    for row in matrix(&text) {
        assert_eq!(row.len(), 32);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn report_writes_the_requested_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report");
    let status = muxread(&["report", "--out", out.to_str().unwrap(), "--n-rep-single", "5000", "--n-rep-multiplexed", "0", "--no-dephasing"]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for name in ["report.json", "chains.csv", "readout.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }
    assert!(!out.join("assignment.csv").exists());
    assert_eq!(muxread(&["report"]).status.code(), Some(1));
}
