mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use muxread::analysis::outcome_label;
use muxread::circuit::{s21, s23, QubitState};
use muxread::config::{Device, DeviceConfig};
use muxread::dynamics::{crosstalk_dephasing_matrix, photon_number, simulate_pair, PulseShape};
use muxread::experiment::{build_report, derive_seed, single_qubit_run, ReportOptions};
use muxread::fitting::{fit_dispersive_shift, fit_s21, initial_guess_from_spectrum, FitOptions, FitParameters, Method, SpectrumData, SpectrumSource};
use muxread::geometry::{design_scan, solve_fundamental_mode, QuarterWaveGeometry, ScanParameter};
use muxread::shots::{all_preparations, generate_assignment_counts, generate_signals, MultiplexedReadout, ShotGeneratorConfig};
use muxread::units::{ff, ghz, to_ghz};
use muxread::Complex64;

use output::{row, write_csv, write_json, write_text, Meta};

/// Simulate and analyse frequency-multiplexed qubit readout.
#[derive(Parser, Debug)]
#[command(name = "muxread", version)]
struct Cli {
    /// Device description (JSON). The built-in five-chain device when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file, or directory for `report`. Standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the device description, normalised.
    Config,
    /// Transmission or drive-port spectrum of one chain or the whole feedline.
    Spectrum(SpectrumArgs),
    /// Field and photon-number time traces of one chain under its readout pulse.
    Timetrace(TimetraceArgs),
    /// Crosstalk dephasing matrix (1/us).
    Dephasing(DephasingArgs),
    /// Integrated single-shot signals for one preparation.
    Shots(ShotsArgs),
    /// Multiplexed assignment probability matrix.
    Assignment(AssignmentArgs),
    /// Fit a measured or synthetic spectrum.
    Fit(FitArgs),
    /// Fundamental mode of a quarter-wave resonator.
    Geometry(GeometryArgs),
    /// Full analysis written as JSON plus one CSV per table.
    Report(ReportArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StateArg {
    G,
    E,
    Both,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SourceArg {
    S21,
    S23,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PulseArg {
    Square,
    Gaussian,
}

impl From<PulseArg> for PulseShape {
    fn from(p: PulseArg) -> Self {
        match p {
            PulseArg::Square => PulseShape::Square,
            PulseArg::Gaussian => PulseShape::GaussianFilteredSquare,
        }
    }
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    /// Chain name, or `all` for the transmission past every filter.
    #[arg(long, default_value = "all")]
    chain: String,
    #[arg(long, value_enum, default_value = "g")]
    state: StateArg,
    #[arg(long, value_enum, default_value = "s21")]
    source: SourceArg,
    /// Sweep range in GHz, `start,stop`. Defaults to 4 filter linewidths
    /// around a single chain, or 6.2-7.4 GHz for the feedline.
    #[arg(long, value_delimiter = ',')]
    range: Option<Vec<f64>>,
    #[arg(long, default_value_t = 2001)]
    points: usize,
}

#[derive(Args, Debug)]
struct TimetraceArgs {
    #[arg(long)]
    qubit: String,
    /// Pulse shape; the configured one when omitted.
    #[arg(long, value_enum)]
    pulse: Option<PulseArg>,
}

#[derive(Args, Debug)]
struct DephasingArgs {
    #[arg(long, value_enum, default_value = "square")]
    pulse: PulseArg,
}

#[derive(Args, Debug)]
struct ShotsArgs {
    /// Read out only this qubit's chain.
    #[arg(long)]
    qubit: Option<String>,
    /// One symbol per read-out qubit: `0`/`g` for ground, `1`/`π`/`p` for a π pulse.
    #[arg(long)]
    preparation: Option<String>,
    /// Shots; the configured number when omitted.
    #[arg(long)]
    n_rep: Option<usize>,
}

#[derive(Args, Debug)]
struct AssignmentArgs {
    /// `all`, or comma-separated preparation labels such as `00000,πππππ`.
    #[arg(long, default_value = "all")]
    preparations: String,
    #[arg(long)]
    n_rep: Option<usize>,
    /// Shots per preparation for the individual runs that set the thresholds.
    #[arg(long, default_value_t = 100_000)]
    n_rep_threshold: usize,
    /// Long format: one `(preparation, outcome, probability)` row per entry.
    #[arg(long)]
    long: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MethodArg {
    Lm,
    Simplex,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Spectrum CSV with `frequency_hz,magnitude[,phase_rad]` columns.
    #[arg(long)]
    data: PathBuf,
    /// Second spectrum taken with the qubit excited; fits the dispersive shift.
    #[arg(long)]
    data_e: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "s21")]
    source: SourceArg,
    /// Start from this chain's configured parameters instead of a guess
    /// read off the spectrum.
    #[arg(long)]
    chain: Option<String>,
    #[arg(long)]
    fit_losses: bool,
    #[arg(long)]
    use_phase: bool,
    #[arg(long)]
    no_baseline: bool,
    #[arg(long, value_enum, default_value = "lm")]
    method: MethodArg,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ScanArg {
    Length,
    CouplingCapacitance,
    LoadCapacitance,
}

#[derive(Args, Debug)]
struct GeometryArgs {
    /// Resonator length (um).
    #[arg(long)]
    length_um: f64,
    /// Coupling point measured from the shorted end (um).
    #[arg(long)]
    coupling_um: f64,
    /// Open-end load capacitance (fF).
    #[arg(long, default_value_t = 0.0)]
    c0_ff: f64,
    /// Coupling capacitance (fF).
    #[arg(long, default_value_t = 0.0)]
    cc_ff: f64,
    #[arg(long, default_value_t = 50.0)]
    z0: f64,
    /// Phase velocity (m/s).
    #[arg(long, default_value_t = 1.2e8)]
    velocity: f64,
    /// Sweep one parameter over `--values` (um or fF) and write CSV.
    #[arg(long, value_enum, requires = "values")]
    scan: Option<ScanArg>,
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, default_value_t = 100_000)]
    n_rep_single: usize,
    /// Shots per preparation of the multiplexed run; 0 skips it.
    #[arg(long)]
    n_rep_multiplexed: Option<usize>,
    #[arg(long)]
    no_dephasing: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().filter_map(|c| c.downcast_ref::<muxread::Error>()).any(|m| m.is_numerical());
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MUXREAD_THREADS") else {
        return Ok(());
    };
    let n: usize = value.trim().parse().map_err(|_| anyhow!("MUXREAD_THREADS must be a positive integer, got {value:?}"))?;
    if n == 0 {
        bail!("MUXREAD_THREADS must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<DeviceConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            DeviceConfig::from_json_str(&text).with_context(|| format!("loading {}", p.display()))?
        }
        None => DeviceConfig::reference_device(),
    };
    if let Some(s) = seed {
        cfg.generator.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Config => {
            cfg.validate()?;
            write_text(&cfg.to_json_string(), out)
        }
        Command::Spectrum(a) => spectrum(&cfg, &a, out),
        Command::Timetrace(a) => timetrace(&cfg, &a, out),
        Command::Dephasing(a) => dephasing(&cfg, &a, out),
        Command::Shots(a) => shots(&cfg, &a, out),
        Command::Assignment(a) => assignment(&cfg, &a, out),
        Command::Fit(a) => fit(&cfg, &a, out),
        Command::Geometry(a) => geometry(&cfg, &a, out),
        Command::Report(a) => report(&cfg, &a, out),
    }
}

fn sweep(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 || lo == hi {
        return vec![lo];
    }
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

fn spectrum(cfg: &DeviceConfig, a: &SpectrumArgs, out: Option<&Path>) -> Result<()> {
    let device = cfg.build()?;
    let selected: Vec<usize> = if a.chain == "all" { (0..device.chains.len()).collect() } else { vec![cfg.index_of(&a.chain)?] };
    if a.points == 0 {
        bail!("--points must be at least 1");
    }
    let (lo, hi) = match &a.range {
        Some(r) if r.len() == 2 => (r[0], r[1]),
        Some(r) => bail!("--range takes start,stop in GHz, got {} values", r.len()),
        None if selected.len() == 1 => {
            let c = &cfg.chains[selected[0]];
            let half = 4.0 * c.filter_linewidth_mhz.0 * 1e-3;
            (c.filter_ghz.0.min(c.resonator_ghz.0) - half, c.filter_ghz.0.max(c.resonator_ghz.0) + half)
        }
        None => (6.2, 7.4),
    };
    if !(lo > 0.0 && hi >= lo) {
        bail!("--range must be increasing positive frequencies in GHz, got {lo},{hi}");
    }
    let response = |w: f64, state: QubitState| -> Complex64 {
        selected.iter().fold(Complex64::new(1.0, 0.0), |acc, &k| {
            let chain = &device.chains[k];
            acc * match a.source {
                SourceArg::S21 => s21(chain, &device.feedline, w, state),
                SourceArg::S23 => s23(chain, &device.feedline, w),
            }
        })
    };
    let states: Vec<(QubitState, &str)> = match a.state {
        StateArg::G => vec![(QubitState::Ground, "")],
        StateArg::E => vec![(QubitState::Excited, "")],
        StateArg::Both => vec![(QubitState::Ground, "_g"), (QubitState::Excited, "_e")],
    };
    let mut body = row(std::iter::once("frequency_hz".to_string())
        .chain(states.iter().flat_map(|(_, s)| [format!("magnitude{s}"), format!("phase_rad{s}")])));
    for f in sweep(lo, hi, a.points) {
        let w = ghz(f);
        let cells = std::iter::once(format!("{:e}", f * 1e9)).chain(states.iter().flat_map(|(st, _)| {
            let s = response(w, *st);
            [format!("{:e}", s.norm()), format!("{:e}", s.arg())]
        }));
        body.push_str(&row(cells));
    }
    write_csv(&Meta::new("spectrum", cfg), &body, out)
}

fn timetrace(cfg: &DeviceConfig, a: &TimetraceArgs, out: Option<&Path>) -> Result<()> {
    let device = cfg.build()?;
    let k = cfg.index_of(&a.qubit)?;
    let pulse = match a.pulse {
        Some(p) => device.pulses_with_shape(p.into())?[k],
        None => device.pulses[k],
    };
    let (g, e) = simulate_pair(&device.chains[k], &device.feedline, &pulse)?;
    let (ng, ne) = (photon_number(&g), photon_number(&e));
    let mut body = row(
        ["time_ns", "a_g_re", "a_g_im", "b_g_re", "b_g_im", "a_e_re", "a_e_im", "b_e_re", "b_e_im", "photons_g", "photons_e", "out_g_re", "out_g_im", "out_e_re", "out_e_im"]
            .map(String::from),
    );
    for i in 0..g.len() {
        let c = [g.a[i], g.b[i], e.a[i], e.b[i]];
        let mut cells = vec![format!("{:e}", g.t[i] * 1e9)];
        cells.extend(c.iter().flat_map(|z| [format!("{:e}", z.re), format!("{:e}", z.im)]));
        cells.push(format!("{:e}", ng.n[i]));
        cells.push(format!("{:e}", ne.n[i]));
        cells.extend([g.output[i], e.output[i]].iter().flat_map(|z| [format!("{:e}", z.re), format!("{:e}", z.im)]));
        body.push_str(&row(cells));
    }
    write_csv(&Meta::new("timetrace", cfg), &body, out)
}

fn dephasing(cfg: &DeviceConfig, a: &DephasingArgs, out: Option<&Path>) -> Result<()> {
    let device = cfg.build()?;
    let pulses = device.pulses_with_shape(a.pulse.into())?;
    let m = crosstalk_dephasing_matrix(&device.chains, &device.feedline, &pulses)?;
    let mut body = row(std::iter::once("qubit".to_string()).chain(device.names.iter().cloned()));
    for (name, gammas) in device.names.iter().zip(&m.gamma) {
        body.push_str(&row(std::iter::once(name.clone()).chain(gammas.iter().map(|g| format!("{:e}", g * 1e-6)))));
    }
    write_csv(&Meta::new(&format!("dephasing {}", pulse_name(a.pulse)), cfg), &body, out)
}

fn pulse_name(p: PulseArg) -> &'static str {
    match p {
        PulseArg::Square => "square",
        PulseArg::Gaussian => "gaussian",
    }
}

fn parse_preparation(label: &str, n: usize) -> Result<Vec<bool>, muxread::Error> {
    let bits = label
        .chars()
        .map(|c| match c {
            '0' | 'g' => Ok(false),
            '1' | 'π' | 'p' | 'e' => Ok(true),
            other => Err(muxread::Error::InvalidParameter(format!("preparation {label:?}: unknown symbol {other:?}"))),
        })
        .collect::<Result<Vec<bool>, _>>()?;
    if bits.len() != n {
        return Err(muxread::Error::InvalidParameter(format!("preparation {label:?} has {} symbols for {n} qubits", bits.len())));
    }
    Ok(bits)
}

fn shots(cfg: &DeviceConfig, a: &ShotsArgs, out: Option<&Path>) -> Result<()> {
    let device = cfg.build()?;
    let selected: Vec<usize> = match &a.qubit {
        Some(q) => vec![cfg.index_of(q)?],
        None => (0..device.chains.len()).collect(),
    };
    let chains: Vec<_> = selected.iter().map(|&k| device.chains[k].clone()).collect();
    let pulses: Vec<_> = selected.iter().map(|&k| device.pulses[k]).collect();
    let preparation = match &a.preparation {
        Some(p) => parse_preparation(p, selected.len())?,
        None => vec![false; selected.len()],
    };
    let readout = MultiplexedReadout::new(&chains, &device.feedline, &pulses)?;
    let cfg_shots = ShotGeneratorConfig {
        qubits: selected.iter().map(|&k| device.generator.qubits[k]).collect(),
        n_rep: a.n_rep.unwrap_or(device.generator.n_rep),
        rng_seed: derive_seed(cfg.generator.seed, "shots", a.qubit.as_deref().unwrap_or("")),
        ..device.generator.clone()
    };
    let names: Vec<&str> = selected.iter().map(|&k| device.names[k].as_str()).collect();
    let mut body = row(std::iter::once("shot".to_string()).chain(names.iter().map(|n| format!("signal_{n}"))));
    if cfg_shots.n_rep > 0 {
        let signals = generate_signals(&cfg_shots, &readout, &preparation, 0)?;
        for i in 0..signals[0].len() {
            body.push_str(&row(std::iter::once(i.to_string()).chain(signals.iter().map(|s| format!("{:e}", s[i])))));
        }
    }
    write_csv(&Meta::new("shots", cfg), &body, out)
}

/// Thresholds from individually read-out qubits, seeded as in the report.
fn individual_thresholds(device: &Device, n_rep: usize) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let seed = device.config.generator.seed;
    (0..device.chains.len())
        .into_par_iter()
        .map(|k| Ok(single_qubit_run(device, k, n_rep, derive_seed(seed, "single", &device.names[k]))?.threshold.threshold))
        .collect()
}

fn assignment(cfg: &DeviceConfig, a: &AssignmentArgs, out: Option<&Path>) -> Result<()> {
    let device = cfg.build()?;
    let n = device.chains.len();
    let preparations: Vec<Vec<bool>> = if a.preparations == "all" {
        all_preparations(n)
    } else {
        a.preparations.split(',').map(|p| parse_preparation(p.trim(), n)).collect::<Result<_, _>>()?
    };
    let thresholds = individual_thresholds(&device, a.n_rep_threshold)?;
    let readout = MultiplexedReadout::new(&device.chains, &device.feedline, &device.pulses)?;
    let cfg_shots = ShotGeneratorConfig {
        n_rep: a.n_rep.unwrap_or(device.generator.n_rep),
        rng_seed: derive_seed(cfg.generator.seed, "multiplexed", ""),
        ..device.generator.clone()
    };
    let counts = generate_assignment_counts(&cfg_shots, &readout, &preparations, &thresholds)?;
    let labels: Vec<String> = preparations.iter().map(|p| p.iter().map(|&b| if b { 'π' } else { '0' }).collect()).collect();
    let size = 1usize << n;
    let mut body = String::new();
    if a.long {
        body.push_str("preparation,outcome,probability\n");
    } else {
        body.push_str(&row(std::iter::once("preparation".to_string()).chain((0..size).map(|s| outcome_label(s, n)))));
    }
    for (r, (label, rc)) in labels.iter().zip(&counts).enumerate() {
        let total: u64 = rc.outcomes.iter().sum();
        if total == 0 {
            return Err(muxread::Error::MissingPreparation(r).into());
        }
        let probs = rc.outcomes.iter().map(|&c| c as f64 / total as f64);
        if a.long {
            for (s, p) in probs.enumerate() {
                body.push_str(&row([label.clone(), outcome_label(s, n), format!("{p:e}")]));
            }
        } else {
            body.push_str(&row(std::iter::once(label.clone()).chain(probs.map(|p| format!("{p:e}")))));
        }
    }
    write_csv(&Meta::new("assignment", cfg), &body, out)
}

fn read_spectrum(path: &Path, source: SpectrumSource) -> Result<SpectrumData> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    SpectrumData::from_csv(file, source).with_context(|| format!("reading {}", path.display()))
}

fn fit(cfg: &DeviceConfig, a: &FitArgs, out: Option<&Path>) -> Result<()> {
    let source = match a.source {
        SourceArg::S21 => SpectrumSource::S21,
        SourceArg::S23 => SpectrumSource::S23,
    };
    let data = read_spectrum(&a.data, source)?;
    let feedline = cfg.feedline_spec();
    let initial = match &a.chain {
        Some(name) => {
            let k = cfg.index_of(name)?;
            let chain = cfg.chain(k);
            let mut p = FitParameters::from_chain(&chain, &feedline, chain.resonator_frequency(QubitState::Ground));
            if a.data_e.is_some() {
                p.omega_r = chain.omega_r;
                p.chi = Some(chain.chi);
            }
            p
        }
        None => initial_guess_from_spectrum(&data, &feedline)?,
    };
    let options = FitOptions {
        fit_losses: a.fit_losses,
        use_phase: a.use_phase,
        baseline: !a.no_baseline,
        method: match a.method {
            MethodArg::Lm => Method::LevenbergMarquardt,
            MethodArg::Simplex => Method::NelderMead,
        },
        ..FitOptions::default()
    };
    let result = match &a.data_e {
        Some(path) => fit_dispersive_shift(&data, &read_spectrum(path, source)?, &feedline, &initial, &options)?,
        None => fit_s21(&data, &feedline, &initial, &options)?,
    };
    write_json(&Meta::new("fit", cfg), &result, out)
}

fn geometry(cfg: &DeviceConfig, a: &GeometryArgs, out: Option<&Path>) -> Result<()> {
    let geom = QuarterWaveGeometry::from_line(a.length_um * 1e-6, a.coupling_um * 1e-6, ff(a.c0_ff), ff(a.cc_ff), a.z0, a.velocity)?;
    let meta = Meta::new("geometry", cfg);
    match (a.scan, &a.values) {
        (Some(scan), Some(values)) => {
            let (param, unit) = match scan {
                ScanArg::Length => (ScanParameter::Length, 1e-6),
                ScanArg::CouplingCapacitance => (ScanParameter::CouplingCapacitance, 1e-15),
                ScanArg::LoadCapacitance => (ScanParameter::LoadCapacitance, 1e-15),
            };
            let si: Vec<f64> = values.iter().map(|v| v * unit).collect();
            let rows = design_scan(&geom, param, &si)?;
            let mut body = String::from("value,frequency_ghz,theta_rad,b\n");
            for (v, sol) in rows {
                body.push_str(&row([format!("{:e}", v / unit), format!("{:e}", to_ghz(sol.omega)), format!("{:e}", sol.theta), format!("{:e}", sol.b)]));
            }
            write_csv(&meta, &body, out)
        }
        _ => {
            let sol = solve_fundamental_mode(&geom)?;
            #[derive(serde::Serialize)]
            struct Mode {
                frequency_ghz: f64,
                unloaded_frequency_ghz: f64,
                theta_rad: f64,
                b: f64,
            }
            let mode = Mode { frequency_ghz: to_ghz(sol.omega), unloaded_frequency_ghz: to_ghz(geom.bare_omega()), theta_rad: sol.theta, b: sol.b };
            write_json(&meta, &mode, out)
        }
    }
}

fn report(cfg: &DeviceConfig, a: &ReportArgs, out: Option<&Path>) -> Result<()> {
    let dir = out.ok_or_else(|| muxread::Error::InvalidParameter("report needs --out DIR".into()))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let device = cfg.build()?;
    let options = ReportOptions {
        n_rep_single: a.n_rep_single,
        n_rep_multiplexed: a.n_rep_multiplexed.unwrap_or(device.generator.n_rep),
        dephasing: !a.no_dephasing,
    };
    let report = build_report(&device, &options)?;
    let meta = Meta::new("report", cfg);
    write_json(&meta, &report, Some(&dir.join("report.json")))?;
    for (stem, csv) in report.csv_bundle() {
        write_csv(&meta, &csv, Some(&dir.join(format!("{stem}.csv"))))?;
    }
    Ok(())
}
