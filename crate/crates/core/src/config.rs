//! Device description at the file boundary: GHz, MHz, ns and µs, converted
//! to angular SI units when a [`Device`] is built.

use serde::{Deserialize, Serialize};

use crate::circuit::{FeedlineSpec, ReadoutChain};
use crate::dynamics::{calibrate_amplitude, PulseShape, PulseSpec};
use crate::shots::{QubitErrorModel, ShotGeneratorConfig};
use crate::units::{ff, ghz, mhz, ns, us};
use crate::{Error, Result};

macro_rules! bounded {
    ($name:ident, $check:expr, $what:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
        #[serde(try_from = "f64", into = "f64")]
        pub struct $name(pub f64);

        impl TryFrom<f64> for $name {
            type Error = String;
            fn try_from(v: f64) -> std::result::Result<Self, String> {
                let check: fn(f64) -> bool = $check;
                if check(v) {
                    Ok($name(v))
                } else {
                    Err(format!(concat!("expected ", $what, ", got {}"), v))
                }
            }
        }

        impl From<$name> for f64 {
            fn from(v: $name) -> f64 {
                v.0
            }
        }
    };
}

bounded!(Positive, |v| v > 0.0 && v.is_finite(), "a positive number");
bounded!(NonNegative, |v| v >= 0.0 && v.is_finite(), "a non-negative number");
bounded!(Fraction, |v| (0.0..=1.0).contains(&v), "a value in [0, 1]");
bounded!(Efficiency, |v| v > 0.0 && v <= 1.0, "an efficiency in (0, 1]");
bounded!(Finite, |v| v.is_finite(), "a finite number");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedlineConfig {
    pub z0_ohm: Positive,
    pub c_in_ff: NonNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseKind {
    Square,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutConfig {
    pub frequency_ghz: Positive,
    pub pulse: PulseKind,
    pub length_ns: Positive,
    /// Gaussian kernel width; used by `gaussian` pulses.
    pub sigma_ns: Positive,
    /// Steady-state photon number the drive is calibrated to.
    pub photons: NonNegative,
}

/// One readout chain. Filter frequency and linewidth are the values seen in
/// transmission, after renormalisation by the feedline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub name: String,
    pub resonator_ghz: Positive,
    pub filter_ghz: Positive,
    pub filter_linewidth_mhz: Positive,
    pub coupling_mhz: NonNegative,
    #[serde(default = "zero")]
    pub drive_port_mhz: NonNegative,
    #[serde(default = "zero")]
    pub filter_loss_mhz: NonNegative,
    #[serde(default = "zero")]
    pub resonator_loss_mhz: NonNegative,
    pub dispersive_shift_mhz: Finite,
    pub qubit_ghz: Positive,
    pub qubit_coupling_mhz: NonNegative,
    pub t1_us: Positive,
    pub thermal_population: Fraction,
    pub readout: ReadoutConfig,
}

fn zero() -> NonNegative {
    NonNegative(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QubitGeneratorConfig {
    pub name: String,
    pub efficiency: Efficiency,
    /// Upward transition rate during readout.
    pub mixing_per_us: NonNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_rep: usize,
    pub seed: u64,
    pub herald: bool,
    pub pre_readout_delay_ns: NonNegative,
    pub qubits: Vec<QubitGeneratorConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub feedline: FeedlineConfig,
    pub chains: Vec<ChainConfig>,
    pub generator: GeneratorConfig,
}

/// First line of `text` mentioning `"needle"` as a quoted string.
fn line_of(text: &str, needle: &str) -> Option<usize> {
    let quoted = format!("\"{needle}\"");
    text.find(&quoted).map(|pos| text[..pos].matches('\n').count() + 1)
}

impl DeviceConfig {
    /// Parses and validates. Errors name the line of the offending entry.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: DeviceConfig = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        if let Err((name, msg)) = cfg.check() {
            let at = name.as_deref().and_then(|n| line_of(text, n)).map(|l| format!(" at line {l}")).unwrap_or_default();
            return Err(Error::invalid(format!("config{at}: {msg}")));
        }
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(name, msg)| match name {
            Some(n) => Error::invalid(format!("chain {n}: {msg}")),
            None => Error::invalid(msg),
        })
    }

    fn check(&self) -> std::result::Result<(), (Option<String>, String)> {
        if self.chains.is_empty() {
            return Err((None, "at least one chain is required".into()));
        }
        for (k, c) in self.chains.iter().enumerate() {
            if c.name.trim().is_empty() {
                return Err((None, format!("chain {k} has an empty name")));
            }
            if self.chains[..k].iter().any(|o| o.name == c.name) {
                return Err((Some(c.name.clone()), format!("duplicate chain name {}", c.name)));
            }
            let chain = self.chain(k);
            chain.validate().map_err(|e| (Some(c.name.clone()), format!("chain {}: {e}", c.name)))?;
            if c.qubit_ghz.0 == c.resonator_ghz.0 {
                return Err((Some(c.name.clone()), format!("chain {}: qubit and resonator frequencies coincide", c.name)));
            }
        }
        let g = &self.generator;
        if g.qubits.len() != self.chains.len() {
            return Err((None, format!("generator lists {} qubits for {} chains", g.qubits.len(), self.chains.len())));
        }
        for (q, c) in g.qubits.iter().zip(&self.chains) {
            if q.name != c.name {
                return Err((Some(q.name.clone()), format!("generator entry {} does not match chain {} at the same position", q.name, c.name)));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.chains.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.chains
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown chain {name}; known: {}", self.names().join(", "))))
    }

    pub fn feedline_spec(&self) -> FeedlineSpec {
        FeedlineSpec { z0: self.feedline.z0_ohm.0, c_in: ff(self.feedline.c_in_ff.0) }
    }

    /// Chain `k` in internal units, bare filter values recovered from the
    /// effective ones.
    pub fn chain(&self, k: usize) -> ReadoutChain {
        let c = &self.chains[k];
        ReadoutChain {
            omega_p_bare: 0.0,
            kappa_p_bare: 0.0,
            omega_r: ghz(c.resonator_ghz.0),
            j: mhz(c.coupling_mhz.0),
            kappa_b: mhz(c.drive_port_mhz.0),
            gamma_a: mhz(c.filter_loss_mhz.0),
            gamma_b: mhz(c.resonator_loss_mhz.0),
            chi: mhz(c.dispersive_shift_mhz.0),
            g: mhz(c.qubit_coupling_mhz.0),
            omega_q: ghz(c.qubit_ghz.0),
            t1: us(c.t1_us.0),
            p_therm: c.thermal_population.0,
        }
        .with_effective_filter(&self.feedline_spec(), ghz(c.filter_ghz.0), mhz(c.filter_linewidth_mhz.0))
    }

    pub fn build(&self) -> Result<Device> {
        self.validate()?;
        let feedline = self.feedline_spec();
        let chains: Vec<ReadoutChain> = (0..self.chains.len()).map(|k| self.chain(k)).collect();
        let pulses = self
            .chains
            .iter()
            .zip(&chains)
            .map(|(c, chain)| {
                let shape = match c.readout.pulse {
                    PulseKind::Square => PulseShape::Square,
                    PulseKind::Gaussian => PulseShape::GaussianFilteredSquare,
                };
                calibrated_pulse(chain, &feedline, c, shape)
            })
            .collect::<Result<Vec<_>>>()?;
        let generator = ShotGeneratorConfig {
            qubits: self
                .generator
                .qubits
                .iter()
                .zip(&chains)
                .map(|(q, chain)| QubitErrorModel {
                    eta: q.efficiency.0,
                    t1: chain.t1,
                    mixing_rate: q.mixing_per_us.0 * 1e6,
                    p_therm: chain.p_therm,
                })
                .collect(),
            herald: self.generator.herald,
            n_rep: self.generator.n_rep,
            rng_seed: self.generator.seed,
            pre_readout_delay: ns(self.generator.pre_readout_delay_ns.0),
        };
        generator.validate()?;
        Ok(Device { names: self.names(), config: self.clone(), feedline, chains, pulses, generator })
    }

    /// The five-chain device used throughout the examples.
    pub fn reference_device() -> Self {
        // name, f_R, f_P, κ_P, J, χ, g, f_Q, T1, P_therm, f_RO, photons, η, mixing
        let rows: [(&str, [f64; 13]); 5] = [
            ("Q2", [7.058, 7.057, 32.2, 9.2, -4.05, 122.3, 6.254, 5.7, 0.047, 7.056, 4.1, 0.518, MIXING_PER_US[0]]),
            ("Q3", [6.575, 6.580, 35.6, 7.9, -1.11, 123.4, 5.206, 6.0, 0.051, 6.572, 22.2, 0.499, MIXING_PER_US[1]]),
            ("Q5", [7.214, 7.196, 57.8, 6.9, -4.80, 134.0, 6.441, 4.9, 0.029, 7.208, 2.9, 0.427, MIXING_PER_US[2]]),
            ("Q6", [6.898, 6.898, 38.3, 8.7, -2.66, 115.9, 5.902, 5.8, 0.060, 6.891, 5.8, 0.512, MIXING_PER_US[3]]),
            ("Q7", [6.409, 6.392, 32.6, 7.8, -1.92, 108.2, 5.442, 5.8, 0.064, 6.407, 9.7, 0.479, MIXING_PER_US[4]]),
        ];
        DeviceConfig {
            feedline: FeedlineConfig { z0_ohm: Positive(50.0), c_in_ff: NonNegative(40.0) },
            chains: rows
                .iter()
                .map(|(name, v)| ChainConfig {
                    name: name.to_string(),
                    resonator_ghz: Positive(v[0]),
                    filter_ghz: Positive(v[1]),
                    filter_linewidth_mhz: Positive(v[2]),
                    coupling_mhz: NonNegative(v[3]),
                    drive_port_mhz: zero(),
                    filter_loss_mhz: zero(),
                    resonator_loss_mhz: zero(),
                    dispersive_shift_mhz: Finite(v[4]),
                    qubit_ghz: Positive(v[6]),
                    qubit_coupling_mhz: NonNegative(v[5]),
                    t1_us: Positive(v[7]),
                    thermal_population: Fraction(v[8]),
                    readout: ReadoutConfig {
                        frequency_ghz: Positive(v[9]),
                        pulse: PulseKind::Square,
                        length_ns: Positive(80.0),
                        sigma_ns: Positive(5.0),
                        photons: NonNegative(v[10]),
                    },
                })
                .collect(),
            generator: GeneratorConfig {
                n_rep: 100_000,
                seed: 1,
                herald: true,
                pre_readout_delay_ns: NonNegative(PRE_READOUT_DELAY_NS),
                qubits: rows
                    .iter()
                    .map(|(name, v)| QubitGeneratorConfig {
                        name: name.to_string(),
                        efficiency: Efficiency(v[11]),
                        mixing_per_us: NonNegative(v[12]),
                    })
                    .collect(),
            },
        }
    }
}

/// Upward transition rates of the default device, tuned once so that the
/// simulated single-qubit fidelities land closest to the measured ones with
/// `P(e|0)` kept between 0.1 % and 1 %.
pub const MIXING_PER_US: [f64; 5] = [0.11369, 0.00834, 0.00962, 0.01038, 0.00758];

/// Time between the end of the π pulse and the start of the readout window
/// in the default device.
pub const PRE_READOUT_DELAY_NS: f64 = 0.0;

fn calibrated_pulse(chain: &ReadoutChain, feedline: &FeedlineSpec, c: &ChainConfig, shape: PulseShape) -> Result<PulseSpec> {
    let carrier = ghz(c.readout.frequency_ghz.0);
    let tau = ns(c.readout.length_ns.0);
    let unit = match shape {
        PulseShape::Square => PulseSpec::square(tau, 1.0, carrier),
        PulseShape::GaussianFilteredSquare => PulseSpec::gaussian_filtered(tau, ns(c.readout.sigma_ns.0), 1.0, carrier),
    };
    let amplitude = calibrate_amplitude(chain, feedline, &unit, c.readout.photons.0).map_err(|e| match e {
        Error::InvalidParameter(m) => Error::invalid(format!("chain {}: {m}", c.name)),
        other => other,
    })?;
    Ok(unit.with_amplitude(amplitude))
}

/// A validated device in internal units with calibrated readout pulses.
#[derive(Debug, Clone)]
pub struct Device {
    pub names: Vec<String>,
    pub config: DeviceConfig,
    pub feedline: FeedlineSpec,
    pub chains: Vec<ReadoutChain>,
    pub pulses: Vec<PulseSpec>,
    pub generator: ShotGeneratorConfig,
}

impl Device {
    /// Every pulse re-shaped and recalibrated to the same photon number.
    pub fn pulses_with_shape(&self, shape: PulseShape) -> Result<Vec<PulseSpec>> {
        self.config
            .chains
            .iter()
            .zip(&self.chains)
            .map(|(c, chain)| calibrated_pulse(chain, &self.feedline, c, shape))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::effective_filter_params;

    #[test]
    fn default_round_trips() {
        let cfg = DeviceConfig::reference_device();
        let text = cfg.to_json_string();
        let back = DeviceConfig::from_json_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json_string(), text);
    }

    #[test]
    fn effective_filter_is_reproduced() {
        let cfg = DeviceConfig::reference_device();
        let chain = cfg.chain(3);
        let eff = effective_filter_params(&chain, &cfg.feedline_spec());
        assert!((eff.omega_p_eff / ghz(6.898) - 1.0).abs() < 1e-12);
        assert!((eff.kappa_p_eff / mhz(38.3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn build_calibrates_every_pulse() {
        let device = DeviceConfig::reference_device().build().unwrap();
        assert_eq!(device.pulses.len(), 5);
        assert!(device.pulses.iter().all(|p| p.amplitude > 0.0));
        let gauss = device.pulses_with_shape(PulseShape::GaussianFilteredSquare).unwrap();
        assert!(gauss.iter().all(|p| p.shape == PulseShape::GaussianFilteredSquare));
    }

    #[test]
    fn field_errors_carry_the_line() {
        let text = DeviceConfig::reference_device().to_json_string().replacen("\"t1_us\": 5.7", "\"t1_us\": -5.7", 1);
        let line = text.lines().position(|l| l.contains("-5.7")).unwrap() + 1;
        let err = DeviceConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains(&format!("line {line}")), "{err}");
        assert!(err.contains("positive"), "{err}");
    }

    #[test]
    fn duplicate_names_are_rejected_with_a_line() {
        let mut cfg = DeviceConfig::reference_device();
        cfg.chains[1].name = "Q2".into();
        cfg.generator.qubits[1].name = "Q2".into();
        let err = DeviceConfig::from_json_str(&cfg.to_json_string()).unwrap_err().to_string();
        assert!(err.contains("duplicate") && err.contains("line"), "{err}");
    }

    #[test]
    fn unknown_fields_and_chains_are_rejected() {
        let text = DeviceConfig::reference_device().to_json_string().replacen("\"herald\"", "\"heral\"", 1);
        assert!(DeviceConfig::from_json_str(&text).is_err());
        assert!(DeviceConfig::reference_device().index_of("Q9").is_err());
        assert_eq!(DeviceConfig::reference_device().index_of("Q6").unwrap(), 3);
    }
}
