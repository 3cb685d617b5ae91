//! TOML scenario files.
//!
//! Voltages are given as rms line-to-neutral values and frequencies in Hz;
//! both are converted to peak volts and rad/s here and nowhere else.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::path::Path;

use microgrid_core::droop::DroopParams;
use microgrid_core::engine::{InitialState, MpcMode, Scenario};
use microgrid_core::inner_control::{MpcWeights, PiGains};
use microgrid_core::plant::{reference_ibr, reference_line, IbrParams, LineParams, LoadSpec, Topology};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub ibr: BTreeMap<String, IbrSection>,
    #[serde(default)]
    pub line: BTreeMap<String, LineSection>,
    #[serde(default)]
    pub load: BTreeMap<String, LoadSection>,
    #[serde(default)]
    pub droop: DroopSection,
    #[serde(default)]
    pub pi: PiSection,
    #[serde(default)]
    pub sim: SimSection,
    pub stability: Option<StabilitySection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub frequency_hz: Option<f64>,
    pub v_rated_rms: Option<f64>,
    pub buses: Option<usize>,
    /// One-based `[from, to]` bus pairs.
    pub lines: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbrSection {
    pub r_ohm: Option<f64>,
    pub l_h: Option<f64>,
    pub c_f: Option<f64>,
    pub v_dc: Option<f64>,
    pub m_p: Option<f64>,
    pub n_q: Option<f64>,
    pub v_nom_rms: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSection {
    pub r_ohm: Option<f64>,
    pub l_h: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSection {
    /// One-based bus index.
    pub bus: usize,
    pub p_w: f64,
    #[serde(default)]
    pub q_var: f64,
    pub t_on_s: Option<f64>,
    pub t_off_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroopSection {
    pub m_p: Option<f64>,
    pub n_q: Option<f64>,
    pub v_nom_rms: Option<f64>,
    /// Power measurement filter cutoff; `inf` disables filtering.
    pub filter_cutoff_hz: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiSection {
    pub kp: Option<f64>,
    pub ki: Option<f64>,
    pub limit_a: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub tau_s: Option<f64>,
    pub substeps: Option<usize>,
    pub duration_s: Option<f64>,
    pub log_every: Option<usize>,
    /// `"precharged"` or `"zero"`.
    pub initial: Option<String>,
    /// `"decentralized"` or `"centralized"`.
    pub mpc_mode: Option<String>,
    pub mpc_w_i: Option<f64>,
    pub mpc_w_v: Option<f64>,
}

/// Optional user-supplied quantized system for the `stability` command.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    pub a_d: Vec<Vec<f64>>,
    pub b_d: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub radius: f64,
    /// Explicit finite input set; omitted means a square grid.
    pub inputs: Option<Vec<Vec<f64>>>,
    /// Half width and points per axis of the input grid (two inputs only).
    pub grid_half_width: Option<f64>,
    pub grid_points: Option<usize>,
    /// Quantization error; sampled from the input set when omitted.
    pub epsilon: Option<f64>,
    pub q: Option<Vec<Vec<f64>>>,
    pub x0: Option<Vec<f64>>,
    pub steps: Option<usize>,
}

/// Reads a value or falls back to a default, logging the substitution.
fn or_default<T: std::fmt::Debug>(value: Option<T>, key: &str, default: T) -> T {
    value.unwrap_or_else(|| {
        log::info!("{key} not set, using {default:?}");
        default
    })
}

fn section_index(name: &str, kind: &str, count: usize) -> Result<usize, ConfigError> {
    let k: usize = name
        .parse()
        .map_err(|_| invalid(format!("section [{kind}.{name}] must be numbered from 1")))?;
    if k == 0 || k > count {
        return Err(invalid(format!("section [{kind}.{name}] is outside 1..={count}")));
    }
    Ok(k - 1)
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// Builds the scenario, filling anything unspecified with the reference
    /// system and its load step.
    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        let base = Scenario::reference();
        let g = &self.grid;
        let f_hz = or_default(g.frequency_hz, "grid.frequency_hz", 50.0);
        let omega_g = 2.0 * PI * f_hz;
        let n = or_default(g.buses, "grid.buses", base.n());
        let topology = match &g.lines {
            Some(pairs) => {
                let mut edges = Vec::with_capacity(pairs.len());
                for (j, &[a, b]) in pairs.iter().enumerate() {
                    if a == 0 || b == 0 {
                        return Err(invalid(format!("grid.lines entry {} uses bus 0; buses are numbered from 1", j + 1)));
                    }
                    edges.push((a - 1, b - 1));
                }
                Topology::new(n, edges).map_err(|e| invalid(e.to_string()))?
            }
            None => {
                log::info!("grid.lines not set, using a chain of {n} buses");
                Topology::chain(n)
            }
        };
        let m = topology.m();

        let d = &self.droop;
        let v_nom_rms = or_default(d.v_nom_rms, "droop.v_nom_rms", 220.0);
        let default_droop = DroopParams {
            m_p: or_default(d.m_p, "droop.m_p", base.droop[0].m_p),
            n_q: or_default(d.n_q, "droop.n_q", base.droop[0].n_q),
            v_nom: v_nom_rms * SQRT_2,
            omega_g,
        };
        let cutoff_hz = or_default(d.filter_cutoff_hz, "droop.filter_cutoff_hz", 10.0);

        let mut ibrs = vec![reference_ibr(); n];
        let mut droop = vec![default_droop; n];
        for (name, s) in &self.ibr {
            let i = section_index(name, "ibr", n)?;
            let t = reference_ibr();
            ibrs[i] = IbrParams {
                r: s.r_ohm.unwrap_or(t.r),
                l: s.l_h.unwrap_or(t.l),
                c: s.c_f.unwrap_or(t.c),
                v_dc: s.v_dc.unwrap_or(t.v_dc),
            };
            droop[i] = DroopParams {
                m_p: s.m_p.unwrap_or(default_droop.m_p),
                n_q: s.n_q.unwrap_or(default_droop.n_q),
                v_nom: s.v_nom_rms.map_or(default_droop.v_nom, |v| v * SQRT_2),
                omega_g,
            };
        }
        if self.ibr.len() < n {
            log::info!("{} of {n} [ibr.N] sections missing, using the reference filter values", n - self.ibr.len());
        }

        let mut lines = vec![reference_line(); m];
        for (name, s) in &self.line {
            let j = section_index(name, "line", m)?;
            let t = reference_line();
            lines[j] = LineParams { r: s.r_ohm.unwrap_or(t.r), l: s.l_h.unwrap_or(t.l) };
        }

        let loads = if self.load.is_empty() {
            log::info!("no [load.N] sections, using the reference loads and bus-3 step");
            base.loads.clone()
        } else {
            let mut keyed: Vec<(usize, &LoadSection)> = Vec::with_capacity(self.load.len());
            for (name, s) in &self.load {
                keyed.push((section_index(name, "load", self.load.len())?, s));
            }
            keyed.sort_by_key(|(k, _)| *k);
            keyed
                .into_iter()
                .map(|(k, s)| {
                    if s.bus == 0 || s.bus > n {
                        return Err(invalid(format!("load.{}.bus = {} is outside 1..={n}", k + 1, s.bus)));
                    }
                    Ok(LoadSpec {
                        bus: s.bus - 1,
                        p: s.p_w,
                        q: s.q_var,
                        t_on: s.t_on_s.unwrap_or(0.0),
                        t_off: s.t_off_s.unwrap_or(f64::INFINITY),
                    })
                })
                .collect::<Result<_, _>>()?
        };

        let p = &self.pi;
        let pi_default = PiGains::default();
        let pi = PiGains {
            kp: or_default(p.kp, "pi.kp", pi_default.kp),
            ki: or_default(p.ki, "pi.ki", pi_default.ki),
            limit: or_default(p.limit_a, "pi.limit_a", pi_default.limit),
        };

        let s = &self.sim;
        let initial = match or_default(s.initial.as_deref(), "sim.initial", "precharged") {
            "precharged" => InitialState::Precharged,
            "zero" => InitialState::Zero,
            other => return Err(invalid(format!("sim.initial must be \"precharged\" or \"zero\", got {other:?}"))),
        };
        let mpc_mode = match or_default(s.mpc_mode.as_deref(), "sim.mpc_mode", "decentralized") {
            "decentralized" => MpcMode::Decentralized,
            "centralized" => MpcMode::Centralized,
            other => {
                return Err(invalid(format!(
                    "sim.mpc_mode must be \"decentralized\" or \"centralized\", got {other:?}"
                )))
            }
        };
        let w = MpcWeights::default();
        let scenario = Scenario {
            ibrs,
            lines,
            topology,
            loads,
            droop,
            omega_c: 2.0 * PI * cutoff_hz,
            pi,
            mpc: MpcWeights {
                w_i: or_default(s.mpc_w_i, "sim.mpc_w_i", w.w_i),
                w_v: or_default(s.mpc_w_v, "sim.mpc_w_v", w.w_v),
            },
            mpc_mode,
            omega_g,
            v_rated_rms: or_default(g.v_rated_rms, "grid.v_rated_rms", 220.0),
            tau_s: or_default(s.tau_s, "sim.tau_s", base.tau_s),
            substeps: or_default(s.substeps, "sim.substeps", base.substeps),
            duration: or_default(s.duration_s, "sim.duration_s", base.duration),
            log_every: or_default(s.log_every, "sim.log_every", base.log_every),
            initial,
        };
        scenario.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(scenario)
    }
}

/// Command-line overrides applied after the file is read.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub substeps: Option<usize>,
    pub duration: Option<f64>,
    /// Logged samples per second; `None` keeps the file value.
    pub log_rate: Option<LogRate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogRate {
    /// Every control period.
    Full,
    Hz(f64),
}

impl std::str::FromStr for LogRate {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "full" {
            return Ok(LogRate::Full);
        }
        match s.parse::<f64>() {
            Ok(hz) if hz > 0.0 && hz.is_finite() => Ok(LogRate::Hz(hz)),
            _ => Err(format!("expected a positive rate in Hz or \"full\", got {s:?}")),
        }
    }
}

impl Overrides {
    pub fn apply(&self, mut sc: Scenario) -> Result<Scenario, ConfigError> {
        if let Some(s) = self.substeps {
            sc.substeps = s;
        }
        if let Some(d) = self.duration {
            sc.duration = d;
        }
        match self.log_rate {
            Some(LogRate::Full) => sc.log_every = 1,
            Some(LogRate::Hz(hz)) => {
                let every = (1.0 / (hz * sc.tau_s)).round().max(1.0);
                let actual = 1.0 / (every * sc.tau_s);
                if (actual - hz).abs() > 1e-9 * hz {
                    log::info!("log rate {hz} Hz is not a divisor of the control rate, using {actual} Hz");
                }
                sc.log_every = every as usize;
            }
            None => {}
        }
        sc.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(sc)
    }
}

/// The scenario from an optional file plus overrides.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<(Scenario, Option<StabilitySection>), ConfigError> {
    match path {
        Some(p) => {
            let file = ConfigFile::load(p)?;
            Ok((overrides.apply(file.scenario()?)?, file.stability))
        }
        None => {
            log::info!("no --config given, using the built-in three-inverter scenario");
            Ok((overrides.apply(Scenario::reference())?, None))
        }
    }
}
