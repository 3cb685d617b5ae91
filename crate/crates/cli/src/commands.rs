//! Command implementations. Each command returns its standard output and
//! the files it wants written, so reruns can be compared byte for byte.

use std::fmt::Write as _;
use std::path::PathBuf;

use microgrid_core::engine::{run, steady_state, summarize, OperatingPoint, Scenario, Summary};
use microgrid_core::inner_control::{control_set, quantization_error};
use microgrid_core::stability::{
    certify, current_loop_system, demo_epsilon, demo_system, grid_inputs, sampled_quantization_error, scalar_demo,
    verify_trajectory, InputSet, QuantizedSystem,
};
use microgrid_core::Error as CoreError;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::{ConfigError, StabilitySection};
use crate::csv;

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Config = 1,
    Divergence = 2,
    Oracle = 3,
    Certification = 4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub status: ExitStatus,
    pub message: String,
}

impl CliError {
    pub fn new(status: ExitStatus, message: impl Into<String>) -> Self {
        CliError { status, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.status as i32
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(ExitStatus::Config, format!("configuration error: {e}"))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::Diverged { .. } => ExitStatus::Divergence,
            CoreError::OracleFailure { .. } => ExitStatus::Oracle,
            CoreError::NotCertifiable(_) => ExitStatus::Certification,
            CoreError::Config(_) | CoreError::EmptyWindow { .. } | CoreError::Io(_) => ExitStatus::Config,
        };
        CliError::new(status, e.to_string())
    }
}

/// What a command prints and writes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Output {
    pub stdout: String,
    pub files: Vec<(PathBuf, Vec<u8>)>,
    /// Set when the command ran to completion but its verdict is negative.
    pub failure: Option<CliError>,
}

fn kv(out: &mut String, key: impl std::fmt::Display, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key} = {value}");
}

/// Averaging windows at the end of each interval between load events:
/// the last fifth of the start-up interval, the last half (at most 0.5 s)
/// of every later one.
pub fn summary_windows(sc: &Scenario) -> Vec<(f64, f64)> {
    let mut bounds = vec![0.0];
    bounds.extend(sc.event_times());
    bounds.push(sc.duration);
    bounds
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let len = w[1] - w[0];
            let span = if k == 0 { len / 5.0 } else { (len / 2.0).min(0.5) };
            (w[1] - span, w[1])
        })
        .collect()
}

fn write_summary(out: &mut String, prefix: &str, s: &Summary) {
    kv(out, format_args!("{prefix}_start_s"), s.start);
    kv(out, format_args!("{prefix}_end_s"), s.end);
    kv(out, format_args!("{prefix}_samples"), s.samples);
    for (i, ibr) in s.ibrs.iter().enumerate() {
        let p = format!("{prefix}_ibr{}", i + 1);
        kv(out, format_args!("{p}_P_W"), ibr.p_mean);
        kv(out, format_args!("{p}_Q_var"), ibr.q_mean);
        kv(out, format_args!("{p}_f_Hz"), ibr.f_mean);
        kv(out, format_args!("{p}_vd_V"), ibr.v_peak);
        kv(out, format_args!("{p}_vd_ripple"), ibr.v_ripple);
        kv(out, format_args!("{p}_i_amp_A"), ibr.i_amp);
    }
    kv(out, format_args!("{prefix}_sharing_error"), s.sharing_error);
    kv(out, format_args!("{prefix}_freq_deviation_Hz"), s.freq_deviation);
    kv(out, format_args!("{prefix}_voltage_deviation"), s.voltage_deviation);
}

pub fn cmd_run(sc: &Scenario, out: PathBuf, gnuplot: Option<PathBuf>) -> Result<Output, CliError> {
    let log = run(sc)?;
    let f_nom = sc.omega_g / (2.0 * std::f64::consts::PI);
    let v_nom = sc.droop[0].v_nom;
    let mut text = String::new();
    kv(&mut text, "csv", out.display());
    kv(&mut text, "steps", sc.steps());
    kv(&mut text, "samples", log.records.len());
    kv(&mut text, "sample_period_s", log.sample_period());
    for (k, (a, b)) in summary_windows(sc).into_iter().enumerate() {
        let s = summarize(&log, a, b, f_nom, v_nom)?;
        write_summary(&mut text, &format!("window{}", k + 1), &s);
    }
    let mut files = vec![(out.clone(), csv::write(&log).into_bytes())];
    if let Some(path) = gnuplot {
        kv(&mut text, "gnuplot_script", path.display());
        files.push((path, csv::gnuplot_script(&out.display().to_string(), log.n_ibrs()).into_bytes()));
    }
    Ok(Output { stdout: text, files, failure: None })
}

/// Which loads are connected for a steady-state solve.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadSelector {
    /// Loads active at a given time.
    At(f64),
    None,
    All,
    /// One-based load indices.
    List(Vec<usize>),
}

impl std::str::FromStr for LoadSelector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "initial" => Ok(LoadSelector::At(0.0)),
            "none" => Ok(LoadSelector::None),
            "all" => Ok(LoadSelector::All),
            _ => {
                if let Some(t) = s.strip_prefix("at=") {
                    return t.parse().map(LoadSelector::At).map_err(|_| format!("bad time in {s:?}"));
                }
                s.split(',')
                    .map(|k| k.trim().parse::<usize>().map_err(|_| format!("bad load selector {s:?}")))
                    .collect::<Result<Vec<_>, _>>()
                    .map(LoadSelector::List)
            }
        }
    }
}

impl LoadSelector {
    pub fn mask(&self, sc: &Scenario) -> Result<Vec<bool>, CliError> {
        let n = sc.loads.len();
        Ok(match self {
            LoadSelector::At(t) => sc.active_loads_at(*t),
            LoadSelector::None => vec![false; n],
            LoadSelector::All => vec![true; n],
            LoadSelector::List(ks) => {
                let mut m = vec![false; n];
                for &k in ks {
                    if k == 0 || k > n {
                        return Err(CliError::new(ExitStatus::Config, format!("load {k} is outside 1..={n}")));
                    }
                    m[k - 1] = true;
                }
                m
            }
        })
    }
}

pub fn write_operating_point(out: &mut String, op: &OperatingPoint, names: &[String]) {
    kv(out, "iterations", op.iterations);
    kv(out, "residual", op.residual);
    kv(out, "frequency_Hz", op.frequency_hz());
    kv(out, "omega_rad_s", op.omega);
    for (i, o) in op.ibrs.iter().enumerate() {
        let p = format!("ibr{}", i + 1);
        kv(out, format_args!("{p}_P_W"), o.p);
        kv(out, format_args!("{p}_Q_var"), o.q);
        kv(out, format_args!("{p}_v_V"), o.v);
        kv(out, format_args!("{p}_delta_rad"), o.delta);
        kv(out, format_args!("{p}_bridge_P_W"), o.p_inverter);
    }
    kv(out, "load_P_W", op.load_power);
    kv(out, "load_Q_var", op.load_reactive);
    kv(out, "filter_losses_W", op.filter_losses);
    kv(out, "line_losses_W", op.line_losses);
    for (name, v) in names.iter().zip(op.x.iter()) {
        kv(out, format_args!("x_{name}"), v);
    }
}

pub fn cmd_steady(sc: &Scenario, loads: &LoadSelector) -> Result<Output, CliError> {
    let mask = loads.mask(sc)?;
    let op = steady_state(sc, &mask)?;
    let mut text = String::new();
    let active: Vec<String> = mask.iter().enumerate().filter(|(_, &on)| on).map(|(k, _)| (k + 1).to_string()).collect();
    kv(&mut text, "active_loads", if active.is_empty() { "none".to_string() } else { active.join(",") });
    let names = sc.model()?.layout().state_names();
    write_operating_point(&mut text, &op, &names);
    Ok(Output { stdout: text, files: vec![], failure: None })
}

/// Built-in quantized systems for the `stability` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DemoSystem {
    /// Two-state oscillator with a square input grid.
    Planar,
    /// Scalar plant with three inputs.
    Scalar,
    /// Linearized inverter current loop with the seven bridge vectors.
    CurrentLoop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityOptions {
    pub system: Option<DemoSystem>,
    /// Points per axis of the planar input grid.
    pub grid: usize,
    pub epsilon_zero: bool,
    pub steps: Option<usize>,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions { system: None, grid: 3, epsilon_zero: false, steps: None }
    }
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::new(ExitStatus::Config, format!("stability.{name} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

struct StabilityCase {
    label: String,
    sys: QuantizedSystem,
    q: DMatrix<f64>,
    epsilon: f64,
    x0: DVector<f64>,
    steps: usize,
}

fn stability_case(section: Option<&StabilitySection>, opts: &StabilityOptions, sc: &Scenario) -> Result<StabilityCase, CliError> {
    let default_steps = 100_000;
    let mut case = match (opts.system, section) {
        (None, Some(s)) => {
            let a_d = matrix(&s.a_d, "a_d")?;
            let b_d = matrix(&s.b_d, "b_d")?;
            let k = matrix(&s.k, "k")?;
            let inputs = match (&s.inputs, s.grid_half_width, s.grid_points) {
                (Some(points), _, _) => InputSet::Finite(points.iter().map(|p| DVector::from_column_slice(p)).collect()),
                (None, Some(h), Some(per_axis)) => InputSet::Finite(grid_inputs(h, per_axis)),
                _ => InputSet::Exact,
            };
            let sys = QuantizedSystem { a_d, b_d, k, inputs, radius: s.radius };
            sys.validate()?;
            let n = sys.states();
            let q = match &s.q {
                Some(rows) => matrix(rows, "q")?,
                None => DMatrix::identity(n, n),
            };
            let epsilon = match s.epsilon {
                Some(e) => e,
                None => {
                    let per_axis = (1e6f64.powf(1.0 / n as f64).floor() as usize).max(3);
                    sampled_quantization_error(&sys, per_axis)
                }
            };
            let x0 = match &s.x0 {
                Some(v) => DVector::from_column_slice(v),
                None => DVector::from_fn(n, |i, _| if i == 0 { 0.9 * s.radius } else { 0.0 }),
            };
            StabilityCase { label: "config".into(), sys, q, epsilon, x0, steps: s.steps.unwrap_or(default_steps) }
        }
        (system, _) => match system.unwrap_or(DemoSystem::Planar) {
            DemoSystem::Planar => StabilityCase {
                label: format!("planar-demo-{0}x{0}", opts.grid),
                sys: demo_system(opts.grid),
                q: DMatrix::identity(2, 2),
                epsilon: demo_epsilon(opts.grid),
                x0: DVector::from_vec(vec![0.9, 0.0]),
                steps: default_steps,
            },
            DemoSystem::Scalar => StabilityCase {
                label: "scalar-demo".into(),
                sys: scalar_demo(0.55),
                q: DMatrix::identity(1, 1),
                epsilon: 0.275,
                x0: DVector::from_element(1, 0.8),
                steps: default_steps,
            },
            DemoSystem::CurrentLoop => {
                let ibr = sc.ibrs[0];
                let sys = current_loop_system(&ibr, sc.omega_g, sc.tau_s);
                let epsilon = quantization_error(&control_set(ibr.v_dc, 0.0), 1.0);
                let x0 = DVector::from_vec(vec![0.9 * sys.radius, 0.0]);
                StabilityCase { label: "current-loop".into(), sys, q: DMatrix::identity(2, 2), epsilon, x0, steps: default_steps }
            }
        },
    };
    if opts.epsilon_zero {
        case.sys.inputs = InputSet::Exact;
        case.epsilon = 0.0;
    }
    if let Some(s) = opts.steps {
        case.steps = s;
    }
    Ok(case)
}

pub fn cmd_stability(section: Option<&StabilitySection>, opts: &StabilityOptions, sc: &Scenario) -> Result<Output, CliError> {
    let case = stability_case(section, opts, sc)?;
    let cert = certify(&case.sys, &case.q, case.epsilon)?;
    let c = &cert.constants;
    let mut text = String::new();
    kv(&mut text, "system", &case.label);
    kv(&mut text, "states", case.sys.states());
    kv(&mut text, "alpha1", c.alpha1);
    kv(&mut text, "alpha2", c.alpha2);
    kv(&mut text, "alpha3", c.alpha3);
    kv(&mut text, "alpha4", c.alpha4);
    kv(&mut text, "L_v", c.l_v);
    kv(&mut text, "z_bar", c.z_bar);
    kv(&mut text, "epsilon", cert.epsilon);
    kv(&mut text, "r", cert.r);
    kv(&mut text, "condition_ratio", c.condition_ratio());
    kv(&mut text, "condition", if c.condition_ratio() < 2.0 { "PASS" } else { "FAIL" });
    let report = verify_trajectory(&case.sys, &cert, &case.x0, case.steps)?;
    kv(&mut text, "steps", report.steps);
    kv(&mut text, "decrease_fraction", report.decrease_fraction());
    kv(&mut text, "recursion_fraction", report.recursion_fraction());
    kv(&mut text, "max_V", report.max_v);
    kv(&mut text, "limsup", report.limsup);
    kv(&mut text, "max_projection_error", report.max_projection_error);
    kv(
        &mut text,
        "left_ball_at",
        report.left_ball_at.map_or_else(|| "none".to_string(), |k| k.to_string()),
    );
    let verdict = report.passed();
    kv(&mut text, "verdict", if verdict { "PASS" } else { "FAIL" });
    let failure = (!verdict).then(|| {
        let why = if let Some(k) = report.left_ball_at {
            format!("hypothesis violated: trajectory left the state ball at step {k}")
        } else if report.decrease_holds != report.steps {
            format!("decrease inequality failed at {} of {} steps", report.steps - report.decrease_holds, report.steps)
        } else {
            format!("observed limsup {} exceeds the bound {}", report.limsup, report.bound)
        };
        CliError::new(ExitStatus::Certification, why)
    });
    Ok(Output { stdout: text, files: vec![], failure })
}

/// Quantity varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    /// Per-inverter scale of the P-f droop slope.
    Mp,
    /// Per-inverter scale of the Q-V droop slope.
    Nq,
    /// Scale of every line impedance.
    Line,
}

/// Scales of one sweep point: one entry per inverter (or line), or a single
/// entry applied to all of them.
pub type SweepPoint = Vec<f64>;

pub fn parse_point(s: &str) -> Result<SweepPoint, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad sweep point {s:?}")))
        .collect()
}

/// `start:stop:count` as single-value points.
pub fn parse_range(s: &str) -> Result<Vec<SweepPoint>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("expected start:stop:count, got {s:?}");
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let k: usize = parts[2].parse().map_err(|_| bad())?;
    if k == 0 {
        return Err(bad());
    }
    if k == 1 {
        return Ok(vec![vec![a]]);
    }
    Ok((0..k).map(|i| vec![a + (b - a) * i as f64 / (k - 1) as f64]).collect())
}

fn expand(point: &[f64], count: usize, what: &str) -> Result<Vec<f64>, String> {
    match point.len() {
        1 => Ok(vec![point[0]; count]),
        l if l == count => Ok(point.to_vec()),
        l => Err(format!("sweep point has {l} values, expected 1 or {count} ({what})")),
    }
}

pub fn apply_point(sc: &Scenario, param: SweepParam, point: &[f64]) -> Result<Scenario, String> {
    let mut sc = sc.clone();
    match param {
        SweepParam::Mp => {
            for (d, k) in sc.droop.iter_mut().zip(expand(point, sc.topology.n, "inverters")?) {
                d.m_p *= k;
            }
        }
        SweepParam::Nq => {
            for (d, k) in sc.droop.iter_mut().zip(expand(point, sc.topology.n, "inverters")?) {
                d.n_q *= k;
            }
        }
        SweepParam::Line => {
            for (l, k) in sc.lines.iter_mut().zip(expand(point, sc.topology.m(), "lines")?) {
                l.r *= k;
                l.l *= k;
            }
        }
    }
    sc.validate().map_err(|e| e.to_string())?;
    Ok(sc)
}

fn sweep_row(sc: &Scenario, window: (f64, f64), label: &str, n: usize) -> String {
    let nan_row = |status: &str| {
        let cells = 3 + 4 * n + 2;
        format!("{label},{status}{}", ",nan".repeat(cells))
    };
    let mut sc = sc.clone();
    sc.duration = sc.duration.min(window.1);
    let op = match steady_state(&sc, &sc.active_loads_at(window.0)) {
        Ok(op) => op,
        Err(e) => return nan_row(&format!("oracle failure: {}", e.to_string().replace(',', ";"))),
    };
    let log = match run(&sc) {
        Ok(log) => log,
        Err(e) => return nan_row(&format!("diverged: {}", e.to_string().replace(',', ";"))),
    };
    let f_nom = sc.omega_g / (2.0 * std::f64::consts::PI);
    let s = match summarize(&log, window.0, window.1, f_nom, sc.droop[0].v_nom) {
        Ok(s) => s,
        Err(e) => return nan_row(&e.to_string().replace(',', ";")),
    };
    let spread = |q: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = q.collect();
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let mut cells = vec![
        csv::fmt_sig9(s.sharing_error),
        csv::fmt_sig9(s.freq_deviation),
        csv::fmt_sig9(s.voltage_deviation),
    ];
    cells.extend(s.ibrs.iter().map(|i| csv::fmt_sig9(i.p_mean)));
    cells.extend(s.ibrs.iter().map(|i| csv::fmt_sig9(i.q_mean)));
    cells.extend(op.ibrs.iter().map(|o| csv::fmt_sig9(o.p)));
    cells.extend(op.ibrs.iter().map(|o| csv::fmt_sig9(o.q)));
    cells.push(csv::fmt_sig9(spread(&mut s.ibrs.iter().map(|i| i.q_mean))));
    cells.push(csv::fmt_sig9(spread(&mut op.ibrs.iter().map(|o| o.q))));
    format!("{label},ok,{}", cells.join(","))
}

pub const SWEEP_SCHEMA: &str = "# microgrid-sweep v1";

pub fn cmd_sweep(
    sc: &Scenario,
    param: SweepParam,
    points: &[SweepPoint],
    window: Option<(f64, f64)>,
    out: Option<PathBuf>,
) -> Result<Output, CliError> {
    if points.is_empty() {
        return Err(CliError::new(ExitStatus::Config, "sweep needs at least one point"));
    }
    let window = window.unwrap_or_else(|| summary_windows(sc)[0]);
    let n = sc.topology.n;
    let scenarios = points
        .iter()
        .map(|p| apply_point(sc, param, p).map_err(|e| CliError::new(ExitStatus::Config, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<String> = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "))
        .collect();
    let rows: Vec<String> = scenarios
        .par_iter()
        .zip(labels.par_iter())
        .map(|(s, label)| sweep_row(s, window, label, n))
        .collect();

    let mut header = vec!["point".to_string(), "status".into(), "sharing_error".into(), "freq_deviation_Hz".into(), "voltage_deviation".into()];
    header.extend((1..=n).map(|i| format!("ibr{i}_P_W")));
    header.extend((1..=n).map(|i| format!("ibr{i}_Q_var")));
    header.extend((1..=n).map(|i| format!("oracle_ibr{i}_P_W")));
    header.extend((1..=n).map(|i| format!("oracle_ibr{i}_Q_var")));
    header.push("Q_spread_var".into());
    header.push("oracle_Q_spread_var".into());
    let mut table = format!("{SWEEP_SCHEMA}\n# parameter = {param:?}, window = [{}, {}) s\n{}\n", window.0, window.1, header.join(","));
    for r in &rows {
        table.push_str(r);
        table.push('\n');
    }
    Ok(match out {
        Some(path) => Output { stdout: format!("sweep = {}\npoints = {}\n", path.display(), rows.len()), files: vec![(path, table.into_bytes())], failure: None },
        None => Output { stdout: table, files: vec![], failure: None },
    })
}
