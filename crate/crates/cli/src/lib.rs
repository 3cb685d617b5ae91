//! Command-line front end: argument definitions, config loading, CSV output
//! and the command implementations behind the `microgrid` binary.
// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod csv;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{CliError, DemoSystem, ExitStatus, LoadSelector, Output, StabilityOptions, SweepParam, SweepPoint};
use config::{LogRate, Overrides};

#[derive(Debug, Parser)]
#[command(name = "microgrid", version, about = "Droop-controlled inverter microgrid simulator")]
pub struct Cli {
    /// Scenario file; the built-in three-inverter scenario when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output path for files the command writes.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run the command twice and fail unless both outputs are byte identical.
    #[arg(long, global = true)]
    pub seed_check: bool,
    /// Euler substeps per control period.
    #[arg(long, global = true)]
    pub substeps: Option<usize>,
    /// Simulated time in seconds.
    #[arg(long, global = true)]
    pub duration: Option<f64>,
    /// Logged samples per second, or "full" for every control period.
    #[arg(long, global = true)]
    pub log_rate: Option<LogRate>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the scenario, write the time series and print window summaries.
    Run {
        /// Also write a gnuplot script for the CSV.
        #[arg(long)]
        gnuplot_script: Option<PathBuf>,
    },
    /// Solve the steady-state operating point.
    Steady {
        /// initial, none, all, at=T (loads active at time T) or a list such as 1,2,4.
        #[arg(long, default_value = "initial")]
        loads: LoadSelector,
    },
    /// Certify a quantized feedback system and check a trajectory against the bound.
    Stability {
        /// Built-in system; the config's [stability] section, else planar, when omitted.
        #[arg(long, value_enum)]
        system: Option<DemoSystem>,
        /// Points per axis of the planar demo's input grid.
        #[arg(long, default_value_t = 3)]
        grid: usize,
        /// Use the exact feedback law (no quantization).
        #[arg(long)]
        epsilon_zero: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the scenario at several parameter values in parallel.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// A point: one scale per inverter (or line), or a single scale for all.
        /// Repeat the flag for more points.
        #[arg(long = "point", value_parser = commands::parse_point)]
        points: Vec<SweepPoint>,
        /// start:stop:count of a single scale applied to the second and later
        /// inverters (mp, nq) or to every line.
        #[arg(long)]
        range: Option<String>,
        /// Averaging window start:end in seconds; the first summary window by default.
        #[arg(long)]
        window: Option<String>,
    },
}

fn parse_window(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::new(ExitStatus::Config, format!("expected start:end, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let a: f64 = a.parse().map_err(|_| bad())?;
    let b: f64 = b.parse().map_err(|_| bad())?;
    if !(b > a && a >= 0.0) {
        return Err(bad());
    }
    Ok((a, b))
}

fn range_points(param: SweepParam, n: usize, range: &str) -> Result<Vec<SweepPoint>, CliError> {
    let scales = commands::parse_range(range).map_err(|e| CliError::new(ExitStatus::Config, e))?;
    Ok(scales
        .into_iter()
        .map(|s| match param {
            SweepParam::Mp | SweepParam::Nq => (0..n).map(|i| if i == 0 { 1.0 } else { s[0] }).collect(),
            SweepParam::Line => s,
        })
        .collect())
}

fn execute_once(cli: &Cli) -> Result<Output, CliError> {
    let overrides = Overrides { substeps: cli.substeps, duration: cli.duration, log_rate: cli.log_rate };
    let (sc, stability) = config::resolve(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Run { gnuplot_script } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("run.csv"));
            commands::cmd_run(&sc, out, gnuplot_script.clone())
        }
        Command::Steady { loads } => commands::cmd_steady(&sc, loads),
        Command::Stability { system, grid, epsilon_zero, steps } => {
            let opts = StabilityOptions { system: *system, grid: *grid, epsilon_zero: *epsilon_zero, steps: *steps };
            commands::cmd_stability(stability.as_ref(), &opts, &sc)
        }
        Command::Sweep { param, points, range, window } => {
            let mut all = points.clone();
            if let Some(r) = range {
                all.extend(range_points(*param, sc.topology.n, r)?);
            }
            let window = window.as_deref().map(parse_window).transpose()?;
            commands::cmd_sweep(&sc, *param, &all, window, cli.out.clone())
        }
    }
}

/// Runs the parsed command. With `--seed-check` it runs twice and reports a
/// mismatch as a failure.
pub fn execute(cli: &Cli) -> Result<Output, CliError> {
    let first = execute_once(cli)?;
    if !cli.seed_check {
        return Ok(first);
    }
    let second = execute_once(cli)?;
    let mut out = first.clone();
    let mismatch = if first.stdout != second.stdout {
        Some("standard output differs between runs".to_string())
    } else {
        first
            .files
            .iter()
            .zip(&second.files)
            .find(|(a, b)| a != b)
            .map(|(a, _)| format!("{} differs between runs", a.0.display()))
    };
    out.stdout.push_str(&format!("seed_check = {}\n", if mismatch.is_none() { "identical" } else { "MISMATCH" }));
    if let Some(m) = mismatch {
        out.failure = Some(CliError::new(ExitStatus::Divergence, format!("seed check failed: {m}")));
    }
    Ok(out)
}
