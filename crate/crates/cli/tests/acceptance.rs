//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use microgrid_cli::config::{resolve, Overrides};
use microgrid_core::engine::{run, run_with, steady_state, summarize, OperatingPoint, Scenario, Summary, TimeSeriesLog};
use microgrid_core::frames::DqVector;
use microgrid_core::inner_control::{
    control_set, quantization_error, select_switch, LocalMeasurement, MpcReference, MpcWeights, SWITCH_STATES,
};
use microgrid_core::plant::{incidence, reference_ibr, Topology};
use microgrid_core::stability::{certify, demo_epsilon, demo_system, verify_trajectory};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WINDOWS: [(f64, f64); 3] = [(0.8, 1.0), (2.5, 3.0), (3.5, 4.0)];

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

/// The shipped scenario simulated once, with per-window means of the full
/// state in inverter 1's frame and the oracle for each window's loads.
struct Baseline {
    scenario: Scenario,
    log: TimeSeriesLog,
    elapsed: Duration,
    summaries: Vec<Summary>,
    oracles: Vec<OperatingPoint>,
    state_means: Vec<DVector<f64>>,
    /// Mean per-leg switching frequency over the run, in Hz.
    switching_hz: f64,
}

impl Baseline {
    fn compute() -> Baseline {
        let (scenario, _) = resolve(Some(&shipped_config()), &Overrides::default()).expect("shipped config");
        let dim = scenario.model().unwrap().layout().dim();
        let mut sums = vec![DVector::<f64>::zeros(dim); WINDOWS.len()];
        let mut counts = [0usize; WINDOWS.len()];
        let mut previous: Vec<Option<usize>> = vec![None; scenario.n()];
        let mut transitions = 0usize;
        let start = Instant::now();
        let log = run_with(&scenario, |s| {
            for (prev, tel) in previous.iter_mut().zip(s.telemetry()) {
                if let Some(p) = *prev {
                    let (a, c) = (SWITCH_STATES[p].legs(), SWITCH_STATES[tel.switch].legs());
                    transitions += a.iter().zip(c).filter(|(x, y)| **x != *y).count();
                }
                *prev = Some(tel.switch);
            }
            let t = s.time();
            if let Some(w) = WINDOWS.iter().position(|&(a, b)| t >= a && t < b) {
                let delta1 = s.controllers()[0].droop.delta;
                sums[w] += s.model().layout().rotate_state(s.state(), -delta1);
                counts[w] += 1;
            }
        })
        .expect("shipped scenario runs");
        let elapsed = start.elapsed();
        let f_nom = scenario.omega_g / (2.0 * PI);
        let v_nom = scenario.droop[0].v_nom;
        let summaries = WINDOWS.iter().map(|&(a, b)| summarize(&log, a, b, f_nom, v_nom).unwrap()).collect();
        let oracles = WINDOWS
            .iter()
            .map(|&(a, _)| steady_state(&scenario, &scenario.active_loads_at(a)).unwrap())
            .collect();
        let state_means = sums.into_iter().zip(counts).map(|(s, c)| s / c as f64).collect();
        // a switching cycle is two transitions
        let switching_hz = transitions as f64 / (2.0 * 3.0 * scenario.n() as f64 * scenario.duration);
        Baseline { scenario, log, elapsed, summaries, oracles, state_means, switching_hz }
    }
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

struct Verdict {
    pass: bool,
    detail: String,
    info: Vec<String>,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Verdict { pass, detail, info: vec![] }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn voltage_regulation(b: &Baseline) -> Verdict {
    let v_nom = b.scenario.droop[0].v_nom;
    let mut worst: f64 = 0.0;
    for s in &b.summaries {
        for ibr in &s.ibrs {
            worst = worst.max(rel(ibr.v_min, v_nom)).max(rel(ibr.v_max, v_nom));
        }
    }
    let budget = Duration::from_secs(120);
    let mut v = Verdict::new(
        worst <= 0.02 && b.elapsed <= budget,
        format!(
            "worst |v_d - {v_nom:.1}| / {v_nom:.1} = {:.3}% over three windows, 4 s run took {:.2} s at tau_s = {} s with {} substeps",
            100.0 * worst,
            b.elapsed.as_secs_f64(),
            b.scenario.tau_s,
            b.scenario.substeps,
        ),
    );
    let mut literal = b.scenario.clone();
    literal.tau_s = 1e-4;
    literal.substeps = 10;
    literal.log_every = 10;
    let start = Instant::now();
    let outcome = match run(&literal) {
        Ok(_) => "completed".to_string(),
        Err(e) => e.to_string(),
    };
    v.info.push(format!(
        "tau_s = 100 us with 10 substeps: {outcome} after {:.2} s wall time",
        start.elapsed().as_secs_f64()
    ));
    v.info.push(format!("mean per-leg switching frequency {:.0} Hz", b.switching_hz));
    v
}

fn power_sharing(b: &Baseline) -> Verdict {
    let mut mutual: f64 = 0.0;
    let mut oracle: f64 = 0.0;
    for (s, op) in b.summaries.iter().zip(&b.oracles) {
        let p: Vec<f64> = s.ibrs.iter().map(|i| i.p_mean).collect();
        let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
        mutual = mutual.max((max - min) / max);
        for (pi, o) in p.iter().zip(&op.ibrs) {
            oracle = oracle.max(rel(*pi, o.p));
        }
    }
    let mut sc = b.scenario.clone();
    sc.droop[1].m_p *= 2.0;
    sc.droop[2].m_p *= 2.0;
    sc.duration = 1.0;
    let log = run(&sc).unwrap();
    let s = summarize(&log, 0.8, 1.0, 50.0, sc.droop[0].v_nom).unwrap();
    let p: Vec<f64> = s.ibrs.iter().map(|i| i.p_mean).collect();
    let ratios = [p[0] / p[1], p[0] / p[2]];
    let ratio_err = ratios.iter().map(|r| rel(*r, 2.0)).fold(0.0, f64::max).max(rel(p[1], p[2]));
    Verdict::new(
        mutual <= 0.02 && oracle <= 0.01 && ratio_err <= 0.02,
        format!(
            "equal m_p: spread {:.3}%, vs oracle {:.3}%; m_p (1,2,2): P1/P2 = {:.4}, P1/P3 = {:.4}",
            100.0 * mutual,
            100.0 * oracle,
            ratios[0],
            ratios[1]
        ),
    )
}

fn frequency_droop(b: &Baseline) -> Verdict {
    let mut worst: f64 = 0.0;
    for (s, op) in b.summaries.iter().zip(&b.oracles) {
        for ((ibr, o), d) in s.ibrs.iter().zip(&op.ibrs).zip(&b.scenario.droop) {
            let expected = 50.0 - d.m_p * o.p / (2.0 * PI);
            worst = worst.max((ibr.f_mean - expected).abs());
        }
    }
    let (before, during) = (&b.summaries[0], &b.summaries[1]);
    let mut step_err: f64 = 0.0;
    for i in 0..b.scenario.n() {
        let d_p = b.oracles[1].ibrs[i].p - b.oracles[0].ibrs[i].p;
        let expected = b.scenario.droop[i].m_p * d_p / (2.0 * PI);
        let observed = before.ibrs[i].f_mean - during.ibrs[i].f_mean;
        step_err = step_err.max(rel(observed, expected));
    }
    Verdict::new(
        worst <= 0.005 && step_err <= 0.10,
        format!(
            "worst |f - (50 - m_p P/2pi)| = {:.5} Hz; load-step deviation off by {:.2}%",
            worst,
            100.0 * step_err
        ),
    )
}

fn load_step_transient(b: &Baseline) -> Verdict {
    let f_nom = 50.0;
    let v_nom = b.scenario.droop[0].v_nom;
    let amp = |a, c| summarize(&b.log, a, c, f_nom, v_nom).unwrap().ibrs[2].i_amp;
    let pre = b.summaries[0].ibrs[2].i_amp;
    let after_step = amp(1.05, 1.25);
    let recovered = b.summaries[2].ibrs[2].i_amp;
    let back = rel(recovered, pre);
    Verdict::new(
        after_step > pre && back <= 0.02,
        format!(
            "bus-3 current amplitude {pre:.3} A before, {after_step:.3} A after the step, {recovered:.3} A at the end ({:.2}% from initial)",
            100.0 * back
        ),
    )
}

fn certification() -> Verdict {
    let start = Instant::now();
    let q = DMatrix::identity(2, 2);
    let x0 = DVector::from_vec(vec![0.9, 0.0]);
    let sys = demo_system(3);
    let cert = certify(&sys, &q, demo_epsilon(3)).unwrap();
    let report = verify_trajectory(&sys, &cert, &x0, 100_000).unwrap();
    let fine_sys = demo_system(5);
    let fine_eps = demo_epsilon(5);
    let fine_cert = certify(&fine_sys, &q, fine_eps).unwrap();
    let fine = verify_trajectory(&fine_sys, &fine_cert, &x0, 100_000).unwrap();
    let elapsed = start.elapsed();
    let ratio = fine.limsup / report.limsup;
    let bound_ratio = std::f64::consts::FRAC_1_SQRT_2;
    let cond = cert.constants.condition_ratio();
    let pass = cond < 2.0
        && report.decrease_fraction() == 1.0
        && report.limsup <= cert.r
        && fine.passed()
        && report.passed()
        && ratio <= bound_ratio * 1.25
        && (fine_eps / cert.epsilon - 0.5).abs() < 1e-12
        && elapsed <= Duration::from_secs(10);
    Verdict::new(
        pass,
        format!(
            "a3/a1 = {cond:.4}, decrease holds at {:.4}% of {} steps, limsup {:.4} <= r {:.4}; halving eps gives ratio {ratio:.3} (sqrt bound {bound_ratio:.3}); {:.2} s",
            100.0 * report.decrease_fraction(),
            report.steps,
            report.limsup,
            cert.r,
            elapsed.as_secs_f64()
        ),
    )
}

fn quantization() -> Verdict {
    let eps = quantization_error(&control_set(600.0, 0.0), 1.0);
    let analytic = 400.0 / 3f64.sqrt();
    let e = rel(eps, analytic);
    Verdict::new(e <= 0.01, format!("eps = {eps:.3} V, analytic {analytic:.3} V ({:.3}%)", 100.0 * e))
}

fn oracle_equivalence(b: &Baseline) -> Verdict {
    let lay = b.scenario.model().unwrap().layout();
    let names = lay.state_names();
    let pair = |k: usize| {
        let (n, m) = (lay.n, lay.m);
        if k < 2 * n {
            (lay.vd(k % n), lay.vq(k % n))
        } else if k < 4 * n {
            (lay.id((k - 2 * n) % n), lay.iq((k - 2 * n) % n))
        } else {
            (lay.itd((k - 4 * n) % m), lay.itq((k - 4 * n) % m))
        }
    };
    let mut worst = (0.0, String::new());
    for (w, (mean, op)) in b.state_means.iter().zip(&b.oracles).enumerate() {
        for k in 0..lay.dim() {
            let (a, c) = pair(k);
            let mag = op.x[a].hypot(op.x[c]);
            let e = (mean[k] - op.x[k]).abs() / mag;
            if e > worst.0 {
                worst = (e, format!("{} in window {}", names[k], w + 1));
            }
        }
    }
    Verdict::new(
        worst.0 <= 0.01,
        format!("{} components x 3 load sets, worst {:.3}% ({})", lay.dim(), 100.0 * worst.0, worst.1),
    )
}

fn structure(b: &Baseline) -> Verdict {
    let model = b.scenario.model().unwrap();
    let (a, a_d, tau) = (&model.continuous.a, &model.discrete.a_d, model.tau_s());
    let dim = a.nrows();
    let mismatches = (0..dim)
        .flat_map(|i| (0..dim).map(move |j| (i, j)))
        .filter(|&(i, j)| a_d[(i, j)] != f64::from(u8::from(i == j)) + a[(i, j)] * tau)
        .count();
    let inc = incidence(&Topology::chain(3)).unwrap();
    let expected = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 1.0, 0.0, -1.0]);
    let set = control_set(600.0, 0.0);
    let distinct = set.distinct_vectors(1e-9).len();
    let zeros = set.candidates.iter().filter(|c| c.u.norm() == 0.0).count();
    Verdict::new(
        mismatches == 0 && inc == expected && distinct == 7 && zeros == 2,
        format!(
            "{mismatches} differing entries of A_d, incidence {}, {distinct} distinct vectors, {zeros} zero states",
            if inc == expected { "matches" } else { "differs" }
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_microgrid");
    let run_to = |name: &str| {
        let path = dir.path().join(name);
        let out = Command::new(bin)
            .args(["--config"])
            .arg(shipped_config())
            .arg("--out")
            .arg(&path)
            .args(["--seed-check", "run"])
            .env("RUST_LOG", "error")
            .output()
            .unwrap();
        (out, path)
    };
    let (a, pa) = run_to("a.csv");
    let (b, pb) = run_to("b.csv");
    let bytes_a = std::fs::read(&pa).unwrap_or_default();
    let bytes_b = std::fs::read(&pb).unwrap_or_default();
    let checked = String::from_utf8_lossy(&a.stdout).contains("seed_check = identical");
    Verdict::new(
        a.status.success() && b.status.success() && checked && !bytes_a.is_empty() && bytes_a == bytes_b,
        format!(
            "--seed-check {}, two invocations wrote {} and {} bytes, {}",
            if checked { "identical" } else { "failed" },
            bytes_a.len(),
            bytes_b.len(),
            if bytes_a == bytes_b { "byte identical" } else { "different" }
        ),
    )
}

fn argmin_invariance() -> Verdict {
    let ibr = reference_ibr();
    let omega = 100.0 * PI;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut changed = 0;
    let instances = 10_000;
    for _ in 0..instances {
        let mut r = |a: f64| rng.random_range(-a..a);
        let reference = MpcReference {
            i_ref: DqVector::new(r(30.0), r(30.0)),
            v_ref: DqVector::new(311.0 + r(30.0), r(30.0)),
        };
        let meas = LocalMeasurement {
            v: DqVector::new(311.0 + r(40.0), r(40.0)),
            i: DqVector::new(r(30.0), r(30.0)),
            i_out: DqVector::new(r(30.0), r(30.0)),
        };
        let set = control_set(600.0, r(PI));
        let tau = 10f64.powf(-4.0 - rng.random::<f64>());
        let w_v = rng.random_range(0.0..1000.0);
        let base = select_switch(&reference, &meas, &set, &ibr, omega, tau, &MpcWeights { w_i: 1.0, w_v: 0.0 }, None);
        let weighted = select_switch(&reference, &meas, &set, &ibr, omega, tau, &MpcWeights { w_i: 1.0, w_v }, None);
        if base.unwrap().index != weighted.unwrap().index {
            changed += 1;
        }
    }
    Verdict::new(changed == 0, format!("argmin changed in {changed} of {instances} random instances"))
}

fn main() {
    let start = Instant::now();
    let baseline = Baseline::compute();
    let criteria: Vec<Criterion> = vec![
        ("voltage regulation", Box::new(|| voltage_regulation(&baseline))),
        ("active power sharing", Box::new(|| power_sharing(&baseline))),
        ("frequency droop", Box::new(|| frequency_droop(&baseline))),
        ("load-step transient", Box::new(|| load_step_transient(&baseline))),
        ("stability certificate", Box::new(certification)),
        ("quantization error", Box::new(quantization)),
        ("oracle equivalence", Box::new(|| oracle_equivalence(&baseline))),
        ("structural exactness", Box::new(|| structure(&baseline))),
        ("determinism", Box::new(determinism)),
        ("argmin invariance", Box::new(argmin_invariance)),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let v = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Verdict::new(false, "panicked".into()));
        println!("criterion {:>2} {:<24} {}  {}", k + 1, name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        for line in &v.info {
            println!("             INFO {line}");
        }
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} of {} criteria passed in {:.1} s", criteria.len() - failed, criteria.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
