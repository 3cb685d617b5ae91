//! Closed-loop time stepping of the network with droop, PI voltage loops and
//! predictive switch selection, plus an algebraic steady-state solver used
//! as an independent check on the simulation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::droop::{
    droop_law, expected_sharing, instantaneous_power, integrate_angle, lowpass_step, DroopParams, DroopState,
    PowerMeasurement,
};
use crate::error::{config_err, Error, Result};
use crate::frames::{dq_to_abc, DqVector, ThreePhase};
use crate::inner_control::{
    control_set, current_reference, select_centralized, select_switch, LocalMeasurement, MpcReference, MpcWeights,
    PiGains, PiState,
};
use crate::plant::{
    load_admittance, reference_ibr, reference_line, IbrParams, LineParams, LoadSpec, MicrogridModel, PlantStepper,
    StateLayout, Topology,
};

/// How the switching states of all inverters are chosen each period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MpcMode {
    /// Each inverter searches its own eight states with local measurements.
    #[default]
    Decentralized,
    /// One joint search over all `8^n` combinations (n <= 3).
    Centralized,
}

/// Starting point of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitialState {
    /// Capacitors charged to `(v_nom, 0)`, all currents zero.
    #[default]
    Precharged,
    Zero,
    Custom(Vec<f64>),
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub ibrs: Vec<IbrParams>,
    pub lines: Vec<LineParams>,
    pub topology: Topology,
    pub loads: Vec<LoadSpec>,
    pub droop: Vec<DroopParams>,
    /// Power measurement low-pass cutoff (rad/s); infinity disables filtering.
    pub omega_c: f64,
    pub pi: PiGains,
    pub mpc: MpcWeights,
    pub mpc_mode: MpcMode,
    /// Common frame angular frequency (rad/s).
    pub omega_g: f64,
    /// Rated line-to-neutral rms voltage, used to size the loads (V).
    pub v_rated_rms: f64,
    /// Control period (s).
    pub tau_s: f64,
    pub substeps: usize,
    /// Simulated time (s).
    pub duration: f64,
    /// Log every `log_every` control periods.
    pub log_every: usize,
    pub initial: InitialState,
}

impl Scenario {
    /// Three inverters on a two-line chain with the reference parameters and
    /// the bus-3 load step at 1 s removed at 3 s.
    pub fn reference() -> Self {
        let droop = DroopParams::reference();
        Scenario {
            ibrs: vec![reference_ibr(); 3],
            lines: vec![reference_line(); 2],
            topology: Topology::chain(3),
            loads: vec![
                LoadSpec::always(0, 1000.0, 200.0),
                LoadSpec::always(1, 1000.0, 200.0),
                LoadSpec::always(2, 3000.0, 200.0),
                LoadSpec { bus: 2, p: 2000.0, q: 200.0, t_on: 1.0, t_off: 3.0 },
            ],
            droop: vec![droop; 3],
            omega_c: 2.0 * PI * 10.0,
            pi: PiGains::default(),
            mpc: MpcWeights::default(),
            mpc_mode: MpcMode::Decentralized,
            omega_g: droop.omega_g,
            v_rated_rms: 220.0,
            tau_s: 1e-5,
            substeps: 10,
            duration: 4.0,
            log_every: 100,
            initial: InitialState::Precharged,
        }
    }

    pub fn n(&self) -> usize {
        self.topology.n
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.tau_s).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let n = self.n();
        if self.ibrs.len() != n || self.droop.len() != n {
            return Err(config_err(format!(
                "{} inverters and {} droop settings for {n} buses",
                self.ibrs.len(),
                self.droop.len()
            )));
        }
        if self.lines.len() != self.topology.m() {
            return Err(config_err("line parameter count does not match the topology"));
        }
        for (k, l) in self.loads.iter().enumerate() {
            if l.bus >= n {
                return Err(config_err(format!("load {} references bus {} outside 1..={n}", k + 1, l.bus + 1)));
            }
            if !(l.p >= 0.0) || !l.q.is_finite() {
                return Err(config_err(format!("load {} needs p >= 0 and finite q", k + 1)));
            }
            if !(l.t_off > l.t_on) {
                return Err(config_err(format!("load {} has an empty activation window", k + 1)));
            }
        }
        for d in &self.droop {
            if !(d.m_p >= 0.0 && d.n_q >= 0.0 && d.v_nom > 0.0) {
                return Err(config_err("droop settings need m_p >= 0, n_q >= 0, v_nom > 0"));
            }
        }
        self.pi.validate()?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(config_err(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.tau_s > 0.0) || self.substeps == 0 || self.log_every == 0 {
            return Err(config_err("tau_s, substeps and log_every must be positive"));
        }
        if !(self.v_rated_rms > 0.0) {
            return Err(config_err("rated voltage must be positive"));
        }
        if self.mpc_mode == MpcMode::Centralized && n > 3 {
            return Err(config_err("centralized switch search supports at most 3 inverters"));
        }
        if let InitialState::Custom(x) = &self.initial {
            if x.len() != 4 * n + 2 * self.topology.m() {
                return Err(config_err("initial state has the wrong dimension"));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<MicrogridModel> {
        MicrogridModel::new(self.ibrs.clone(), self.lines.clone(), self.topology.clone(), self.omega_g, self.tau_s)
    }

    /// Loads active at time `t`.
    pub fn active_loads_at(&self, t: f64) -> Vec<bool> {
        self.loads.iter().map(|l| l.is_active(t)).collect()
    }

    /// Sorted distinct switching instants of the loads inside `(0, duration)`.
    pub fn event_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .loads
            .iter()
            .flat_map(|l| [l.t_on, l.t_off])
            .filter(|&t| t > 0.0 && t < self.duration)
            .collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    pub fn m_p(&self) -> Vec<f64> {
        self.droop.iter().map(|d| d.m_p).collect()
    }

    /// Per-bus admittance of a set of active loads.
    pub fn bus_admittance(&self, active: &[bool]) -> Vec<Matrix2<f64>> {
        let mut y = vec![Matrix2::zeros(); self.n()];
        for (l, &on) in self.loads.iter().zip(active) {
            if on {
                y[l.bus] += load_admittance(l, self.v_rated_rms);
            }
        }
        y
    }

    fn initial_state(&self, layout: StateLayout) -> DVector<f64> {
        match &self.initial {
            InitialState::Zero => DVector::zeros(layout.dim()),
            InitialState::Precharged => {
                let mut x = DVector::zeros(layout.dim());
                for (i, d) in self.droop.iter().enumerate() {
                    layout.set_voltage(&mut x, i, DqVector::new(d.v_nom, 0.0));
                }
                x
            }
            InitialState::Custom(v) => DVector::from_column_slice(v),
        }
    }
}

/// Controller state of one inverter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbrController {
    pub power: PowerMeasurement,
    pub droop: DroopState,
    pub pi: PiState,
    /// Index of the switching state applied in the last period.
    pub last_switch: Option<usize>,
}

/// Per-inverter quantities computed during one control period.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IbrTelemetry {
    /// Capacitor voltage in the inverter's droop frame.
    pub v_dq: DqVector,
    /// Filter current in the droop frame.
    pub i_dq: DqVector,
    /// Output current in the droop frame.
    pub i_out: DqVector,
    pub p_filt: f64,
    pub q_filt: f64,
    /// Droop frequency (rad/s).
    pub omega: f64,
    /// Droop voltage set-point (V peak).
    pub v_set: f64,
    /// Phase offset used this period.
    pub delta: f64,
    pub switch: usize,
    pub u: DqVector,
}

/// Stateful closed-loop simulation; [`run`] drives it to completion.
#[derive(Debug, Clone)]
pub struct Simulation {
    scenario: Scenario,
    model: MicrogridModel,
    stepper: PlantStepper,
    x: DVector<f64>,
    k: u64,
    controllers: Vec<IbrController>,
    active: Vec<bool>,
    bus_y: Vec<Matrix2<f64>>,
    telemetry: Vec<IbrTelemetry>,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let model = scenario.model()?;
        let stepper = PlantStepper::new(&model, scenario.substeps)?;
        let x = scenario.initial_state(model.layout());
        let controllers = scenario
            .droop
            .iter()
            .map(|d| IbrController {
                power: PowerMeasurement::new(scenario.omega_c),
                droop: DroopState { omega: d.omega_g, v: d.v_nom, delta: 0.0 },
                pi: PiState::default(),
                last_switch: None,
            })
            .collect();
        let active = scenario.active_loads_at(0.0);
        let bus_y = scenario.bus_admittance(&active);
        Ok(Simulation {
            scenario: scenario.clone(),
            model,
            stepper,
            x,
            k: 0,
            controllers,
            active,
            bus_y,
            telemetry: vec![IbrTelemetry::default(); scenario.n()],
        })
    }

    pub fn time(&self) -> f64 {
        self.k as f64 * self.scenario.tau_s
    }

    pub fn step_count(&self) -> u64 {
        self.k
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn model(&self) -> &MicrogridModel {
        &self.model
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn controllers(&self) -> &[IbrController] {
        &self.controllers
    }

    /// Quantities computed during the most recent [`Simulation::step`].
    pub fn telemetry(&self) -> &[IbrTelemetry] {
        &self.telemetry
    }

    /// Common-frame angle of the dq frame at the current time.
    pub fn frame_angle(&self) -> f64 {
        (self.scenario.omega_g * self.time()).rem_euclid(2.0 * PI)
    }

    pub fn active_loads(&self) -> &[bool] {
        &self.active
    }

    /// Bus load currents for the current state and active loads.
    pub fn load_currents(&self) -> Vec<DqVector> {
        crate::plant::load_currents(self.model.layout(), &self.x, &self.bus_y)
    }

    /// Advances one control period.
    pub fn step(&mut self) -> Result<()> {
        let sc = &self.scenario;
        let t = self.time();
        let active = sc.active_loads_at(t);
        if active != self.active {
            self.bus_y = sc.bus_admittance(&active);
            self.active = active;
        }
        let lay = self.model.layout();
        let n = lay.n;
        let tau = sc.tau_s;
        let w = sc.omega_g;
        let theta = self.frame_angle();
        let il = crate::plant::load_currents(lay, &self.x, &self.bus_y);

        let mut refs = Vec::with_capacity(n);
        let mut meas = Vec::with_capacity(n);
        let mut sets = Vec::with_capacity(n);
        for i in 0..n {
            let ctl = &mut self.controllers[i];
            let ibr = &sc.ibrs[i];
            let delta = ctl.droop.delta;
            let m = LocalMeasurement {
                v: lay.voltage(&self.x, i),
                i: lay.current(&self.x, i),
                i_out: self.model.output_current(&self.x, &il, i),
            };
            // measurements seen from the droop frame
            let v_loc = m.v.rotated(-delta);
            let io_loc = m.i_out.rotated(-delta);
            let (p, q) = instantaneous_power(v_loc, io_loc);
            ctl.power = lowpass_step(&ctl.power, p, q, tau);
            let (omega, v_set) = droop_law(ctl.power.p_filt, ctl.power.q_filt, &sc.droop[i]);
            let v_ref_loc = DqVector::new(v_set, 0.0);
            let (i_ref_loc, pi) = current_reference(v_ref_loc, v_loc, io_loc, &sc.pi, ctl.pi, ibr.c, w, tau);
            ctl.pi = pi;
            refs.push(MpcReference { i_ref: i_ref_loc.rotated(delta), v_ref: v_ref_loc.rotated(delta) });
            sets.push(control_set(ibr.v_dc, theta));
            meas.push(m);
            self.telemetry[i] = IbrTelemetry {
                v_dq: v_loc,
                i_dq: m.i.rotated(-delta),
                i_out: io_loc,
                p_filt: ctl.power.p_filt,
                q_filt: ctl.power.q_filt,
                omega,
                v_set,
                delta,
                switch: 0,
                u: DqVector::ZERO,
            };
            ctl.droop = DroopState { omega, v: v_set, delta: integrate_angle(delta, omega, w, tau) };
        }

        let mut u = vec![DqVector::ZERO; n];
        let with_time = |e: Error| match e {
            Error::Diverged { state, .. } => Error::Diverged { time: t, state },
            other => other,
        };
        match sc.mpc_mode {
            MpcMode::Decentralized => {
                for i in 0..n {
                    let sel = select_switch(
                        &refs[i],
                        &meas[i],
                        &sets[i],
                        &sc.ibrs[i],
                        w,
                        tau,
                        &sc.mpc,
                        self.controllers[i].last_switch,
                    )
                    .map_err(with_time)?;
                    u[i] = sel.u;
                    self.controllers[i].last_switch = Some(sel.index);
                    self.telemetry[i].switch = sel.index;
                    self.telemetry[i].u = sel.u;
                }
            }
            MpcMode::Centralized => {
                let (idx, _) =
                    select_centralized(&self.model, &self.x, &il, &refs, &sets, &sc.mpc).map_err(with_time)?;
                for i in 0..n {
                    u[i] = sets[i].candidates[idx[i]].u;
                    self.controllers[i].last_switch = Some(idx[i]);
                    self.telemetry[i].switch = idx[i];
                    self.telemetry[i].u = u[i];
                }
            }
        }

        self.stepper.step(&mut self.x, &u, &self.bus_y, t + tau)?;
        self.k += 1;
        Ok(())
    }
}

/// One logged sample of an inverter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbrSample {
    /// Filter phase currents (A).
    pub i_abc: ThreePhase,
    /// Capacitor voltage in the droop frame (V).
    pub v_dq: DqVector,
    /// Filter current in the droop frame (A).
    pub i_dq: DqVector,
    /// Filtered active power (W).
    pub p: f64,
    /// Filtered reactive power (var).
    pub q: f64,
    /// Droop frequency (Hz).
    pub freq_hz: f64,
    pub delta: f64,
    pub switch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub time: f64,
    pub ibrs: Vec<IbrSample>,
    /// Line currents in the common frame (A).
    pub lines: Vec<DqVector>,
}

/// Uniformly decimated simulation output.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesLog {
    pub tau_s: f64,
    pub decimation: usize,
    pub m_p: Vec<f64>,
    pub records: Vec<LogRecord>,
}

impl TimeSeriesLog {
    pub fn n_ibrs(&self) -> usize {
        self.m_p.len()
    }

    pub fn n_lines(&self) -> usize {
        self.records.first().map_or(0, |r| r.lines.len())
    }

    pub fn sample_period(&self) -> f64 {
        self.tau_s * self.decimation as f64
    }

    pub fn window(&self, start: f64, end: f64) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.time >= start && r.time < end)
    }
}

/// Record for the period that started at `t` from state `x`, with the
/// controller telemetry of that period.
fn sample(sim: &Simulation, x: &DVector<f64>, t: f64) -> LogRecord {
    let lay = sim.model().layout();
    let theta = (sim.scenario().omega_g * t).rem_euclid(2.0 * PI);
    let ibrs = sim
        .telemetry()
        .iter()
        .enumerate()
        .map(|(i, tel)| IbrSample {
            i_abc: dq_to_abc(lay.current(x, i), theta),
            v_dq: tel.v_dq,
            i_dq: tel.i_dq,
            p: tel.p_filt,
            q: tel.q_filt,
            freq_hz: tel.omega / (2.0 * PI),
            delta: tel.delta,
            switch: tel.switch,
        })
        .collect();
    LogRecord { time: t, ibrs, lines: (0..lay.m).map(|j| lay.line_current(x, j)).collect() }
}

/// Runs the scenario for its full duration.
pub fn run(scenario: &Scenario) -> Result<TimeSeriesLog> {
    run_with(scenario, |_| {})
}

/// Runs the scenario, calling `observe` after every control period.
pub fn run_with(scenario: &Scenario, mut observe: impl FnMut(&Simulation)) -> Result<TimeSeriesLog> {
    let mut sim = Simulation::new(scenario)?;
    let steps = scenario.steps();
    let mut records = Vec::with_capacity(steps / scenario.log_every + 1);
    for k in 0..steps {
        let t = sim.time();
        let pre = (k % scenario.log_every == 0).then(|| sim.state().clone());
        sim.step()?;
        observe(&sim);
        if let Some(x) = pre {
            records.push(sample(&sim, &x, t));
        }
    }
    Ok(TimeSeriesLog { tau_s: scenario.tau_s, decimation: scenario.log_every, m_p: scenario.m_p(), records })
}

/// Steady-state quantities of one inverter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbrOperatingPoint {
    /// Output active power (W).
    pub p: f64,
    /// Output reactive power (var).
    pub q: f64,
    /// Common frequency (rad/s).
    pub omega: f64,
    /// Voltage amplitude (V peak).
    pub v: f64,
    /// Phase relative to inverter 1 (rad).
    pub delta: f64,
    /// Averaged inverter output voltage (V).
    pub u: DqVector,
    /// Power delivered by the bridge, `3/2 u'i` (W).
    pub p_inverter: f64,
}

/// Synchronized equilibrium of the averaged network, expressed in the droop
/// frame of inverter 1.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub x: DVector<f64>,
    pub omega: f64,
    pub ibrs: Vec<IbrOperatingPoint>,
    pub load_power: f64,
    pub load_reactive: f64,
    pub filter_losses: f64,
    pub line_losses: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl OperatingPoint {
    pub fn frequency_hz(&self) -> f64 {
        self.omega / (2.0 * PI)
    }

    pub fn total_losses(&self) -> f64 {
        self.filter_losses + self.line_losses
    }

    pub fn powers(&self) -> Vec<f64> {
        self.ibrs.iter().map(|o| o.p).collect()
    }
}

struct Network<'a> {
    sc: &'a Scenario,
    bus_y: Vec<Matrix2<f64>>,
    incidence: DMatrix<f64>,
}

struct Evaluation {
    residual: DVector<f64>,
    voltages: Vec<DqVector>,
    outputs: Vec<DqVector>,
    lines: Vec<DqVector>,
    pq: Vec<(f64, f64)>,
}

impl Network<'_> {
    // z = [omega, delta_2..delta_n, v_1..v_n]
    fn evaluate(&self, z: &DVector<f64>) -> Evaluation {
        let n = self.sc.n();
        let omega = z[0];
        let voltages: Vec<DqVector> = (0..n)
            .map(|i| {
                let delta = if i == 0 { 0.0 } else { z[i] };
                DqVector::new(z[n + i], 0.0).rotated(delta)
            })
            .collect();
        let lines: Vec<DqVector> = self
            .sc
            .lines
            .iter()
            .enumerate()
            .map(|(j, ln)| {
                let (a, b) = self.sc.topology.edges[j];
                // steady line: 0 = -(v_a - v_b) - (R + w L J) i_t
                let z = Matrix2::new(ln.r, omega * ln.l, -omega * ln.l, ln.r);
                let inv = z.try_inverse().expect("line impedance is invertible");
                -(voltages[a] - voltages[b]).transform(&inv)
            })
            .collect();
        let outputs: Vec<DqVector> = (0..n)
            .map(|i| {
                let mut out = voltages[i].transform(&self.bus_y[i]);
                for (j, it) in lines.iter().enumerate() {
                    out -= *it * self.incidence[(i, j)];
                }
                out
            })
            .collect();
        let pq: Vec<(f64, f64)> = (0..n).map(|i| instantaneous_power(voltages[i], outputs[i])).collect();
        let mut residual = DVector::zeros(2 * n);
        for i in 0..n {
            let d = &self.sc.droop[i];
            let (w_i, v_i) = droop_law(pq[i].0, pq[i].1, d);
            residual[i] = w_i - omega;
            residual[n + i] = z[n + i] - v_i;
        }
        Evaluation { residual, voltages, outputs, lines, pq }
    }
}

/// Solves the synchronized equilibrium for a set of active loads by damped
/// Newton iteration on `[omega, delta_2..delta_n, v_1..v_n]`.
///
/// The inner loops are assumed to hold each capacitor voltage at its droop
/// set-point, so only the network, the loads and the droop laws enter.
pub fn steady_state(scenario: &Scenario, active: &[bool]) -> Result<OperatingPoint> {
    scenario.validate()?;
    if active.len() != scenario.loads.len() {
        return Err(config_err("active-load mask does not match the load list"));
    }
    let n = scenario.n();
    let net = Network {
        sc: scenario,
        bus_y: scenario.bus_admittance(active),
        incidence: crate::plant::incidence(&scenario.topology)?,
    };
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-9;
    let mut z = DVector::zeros(2 * n);
    z[0] = scenario.omega_g;
    for i in 0..n {
        z[n + i] = scenario.droop[i].v_nom;
    }
    let mut eval = net.evaluate(&z);
    let mut norm = eval.residual.amax();
    let mut iterations = 0;
    while norm >= TOL {
        if iterations == MAX_ITER || !norm.is_finite() {
            return Err(Error::OracleFailure { iterations, residual: norm });
        }
        iterations += 1;
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        for k in 0..2 * n {
            let h = 1e-6 * z[k].abs().max(1.0);
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let col = (net.evaluate(&zp).residual - net.evaluate(&zm).residual) / (2.0 * h);
            jac.set_column(k, &col);
        }
        let step = match jac.lu().solve(&(-&eval.residual)) {
            Some(s) => s,
            None => return Err(Error::OracleFailure { iterations, residual: norm }),
        };
        let mut lambda = 1.0;
        loop {
            let trial = &z + &step * lambda;
            let e = net.evaluate(&trial);
            let tn = e.residual.amax();
            if tn < norm || lambda < 1e-6 {
                z = trial;
                eval = e;
                norm = tn;
                break;
            }
            lambda *= 0.5;
        }
    }

    let omega = z[0];
    let lay = StateLayout { n, m: scenario.topology.m() };
    let mut x = DVector::zeros(lay.dim());
    let mut ibrs = Vec::with_capacity(n);
    let mut filter_losses = 0.0;
    for i in 0..n {
        let p = &scenario.ibrs[i];
        let v = eval.voltages[i];
        // capacitor at rest: i_f = i_out + w C J v
        let i_f = eval.outputs[i] + v.j() * (omega * p.c);
        let u = v + i_f * p.r + i_f.j() * (omega * p.l);
        lay.set_voltage(&mut x, i, v);
        lay.set_current(&mut x, i, i_f);
        filter_losses += 1.5 * p.r * i_f.norm_squared();
        ibrs.push(IbrOperatingPoint {
            p: eval.pq[i].0,
            q: eval.pq[i].1,
            omega,
            v: z[n + i],
            delta: if i == 0 { 0.0 } else { z[i] },
            u,
            p_inverter: 1.5 * u.dot(i_f),
        });
    }
    let mut line_losses = 0.0;
    for (j, it) in eval.lines.iter().enumerate() {
        lay.set_line_current(&mut x, j, *it);
        line_losses += 1.5 * scenario.lines[j].r * it.norm_squared();
    }
    let (mut load_power, mut load_reactive) = (0.0, 0.0);
    for i in 0..n {
        let (p, q) = instantaneous_power(eval.voltages[i], eval.voltages[i].transform(&net.bus_y[i]));
        load_power += p;
        load_reactive += q;
    }
    Ok(OperatingPoint {
        x,
        omega,
        ibrs,
        load_power,
        load_reactive,
        filter_losses,
        line_losses,
        residual: norm,
        iterations,
    })
}

/// Window statistics of one inverter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbrSummary {
    pub p_mean: f64,
    pub q_mean: f64,
    pub f_mean: f64,
    /// Mean d-axis capacitor voltage in the droop frame (V peak).
    pub v_peak: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Standard deviation of the d-axis voltage relative to its mean.
    pub v_ripple: f64,
    /// Amplitude of the window-averaged filter current (A).
    pub i_amp: f64,
}

/// Window statistics of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub start: f64,
    pub end: f64,
    pub samples: usize,
    pub ibrs: Vec<IbrSummary>,
    /// `max_i |m_pi P_i - mean| / mean` over the window means.
    pub sharing_error: f64,
    /// Largest `|f - f_nominal|` over inverters (Hz).
    pub freq_deviation: f64,
    /// Largest `|v_peak - v_nom| / v_nom` over inverters.
    pub voltage_deviation: f64,
}

/// Statistics over records with `start <= t < end`.
pub fn summarize(log: &TimeSeriesLog, start: f64, end: f64, f_nominal: f64, v_nominal: f64) -> Result<Summary> {
    let recs: Vec<&LogRecord> = log.window(start, end).collect();
    if recs.is_empty() {
        return Err(Error::EmptyWindow { start, end });
    }
    let count = recs.len() as f64;
    let n = log.n_ibrs();
    let mut ibrs = Vec::with_capacity(n);
    for i in 0..n {
        let mean = |f: &dyn Fn(&IbrSample) -> f64| recs.iter().map(|r| f(&r.ibrs[i])).sum::<f64>() / count;
        let v_peak = mean(&|s| s.v_dq.d);
        let var = mean(&|s| (s.v_dq.d - v_peak).powi(2));
        let i_mean = DqVector::new(mean(&|s| s.i_dq.d), mean(&|s| s.i_dq.q));
        ibrs.push(IbrSummary {
            p_mean: mean(&|s| s.p),
            q_mean: mean(&|s| s.q),
            f_mean: mean(&|s| s.freq_hz),
            v_peak,
            v_min: recs.iter().map(|r| r.ibrs[i].v_dq.d).fold(f64::INFINITY, f64::min),
            v_max: recs.iter().map(|r| r.ibrs[i].v_dq.d).fold(f64::NEG_INFINITY, f64::max),
            v_ripple: var.sqrt() / v_peak.abs(),
            i_amp: i_mean.norm(),
        });
    }
    let weighted: Vec<f64> = ibrs.iter().zip(&log.m_p).map(|(s, m)| m * s.p_mean).collect();
    Ok(Summary {
        start,
        end,
        samples: recs.len(),
        sharing_error: sharing_error(&weighted),
        freq_deviation: ibrs.iter().map(|s| (s.f_mean - f_nominal).abs()).fold(0.0, f64::max),
        voltage_deviation: ibrs.iter().map(|s| (s.v_peak - v_nominal).abs() / v_nominal).fold(0.0, f64::max),
        ibrs,
    })
}

/// `max_i |w_i - mean| / mean` for droop-weighted powers `w_i = m_pi P_i`.
pub fn sharing_error(weighted: &[f64]) -> f64 {
    let mean = weighted.iter().sum::<f64>() / weighted.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    weighted.iter().map(|w| (w - mean).abs()).fold(0.0, f64::max) / mean.abs()
}

/// Sharing predicted by the droop law for an operating point's total output power.
pub fn expected_shares(scenario: &Scenario, op: &OperatingPoint) -> Vec<f64> {
    expected_sharing(&scenario.m_p(), op.powers().iter().sum())
}
