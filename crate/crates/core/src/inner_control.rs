//! Inner loops of one inverter: the PI voltage loop that produces a current
//! reference, and the one-step finite-control-set predictive controller that
//! picks the bridge switching state.

use nalgebra::DVector;

use crate::error::{config_err, Error, Result};
use crate::frames::DqVector;
use crate::plant::{IbrParams, MicrogridModel};

/// PI voltage-loop gains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiGains {
    /// Proportional gain (A/V).
    pub kp: f64,
    /// Integral gain (A/(V s)).
    pub ki: f64,
    /// Per-axis integrator clamp (A).
    pub limit: f64,
}

impl Default for PiGains {
    fn default() -> Self {
        PiGains { kp: 0.3, ki: 1000.0, limit: 30.0 }
    }
}

impl PiGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp >= 0.0 && self.ki >= 0.0 && self.limit > 0.0) {
            return Err(config_err(format!(
                "PI gains need kp >= 0, ki >= 0, limit > 0 (got {}, {}, {})",
                self.kp, self.ki, self.limit
            )));
        }
        Ok(())
    }
}

/// Integral accumulator of the voltage loop (A).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiState {
    pub integral: DqVector,
}

/// Current reference from the voltage loop with capacitor decoupling:
/// `i_ref = i_meas - w c J v + Kp (v_ref - v) + integral`.
///
/// `i_meas` is the current the filter delivers to the bus. The integral is
/// advanced before it is used and clamped per axis.
#[allow(clippy::too_many_arguments)]
pub fn current_reference(
    v_ref: DqVector,
    v_meas: DqVector,
    i_meas: DqVector,
    gains: &PiGains,
    state: PiState,
    c: f64,
    omega_g: f64,
    tau_s: f64,
) -> (DqVector, PiState) {
    let err = v_ref - v_meas;
    let mut integral = state.integral + err * (gains.ki * tau_s);
    integral.d = integral.d.clamp(-gains.limit, gains.limit);
    integral.q = integral.q.clamp(-gains.limit, gains.limit);
    let i_ref = i_meas - v_meas.j() * (omega_g * c) + err * gains.kp + integral;
    (i_ref, PiState { integral })
}

/// Leg states of a two-level three-phase bridge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SwitchState {
    pub sa: bool,
    pub sb: bool,
    pub sc: bool,
}

impl SwitchState {
    const fn new(sa: u8, sb: u8, sc: u8) -> Self {
        SwitchState { sa: sa == 1, sb: sb == 1, sc: sc == 1 }
    }

    pub fn legs(&self) -> [f64; 3] {
        [self.sa as u8 as f64, self.sb as u8 as f64, self.sc as u8 as f64]
    }

    pub fn label(&self) -> String {
        format!("{}{}{}", self.sa as u8, self.sb as u8, self.sc as u8)
    }
}

/// Candidate order used everywhere: zero state, the six active vectors in
/// 60° steps, then the second zero state.
pub const SWITCH_STATES: [SwitchState; 8] = [
    SwitchState::new(0, 0, 0),
    SwitchState::new(1, 0, 0),
    SwitchState::new(1, 1, 0),
    SwitchState::new(0, 1, 0),
    SwitchState::new(0, 1, 1),
    SwitchState::new(0, 0, 1),
    SwitchState::new(1, 0, 1),
    SwitchState::new(1, 1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub state: SwitchState,
    pub u: DqVector,
}

/// The eight inverter output vectors seen from a dq frame at angle `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteControlSet {
    pub v_dc: f64,
    pub theta: f64,
    pub candidates: [Candidate; 8],
}

impl FiniteControlSet {
    pub fn vectors(&self) -> Vec<DqVector> {
        self.candidates.iter().map(|c| c.u).collect()
    }

    /// Output vectors with duplicates (within `tol`) removed, in candidate order.
    pub fn distinct_vectors(&self, tol: f64) -> Vec<DqVector> {
        let mut out: Vec<DqVector> = Vec::new();
        for c in &self.candidates {
            if !out.iter().any(|v| (*v - c.u).norm() <= tol) {
                out.push(c.u);
            }
        }
        out
    }

    /// Index of the candidate closest to `target` (lowest index on ties).
    pub fn nearest(&self, target: DqVector) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.candidates.iter().enumerate() {
            let d = (c.u - target).norm_squared();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }
}

/// Space vector `V_dc (2/3)(S_a + S_b e^{j2pi/3} + S_c e^{j4pi/3})` of every
/// switching state, expressed in the dq frame at angle `theta`.
pub fn control_set(v_dc: f64, theta: f64) -> FiniteControlSet {
    let (s, c) = theta.sin_cos();
    let (s120, c120) = (2.0 * std::f64::consts::PI / 3.0).sin_cos();
    let candidates = SWITCH_STATES.map(|state| {
        let [a, b, cc] = state.legs();
        if a == b && b == cc {
            return Candidate { state, u: DqVector::ZERO };
        }
        let alpha = 2.0 / 3.0 * v_dc * (a + (b + cc) * c120);
        let beta = 2.0 / 3.0 * v_dc * (b - cc) * s120;
        // conjugate of (alpha + j beta) e^{-j theta}: q lags d
        Candidate { state, u: DqVector::new(alpha * c + beta * s, alpha * s - beta * c) }
    });
    FiniteControlSet { v_dc, theta, candidates }
}

/// Quantities an inverter measures at its own bus, all in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalMeasurement {
    /// Capacitor voltage.
    pub v: DqVector,
    /// Filter inductor current.
    pub i: DqVector,
    /// Current leaving the capacitor node towards loads and lines.
    pub i_out: DqVector,
}

/// One-step Euler prediction of the filter current under output vector `u`,
/// matching the filter rows of the assembled plant.
pub fn predict_local(i: DqVector, v: DqVector, u: DqVector, ibr: &IbrParams, omega_g: f64, tau_s: f64) -> DqVector {
    i + (u - v - i * ibr.r - i.j() * (omega_g * ibr.l)) * (tau_s / ibr.l)
}

/// One-step Euler prediction of the capacitor voltage. It does not depend on
/// the inverter output.
pub fn predict_voltage(meas: &LocalMeasurement, ibr: &IbrParams, omega_g: f64, tau_s: f64) -> DqVector {
    meas.v + (meas.i - meas.i_out - meas.v.j() * (omega_g * ibr.c)) * (tau_s / ibr.c)
}

/// Weights of the tracking cost `w_i |i_ref - i(k+1)|^2 + w_v |v_ref - v(k+1)|^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcWeights {
    pub w_i: f64,
    pub w_v: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        MpcWeights { w_i: 1.0, w_v: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MpcReference {
    pub i_ref: DqVector,
    pub v_ref: DqVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub state: SwitchState,
    pub u: DqVector,
    pub cost: f64,
    /// Cost of every candidate, in candidate order.
    pub costs: [f64; 8],
}

/// Exhaustive one-step search over the eight switching states.
///
/// Equal costs resolve to `previous` when it is among the minimizers,
/// otherwise to the lowest candidate index.
#[allow(clippy::too_many_arguments)]
pub fn select_switch(
    reference: &MpcReference,
    meas: &LocalMeasurement,
    set: &FiniteControlSet,
    ibr: &IbrParams,
    omega_g: f64,
    tau_s: f64,
    weights: &MpcWeights,
    previous: Option<usize>,
) -> Result<Selection> {
    let v_pred = predict_voltage(meas, ibr, omega_g, tau_s);
    let v_cost = weights.w_v * (reference.v_ref - v_pred).norm_squared();
    let mut costs = [0.0; 8];
    for (k, cand) in set.candidates.iter().enumerate() {
        let i_pred = predict_local(meas.i, meas.v, cand.u, ibr, omega_g, tau_s);
        costs[k] = weights.w_i * (reference.i_ref - i_pred).norm_squared() + v_cost;
        if !costs[k].is_finite() {
            return Err(Error::Diverged { time: f64::NAN, state: vec![meas.v.d, meas.v.q, meas.i.d, meas.i.q] });
        }
    }
    let mut index = 0;
    for k in 1..8 {
        if costs[k] < costs[index] {
            index = k;
        }
    }
    if let Some(p) = previous {
        if p < 8 && costs[p] == costs[index] {
            index = p;
        }
    }
    let cand = set.candidates[index];
    Ok(Selection { index, state: cand.state, u: cand.u, cost: costs[index], costs })
}

/// Joint search over all `8^n` switching combinations using the full
/// discrete network model. Only meant as a check on [`select_switch`] for
/// small networks (`n <= 3`). Returns the chosen index per inverter and the
/// total cost.
pub fn select_centralized(
    model: &MicrogridModel,
    x: &DVector<f64>,
    load_current: &[DqVector],
    references: &[MpcReference],
    sets: &[FiniteControlSet],
    weights: &MpcWeights,
) -> Result<(Vec<usize>, f64)> {
    let lay = model.layout();
    let n = lay.n;
    if n > 3 {
        return Err(config_err(format!("centralized search is limited to 3 inverters, got {n}")));
    }
    let d = &model.discrete;
    let mut il = DVector::zeros(2 * n);
    for i in 0..n {
        il[i] = load_current[i].d;
        il[n + i] = load_current[i].q;
    }
    let free = &d.a_d * x + &d.e_d * &il;
    let combos = 8usize.pow(n as u32);
    let mut u = DVector::zeros(2 * n);
    let mut best = (vec![0; n], f64::INFINITY);
    for combo in 0..combos {
        // first inverter is the most significant digit: lexicographic order
        let idx: Vec<usize> = (0..n).map(|i| (combo / 8usize.pow((n - 1 - i) as u32)) % 8).collect();
        for i in 0..n {
            let ui = sets[i].candidates[idx[i]].u;
            u[i] = ui.d;
            u[n + i] = ui.q;
        }
        let pred = &free + &d.b_d * &u;
        let mut cost = 0.0;
        for (i, r) in references.iter().enumerate() {
            cost += weights.w_i * (r.i_ref - lay.current(&pred, i)).norm_squared()
                + weights.w_v * (r.v_ref - lay.voltage(&pred, i)).norm_squared();
        }
        if !cost.is_finite() {
            return Err(Error::Diverged { time: f64::NAN, state: x.iter().copied().collect() });
        }
        if cost < best.1 {
            best = (idx, cost);
        }
    }
    Ok(best)
}

/// Covering radius of the control set over its convex hull, estimated on a
/// grid no coarser than `resolution`.
pub fn quantization_error(set: &FiniteControlSet, resolution: f64) -> f64 {
    covering_radius(&set.vectors(), resolution)
}

/// Largest distance from a point of the convex hull of `points` to its
/// nearest point, sampled on a grid with spacing at most `resolution`.
/// Degenerate hulls (a single point) give 0.
pub fn covering_radius(points: &[DqVector], resolution: f64) -> f64 {
    assert!(resolution > 0.0, "resolution must be positive");
    let scale = points.iter().map(|p| p.norm()).fold(1.0, f64::max);
    let mut distinct: Vec<DqVector> = Vec::new();
    for p in points {
        if !distinct.iter().any(|q| (*q - *p).norm() <= 1e-12 * scale) {
            distinct.push(*p);
        }
    }
    if distinct.len() <= 1 {
        return 0.0;
    }
    let nearest = |x: DqVector| distinct.iter().map(|p| (*p - x).norm()).fold(f64::INFINITY, f64::min);

    let hull = convex_hull(&distinct);
    if hull.len() == 2 {
        // collinear set: walk the segment
        let (a, b) = (hull[0], hull[1]);
        let steps = ((b - a).norm() / resolution).ceil().max(1.0) as usize;
        return (0..=steps)
            .map(|k| nearest(a + (b - a) * (k as f64 / steps as f64)))
            .fold(0.0, f64::max);
    }

    let (mut lo, mut hi) = (hull[0], hull[0]);
    for p in &hull {
        lo = DqVector::new(lo.d.min(p.d), lo.q.min(p.q));
        hi = DqVector::new(hi.d.max(p.d), hi.q.max(p.q));
    }
    let nx = ((hi.d - lo.d) / resolution).ceil().max(1.0) as usize;
    let ny = ((hi.q - lo.q) / resolution).ceil().max(1.0) as usize;
    let tol = 1e-9 * scale;
    let mut worst: f64 = 0.0;
    for ix in 0..=nx {
        let d = lo.d + (hi.d - lo.d) * ix as f64 / nx as f64;
        for iy in 0..=ny {
            let x = DqVector::new(d, lo.q + (hi.q - lo.q) * iy as f64 / ny as f64);
            if inside_convex(&hull, x, tol) {
                worst = worst.max(nearest(x));
            }
        }
    }
    worst
}

fn cross(o: DqVector, a: DqVector, b: DqVector) -> f64 {
    (a.d - o.d) * (b.q - o.q) - (a.q - o.q) * (b.d - o.d)
}

/// Counter-clockwise hull (monotone chain), collinear points dropped.
fn convex_hull(points: &[DqVector]) -> Vec<DqVector> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.d.total_cmp(&b.d).then(a.q.total_cmp(&b.q)));
    let mut hull: Vec<DqVector> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &DqVector>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[DqVector], x: DqVector, tol: f64) -> bool {
    (0..hull.len()).all(|k| {
        let a = hull[k];
        let b = hull[(k + 1) % hull.len()];
        cross(a, b, x) >= -tol * (b - a).norm()
    })
}
