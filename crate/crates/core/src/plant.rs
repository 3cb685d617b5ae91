//! Coupled dq state-space model of the islanded network: one LC filter per
//! inverter, RL lines between the capacitor buses and constant-impedance
//! loads at the buses.
//!
//! State ordering is `[v_d(1..n), v_q(1..n), i_d(1..n), i_q(1..n),
//! i_td(1..m), i_tq(1..m)]`; inputs are `[u_d(1..n), u_q(1..n)]` and load
//! disturbances `[i_Ld(1..n), i_Lq(1..n)]`.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::error::{config_err, Error, Result};
use crate::frames::{skew_j, DqVector};

/// LC filter and DC link of one inverter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbrParams {
    /// Filter resistance (Ω).
    pub r: f64,
    /// Filter inductance (H).
    pub l: f64,
    /// Filter capacitance (F).
    pub c: f64,
    /// DC link voltage (V).
    pub v_dc: f64,
}

impl IbrParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("r", self.r), ("l", self.l), ("c", self.c), ("v_dc", self.v_dc)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("inverter parameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Series RL transmission line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineParams {
    pub r: f64,
    pub l: f64,
}

impl LineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.r > 0.0 && self.l.is_finite() && self.l > 0.0) {
            return Err(config_err(format!(
                "line parameters must be positive, got r = {}, l = {}",
                self.r, self.l
            )));
        }
        Ok(())
    }

    /// Whether the line reactance at `omega` dominates its resistance.
    pub fn is_inductive(&self, omega: f64) -> bool {
        omega * self.l > self.r
    }
}

/// Line graph between inverter buses. Bus indices are zero based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Topology {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let t = Topology { n, edges };
        t.validate()?;
        Ok(t)
    }

    /// `n` buses joined in a chain `0-1-2-...`.
    pub fn chain(n: usize) -> Self {
        Topology {
            n,
            edges: (1..n).map(|k| (k - 1, k)).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(config_err("topology needs at least one inverter"));
        }
        for (j, &(a, b)) in self.edges.iter().enumerate() {
            if a >= self.n || b >= self.n {
                return Err(config_err(format!(
                    "line {} references bus {} outside 1..={}",
                    j + 1,
                    a.max(b) + 1,
                    self.n
                )));
            }
            if a == b {
                return Err(config_err(format!("line {} is a self loop at bus {}", j + 1, a + 1)));
            }
        }
        if !self.edges.is_empty() && !self.is_connected() {
            return Err(config_err("line graph is not connected"));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(a, b) in &self.edges {
                let next = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Signed bus/line incidence matrix: `+1` at the start bus, `-1` at the end bus.
pub fn incidence(topology: &Topology) -> Result<DMatrix<f64>> {
    topology.validate()?;
    let mut b = DMatrix::zeros(topology.n, topology.m());
    for (j, &(from, to)) in topology.edges.iter().enumerate() {
        b[(from, j)] = 1.0;
        b[(to, j)] = -1.0;
    }
    Ok(b)
}

/// Constant-impedance load at a bus with an activation window `[t_on, t_off)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadSpec {
    /// Zero-based bus index.
    pub bus: usize,
    /// Rated three-phase active power (W).
    pub p: f64,
    /// Rated three-phase reactive power (var).
    pub q: f64,
    pub t_on: f64,
    pub t_off: f64,
}

impl LoadSpec {
    pub fn always(bus: usize, p: f64, q: f64) -> Self {
        LoadSpec { bus, p, q, t_on: 0.0, t_off: f64::INFINITY }
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.t_on && t < self.t_off
    }
}

/// Series impedance `Z = |V|^2 / S*` of a single-phase load drawing
/// `p + jq` at rms voltage `v_rms`. Returns `(R, X)`.
pub fn series_impedance(p: f64, q: f64, v_rms: f64) -> (f64, f64) {
    let s2 = p * p + q * q;
    let v2 = v_rms * v_rms;
    (v2 * p / s2, v2 * q / s2)
}

/// Quasi-static dq admittance of a three-phase load, `i_L = Y v`.
///
/// Each phase carries a third of the rated power at the rated line-to-neutral
/// voltage, so a bus held at `sqrt(2) v_rms` peak draws exactly `p + jq`.
/// A zero-power load returns the zero matrix.
pub fn load_admittance(spec: &LoadSpec, v_rated_rms: f64) -> Matrix2<f64> {
    if spec.p == 0.0 && spec.q == 0.0 {
        return Matrix2::zeros();
    }
    let (r, x) = series_impedance(spec.p / 3.0, spec.q / 3.0, v_rated_rms);
    // (R I + X J)^-1 = (R I - X J) / (R^2 + X^2)
    (Matrix2::identity() * r - skew_j() * x) / (r * r + x * x)
}

/// Index arithmetic for the stacked dq state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n: usize,
    pub m: usize,
}

impl StateLayout {
    pub fn dim(&self) -> usize {
        4 * self.n + 2 * self.m
    }
    pub fn inputs(&self) -> usize {
        2 * self.n
    }
    pub fn vd(&self, i: usize) -> usize {
        i
    }
    pub fn vq(&self, i: usize) -> usize {
        self.n + i
    }
    pub fn id(&self, i: usize) -> usize {
        2 * self.n + i
    }
    pub fn iq(&self, i: usize) -> usize {
        3 * self.n + i
    }
    pub fn itd(&self, j: usize) -> usize {
        4 * self.n + j
    }
    pub fn itq(&self, j: usize) -> usize {
        4 * self.n + self.m + j
    }

    pub fn voltage(&self, x: &DVector<f64>, i: usize) -> DqVector {
        DqVector::new(x[self.vd(i)], x[self.vq(i)])
    }
    pub fn current(&self, x: &DVector<f64>, i: usize) -> DqVector {
        DqVector::new(x[self.id(i)], x[self.iq(i)])
    }
    pub fn line_current(&self, x: &DVector<f64>, j: usize) -> DqVector {
        DqVector::new(x[self.itd(j)], x[self.itq(j)])
    }

    pub fn set_voltage(&self, x: &mut DVector<f64>, i: usize, v: DqVector) {
        x[self.vd(i)] = v.d;
        x[self.vq(i)] = v.q;
    }
    pub fn set_current(&self, x: &mut DVector<f64>, i: usize, v: DqVector) {
        x[self.id(i)] = v.d;
        x[self.iq(i)] = v.q;
    }
    pub fn set_line_current(&self, x: &mut DVector<f64>, j: usize, v: DqVector) {
        x[self.itd(j)] = v.d;
        x[self.itq(j)] = v.q;
    }

    /// Human-readable name of each state, in order.
    pub fn state_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for (prefix, count) in [
            ("vd", self.n),
            ("vq", self.n),
            ("id", self.n),
            ("iq", self.n),
            ("itd", self.m),
            ("itq", self.m),
        ] {
            names.extend((1..=count).map(|k| format!("{prefix}{k}")));
        }
        names
    }

    /// Rotates every dq pair of the state by `theta`.
    pub fn rotate_state(&self, x: &DVector<f64>, theta: f64) -> DVector<f64> {
        let mut out = x.clone();
        for i in 0..self.n {
            self.set_voltage(&mut out, i, self.voltage(x, i).rotated(theta));
            self.set_current(&mut out, i, self.current(x, i).rotated(theta));
        }
        for j in 0..self.m {
            self.set_line_current(&mut out, j, self.line_current(x, j).rotated(theta));
        }
        out
    }
}

/// Continuous-time matrices `x' = A x + B u + E i_L`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub layout: StateLayout,
}

/// Forward-Euler discretization `A_d = I + A tau`, `B_d = B tau`, `E_d = E tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub e_d: DMatrix<f64>,
    pub c_d: DMatrix<f64>,
    pub tau_s: f64,
}

/// Assembles the network model in a frame rotating at `omega_g`.
pub fn assemble(
    ibrs: &[IbrParams],
    lines: &[LineParams],
    topology: &Topology,
    omega_g: f64,
) -> Result<ContinuousModel> {
    let n = topology.n;
    let m = topology.m();
    if ibrs.len() != n {
        return Err(config_err(format!("{} inverters given for a {n}-bus topology", ibrs.len())));
    }
    if lines.len() != m {
        return Err(config_err(format!("{} lines given for a {m}-line topology", lines.len())));
    }
    if !(omega_g.is_finite() && omega_g >= 0.0) {
        return Err(config_err(format!("grid frequency must be non-negative, got {omega_g}")));
    }
    let inc = incidence(topology)?;
    let lay = StateLayout { n, m };
    let dim = lay.dim();
    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DMatrix::zeros(dim, 2 * n);
    let mut e = DMatrix::zeros(dim, 2 * n);

    for (i, p) in ibrs.iter().enumerate() {
        // capacitor: C v' = -w C J v + i + B i_t - i_L
        a[(lay.vd(i), lay.vq(i))] = -omega_g;
        a[(lay.vq(i), lay.vd(i))] = omega_g;
        a[(lay.vd(i), lay.id(i))] = 1.0 / p.c;
        a[(lay.vq(i), lay.iq(i))] = 1.0 / p.c;
        for j in 0..m {
            let s = inc[(i, j)];
            if s != 0.0 {
                a[(lay.vd(i), lay.itd(j))] = s / p.c;
                a[(lay.vq(i), lay.itq(j))] = s / p.c;
            }
        }
        e[(lay.vd(i), i)] = -1.0 / p.c;
        e[(lay.vq(i), n + i)] = -1.0 / p.c;

        // filter: L i' = -v - (w L J + R) i + u
        a[(lay.id(i), lay.vd(i))] = -1.0 / p.l;
        a[(lay.iq(i), lay.vq(i))] = -1.0 / p.l;
        a[(lay.id(i), lay.id(i))] = -p.r / p.l;
        a[(lay.iq(i), lay.iq(i))] = -p.r / p.l;
        a[(lay.id(i), lay.iq(i))] = -omega_g;
        a[(lay.iq(i), lay.id(i))] = omega_g;
        b[(lay.id(i), i)] = 1.0 / p.l;
        b[(lay.iq(i), n + i)] = 1.0 / p.l;
    }

    for (j, ln) in lines.iter().enumerate() {
        if !ln.is_inductive(omega_g) {
            log::warn!(
                "line {} is not inductance dominated (w l = {:.4} ohm <= r = {:.4} ohm)",
                j + 1,
                omega_g * ln.l,
                ln.r
            );
        }
        // line: L_t i_t' = -B^T v - (w L_t J + R_t) i_t
        for i in 0..n {
            let s = inc[(i, j)];
            if s != 0.0 {
                a[(lay.itd(j), lay.vd(i))] = -s / ln.l;
                a[(lay.itq(j), lay.vq(i))] = -s / ln.l;
            }
        }
        a[(lay.itd(j), lay.itd(j))] = -ln.r / ln.l;
        a[(lay.itq(j), lay.itq(j))] = -ln.r / ln.l;
        a[(lay.itd(j), lay.itq(j))] = -omega_g;
        a[(lay.itq(j), lay.itd(j))] = omega_g;
    }

    let mut c = DMatrix::zeros(4 * n, dim);
    for k in 0..4 * n {
        c[(k, k)] = 1.0;
    }
    Ok(ContinuousModel { a, b, e, c, layout: lay })
}

/// Forward-Euler discretization with step `tau_s`.
pub fn discretize(model: &ContinuousModel, tau_s: f64) -> DiscreteModel {
    let dim = model.a.nrows();
    DiscreteModel {
        a_d: DMatrix::identity(dim, dim) + &model.a * tau_s,
        b_d: &model.b * tau_s,
        e_d: &model.e * tau_s,
        c_d: model.c.clone(),
        tau_s,
    }
}

/// Assembled network with its parameters and control-period discretization.
#[derive(Debug, Clone)]
pub struct MicrogridModel {
    pub ibrs: Vec<IbrParams>,
    pub lines: Vec<LineParams>,
    pub topology: Topology,
    pub incidence: DMatrix<f64>,
    pub omega_g: f64,
    pub continuous: ContinuousModel,
    pub discrete: DiscreteModel,
}

impl MicrogridModel {
    pub fn new(
        ibrs: Vec<IbrParams>,
        lines: Vec<LineParams>,
        topology: Topology,
        omega_g: f64,
        tau_s: f64,
    ) -> Result<Self> {
        for p in &ibrs {
            p.validate()?;
        }
        for l in &lines {
            l.validate()?;
        }
        if !(tau_s.is_finite() && tau_s > 0.0) {
            return Err(config_err(format!("sampling time must be positive, got {tau_s}")));
        }
        let continuous = assemble(&ibrs, &lines, &topology, omega_g)?;
        let discrete = discretize(&continuous, tau_s);
        let incidence = incidence(&topology)?;
        Ok(MicrogridModel { ibrs, lines, topology, incidence, omega_g, continuous, discrete })
    }

    pub fn layout(&self) -> StateLayout {
        self.continuous.layout
    }

    pub fn tau_s(&self) -> f64 {
        self.discrete.tau_s
    }

    /// Net current leaving each capacitor node towards loads and lines,
    /// `i_L - (B_ik i_t)`, in the frame of `x`.
    pub fn output_current(&self, x: &DVector<f64>, load_current: &[DqVector], i: usize) -> DqVector {
        let lay = self.layout();
        let mut out = load_current[i];
        for j in 0..lay.m {
            let s = self.incidence[(i, j)];
            if s != 0.0 {
                out -= lay.line_current(x, j) * s;
            }
        }
        out
    }

    /// Stored electromagnetic energy `1/2 (i'Li + v'Cv + i_t'L_t i_t)` of the dq state.
    pub fn stored_energy(&self, x: &DVector<f64>) -> f64 {
        let lay = self.layout();
        let mut e = 0.0;
        for (i, p) in self.ibrs.iter().enumerate() {
            e += p.c * lay.voltage(x, i).norm_squared() + p.l * lay.current(x, i).norm_squared();
        }
        for (j, ln) in self.lines.iter().enumerate() {
            e += ln.l * lay.line_current(x, j).norm_squared();
        }
        0.5 * e
    }
}

/// Bus load currents `i_L = Y v` for per-bus admittances.
pub fn load_currents(layout: StateLayout, x: &DVector<f64>, admittance: &[Matrix2<f64>]) -> Vec<DqVector> {
    (0..layout.n)
        .map(|i| layout.voltage(x, i).transform(&admittance[i]))
        .collect()
}

/// Fixed-step integrator advancing the plant by one control period with
/// `substeps` Euler sub-intervals and the input held constant.
#[derive(Debug, Clone)]
pub struct PlantStepper {
    layout: StateLayout,
    substeps: usize,
    a_h: DMatrix<f64>,
    b_h: DMatrix<f64>,
    e_h: DMatrix<f64>,
    u: DVector<f64>,
    il: DVector<f64>,
    scratch: DVector<f64>,
}

impl PlantStepper {
    pub fn new(model: &MicrogridModel, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(config_err("plant substeps must be at least 1"));
        }
        let (a_h, b_h, e_h) = if substeps == 1 {
            let d = &model.discrete;
            (d.a_d.clone(), d.b_d.clone(), d.e_d.clone())
        } else {
            let d = discretize(&model.continuous, model.tau_s() / substeps as f64);
            (d.a_d, d.b_d, d.e_d)
        };
        let lay = model.layout();
        Ok(PlantStepper {
            layout: lay,
            substeps,
            a_h,
            b_h,
            e_h,
            u: DVector::zeros(lay.inputs()),
            il: DVector::zeros(lay.inputs()),
            scratch: DVector::zeros(lay.dim()),
        })
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Advances `x` in place. Load currents are re-evaluated from the bus
    /// admittances at the start of every sub-interval.
    pub fn step(&mut self, x: &mut DVector<f64>, u: &[DqVector], admittance: &[Matrix2<f64>], time: f64) -> Result<()> {
        let n = self.layout.n;
        if u.len() != n || admittance.len() != n {
            return Err(config_err(format!(
                "{} inputs and {} admittances given for {n} inverters",
                u.len(),
                admittance.len()
            )));
        }
        for (i, ui) in u.iter().enumerate() {
            self.u[i] = ui.d;
            self.u[n + i] = ui.q;
        }
        for _ in 0..self.substeps {
            for (i, y) in admittance.iter().enumerate() {
                let il = self.layout.voltage(x, i).transform(y);
                self.il[i] = il.d;
                self.il[n + i] = il.q;
            }
            self.a_h.mul_to(x, &mut self.scratch);
            self.scratch.gemv(1.0, &self.b_h, &self.u, 1.0);
            self.scratch.gemv(1.0, &self.e_h, &self.il, 1.0);
            std::mem::swap(x, &mut self.scratch);
        }
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Diverged { time, state: x.iter().copied().collect() })
        }
    }
}

/// One control period of the plant; see [`PlantStepper`].
pub fn step_plant(
    model: &MicrogridModel,
    x: &DVector<f64>,
    u: &[DqVector],
    admittance: &[Matrix2<f64>],
    substeps: usize,
) -> Result<DVector<f64>> {
    let mut stepper = PlantStepper::new(model, substeps)?;
    let mut next = x.clone();
    stepper.step(&mut next, u, admittance, 0.0)?;
    Ok(next)
}

/// Reference inverter parameters.
pub fn reference_ibr() -> IbrParams {
    IbrParams { r: 0.2, l: 3.5e-3, c: 50e-6, v_dc: 600.0 }
}

/// Line parameters used for both lines of the three-inverter example.
pub fn reference_line() -> LineParams {
    LineParams { r: 0.2, l: 0.3e-3 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const W: f64 = 2.0 * PI * 50.0;

    fn reference_model(tau_s: f64) -> MicrogridModel {
        MicrogridModel::new(vec![reference_ibr(); 3], vec![reference_line(); 2], Topology::chain(3), W, tau_s).unwrap()
    }

    fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a.kronecker(b)
    }

    #[test]
    fn incidence_examples() {
        let b = incidence(&Topology::chain(3)).unwrap();
        assert_eq!(b, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 1.0, 0.0, -1.0]));
        let single = incidence(&Topology::chain(1)).unwrap();
        assert_eq!(single.shape(), (1, 0));
        let rev = incidence(&Topology::new(3, vec![(1, 0)]).unwrap_err_or_chain()).unwrap();
        assert_eq!(rev.column(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0, 0.0]);
    }

    trait OrChain {
        fn unwrap_err_or_chain(self) -> Topology;
    }

    impl OrChain for Result<Topology> {
        // a single reversed edge leaves bus 3 isolated; append the second line
        fn unwrap_err_or_chain(self) -> Topology {
            assert!(self.is_err());
            Topology::new(3, vec![(1, 0), (1, 2)]).unwrap()
        }
    }

    #[test]
    fn incidence_rejects_bad_indices() {
        assert!(Topology::new(3, vec![(0, 3)]).is_err());
        assert!(Topology::new(3, vec![(1, 1), (0, 2)]).is_err());
        assert!(incidence(&Topology { n: 2, edges: vec![(0, 5)] }).is_err());
    }

    #[test]
    fn chain_incidence_columns_and_rank() {
        for n in 2..8 {
            let b = incidence(&Topology::chain(n)).unwrap();
            for col in b.column_iter() {
                assert_eq!(col.sum(), 0.0);
            }
            assert_eq!(b.rank(1e-9), n - 1);
        }
    }

    #[test]
    fn single_inverter_block_is_stable() {
        let p = reference_ibr();
        let m = assemble(&[p], &[], &Topology::chain(1), W).unwrap();
        assert_eq!(m.a.shape(), (4, 4));
        for z in m.a.complex_eigenvalues().iter() {
            assert!(z.re <= 0.0, "{z}");
        }
        // hand-built block: v' = -wJv + i/C, i' = -v/L - (wJ + r/L) i
        let hand = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, -W, 1.0 / p.c, 0.0,
                W, 0.0, 0.0, 1.0 / p.c,
                -1.0 / p.l, 0.0, -p.r / p.l, -W,
                0.0, -1.0 / p.l, W, -p.r / p.l,
            ],
        );
        assert_eq!(m.a, hand);
    }

    #[test]
    fn lossless_network_is_energy_antisymmetric() {
        let ibrs = vec![IbrParams { r: 0.0, ..reference_ibr() }; 3];
        let lines = vec![LineParams { r: 0.0, l: 0.3e-3 }; 2];
        let m = assemble(&ibrs, &lines, &Topology::chain(3), 0.0).unwrap();
        // with the energy weights M, M A is antisymmetric
        let lay = m.layout;
        let mut w = DVector::zeros(lay.dim());
        for i in 0..3 {
            w[lay.vd(i)] = ibrs[i].c;
            w[lay.vq(i)] = ibrs[i].c;
            w[lay.id(i)] = ibrs[i].l;
            w[lay.iq(i)] = ibrs[i].l;
        }
        for j in 0..2 {
            w[lay.itd(j)] = lines[j].l;
            w[lay.itq(j)] = lines[j].l;
        }
        let ma = DMatrix::from_diagonal(&w) * &m.a;
        assert!((&ma + ma.transpose()).amax() < 1e-12);
    }

    #[test]
    fn energy_is_conserved_without_losses() {
        let ibrs = vec![IbrParams { r: 0.0, ..reference_ibr() }; 3];
        let lines = vec![LineParams { r: 0.0, l: 0.3e-3 }; 2];
        let model = assemble(&ibrs, &lines, &Topology::chain(3), 123.0).unwrap();
        let lay = model.layout;
        let energy = |x: &DVector<f64>| {
            let mut e = 0.0;
            for (i, p) in ibrs.iter().enumerate() {
                e += p.c * lay.voltage(x, i).norm_squared() + p.l * lay.current(x, i).norm_squared();
            }
            for (j, line) in lines.iter().enumerate() {
                e += line.l * lay.line_current(x, j).norm_squared();
            }
            0.5 * e
        };
        let mut x = DVector::from_fn(lay.dim(), |k, _| ((k as f64) * 0.7).sin() * if k < 6 { 300.0 } else { 5.0 });
        let e0 = energy(&x);
        let h = 1e-7;
        let a = &model.a;
        for _ in 0..10_000 {
            let k1 = a * &x;
            let k2 = a * (&x + &k1 * (h / 2.0));
            let k3 = a * (&x + &k2 * (h / 2.0));
            let k4 = a * (&x + &k3 * h);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        assert!((energy(&x) - e0).abs() / e0 < 1e-6);
    }

    #[test]
    fn reference_matrix_matches_kronecker_form() {
        let p = reference_ibr();
        let ln = reference_line();
        let model = reference_model(1e-4);
        let a = &model.continuous.a;
        assert_eq!(a.shape(), (16, 16));
        let b = incidence(&Topology::chain(3)).unwrap();
        let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let i2 = DMatrix::<f64>::identity(2, 2);
        let (n, m) = (3, 2);
        let mut oracle = DMatrix::zeros(16, 16);
        let put = |o: &mut DMatrix<f64>, r: usize, c: usize, blk: DMatrix<f64>| {
            o.view_mut((r, c), blk.shape()).copy_from(&blk);
        };
        let i_n = DMatrix::<f64>::identity(n, n);
        let i_m = DMatrix::<f64>::identity(m, m);
        put(&mut oracle, 0, 0, kron(&j, &i_n) * -W);
        put(&mut oracle, 0, 2 * n, kron(&i2, &i_n) / p.c);
        put(&mut oracle, 0, 4 * n, kron(&i2, &b) / p.c);
        put(&mut oracle, 2 * n, 0, kron(&i2, &i_n) / -p.l);
        put(&mut oracle, 2 * n, 2 * n, kron(&j, &i_n) * -W - kron(&i2, &i_n) * (p.r / p.l));
        put(&mut oracle, 4 * n, 0, kron(&i2, &b.transpose()) / -ln.l);
        put(&mut oracle, 4 * n, 4 * n, kron(&j, &i_m) * -W - kron(&i2, &i_m) * (ln.r / ln.l));
        assert!((a - &oracle).amax() <= 1e-12 * a.amax());

        let e = &model.continuous.e;
        let nz: Vec<f64> = e.iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nz.len(), 2 * n);
        assert!(nz.iter().all(|v| *v == -1.0 / p.c));
        // loads only enter the capacitor rows
        assert_eq!(e.rows(2 * n, 2 * n + 2 * m).amax(), 0.0);

        let c = &model.continuous.c;
        assert_eq!(c.shape(), (4 * n, 16));
        assert_eq!(c.columns(0, 4 * n), DMatrix::identity(4 * n, 4 * n));
        assert_eq!(c.columns(4 * n, 2 * m).amax(), 0.0);
    }

    #[test]
    fn discretization_is_bit_exact_euler() {
        let model = reference_model(1e-4);
        let d = &model.discrete;
        let a = &model.continuous.a;
        for r in 0..16 {
            for c in 0..16 {
                let delta = if r == c { 1.0 } else { 0.0 };
                assert_eq!(d.a_d[(r, c)], delta + a[(r, c)] * 1e-4);
            }
        }
        assert_eq!(d.b_d, &model.continuous.b * 1e-4);
        assert_eq!(d.e_d, &model.continuous.e * 1e-4);
        assert_eq!(d.c_d, model.continuous.c);

        let zero = discretize(&model.continuous, 0.0);
        assert_eq!(zero.a_d, DMatrix::identity(16, 16));
        assert_eq!(zero.b_d.amax(), 0.0);
    }

    #[test]
    fn scalar_euler() {
        let m = ContinuousModel {
            a: DMatrix::from_element(1, 1, -1.0),
            b: DMatrix::zeros(1, 0),
            e: DMatrix::zeros(1, 0),
            c: DMatrix::identity(1, 1),
            layout: StateLayout { n: 0, m: 0 },
        };
        assert_eq!(discretize(&m, 1e-4).a_d[(0, 0)], 0.9999);
    }

    #[test]
    fn euler_stability_needs_small_steps() {
        // The line/capacitor modes near 8 and 14 krad/s sit outside the Euler
        // stability disc at 100 us and at 10 us, inside at 1 us.
        let rho = |tau: f64| crate::stability::spectral_radius(&reference_model(tau).discrete.a_d);
        assert!(rho(1e-4) > 1.5);
        assert!(rho(1e-5) > 1.0);
        assert!(rho(1e-6) < 1.0);
    }

    #[test]
    fn load_admittance_examples() {
        let (r, x) = series_impedance(1000.0, 200.0, 220.0);
        assert!((r - 46.54).abs() < 0.01 && (x - 9.31).abs() < 0.01, "{r} {x}");
        let y = load_admittance(&LoadSpec::always(0, 1200.0, 0.0), 220.0);
        let r3 = 3.0 * 220.0 * 220.0 / 1200.0;
        assert!((y - Matrix2::identity() / r3).abs().max() < 1e-15);
        assert_eq!(load_admittance(&LoadSpec::always(0, 0.0, 0.0), 220.0), Matrix2::zeros());

        let y = load_admittance(&LoadSpec::always(2, 3000.0, 200.0), 220.0);
        let v = DqVector::new(220.0 * 2f64.sqrt(), 0.0);
        let i = v.transform(&y);
        let p = 1.5 * v.dot(i);
        assert!((p - 3000.0).abs() / 3000.0 < 1e-3, "{p}");
        let amp = (3000f64.powi(2) + 200f64.powi(2)).sqrt() / (1.5 * v.d);
        assert!((i.norm() - amp).abs() / amp < 1e-3);
    }

    #[test]
    fn plant_rest_state_and_single_substep() {
        let model = reference_model(1e-4);
        let lay = model.layout();
        let y = vec![load_admittance(&LoadSpec::always(0, 1000.0, 200.0), 220.0); 3];
        let zero = step_plant(&model, &DVector::zeros(16), &[DqVector::ZERO; 3], &[Matrix2::zeros(); 3], 10).unwrap();
        assert_eq!(zero, DVector::zeros(16));

        let x = DVector::from_fn(16, |k, _| (k as f64 * 1.3).cos() * if k < 6 { 300.0 } else { 4.0 });
        let u = [DqVector::new(300.0, 10.0), DqVector::new(-50.0, 200.0), DqVector::new(0.0, -400.0)];
        let next = step_plant(&model, &x, &u, &y, 1).unwrap();
        let il = load_currents(lay, &x, &y);
        let mut uv = DVector::zeros(6);
        let mut iv = DVector::zeros(6);
        for i in 0..3 {
            uv[i] = u[i].d;
            uv[3 + i] = u[i].q;
            iv[i] = il[i].d;
            iv[3 + i] = il[i].q;
        }
        let d = &model.discrete;
        let expect = &d.a_d * &x + &d.b_d * uv + &d.e_d * iv;
        assert!((next - expect).amax() <= 1e-12 * x.amax());
    }

    fn drive(model: &MicrogridModel, substeps: usize, steps: usize) -> Result<DVector<f64>> {
        let y: Vec<Matrix2<f64>> = [(0, 1000.0), (1, 1000.0), (2, 3000.0)]
            .iter()
            .map(|&(bus, p)| load_admittance(&LoadSpec::always(bus, p, 200.0), 220.0))
            .collect();
        let u = [DqVector::new(311.0, 0.0); 3];
        let mut stepper = PlantStepper::new(model, substeps)?;
        let mut x = DVector::zeros(model.layout().dim());
        for k in 0..steps {
            stepper.step(&mut x, &u, &y, (k + 1) as f64 * model.tau_s())?;
        }
        Ok(x)
    }

    #[test]
    fn substep_refinement_converges() {
        let model = reference_model(1e-5);
        let coarse = drive(&model, 10, 1000).unwrap();
        let fine = drive(&model, 100, 1000).unwrap();
        assert!((&coarse - &fine).norm() / fine.norm() < 5e-3);
    }

    #[test]
    fn coarse_euler_diverges_at_long_periods() {
        let model = reference_model(1e-4);
        // 35 sub-intervals of 100 us is the coarsest stable Euler step
        assert!(drive(&model, 10, 1000).map(|x| x.amax() > 1e6).unwrap_or(true));
        let fine = drive(&model, 50, 1000).unwrap();
        let finer = drive(&model, 100, 1000).unwrap();
        assert!((&fine - &finer).norm() / finer.norm() < 5e-3);
    }

    #[test]
    fn divergence_is_reported_with_time() {
        let model = reference_model(1e-4);
        let err = drive(&model, 1, 100_000).unwrap_err();
        match err {
            Error::Diverged { time, state } => {
                assert!(time > 0.0);
                assert_eq!(state.len(), 16);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn layout_helpers() {
        let lay = StateLayout { n: 3, m: 2 };
        assert_eq!(lay.dim(), 16);
        assert_eq!(lay.inputs(), 6);
        assert_eq!(lay.state_names()[0], "vd1");
        assert_eq!(lay.state_names()[15], "itq2");
        let x = DVector::from_fn(16, |k, _| k as f64);
        let back = lay.rotate_state(&lay.rotate_state(&x, 0.3), -0.3);
        assert!((back - &x).amax() < 1e-12);
    }

    #[test]
    fn parameter_validation() {
        assert!(IbrParams { r: 0.0, ..reference_ibr() }.validate().is_err());
        assert!(LineParams { r: 0.2, l: -1.0 }.validate().is_err());
        assert!(MicrogridModel::new(vec![reference_ibr(); 2], vec![reference_line(); 2], Topology::chain(3), W, 1e-4).is_err());
        assert!(MicrogridModel::new(vec![reference_ibr(); 3], vec![reference_line(); 2], Topology::chain(3), W, 0.0).is_err());
        assert!(PlantStepper::new(&reference_model(1e-4), 0).is_err());
        let model = reference_model(1e-4);
        let mut stepper = PlantStepper::new(&model, 10).unwrap();
        let mut x = DVector::zeros(16);
        assert!(stepper.step(&mut x, &[DqVector::ZERO; 2], &[Matrix2::zeros(); 3], 0.0).is_err());
        // the example line is resistance dominated at 50 Hz
        assert!(!reference_line().is_inductive(W));
        assert!(LineParams { r: 0.05, l: 0.3e-3 }.is_inductive(W));
    }
}
