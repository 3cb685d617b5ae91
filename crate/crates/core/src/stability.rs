//! Stability certificates for linear plants driven by a quantized version of
//! a linear state feedback `u = -K x`.
//!
//! With `V(x) = x'Px` from the closed-loop Lyapunov equation the certificate
//! bounds how far the finite input set can push the state away from the
//! origin: trajectories starting in the ball `|x| <= z` end up in the ball of
//! radius `r = sqrt(2 L_v a4 z eps / a3)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{config_err, Error, Result};
use crate::plant::IbrParams;

/// Inputs the quantizer may apply.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSet {
    /// The continuous law is applied unchanged.
    Exact,
    /// Nearest point of a finite set, ties going to the lowest index.
    Finite(Vec<DVector<f64>>),
}

/// `x(k+1) = A_d x + B_d q(-K x)` on the ball `|x| <= radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSystem {
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub inputs: InputSet,
    pub radius: f64,
}

impl QuantizedSystem {
    pub fn states(&self) -> usize {
        self.a_d.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_d.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.states(), self.input_dim());
        if n == 0 || !self.a_d.is_square() {
            return Err(config_err("A_d must be square and non-empty"));
        }
        if self.b_d.nrows() != n || m == 0 {
            return Err(config_err(format!("B_d must be {n} x m with m > 0")));
        }
        if self.k.shape() != (m, n) {
            return Err(config_err(format!("K must be {m} x {n}, got {:?}", self.k.shape())));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(config_err("state radius must be positive"));
        }
        if let InputSet::Finite(points) = &self.inputs {
            if points.is_empty() {
                return Err(config_err("finite input set is empty"));
            }
            if points.iter().any(|p| p.len() != m) {
                return Err(config_err(format!("every input point must have {m} components")));
            }
        }
        Ok(())
    }

    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a_d - &self.b_d * &self.k
    }

    /// Continuous feedback `-K x`.
    pub fn feedback(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.k * x)
    }

    /// Applied input for the continuous demand `target`.
    pub fn quantize(&self, target: &DVector<f64>) -> DVector<f64> {
        match &self.inputs {
            InputSet::Exact => target.clone(),
            InputSet::Finite(points) => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (k, p) in points.iter().enumerate() {
                    let d = (p - target).norm_squared();
                    if d < best_d {
                        best = k;
                        best_d = d;
                    }
                }
                points[best].clone()
            }
        }
    }

    pub fn step(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a_d * x + &self.b_d * self.quantize(&self.feedback(x))
    }
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn symmetric_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    (ev.min(), ev.max())
}

/// Solves `A'PA - P = -Q` by summing `sum_k (A')^k Q A^k`, doubling the
/// number of terms each pass.
pub fn solve_lyapunov(a_cl: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a_cl.nrows();
    if !a_cl.is_square() || q.shape() != (n, n) {
        return Err(config_err("Lyapunov equation needs square matrices of equal size"));
    }
    if (q - q.transpose()).amax() > 1e-12 * q.amax() || q.clone().cholesky().is_none() {
        return Err(config_err("Q must be symmetric positive definite"));
    }
    let rho = spectral_radius(a_cl);
    if !(rho < 1.0) {
        return Err(Error::NotCertifiable(format!("spectral radius >= 1 (closed loop has {rho:.6})")));
    }
    let mut p = q.clone();
    let mut power = a_cl.clone();
    // Each pass adds (A^k)' S A^k where S already holds the first k terms.
    for _ in 0..64 {
        let increment = power.transpose() * &p * &power;
        p += &increment;
        if increment.amax() <= 1e-14 * p.amax() {
            break;
        }
        power = &power * &power;
    }
    let p = (&p + p.transpose()) * 0.5;
    let residual = lyapunov_residual(a_cl, q, &p);
    if residual > 1e-8 {
        return Err(Error::NotCertifiable(format!("Lyapunov series did not converge (residual {residual:.3e})")));
    }
    Ok(p)
}

/// Relative residual `|A'PA - P + Q| / |Q|` in the max norm.
pub fn lyapunov_residual(a_cl: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (a_cl.transpose() * p * a_cl - p + q).amax() / q.amax()
}

/// Constants of the quadratic Lyapunov function on the state ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovConstants {
    /// `a1 |x|^2 <= V(x)`.
    pub alpha1: f64,
    /// `V(x) <= a2 |x|^2`.
    pub alpha2: f64,
    /// Decrease under the continuous law, `V(f(x, -Kx)) - V(x) <= -a3 |x|^2`.
    pub alpha3: f64,
    /// `|V(x) - V(y)| <= a4 (|x| + |y|) |x - y|`.
    pub alpha4: f64,
    /// Sensitivity of the successor state to the input, `|B_d|`.
    pub l_v: f64,
    /// Radius of the state ball.
    pub z_bar: f64,
}

pub fn estimate_constants(sys: &QuantizedSystem, p: &DMatrix<f64>, q: &DMatrix<f64>) -> LyapunovConstants {
    let (alpha1, alpha2) = symmetric_eigen_range(p);
    let (alpha3, _) = symmetric_eigen_range(q);
    LyapunovConstants {
        alpha1,
        alpha2,
        alpha3,
        alpha4: alpha2,
        l_v: sys.b_d.clone().singular_values().max(),
        z_bar: sys.radius,
    }
}

impl LyapunovConstants {
    /// Contraction condition `a3 / a1 < 2`.
    pub fn condition_ratio(&self) -> f64 {
        self.alpha3 / self.alpha1
    }

    /// Worst-case increase of `V` per step caused by quantization error `epsilon`.
    pub fn disturbance(&self, epsilon: f64) -> f64 {
        2.0 * epsilon * self.l_v * self.alpha4 * self.z_bar
    }
}

/// `r = sqrt(2 L_v a4 z eps / a3)`, refused unless `a3 / a1 < 2`.
pub fn ultimate_bound(c: &LyapunovConstants, epsilon: f64) -> Result<f64> {
    if !(c.alpha3 > 0.0 && c.alpha1 > 0.0) {
        return Err(Error::NotCertifiable("alpha1 and alpha3 must be positive".into()));
    }
    if !(c.condition_ratio() < 2.0) {
        return Err(Error::NotCertifiable(format!(
            "alpha3/alpha1 = {:.6} violates alpha3/alpha1 < 2",
            c.condition_ratio()
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(config_err("quantization error must be non-negative"));
    }
    Ok((c.disturbance(epsilon) / c.alpha3).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCertificate {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub constants: LyapunovConstants,
    pub epsilon: f64,
    pub r: f64,
}

/// Builds `V` for the closed loop with weight `q` and bounds the effect of a
/// quantization error `epsilon`.
pub fn certify(sys: &QuantizedSystem, q: &DMatrix<f64>, epsilon: f64) -> Result<LyapunovCertificate> {
    sys.validate()?;
    let p = solve_lyapunov(&sys.closed_loop(), q)?;
    let constants = estimate_constants(sys, &p, q);
    let epsilon = match sys.inputs {
        InputSet::Exact => 0.0,
        InputSet::Finite(_) => epsilon,
    };
    let r = ultimate_bound(&constants, epsilon)?;
    Ok(LyapunovCertificate { p, q: q.clone(), constants, epsilon, r })
}

impl LyapunovCertificate {
    pub fn v(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.p * x)[(0, 0)]
    }
}

/// Largest distance between `-K x` and its quantized value over a lattice of
/// states in the ball, `samples` points per axis.
pub fn sampled_quantization_error(sys: &QuantizedSystem, samples: usize) -> f64 {
    if matches!(sys.inputs, InputSet::Exact) {
        return 0.0;
    }
    let n = sys.states();
    let samples = samples.max(2);
    let total = samples.pow(n as u32);
    let coord = |k: usize| -sys.radius + 2.0 * sys.radius * k as f64 / (samples - 1) as f64;
    let mut worst: f64 = 0.0;
    for flat in 0..total {
        let mut rem = flat;
        let x = DVector::from_fn(n, |_, _| {
            let c = coord(rem % samples);
            rem /= samples;
            c
        });
        if x.norm() > sys.radius {
            continue;
        }
        let target = sys.feedback(&x);
        worst = worst.max((sys.quantize(&target) - target).norm());
    }
    worst
}

/// Outcome of a simulated quantized trajectory checked against a certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryReport {
    pub steps: usize,
    /// Steps where `V(k+1) - V(k) <= 2 eps L_v a4 z - a3 |x(k)|^2`.
    pub decrease_holds: usize,
    /// Steps where `V(k)` stays below the geometric recursion with rate `1 - a3/a2`.
    pub recursion_holds: usize,
    pub max_v: f64,
    /// Largest `|x|` over the trailing 20% of steps.
    pub limsup: f64,
    pub max_projection_error: f64,
    /// First step at which the state left the ball, if any.
    pub left_ball_at: Option<usize>,
    pub bound: f64,
    pub radius: f64,
}

impl TrajectoryReport {
    pub fn decrease_fraction(&self) -> f64 {
        self.decrease_holds as f64 / self.steps.max(1) as f64
    }

    pub fn recursion_fraction(&self) -> f64 {
        self.recursion_holds as f64 / self.steps.max(1) as f64
    }

    pub fn passed(&self) -> bool {
        // the bound is a limit, so a finite run is allowed a vanishing excess
        self.left_ball_at.is_none()
            && self.decrease_holds == self.steps
            && self.limsup <= self.bound + 1e-9 * self.radius
    }
}

pub fn verify_trajectory(
    sys: &QuantizedSystem,
    cert: &LyapunovCertificate,
    x0: &DVector<f64>,
    steps: usize,
) -> Result<TrajectoryReport> {
    sys.validate()?;
    if x0.len() != sys.states() {
        return Err(config_err(format!("initial state needs {} components", sys.states())));
    }
    if x0.norm() > sys.radius {
        return Err(config_err(format!("|x0| = {} lies outside the state ball", x0.norm())));
    }
    let c = &cert.constants;
    let kick = c.disturbance(cert.epsilon);
    let rate = 1.0 - c.alpha3 / c.alpha2;
    let tail_start = steps - steps / 5;

    let mut x = x0.clone();
    let mut v = cert.v(&x);
    let mut recursion = v;
    let mut report = TrajectoryReport {
        steps,
        decrease_holds: 0,
        recursion_holds: 0,
        max_v: v,
        limsup: 0.0,
        max_projection_error: 0.0,
        left_ball_at: None,
        bound: cert.r,
        radius: sys.radius,
    };
    for k in 0..steps {
        let target = sys.feedback(&x);
        let u = sys.quantize(&target);
        report.max_projection_error = report.max_projection_error.max((&u - &target).norm());
        let next = &sys.a_d * &x + &sys.b_d * u;
        let v_next = cert.v(&next);
        // relative rounding slack, plus a floor for states decayed into subnormals
        let slack = 1e-12 * (v + v_next + kick) + f64::MIN_POSITIVE;
        if v_next - v <= kick - c.alpha3 * x.norm_squared() + slack {
            report.decrease_holds += 1;
        }
        recursion = rate * recursion + kick;
        if v_next <= recursion + slack {
            report.recursion_holds += 1;
        }
        if !next.iter().all(|z| z.is_finite()) {
            report.left_ball_at.get_or_insert(k + 1);
            break;
        }
        if next.norm() > sys.radius && report.left_ball_at.is_none() {
            report.left_ball_at = Some(k + 1);
        }
        x = next;
        v = v_next;
        report.max_v = report.max_v.max(v);
        if k + 1 >= tail_start {
            report.limsup = report.limsup.max(x.norm());
        }
    }
    Ok(report)
}

/// Square lattice with `per_axis` points per axis on `[-half_width, half_width]^2`.
pub fn grid_inputs(half_width: f64, per_axis: usize) -> Vec<DVector<f64>> {
    let per_axis = per_axis.max(2);
    let coord = |k: usize| -half_width + 2.0 * half_width * k as f64 / (per_axis - 1) as f64;
    (0..per_axis)
        .flat_map(|i| (0..per_axis).map(move |j| DVector::from_vec(vec![coord(i), coord(j)])))
        .collect()
}

/// Covering radius of [`grid_inputs`] over its own square.
pub fn grid_covering_radius(half_width: f64, per_axis: usize) -> f64 {
    let spacing = 2.0 * half_width / (per_axis.max(2) - 1) as f64;
    spacing / std::f64::consts::SQRT_2
}

fn planar_rotation(gain: f64, theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[gain * c, gain * s, -gain * s, gain * c])
}

/// Two-state example: a slowly diverging oscillator `1.01 R(0.1)` with full
/// input authority, feedback placing the loop at `0.9 R(0.1)`, unit state
/// ball and a `per_axis x per_axis` input lattice just covering `-K x`.
pub fn demo_system(per_axis: usize) -> QuantizedSystem {
    let a_d = planar_rotation(1.01, 0.1);
    let k = &a_d - planar_rotation(0.9, 0.1);
    let radius = 1.0;
    let half_width = k.clone().singular_values().max() * radius;
    QuantizedSystem {
        a_d,
        b_d: DMatrix::identity(2, 2),
        k,
        inputs: InputSet::Finite(grid_inputs(half_width, per_axis)),
        radius,
    }
}

/// Analytic quantization error of [`demo_system`].
pub fn demo_epsilon(per_axis: usize) -> f64 {
    let sys = demo_system(per_axis);
    grid_covering_radius(sys.k.clone().singular_values().max() * sys.radius, per_axis)
}

/// Scalar example `x+ = 1.05 x + u`, feedback `u = -0.55 x` and inputs `{-h, 0, h}`.
pub fn scalar_demo(h: f64) -> QuantizedSystem {
    QuantizedSystem {
        a_d: DMatrix::from_element(1, 1, 1.05),
        b_d: DMatrix::from_element(1, 1, 1.0),
        k: DMatrix::from_element(1, 1, 0.55),
        inputs: InputSet::Finite(vec![
            DVector::from_element(1, -h),
            DVector::from_element(1, 0.0),
            DVector::from_element(1, h),
        ]),
        radius: 1.0,
    }
}

/// Linearized current loop of one inverter filter in its own frame. The state
/// is the current tracking error, the input the bridge voltage deviation and
/// the finite set the seven bridge vectors. Feedback halves the error each
/// step; the state ball is the largest one whose demand stays inside the
/// hexagon.
pub fn current_loop_system(ibr: &IbrParams, omega: f64, tau_s: f64) -> QuantizedSystem {
    let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let a_d = DMatrix::identity(2, 2) * (1.0 - tau_s * ibr.r / ibr.l) - j * (tau_s * omega);
    let gain = tau_s / ibr.l;
    let b_d = DMatrix::identity(2, 2) * gain;
    let k = (&a_d - DMatrix::identity(2, 2) * 0.5) / gain;
    let set = crate::inner_control::control_set(ibr.v_dc, 0.0);
    let points: Vec<DVector<f64>> = set
        .distinct_vectors(1e-9)
        .into_iter()
        .map(|u| DVector::from_vec(vec![u.d, u.q]))
        .collect();
    // inscribed radius of the hexagon with vertices at 2/3 V_dc
    let inscribed = 2.0 / 3.0 * ibr.v_dc * 3f64.sqrt() / 2.0;
    let radius = inscribed / k.clone().singular_values().max();
    QuantizedSystem { a_d, b_d, k, inputs: InputSet::Finite(points), radius }
}
