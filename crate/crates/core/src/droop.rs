//! P-f and Q-V droop with measurement filtering and per-inverter phase
//! bookkeeping.

use std::f64::consts::PI;

use crate::frames::DqVector;

/// Droop coefficients and nominal set-points of one inverter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroopParams {
    /// Active-power/frequency slope (rad/s per W).
    pub m_p: f64,
    /// Reactive-power/voltage slope (V per var).
    pub n_q: f64,
    /// Nominal voltage, peak amplitude (V).
    pub v_nom: f64,
    /// Nominal angular frequency of the common frame (rad/s).
    pub omega_g: f64,
}

impl DroopParams {
    /// Reference coefficients at 220 V rms / 50 Hz.
    pub fn reference() -> Self {
        DroopParams {
            m_p: 6e-5,
            n_q: 4e-3,
            v_nom: 220.0 * std::f64::consts::SQRT_2,
            omega_g: 2.0 * PI * 50.0,
        }
    }
}

/// Raw and low-pass filtered power measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerMeasurement {
    pub p_raw: f64,
    pub q_raw: f64,
    pub p_filt: f64,
    pub q_filt: f64,
    /// Filter cutoff (rad/s).
    pub omega_c: f64,
}

impl PowerMeasurement {
    pub fn new(omega_c: f64) -> Self {
        PowerMeasurement { p_raw: 0.0, q_raw: 0.0, p_filt: 0.0, q_filt: 0.0, omega_c }
    }
}

/// Droop outputs and accumulated phase offset from the common frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroopState {
    pub omega: f64,
    pub v: f64,
    /// Phase offset, kept in `(-pi, pi]`.
    pub delta: f64,
}

/// `P = 3/2 v'i`, `Q = 3/2 v'J i`. Inductive loads draw positive `Q`.
pub fn instantaneous_power(v: DqVector, i: DqVector) -> (f64, f64) {
    (1.5 * (v.d * i.d + v.q * i.q), 1.5 * (v.d * i.q - v.q * i.d))
}

/// First-order Euler low-pass update of both channels.
///
/// `omega_c = inf` (or any `tau_s * omega_c >= 1`) passes the raw values through.
pub fn lowpass_step(state: &PowerMeasurement, p_raw: f64, q_raw: f64, tau_s: f64) -> PowerMeasurement {
    let k = (tau_s * state.omega_c).min(1.0);
    PowerMeasurement {
        p_raw,
        q_raw,
        p_filt: state.p_filt + k * (p_raw - state.p_filt),
        q_filt: state.q_filt + k * (q_raw - state.q_filt),
        omega_c: state.omega_c,
    }
}

/// `omega_i = omega_g - m_p P`, `v_i = v_nom - n_q Q`.
pub fn droop_law(p_filt: f64, q_filt: f64, params: &DroopParams) -> (f64, f64) {
    (params.omega_g - params.m_p * p_filt, params.v_nom - params.n_q * q_filt)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = theta.rem_euclid(two_pi);
    if t > PI {
        t -= two_pi;
    }
    t
}

/// Integrates the phase offset of a droop frame relative to the common frame.
pub fn integrate_angle(delta: f64, omega_i: f64, omega_g: f64, tau_s: f64) -> f64 {
    wrap_angle(delta + (omega_i - omega_g) * tau_s)
}

/// Per-inverter active power satisfying `m_p1 P_1 = ... = m_pn P_n` and
/// `sum P_i = p_total`.
pub fn expected_sharing(m_p: &[f64], p_total: f64) -> Vec<f64> {
    let inv_sum: f64 = m_p.iter().map(|m| 1.0 / m).sum();
    m_p.iter().map(|m| p_total * (1.0 / m) / inv_sum).collect()
}
