//! Reference-frame transforms shared by every other module.
//!
//! Conventions, fixed once for the whole crate:
//!
//! * The Park transform is amplitude invariant: a balanced set with phase
//!   peak `X` maps to a dq vector of magnitude `X`.
//! * The d axis is aligned with phase `a` at `theta = 0`.
//! * The q axis lags d by 90°. With this choice the frequency coupling of an
//!   inductor in a frame rotating at `omega` reads `L di/dt = ... - omega L J i`
//!   with `J = [[0, 1], [-1, 0]]`.
//! * `rotation(phi) = exp(phi J)` advances a phasor by `phi`, so a quantity
//!   seen from a frame that leads by `phi` is `rotation(-phi) * x`.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::Matrix2;

const TWO_PI_3: f64 = 2.0 * PI / 3.0;

/// Instantaneous phase quantities (volts or amperes).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThreePhase {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ThreePhase {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// Balanced positive-sequence set `peak * cos(angle - k 2pi/3)`.
    pub fn balanced(peak: f64, angle: f64) -> Self {
        Self {
            a: peak * angle.cos(),
            b: peak * (angle - TWO_PI_3).cos(),
            c: peak * (angle + TWO_PI_3).cos(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.a + self.b + self.c
    }

    /// Largest absolute phase value.
    pub fn max_abs(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs())
    }
}

/// Direct/quadrature pair in a rotating frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DqVector {
    pub d: f64,
    pub q: f64,
}

impl DqVector {
    pub const ZERO: DqVector = DqVector { d: 0.0, q: 0.0 };

    pub const fn new(d: f64, q: f64) -> Self {
        Self { d, q }
    }

    pub fn norm(&self) -> f64 {
        self.d.hypot(self.q)
    }

    pub fn norm_squared(&self) -> f64 {
        self.d * self.d + self.q * self.q
    }

    pub fn dot(&self, other: DqVector) -> f64 {
        self.d * other.d + self.q * other.q
    }

    /// `J * self`.
    pub fn j(&self) -> DqVector {
        DqVector::new(self.q, -self.d)
    }

    /// `rotation(theta) * self`.
    pub fn rotated(&self, theta: f64) -> DqVector {
        let (s, c) = theta.sin_cos();
        DqVector::new(c * self.d + s * self.q, -s * self.d + c * self.q)
    }

    pub fn transform(&self, m: &Matrix2<f64>) -> DqVector {
        DqVector::new(
            m[(0, 0)] * self.d + m[(0, 1)] * self.q,
            m[(1, 0)] * self.d + m[(1, 1)] * self.q,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.d.is_finite() && self.q.is_finite()
    }
}

impl Add for DqVector {
    type Output = DqVector;
    fn add(self, rhs: DqVector) -> DqVector {
        DqVector::new(self.d + rhs.d, self.q + rhs.q)
    }
}

impl AddAssign for DqVector {
    fn add_assign(&mut self, rhs: DqVector) {
        self.d += rhs.d;
        self.q += rhs.q;
    }
}

impl Sub for DqVector {
    type Output = DqVector;
    fn sub(self, rhs: DqVector) -> DqVector {
        DqVector::new(self.d - rhs.d, self.q - rhs.q)
    }
}

impl SubAssign for DqVector {
    fn sub_assign(&mut self, rhs: DqVector) {
        self.d -= rhs.d;
        self.q -= rhs.q;
    }
}

impl Neg for DqVector {
    type Output = DqVector;
    fn neg(self) -> DqVector {
        DqVector::new(-self.d, -self.q)
    }
}

impl Mul<f64> for DqVector {
    type Output = DqVector;
    fn mul(self, k: f64) -> DqVector {
        DqVector::new(self.d * k, self.q * k)
    }
}

impl Mul<DqVector> for f64 {
    type Output = DqVector;
    fn mul(self, v: DqVector) -> DqVector {
        v * self
    }
}

/// The constant skew matrix `[[0, 1], [-1, 0]]`.
pub fn skew_j() -> Matrix2<f64> {
    Matrix2::new(0.0, 1.0, -1.0, 0.0)
}

/// `exp(theta J) = [[cos, sin], [-sin, cos]]`.
pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, s, -s, c)
}

/// Amplitude-invariant Park transform at electrical angle `theta`.
pub fn abc_to_dq(x: ThreePhase, theta: f64) -> DqVector {
    let (sa, ca) = theta.sin_cos();
    let (sb, cb) = (theta - TWO_PI_3).sin_cos();
    let (sc, cc) = (theta + TWO_PI_3).sin_cos();
    DqVector::new(
        2.0 / 3.0 * (x.a * ca + x.b * cb + x.c * cc),
        2.0 / 3.0 * (x.a * sa + x.b * sb + x.c * sc),
    )
}

/// Inverse of [`abc_to_dq`] at the same angle (zero sequence is zero).
pub fn dq_to_abc(x: DqVector, theta: f64) -> ThreePhase {
    let (sa, ca) = theta.sin_cos();
    let (sb, cb) = (theta - TWO_PI_3).sin_cos();
    let (sc, cc) = (theta + TWO_PI_3).sin_cos();
    ThreePhase {
        a: x.d * ca + x.q * sa,
        b: x.d * cb + x.q * sb,
        c: x.d * cc + x.q * sc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_maps_to_zero() {
        assert_eq!(abc_to_dq(ThreePhase::default(), 0.0), DqVector::ZERO);
        let abc = dq_to_abc(DqVector::ZERO, 1.234);
        assert_eq!(abc.max_abs(), 0.0);
    }

    #[test]
    fn aligned_balanced_set_is_pure_d() {
        let dq = abc_to_dq(ThreePhase::balanced(311.0, 0.7), 0.7);
        assert!((dq.d - 311.0).abs() < 1e-9);
        assert!(dq.q.abs() < 1e-9);
    }

    #[test]
    fn quarter_turn_offset_moves_to_q_axis() {
        // Frame leads the phasor by pi/2; q lags d so the phasor shows up on +q.
        let dq = abc_to_dq(ThreePhase::balanced(311.0, 0.0), PI / 2.0);
        assert!(dq.d.abs() < 1e-9);
        assert!((dq.q - 311.0).abs() < 1e-9);
        let back = dq_to_abc(dq, PI / 2.0);
        let orig = ThreePhase::balanced(311.0, 0.0);
        assert!((back.a - orig.a).abs() < 1e-9);
        assert!((back.b - orig.b).abs() < 1e-9);
        assert!((back.c - orig.c).abs() < 1e-9);
    }

    #[test]
    fn pure_d_at_zero_angle_is_phase_a_peak() {
        let abc = dq_to_abc(DqVector::new(311.0, 0.0), 0.0);
        assert!((abc.a - 311.0).abs() < 1e-12);
        assert!((abc.b + 155.5).abs() < 1e-9);
        assert!(abc.sum().abs() < 1e-9);
    }

    #[test]
    fn rotation_basics() {
        assert_eq!(rotation(0.0), Matrix2::identity());
        let v = DqVector::new(1.0, 0.0).transform(&rotation(PI / 2.0));
        assert!(v.d.abs() < 1e-15 && (v.q + 1.0).abs() < 1e-15);
        // J generates the rotation: d/dtheta rotation(theta) at 0 is J.
        let h = 1e-7;
        let fd = (rotation(h) - rotation(-h)) / (2.0 * h);
        assert!((fd - skew_j()).abs().max() < 1e-8);
        let j = skew_j();
        assert_eq!(j * j, -Matrix2::identity());
        assert_eq!(j.transpose(), -j);
    }

    #[test]
    fn rotation_matches_matrix_exponential_series() {
        let j = skew_j();
        for &theta in &[0.3, -1.1, 2.9] {
            let mut term = Matrix2::identity();
            let mut sum = Matrix2::identity();
            for k in 1..40 {
                term = term * j * (theta / k as f64);
                sum += term;
            }
            assert!((sum - rotation(theta)).abs().max() < 1e-13);
        }
    }

    #[test]
    fn rotated_matches_matrix_form() {
        let v = DqVector::new(3.0, -2.0);
        let a = v.rotated(0.4);
        let b = v.transform(&rotation(0.4));
        assert!((a - b).norm() < 1e-15);
        assert_eq!(v.j(), v.transform(&skew_j()));
    }

    proptest! {
        #[test]
        fn park_round_trip(peak in 1.0f64..1000.0, phase in -10.0f64..10.0, theta in -10.0f64..10.0) {
            let x = ThreePhase::balanced(peak, phase);
            let back = dq_to_abc(abc_to_dq(x, theta), theta);
            prop_assert!((back.a - x.a).abs() <= 1e-10 * peak);
            prop_assert!((back.b - x.b).abs() <= 1e-10 * peak);
            prop_assert!((back.c - x.c).abs() <= 1e-10 * peak);
        }

        #[test]
        fn dq_round_trip(d in -500.0f64..500.0, q in -500.0f64..500.0, theta in -10.0f64..10.0) {
            let v = DqVector::new(d, q);
            let back = abc_to_dq(dq_to_abc(v, theta), theta);
            let scale = v.norm().max(1.0);
            prop_assert!((back - v).norm() <= 1e-12 * scale);
        }

        #[test]
        fn amplitude_invariance(peak in 1.0f64..1000.0, phase in -5.0f64..5.0, theta in -5.0f64..5.0) {
            let dq = abc_to_dq(ThreePhase::balanced(peak, phase), theta);
            prop_assert!((dq.norm() - peak).abs() <= 1e-10 * peak);
        }

        #[test]
        fn rotation_composes(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let lhs = rotation(a) * rotation(b);
            prop_assert!((lhs - rotation(a + b)).abs().max() < 1e-12);
            let r = rotation(a);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            prop_assert!((r.transpose() * r - Matrix2::identity()).abs().max() < 1e-12);
        }

        #[test]
        fn rotating_the_frame_rotates_the_phasor(peak in 1.0f64..500.0, phase in -3.0f64..3.0, phi in -3.0f64..3.0) {
            // Advancing the three-phase phasor by phi equals rotation(phi) in dq.
            let base = abc_to_dq(ThreePhase::balanced(peak, phase), 0.0);
            let advanced = abc_to_dq(ThreePhase::balanced(peak, phase + phi), 0.0);
            prop_assert!((base.rotated(phi) - advanced).norm() < 1e-9 * peak);
        }
    }
}
