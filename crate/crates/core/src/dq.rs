//! Fixed-frame transforms between balanced three-phase quantities and their
//! two-component dq representation.
//!
//! The forward map keeps the first two rows of
//!
//! ```text
//!         | 1      cos(-2π/3)   cos(2π/3) |
//! M = 2/3 | 0      sin(-2π/3)   sin(2π/3) |
//!         | 0.5    0.5          0.5       |
//! ```
//!
//! so `d = (2a - b - c)/3` and `q = (c - b)/√3`. The third row is the zero
//! sequence, which is computed on request but never stored.
//!
//! With these column angles a sequence `a = cos θ, b = cos(θ - 2π/3),
//! c = cos(θ + 2π/3)` maps to `(cos θ, -sin θ)`: the dq vector turns
//! clockwise. The synthetic generator therefore uses the `a, c, b` ordering
//! so that the supply field, and the rotor, turn in the positive direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative imbalance accepted on synthetic (noise-free) data.
pub const DEFAULT_BALANCE_TOL: f64 = 1e-6;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThreePhaseSample {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DqSample {
    pub d: f64,
    pub q: f64,
}

impl ThreePhaseSample {
    pub const fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn sum(&self) -> f64 {
        self.a + self.b + self.c
    }

    /// Checks `|a+b+c| <= tol * max(|a|, |b|, |c|, ε)`.
    pub fn check_balanced(&self, tol: f64) -> Result<()> {
        let scale = self.a.abs().max(self.b.abs()).max(self.c.abs()).max(f64::EPSILON);
        let limit = tol * scale;
        let sum = self.sum();
        if sum.abs() <= limit {
            Ok(())
        } else {
            Err(Error::Unbalanced { sum, limit })
        }
    }

    /// Zero-sequence component, the third row of `M` applied to the sample.
    pub fn zero_sequence(&self) -> f64 {
        self.sum() / 3.0
    }
}

impl DqSample {
    pub const fn new(d: f64, q: f64) -> Self {
        Self { d, q }
    }

    pub fn norm(&self) -> f64 {
        self.d.hypot(self.q)
    }

    /// Rotates the vector by `angle` radians (counter-clockwise).
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            d: c * self.d - s * self.q,
            q: s * self.d + c * self.q,
        }
    }
}

impl std::ops::Add for DqSample {
    type Output = DqSample;
    fn add(self, rhs: DqSample) -> DqSample {
        DqSample::new(self.d + rhs.d, self.q + rhs.q)
    }
}

impl std::ops::Sub for DqSample {
    type Output = DqSample;
    fn sub(self, rhs: DqSample) -> DqSample {
        DqSample::new(self.d - rhs.d, self.q - rhs.q)
    }
}

impl std::ops::Mul<f64> for DqSample {
    type Output = DqSample;
    fn mul(self, k: f64) -> DqSample {
        DqSample::new(self.d * k, self.q * k)
    }
}

/// First two components of `M · [a b c]ᵀ`.
pub fn abc_to_dq(s: ThreePhaseSample) -> DqSample {
    // cos(±2π/3) = -1/2, sin(∓2π/3) = ∓√3/2
    let d = (2.0 / 3.0) * (s.a - 0.5 * s.b - 0.5 * s.c);
    let q = (2.0 / 3.0) * (SQRT_3 / 2.0) * (s.c - s.b);
    DqSample { d, q }
}

/// Like [`abc_to_dq`] but rejects samples that are not balanced to `tol`.
pub fn abc_to_dq_balanced(s: ThreePhaseSample, tol: f64) -> Result<DqSample> {
    s.check_balanced(tol)?;
    Ok(abc_to_dq(s))
}

/// Balanced three-phase vector whose dq image is `s`.
pub fn dq_to_abc(s: DqSample) -> ThreePhaseSample {
    let half_root3 = SQRT_3 / 2.0;
    ThreePhaseSample {
        a: s.d,
        b: -0.5 * s.d - half_root3 * s.q,
        c: -0.5 * s.d + half_root3 * s.q,
    }
}

/// Reconstructs phase quantities from line-to-line readings `(v_ab, v_bc, v_ca)`
/// assuming a balanced three-wire system: `v_a = (v_ab - v_ca)/3`, cyclically.
pub fn line_to_phase(v_ll: ThreePhaseSample, tol: f64) -> Result<ThreePhaseSample> {
    v_ll.check_balanced(tol)?;
    let ThreePhaseSample { a: ab, b: bc, c: ca } = v_ll;
    Ok(ThreePhaseSample {
        a: (ab - ca) / 3.0,
        b: (bc - ab) / 3.0,
        c: (ca - bc) / 3.0,
    })
}

/// Line-to-line readings `(v_a - v_b, v_b - v_c, v_c - v_a)` of a phase set.
pub fn phase_to_line(v: ThreePhaseSample) -> ThreePhaseSample {
    ThreePhaseSample {
        a: v.a - v.b,
        b: v.b - v.c,
        c: v.c - v.a,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Dense evaluation of the printed matrix, kept independent of the
    /// hand-expanded rows above.
    fn m_times(s: ThreePhaseSample) -> [f64; 3] {
        let m = [
            [1.0, (-2.0 * PI / 3.0).cos(), (2.0 * PI / 3.0).cos()],
            [0.0, (-2.0 * PI / 3.0).sin(), (2.0 * PI / 3.0).sin()],
            [0.5, 0.5, 0.5],
        ];
        let v = [s.a, s.b, s.c];
        let mut out = [0.0; 3];
        for (i, row) in m.iter().enumerate() {
            out[i] = (2.0 / 3.0) * row.iter().zip(v).map(|(r, x)| r * x).sum::<f64>();
        }
        out
    }

    #[test]
    fn unit_phase_a_maps_to_d_axis() {
        let dq = abc_to_dq(ThreePhaseSample::new(1.0, -0.5, -0.5));
        assert_abs_diff_eq!(dq.d, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dq.q, 0.0, epsilon = 1e-15);
        assert_eq!(abc_to_dq(ThreePhaseSample::default()), DqSample::default());
    }

    #[test]
    fn positive_sequence_turns_clockwise() {
        // evaluated through the dense matrix at several angles
        for k in 0..16 {
            let th = k as f64 * PI / 8.0;
            let s = ThreePhaseSample::new(th.cos(), (th - 2.0 * PI / 3.0).cos(), (th + 2.0 * PI / 3.0).cos());
            let dense = m_times(s);
            let dq = abc_to_dq(s);
            assert_abs_diff_eq!(dq.d, dense[0], epsilon = 1e-14);
            assert_abs_diff_eq!(dq.q, dense[1], epsilon = 1e-14);
            assert_abs_diff_eq!(dq.d, th.cos(), epsilon = 1e-14);
            assert_abs_diff_eq!(dq.q, -th.sin(), epsilon = 1e-14);
        }
        let th = PI / 4.0;
        let s = ThreePhaseSample::new(th.cos(), (th - 2.0 * PI / 3.0).cos(), (th + 2.0 * PI / 3.0).cos());
        let dq = abc_to_dq(s);
        assert_abs_diff_eq!(dq.d, (PI / 4.0).cos(), epsilon = 1e-14);
        assert_abs_diff_eq!(dq.q, -(PI / 4.0).sin(), epsilon = 1e-14);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(
            dq_to_abc(DqSample::new(1.0, 0.0)),
            ThreePhaseSample::new(1.0, -0.5, -0.5)
        );
        assert_eq!(dq_to_abc(DqSample::default()), ThreePhaseSample::default());
    }

    #[test]
    fn line_to_phase_examples() {
        let v = line_to_phase(ThreePhaseSample::new(1.0, -0.5, -0.5), DEFAULT_BALANCE_TOL).unwrap();
        assert_abs_diff_eq!(v.a, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v.b, -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v.c, 0.0, epsilon = 1e-15);
        let z = line_to_phase(ThreePhaseSample::default(), DEFAULT_BALANCE_TOL).unwrap();
        assert_eq!(z, ThreePhaseSample::default());
    }

    #[test]
    fn line_to_phase_rejects_miswired_capture() {
        let err = line_to_phase(ThreePhaseSample::new(1.0, 1.0, -0.5), DEFAULT_BALANCE_TOL);
        assert!(matches!(err, Err(Error::Unbalanced { .. })));
    }

    #[test]
    fn line_to_phase_on_380v_grid() {
        // balanced 380 Vrms line-to-line: phase rms 380/√3, lagging the line voltage by 30°
        let vll_peak = 380.0 * 2f64.sqrt();
        let n = 960;
        let mut sum_sq = 0.0;
        let mut cross = 0.0;
        let mut cross_q = 0.0;
        for k in 0..n {
            let th = 2.0 * PI * k as f64 / n as f64;
            let vll = ThreePhaseSample::new(
                vll_peak * th.cos(),
                vll_peak * (th - 2.0 * PI / 3.0).cos(),
                vll_peak * (th + 2.0 * PI / 3.0).cos(),
            );
            let ph = line_to_phase(vll, 1e-9).unwrap();
            assert!(ph.sum().abs() < 1e-9);
            sum_sq += ph.a * ph.a;
            // project v_a onto cos/sin of the line-voltage angle
            cross += ph.a * th.cos();
            cross_q += ph.a * th.sin();
        }
        let rms = (sum_sq / n as f64).sqrt();
        assert_abs_diff_eq!(rms, 380.0 / 3f64.sqrt(), epsilon = 1e-9);
        let lag = cross_q.atan2(cross);
        assert_abs_diff_eq!(lag, PI / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_sequence_is_third_row() {
        let s = ThreePhaseSample::new(0.3, -1.2, 0.4);
        assert_abs_diff_eq!(s.zero_sequence(), m_times(s)[2], epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn round_trip(d in -1e3f64..1e3, q in -1e3f64..1e3) {
            let s = DqSample::new(d, q);
            let back = abc_to_dq(dq_to_abc(s));
            let scale = s.norm().max(1.0);
            prop_assert!((back.d - d).abs() <= 1e-12 * scale);
            prop_assert!((back.q - q).abs() <= 1e-12 * scale);
        }

        #[test]
        fn linear(a in prop::array::uniform3(-10.0f64..10.0), b in prop::array::uniform3(-10.0f64..10.0),
                  alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let x = ThreePhaseSample::new(a[0], a[1], a[2]);
            let y = ThreePhaseSample::new(b[0], b[1], b[2]);
            let mix = ThreePhaseSample::new(
                alpha * x.a + beta * y.a, alpha * x.b + beta * y.b, alpha * x.c + beta * y.c);
            let lhs = abc_to_dq(mix);
            let rhs = abc_to_dq(x) * alpha + abc_to_dq(y) * beta;
            prop_assert!((lhs.d - rhs.d).abs() < 1e-12 * 100.0);
            prop_assert!((lhs.q - rhs.q).abs() < 1e-12 * 100.0);
        }

        #[test]
        fn line_to_phase_preserves_balance(a in -500.0f64..500.0, b in -500.0f64..500.0) {
            let vll = ThreePhaseSample::new(a, b, -a - b);
            if let Ok(ph) = line_to_phase(vll, 1e-9) {
                prop_assert!(ph.sum().abs() <= 1e-12 * 1000.0);
            }
        }

        #[test]
        fn balanced_round_trip_through_abc(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let s = ThreePhaseSample::new(a, b, -a - b);
            let back = dq_to_abc(abc_to_dq(s));
            prop_assert!((back.a - s.a).abs() < 1e-12 * 10.0);
            prop_assert!((back.b - s.b).abs() < 1e-12 * 10.0);
            prop_assert!((back.c - s.c).abs() < 1e-12 * 10.0);
        }
    }
}
