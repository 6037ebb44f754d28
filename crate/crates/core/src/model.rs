//! Continuous-time dq model of a three-phase induction machine.
//!
//! State `x = [ψ_ds, ψ_qs, ψ_dr, ψ_qr, ω_r]` holds fluxes per time unit
//! (`ψ = ω_e λ`, volts) and the rotor speed in electrical rad/s. The dynamics
//! are `ẋ = A(ω_r) x + B u + β(x)` with
//!
//! ```text
//! A = ω_e | R_s(m-X_l)/X_l²   0              R_s m/X_l²       0               0 |
//!         | 0                 R_s(m-X_l)/X_l² 0               R_s m/X_l²       0 |
//!         | R_r m/X_l²        0              R_r(m-X_l)/X_l²  -ω_r/ω_e         0 |
//!         | 0                 R_r m/X_l²     ω_r/ω_e          R_r(m-X_l)/X_l²  0 |
//!         | 0                 0              0                0                0 |
//! ```
//!
//! `B = ω_e` on the two stator-flux rows and `β = [0 0 0 0 N_p/(2J_r)(T_e - T_l)]`.
//!
//! The mutual coefficient `m` is the parallel combination of the magnetizing
//! reactance with both leakage branches, `m = X_m X_l / (X_l + 2 X_m)`.
//! Used with the identified magnetizing reactance `X_m` directly in place of
//! `m`, the flux-to-current map becomes indefinite as soon as `X_m > X_l/2`,
//! and the model diverges at tens of kHz for any realistic motor.
//!
//! Stator currents are `i_s = c_self ψ_s + c_cross ψ_r` and rotor currents
//! the mirrored `i_r = c_self ψ_r + c_cross ψ_s`, with
//! `c_self = (1 - m/X_l)/X_l` and `c_cross = -m/X_l²`.

use nalgebra::{Matrix2x5, Matrix5, Matrix5x2, SMatrix, Vector5};
use serde::{Deserialize, Serialize};

use crate::dq::DqSample;
use crate::error::{Error, Result};

pub const N_PARAMS: usize = 7;
pub const N_STATES: usize = 5;

pub type StateVector = Vector5<f64>;
/// ∂x/∂p, one column per parameter.
pub type StateSensitivity = SMatrix<f64, N_STATES, N_PARAMS>;

pub const PSI_DS: usize = 0;
pub const PSI_QS: usize = 1;
pub const PSI_DR: usize = 2;
pub const PSI_QR: usize = 3;
pub const OMEGA_R: usize = 4;

/// The seven identified parameters, in the fixed order
/// `[R_s, R_r, X_l, X_m, J_r, T_l0, T_l1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorParams {
    /// Stator resistance, Ω.
    pub rs: f64,
    /// Rotor resistance, Ω.
    pub rr: f64,
    /// Stator and rotor leakage reactance at nominal frequency, Ω.
    pub xl: f64,
    /// Magnetizing reactance at nominal frequency, Ω.
    pub xm: f64,
    /// Rotor inertia, kg·m².
    pub jr: f64,
    /// Constant load torque, N·m.
    pub tl0: f64,
    /// Viscous load coefficient, N·m·s.
    pub tl1: f64,
}

impl MotorParams {
    pub const NAMES: [&'static str; N_PARAMS] = ["R_s", "R_r", "X_l", "X_m", "J_r", "T_l0", "T_l1"];

    pub const RS: usize = 0;
    pub const RR: usize = 1;
    pub const XL: usize = 2;
    pub const XM: usize = 3;
    pub const JR: usize = 4;
    pub const TL0: usize = 5;
    pub const TL1: usize = 6;

    pub const fn from_array(p: [f64; N_PARAMS]) -> Self {
        Self {
            rs: p[0],
            rr: p[1],
            xl: p[2],
            xm: p[3],
            jr: p[4],
            tl0: p[5],
            tl1: p[6],
        }
    }

    pub const fn to_array(&self) -> [f64; N_PARAMS] {
        [self.rs, self.rr, self.xl, self.xm, self.jr, self.tl0, self.tl1]
    }

    /// Motor M1 as identified from breaker data at 4.8 kHz.
    pub const fn reference_m1() -> Self {
        Self::from_array([0.48, 0.21, 0.30, 11.29, 0.26, 0.0, 0.037])
    }

    /// Domain check used before every simulation: finite, `X_l > 0`,
    /// `J_r > 0`, everything else non-negative.
    pub fn validate(&self) -> Result<()> {
        let arr = self.to_array();
        if let Some(i) = arr.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("{} is not finite", Self::NAMES[i])));
        }
        if self.xl <= 0.0 {
            return Err(Error::InvalidParams(format!("X_l must be positive, got {}", self.xl)));
        }
        if self.jr <= 0.0 {
            return Err(Error::InvalidParams(format!("J_r must be positive, got {}", self.jr)));
        }
        if let Some(i) = arr.iter().position(|v| *v < 0.0) {
            return Err(Error::InvalidParams(format!(
                "{} must be non-negative, got {}",
                Self::NAMES[i],
                arr[i]
            )));
        }
        Ok(())
    }

    /// Stricter check for "true" motor parameters: resistances and `X_m`
    /// strictly positive as well.
    pub fn validate_physical(&self) -> Result<()> {
        self.validate()?;
        for (name, v) in [("R_s", self.rs), ("R_r", self.rr), ("X_m", self.xm)] {
            if v <= 0.0 {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for MotorParams {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.rs,
            1 => &self.rr,
            2 => &self.xl,
            3 => &self.xm,
            4 => &self.jr,
            5 => &self.tl0,
            6 => &self.tl1,
            _ => panic!("parameter index {i} out of range"),
        }
    }
}

/// Supply and nameplate constants known a priori.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConstants {
    /// Nominal electrical frequency, rad/s.
    pub omega_e: f64,
    /// Pole count.
    pub poles: u32,
}

impl GridConstants {
    pub fn new(omega_e: f64, poles: u32) -> Result<Self> {
        let g = Self { omega_e, poles };
        g.validate()?;
        Ok(g)
    }

    /// 50 Hz, two-pole.
    pub fn european_two_pole() -> Self {
        Self {
            omega_e: 100.0 * std::f64::consts::PI,
            poles: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_e.is_finite() && self.omega_e > 0.0) {
            return Err(Error::Config(format!("omega_e must be positive, got {}", self.omega_e)));
        }
        if self.poles < 2 || !self.poles.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "pole count must be even and >= 2, got {}",
                self.poles
            )));
        }
        Ok(())
    }

    fn np(&self) -> f64 {
        self.poles as f64
    }

    /// `3 N_p / (4 ω_e)`, the torque prefactor.
    fn torque_gain(&self) -> f64 {
        3.0 * self.np() / (4.0 * self.omega_e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotorState {
    pub psi_ds: f64,
    pub psi_qs: f64,
    pub psi_dr: f64,
    pub psi_qr: f64,
    pub omega_r: f64,
}

impl MotorState {
    pub fn to_vector(&self) -> StateVector {
        StateVector::new(self.psi_ds, self.psi_qs, self.psi_dr, self.psi_qr, self.omega_r)
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            psi_ds: x[0],
            psi_qs: x[1],
            psi_dr: x[2],
            psi_qr: x[3],
            omega_r: x[4],
        }
    }
}

/// Coefficients of the flux-to-current map and their partials with respect
/// to `X_l` and `X_m`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CurrentMap {
    pub c_self: f64,
    pub c_cross: f64,
    pub dself_dxl: f64,
    pub dself_dxm: f64,
    pub dcross_dxl: f64,
    pub dcross_dxm: f64,
}

impl CurrentMap {
    pub fn new(p: &MotorParams) -> Self {
        // With D = X_l (X_l + 2 X_m):
        //   c_self = (X_l + X_m)/D, c_cross = -X_m/D
        let (xl, xm) = (p.xl, p.xm);
        let den = xl * (xl + 2.0 * xm);
        let den2 = den * den;
        let sum = xl + xm;
        Self {
            c_self: sum / den,
            c_cross: -xm / den,
            dself_dxl: (den - 2.0 * sum * sum) / den2,
            dself_dxm: -xl * xl / den2,
            dcross_dxl: 2.0 * xm * sum / den2,
            dcross_dxm: -xl * xl / den2,
        }
    }
}

/// Effective mutual coefficient `m = X_m X_l / (X_l + 2 X_m)` entering `A` and `C`.
pub fn mutual_coefficient(p: &MotorParams) -> f64 {
    p.xm * p.xl / (p.xl + 2.0 * p.xm)
}

/// Output matrix `C` of the current map `i_s = C x`.
pub fn output_matrix(p: &MotorParams) -> Matrix2x5<f64> {
    let cm = CurrentMap::new(p);
    Matrix2x5::new(
        cm.c_self, 0.0, cm.c_cross, 0.0, 0.0, //
        0.0, cm.c_self, 0.0, cm.c_cross, 0.0,
    )
}

/// `A(ω_r)`.
pub fn drift_matrix(omega_r: f64, p: &MotorParams, g: &GridConstants) -> Matrix5<f64> {
    let cm = CurrentMap::new(p);
    let we = g.omega_e;
    let s_self = -we * p.rs * cm.c_self;
    let s_cross = -we * p.rs * cm.c_cross;
    let r_self = -we * p.rr * cm.c_self;
    let r_cross = -we * p.rr * cm.c_cross;
    Matrix5::new(
        s_self, 0.0, s_cross, 0.0, 0.0, //
        0.0, s_self, 0.0, s_cross, 0.0, //
        r_cross, 0.0, r_self, -omega_r, 0.0, //
        0.0, r_cross, omega_r, r_self, 0.0, //
        0.0, 0.0, 0.0, 0.0, 0.0,
    )
}

pub fn input_matrix(g: &GridConstants) -> Matrix5x2<f64> {
    let we = g.omega_e;
    Matrix5x2::new(
        we, 0.0, //
        0.0, we, //
        0.0, 0.0, //
        0.0, 0.0, //
        0.0, 0.0,
    )
}

/// `B u`.
pub fn input_term(u: DqSample, g: &GridConstants) -> StateVector {
    StateVector::new(g.omega_e * u.d, g.omega_e * u.q, 0.0, 0.0, 0.0)
}

/// Stator currents `C x`.
pub fn stator_currents(x: &StateVector, p: &MotorParams) -> DqSample {
    let cm = CurrentMap::new(p);
    DqSample::new(
        cm.c_self * x[PSI_DS] + cm.c_cross * x[PSI_DR],
        cm.c_self * x[PSI_QS] + cm.c_cross * x[PSI_QR],
    )
}

/// Rotor currents, the stator map with the flux roles exchanged.
pub fn rotor_currents(x: &StateVector, p: &MotorParams) -> DqSample {
    let cm = CurrentMap::new(p);
    DqSample::new(
        cm.c_self * x[PSI_DR] + cm.c_cross * x[PSI_DS],
        cm.c_self * x[PSI_QR] + cm.c_cross * x[PSI_QS],
    )
}

/// `T_e = 3 N_p / (4 ω_e) (ψ_qr i_dr - ψ_dr i_qr)`.
pub fn electrical_torque(x: &StateVector, p: &MotorParams, g: &GridConstants) -> f64 {
    let ir = rotor_currents(x, p);
    g.torque_gain() * (x[PSI_QR] * ir.d - x[PSI_DR] * ir.q)
}

/// `T_l = T_l0 + T_l1 ω_r`.
pub fn load_torque(omega_r: f64, p: &MotorParams) -> f64 {
    p.tl0 + p.tl1 * omega_r
}

/// `β(x)`: only the speed row is non-zero.
pub fn nonlinear_term(x: &StateVector, p: &MotorParams, g: &GridConstants) -> StateVector {
    let accel = g.np() / (2.0 * p.jr) * (electrical_torque(x, p, g) - load_torque(x[OMEGA_R], p));
    StateVector::new(0.0, 0.0, 0.0, 0.0, accel)
}

/// `ẋ = A(ω_r) x + B u + β(x)`.
pub fn dynamics(x: &StateVector, u: DqSample, p: &MotorParams, g: &GridConstants) -> StateVector {
    drift_matrix(x[OMEGA_R], p, g) * x + input_term(u, g) + nonlinear_term(x, p, g)
}

// --- partial derivatives used by the sensitivity recursions ---

/// `(∂A/∂ω_r) v`: the only ω_r-dependent entries are the rotor cross terms.
pub(crate) fn drift_speed_derivative(v: &StateVector) -> StateVector {
    StateVector::new(0.0, 0.0, -v[PSI_QR], v[PSI_DR], 0.0)
}

/// Columns `(∂A/∂p_j) v`.
pub(crate) fn drift_param_jacobian(v: &StateVector, p: &MotorParams, g: &GridConstants) -> StateSensitivity {
    let cm = CurrentMap::new(p);
    let we = g.omega_e;
    let mut out = StateSensitivity::zeros();
    // stator rows: -ω_e R_s (c_self ψ_s + c_cross ψ_r)
    // rotor rows:  -ω_e R_r (c_self ψ_r + c_cross ψ_s)
    for (sr, rr) in [(PSI_DS, PSI_DR), (PSI_QS, PSI_QR)] {
        let (ps, pr) = (v[sr], v[rr]);
        out[(sr, MotorParams::RS)] = -we * (cm.c_self * ps + cm.c_cross * pr);
        out[(sr, MotorParams::XL)] = -we * p.rs * (cm.dself_dxl * ps + cm.dcross_dxl * pr);
        out[(sr, MotorParams::XM)] = -we * p.rs * (cm.dself_dxm * ps + cm.dcross_dxm * pr);
        out[(rr, MotorParams::RR)] = -we * (cm.c_self * pr + cm.c_cross * ps);
        out[(rr, MotorParams::XL)] = -we * p.rr * (cm.dself_dxl * pr + cm.dcross_dxl * ps);
        out[(rr, MotorParams::XM)] = -we * p.rr * (cm.dself_dxm * pr + cm.dcross_dxm * ps);
    }
    out
}

/// `∂β/∂x`, non-zero only in the speed row.
pub(crate) fn nonlinear_state_jacobian(x: &StateVector, p: &MotorParams, g: &GridConstants) -> Matrix5<f64> {
    // T_e = τ c_cross (ψ_ds ψ_qr - ψ_qs ψ_dr)
    let cm = CurrentMap::new(p);
    let k = g.np() / (2.0 * p.jr);
    let tc = g.torque_gain() * cm.c_cross;
    let mut out = Matrix5::zeros();
    out[(OMEGA_R, PSI_DS)] = k * tc * x[PSI_QR];
    out[(OMEGA_R, PSI_QS)] = -k * tc * x[PSI_DR];
    out[(OMEGA_R, PSI_DR)] = -k * tc * x[PSI_QS];
    out[(OMEGA_R, PSI_QR)] = k * tc * x[PSI_DS];
    out[(OMEGA_R, OMEGA_R)] = -k * p.tl1;
    out
}

/// `∂β/∂p`, non-zero only in the speed row.
pub(crate) fn nonlinear_param_jacobian(x: &StateVector, p: &MotorParams, g: &GridConstants) -> StateSensitivity {
    let cm = CurrentMap::new(p);
    let k = g.np() / (2.0 * p.jr);
    let flux_cross = x[PSI_DS] * x[PSI_QR] - x[PSI_QS] * x[PSI_DR];
    let tau = g.torque_gain();
    let te = tau * cm.c_cross * flux_cross;
    let accel = k * (te - load_torque(x[OMEGA_R], p));
    let mut out = StateSensitivity::zeros();
    out[(OMEGA_R, MotorParams::XL)] = k * tau * cm.dcross_dxl * flux_cross;
    out[(OMEGA_R, MotorParams::XM)] = k * tau * cm.dcross_dxm * flux_cross;
    out[(OMEGA_R, MotorParams::JR)] = -accel / p.jr;
    out[(OMEGA_R, MotorParams::TL0)] = -k;
    out[(OMEGA_R, MotorParams::TL1)] = -k * x[OMEGA_R];
    out
}

/// Full `∂f/∂x` of the continuous dynamics at `x`.
pub(crate) fn dynamics_state_jacobian(x: &StateVector, p: &MotorParams, g: &GridConstants) -> Matrix5<f64> {
    let mut jac = drift_matrix(x[OMEGA_R], p, g) + nonlinear_state_jacobian(x, p, g);
    let dw = drift_speed_derivative(x);
    for i in 0..N_STATES {
        jac[(i, OMEGA_R)] += dw[i];
    }
    jac
}

/// Full `∂f/∂p` of the continuous dynamics at `x` (independent of `u`).
pub(crate) fn dynamics_param_jacobian(x: &StateVector, p: &MotorParams, g: &GridConstants) -> StateSensitivity {
    drift_param_jacobian(x, p, g) + nonlinear_param_jacobian(x, p, g)
}

/// `∂(C v)/∂p` for a fixed state-like vector `v`, two rows.
pub(crate) fn output_param_jacobian(v: &StateVector, p: &MotorParams) -> SMatrix<f64, 2, N_PARAMS> {
    let cm = CurrentMap::new(p);
    let mut out = SMatrix::<f64, 2, N_PARAMS>::zeros();
    for (row, (sr, rr)) in [(PSI_DS, PSI_DR), (PSI_QS, PSI_QR)].into_iter().enumerate() {
        out[(row, MotorParams::XL)] = cm.dself_dxl * v[sr] + cm.dcross_dxl * v[rr];
        out[(row, MotorParams::XM)] = cm.dself_dxm * v[sr] + cm.dcross_dxm * v[rr];
    }
    out
}
