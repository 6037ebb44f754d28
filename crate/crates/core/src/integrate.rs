//! Fixed-step discretizations of the motor model.
//!
//! Both schemes start from standstill, `x(0) = 0`, and step with the data
//! sampling period. A trajectory has one state per input sample.

use nalgebra::{Matrix5, LU, U5};
use serde::{Deserialize, Serialize};

use crate::dq::DqSample;
use crate::error::{Error, Result};
use crate::model::{
    drift_matrix, dynamics, input_term, nonlinear_term, stator_currents, GridConstants, MotorParams, StateVector,
    OMEGA_R,
};

/// Pivot threshold for the preview solve, relative to the largest entry.
const PIVOT_TOL: f64 = 1e3 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Discretization {
    /// Forward Euler.
    Euler,
    /// Trapezoid-like step using `u(k)` and `u(k+1)` with `A` frozen at `ω_r(k)`.
    InputPreview,
}

impl Discretization {
    pub const ALL: [Discretization; 2] = [Discretization::Euler, Discretization::InputPreview];

    pub fn as_str(&self) -> &'static str {
        match self {
            Discretization::Euler => "euler",
            Discretization::InputPreview => "preview",
        }
    }
}

impl std::str::FromStr for Discretization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Discretization::Euler),
            "preview" | "input-preview" | "inputpreview" => Ok(Discretization::InputPreview),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected euler|preview)"
            ))),
        }
    }
}

impl std::fmt::Display for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Simulated states, optionally with the reconstructed derivatives `ẋ(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t_s: f64,
    pub states: Vec<StateVector>,
    pub derivatives: Option<Vec<StateVector>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.states.iter().map(|x| x[OMEGA_R]).collect()
    }
}

fn check_finite(x: &StateVector, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

/// `x(k+1) = (I + t_s A) x + t_s B u + t_s β(x)`.
pub fn euler_step(x: &StateVector, u: DqSample, p: &MotorParams, g: &GridConstants, t_s: f64) -> StateVector {
    x + dynamics(x, u, p, g) * t_s
}

/// Factorization of `I - (t_s/2) A(ω_r)` together with `I + (t_s/2) A(ω_r)`.
pub(crate) struct PreviewOperator {
    pub lu: LU<f64, U5, U5>,
    pub plus: Matrix5<f64>,
}

impl PreviewOperator {
    pub fn new(omega_r: f64, p: &MotorParams, g: &GridConstants, t_s: f64, step: usize) -> Result<Self> {
        let half = drift_matrix(omega_r, p, g) * (0.5 * t_s);
        let minus = Matrix5::identity() - half;
        let plus = Matrix5::identity() + half;
        let scale = minus.amax();
        let lu = minus.lu();
        let pivot = lu.u().diagonal().amin();
        if !(pivot > PIVOT_TOL * scale) {
            return Err(Error::SingularPreview {
                step,
                pivot,
                rs: p.rs,
                rr: p.rr,
                xl: p.xl,
                xm: p.xm,
            });
        }
        Ok(Self { lu, plus })
    }
}

pub(crate) fn preview_step_at(
    x: &StateVector,
    u_k: DqSample,
    u_next: DqSample,
    p: &MotorParams,
    g: &GridConstants,
    t_s: f64,
    step: usize,
) -> Result<(StateVector, PreviewOperator)> {
    let op = PreviewOperator::new(x[OMEGA_R], p, g, t_s, step)?;
    let rhs = op.plus * x + input_term((u_k + u_next) * 0.5, g) * t_s + nonlinear_term(x, p, g) * t_s;
    let next = op.lu.solve(&rhs).ok_or(Error::SingularPreview {
        step,
        pivot: 0.0,
        rs: p.rs,
        rr: p.rr,
        xl: p.xl,
        xm: p.xm,
    })?;
    Ok((next, op))
}

/// `x(k+1) = (I - t_s/2 A)⁻¹ [(I + t_s/2 A) x + t_s/2 B (u(k+1) + u(k)) + t_s β(x)]`.
pub fn preview_step(
    x: &StateVector,
    u_k: DqSample,
    u_next: DqSample,
    p: &MotorParams,
    g: &GridConstants,
    t_s: f64,
) -> Result<StateVector> {
    preview_step_at(x, u_k, u_next, p, g, t_s, 0).map(|(x, _)| x)
}

/// Iterates the chosen step from standstill over the whole input sequence.
/// The result has `inputs.len()` states; the last input is only consumed as
/// the preview sample of the final step.
pub fn simulate(
    inputs: &[DqSample],
    method: Discretization,
    t_s: f64,
    p: &MotorParams,
    g: &GridConstants,
    record_derivatives: bool,
) -> Result<Trajectory> {
    p.validate()?;
    if inputs.is_empty() {
        return Err(Error::Dataset("empty input sequence".into()));
    }
    if !(t_s > 0.0) {
        return Err(Error::Config(format!("sampling period must be positive, got {t_s}")));
    }
    let n = inputs.len();
    let mut states = Vec::with_capacity(n);
    let mut x = StateVector::zeros();
    states.push(x);
    for k in 0..n - 1 {
        x = match method {
            Discretization::Euler => euler_step(&x, inputs[k], p, g, t_s),
            Discretization::InputPreview => preview_step_at(&x, inputs[k], inputs[k + 1], p, g, t_s, k)?.0,
        };
        check_finite(&x, k + 1)?;
        states.push(x);
    }
    let derivatives =
        record_derivatives.then(|| states.iter().zip(inputs).map(|(x, u)| dynamics(x, *u, p, g)).collect());
    Ok(Trajectory {
        t_s,
        states,
        derivatives,
    })
}

/// `ŷ(k) = C x̂(k)`.
pub fn output_currents(traj: &Trajectory, p: &MotorParams) -> Vec<DqSample> {
    traj.states.iter().map(|x| stator_currents(x, p)).collect()
}

/// `ŷ(k) = C ẋ̂(k)` with `ẋ̂(k) = A(ω̂_r(k)) x̂(k) + B u(k) + β(x̂(k))`.
pub fn output_current_derivatives(
    traj: &Trajectory,
    inputs: &[DqSample],
    p: &MotorParams,
    g: &GridConstants,
) -> Vec<DqSample> {
    match &traj.derivatives {
        Some(d) => d.iter().map(|xd| stator_currents(xd, p)).collect(),
        None => traj
            .states
            .iter()
            .zip(inputs)
            .map(|(x, u)| stator_currents(&dynamics(x, *u, p, g), p))
            .collect(),
    }
}

/// Classical RK4 at `t_s / substeps`, inputs interpolated between samples by
/// a four-point cubic (linear for records shorter than four samples).
/// Test oracle and ground truth for the synthetic generator.
pub fn reference_solve(
    inputs: &[DqSample],
    t_s: f64,
    p: &MotorParams,
    g: &GridConstants,
    substeps: usize,
) -> Result<Trajectory> {
    p.validate()?;
    if substeps == 0 {
        return Err(Error::Config("substeps must be at least 1".into()));
    }
    if inputs.is_empty() {
        return Err(Error::Dataset("empty input sequence".into()));
    }
    let n = inputs.len();
    let h = t_s / substeps as f64;
    let mut states = Vec::with_capacity(n);
    let mut x = StateVector::zeros();
    states.push(x);
    for k in 0..n - 1 {
        let lerp = |s: f64| interpolate_input(inputs, k, s);
        for j in 0..substeps {
            let s0 = j as f64 / substeps as f64;
            let sm = (j as f64 + 0.5) / substeps as f64;
            let s1 = (j as f64 + 1.0) / substeps as f64;
            let k1 = dynamics(&x, lerp(s0), p, g);
            let k2 = dynamics(&(x + k1 * (0.5 * h)), lerp(sm), p, g);
            let k3 = dynamics(&(x + k2 * (0.5 * h)), lerp(sm), p, g);
            let k4 = dynamics(&(x + k3 * h), lerp(s1), p, g);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        check_finite(&x, k + 1)?;
        states.push(x);
    }
    let derivatives = states.iter().zip(inputs).map(|(x, u)| dynamics(x, *u, p, g)).collect();
    Ok(Trajectory {
        t_s,
        states,
        derivatives: Some(derivatives),
    })
}

/// Input at `k + s` for `s` in `[0, 1]`, from the Lagrange cubic through the
/// four samples around the interval (shifted inward at the record ends).
fn interpolate_input(inputs: &[DqSample], k: usize, s: f64) -> DqSample {
    let n = inputs.len();
    if n < 4 {
        return inputs[k] * (1.0 - s) + inputs[(k + 1).min(n - 1)] * s;
    }
    let first = k.saturating_sub(1).min(n - 4);
    let t = (k - first) as f64 + s;
    let mut out = DqSample::default();
    for i in 0..4 {
        let mut w = 1.0;
        for j in 0..4 {
            if j != i {
                w *= (t - j as f64) / (i as f64 - j as f64);
            }
        }
        out = out + inputs[first + i] * w;
    }
    out
}
