//! Residuals of a model run against a dataset and their exact parameter
//! Jacobian, propagated alongside the state by forward sensitivity
//! recursions that differentiate the discrete step itself.
//!
//! Residuals are `F = ỹ - ŷ(p)`, stacked as `[d(0), q(0), d(1), q(1), ...]`.

use nalgebra::{DMatrix, DVector, SMatrix};

use crate::dataset::{OutputKind, StartupDataset};
use crate::dq::DqSample;
use crate::error::{Error, Result};
use crate::integrate::{preview_step_at, Discretization};
use crate::model::{
    drift_param_jacobian, drift_speed_derivative, dynamics, dynamics_param_jacobian, dynamics_state_jacobian,
    nonlinear_param_jacobian, nonlinear_state_jacobian, output_matrix, output_param_jacobian, stator_currents,
    MotorParams, StateSensitivity, StateVector, N_PARAMS, OMEGA_R,
};

/// Which parameters are estimated; fixed ones keep their current value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask {
    free: [bool; N_PARAMS],
}

impl Default for ParamMask {
    fn default() -> Self {
        Self::all()
    }
}

impl ParamMask {
    pub fn all() -> Self {
        Self { free: [true; N_PARAMS] }
    }

    pub fn fixing(indices: &[usize]) -> Self {
        let mut free = [true; N_PARAMS];
        for &i in indices {
            free[i] = false;
        }
        Self { free }
    }

    pub fn is_free(&self, i: usize) -> bool {
        self.free[i]
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..N_PARAMS).filter(|&i| self.free[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }
}

/// Residual vector, optionally with its Jacobian (one column per free parameter).
#[derive(Debug, Clone)]
pub struct ResidualBundle {
    pub residuals: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
}

impl ResidualBundle {
    /// `J(p) = Fᵀ F`.
    pub fn cost(&self) -> f64 {
        self.residuals.norm_squared()
    }
}

/// Walks the discrete model over the dataset, handing each sample's
/// predicted output (and its parameter sensitivity, when requested) to `visit`.
fn propagate(
    ds: &StartupDataset,
    p: &MotorParams,
    method: Discretization,
    with_sens: bool,
    mut visit: impl FnMut(usize, DqSample, Option<&SMatrix<f64, 2, N_PARAMS>>),
) -> Result<()> {
    p.validate()?;
    ds.validate()?;
    let g = &ds.grid;
    let h = ds.t_s;
    let n = ds.len();
    let c = output_matrix(p);
    let mut x = StateVector::zeros();
    let mut s = StateSensitivity::zeros();
    for k in 0..n {
        let u = ds.voltage[k];
        // Euler needs ẋ(k) for the step; the derivative output needs it too.
        let need_rate = method == Discretization::Euler || ds.output_kind == OutputKind::CurrentDerivative;
        let xd = if need_rate {
            dynamics(&x, u, p, g)
        } else {
            StateVector::zeros()
        };
        let sd = if with_sens && need_rate {
            dynamics_state_jacobian(&x, p, g) * s + dynamics_param_jacobian(&x, p, g)
        } else {
            StateSensitivity::zeros()
        };

        let (y, dy) = match ds.output_kind {
            OutputKind::Current => (
                stator_currents(&x, p),
                with_sens.then(|| c * s + output_param_jacobian(&x, p)),
            ),
            OutputKind::CurrentDerivative => (
                stator_currents(&xd, p),
                with_sens.then(|| c * sd + output_param_jacobian(&xd, p)),
            ),
        };
        visit(k, y, dy.as_ref());

        if k + 1 == n {
            break;
        }
        match method {
            Discretization::Euler => {
                x += xd * h;
                if with_sens {
                    s += sd * h;
                }
            }
            Discretization::InputPreview => {
                let (next, op) = preview_step_at(&x, u, ds.voltage[k + 1], p, g, h, k)?;
                if with_sens {
                    let w = x + next;
                    let dw = drift_speed_derivative(&w);
                    let rhs = op.plus * s
                        + (drift_param_jacobian(&w, p, g) + dw * s.row(OMEGA_R)) * (0.5 * h)
                        + (nonlinear_state_jacobian(&x, p, g) * s + nonlinear_param_jacobian(&x, p, g)) * h;
                    s = op.lu.solve(&rhs).ok_or(Error::NonFinite { step: k + 1 })?;
                }
                x = next;
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: k + 1 });
        }
    }
    Ok(())
}

/// Model outputs `ŷ(k)` for every sample of the dataset.
pub fn predict(ds: &StartupDataset, p: &MotorParams, method: Discretization) -> Result<Vec<DqSample>> {
    let mut out = Vec::with_capacity(ds.len());
    propagate(ds, p, method, false, |_, y, _| out.push(y))?;
    Ok(out)
}

/// `F = ỹ - ŷ(p)` of length `2N`.
pub fn residuals(ds: &StartupDataset, p: &MotorParams, method: Discretization) -> Result<DVector<f64>> {
    let mut f = DVector::zeros(2 * ds.len());
    propagate(ds, p, method, false, |k, y, _| {
        f[2 * k] = ds.output[k].d - y.d;
        f[2 * k + 1] = ds.output[k].q - y.q;
    })?;
    Ok(f)
}

/// Residuals and the full `2N x 7` Jacobian `∂F/∂p`.
pub fn residual_jacobian(ds: &StartupDataset, p: &MotorParams, method: Discretization) -> Result<ResidualBundle> {
    residual_jacobian_masked(ds, p, method, &ParamMask::all())
}

/// Residuals and the Jacobian restricted to the free parameters of `mask`.
pub fn residual_jacobian_masked(
    ds: &StartupDataset,
    p: &MotorParams,
    method: Discretization,
    mask: &ParamMask,
) -> Result<ResidualBundle> {
    let cols = mask.free_indices();
    let mut f = DVector::zeros(2 * ds.len());
    let mut jac = DMatrix::zeros(2 * ds.len(), cols.len());
    propagate(ds, p, method, true, |k, y, dy| {
        f[2 * k] = ds.output[k].d - y.d;
        f[2 * k + 1] = ds.output[k].q - y.q;
        let dy = dy.expect("sensitivities requested");
        for (c, &j) in cols.iter().enumerate() {
            jac[(2 * k, c)] = -dy[(0, j)];
            jac[(2 * k + 1, c)] = -dy[(1, j)];
        }
    })?;
    Ok(ResidualBundle {
        residuals: f,
        jacobian: Some(jac),
    })
}

/// Gradient `2 JFᵀ F` and Gauss-Newton Hessian `JFᵀ JF` of `Fᵀ F`.
/// The true curvature of the cost in the Gauss-Newton model is `2 JFᵀ JF`.
pub fn gradient_and_hessian(residuals: &DVector<f64>, jacobian: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let g = jacobian.tr_mul(residuals) * 2.0;
    let h = jacobian.tr_mul(jacobian);
    (g, h)
}

/// Central finite-difference Jacobian with relative steps, for checks.
pub fn finite_difference_jacobian(
    ds: &StartupDataset,
    p: &MotorParams,
    method: Discretization,
    rel_step: f64,
) -> Result<DMatrix<f64>> {
    let base = p.to_array();
    let mut jac = DMatrix::zeros(2 * ds.len(), N_PARAMS);
    for j in 0..N_PARAMS {
        let step = rel_step * base[j].abs().max(1e-2);
        let mut hi = base;
        let mut lo = base;
        hi[j] += step;
        lo[j] -= step;
        if lo[j] < 0.0 {
            lo[j] = base[j];
        }
        let f_hi = residuals(ds, &MotorParams::from_array(hi), method)?;
        let f_lo = residuals(ds, &MotorParams::from_array(lo), method)?;
        jac.set_column(j, &((f_hi - f_lo) / (hi[j] - lo[j])));
    }
    Ok(jac)
}
