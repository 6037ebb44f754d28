//! Box-constrained Gauss-Newton sequential quadratic programming with
//! Levenberg damping and Armijo backtracking.
//!
//! Iterates are held in coordinates scaled by the width of the box, so the
//! tolerances and damping are comparable across parameters whose natural
//! ranges differ by three orders of magnitude.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MotorParams, N_PARAMS};
use crate::qp::qp_subproblem;

/// A nonlinear least-squares problem `min Fᵀ F`.
pub trait LeastSquaresProblem {
    fn residuals(&self, p: &[f64]) -> Result<DVector<f64>>;
    fn residuals_and_jacobian(&self, p: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxConstraints {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Admissible parameter set upper bounds.
pub const DEFAULT_UPPER: [f64; N_PARAMS] = [100.0, 100.0, 100.0, 500.0, 20.0, 100.0, 0.35];

/// Relative interior margin kept on parameters that divide the model.
pub const INTERIOR_EPS: f64 = 1e-9;

impl Default for BoxConstraints {
    fn default() -> Self {
        Self::new(vec![0.0; N_PARAMS], DEFAULT_UPPER.to_vec()).expect("default box is valid")
    }
}

impl BoxConstraints {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::Config("bounds must be non-empty vectors of equal length".into()));
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) {
                return Err(Error::Config(format!("bound {i} is not finite")));
            }
            if *l < 0.0 {
                return Err(Error::Config(format!("lower bound {i} is negative ({l})")));
            }
            if l > u {
                return Err(Error::Config(format!(
                    "lower bound {i} exceeds upper bound ({l} > {u})"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .enumerate()
                .all(|(i, v)| self.lower[i] <= *v && *v <= self.upper[i])
    }

    pub fn project(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .enumerate()
            .map(|(i, v)| v.clamp(self.lower[i], self.upper[i]))
            .collect()
    }

    /// Restriction to a subset of coordinates.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            lower: indices.iter().map(|&i| self.lower[i]).collect(),
            upper: indices.iter().map(|&i| self.upper[i]).collect(),
        }
    }

    /// The motor box with the interior margin applied to `X_l` and `J_r`.
    pub fn with_motor_interior(&self) -> Self {
        let mut b = self.clone();
        if b.dim() == N_PARAMS {
            for i in [MotorParams::XL, MotorParams::JR] {
                let range = b.upper[i] - b.lower[i];
                b.lower[i] = b.lower[i].max(b.lower[i] + INTERIOR_EPS * range);
            }
        }
        b
    }

    fn scale(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| if u > l { u - l } else { 1.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Projected-gradient tolerance in scaled coordinates, relative to `1 + J`.
    pub grad_tol: f64,
    /// Tolerance on the largest cosine between `F` and a free column of `JF`.
    pub grad_cos_tol: f64,
    /// Step tolerance in scaled coordinates (max norm).
    pub step_tol: f64,
    /// Relative cost decrease below which the iteration is considered stalled.
    pub cost_rel_tol: f64,
    pub levenberg_floor: f64,
    pub levenberg_init: f64,
    pub shrink: f64,
    pub armijo: f64,
    pub min_alpha: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-8,
            grad_cos_tol: 1e-8,
            step_tol: 1e-10,
            cost_rel_tol: 1e-12,
            levenberg_floor: 1e-10,
            levenberg_init: 1e-2,
            shrink: 0.5,
            armijo: 1e-4,
            min_alpha: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grad_tol", self.grad_tol),
            ("grad_cos_tol", self.grad_cos_tol),
            ("step_tol", self.step_tol),
            ("cost_rel_tol", self.cost_rel_tol),
            ("levenberg_floor", self.levenberg_floor),
            ("levenberg_init", self.levenberg_init),
            ("armijo", self.armijo),
            ("min_alpha", self.min_alpha),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config(format!("shrink must be in (0, 1), got {}", self.shrink)));
        }
        if self.armijo >= 1.0 {
            return Err(Error::Config("armijo constant must be below 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Gradient,
    Step,
    CostStall,
    MaxIter,
    Failure,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Gradient => "gradient",
            Termination::Step => "step",
            Termination::CostStall => "cost-stall",
            Termination::MaxIter => "max-iter",
            Termination::Failure => "failure",
        }
    }

    /// Converged to a stationary point (rather than stopped by a limit or error).
    pub fn is_converged(&self) -> bool {
        matches!(self, Termination::Gradient | Termination::Step | Termination::CostStall)
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub p_hat: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Max-norm of the projected gradient in scaled coordinates at `p_hat`.
    pub projected_gradient: f64,
    /// Largest `|JF_iᵀ F| / (|JF_i| |F|)` over components not blocked by a bound.
    pub gradient_cosine: f64,
    /// Accepted cost per iteration, starting with the initial point.
    pub cost_trace: Vec<f64>,
    /// Accepted step lengths.
    pub alphas: Vec<f64>,
    /// Accepted iterates, starting with the (projected) initial point.
    pub iterates: Vec<Vec<f64>>,
    /// Indices of coordinates resting on a bound at `p_hat`.
    pub active_bounds: Vec<usize>,
    pub projected_start: bool,
    pub message: Option<String>,
}

impl SolveReport {
    pub fn params(&self) -> Option<MotorParams> {
        <[f64; N_PARAMS]>::try_from(self.p_hat.as_slice())
            .ok()
            .map(MotorParams::from_array)
    }
}

/// Max-norm of the projected gradient: components pushing out of the box
/// at an active bound are dropped.
pub fn projected_gradient_norm(grad: &[f64], p: &[f64], bounds: &BoxConstraints) -> f64 {
    let scale = bounds.scale();
    grad.iter()
        .enumerate()
        .map(|(i, g)| {
            let gs = g * scale[i];
            if blocked(gs, i, p, bounds) {
                0.0
            } else {
                gs.abs()
            }
        })
        .fold(0.0, f64::max)
}

fn blocked(g: f64, i: usize, p: &[f64], bounds: &BoxConstraints) -> bool {
    (p[i] <= bounds.lower[i] && g > 0.0) || (p[i] >= bounds.upper[i] && g < 0.0)
}

/// Scale-free stationarity measure: the largest cosine between the residual
/// and a Jacobian column, ignoring components pushing against an active bound.
pub fn projected_gradient_cosine(f: &DVector<f64>, jac: &DMatrix<f64>, p: &[f64], bounds: &BoxConstraints) -> f64 {
    let fnorm = f.norm();
    if fnorm == 0.0 {
        return 0.0;
    }
    (0..jac.ncols())
        .map(|i| {
            let col = jac.column(i);
            let g = col.dot(f);
            let cn = col.norm();
            if blocked(g, i, p, bounds) || cn == 0.0 {
                0.0
            } else {
                g.abs() / (cn * fnorm)
            }
        })
        .fold(0.0, f64::max)
}

/// Gradient `2 JFᵀ F` of `Fᵀ F`.
fn gradient(f: &DVector<f64>, jac: &DMatrix<f64>) -> DVector<f64> {
    jac.tr_mul(f) * 2.0
}

fn active_set(p: &[f64], bounds: &BoxConstraints) -> Vec<usize> {
    (0..p.len())
        .filter(|&i| p[i] <= bounds.lower[i] || p[i] >= bounds.upper[i])
        .collect()
}

/// Outcome of a backtracking search.
#[derive(Debug, Clone, PartialEq)]
pub enum LineSearch {
    Accepted { alpha: f64, cost: f64, backtracked: bool },
    Underflow,
}

/// Backtracking with Armijo sufficient decrease on `Fᵀ F` along a feasible
/// descent direction `s`. Failed evaluations count as rejected trials.
pub fn line_search<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    p: &[f64],
    s: &[f64],
    cost: f64,
    slope: f64,
    bounds: &BoxConstraints,
    cfg: &SolverConfig,
) -> LineSearch {
    let mut alpha = 1.0;
    let mut backtracked = false;
    while alpha >= cfg.min_alpha {
        let trial: Vec<f64> = p.iter().zip(s).map(|(a, b)| a + alpha * b).collect();
        let trial = bounds.project(&trial);
        if let Ok(f) = problem.residuals(&trial) {
            let c = f.norm_squared();
            if c.is_finite() && c <= cost + cfg.armijo * alpha * slope {
                return LineSearch::Accepted {
                    alpha,
                    cost: c,
                    backtracked,
                };
            }
        }
        alpha *= cfg.shrink;
        backtracked = true;
    }
    LineSearch::Underflow
}

/// Minimizes `Fᵀ F` over the box from `p0`.
pub fn solve<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    p0: &[f64],
    bounds: &BoxConstraints,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    bounds.validate()?;
    cfg.validate()?;
    if p0.len() != bounds.dim() {
        return Err(Error::Config(format!(
            "start has {} components, bounds have {}",
            p0.len(),
            bounds.dim()
        )));
    }
    let projected_start = !bounds.contains(p0);
    let mut p = bounds.project(p0);
    let scale = DVector::from_vec(bounds.scale());
    let n = p.len();

    let failure = |p: Vec<f64>, msg: String, trace: Vec<f64>, alphas: Vec<f64>, iterates: Vec<Vec<f64>>| SolveReport {
        active_bounds: active_set(&p, bounds),
        cost: trace.last().copied().unwrap_or(f64::NAN),
        p_hat: p,
        iterations: alphas.len(),
        termination: Termination::Failure,
        projected_gradient: f64::NAN,
        gradient_cosine: f64::NAN,
        cost_trace: trace,
        alphas,
        iterates,
        projected_start,
        message: Some(msg),
    };

    let (mut f, mut jac) = match problem.residuals_and_jacobian(&p) {
        Ok(v) => v,
        Err(e) => return Ok(failure(p.clone(), e.to_string(), vec![], vec![], vec![p])),
    };
    let mut cost = f.norm_squared();
    let mut trace = vec![cost];
    let mut alphas = Vec::new();
    let mut iterates = vec![p.clone()];
    let mut mu = cfg.levenberg_init.max(cfg.levenberg_floor);
    let mut iterations = 0;

    let termination = loop {
        let g = gradient(&f, &jac);
        let pg = projected_gradient_norm(g.as_slice(), &p, bounds);
        if pg <= cfg.grad_tol * (1.0 + cost) || projected_gradient_cosine(&f, &jac, &p, bounds) <= cfg.grad_cos_tol {
            break Termination::Gradient;
        }
        if iterations >= cfg.max_iter {
            break Termination::MaxIter;
        }

        // scaled quantities: z = p / scale
        let gs = g.component_mul(&scale);
        let js = &jac * DMatrix::from_diagonal(&scale);
        let hs = js.tr_mul(&js) * 2.0;
        let z = DVector::from_fn(n, |i, _| p[i] / scale[i]);
        let zl = DVector::from_fn(n, |i, _| bounds.lower[i] / scale[i]);
        let zu = DVector::from_fn(n, |i, _| bounds.upper[i] / scale[i]);
        let curvature = hs.diagonal().amax().max(f64::MIN_POSITIVE);

        let mut retried = false;
        let accepted = loop {
            let ds = qp_subproblem(&gs, &hs, &z, &zl, &zu, mu * curvature);
            let step: Vec<f64> = (0..n).map(|i| ds[i] * scale[i]).collect();
            let slope = gs.dot(&ds);
            if !(slope < 0.0) {
                break None;
            }
            match line_search(problem, &p, &step, cost, slope, bounds, cfg) {
                LineSearch::Accepted {
                    alpha,
                    cost: c,
                    backtracked,
                } => {
                    mu = if backtracked {
                        mu * 10.0
                    } else {
                        (mu / 10.0).max(cfg.levenberg_floor)
                    };
                    break Some((alpha, c, ds * alpha));
                }
                LineSearch::Underflow if !retried => {
                    retried = true;
                    mu *= 10.0;
                }
                LineSearch::Underflow => break None,
            }
        };
        let Some((alpha, new_cost, dz)) = accepted else {
            break Termination::CostStall;
        };

        let next: Vec<f64> = bounds.project(&(0..n).map(|i| p[i] + dz[i] * scale[i]).collect::<Vec<_>>());
        match problem.residuals_and_jacobian(&next) {
            Ok((f_new, j_new)) => {
                f = f_new;
                jac = j_new;
            }
            Err(e) => {
                return Ok(failure(p, e.to_string(), trace, alphas, iterates));
            }
        }
        let step_size = dz.amax();
        let decrease = cost - new_cost;
        p = next;
        cost = f.norm_squared();
        debug_assert_eq!(cost, new_cost);
        trace.push(cost);
        alphas.push(alpha);
        iterates.push(p.clone());
        iterations += 1;

        if step_size <= cfg.step_tol {
            break Termination::Step;
        }
        if decrease <= cfg.cost_rel_tol * cost {
            break Termination::CostStall;
        }
    };

    let g = gradient(&f, &jac);
    Ok(SolveReport {
        projected_gradient: projected_gradient_norm(g.as_slice(), &p, bounds),
        gradient_cosine: projected_gradient_cosine(&f, &jac, &p, bounds),
        active_bounds: active_set(&p, bounds),
        p_hat: p,
        cost,
        iterations,
        termination,
        cost_trace: trace,
        alphas,
        iterates,
        projected_start,
        message: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `F(p) = A p - b`.
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl LeastSquaresProblem for Linear {
        fn residuals(&self, p: &[f64]) -> Result<DVector<f64>> {
            Ok(&self.a * DVector::from_column_slice(p) - &self.b)
        }
        fn residuals_and_jacobian(&self, p: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
            Ok((self.residuals(p)?, self.a.clone()))
        }
    }

    fn linear_problem() -> (Linear, DVector<f64>) {
        let a = DMatrix::from_row_slice(4, 3, &[2.0, 0.5, 0.0, 0.1, 3.0, -0.4, 1.0, 0.0, 1.5, 0.3, 0.2, 0.1]);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let b = &a * &x;
        (Linear { a, b }, x)
    }

    #[test]
    fn linear_residuals_solve_in_one_iteration() {
        let (prob, x) = linear_problem();
        let bounds = BoxConstraints::new(vec![0.0; 3], vec![10.0; 3]).unwrap();
        let cfg = SolverConfig {
            levenberg_init: 1e-14,
            levenberg_floor: 1e-14,
            ..Default::default()
        };
        let r = solve(&prob, &[5.0, 5.0, 5.0], &bounds, &cfg).unwrap();
        assert_eq!(r.iterations, 1, "{r:?}");
        for i in 0..3 {
            assert!((r.p_hat[i] - x[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn constrained_minimizer_lands_on_bound() {
        let (prob, _) = linear_problem();
        let bounds = BoxConstraints::new(vec![0.0, 0.0, 0.0], vec![10.0, 1.5, 10.0]).unwrap();
        let r = solve(&prob, &[0.5, 0.5, 0.5], &bounds, &SolverConfig::default()).unwrap();
        assert!(r.termination.is_converged(), "{r:?}");
        assert_eq!(r.p_hat[1], 1.5);
        assert!(r.active_bounds.contains(&1));
        assert!(r.projected_gradient <= 1e-6 * (1.0 + r.cost));
        for w in r.cost_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn infeasible_start_is_projected() {
        let (prob, _) = linear_problem();
        let bounds = BoxConstraints::new(vec![0.0; 3], vec![10.0; 3]).unwrap();
        let r = solve(&prob, &[-1.0, 20.0, 3.0], &bounds, &SolverConfig::default()).unwrap();
        assert!(r.projected_start);
        assert!(bounds.contains(&r.p_hat));
    }

    struct BlowUp;
    impl LeastSquaresProblem for BlowUp {
        fn residuals(&self, p: &[f64]) -> Result<DVector<f64>> {
            if p[0] > 0.7 {
                Err(Error::NonFinite { step: 1 })
            } else {
                Ok(DVector::from_vec(vec![p[0] - 1.0]))
            }
        }
        fn residuals_and_jacobian(&self, p: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
            Ok((self.residuals(p)?, DMatrix::from_element(1, 1, 1.0)))
        }
    }

    #[test]
    fn line_search_shrinks_past_failed_evaluation() {
        let bounds = BoxConstraints::new(vec![0.0], vec![2.0]).unwrap();
        let cost = 1.0;
        // s = 1 from p = 0: full step fails, half step is finite and decreasing
        match line_search(&BlowUp, &[0.0], &[1.0], cost, -2.0, &bounds, &SolverConfig::default()) {
            LineSearch::Accepted { alpha, .. } => assert!(alpha <= 0.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quadratic_accepts_unit_step() {
        let (prob, x) = linear_problem();
        let bounds = BoxConstraints::new(vec![0.0; 3], vec![10.0; 3]).unwrap();
        let p = [4.0, 4.0, 4.0];
        let s: Vec<f64> = (0..3).map(|i| x[i] - p[i]).collect();
        let f = prob.residuals(&p).unwrap();
        let g = gradient(&f, &prob.a);
        let slope = g.dot(&DVector::from_vec(s.clone()));
        match line_search(
            &prob,
            &p,
            &s,
            f.norm_squared(),
            slope,
            &bounds,
            &SolverConfig::default(),
        ) {
            LineSearch::Accepted { alpha, .. } => assert_eq!(alpha, 1.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_and_bounds_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig {
            max_iter: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            shrink: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BoxConstraints::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoxConstraints::new(vec![-1.0], vec![0.0]).is_err());
        let b = BoxConstraints::default().with_motor_interior();
        assert!(b.lower[MotorParams::XL] > 0.0 && b.lower[MotorParams::JR] > 0.0);
        assert_eq!(b.lower[MotorParams::RS], 0.0);
    }
}
