//! Box-constrained convex quadratic subproblem
//! `min ½ sᵀ (H + δ I) s + gᵀ s` subject to `lower ≤ p + s ≤ upper`,
//! solved by a primal active-set method.

use nalgebra::{DMatrix, DVector};

const MAX_SWEEPS_PER_DIM: usize = 8;

/// Minimizes `½ sᵀ q s + gᵀ s` over `lo ≤ s ≤ hi` for symmetric positive definite `q`.
/// `lo ≤ 0 ≤ hi` is required so that `s = 0` is a feasible start.
pub fn box_qp(q: &DMatrix<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    let n = g.len();
    debug_assert!((0..n).all(|i| lo[i] <= 0.0 && 0.0 <= hi[i]));
    let mut s = DVector::zeros(n);
    // None: free; Some(false): at lower; Some(true): at upper
    let mut active: Vec<Option<bool>> = (0..n)
        .map(|i| if lo[i] == hi[i] { Some(false) } else { None })
        .collect();
    for i in 0..n {
        if let Some(false) = active[i] {
            s[i] = lo[i];
        }
    }

    for _ in 0..MAX_SWEEPS_PER_DIM * n.max(1) {
        let free: Vec<usize> = (0..n).filter(|&i| active[i].is_none()).collect();
        let target = subspace_minimizer(q, g, &s, &free);
        let dir = &target - &s;
        if dir.amax() <= 1e-15 * (1.0 + s.amax()) {
            // stationary on the working set: check multiplier signs
            let grad = q * &s + g;
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                let viol = match active[i] {
                    Some(_) if lo[i] == hi[i] => 0.0,
                    Some(false) => -grad[i],
                    Some(true) => grad[i],
                    None => 0.0,
                };
                if viol > 0.0 && worst.is_none_or(|(_, w)| viol > w) {
                    worst = Some((i, viol));
                }
            }
            match worst {
                Some((i, _)) => active[i] = None,
                None => return s,
            }
            continue;
        }
        // longest feasible fraction of the step
        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &free {
            let (d, si) = (dir[i], s[i]);
            let limit = if d < 0.0 {
                (lo[i] - si) / d
            } else if d > 0.0 {
                (hi[i] - si) / d
            } else {
                f64::INFINITY
            };
            if limit < alpha {
                alpha = limit;
                blocking = Some((i, d > 0.0));
            }
        }
        s += dir * alpha.max(0.0);
        if let Some((i, upper)) = blocking {
            s[i] = if upper { hi[i] } else { lo[i] };
            active[i] = Some(upper);
        }
    }
    // not reached for positive definite q; fall back to the clamped iterate
    s
}

/// Minimizer of the quadratic over the free coordinates with the others held at `s`.
fn subspace_minimizer(q: &DMatrix<f64>, g: &DVector<f64>, s: &DVector<f64>, free: &[usize]) -> DVector<f64> {
    let mut out = s.clone();
    if free.is_empty() {
        return out;
    }
    let m = free.len();
    let mut qff = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            qff[(a, b)] = q[(i, j)];
        }
        let mut r = -g[i];
        for j in 0..s.len() {
            if !free.contains(&j) {
                r -= q[(i, j)] * s[j];
            }
        }
        rhs[a] = r;
    }
    let sol = match qff.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => qff.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(m)),
    };
    for (a, &i) in free.iter().enumerate() {
        out[i] = sol[a];
    }
    out
}

/// Step `s` minimizing `½ sᵀ (H + δ I) s + gᵀ s` with `lower ≤ p + s ≤ upper`.
pub fn qp_subproblem(
    gradient: &DVector<f64>,
    hessian: &DMatrix<f64>,
    p: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    damping: f64,
) -> DVector<f64> {
    let n = p.len();
    let q = hessian + DMatrix::identity(n, n) * damping;
    let lo = (lower - p).map(|v| v.min(0.0));
    let hi = (upper - p).map(|v| v.max(0.0));
    box_qp(&q, gradient, &lo, &hi)
}

/// Objective `½ sᵀ q s + gᵀ s`.
pub fn qp_objective(q: &DMatrix<f64>, g: &DVector<f64>, s: &DVector<f64>) -> f64 {
    0.5 * s.dot(&(q * s)) + g.dot(s)
}
