//! Limited-memory BFGS with a weak Wolfe line search.
//!
//! The objective returns `None` at infeasible points (failed factorizations);
//! the line search treats those as +inf and backtracks.

const MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_STEPS: usize = 40;

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `objective` starting from `x0`. Stops when the gradient
/// infinity-norm drops below `grad_tol` or after `max_iter` iterations.
/// Returns `None` when the starting point is infeasible.
pub fn lbfgs_minimize<F>(
    x0: &[f64],
    max_iter: usize,
    grad_tol: f64,
    mut objective: F,
) -> Option<LbfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() {
        return None;
    }

    let mut best_x = x.clone();
    let mut best_f = f;

    // History of (s, y, 1/(y^T s)) pairs, newest last.
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(MEMORY);
    let mut iters = 0usize;
    let mut converged = inf_norm(&g) < grad_tol;

    while !converged && iters < max_iter {
        // Two-loop recursion for d = -H g.
        let mut q = g.clone();
        let mut alphas = vec![0.0; hist.len()];
        for (idx, (s, y, rho)) in hist.iter().enumerate().rev() {
            let a = rho * dot(s, &q);
            alphas[idx] = a;
            for j in 0..n {
                q[j] -= a * y[j];
            }
        }
        if let Some((s, y, _)) = hist.last() {
            let ys = dot(y, s);
            let yy = dot(y, y);
            if ys > 0.0 && yy > 0.0 {
                let gamma = ys / yy;
                for v in q.iter_mut() {
                    *v *= gamma;
                }
            }
        }
        for (idx, (s, y, rho)) in hist.iter().enumerate() {
            let b = rho * dot(y, &q);
            for j in 0..n {
                q[j] += (alphas[idx] - b) * s[j];
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if !slope.is_finite() || slope >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            hist.clear();
        }

        // Weak Wolfe line search: bisect when the Armijo bound fails,
        // extend when curvature along d is still strongly negative.
        // Accepted steps then have y^T s > 0, keeping the pair history
        // positive definite.
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        let mut t = 1.0f64;
        let mut accepted = None;
        let mut armijo_only: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        for _ in 0..MAX_LINE_STEPS {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            match objective(&xt) {
                Some((ft, gt)) if ft.is_finite() && ft <= f + ARMIJO_C1 * t * slope => {
                    if dot(&gt, &d) >= WOLFE_C2 * slope {
                        accepted = Some((xt, ft, gt));
                        break;
                    }
                    lo = t;
                    armijo_only = Some((xt, ft, gt));
                    t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * t };
                }
                _ => {
                    hi = t;
                    t = 0.5 * (lo + hi);
                }
            }
        }
        // A sufficient-decrease step without the curvature bound still
        // makes progress; the y^T s guard below skips its pair.
        let Some((xt, ft, gt)) = accepted.or(armijo_only) else {
            break; // no acceptable step; keep the best point seen
        };
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ys = dot(&y, &s);
        if ys > 1e-10 * inf_norm(&y) * inf_norm(&s) {
            if hist.len() == MEMORY {
                hist.remove(0);
            }
            hist.push((s.clone(), y, 1.0 / ys));
        }
        let step_inf = inf_norm(&s);
        x = xt;
        f = ft;
        g = gt;
        if f < best_f {
            best_f = f;
            best_x = x.clone();
        }
        iters += 1;
        converged = inf_norm(&g) < grad_tol;
        if step_inf < 1e-14 * (1.0 + inf_norm(&x)) {
            break; // stagnating
        }
    }

    let grad_inf = inf_norm(&g);
    // Report the best point encountered, not necessarily the last.
    Some(LbfgsResult {
        x: best_x,
        f: best_f,
        grad_inf_norm: grad_inf,
        iterations: iters,
        converged,
    })
}
