//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The inverse-Hessian–vector product is the standard two-loop recursion over
//! a bounded history of (s, y) pairs; the line search brackets and zooms with
//! cubic interpolation until both the sufficient-decrease and curvature
//! conditions hold. Everything is plain `f64` over flat parameter vectors and
//! fully deterministic.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    /// Number of (s, y) pairs retained.
    pub history: usize,
    pub max_iters: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            history: 10,
            max_iters: 100,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 20,
            grad_tol: 1e-8,
            f_tol: 1e-12,
        }
    }
}

#[derive(Debug)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evals: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for i in 0..out.len() {
        out[i] += alpha * x[i];
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Two-loop recursion: returns the search direction −H·g.
fn two_loop(history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * dot(s, &q);
        axpy(&mut q, -alpha, y);
        alphas.push(alpha);
    }
    // Initial scaling from the most recent pair.
    let gamma = match history.back() {
        Some((s, y, _)) => dot(s, y) / dot(y, y),
        None => 1.0,
    };
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for ((s, y, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * dot(y, &q);
        axpy(&mut q, alpha - beta, s);
    }
    for v in q.iter_mut() {
        *v = -*v;
    }
    q
}

/// Finds the minimizer of the cubic through (x1, f1, g1) and (x2, f2, g2),
/// clamped to `bounds`.
fn cubic_interpolate(
    x1: f64,
    f1: f64,
    g1: f64,
    x2: f64,
    f2: f64,
    g2: f64,
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = match bounds {
        Some(b) => b,
        None => {
            if x1 < x2 {
                (x1, x2)
            } else {
                (x2, x1)
            }
        }
    };
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let min_pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if min_pos.is_finite() {
            min_pos.max(lo).min(hi)
        } else {
            (lo + hi) / 2.0
        }
    } else {
        (lo + hi) / 2.0
    }
}

struct LinePoint {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

/// Strong-Wolfe line search along direction `d` from `x`.
///
/// Returns the accepted point; falls back to the best point seen when the
/// evaluation budget runs out before both conditions hold.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    f: &mut F,
    x: &[f64],
    d: &[f64],
    t_init: f64,
    f0: f64,
    g0: &[f64],
    gtd0: f64,
    opts: &LbfgsOptions,
    evals: &mut usize,
) -> LinePoint {
    let eval_at = |f: &mut F, t: f64, evals: &mut usize| -> LinePoint {
        let mut xt = x.to_vec();
        axpy(&mut xt, t, d);
        let (ft, gt) = f(&xt);
        *evals += 1;
        let gtd = dot(&gt, d);
        LinePoint { t, f: ft, g: gt, gtd }
    };

    let mut t = t_init;
    let mut prev = LinePoint { t: 0.0, f: f0, g: g0.to_vec(), gtd: gtd0 };
    let mut ls_iter = 0;
    let mut current = eval_at(f, t, evals);
    let (mut lo, mut hi) = loop {
        if current.f > f0 + opts.c1 * t * gtd0 || (ls_iter > 0 && current.f >= prev.f) {
            break (prev, current);
        }
        if current.gtd.abs() <= -opts.c2 * gtd0 {
            return current;
        }
        if current.gtd >= 0.0 {
            break (prev, current);
        }
        ls_iter += 1;
        if ls_iter >= opts.max_line_search {
            // Budget exhausted while still descending; take what we have.
            return if current.f < f0 { current } else { prev };
        }
        let min_step = t + 0.01 * (t - prev.t);
        let max_step = t * 10.0;
        let next_t = cubic_interpolate(
            prev.t,
            prev.f,
            prev.gtd,
            t,
            current.f,
            current.gtd,
            Some((min_step, max_step)),
        );
        prev = current;
        t = next_t;
        current = eval_at(f, t, evals);
    };
    if hi.f < lo.f {
        std::mem::swap(&mut lo, &mut hi);
    }

    // Zoom: shrink the bracket with safeguarded cubic steps.
    for _ in 0..opts.max_line_search {
        if (hi.t - lo.t).abs() * inf_norm(d) < 1e-12 {
            break;
        }
        let mut tt = cubic_interpolate(lo.t, lo.f, lo.gtd, hi.t, hi.f, hi.gtd, None);
        // Keep the trial point strictly inside the bracket.
        let left = lo.t.min(hi.t);
        let right = lo.t.max(hi.t);
        let margin = 0.1 * (right - left);
        if tt < left + margin || tt > right - margin {
            tt = (left + right) / 2.0;
        }
        let cand = eval_at(f, tt, evals);
        if cand.f > f0 + opts.c1 * cand.t * gtd0 || cand.f >= lo.f {
            hi = cand;
        } else {
            if cand.gtd.abs() <= -opts.c2 * gtd0 {
                return cand;
            }
            if cand.gtd * (hi.t - lo.t) >= 0.0 {
                hi = std::mem::replace(&mut lo, cand);
            } else {
                lo = cand;
            }
        }
    }
    if lo.f < f0 {
        lo
    } else {
        LinePoint { t: 0.0, f: f0, g: g0.to_vec(), gtd: gtd0 }
    }
}

/// One curvature pair: (s, y, 1/sᵀy).
pub type CurvaturePair = (Vec<f64>, Vec<f64>, f64);

/// Minimizes `f` starting at `x0`. `f` returns the value and its gradient.
pub fn minimize<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    f: F,
    x0: &[f64],
    opts: &LbfgsOptions,
) -> MinimizeResult {
    let mut history = VecDeque::new();
    minimize_with_history(f, x0, &mut history, opts)
}

/// [`minimize`] over a caller-owned curvature history, so successive calls
/// with related objectives (mini-batches of one dataset) can share and keep
/// refining the inverse-Hessian approximation.
pub fn minimize_with_history<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    mut f: F,
    x0: &[f64],
    history: &mut VecDeque<CurvaturePair>,
    opts: &LbfgsOptions,
) -> MinimizeResult {
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut evals = 1usize;
    let mut converged = false;
    let mut iterations = 0usize;

    for iter in 0..opts.max_iters {
        if inf_norm(&g) <= opts.grad_tol {
            converged = true;
            break;
        }
        let mut d = two_loop(history, &g);
        let mut gtd = dot(&g, &d);
        if gtd >= -1e-12 {
            // Direction is not a descent direction; restart from steepest descent.
            history.clear();
            d = g.iter().map(|v| -v).collect();
            gtd = dot(&g, &d);
            if gtd >= -1e-16 {
                converged = true;
                break;
            }
        }
        let t_init = if history.is_empty() {
            let l1: f64 = g.iter().map(|v| v.abs()).sum();
            (1.0 / l1.max(1e-12)).min(1.0)
        } else {
            1.0
        };
        let accepted = strong_wolfe(&mut f, &x, &d, t_init, fx, &g, gtd, opts, &mut evals);
        iterations = iter + 1;
        if accepted.t == 0.0 {
            break;
        }

        let mut s = d;
        for v in s.iter_mut() {
            *v *= accepted.t;
        }
        axpy(&mut x, 1.0, &s);
        let y: Vec<f64> = accepted.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 {
            if history.len() >= opts.history {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let f_change = (fx - accepted.f).abs();
        fx = accepted.f;
        g = accepted.g;
        if f_change < opts.f_tol * fx.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    MinimizeResult { x, f: fx, grad: g, iterations, evals, converged }
}
