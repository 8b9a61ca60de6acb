//! Box-constrained limited-memory BFGS with a projected backtracking
//! (Armijo) line search. Used for both kernel fitting and per-frame variance
//! learning; both objectives are low dimensional and smooth in log space.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    /// Stop when `|f_k - f_{k+1}| <= rel_tol * max(|f_k|, |f_{k+1}|)`.
    pub rel_tol: f64,
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    pub history: usize,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-9,
            grad_tol: 1e-12,
            history: 8,
            lower: None,
            upper: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the start point and after every accepted step.
    pub trace: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACK: usize = 50;

/// Minimizes `f`, which returns the objective and its gradient. An `Err`
/// or a non-finite value at a trial point is treated as a rejected step.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Result<Outcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let lower = opts.lower.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; n]);
    let upper = opts.upper.clone().unwrap_or_else(|| vec![f64::INFINITY; n]);
    let project = |x: &mut [f64]| {
        for i in 0..x.len() {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };

    let mut x = x0.to_vec();
    project(&mut x);
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimization {
            reason: "objective is not finite at the starting point".into(),
            best_value: fx,
            best_params: x,
        });
    }

    let mut trace = vec![fx];
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    // Coordinates pinned at a bound with the gradient pushing outward.
    let pinned = |x: &[f64], g: &[f64], i: usize| {
        (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0)
    };

    while iterations < opts.max_iter {
        let free: Vec<bool> = (0..n).map(|i| !pinned(&x, &g, i)).collect();
        let pg: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= opts.grad_tol {
            converged = true;
            break;
        }

        let mut d = two_loop(&pg, &hist, &free);
        if !(dot(&d, &pg) < 0.0) {
            hist.clear();
            d = pg.iter().map(|v| -v).collect();
        }
        if hist.is_empty() {
            // first step / after a reset: unit length in parameter space
            let norm = dot(&d, &d).sqrt();
            if norm > 1.0 {
                d.iter_mut().for_each(|v| *v /= norm);
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut xt);
            let moved: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&moved, &g);
            if let Ok((ft, gt)) = f(&xt) {
                let ok = ft.is_finite()
                    && gt.iter().all(|v| v.is_finite())
                    && ft <= fx + ARMIJO_C1 * decrease;
                if ok && ft <= fx {
                    accepted = Some((xt, ft, gt, moved));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((xn, fnew, gnew, s)) = accepted else {
            if hist.is_empty() {
                // steepest descent made no progress either
                converged = true;
                break;
            }
            hist.clear();
            continue;
        };
        iterations += 1;

        let yv: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if hist.len() == opts.history {
                hist.pop_front();
            }
            hist.push_back((s, yv, 1.0 / sy));
        }

        let change = (fx - fnew).abs();
        let scale = fx.abs().max(fnew.abs());
        x = xn;
        fx = fnew;
        g = gnew;
        trace.push(fx);
        if change <= opts.rel_tol * scale {
            converged = true;
            break;
        }
    }

    Ok(Outcome {
        x,
        value: fx,
        grad: g,
        iterations,
        converged,
        trace,
    })
}

fn two_loop(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, free: &[bool]) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(free)
            .map(|(x, &f)| if f { *x } else { 0.0 })
            .collect()
    };
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; hist.len()];
    for (k, (s, y, rho)) in hist.iter().enumerate().rev() {
        let s = mask(s);
        let y = mask(y);
        alpha[k] = rho * dot(&s, &q);
        for i in 0..q.len() {
            q[i] -= alpha[k] * y[i];
        }
    }
    if let Some((s, y, _)) = hist.back() {
        let yy = dot(y, y);
        if yy > 0.0 {
            let gamma = dot(s, y) / yy;
            q.iter_mut().for_each(|v| *v *= gamma);
        }
    }
    for (k, (s, y, rho)) in hist.iter().enumerate() {
        let s = mask(s);
        let y = mask(y);
        let beta = rho * dot(&y, &q);
        for i in 0..q.len() {
            q[i] += (alpha[k] - beta) * s[i];
        }
    }
    q.iter()
        .zip(free)
        .map(|(v, &f)| if f { -v } else { 0.0 })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
