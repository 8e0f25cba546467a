//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Every accepted step strictly decreases the objective, so the recorded
//! history is non-increasing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsOptions {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the absolute objective change of an accepted step falls below this.
    /// Zero disables the criterion.
    pub f_tol: f64,
    /// Stop when the gradient's Euclidean norm falls below this.
    pub g_tol: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { memory: 8, max_iter: 500, f_tol: 1e-6, g_tol: 1e-6, max_backtracks: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientNorm,
    ObjectiveChange,
    MaxIterations,
    LineSearchFailed,
    NonFiniteStart,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult<T> {
    pub x: Vec<T>,
    pub f: T,
    pub grad: Vec<T>,
    pub grad_norm: T,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective value at the start point and after every accepted step.
    pub history: Vec<T>,
}

impl<T: Scalar> LbfgsResult<T> {
    pub fn converged(&self) -> bool {
        matches!(self.termination, Termination::GradientNorm | Termination::ObjectiveChange)
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Minimizes `objective`, which returns the value at `x` and writes the gradient into its second argument.
pub fn minimize<T, F>(mut objective: F, x0: &[T], opts: &LbfgsOptions) -> LbfgsResult<T>
where
    T: Scalar,
    F: FnMut(&[T], &mut [T]) -> T,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![T::zero(); n];
    let mut f = objective(&x, &mut g);
    let mut evaluations = 1;
    let mut history = vec![f];
    let g_tol = T::lit(opts.g_tol);
    let f_tol = T::lit(opts.f_tol);
    let c1 = T::lit(1e-4);
    let half = T::lit(0.5);

    let finish = |x: Vec<T>, f: T, g: Vec<T>, it: usize, ev: usize, term: Termination, h: Vec<T>| {
        let gn = norm(&g);
        LbfgsResult { x, f, grad: g, grad_norm: gn, iterations: it, evaluations: ev, termination: term, history: h }
    };

    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return finish(x, f, g, 0, evaluations, Termination::NonFiniteStart, history);
    }

    let mut pairs: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(opts.memory);
    let mut x_new = vec![T::zero(); n];
    let mut g_new = vec![T::zero(); n];

    for iter in 0..opts.max_iter {
        if norm(&g) < g_tol {
            return finish(x, f, g, iter, evaluations, Termination::GradientNorm, history);
        }

        let mut accepted = None;
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !pairs.is_empty();
            let mut d = if use_memory { two_loop(&g, &pairs) } else { g.iter().map(|&v| -v).collect() };
            let mut slope = dot(&g, &d);
            if !(slope < T::zero()) || !slope.is_finite() {
                d = g.iter().map(|&v| -v).collect();
                slope = -dot(&g, &g);
            }
            let mut step = if use_memory { T::one() } else { T::one().min(T::one() / norm(&g)) };
            for _ in 0..opts.max_backtracks {
                for i in 0..n {
                    x_new[i] = x[i] + step * d[i];
                }
                let f_try = objective(&x_new, &mut g_new);
                evaluations += 1;
                if f_try.is_finite() && g_new.iter().all(|v| v.is_finite()) && f_try <= f + c1 * step * slope && f_try < f {
                    accepted = Some(f_try);
                    break;
                }
                step = step * half;
            }
            if accepted.is_some() {
                break;
            }
            pairs.clear();
        }

        let Some(f_next) = accepted else {
            return finish(x, f, g, iter, evaluations, Termination::LineSearchFailed, history);
        };

        let s: Vec<T> = x_new.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = g_new.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > T::epsilon() * dot(&y, &y) {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, T::one() / sy));
        }

        let df = (f - f_next).abs();
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        f = f_next;
        history.push(f);

        if norm(&g) < g_tol {
            return finish(x, f, g, iter + 1, evaluations, Termination::GradientNorm, history);
        }
        if opts.f_tol > 0.0 && df < f_tol {
            return finish(x, f, g, iter + 1, evaluations, Termination::ObjectiveChange, history);
        }
    }
    finish(x, f, g, opts.max_iter, evaluations, Termination::MaxIterations, history)
}

fn two_loop<T: Scalar>(g: &[T], pairs: &VecDeque<(Vec<T>, Vec<T>, T)>) -> Vec<T> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = *rho * dot(s, &q);
        for (qi, &yi) in q.iter_mut().zip(y) {
            *qi = *qi - a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v = *v * gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * dot(y, &q);
        for (qi, &si) in q.iter_mut().zip(s) {
            *qi = *qi + (a - b) * si;
        }
    }
    q.iter().map(|&v| -v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn solves_rosenbrock() {
        let opts = LbfgsOptions { f_tol: 0.0, g_tol: 1e-8, max_iter: 2000, ..Default::default() };
        let r = minimize(rosenbrock, &[-1.2, 1.0], &opts);
        assert_eq!(r.termination, Termination::GradientNorm);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn history_is_non_increasing() {
        let r = minimize(rosenbrock, &[-1.2, 1.0], &LbfgsOptions::default());
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_in_f32() {
        let obj = |x: &[f32], g: &mut [f32]| {
            g[0] = 2.0 * (x[0] - 3.0);
            g[1] = 8.0 * (x[1] + 1.0);
            (x[0] - 3.0).powi(2) + 4.0 * (x[1] + 1.0).powi(2)
        };
        let opts = LbfgsOptions { g_tol: 1e-4, f_tol: 0.0, ..Default::default() };
        let r = minimize(obj, &[0.0f32, 0.0], &opts);
        assert!(r.converged());
        assert!((r.x[0] - 3.0).abs() < 1e-3 && (r.x[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_start_is_flagged() {
        let obj = |_: &[f64], g: &mut [f64]| {
            g[0] = 0.0;
            f64::NAN
        };
        let r = minimize(obj, &[0.0], &LbfgsOptions::default());
        assert_eq!(r.termination, Termination::NonFiniteStart);
        assert!(!r.converged());
    }
}
