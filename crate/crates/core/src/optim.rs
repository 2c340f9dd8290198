//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Minimizes `f`. An objective that returns `Err` at a trial point is
//! treated as infeasible and the step is shortened.

use std::collections::VecDeque;

use crate::scalar::{dot, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the infinity norm of the gradient falls below this.
    pub gradient_tol: f64,
    /// Stop when the relative decrease of `f` over one step falls below this.
    pub ftol: f64,
    /// Largest allowed change of any coordinate in one step.
    pub max_step: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 200,
            gradient_tol: 1e-5,
            ftol: 1e-9,
            max_step: 2.0,
            max_backtracks: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StopReason {
    GradientTolerance,
    ObjectiveTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome<T> {
    pub x: Vec<T>,
    pub value: T,
    pub gradient: Vec<T>,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
    /// Objective at the start and after every accepted step.
    pub history: Vec<T>,
}

fn inf_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Runs L-BFGS from `x0`. `f` returns the value and gradient; the starting
/// point must be feasible.
pub fn minimize<T, E, F>(mut f: F, x0: Vec<T>, opts: &LbfgsOptions) -> Result<LbfgsOutcome<T>, E>
where
    T: Real,
    F: FnMut(&[T]) -> Result<(T, Vec<T>), E>,
{
    let (mut fx, mut g) = f(&x0)?;
    let mut x = x0;
    let mut evaluations = 1;
    let mut memory: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(opts.memory);
    let c1 = T::lit(1e-4);
    let half = T::lit(0.5);
    let mut reason = StopReason::MaxIterations;
    let mut iterations = 0;
    let mut retried_after_reset = false;
    let mut history = vec![fx];

    while iterations < opts.max_iterations {
        if inf_norm(&g) < T::lit(opts.gradient_tol) {
            reason = StopReason::GradientTolerance;
            break;
        }

        // Two-loop recursion for d = -H g.
        let mut d: Vec<T> = g.iter().map(|v| -*v).collect();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = *rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * *yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = memory.back() {
            let gamma = dot(s, y) / dot(y, y);
            for di in &mut d {
                *di *= gamma;
            }
        } else {
            let gn = inf_norm(&g);
            if gn > T::one() {
                for di in &mut d {
                    *di /= gn;
                }
            }
        }
        for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
            let b = *rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * *si;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < T::zero()) {
            memory.clear();
            d = g.iter().map(|v| -*v).collect();
            slope = dot(&g, &d);
        }
        let biggest = inf_norm(&d);
        let max_step = T::lit(opts.max_step);
        if biggest > max_step {
            let s = max_step / biggest;
            for di in &mut d {
                *di *= s;
            }
            slope *= s;
        }

        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial: Vec<T> = x.iter().zip(&d).map(|(xi, di)| *xi + step * *di).collect();
            evaluations += 1;
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + c1 * step * slope && gt.iter().all(|v| v.is_finite()) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= half;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if !memory.is_empty() && !retried_after_reset {
                memory.clear();
                retried_after_reset = true;
                continue;
            }
            reason = StopReason::LineSearchFailed;
            break;
        };
        retried_after_reset = false;
        iterations += 1;

        let s: Vec<T> = xn.iter().zip(&x).map(|(a, b)| *a - *b).collect();
        let y: Vec<T> = gn.iter().zip(&g).map(|(a, b)| *a - *b).collect();
        let sy = dot(&s, &y);
        if sy > T::lit(1e-12) * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if memory.len() == opts.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, T::one() / sy));
        }
        let decrease = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        history.push(fx);
        if decrease <= T::lit(opts.ftol) * fx.abs().max(T::one()) {
            reason = if inf_norm(&g) < T::lit(opts.gradient_tol) {
                StopReason::GradientTolerance
            } else {
                StopReason::ObjectiveTolerance
            };
            break;
        }
    }
    Ok(LbfgsOutcome {
        x,
        value: fx,
        gradient: g,
        iterations,
        evaluations,
        reason,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>), ()> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let opts = LbfgsOptions {
            max_iterations: 500,
            ftol: 0.0,
            gradient_tol: 1e-8,
            ..Default::default()
        };
        let out = minimize(rosenbrock, vec![-1.2, 1.0], &opts).unwrap();
        assert_eq!(out.reason, StopReason::GradientTolerance);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn objective_never_increases() {
        let out = minimize(rosenbrock, vec![0.5, -0.3], &LbfgsOptions::default()).unwrap();
        assert_eq!(out.history.len(), out.iterations + 1);
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn infeasible_region_is_avoided() {
        // (x-3)² on x > -0.5, infeasible elsewhere.
        let f = |x: &[f64]| {
            if x[0] <= -0.5 {
                Err("infeasible")
            } else {
                Ok(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]))
            }
        };
        let out = minimize(f, vec![10.0], &LbfgsOptions::default()).unwrap();
        assert!((out.x[0] - 3.0).abs() < 1e-5);
        let g = |x: &[f64]| {
            if x[0] < 0.0 {
                Err("infeasible")
            } else {
                Ok((x[0], vec![1.0]))
            }
        };
        let out = minimize(g, vec![1.0], &LbfgsOptions::default()).unwrap();
        assert!(out.x[0] >= 0.0 && out.x[0] < 1.0);
    }
}
