//! Limited-memory BFGS with Armijo backtracking, used as the inner loop of
//! the augmented-Lagrangian solver.
//!
//! The objective closure is called as `f(x, None)` for value-only probes
//! (line search) and `f(x, Some(grad))` when a gradient is needed. Returning
//! a non-finite value marks the point as inadmissible; the line search backs
//! away from it.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    /// History length of the two-loop recursion.
    pub memory: usize,
    /// Hard cap on iterations for this invocation.
    pub max_iters: usize,
    /// Stop when `‖∇f‖∞` falls at or below this.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease coefficient.
    pub c1: f64,
    /// Maximum halvings per line search.
    pub max_ls_steps: usize,
    /// Stop when consecutive accepted steps become this small relative to
    /// `1 + ‖x‖∞` (flat-valley exit near machine precision).
    pub step_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 20,
            max_iters: 500,
            grad_tol: 1e-8,
            c1: 1e-4,
            max_ls_steps: 45,
            step_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStop {
    /// `‖∇f‖∞ ≤ grad_tol`.
    GradTol,
    /// Steps shrank below `step_tol` twice in a row.
    SmallStep,
    /// Ran out of iterations.
    MaxIters,
    /// No admissible decrease direction found.
    LineSearchFailed,
    /// Objective non-finite at the start point.
    BadStart,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iters: usize,
    pub stop: LbfgsStop,
}

impl LbfgsOutcome {
    pub fn converged(&self) -> bool {
        matches!(self.stop, LbfgsStop::GradTol | LbfgsStop::SmallStep)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn minimize(
    f: &mut dyn FnMut(&[f64], Option<&mut [f64]>) -> f64,
    x0: &[f64],
    opts: &LbfgsOptions,
) -> LbfgsOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut fx = f(&x, Some(&mut grad));
    if !fx.is_finite() {
        return LbfgsOutcome {
            x,
            f: fx,
            grad_norm: inf_norm(&grad),
            grad,
            iters: 0,
            stop: LbfgsStop::BadStart,
        };
    }

    // (s, y, 1/(yᵀs)) triples, newest last
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut dir = vec![0.0; n];
    let mut small_steps = 0usize;
    let mut iters = 0usize;
    let mut stop = LbfgsStop::MaxIters;

    while iters < opts.max_iters {
        let gnorm = inf_norm(&grad);
        if gnorm <= opts.grad_tol {
            stop = LbfgsStop::GradTol;
            break;
        }

        // two-loop recursion
        dir.copy_from_slice(&grad);
        let mut alpha = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &dir);
            for k in 0..n {
                dir[k] -= a * y[k];
            }
            alpha.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for d in dir.iter_mut() {
                *d *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alpha.iter().rev()) {
            let b = rho * dot(y, &dir);
            for k in 0..n {
                dir[k] += (a - b) * s[k];
            }
        }
        for d in dir.iter_mut() {
            *d = -*d;
        }

        let mut gd = dot(&grad, &dir);
        if gd >= 0.0 {
            // not a descent direction — drop curvature info, go steepest
            history.clear();
            for (d, g) in dir.iter_mut().zip(&grad) {
                *d = -g;
            }
            gd = -dot(&grad, &grad);
        }

        // backtracking Armijo; cap the very first raw step by gradient size
        let mut t = if history.is_empty() {
            (1.0 / gnorm.max(1.0)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = false;
        let mut x_new = vec![0.0; n];
        let mut f_new = f64::INFINITY;
        for _ in 0..opts.max_ls_steps {
            for k in 0..n {
                x_new[k] = x[k] + t * dir[k];
            }
            f_new = f(&x_new, None);
            if f_new.is_finite() && f_new <= fx + opts.c1 * t * gd {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if !history.is_empty() {
                // retry once from a clean slate
                history.clear();
                continue;
            }
            stop = LbfgsStop::LineSearchFailed;
            break;
        }

        let mut grad_new = vec![0.0; n];
        let f_check = f(&x_new, Some(&mut grad_new));
        debug_assert!(f_check.is_finite());

        let step_norm = t * inf_norm(&dir);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let ys = dot(&y, &s);
        if ys > 1e-10 * inf_norm(&y) * inf_norm(&s) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / ys));
        }

        x = x_new;
        fx = f_new;
        grad = grad_new;
        iters += 1;

        if step_norm <= opts.step_tol * (1.0 + inf_norm(&x)) {
            small_steps += 1;
            if small_steps >= 2 {
                stop = LbfgsStop::SmallStep;
                break;
            }
        } else {
            small_steps = 0;
        }
    }

    let grad_norm = inf_norm(&grad);
    if stop == LbfgsStop::MaxIters && grad_norm <= opts.grad_tol {
        stop = LbfgsStop::GradTol;
    }
    LbfgsOutcome {
        x,
        f: fx,
        grad_norm,
        grad,
        iters,
        stop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_bowl() {
        let mut f = |x: &[f64], grad: Option<&mut [f64]>| {
            let v = (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2);
            if let Some(g) = grad {
                g[0] = 2.0 * (x[0] - 3.0);
                g[1] = 20.0 * (x[1] + 2.0);
            }
            v
        };
        let out = minimize(&mut f, &[0.0, 0.0], &LbfgsOptions::default());
        assert!(out.converged());
        assert_relative_eq!(out.x[0], 3.0, epsilon = 1e-6);
        assert_relative_eq!(out.x[1], -2.0, epsilon = 1e-6);
    }

    #[test]
    fn rosenbrock() {
        let mut f = |x: &[f64], grad: Option<&mut [f64]>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            if let Some(g) = grad {
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
            }
            v
        };
        let out = minimize(
            &mut f,
            &[-1.2, 1.0],
            &LbfgsOptions {
                max_iters: 2000,
                ..Default::default()
            },
        );
        assert!(out.converged(), "stop = {:?}", out.stop);
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(out.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn rejects_infinite_region() {
        // objective is +inf for x < 0.5; minimizer at the feasible optimum 1.0
        let mut f = |x: &[f64], grad: Option<&mut [f64]>| {
            if x[0] < 0.5 {
                return f64::INFINITY;
            }
            let v = (x[0] - 1.0).powi(2);
            if let Some(g) = grad {
                g[0] = 2.0 * (x[0] - 1.0);
            }
            v
        };
        let out = minimize(&mut f, &[2.0, ], &LbfgsOptions::default());
        assert!(out.converged());
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn bad_start_reported() {
        let mut f = |_x: &[f64], _grad: Option<&mut [f64]>| f64::NAN;
        let out = minimize(&mut f, &[0.0], &LbfgsOptions::default());
        assert_eq!(out.stop, LbfgsStop::BadStart);
    }
}
