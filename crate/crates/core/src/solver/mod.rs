//! General nonlinear programming layer: a matrix-free problem trait, an
//! augmented-Lagrangian outer loop with explicit warm-start state, and the
//! L-BFGS inner minimizer.
//!
//! Problems expose their objective `f`, equality residuals `h(x) = 0` and
//! inequality residuals `g(x) ≤ 0`, plus one adjoint-style callback that
//! accumulates `w_f·∇f + J_hᵀ w_h + J_gᵀ w_g` — exactly the contraction the
//! augmented Lagrangian
//!
//! ```text
//! L_A(x) = f + Σᵢ (λᵢhᵢ + ½μhᵢ²) + 1/(2μ) Σⱼ (max(0, λⱼ+μgⱼ)² − λⱼ²)
//! ```
//!
//! needs for its gradient. Warm starts re-enter the solver in its end-game
//! state: primal iterate, multipliers and penalty are taken over and the
//! inner tolerances start tight, so a re-solve from an optimum terminates in
//! one or two outer iterations.

pub mod dual;
pub mod lbfgs;

use lbfgs::{LbfgsOptions, LbfgsStop};

pub use dual::{dense_jacobian, Dual, Real};

// ── Problem interface ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NlpDims {
    pub vars: usize,
    pub eq: usize,
    pub ineq: usize,
}

/// A smooth NLP in matrix-free form.
pub trait NlpProblem: Sync {
    fn dims(&self) -> NlpDims;

    /// Evaluates the objective, filling `eq` with `h(x)` and `ineq` with
    /// `g(x)` (feasible means `h = 0`, `g ≤ 0`). Return a non-finite value
    /// to mark `x` inadmissible.
    fn eval(&self, x: &[f64], eq: &mut [f64], ineq: &mut [f64]) -> f64;

    /// Accumulates `grad += w_obj·∇f(x) + J_hᵀ(x) w_eq + J_gᵀ(x) w_ineq`.
    fn accumulate_grad(
        &self,
        x: &[f64],
        w_obj: f64,
        w_eq: &[f64],
        w_ineq: &[f64],
        grad: &mut [f64],
    );

    /// Per-variable magnitudes; the solver optimizes `y = x / scale`.
    fn x_scale(&self) -> Vec<f64> {
        vec![1.0; self.dims().vars]
    }

    /// Variables to hold frozen at their start values.
    fn fixed_mask(&self) -> Option<Vec<bool>> {
        None
    }
}

// ── Options and results ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Multipliers {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
}

/// End-game state handed from one solve to the next.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub multipliers: Multipliers,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Feasibility tolerance on `max(‖h‖∞, ‖max(0,g)‖∞)`.
    pub feas_tol: f64,
    /// Stationarity tolerance on the scaled augmented-Lagrangian gradient.
    pub stat_tol: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub max_outer: usize,
    pub max_inner_per_outer: usize,
    /// Total inner-iteration budget across all outer iterations.
    pub max_total_inner: usize,
    pub warm: Option<WarmStart>,
    /// Floor applied to warm-started inequality multipliers.
    pub multiplier_push: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-6,
            stat_tol: 1e-6,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            max_outer: 50,
            max_inner_per_outer: 400,
            max_total_inner: 3000,
            warm: None,
            multiplier_push: 1e-10,
        }
    }
}

impl SolveOptions {
    /// Warm-start from a previous result, keeping the other settings.
    pub fn warmed_from(mut self, prev: &SolveResult) -> Self {
        self.warm = Some(WarmStart {
            multipliers: prev.multipliers.clone(),
            penalty: prev.penalty,
        });
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Feasible and stationary within tolerances.
    Optimal,
    /// Iteration budget exhausted.
    MaxIter,
    /// Constraint violation stagnated under a large penalty.
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub feas_violation: f64,
    pub stationarity: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub multipliers: Multipliers,
    pub penalty: f64,
}

// ── Augmented-Lagrangian solver ─────────────────────────────────────────────

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn violation(eq: &[f64], ineq: &[f64]) -> f64 {
    let ve = inf_norm(eq);
    let vi = ineq.iter().fold(0.0f64, |m, g| m.max(*g));
    ve.max(vi).max(0.0)
}

pub fn solve<P: NlpProblem + ?Sized>(problem: &P, x0: &[f64], opts: &SolveOptions) -> SolveResult {
    let dims = problem.dims();
    assert_eq!(x0.len(), dims.vars);
    let scale = problem.x_scale();
    assert_eq!(scale.len(), dims.vars);
    let fixed = problem.fixed_mask();

    let mut lam_eq;
    let mut lam_in;
    let mut mu;
    let (mut omega, mut eta);
    match &opts.warm {
        Some(w) => {
            assert_eq!(w.multipliers.eq.len(), dims.eq);
            assert_eq!(w.multipliers.ineq.len(), dims.ineq);
            lam_eq = w.multipliers.eq.clone();
            lam_in = w
                .multipliers
                .ineq
                .iter()
                .map(|&l| l.max(opts.multiplier_push))
                .collect::<Vec<_>>();
            mu = w.penalty.max(opts.penalty_init);
            omega = opts.stat_tol;
            eta = opts.feas_tol;
        }
        None => {
            lam_eq = vec![0.0; dims.eq];
            lam_in = vec![0.0; dims.ineq];
            mu = opts.penalty_init;
            omega = 1e-2;
            eta = 1e-2;
        }
    }

    // scaled start, fixed entries pinned
    let mut y: Vec<f64> = x0.iter().zip(&scale).map(|(x, s)| x / s).collect();

    let unscale = |y: &[f64]| -> Vec<f64> {
        let mut x: Vec<f64> = y.iter().zip(&scale).map(|(y, s)| y * s).collect();
        if let Some(f) = &fixed {
            for (k, &is_fixed) in f.iter().enumerate() {
                if is_fixed {
                    x[k] = x0[k];
                }
            }
        }
        x
    };

    let mut eq = vec![0.0; dims.eq];
    let mut ineq = vec![0.0; dims.ineq];
    let mut total_inner = 0usize;
    let mut outer = 0usize;
    let mut last_grad_norm = f64::INFINITY;
    let mut feas_at_last_bump = f64::INFINITY;
    let mut stagnant_bumps = 0usize;

    let status = loop {
        if outer >= opts.max_outer || total_inner >= opts.max_total_inner {
            break SolveStatus::MaxIter;
        }
        outer += 1;

        // inner minimization of the augmented Lagrangian in scaled space
        let mut eq_buf = vec![0.0; dims.eq];
        let mut in_buf = vec![0.0; dims.ineq];
        let mut w_eq = vec![0.0; dims.eq];
        let mut w_in = vec![0.0; dims.ineq];
        let mut gx = vec![0.0; dims.vars];
        let mut al = |yv: &[f64], grad: Option<&mut [f64]>| -> f64 {
            let x = unscale(yv);
            let f = problem.eval(&x, &mut eq_buf, &mut in_buf);
            if !f.is_finite() {
                return f64::INFINITY;
            }
            let mut val = f;
            for (h, &l) in eq_buf.iter().zip(&lam_eq) {
                val += l * h + 0.5 * mu * h * h;
            }
            for (g, &l) in in_buf.iter().zip(&lam_in) {
                let t = l + mu * g;
                if t > 0.0 {
                    val += (t * t - l * l) / (2.0 * mu);
                } else {
                    val -= l * l / (2.0 * mu);
                }
            }
            if !val.is_finite() {
                return f64::INFINITY;
            }
            if let Some(gout) = grad {
                for (w, (h, &l)) in w_eq.iter_mut().zip(eq_buf.iter().zip(&lam_eq)) {
                    *w = l + mu * h;
                }
                for (w, (g, &l)) in w_in.iter_mut().zip(in_buf.iter().zip(&lam_in)) {
                    *w = (l + mu * g).max(0.0);
                }
                gx.iter_mut().for_each(|v| *v = 0.0);
                problem.accumulate_grad(&x, 1.0, &w_eq, &w_in, &mut gx);
                for ((go, g), s) in gout.iter_mut().zip(&gx).zip(&scale) {
                    *go = g * s;
                }
                if let Some(fmask) = &fixed {
                    for (go, &is_fixed) in gout.iter_mut().zip(fmask) {
                        if is_fixed {
                            *go = 0.0;
                        }
                    }
                }
            }
            val
        };

        let inner_opts = LbfgsOptions {
            grad_tol: omega,
            max_iters: opts
                .max_inner_per_outer
                .min(opts.max_total_inner - total_inner),
            ..Default::default()
        };
        let outcome = lbfgs::minimize(&mut al, &y, &inner_opts);
        total_inner += outcome.iters.max(1);
        y = outcome.x.clone();
        last_grad_norm = outcome.grad_norm;
        if outcome.stop == LbfgsStop::BadStart {
            break SolveStatus::MaxIter;
        }

        let x = unscale(&y);
        problem.eval(&x, &mut eq, &mut ineq);
        let feas = violation(&eq, &ineq);

        let stationary_enough =
            omega <= opts.stat_tol && matches!(outcome.stop, LbfgsStop::GradTol | LbfgsStop::SmallStep);
        if feas <= opts.feas_tol && stationary_enough {
            for (l, h) in lam_eq.iter_mut().zip(&eq) {
                *l += mu * h;
            }
            for (l, g) in lam_in.iter_mut().zip(&ineq) {
                *l = (*l + mu * g).max(0.0);
            }
            break SolveStatus::Optimal;
        }

        if feas <= eta.max(opts.feas_tol) {
            // good progress on feasibility: first-order multiplier update
            for (l, h) in lam_eq.iter_mut().zip(&eq) {
                *l += mu * h;
            }
            for (l, g) in lam_in.iter_mut().zip(&ineq) {
                *l = (*l + mu * g).max(0.0);
            }
            eta = (eta * 0.2).max(opts.feas_tol);
            omega = (omega * 0.2).max(opts.stat_tol);
        } else {
            // feasibility stalling: raise the penalty
            if feas > 0.9 * feas_at_last_bump {
                stagnant_bumps += 1;
            } else {
                stagnant_bumps = 0;
            }
            feas_at_last_bump = feas;
            mu *= opts.penalty_growth;
            omega = (omega * 0.5).max(opts.stat_tol);
            if mu >= 1e10 && stagnant_bumps >= 2 && feas > 10.0 * opts.feas_tol {
                break SolveStatus::Infeasible;
            }
        }
    };

    let x = unscale(&y);
    let objective = problem.eval(&x, &mut eq, &mut ineq);
    let feas_violation = violation(&eq, &ineq);
    SolveResult {
        x,
        status,
        objective,
        feas_violation,
        stationarity: last_grad_norm,
        outer_iters: outer,
        inner_iters: total_inner,
        multipliers: Multipliers {
            eq: lam_eq,
            ineq: lam_in,
        },
        penalty: mu,
    }
}

// ── Gradient verification ───────────────────────────────────────────────────

/// Compares [`NlpProblem::accumulate_grad`] against central finite
/// differences of a randomly weighted scalarization; returns the worst
/// absolute mismatch. Diagnostic for problem implementations.
pub fn max_gradient_error<P: NlpProblem + ?Sized>(problem: &P, x: &[f64], h: f64) -> f64 {
    let dims = problem.dims();
    let w_obj = 0.73;
    let w_eq: Vec<f64> = (0..dims.eq)
        .map(|i| 0.3 + 0.1 * ((i * 7 + 3) % 11) as f64)
        .collect();
    let w_in: Vec<f64> = (0..dims.ineq)
        .map(|i| 0.2 + 0.1 * ((i * 5 + 1) % 13) as f64)
        .collect();

    let phi = |x: &[f64]| -> f64 {
        let mut eq = vec![0.0; dims.eq];
        let mut ineq = vec![0.0; dims.ineq];
        let f = problem.eval(x, &mut eq, &mut ineq);
        w_obj * f
            + eq.iter().zip(&w_eq).map(|(a, b)| a * b).sum::<f64>()
            + ineq.iter().zip(&w_in).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut grad = vec![0.0; dims.vars];
    problem.accumulate_grad(x, w_obj, &w_eq, &w_in, &mut grad);

    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for k in 0..dims.vars {
        let step = h * (1.0 + x[k].abs());
        xp[k] = x[k] + step;
        let fp = phi(&xp);
        xp[k] = x[k] - step;
        let fm = phi(&xp);
        xp[k] = x[k];
        worst = worst.max((grad[k] - (fp - fm) / (2.0 * step)).abs());
    }
    worst
}
