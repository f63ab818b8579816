//! Dense Levenberg–Marquardt for small fixed-size parameter vectors.
//!
//! The caller supplies the normal equations at a point; the solver owns
//! damping and step acceptance. Accepted steps never raise the cost.

use nalgebra::{SMatrix, SVector};

/// Cost `½‖r‖²`, `JᵀJ` and `Jᵀr` at a parameter vector.
pub struct Normal<const N: usize> {
    pub cost: f64,
    pub jtj: SMatrix<f64, N, N>,
    pub jtr: SVector<f64, N>,
}

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iterations: usize,
    /// Consecutive rejected steps tolerated away from a stationary point.
    pub max_rejections: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            max_iterations: 50,
            max_rejections: 5,
            gradient_tolerance: 1e-14,
            step_tolerance: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Converged,
    IterationLimit,
    /// Repeated cost increases away from a stationary point, or a non-finite cost.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct LmReport<const N: usize> {
    pub params: SVector<f64, N>,
    pub cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

pub fn minimize<const N: usize>(
    start: SVector<f64, N>,
    mut eval: impl FnMut(&SVector<f64, N>) -> Normal<N>,
    opts: &LmOptions,
) -> LmReport<N> {
    let mut x = start;
    let mut current = eval(&x);
    let mut lambda = opts.initial_lambda;
    let mut history = vec![current.cost];
    let mut rejections = 0;
    if !current.cost.is_finite() {
        return LmReport { params: x, cost: current.cost, cost_history: history, iterations: 0, termination: Termination::Diverged };
    }
    let scale0 = current.cost.max(1e-300);
    for it in 0..opts.max_iterations {
        let grad_norm = current.jtr.amax();
        // cost at round-off level relative to the start
        if current.cost <= 1e-20 * scale0 || grad_norm <= opts.gradient_tolerance * (1.0 + current.cost) {
            return LmReport { params: x, cost: current.cost, cost_history: history, iterations: it, termination: Termination::Converged };
        }
        let max_diag = (0..N).map(|i| current.jtj[(i, i)]).fold(0.0_f64, f64::max).max(1e-300);
        let mut damped = current.jtj;
        for i in 0..N {
            damped[(i, i)] += lambda * current.jtj[(i, i)].max(1e-12 * max_diag);
        }
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&(-current.jtr)),
            None => {
                lambda *= opts.lambda_up;
                rejections += 1;
                if rejections >= opts.max_rejections {
                    return LmReport { params: x, cost: current.cost, cost_history: history, iterations: it, termination: Termination::Diverged };
                }
                continue;
            }
        };
        let candidate = x + step;
        let next = eval(&candidate);
        if next.cost.is_finite() && next.cost <= current.cost {
            let small_step = step.norm() <= opts.step_tolerance * (x.norm() + opts.step_tolerance);
            let small_gain = current.cost - next.cost <= 1e-15 * current.cost;
            x = candidate;
            current = next;
            history.push(current.cost);
            lambda = (lambda / opts.lambda_down).max(1e-12);
            rejections = 0;
            if small_step || small_gain {
                return LmReport { params: x, cost: current.cost, cost_history: history, iterations: it + 1, termination: Termination::Converged };
            }
        } else {
            // gain the local quadratic model promised for this step
            let predicted = -step.dot(&current.jtr) - 0.5 * (step.transpose() * current.jtj * step)[(0, 0)];
            if next.cost.is_finite() && predicted <= 1e-12 * current.cost {
                return LmReport { params: x, cost: current.cost, cost_history: history, iterations: it + 1, termination: Termination::Converged };
            }
            lambda *= opts.lambda_up;
            rejections += 1;
            if rejections >= opts.max_rejections {
                return LmReport { params: x, cost: current.cost, cost_history: history, iterations: it + 1, termination: Termination::Diverged };
            }
        }
    }
    LmReport { params: x, cost: current.cost, cost_history: history, iterations: opts.max_iterations, termination: Termination::IterationLimit }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2};

    fn rosenbrock(p: &Vector2<f64>) -> Normal<2> {
        let r = Vector2::new(10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]);
        let j = Matrix2::new(-20.0 * p[0], 10.0, -1.0, 0.0);
        Normal { cost: 0.5 * r.norm_squared(), jtj: j.transpose() * j, jtr: j.transpose() * r }
    }

    #[test]
    fn solves_rosenbrock_with_monotone_cost() {
        let opts = LmOptions { max_iterations: 200, ..Default::default() };
        let rep = minimize(Vector2::new(-1.2, 1.0), rosenbrock, &opts);
        assert_eq!(rep.termination, Termination::Converged);
        assert!((rep.params - Vector2::new(1.0, 1.0)).norm() < 1e-6);
        assert!(rep.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn linear_problem_converges_quickly() {
        let target = Vector2::new(3.0, -2.0);
        let rep = minimize(
            Vector2::zeros(),
            |p| {
                let r = p - target;
                Normal { cost: 0.5 * r.norm_squared(), jtj: Matrix2::identity(), jtr: r }
            },
            &LmOptions::default(),
        );
        assert!((rep.params - target).norm() < 1e-9);
        assert!(rep.iterations < 10);
    }

    #[test]
    fn non_finite_start_is_divergence() {
        let rep = minimize(
            Vector2::zeros(),
            |_| Normal { cost: f64::NAN, jtj: Matrix2::identity(), jtr: Vector2::zeros() },
            &LmOptions::default(),
        );
        assert_eq!(rep.termination, Termination::Diverged);
    }
}
