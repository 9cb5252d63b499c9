//! Primal log-barrier interior-point method for small dense problems of the
//! form
//!
//! ```text
//! minimize    wᵀq
//! subject to  g_i(q) ≤ 0,   q_m ≥ lower
//! ```
//!
//! with smooth convex `g_i`. Newton centering with backtracking line search,
//! barrier parameter multiplied by a constant factor per outer stage.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A smooth convex inequality `g(q) ≤ 0`.
pub(crate) trait ConvexConstraint {
    /// Quantities at `q` common to every constraint of one family, computed
    /// once per point.
    type Shared;
    fn shared(&self, q: &[f64]) -> Self::Shared;
    fn value(&self, q: &[f64], shared: &Self::Shared) -> f64;
    fn gradient(&self, q: &[f64], shared: &Self::Shared, grad: &mut [f64]);
    /// `h += scale · ∇²g(q)`
    fn add_hessian(&self, q: &[f64], shared: &Self::Shared, scale: f64, h: &mut DMatrix<f64>);
}

/// Largest constraint value at `q`, `-∞` for an empty family.
pub(crate) fn max_value<C: ConvexConstraint>(constraints: &[C], q: &[f64]) -> f64 {
    let Some(first) = constraints.first() else {
        return f64::NEG_INFINITY;
    };
    let shared = first.shared(q);
    constraints
        .iter()
        .map(|c| c.value(q, &shared))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierSettings {
    /// Stop once `(#constraints) / t` falls below this.
    pub gap_tolerance: f64,
    /// Centering stops when half the squared Newton decrement is below this.
    pub centering_tolerance: f64,
    pub max_newton_steps: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub growth: f64,
    pub initial_t: f64,
    pub lower: f64,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        Self {
            gap_tolerance: 1e-9,
            centering_tolerance: 1e-8,
            max_newton_steps: 500,
            armijo: 0.25,
            backtrack: 0.5,
            growth: 10.0,
            initial_t: 1.0,
            lower: crate::model::Q_MIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BarrierOutcome {
    pub q: Vec<f64>,
    pub newton_steps: usize,
    /// Duality-gap bound `(#constraints)/t` in the normalized objective.
    pub gap: f64,
}

struct Barrier<'a, C> {
    weights: Vec<f64>,
    constraints: &'a [C],
    lower: f64,
}

impl<C: ConvexConstraint> Barrier<'_, C> {
    fn strictly_feasible(&self, q: &[f64]) -> bool {
        q.iter().all(|&v| v > self.lower && v.is_finite()) && max_value(self.constraints, q) < 0.0
    }

    /// `t·wᵀq − Σ log(−g_i) − Σ log(q_m − lower)`; infinite outside the domain.
    fn phi(&self, t: f64, q: &[f64]) -> f64 {
        let mut total = t * dot(&self.weights, q);
        for &v in q {
            let d = v - self.lower;
            if d <= 0.0 {
                return f64::INFINITY;
            }
            total -= d.ln();
        }
        let Some(first) = self.constraints.first() else {
            return total;
        };
        let shared = first.shared(q);
        for c in self.constraints {
            let g = c.value(q, &shared);
            if !(g < 0.0) {
                return f64::INFINITY;
            }
            total -= (-g).ln();
        }
        total
    }

    fn derivatives(&self, t: f64, q: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = q.len();
        let mut grad = DVector::from_iterator(n, self.weights.iter().map(|w| t * w));
        let mut hess = DMatrix::zeros(n, n);
        for (m, &v) in q.iter().enumerate() {
            let d = v - self.lower;
            grad[m] -= 1.0 / d;
            hess[(m, m)] += 1.0 / (d * d);
        }
        let Some(first) = self.constraints.first() else {
            return (grad, hess);
        };
        let shared = first.shared(q);
        let mut cg = vec![0.0; n];
        for c in self.constraints {
            let s = -c.value(q, &shared);
            c.gradient(q, &shared, &mut cg);
            for i in 0..n {
                grad[i] += cg[i] / s;
            }
            let h = hess.as_mut_slice();
            for (j, col) in h.chunks_exact_mut(n).enumerate() {
                let f = cg[j] / (s * s);
                if f != 0.0 {
                    col.iter_mut().zip(&cg).for_each(|(a, b)| *a += b * f);
                }
            }
            c.add_hessian(q, &shared, 1.0 / s, &mut hess);
        }
        (grad, hess)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn newton_direction(grad: &DVector<f64>, hess: DMatrix<f64>) -> Option<DVector<f64>> {
    let n = grad.len();
    let scale = (0..n).map(|i| hess[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = 0.0;
    for _ in 0..8 {
        let mut h = hess.clone();
        for i in 0..n {
            h[(i, i)] += reg;
        }
        if let Some(ch) = h.cholesky() {
            return Some(-ch.solve(grad));
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    None
}

/// Minimizes `weightsᵀq` over the constraint set, starting from a strictly
/// feasible `start`.
pub(crate) fn minimize_linear<C: ConvexConstraint>(
    weights: &[f64],
    constraints: &[C],
    start: &[f64],
    settings: &BarrierSettings,
) -> Result<BarrierOutcome> {
    // normalize so the objective is 1 at the start point
    let at_start = dot(weights, start).abs();
    let norm = if at_start > 0.0 { at_start } else { 1.0 };
    let problem = Barrier {
        weights: weights.iter().map(|w| w / norm).collect(),
        constraints,
        lower: settings.lower,
    };
    if !problem.strictly_feasible(start) {
        return Err(Error::Precondition("barrier start point is not strictly feasible".into()));
    }
    let count = (constraints.len() + start.len()) as f64;
    let mut q = start.to_vec();
    let mut t = settings.initial_t;
    let mut steps = 0usize;
    let mut trial = vec![0.0; q.len()];
    loop {
        loop {
            let (grad, hess) = problem.derivatives(t, &q);
            let Some(dir) = newton_direction(&grad, hess) else {
                return Err(Error::NoConvergence {
                    iterations: steps,
                    last_iterate: q,
                });
            };
            let slope = grad.dot(&dir);
            if -slope / 2.0 <= settings.centering_tolerance {
                break;
            }
            if steps >= settings.max_newton_steps {
                return Err(Error::NoConvergence {
                    iterations: steps,
                    last_iterate: q,
                });
            }
            steps += 1;
            let current = problem.phi(t, &q);
            let mut step = 1.0;
            let mut accepted = false;
            while step > 1e-30 {
                for i in 0..q.len() {
                    trial[i] = q[i] + step * dir[i];
                }
                let value = problem.phi(t, &trial);
                // strict decrease: at large t rounding can make a zero-progress step pass Armijo
                if value.is_finite() && value < current && value <= current + settings.armijo * step * slope {
                    accepted = true;
                    break;
                }
                step *= settings.backtrack;
            }
            if !accepted {
                // no progress possible at this precision; treat as centered
                break;
            }
            q.copy_from_slice(&trial);
        }
        if count / t < settings.gap_tolerance {
            return Ok(BarrierOutcome {
                q,
                newton_steps: steps,
                gap: count / t,
            });
        }
        t *= settings.growth;
    }
}
