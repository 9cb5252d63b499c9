//! Majorization-minimization over the full `2^M − 1` constraint family.
//!
//! Each iteration linearizes the objective `c^T Σ_X (Σ_X+Σ_V)^{-1} Σ_X c`
//! from below (a quadratic-form bound tight at the expansion point) and
//! replaces each mutual-information constraint by a Gaussian cross-entropy
//! upper bound with fixed `(E_S, F_S)` or `G`. Both bounds are tight at the
//! expansion point, so the surrogate feasible set sits inside the original
//! one and the objective never decreases.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::barrier::{max_value, minimize_linear, BarrierSettings, ConvexConstraint};
use crate::error::{domain, shape, Error, Result};
use crate::linalg::{
    block, complement_indices, full_mask, inverse_pd, is_pd, mask_indices, principal, LOG2_E,
};
use crate::model::{GaussianSourceModel, MbtcParams, RateBudget};
use crate::region::{self, MAX_ENUMERATED_DEVICES};

/// `2aᵀb − bᵀBb`, a lower bound on `aᵀB⁻¹a` that is tight at `b = B⁻¹a`.
pub fn lemma1_bound(a: &DVector<f64>, b: &DVector<f64>, big_b: &DMatrix<f64>) -> Result<f64> {
    let n = a.len();
    if b.len() != n || big_b.nrows() != n || big_b.ncols() != n {
        return Err(shape("lemma1_bound: dimension mismatch"));
    }
    if !is_pd(big_b) {
        return Err(domain("lemma1_bound: B is not positive definite"));
    }
    Ok(2.0 * a.dot(b) - (b.transpose() * big_b * b)[(0, 0)])
}

/// Parameters of the Gaussian conditional density used to upper-bound one
/// mutual-information constraint.
#[derive(Debug, Clone, PartialEq)]
pub enum Expansion {
    /// `r(u^S | u^{S^c}) = N(E u^{S^c}, F)` for a proper subset.
    Conditional { e: DMatrix<f64>, f: DMatrix<f64> },
    /// `N(0, G)` for the full set.
    Joint { g: DMatrix<f64> },
}

fn require_finite(q: &[f64]) -> Result<()> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(domain("expansion point must have finite entries"));
    }
    Ok(())
}

fn check_mask(m: usize, mask: u32) -> Result<()> {
    if m > 32 {
        return Err(Error::Size(format!("{m} devices exceed the 32-bit subset mask")));
    }
    if mask == 0 || mask & !full_mask(m) != 0 {
        return Err(domain(format!("subset mask {mask:#b} is empty or out of range")));
    }
    Ok(())
}

/// The expansion that makes the bound tight at `q_hat`:
/// `E_S = Σ^{S,S^c}(Σ^{S^c} + Σ̂_V^{S^c})^{-1}`, `F_S` its Schur complement,
/// and `G = Σ_X + Σ̂_V` for the full set.
pub fn expansion_matrices(model: &GaussianSourceModel, q_hat: &MbtcParams, mask: u32) -> Result<Expansion> {
    let m = model.devices();
    if q_hat.len() != m {
        return Err(shape("expansion point length differs from device count"));
    }
    require_finite(q_hat.values())?;
    check_mask(m, mask)?;
    let sigma = model.sigma_x();
    let qv = q_hat.values();
    if mask == full_mask(m) {
        let mut g = sigma.clone();
        for i in 0..m {
            g[(i, i)] += qv[i];
        }
        return Ok(Expansion::Joint { g });
    }
    let s = mask_indices(mask, m);
    let sc = complement_indices(mask, m);
    let mut k = principal(sigma, &sc);
    for (a, &i) in sc.iter().enumerate() {
        k[(a, a)] += qv[i];
    }
    let cross = block(sigma, &s, &sc);
    let e = &cross * inverse_pd(&k)?;
    let mut f = principal(sigma, &s) - &e * cross.transpose();
    for (a, &i) in s.iter().enumerate() {
        f[(a, a)] += qv[i];
    }
    // symmetrize away round-off from the Schur complement
    let f = (&f + f.transpose()) * 0.5;
    Ok(Expansion::Conditional { e, f })
}

/// Coefficients of the bound as a function of `q`: per-device weights on
/// `q_m` (the `−½ log2 q_m` terms for `m ∈ S` are implicit) and the
/// `q`-independent constant.
fn bound_terms(model: &GaussianSourceModel, mask: u32, expansion: &Expansion) -> Result<(Vec<f64>, f64)> {
    let m = model.devices();
    let sigma = model.sigma_x();
    let mut w = vec![0.0; m];
    match expansion {
        Expansion::Joint { g } => {
            let chol = g.clone().cholesky().ok_or_else(|| domain("G is not positive definite"))?;
            let gi = chol.inverse();
            for i in 0..m {
                w[i] = 0.5 * LOG2_E * gi[(i, i)];
            }
            let log2_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.log2()).sum::<f64>();
            let constant = 0.5 * log2_det + 0.5 * LOG2_E * (gi * sigma).trace() - 0.5 * m as f64 * LOG2_E;
            Ok((w, constant))
        }
        Expansion::Conditional { e, f } => {
            let s = mask_indices(mask, m);
            let sc = complement_indices(mask, m);
            let chol = f.clone().cholesky().ok_or_else(|| domain("F is not positive definite"))?;
            let fi = chol.inverse();
            for (a, &i) in s.iter().enumerate() {
                w[i] = 0.5 * LOG2_E * fi[(a, a)];
            }
            let etfe = e.transpose() * &fi * e;
            for (a, &i) in sc.iter().enumerate() {
                w[i] = 0.5 * LOG2_E * etfe[(a, a)];
            }
            let ss = principal(sigma, &s);
            let cc = principal(sigma, &sc);
            let sc_s = block(sigma, &sc, &s);
            let s_sc = block(sigma, &s, &sc);
            let inner = ss + e * cc * e.transpose() - e * sc_s - s_sc * e.transpose();
            let log2_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.log2()).sum::<f64>();
            let constant = 0.5 * log2_det + 0.5 * LOG2_E * (fi * inner).trace() - 0.5 * s.len() as f64 * LOG2_E;
            Ok((w, constant))
        }
    }
}

fn check_expansion_shape(m: usize, mask: u32, expansion: &Expansion) -> Result<()> {
    let k = mask.count_ones() as usize;
    match expansion {
        Expansion::Joint { g } => {
            if mask != full_mask(m) || g.nrows() != m || g.ncols() != m {
                return Err(shape("G expansion requires the full set and an M×M matrix"));
            }
            if !is_pd(g) {
                return Err(domain("G is not positive definite"));
            }
        }
        Expansion::Conditional { e, f } => {
            if mask == full_mask(m) {
                return Err(shape("(E, F) expansion requires a proper subset"));
            }
            if f.nrows() != k || f.ncols() != k || e.nrows() != k || e.ncols() != m - k {
                return Err(shape("(E, F) dimensions do not match the subset"));
            }
            if !is_pd(f) {
                return Err(domain("F is not positive definite"));
            }
        }
    }
    Ok(())
}

/// `χ_S(E, F, Σ_V) + ξ_S(E, F)` (or the full-set analogue), an upper bound on
/// the constraint's mutual information for any admissible expansion.
pub fn chi_xi(model: &GaussianSourceModel, expansion: &Expansion, q: &MbtcParams, mask: u32) -> Result<f64> {
    let m = model.devices();
    if q.len() != m {
        return Err(shape("q length differs from device count"));
    }
    require_finite(q.values())?;
    check_mask(m, mask)?;
    check_expansion_shape(m, mask, expansion)?;
    let (w, constant) = bound_terms(model, mask, expansion)?;
    let qv = q.values();
    let linear: f64 = w.iter().zip(qv).map(|(a, b)| a * b).sum();
    let logs: f64 = mask_indices(mask, m).iter().map(|&i| qv[i].log2()).sum();
    Ok(linear - 0.5 * logs + constant)
}

/// One convex surrogate constraint:
/// `linear_weightsᵀq − ½ Σ_{m∈S} log2 q_m + constant ≤ budget`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateConstraint {
    pub mask: u32,
    pub linear_weights: Vec<f64>,
    pub log_indices: Vec<usize>,
    pub constant: f64,
    pub budget: f64,
}

impl SurrogateConstraint {
    /// Left-hand side in bits per symbol.
    pub fn lhs(&self, q: &[f64]) -> f64 {
        let linear: f64 = self.linear_weights.iter().zip(q).map(|(a, b)| a * b).sum();
        let logs: f64 = self.log_indices.iter().map(|&i| q[i].log2()).sum();
        linear - 0.5 * logs + self.constant
    }
}

/// `(log2 q_m, 1/q_m)` per device.
pub(crate) struct LogPoint {
    log2: Vec<f64>,
    recip: Vec<f64>,
}

impl ConvexConstraint for SurrogateConstraint {
    type Shared = LogPoint;

    fn shared(&self, q: &[f64]) -> LogPoint {
        LogPoint {
            log2: q.iter().map(|v| v.log2()).collect(),
            recip: q.iter().map(|v| 1.0 / v).collect(),
        }
    }

    fn value(&self, q: &[f64], p: &LogPoint) -> f64 {
        let linear: f64 = self.linear_weights.iter().zip(q).map(|(a, b)| a * b).sum();
        let logs: f64 = self.log_indices.iter().map(|&i| p.log2[i]).sum();
        linear - 0.5 * logs + self.constant - self.budget
    }

    fn gradient(&self, _q: &[f64], p: &LogPoint, grad: &mut [f64]) {
        grad.copy_from_slice(&self.linear_weights);
        for &i in &self.log_indices {
            grad[i] -= 0.5 * LOG2_E * p.recip[i];
        }
    }

    fn add_hessian(&self, _q: &[f64], p: &LogPoint, scale: f64, h: &mut DMatrix<f64>) {
        for &i in &self.log_indices {
            h[(i, i)] += scale * 0.5 * LOG2_E * p.recip[i] * p.recip[i];
        }
    }
}

/// Convex subproblem: minimize `Σ_m b_m² q_m` subject to the surrogate
/// constraints. The original objective is bounded below by
/// `objective_offset − Σ_m b_m² q_m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateProblem {
    pub objective_weights: Vec<f64>,
    pub objective_offset: f64,
    pub constraints: Vec<SurrogateConstraint>,
    pub expansion_point: Vec<f64>,
}

impl SurrogateProblem {
    /// Lower bound on `c^T Σ_X (Σ_X+Σ_V)^{-1} Σ_X c` at `q`.
    pub fn lower_bound_objective(&self, q: &[f64]) -> f64 {
        self.objective_offset - self.objective_weights.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn is_strictly_feasible(&self, q: &[f64]) -> bool {
        self.constraints.iter().all(|c| c.lhs(q) < c.budget)
    }
}

/// Builds the surrogate problem expanded at a feasible `q_hat`.
pub fn build_surrogate(
    model: &GaussianSourceModel,
    budget: &RateBudget,
    q_hat: &MbtcParams,
) -> Result<SurrogateProblem> {
    let m = model.devices();
    require_finite(q_hat.values())?;
    let feas = region::is_feasible(model, q_hat, budget)?;
    if !feas.feasible {
        return Err(Error::Precondition(format!(
            "expansion point violates constraint {:#b} by {:e} bits",
            feas.binding_mask, -feas.worst_slack
        )));
    }
    let sigma = model.sigma_x();
    let mut g = sigma.clone();
    for i in 0..m {
        g[(i, i)] += q_hat.values()[i];
    }
    let sxc = sigma * model.c();
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| domain("Σ_X + Σ̂_V is not positive definite"))?;
    let b = chol.solve(&sxc);
    let objective_weights: Vec<f64> = b.iter().map(|v| v * v).collect();
    let objective_offset = 2.0 * sxc.dot(&b) - (b.transpose() * sigma * &b)[(0, 0)];

    let full = full_mask(m);
    let mut constraints = Vec::with_capacity(full as usize);
    for mask in 1..=full {
        let expansion = expansion_matrices(model, q_hat, mask)?;
        let (linear_weights, constant) = bound_terms(model, mask, &expansion)?;
        constraints.push(SurrogateConstraint {
            mask,
            linear_weights,
            log_indices: mask_indices(mask, m),
            constant,
            budget: budget.subset_sum(mask),
        });
    }
    Ok(SurrogateProblem {
        objective_weights,
        objective_offset,
        constraints,
        expansion_point: q_hat.values().to_vec(),
    })
}

/// Scales `q` up until every constraint has strictly positive slack. Along
/// `q̂` every bound decreases to first order, because the bound shares its
/// gradient with the mutual information it majorizes.
pub(crate) fn strictly_feasible_start<C: ConvexConstraint>(constraints: &[C], q: &[f64]) -> Option<Vec<f64>> {
    if max_value(constraints, q) < 0.0 {
        return Some(q.to_vec());
    }
    let mut delta = 1e-12;
    while delta <= 1.0 {
        let trial: Vec<f64> = q.iter().map(|v| v * (1.0 + delta)).collect();
        if max_value(constraints, &trial) < 0.0 {
            return Some(trial);
        }
        delta *= 4.0;
    }
    None
}

/// Solves the convex subproblem with the barrier method.
pub fn solve_surrogate(problem: &SurrogateProblem, tol: f64) -> Result<MbtcParams> {
    solve_surrogate_detailed(problem, tol).map(|(q, _)| q)
}

pub(crate) fn solve_surrogate_detailed(problem: &SurrogateProblem, tol: f64) -> Result<(MbtcParams, usize)> {
    let start = strictly_feasible_start(&problem.constraints, &problem.expansion_point).ok_or_else(|| {
        Error::Precondition("surrogate has no strictly feasible point near the expansion point".into())
    })?;
    let settings = BarrierSettings {
        centering_tolerance: tol,
        ..BarrierSettings::default()
    };
    let out = minimize_linear(&problem.objective_weights, &problem.constraints, &start, &settings)?;
    Ok((MbtcParams::new(out.q)?, out.newton_steps))
}

/// Uniform `q = α·1`, doubling `α` from `trace(Σ_X)/M` until feasible.
pub fn find_feasible_init(model: &GaussianSourceModel, budget: &RateBudget) -> Result<MbtcParams> {
    let m = model.devices();
    let mut alpha = model.sigma_x().trace() / m as f64;
    if !(alpha > 0.0) {
        alpha = 1.0;
    }
    for _ in 0..2048 {
        let q = MbtcParams::uniform(m, alpha)?;
        if region::is_feasible(model, &q, budget)?.feasible {
            return Ok(q);
        }
        alpha *= 2.0;
        if !alpha.is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence {
        iterations: 2048,
        last_iterate: vec![alpha; m],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MmOptions {
    /// Stop when the fractional objective increase falls below this.
    pub eps: f64,
    pub max_iter: usize,
    /// Centering tolerance of the convex subproblem solver.
    pub solver_tol: f64,
}

impl Default for MmOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_iter: 200,
            solver_tol: 1e-8,
        }
    }
}

/// State of one MM iterate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmIteration {
    pub iteration: usize,
    /// The algorithm's own objective (maximized).
    pub objective: f64,
    pub distortion: f64,
    /// Worst rate slack of the iterate against the exact constraints.
    pub worst_slack: f64,
    /// `|surrogate − exact|` of the objective at this expansion point, when a
    /// surrogate was built here.
    pub objective_gap: Option<f64>,
    /// Largest `|surrogate − exact|` over all constraints at this expansion point.
    pub constraint_gap: Option<f64>,
    /// Newton steps spent on the subproblem expanded here.
    pub newton_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmOutcome {
    pub q: MbtcParams,
    pub distortion: f64,
    pub objective: f64,
    /// Number of surrogate problems solved.
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<MmIteration>,
}

/// General-case MM optimizer.
pub fn optimize(model: &GaussianSourceModel, budget: &RateBudget, options: &MmOptions) -> Result<MmOutcome> {
    let m = model.devices();
    if m > MAX_ENUMERATED_DEVICES {
        return Err(Error::Size(format!(
            "{m} devices: the general algorithm enumerates 2^M constraints and is capped at {MAX_ENUMERATED_DEVICES}"
        )));
    }
    if budget.len() != m {
        return Err(shape(format!("{} rates for a {m}-device model", budget.len())));
    }
    let mut q = find_feasible_init(model, budget)?;
    let mut objective = region::explained_energy(model, &q)?;
    let mut trace = vec![MmIteration {
        iteration: 0,
        objective,
        distortion: region::distortion(model, &q)?,
        worst_slack: region::is_feasible(model, &q, budget)?.worst_slack,
        objective_gap: None,
        constraint_gap: None,
        newton_steps: 0,
    }];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iter {
        let problem = build_surrogate(model, budget, &q)?;
        let (obj_gap, con_gap) = tightness(model, &problem, &q, objective)?;
        let last = trace.last_mut().expect("trace starts non-empty");
        last.objective_gap = Some(obj_gap);
        last.constraint_gap = Some(con_gap);

        let (next, steps) = solve_surrogate_detailed(&problem, options.solver_tol)?;
        last.newton_steps = steps;
        iterations += 1;
        let next_objective = region::explained_energy(model, &next)?;
        if objective <= 0.0 {
            // degenerate zero-energy target: nothing to improve
            converged = true;
            break;
        }
        if next_objective < objective {
            // barrier suboptimality exceeds the remaining progress
            converged = true;
            break;
        }
        let increase = (next_objective - objective) / objective;
        q = next;
        objective = next_objective;
        trace.push(MmIteration {
            iteration: iterations,
            objective,
            distortion: region::distortion(model, &q)?,
            worst_slack: region::is_feasible(model, &q, budget)?.worst_slack,
            objective_gap: None,
            constraint_gap: None,
            newton_steps: 0,
        });
        if increase < options.eps {
            converged = true;
            break;
        }
    }
    Ok(MmOutcome {
        distortion: region::distortion(model, &q)?,
        objective,
        q,
        iterations,
        converged,
        trace,
    })
}

fn tightness(
    model: &GaussianSourceModel,
    problem: &SurrogateProblem,
    q: &MbtcParams,
    objective: f64,
) -> Result<(f64, f64)> {
    let obj_gap = (problem.lower_bound_objective(q.values()) - objective).abs();
    let mut con_gap: f64 = 0.0;
    for c in &problem.constraints {
        let exact = region::constraint_mutual_info(model, q, c.mask)?;
        con_gap = con_gap.max((c.lhs(q.values()) - exact).abs());
    }
    Ok((obj_gap, con_gap))
}
