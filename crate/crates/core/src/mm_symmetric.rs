//! MM optimizer for equicorrelated sources with grouped rate budgets.
//!
//! Devices in a group share one auxiliary-noise variance, so the problem has
//! `J` variables and `Π(M_j+1) − 1` rate constraints indexed by how many
//! devices of each group a subset contains.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::barrier::{minimize_linear, BarrierSettings, ConvexConstraint};
use crate::error::{domain, shape, Error, Result};
use crate::linalg::LOG2_E;
use crate::mm_general::{strictly_feasible_start, MmIteration, MmOptions};
use crate::model::{MbtcParams, SymmetricSourceModel};

/// Upper limit on the number of selection vectors.
pub const MAX_SELECTIONS: usize = 1_000_000;

/// Per-group device counts of a subset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct SelectionVector {
    pub counts: Vec<usize>,
}

impl SelectionVector {
    /// Subset mask of a representative subset: the first `counts[j]`
    /// devices of each group, devices numbered group by group.
    pub fn representative_mask(&self, sizes: &[usize]) -> u32 {
        let mut mask = 0u32;
        let mut offset = 0;
        for (&k, &size) in self.counts.iter().zip(sizes) {
            for i in 0..k {
                mask |= 1 << (offset + i);
            }
            offset += size;
        }
        mask
    }
}

/// Per-group auxiliary-noise variances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupParams {
    pub q_groups: Vec<f64>,
}

impl GroupParams {
    pub fn new(q_groups: Vec<f64>) -> Result<Self> {
        if q_groups.iter().any(|q| !(*q > 0.0) || !q.is_finite()) {
            return Err(domain("group variances must be positive and finite"));
        }
        Ok(Self { q_groups })
    }

    /// Per-device parameters, devices numbered group by group.
    pub fn expand(&self, sizes: &[usize]) -> Result<MbtcParams> {
        if sizes.len() != self.q_groups.len() {
            return Err(shape("group count mismatch"));
        }
        MbtcParams::new(
            self.q_groups
                .iter()
                .zip(sizes)
                .flat_map(|(&q, &n)| std::iter::repeat_n(q, n))
                .collect(),
        )
    }
}

/// All selection vectors with at least one device, in lexicographic order.
pub fn enumerate_selections(sizes: &[usize]) -> Result<Vec<SelectionVector>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(domain("groups must be nonempty"));
    }
    let mut total: usize = 1;
    for &s in sizes {
        total = total
            .checked_mul(s + 1)
            .filter(|&t| t <= MAX_SELECTIONS + 1)
            .ok_or_else(|| Error::Size(format!("more than {MAX_SELECTIONS} selection vectors")))?;
    }
    let mut out = Vec::with_capacity(total - 1);
    let mut counts = vec![0usize; sizes.len()];
    loop {
        // odometer increment, last group fastest
        let mut j = sizes.len();
        loop {
            if j == 0 {
                return Ok(out);
            }
            j -= 1;
            if counts[j] < sizes[j] {
                counts[j] += 1;
                break;
            }
            counts[j] = 0;
        }
        out.push(SelectionVector { counts: counts.clone() });
    }
}

/// Shared scalars of the recast problem: `b = (1−ρ)σ²` and `a = ρσ²`.
#[derive(Debug, Clone, Copy)]
struct Shape {
    a: f64,
    b: f64,
}

impl Shape {
    fn new(rho: f64, sigma2: f64) -> Self {
        Self {
            a: rho * sigma2,
            b: (1.0 - rho) * sigma2,
        }
    }

    /// `½ log2(1 + Σ_j n_j a/(b+q_j))`
    fn log_term(&self, weights: impl Iterator<Item = f64>, q: &[f64]) -> f64 {
        let s: f64 = weights.zip(q).map(|(n, &qj)| n * self.a / (self.b + qj)).sum();
        0.5 * (1.0 + s).log2()
    }

    fn private_term(&self, counts: &[usize], q: &[f64]) -> f64 {
        counts
            .iter()
            .zip(q)
            .map(|(&k, &qj)| 0.5 * k as f64 * (1.0 + self.b / qj).log2())
            .sum()
    }
}

fn check_inputs(sizes: &[usize], q: &[f64], selection: &SelectionVector) -> Result<()> {
    if q.len() != sizes.len() || selection.counts.len() != sizes.len() {
        return Err(shape("group count mismatch"));
    }
    if selection.counts.iter().zip(sizes).any(|(k, s)| k > s) || selection.counts.iter().all(|&k| k == 0) {
        return Err(domain("selection counts must lie in 0..=M_j and not all vanish"));
    }
    if q.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(domain("group variances must be positive and finite"));
    }
    Ok(())
}

fn check_rho_sigma(rho: f64, sigma2: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) || !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(domain(format!("need 0 ≤ ρ < 1 and σ² > 0, got ρ={rho}, σ²={sigma2}")));
    }
    Ok(())
}

/// Conditional (or, when every device is selected, joint) mutual information
/// of a subset with the given per-group counts.
pub fn theta(rho: f64, sigma2: f64, sizes: &[usize], q: &[f64], selection: &SelectionVector) -> Result<f64> {
    check_rho_sigma(rho, sigma2)?;
    check_inputs(sizes, q, selection)?;
    Ok(theta_unchecked(Shape::new(rho, sigma2), sizes, q, &selection.counts))
}

fn theta_unchecked(sh: Shape, sizes: &[usize], q: &[f64], counts: &[usize]) -> f64 {
    sh.private_term(counts, q) + sh.log_term(sizes.iter().map(|&n| n as f64), q)
        - sh.log_term(sizes.iter().zip(counts).map(|(&n, &k)| (n - k) as f64), q)
}

/// `θ` with its concave part replaced by the tangent at `q_hat`.
pub fn theta_up(
    rho: f64,
    sigma2: f64,
    sizes: &[usize],
    q: &[f64],
    selection: &SelectionVector,
    q_hat: &[f64],
) -> Result<f64> {
    check_rho_sigma(rho, sigma2)?;
    check_inputs(sizes, q, selection)?;
    check_inputs(sizes, q_hat, selection)?;
    let c = ThetaUpConstraint::new(Shape::new(rho, sigma2), sizes, &selection.counts, q_hat, 0.0);
    Ok(c.lhs(q))
}

/// `Σ_j M_j / (q_j + (1−ρ)σ²)`, maximized by the optimizer.
pub fn symmetric_objective(rho: f64, sigma2: f64, sizes: &[usize], q: &[f64]) -> Result<f64> {
    check_rho_sigma(rho, sigma2)?;
    if q.len() != sizes.len() {
        return Err(shape("group count mismatch"));
    }
    let b = (1.0 - rho) * sigma2;
    Ok(sizes.iter().zip(q).map(|(&n, &qj)| n as f64 / (qj + b)).sum())
}

/// Distortion of the target `λ·Σ x_m` given the objective value `t`.
pub fn distortion_from_objective(rho: f64, sigma2: f64, devices: usize, lambda: f64, t: f64) -> f64 {
    let m = devices as f64;
    let k = ((m - 1.0) * rho + 1.0) * lambda * sigma2;
    let energy = lambda * lambda * sigma2 * m * (1.0 + (m - 1.0) * rho);
    let explained = if t > 0.0 { k * k / (1.0 / t + rho * sigma2) } else { 0.0 };
    (energy - explained).max(0.0)
}

/// `θ^up(q) ≤ budget` in barrier form.
#[derive(Debug, Clone)]
struct ThetaUpConstraint {
    sh: Shape,
    counts: Vec<f64>,
    sizes: Vec<f64>,
    /// Slope of the linearized (negated) concave term.
    slope: Vec<f64>,
    /// Constant of the linearization.
    offset: f64,
    budget: f64,
}

impl ThetaUpConstraint {
    fn new(sh: Shape, sizes: &[usize], counts: &[usize], q_hat: &[f64], budget: f64) -> Self {
        let rest: Vec<f64> = sizes.iter().zip(counts).map(|(&n, &k)| (n - k) as f64).collect();
        let s: f64 = rest.iter().zip(q_hat).map(|(n, &q)| n * sh.a / (sh.b + q)).sum();
        // minus the gradient of ½ log2(1 + s(q)) at q_hat
        let slope: Vec<f64> = rest
            .iter()
            .zip(q_hat)
            .map(|(n, &q)| 0.5 * LOG2_E * n * sh.a / ((sh.b + q) * (sh.b + q)) / (1.0 + s))
            .collect();
        let at_hat = 0.5 * (1.0 + s).log2();
        let offset = -at_hat - slope.iter().zip(q_hat).map(|(g, q)| g * q).sum::<f64>();
        Self {
            sh,
            counts: counts.iter().map(|&k| k as f64).collect(),
            sizes: sizes.iter().map(|&n| n as f64).collect(),
            slope,
            offset,
            budget,
        }
    }

    fn lhs(&self, q: &[f64]) -> f64 {
        let private: f64 = self
            .counts
            .iter()
            .zip(q)
            .map(|(k, &qj)| 0.5 * k * (1.0 + self.sh.b / qj).log2())
            .sum();
        let linear: f64 = self.slope.iter().zip(q).map(|(g, qj)| g * qj).sum();
        private + self.sh.log_term(self.sizes.iter().copied(), q) + linear + self.offset
    }
}

/// Per-group terms at one point, shared by every selection vector.
struct GroupPoint {
    /// `½ log2(1 + b/q_j)`
    private: Vec<f64>,
    private_grad: Vec<f64>,
    private_hess: Vec<f64>,
    /// `½ log2(1 + s)` with `s = Σ_j M_j a/(b+q_j)`
    joint: f64,
    /// `∂s/∂q_j`
    ds: Vec<f64>,
    d2s: Vec<f64>,
    s: f64,
}

impl ConvexConstraint for ThetaUpConstraint {
    type Shared = GroupPoint;

    fn shared(&self, q: &[f64]) -> GroupPoint {
        let (a, b) = (self.sh.a, self.sh.b);
        let c = 0.5 * LOG2_E;
        let s: f64 = self.sizes.iter().zip(q).map(|(n, &qj)| n * a / (b + qj)).sum();
        GroupPoint {
            private: q.iter().map(|&qj| 0.5 * (1.0 + b / qj).log2()).collect(),
            private_grad: q.iter().map(|&qj| -c * b / (qj * (qj + b))).collect(),
            private_hess: q
                .iter()
                .map(|&qj| c * (1.0 / (qj * qj) - 1.0 / ((qj + b) * (qj + b))))
                .collect(),
            joint: 0.5 * (1.0 + s).log2(),
            ds: self
                .sizes
                .iter()
                .zip(q)
                .map(|(n, &qj)| -n * a / ((b + qj) * (b + qj)))
                .collect(),
            d2s: self
                .sizes
                .iter()
                .zip(q)
                .map(|(n, &qj)| 2.0 * n * a / ((b + qj) * (b + qj) * (b + qj)))
                .collect(),
            s,
        }
    }

    fn value(&self, q: &[f64], p: &GroupPoint) -> f64 {
        let private: f64 = self.counts.iter().zip(&p.private).map(|(k, l)| k * l).sum();
        let linear: f64 = self.slope.iter().zip(q).map(|(g, qj)| g * qj).sum();
        private + p.joint + linear + self.offset - self.budget
    }

    fn gradient(&self, _q: &[f64], p: &GroupPoint, grad: &mut [f64]) {
        let c = 0.5 * LOG2_E / (1.0 + p.s);
        for j in 0..grad.len() {
            grad[j] = self.counts[j] * p.private_grad[j] + c * p.ds[j] + self.slope[j];
        }
    }

    fn add_hessian(&self, q: &[f64], p: &GroupPoint, scale: f64, h: &mut DMatrix<f64>) {
        let s1 = 1.0 + p.s;
        let c = 0.5 * LOG2_E * scale;
        for j in 0..q.len() {
            h[(j, j)] += scale * self.counts[j] * p.private_hess[j] + c * p.d2s[j] / s1;
            for i in 0..q.len() {
                h[(i, j)] -= c * p.ds[i] * p.ds[j] / (s1 * s1);
            }
        }
    }
}

/// Result of the symmetric optimizer. `trace` objectives are values of
/// `symmetric_objective`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetricOutcome {
    pub q_groups: GroupParams,
    pub q: MbtcParams,
    pub distortion: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub constraint_count: usize,
    pub trace: Vec<MmIteration>,
}

struct Problem<'a> {
    sh: Shape,
    rho: f64,
    sigma2: f64,
    lambda: f64,
    devices: usize,
    sizes: Vec<usize>,
    rates: Vec<f64>,
    selections: &'a [SelectionVector],
}

impl Problem<'_> {
    fn budget(&self, s: &SelectionVector) -> f64 {
        s.counts.iter().zip(&self.rates).map(|(&k, r)| k as f64 * r).sum()
    }

    fn worst_slack(&self, q: &[f64]) -> f64 {
        self.selections
            .iter()
            .map(|s| self.budget(s) - theta_unchecked(self.sh, &self.sizes, q, &s.counts))
            .fold(f64::INFINITY, f64::min)
    }

    fn objective(&self, q: &[f64]) -> f64 {
        self.sizes.iter().zip(q).map(|(&n, &qj)| n as f64 / (qj + self.sh.b)).sum()
    }

    fn distortion(&self, t: f64) -> f64 {
        distortion_from_objective(self.rho, self.sigma2, self.devices, self.lambda, t)
    }

    fn record(&self, iteration: usize, q: &[f64]) -> MmIteration {
        let objective = self.objective(q);
        MmIteration {
            iteration,
            objective,
            distortion: self.distortion(objective),
            worst_slack: self.worst_slack(q),
            objective_gap: None,
            constraint_gap: None,
            newton_steps: 0,
        }
    }
}

/// Group-level MM optimizer for target `λ·Σ_m x_m`.
pub fn optimize_symmetric(model: &SymmetricSourceModel, lambda: f64, options: &MmOptions) -> Result<SymmetricOutcome> {
    if lambda == 0.0 || !lambda.is_finite() {
        return Err(domain("λ must be finite and nonzero"));
    }
    let sizes = model.group_sizes();
    let selections = enumerate_selections(&sizes)?;
    let p = Problem {
        sh: Shape::new(model.rho(), model.sigma2()),
        rho: model.rho(),
        sigma2: model.sigma2(),
        lambda,
        devices: model.devices(),
        rates: model.groups().iter().map(|g| g.rate).collect(),
        sizes,
        selections: &selections,
    };
    let j = p.sizes.len();

    let mut alpha = model.sigma2();
    let mut q = vec![alpha; j];
    let mut doublings = 0;
    while p.worst_slack(&q) < -crate::region::FEASIBILITY_TOLERANCE {
        doublings += 1;
        alpha *= 2.0;
        if doublings > 2048 || !alpha.is_finite() {
            return Err(Error::NoConvergence {
                iterations: doublings,
                last_iterate: q,
            });
        }
        q = vec![alpha; j];
    }

    let mut trace = vec![p.record(0, &q)];
    let mut objective = trace[0].objective;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iter {
        let constraints: Vec<ThetaUpConstraint> = selections
            .iter()
            .map(|s| ThetaUpConstraint::new(p.sh, &p.sizes, &s.counts, &q, p.budget(s)))
            .collect();
        let weights: Vec<f64> = p
            .sizes
            .iter()
            .zip(&q)
            .map(|(&n, &qj)| n as f64 / ((qj + p.sh.b) * (qj + p.sh.b)))
            .collect();
        let con_gap = constraints
            .iter()
            .zip(&selections)
            .map(|(c, s)| (c.lhs(&q) - theta_unchecked(p.sh, &p.sizes, &q, &s.counts)).abs())
            .fold(0.0, f64::max);
        // lower bound `offset − wᵀq` on the objective, tangent at q
        let wq: f64 = weights.iter().zip(&q).map(|(w, qj)| w * qj).sum();
        let offset = objective + wq;
        let obj_gap = (offset - wq - p.objective(&q)).abs();
        let last = trace.last_mut().expect("trace starts non-empty");
        last.objective_gap = Some(obj_gap);
        last.constraint_gap = Some(con_gap);

        let start = strictly_feasible_start(&constraints, &q).ok_or_else(|| {
            Error::Precondition("surrogate has no strictly feasible point near the expansion point".into())
        })?;
        let settings = BarrierSettings {
            centering_tolerance: options.solver_tol,
            ..BarrierSettings::default()
        };
        let out = minimize_linear(&weights, &constraints, &start, &settings)?;
        last.newton_steps = out.newton_steps;
        iterations += 1;
        let next_objective = p.objective(&out.q);
        if next_objective < objective {
            converged = true;
            break;
        }
        let increase = (next_objective - objective) / objective;
        q = out.q;
        objective = next_objective;
        trace.push(p.record(iterations, &q));
        if increase < options.eps {
            converged = true;
            break;
        }
    }
    let q_groups = GroupParams::new(q)?;
    Ok(SymmetricOutcome {
        q: q_groups.expand(&p.sizes)?,
        q_groups,
        distortion: p.distortion(objective),
        objective,
        iterations,
        converged,
        constraint_count: selections.len(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeviceGroup;
    use crate::region;
    use crate::test_util::close;

    #[test]
    fn selection_counts() {
        assert_eq!(enumerate_selections(&[3]).unwrap().len(), 3);
        assert_eq!(enumerate_selections(&[2, 2]).unwrap().len(), 8);
        assert_eq!(enumerate_selections(&[2, 2, 2, 2]).unwrap().len(), 80);
        let s = enumerate_selections(&[1, 2]).unwrap();
        let counts: Vec<Vec<usize>> = s.into_iter().map(|v| v.counts).collect();
        assert_eq!(
            counts,
            vec![vec![0, 1], vec![0, 2], vec![1, 0], vec![1, 1], vec![1, 2]]
        );
        assert!(matches!(enumerate_selections(&[999, 999, 999]), Err(Error::Size(_))));
    }

    #[test]
    fn theta_without_correlation() {
        let sel = SelectionVector { counts: vec![2, 1] };
        let v = theta(0.0, 1.0, &[3, 3], &[0.5, 2.0], &sel).unwrap();
        assert!(close(v, 0.5 * 2.0 * 3f64.log2() + 0.5 * 1.5f64.log2(), 1e-14));
        let up = theta_up(0.0, 1.0, &[3, 3], &[0.5, 2.0], &sel, &[0.1, 0.1]).unwrap();
        assert!(close(up, v, 1e-14));
    }

    #[test]
    fn theta_matches_expanded_model() {
        let m = SymmetricSourceModel::new(
            0.9,
            1.0,
            vec![DeviceGroup { size: 3, rate: 1.0 }, DeviceGroup { size: 3, rate: 1.0 }],
        )
        .unwrap();
        let full = m.expand(1.0).unwrap();
        let qg = GroupParams::new(vec![0.2, 0.4]).unwrap();
        let q = qg.expand(&[3, 3]).unwrap();
        for sel in enumerate_selections(&[3, 3]).unwrap() {
            let t = theta(0.9, 1.0, &[3, 3], &qg.q_groups, &sel).unwrap();
            let exact = region::constraint_mutual_info(&full, &q, sel.representative_mask(&[3, 3])).unwrap();
            assert!(close(t, exact, 1e-10), "{sel:?}: {t} vs {exact}");
        }
    }

    #[test]
    fn tangent_bound_is_tight() {
        let sel = SelectionVector { counts: vec![1, 2] };
        let q = [0.3, 0.7];
        let t = theta(0.6, 2.0, &[2, 4], &q, &sel).unwrap();
        let up = theta_up(0.6, 2.0, &[2, 4], &q, &sel, &q).unwrap();
        assert!((t - up).abs() < 1e-12);
        let up = theta_up(0.6, 2.0, &[2, 4], &[0.5, 0.2], &sel, &q).unwrap();
        assert!(up >= theta(0.6, 2.0, &[2, 4], &[0.5, 0.2], &sel).unwrap());
    }

    #[test]
    fn distortion_mapping_matches_region() {
        let m = SymmetricSourceModel::new(0.7, 1.5, vec![DeviceGroup { size: 2, rate: 1.0 }, DeviceGroup { size: 3, rate: 1.0 }])
            .unwrap();
        let full = m.expand(0.3).unwrap();
        let qg = [0.4, 1.3];
        let t = symmetric_objective(0.7, 1.5, &[2, 3], &qg).unwrap();
        let d = distortion_from_objective(0.7, 1.5, 5, 0.3, t);
        let q = GroupParams::new(qg.to_vec()).unwrap().expand(&[2, 3]).unwrap();
        assert!(close(d, region::distortion(&full, &q).unwrap(), 1e-10));
        assert!(close(symmetric_objective(0.0, 1.0, &[4], &[1.0]).unwrap(), 2.0, 1e-15));
    }

    #[test]
    fn scalar_case() {
        let m = SymmetricSourceModel::new(0.0, 1.0, vec![DeviceGroup { size: 1, rate: 1.0 }]).unwrap();
        let out = optimize_symmetric(&m, 1.0, &MmOptions::default()).unwrap();
        assert!((out.distortion - 0.25).abs() < 0.25e-4, "{}", out.distortion);
        assert!(optimize_symmetric(&m, 0.0, &MmOptions::default()).is_err());
    }

    #[test]
    fn lower_rate_group_gets_more_noise() {
        let m = SymmetricSourceModel::new(
            0.5,
            1.0,
            vec![DeviceGroup { size: 5, rate: 0.5 }, DeviceGroup { size: 5, rate: 2.0 }],
        )
        .unwrap();
        let out = optimize_symmetric(&m, 0.1, &MmOptions::default()).unwrap();
        assert!(out.q_groups.q_groups[0] > out.q_groups.q_groups[1]);
        for w in out.trace.windows(2) {
            assert!(w[1].objective >= w[0].objective - 1e-10);
            assert!(w[1].distortion <= w[0].distortion + 1e-10);
        }
    }
}
