//! Closed-form quantities of the Gaussian inner rate-distortion region.
//!
//! With auxiliaries `U_m = X_m + V_m`, `V_m ~ N(0, q_m)` independent, every
//! rate constraint is a log-determinant ratio and the distortion is the MMSE
//! of estimating `c^T x` from `u`. Subsets of devices are bitmasks: bit `m`
//! set means device `m` (zero-based) is in `S`.
//!
//! A device with `q_m = +∞` is silent: its coordinate is removed before any
//! matrix is formed, which is the exact limit of every formula here.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{domain, shape, Error, Result};
use crate::linalg::{full_mask, log2_det_pd, principal, solve_pd, subvector};
use crate::model::{GaussianSourceModel, MbtcParams, RateBudget};

/// Largest device count for which all `2^M - 1` constraints are enumerated.
pub const MAX_ENUMERATED_DEVICES: usize = 25;

/// Slack tolerance for feasibility verdicts, bits/symbol.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;

fn check_dims(model: &GaussianSourceModel, q: &MbtcParams) -> Result<()> {
    if q.len() != model.devices() {
        return Err(shape(format!(
            "{} MBTC parameters for a {}-device model",
            q.len(),
            model.devices()
        )));
    }
    Ok(())
}

fn active_devices(q: &MbtcParams) -> Vec<usize> {
    q.values()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, _)| i)
        .collect()
}

/// `log2 det(Σ_X^A + Σ_V^A)` over an index set of active devices.
fn log2_det_observed(model: &GaussianSourceModel, q: &MbtcParams, idx: &[usize]) -> Result<f64> {
    let mut a = principal(model.sigma_x(), idx);
    for (k, &i) in idx.iter().enumerate() {
        a[(k, k)] += q.values()[i];
    }
    log2_det_pd(&a)
}

/// `I(x^S; u^S | u^{S^c})` in bits per symbol, for a nonempty proper subset.
pub fn cond_mutual_info(model: &GaussianSourceModel, q: &MbtcParams, mask: u32) -> Result<f64> {
    check_dims(model, q)?;
    let m = model.devices();
    if m > 32 {
        return Err(Error::Size(format!("{m} devices exceed the 32-bit subset mask")));
    }
    let full = full_mask(m);
    if mask == 0 || mask & !full != 0 {
        return Err(domain(format!("subset mask {mask:#b} is empty or out of range")));
    }
    if mask == full {
        return Err(domain("full device set: use sum_mutual_info"));
    }
    Ok(cond_mi_unchecked(model, q, mask))
}

pub(crate) fn cond_mi_unchecked(model: &GaussianSourceModel, q: &MbtcParams, mask: u32) -> f64 {
    let active = active_devices(q);
    let in_s: Vec<usize> = active.iter().copied().filter(|&i| mask & (1 << i) != 0).collect();
    if in_s.is_empty() {
        return 0.0;
    }
    let rest: Vec<usize> = active.iter().copied().filter(|&i| mask & (1 << i) == 0).collect();
    let qv = q.values();
    // q > 0 and Σ_X PSD make every determinant here positive.
    let joint = log2_det_observed(model, q, &active).expect("Σ_X + Σ_V is positive definite");
    let cond = log2_det_observed(model, q, &rest).expect("Σ_X + Σ_V is positive definite");
    let noise: f64 = in_s.iter().map(|&i| qv[i].log2()).sum();
    (0.5 * (joint - cond - noise)).max(0.0)
}

/// `I(x; u)` in bits per symbol.
pub fn sum_mutual_info(model: &GaussianSourceModel, q: &MbtcParams) -> Result<f64> {
    check_dims(model, q)?;
    Ok(sum_mi_unchecked(model, q))
}

pub(crate) fn sum_mi_unchecked(model: &GaussianSourceModel, q: &MbtcParams) -> f64 {
    let active = active_devices(q);
    if active.is_empty() {
        return 0.0;
    }
    let joint = log2_det_observed(model, q, &active).expect("Σ_X + Σ_V is positive definite");
    let noise: f64 = active.iter().map(|&i| q.values()[i].log2()).sum();
    (0.5 * (joint - noise)).max(0.0)
}

/// Mutual information of the constraint indexed by `mask`; the full mask is
/// the sum-rate constraint.
pub fn constraint_mutual_info(model: &GaussianSourceModel, q: &MbtcParams, mask: u32) -> Result<f64> {
    if mask == full_mask(model.devices()) {
        sum_mutual_info(model, q)
    } else {
        cond_mutual_info(model, q, mask)
    }
}

/// MMSE combiner `w^T = c^T Σ_X (Σ_X + Σ_V)^{-1}`; silent devices get weight 0.
pub fn mmse_combiner(model: &GaussianSourceModel, q: &MbtcParams) -> Result<DVector<f64>> {
    check_dims(model, q)?;
    let m = model.devices();
    let mut w = DVector::zeros(m);
    if model.target_energy() <= 0.0 {
        return Ok(w);
    }
    let active = active_devices(q);
    if active.is_empty() {
        return Ok(w);
    }
    let mut a = principal(model.sigma_x(), &active);
    for (k, &i) in active.iter().enumerate() {
        a[(k, k)] += q.values()[i];
    }
    let sxc = model.sigma_x() * model.c();
    let wa = solve_pd(&a, &subvector(&sxc, &active))?;
    for (k, &i) in active.iter().enumerate() {
        w[i] = wa[k];
    }
    Ok(w)
}

/// Aggregation distortion `v(q) = c^T Σ_X c - c^T Σ_X (Σ_X + Σ_V)^{-1} Σ_X c`.
pub fn distortion(model: &GaussianSourceModel, q: &MbtcParams) -> Result<f64> {
    let energy = model.target_energy();
    if energy <= 0.0 {
        return Ok(0.0);
    }
    Ok((energy - explained_energy(model, q)?).max(0.0))
}

/// `c^T Σ_X (Σ_X + Σ_V)^{-1} Σ_X c`, the quantity the optimizers maximize.
pub fn explained_energy(model: &GaussianSourceModel, q: &MbtcParams) -> Result<f64> {
    let w = mmse_combiner(model, q)?;
    let sxc = model.sigma_x() * model.c();
    Ok(w.dot(&sxc))
}

/// One row of a feasibility report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstraintSlack {
    pub subset_mask: u32,
    pub required_bits: f64,
    pub budget_bits: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Feasibility {
    pub feasible: bool,
    pub worst_slack: f64,
    /// Constraint attaining `worst_slack`; the lowest mask wins ties.
    pub binding_mask: u32,
    /// One row per nonempty subset, masks ascending; the last is the sum-rate row.
    pub constraints: Vec<ConstraintSlack>,
}

/// Checks every rate constraint `Σ_{m∈S} r_m ≥ I_S(q)`.
pub fn is_feasible(model: &GaussianSourceModel, q: &MbtcParams, budget: &RateBudget) -> Result<Feasibility> {
    check_dims(model, q)?;
    let m = model.devices();
    if budget.len() != m {
        return Err(shape(format!("{} rates for a {m}-device model", budget.len())));
    }
    if m > MAX_ENUMERATED_DEVICES {
        return Err(Error::Size(format!(
            "{m} devices: constraint enumeration is capped at {MAX_ENUMERATED_DEVICES}"
        )));
    }
    let full = full_mask(m);
    let mut constraints = Vec::with_capacity(full as usize);
    let mut worst = f64::INFINITY;
    let mut binding = 1;
    for mask in 1..=full {
        let required = if mask == full {
            sum_mi_unchecked(model, q)
        } else {
            cond_mi_unchecked(model, q, mask)
        };
        let budget_bits = budget.subset_sum(mask);
        let slack = budget_bits - required;
        if slack < worst {
            worst = slack;
            binding = mask;
        }
        constraints.push(ConstraintSlack {
            subset_mask: mask,
            required_bits: required,
            budget_bits,
            slack,
        });
    }
    Ok(Feasibility {
        feasible: worst >= -FEASIBILITY_TOLERANCE,
        worst_slack: worst,
        binding_mask: binding,
        constraints,
    })
}

/// Gaussian rate-distortion point for one source: `(q*, D*)` at rate `r`.
pub fn single_source_rd(sigma2: f64, rate: f64) -> Result<(f64, f64)> {
    if !(rate > 0.0) {
        return Err(domain(format!("rate {rate} must be positive")));
    }
    if !(sigma2 > 0.0) {
        return Err(domain(format!("variance {sigma2} must be positive")));
    }
    let gain = (2.0 * rate).exp2();
    Ok((sigma2 / (gain - 1.0), sigma2 / gain))
}

/// All region quantities at one parameter point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionEvaluation {
    pub sum_rate: f64,
    /// Keyed by subset mask, proper nonempty subsets only.
    pub conditional_rates: BTreeMap<u32, f64>,
    pub distortion: f64,
    pub combiner: Vec<f64>,
}

pub fn evaluate(model: &GaussianSourceModel, q: &MbtcParams) -> Result<RegionEvaluation> {
    check_dims(model, q)?;
    let m = model.devices();
    if m > MAX_ENUMERATED_DEVICES {
        return Err(Error::Size(format!("{m} devices exceed the enumeration cap")));
    }
    let full = full_mask(m);
    let conditional_rates = (1..full).map(|mask| (mask, cond_mi_unchecked(model, q, mask))).collect();
    Ok(RegionEvaluation {
        sum_rate: sum_mi_unchecked(model, q),
        conditional_rates,
        distortion: distortion(model, q)?,
        combiner: mmse_combiner(model, q)?.iter().copied().collect(),
    })
}
