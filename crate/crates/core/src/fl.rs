//! Federated gradient descent on a ridge-regression task with pluggable
//! aggregation, plus the per-round descent bound for inexact gradients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{domain, shape, Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::mm_general::MmOptions;
use crate::model::RateBudget;
use crate::seed::{rng_for, seed_stream};
use crate::sim::{self, OptimizerChoice};
use crate::transform::{self, DeviceUpdateBatch};

/// Per-device least squares `‖A_m θ − y_m‖²/(2K_m) + μ‖θ‖²/2`, weighted by
/// `K_m/K` in the global loss.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    designs: Vec<DMatrix<f64>>,
    targets: Vec<DVector<f64>>,
    mu: f64,
}

impl QuadraticTask {
    pub fn new(designs: Vec<DMatrix<f64>>, targets: Vec<DVector<f64>>, mu: f64) -> Result<Self> {
        if designs.is_empty() || designs.len() != targets.len() {
            return Err(shape("need one target per design matrix, at least one device"));
        }
        let n = designs[0].ncols();
        for (a, y) in designs.iter().zip(&targets) {
            if a.ncols() != n || a.nrows() == 0 || a.nrows() != y.len() {
                return Err(shape("design matrices must be K_m×N with matching targets"));
            }
        }
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(domain(format!("regularizer {mu} must be nonnegative")));
        }
        Ok(Self { designs, targets, mu })
    }

    /// Gaussian designs, `y = Aθ₀ + noise` with a shared `θ₀`.
    pub fn random(devices: usize, dim: usize, samples: usize, mu: f64, seed: u64) -> Result<Self> {
        if devices == 0 || dim == 0 || samples == 0 {
            return Err(domain("devices, dim and samples must be positive"));
        }
        let mut rng = rng_for(seed, &["task".into()]);
        let truth = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut designs = Vec::with_capacity(devices);
        let mut targets = Vec::with_capacity(devices);
        for m in 0..devices {
            let mut r = rng_for(seed, &["device".into(), m.into()]);
            let a = DMatrix::from_fn(samples, dim, |_, _| r.sample::<f64, _>(StandardNormal));
            let noise = DVector::from_fn(samples, |_, _| 0.1 * r.sample::<f64, _>(StandardNormal));
            targets.push(&a * &truth + noise);
            designs.push(a);
        }
        Self::new(designs, targets, mu)
    }

    pub fn devices(&self) -> usize {
        self.designs.len()
    }

    pub fn dim(&self) -> usize {
        self.designs[0].ncols()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// `c_m = K_m / K`
    pub fn weights(&self) -> Vec<f64> {
        let total: usize = self.designs.iter().map(|a| a.nrows()).sum();
        self.designs.iter().map(|a| a.nrows() as f64 / total as f64).collect()
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = DMatrix::identity(n, n) * self.mu;
        for (a, c) in self.designs.iter().zip(self.weights()) {
            h += a.transpose() * a * (c / a.nrows() as f64);
        }
        h
    }

    fn check_device(&self, m: usize) -> Result<()> {
        if m >= self.devices() {
            return Err(domain(format!("device {m} out of range")));
        }
        Ok(())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(shape(format!("θ has length {}, task dimension is {}", theta.len(), self.dim())));
        }
        Ok(())
    }

    /// `A_mᵀ(A_m θ − y_m)/K_m + μθ`
    pub fn local_gradient(&self, theta: &[f64], m: usize) -> Result<Vec<f64>> {
        self.check_device(m)?;
        self.check_theta(theta)?;
        let a = &self.designs[m];
        let t = DVector::from_column_slice(theta);
        let g = a.transpose() * (a * &t - &self.targets[m]) / a.nrows() as f64 + t * self.mu;
        Ok(g.iter().copied().collect())
    }

    pub fn local_loss(&self, theta: &[f64], m: usize) -> Result<f64> {
        self.check_device(m)?;
        self.check_theta(theta)?;
        let a = &self.designs[m];
        let t = DVector::from_column_slice(theta);
        let r = a * &t - &self.targets[m];
        Ok(r.norm_squared() / (2.0 * a.nrows() as f64) + 0.5 * self.mu * t.norm_squared())
    }

    pub fn loss(&self, theta: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (m, c) in self.weights().into_iter().enumerate() {
            total += c * self.local_loss(theta, m)?;
        }
        Ok(total)
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        for (m, c) in self.weights().into_iter().enumerate() {
            let gm = self.local_gradient(theta, m)?;
            g.iter_mut().zip(gm).for_each(|(a, b)| *a += c * b);
        }
        Ok(g)
    }

    /// Extreme eigenvalues `(ω, Ω)` of the global Hessian.
    pub fn smoothness_constants(&self) -> Result<(f64, f64)> {
        let ev = symmetric_eigenvalues(&self.hessian());
        let lo = ev.min();
        let hi = ev.max();
        if !(lo > 1e-12 * hi.abs().max(f64::MIN_POSITIVE)) {
            return Err(Error::NotStronglyConvex { min_eigenvalue: lo });
        }
        Ok((lo, hi))
    }

    /// Global minimizer by direct solve.
    pub fn optimum(&self) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut rhs = DVector::zeros(n);
        for ((a, y), c) in self.designs.iter().zip(&self.targets).zip(self.weights()) {
            rhs += a.transpose() * y * (c / a.nrows() as f64);
        }
        let chol = self
            .hessian()
            .cholesky()
            .ok_or(Error::NotStronglyConvex { min_eigenvalue: 0.0 })?;
        Ok(chol.solve(&rhs).iter().copied().collect())
    }
}

/// Output of one aggregation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub estimate: Vec<f64>,
    /// Bits per symbol charged to each device.
    pub rates: Vec<f64>,
}

pub trait Aggregator {
    fn name(&self) -> String;
    fn aggregate(&mut self, updates: &[Vec<f64>], c: &[f64], round: usize) -> Result<Aggregate>;
}

/// Exact weighted sum, charged as raw 64-bit floats.
#[derive(Debug, Clone, Default)]
pub struct ErrorFree;

impl Aggregator for ErrorFree {
    fn name(&self) -> String {
        "error-free".into()
    }

    fn aggregate(&mut self, updates: &[Vec<f64>], c: &[f64], _round: usize) -> Result<Aggregate> {
        Ok(Aggregate {
            estimate: transform::weighted_sum(updates, c)?,
            rates: vec![64.0; updates.len()],
        })
    }
}

#[derive(Debug, Clone)]
pub struct Qsgd {
    pub levels: u32,
    pub seed: u64,
}

impl Aggregator for Qsgd {
    fn name(&self) -> String {
        format!("qsgd:{}", self.levels)
    }

    fn aggregate(&mut self, updates: &[Vec<f64>], c: &[f64], round: usize) -> Result<Aggregate> {
        let mut quantized = Vec::with_capacity(updates.len());
        let mut rates = Vec::with_capacity(updates.len());
        for (m, g) in updates.iter().enumerate() {
            let s = seed_stream(self.seed, &["qsgd".into(), round.into(), m.into()]);
            let (q, bits) = sim::qsgd_quantize(g, self.levels, s)?;
            quantized.push(q);
            rates.push(bits);
        }
        Ok(Aggregate {
            estimate: sim::baseline_aggregate(&quantized, c)?,
            rates,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RotatedUniform {
    pub bits: u32,
    pub seed: u64,
}

impl Aggregator for RotatedUniform {
    fn name(&self) -> String {
        format!("uniform:{}", self.bits)
    }

    fn aggregate(&mut self, updates: &[Vec<f64>], c: &[f64], round: usize) -> Result<Aggregate> {
        let mut quantized = Vec::with_capacity(updates.len());
        let mut rates = Vec::with_capacity(updates.len());
        for (m, g) in updates.iter().enumerate() {
            let s = seed_stream(self.seed, &["uniform".into(), round.into(), m.into()]);
            let (q, bits) = sim::rotated_uniform_quantize(g, self.bits, s)?;
            quantized.push(q);
            rates.push(bits);
        }
        Ok(Aggregate {
            estimate: sim::baseline_aggregate(&quantized, c)?,
            rates,
        })
    }
}

/// MBTC noise-addition surrogate with parameters re-optimized every round
/// on the empirical covariance of that round's updates.
#[derive(Debug, Clone)]
pub struct Mbtc {
    pub budget: RateBudget,
    pub choice: OptimizerChoice,
    pub options: MmOptions,
    pub seed: u64,
}

impl Aggregator for Mbtc {
    fn name(&self) -> String {
        "mbtc".into()
    }

    fn aggregate(&mut self, updates: &[Vec<f64>], c: &[f64], round: usize) -> Result<Aggregate> {
        let batch = DeviceUpdateBatch::prepare(
            updates.to_vec(),
            seed_stream(self.seed, &["rotation".into(), round.into()]),
            transform::DEFAULT_SEGMENT_LEN,
        )?;
        let out = sim::mbtc_aggregate(
            &batch,
            c,
            &self.budget,
            self.choice,
            seed_stream(self.seed, &["mbtc".into(), round.into()]),
            &self.options,
        )?;
        Ok(Aggregate {
            estimate: out.estimate,
            rates: out.rate_report,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundOutcome {
    pub theta: Vec<f64>,
    /// `‖ĝ − g‖²/N`
    pub error_energy: f64,
    pub rates: Vec<f64>,
}

/// One round: local gradients, aggregation, step `θ ← θ − ηĝ`.
pub fn fl_round(
    theta: &[f64],
    task: &QuadraticTask,
    aggregator: &mut dyn Aggregator,
    eta: f64,
    round: usize,
) -> Result<RoundOutcome> {
    let updates = (0..task.devices())
        .map(|m| task.local_gradient(theta, m))
        .collect::<Result<Vec<_>>>()?;
    let c = task.weights();
    let exact = transform::weighted_sum(&updates, &c)?;
    let agg = aggregator.aggregate(&updates, &c, round)?;
    if agg.estimate.len() != exact.len() {
        return Err(shape("aggregator returned a vector of the wrong length"));
    }
    let error_energy = sim::measure_distortion(&exact, &agg.estimate)?;
    let theta = theta.iter().zip(&agg.estimate).map(|(t, g)| t - eta * g).collect();
    Ok(RoundOutcome {
        theta,
        error_energy,
        rates: agg.rates,
    })
}

/// State after `round` rounds. Row 0 is the initial point; row `t ≥ 1`
/// carries the aggregation error of the round that produced `θ^t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub round: usize,
    pub loss_gap: f64,
    pub error_energy: f64,
    /// Recursion `B_t = (1−ω/Ω)B_{t−1} + ‖e‖²/(2Ω)`, `B_0 = L(θ^0) − L*`.
    pub bound: f64,
    /// Closed-form unrolling of the same recursion.
    pub unrolled_bound: f64,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub aggregator: String,
    pub omega: f64,
    pub big_omega: f64,
    pub eta: f64,
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    /// Largest violation of the one-round descent inequality
    /// `gap_{t} ≤ (1−ω/Ω)·gap_{t−1} + ‖e‖²/(2Ω)`; nonpositive when it holds.
    pub fn worst_round_violation(&self, dim: usize) -> f64 {
        let k = 1.0 - self.omega / self.big_omega;
        self.rows
            .windows(2)
            .map(|w| {
                let rhs = k * w[0].loss_gap + w[1].error_energy * dim as f64 / (2.0 * self.big_omega);
                w[1].loss_gap - rhs
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `T` rounds of gradient descent at `η = 1/Ω` from a seeded `θ^0`.
pub fn run_training(task: &QuadraticTask, aggregator: &mut dyn Aggregator, rounds: usize, seed: u64) -> Result<TrainTrace> {
    if rounds == 0 {
        return Err(domain("need at least one round"));
    }
    let (omega, big_omega) = task.smoothness_constants()?;
    let eta = 1.0 / big_omega;
    let k = 1.0 - omega / big_omega;
    let n = task.dim();
    let l_star = task.loss(&task.optimum()?)?;
    let mut rng = rng_for(seed, &["theta0".into()]);
    let mut theta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let gap0 = task.loss(&theta)? - l_star;
    let mut rows = vec![TraceRow {
        round: 0,
        loss_gap: gap0,
        error_energy: 0.0,
        bound: gap0,
        unrolled_bound: gap0,
        rates: Vec::new(),
    }];
    let mut bound = gap0;
    let mut errors: Vec<f64> = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let out = fl_round(&theta, task, aggregator, eta, t)?;
        theta = out.theta;
        let err_sq = out.error_energy * n as f64;
        errors.push(err_sq);
        bound = k * bound + err_sq / (2.0 * big_omega);
        let steps = t + 1;
        let unrolled = k.powi(steps as i32) * gap0
            + errors
                .iter()
                .enumerate()
                .map(|(s, e)| k.powi((steps - 1 - s) as i32) * e / (2.0 * big_omega))
                .sum::<f64>();
        rows.push(TraceRow {
            round: steps,
            loss_gap: task.loss(&theta)? - l_star,
            error_energy: out.error_energy,
            bound,
            unrolled_bound: unrolled,
            rates: out.rates,
        });
    }
    Ok(TrainTrace {
        aggregator: aggregator.name(),
        omega,
        big_omega,
        eta,
        rows,
    })
}

/// `θ_before − θ_after` for `steps` full-batch local gradient steps.
pub fn multi_epoch_local_update(theta: &[f64], task: &QuadraticTask, m: usize, steps: usize, lr: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(domain("need at least one local step"));
    }
    let mut t = theta.to_vec();
    for _ in 0..steps {
        let g = task.local_gradient(&t, m)?;
        t.iter_mut().zip(g).for_each(|(a, b)| *a -= lr * b);
    }
    Ok(theta.iter().zip(&t).map(|(a, b)| a - b).collect())
}
