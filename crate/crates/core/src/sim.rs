//! Aggregation simulator: the noise-addition surrogate of the MBTC decoder
//! output, baseline quantizers, and distortion measurement.
//!
//! The MBTC pipeline does not emit codewords. Each device's message is
//! replaced by `x_m + v_m` with `v_m ~ N(0, q_m I)` and the rate is charged
//! analytically as mutual information at `q`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{domain, shape, Error, Result};
use crate::linalg::full_mask;
use crate::mm_general::{self, MmOptions};
use crate::mm_symmetric::optimize_symmetric;
use crate::model::{empirical_covariance, validate_psd, DeviceGroup, GaussianSourceModel, MbtcParams, RateBudget};
use crate::model::SymmetricSourceModel;
use crate::region;
use crate::seed::{rng_for, seed_stream};
use crate::transform::{self, MixtureSpec, DeviceUpdateBatch};

/// Largest `M` for which the rate report is reduced to a corner point.
pub const MAX_RATE_REPORT_DEVICES: usize = 20;

/// `y_m = √ρ·s + √(1−ρ)·w_m` with i.i.d. standard Gaussian `s`, `w_m`.
pub fn synthetic_sources(rho: f64, m: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    transform::mixture_sources(&MixtureSpec::common_plus_private(rho, m)?, n, seed)
}

/// Decoder output of the noise-addition surrogate: `wᵀ(x + v)` per element.
pub fn mbtc_noise_surrogate(
    x: &[Vec<f64>],
    model: &GaussianSourceModel,
    q: &MbtcParams,
    seed: u64,
) -> Result<Vec<f64>> {
    let m = model.devices();
    if x.len() != m || q.len() != m {
        return Err(shape(format!("{} vectors and {} parameters for {m} devices", x.len(), q.len())));
    }
    let n = x[0].len();
    if x.iter().any(|v| v.len() != n) {
        return Err(shape("vectors differ in length"));
    }
    let w = region::mmse_combiner(model, q)?;
    let mut out = vec![0.0; n];
    for (i, xi) in x.iter().enumerate() {
        let qi = q.values()[i];
        if !qi.is_finite() || w[i] == 0.0 {
            continue;
        }
        let sd = qi.sqrt();
        let mut rng = rng_for(seed, &["noise".into(), i.into()]);
        for (o, &v) in out.iter_mut().zip(xi) {
            let z: f64 = rng.sample(StandardNormal);
            *o += w[i] * (v + sd * z);
        }
    }
    Ok(out)
}

/// `‖target − estimate‖² / N`
pub fn measure_distortion(target: &[f64], estimate: &[f64]) -> Result<f64> {
    if target.len() != estimate.len() {
        return Err(shape(format!("lengths {} and {}", target.len(), estimate.len())));
    }
    if target.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = target.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / target.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OptimizerChoice {
    General,
    /// Fits an equicorrelated model and groups devices by equal budget.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregationResult {
    pub target: Vec<f64>,
    pub estimate: Vec<f64>,
    pub empirical_distortion: f64,
    /// Bits per symbol charged to each device.
    pub rate_report: Vec<f64>,
    /// Parameters used by the noise surrogate, when there was any signal.
    pub q: Option<MbtcParams>,
    /// `v(q)` under the empirical covariance.
    pub predicted_distortion: f64,
}

/// Per-device rates on the sum-rate face of the rate region at `q`,
/// obtained by lowering each budget entry in device order as far as every
/// subset constraint allows.
pub fn corner_rates(model: &GaussianSourceModel, q: &MbtcParams, budget: &RateBudget) -> Result<Vec<f64>> {
    let m = model.devices();
    if m > MAX_RATE_REPORT_DEVICES {
        return Ok(budget.rates().to_vec());
    }
    let feas = region::is_feasible(model, q, budget)?;
    let required: Vec<f64> = feas.constraints.iter().map(|c| c.required_bits).collect();
    let mut r = budget.rates().to_vec();
    for dev in 0..m {
        let bit = 1u32 << dev;
        let mut room = r[dev];
        for mask in (1..=full_mask(m)).filter(|s| s & bit != 0) {
            let sum: f64 = (0..m).filter(|i| mask & (1 << i) != 0).map(|i| r[i]).sum();
            room = room.min(sum - required[mask as usize - 1]);
        }
        r[dev] -= room.max(0.0);
    }
    Ok(r)
}

/// Average covariance entries: `(ρ, σ²)` of the closest equicorrelated model.
fn fit_symmetric(sigma: &nalgebra::DMatrix<f64>) -> (f64, f64) {
    let m = sigma.nrows();
    let sigma2 = sigma.trace() / m as f64;
    if m == 1 || sigma2 <= 0.0 {
        return (0.0, sigma2);
    }
    let off = (sigma.sum() - sigma.trace()) / (m * (m - 1)) as f64;
    ((off / sigma2).clamp(0.0, 1.0 - 1e-9), sigma2)
}

fn optimize_params(
    model: &GaussianSourceModel,
    budget: &RateBudget,
    choice: OptimizerChoice,
    options: &MmOptions,
) -> Result<MbtcParams> {
    match choice {
        OptimizerChoice::General => Ok(mm_general::optimize(model, budget, options)?.q),
        OptimizerChoice::Symmetric => {
            let c = model.c();
            let lambda = c[0];
            if c.iter().any(|&v| v != lambda) {
                return Err(Error::Precondition("symmetric optimizer needs equal target coefficients".into()));
            }
            let (rho, sigma2) = fit_symmetric(model.sigma_x());
            let mut rates: Vec<f64> = Vec::new();
            let mut group_of = Vec::with_capacity(budget.len());
            for &r in budget.rates() {
                let j = rates.iter().position(|&x| x == r).unwrap_or_else(|| {
                    rates.push(r);
                    rates.len() - 1
                });
                group_of.push(j);
            }
            let groups = rates
                .iter()
                .enumerate()
                .map(|(j, &rate)| DeviceGroup {
                    size: group_of.iter().filter(|&&g| g == j).count(),
                    rate,
                })
                .collect();
            let sym = SymmetricSourceModel::new(rho, sigma2, groups)?;
            let out = optimize_symmetric(&sym, lambda, options)?;
            MbtcParams::new(group_of.iter().map(|&j| out.q_groups.q_groups[j]).collect())
        }
    }
}

/// Full MBTC pipeline on a prepared batch: covariance estimation, parameter
/// optimization, noise surrogate in the rotated domain, inverse transform.
pub fn mbtc_aggregate(
    batch: &DeviceUpdateBatch,
    c: &[f64],
    budget: &RateBudget,
    choice: OptimizerChoice,
    seed: u64,
    options: &MmOptions,
) -> Result<AggregationResult> {
    let m = batch.devices();
    if c.len() != m || budget.len() != m {
        return Err(shape(format!("{m} devices, {} coefficients, {} rates", c.len(), budget.len())));
    }
    let sigma = validate_psd(empirical_covariance(batch.rotated())?)?;
    let model = GaussianSourceModel::new(sigma, nalgebra::DVector::from_column_slice(c))?;
    let target = batch.target(c)?;
    let scale = model.sigma_x().trace() / m as f64;
    if !(scale > 0.0) || model.target_energy() <= 0.0 {
        // nothing to send beyond the means
        let estimate = batch.inverse_transform(&vec![0.0; batch.len()], c)?;
        return Ok(AggregationResult {
            empirical_distortion: measure_distortion(&target, &estimate)?,
            target,
            estimate,
            rate_report: vec![0.0; m],
            q: None,
            predicted_distortion: model.target_energy().max(0.0),
        });
    }
    // optimize on a unit-scale copy; rates are invariant and q scales back
    let q_unit = optimize_params(&model.scaled(1.0 / scale), budget, choice, options)?;
    let q = MbtcParams::new(q_unit.values().iter().map(|v| v * scale).collect())?;
    let x_hat = mbtc_noise_surrogate(batch.rotated(), &model, &q, seed)?;
    let estimate = batch.inverse_transform(&x_hat, c)?;
    let rate_report = corner_rates(&model, &q, budget)?;
    Ok(AggregationResult {
        empirical_distortion: measure_distortion(&target, &estimate)?,
        predicted_distortion: region::distortion(&model, &q)?,
        target,
        estimate,
        rate_report,
        q: Some(q),
    })
}

/// Bits per symbol of QSGD with `s` levels: sign plus fixed-width level per
/// element, one 64-bit norm.
pub fn qsgd_bits(s: u32, n: usize) -> f64 {
    let level_bits = f64::from(s + 1).log2().ceil();
    (n as f64 * (1.0 + level_bits) + 64.0) / n as f64
}

/// Unbiased stochastic quantization onto `‖v‖·{0, 1/s, …, 1}` with sign.
pub fn qsgd_quantize(v: &[f64], s: u32, seed: u64) -> Result<(Vec<f64>, f64)> {
    if s == 0 {
        return Err(domain("QSGD needs at least one level"));
    }
    let n = v.len().max(1);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok((v.to_vec(), 64.0 / n as f64));
    }
    let mut rng = rng_for(seed, &["qsgd".into()]);
    let sf = f64::from(s);
    let out = v
        .iter()
        .map(|&x| {
            let r = x.abs() / norm * sf;
            let low = r.floor();
            let up = rng.random::<f64>() < r - low;
            let level = if up { low + 1.0 } else { low };
            norm * x.signum() * level / sf
        })
        .collect();
    Ok((out, qsgd_bits(s, n)))
}

/// Largest bit width the uniform quantizer accepts.
pub const MAX_UNIFORM_BITS: u32 = 32;

/// Rotates, quantizes each element uniformly on `[−4σ̂, 4σ̂]` with `2^bits`
/// mid-rise levels, rotates back. `σ̂` is the RMS of the rotated vector and
/// costs one 64-bit scalar.
pub fn rotated_uniform_quantize(v: &[f64], bits: u32, seed: u64) -> Result<(Vec<f64>, f64)> {
    let (mut q, bits) = rotated_uniform_quantize_all(&[v.to_vec()], bits, seed)?;
    Ok((q.remove(0), bits))
}

/// Same as [`rotated_uniform_quantize`] for several vectors sharing one
/// rotation.
pub fn rotated_uniform_quantize_all(vectors: &[Vec<f64>], bits: u32, seed: u64) -> Result<(Vec<Vec<f64>>, f64)> {
    if bits == 0 || bits > MAX_UNIFORM_BITS {
        return Err(domain(format!("bit width {bits} outside 1..={MAX_UNIFORM_BITS}")));
    }
    let n = vectors.first().map_or(1, |v| v.len().max(1));
    let charged = f64::from(bits) + 64.0 / n as f64;
    let rot_seed = seed_stream(seed, &["rotation".into()]);
    let mut x = transform::haar_rotate_all(vectors, rot_seed, transform::DEFAULT_SEGMENT_LEN)?;
    let levels = f64::from(bits).exp2();
    for v in &mut x {
        let sd = (v.iter().map(|a| a * a).sum::<f64>() / n as f64).sqrt();
        if sd == 0.0 {
            continue;
        }
        let lo = -4.0 * sd;
        let step = 8.0 * sd / levels;
        for a in v.iter_mut() {
            let idx = ((*a - lo) / step).floor().clamp(0.0, levels - 1.0);
            *a = lo + (idx + 0.5) * step;
        }
    }
    Ok((transform::inverse_rotate_all(&x, rot_seed, transform::DEFAULT_SEGMENT_LEN)?, charged))
}

/// `Σ_m c_m ŷ_m`
pub fn baseline_aggregate(quantized: &[Vec<f64>], c: &[f64]) -> Result<Vec<f64>> {
    transform::weighted_sum(quantized, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    Mbtc,
    Qsgd,
    Uniform,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Mbtc => "mbtc",
            Scheme::Qsgd => "qsgd",
            Scheme::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mbtc" => Some(Scheme::Mbtc),
            "qsgd" => Some(Scheme::Qsgd),
            "uniform" => Some(Scheme::Uniform),
            _ => None,
        }
    }
}

/// QSGD level count for a target rate: the most levels whose fixed-width
/// cost per element fits in `rate`, at least one.
pub fn qsgd_levels_for_rate(rate: f64) -> u32 {
    let mut s = 1u32;
    while s < 1 << 20 && 1.0 + f64::from(s + 2).log2().ceil() <= rate {
        s += 1;
    }
    s
}

/// Uniform quantizer width for a target rate, at least one bit.
pub fn uniform_bits_for_rate(rate: f64) -> u32 {
    (rate.floor() as u32).clamp(1, MAX_UNIFORM_BITS)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub scheme: Scheme,
    pub rho: f64,
    /// Requested per-device rate.
    pub rate_bits: f64,
    /// Average over devices of the rate actually charged.
    pub charged_bits: f64,
    pub distortion: f64,
    /// Closed-form `v(q)` for MBTC.
    pub predicted: Option<f64>,
}

/// One point of a distortion-versus-rate sweep on synthetic sources with
/// target `Σ_m y_m / M`.
pub fn sweep_point(
    scheme: Scheme,
    sources: &[Vec<f64>],
    rho: f64,
    rate: f64,
    seed: u64,
    options: &MmOptions,
) -> Result<SweepPoint> {
    let m = sources.len();
    if m == 0 {
        return Err(domain("no sources"));
    }
    let c = vec![1.0 / m as f64; m];
    let target = transform::weighted_sum(sources, &c)?;
    let (distortion, charged, predicted) = match scheme {
        Scheme::Mbtc => {
            let batch = DeviceUpdateBatch::prepare(
                sources.to_vec(),
                seed_stream(seed, &["rotation".into()]),
                transform::DEFAULT_SEGMENT_LEN,
            )?;
            let budget = RateBudget::uniform(m, rate)?;
            let out = mbtc_aggregate(
                &batch,
                &c,
                &budget,
                OptimizerChoice::General,
                seed_stream(seed, &["mbtc".into()]),
                options,
            )?;
            let charged = out.rate_report.iter().sum::<f64>() / m as f64;
            (out.empirical_distortion, charged, Some(out.predicted_distortion))
        }
        Scheme::Qsgd => {
            let mut quantized = Vec::with_capacity(m);
            let mut charged = 0.0;
            for (i, y) in sources.iter().enumerate() {
                let dev_seed = seed_stream(seed, &["qsgd".into(), i.into()]);
                let (q, bits) = qsgd_quantize(y, qsgd_levels_for_rate(rate), dev_seed)?;
                quantized.push(q);
                charged += bits;
            }
            let est = baseline_aggregate(&quantized, &c)?;
            (measure_distortion(&target, &est)?, charged / m as f64, None)
        }
        Scheme::Uniform => {
            let (quantized, bits) =
                rotated_uniform_quantize_all(sources, uniform_bits_for_rate(rate), seed_stream(seed, &["uniform".into()]))?;
            let est = baseline_aggregate(&quantized, &c)?;
            (measure_distortion(&target, &est)?, bits, None)
        }
    };
    Ok(SweepPoint {
        scheme,
        rho,
        rate_bits: rate,
        charged_bits: charged,
        distortion,
        predicted,
    })
}
