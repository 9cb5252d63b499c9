//! Pre- and post-processing of local updates: mean removal, segmented Haar
//! rotation shared by all devices, and the inverse transform at the server.
//! Also synthetic update generators and an empirical Gaussianization check.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{domain, shape, Error, Result};
use crate::seed::rng_for;

pub const DEFAULT_SEGMENT_LEN: usize = 1024;

/// Returns `(g − ḡ·1, ḡ)`.
pub fn mean_remove(g: &[f64]) -> (Vec<f64>, f64) {
    if g.is_empty() {
        return (Vec::new(), 0.0);
    }
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    (g.iter().map(|v| v - mean).collect(), mean)
}

/// Haar-distributed orthogonal matrix stored as a product of Householder
/// reflectors and a diagonal sign matrix: `Q = H_0 H_1 ⋯ H_{n−2} D`.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarRotation {
    /// Unit vectors `v_k` acting on coordinates `k..n`; `H_k = I − 2 v_k v_kᵀ`.
    reflectors: Vec<Vec<f64>>,
    signs: Vec<f64>,
}

impl HaarRotation {
    pub fn sample(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut reflectors = Vec::with_capacity(n.saturating_sub(1));
        let mut signs = Vec::with_capacity(n);
        for k in 0..n.saturating_sub(1) {
            let mut v: Vec<f64> = (k..n).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = if v[0] >= 0.0 { 1.0 } else { -1.0 };
            v[0] += s * norm;
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vn > 0.0 {
                v.iter_mut().for_each(|x| *x /= vn);
            }
            reflectors.push(v);
            signs.push(-s);
        }
        if n > 0 {
            let z: f64 = rng.sample(StandardNormal);
            signs.push(if z >= 0.0 { 1.0 } else { -1.0 });
        }
        Self { reflectors, signs }
    }

    pub fn dim(&self) -> usize {
        self.signs.len()
    }

    fn reflect(v: &[f64], x: &mut [f64]) {
        let d: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let d = 2.0 * d;
        x.iter_mut().zip(v).for_each(|(xi, vi)| *xi -= d * vi);
    }

    /// `x ← Q x`
    pub fn apply(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim());
        x.iter_mut().zip(&self.signs).for_each(|(a, s)| *a *= s);
        for (k, v) in self.reflectors.iter().enumerate().rev() {
            Self::reflect(v, &mut x[k..]);
        }
    }

    /// `x ← Qᵀ x`
    pub fn apply_transpose(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim());
        for (k, v) in self.reflectors.iter().enumerate() {
            Self::reflect(v, &mut x[k..]);
        }
        x.iter_mut().zip(&self.signs).for_each(|(a, s)| *a *= s);
    }

    /// Dense `Q`, column by column.
    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        let mut q = nalgebra::DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            self.apply(&mut e);
            q.column_mut(j).copy_from_slice(&e);
        }
        q
    }
}

fn check_segment_len(segment_len: usize) -> Result<()> {
    if segment_len == 0 {
        return Err(domain("segment length must be positive"));
    }
    Ok(())
}

/// Rotation of segment `index` of length `len` under `seed`.
pub fn segment_rotation(seed: u64, index: usize, len: usize) -> HaarRotation {
    let mut rng = rng_for(seed, &["segment".into(), index.into()]);
    HaarRotation::sample(len, &mut rng)
}

fn for_each_segment(n: usize, segment_len: usize, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    let mut start = 0;
    let mut index = 0;
    while start < n {
        let end = (start + segment_len).min(n);
        f(index, start..end);
        start = end;
        index += 1;
    }
}

/// Applies `A` (block-diagonal, one Haar block per segment) to each vector.
/// All vectors share the same `A`.
pub fn haar_rotate_all(vectors: &[Vec<f64>], seed: u64, segment_len: usize) -> Result<Vec<Vec<f64>>> {
    rotate_all(vectors, seed, segment_len, false)
}

/// Applies `Aᵀ` to each vector.
pub fn inverse_rotate_all(vectors: &[Vec<f64>], seed: u64, segment_len: usize) -> Result<Vec<Vec<f64>>> {
    rotate_all(vectors, seed, segment_len, true)
}

fn rotate_all(vectors: &[Vec<f64>], seed: u64, segment_len: usize, transpose: bool) -> Result<Vec<Vec<f64>>> {
    check_segment_len(segment_len)?;
    let n = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != n) {
        return Err(shape("vectors differ in length"));
    }
    let mut out = vectors.to_vec();
    for_each_segment(n, segment_len, |index, range| {
        let rot = segment_rotation(seed, index, range.len());
        for v in &mut out {
            if transpose {
                rot.apply_transpose(&mut v[range.clone()]);
            } else {
                rot.apply(&mut v[range.clone()]);
            }
        }
    });
    Ok(out)
}

pub fn haar_rotate(g_tilde: &[f64], seed: u64, segment_len: usize) -> Result<Vec<f64>> {
    Ok(haar_rotate_all(&[g_tilde.to_vec()], seed, segment_len)?.remove(0))
}

pub fn inverse_rotate(x: &[f64], seed: u64, segment_len: usize) -> Result<Vec<f64>> {
    Ok(inverse_rotate_all(&[x.to_vec()], seed, segment_len)?.remove(0))
}

/// `ĝ = Aᵀx̂ + (Σ_m c_m ḡ_m)·1`.
pub fn inverse_transform(x_hat: &[f64], means: &[f64], c: &[f64], seed: u64, segment_len: usize) -> Result<Vec<f64>> {
    if means.len() != c.len() {
        return Err(shape(format!("{} means for {} coefficients", means.len(), c.len())));
    }
    let offset: f64 = means.iter().zip(c).map(|(a, b)| a * b).sum();
    let mut g = inverse_rotate(x_hat, seed, segment_len)?;
    g.iter_mut().for_each(|v| *v += offset);
    Ok(g)
}

/// Local updates of all devices together with their pre-processed form.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceUpdateBatch {
    updates: Vec<Vec<f64>>,
    means: Vec<f64>,
    rotated: Vec<Vec<f64>>,
    rotation_seed: u64,
    segment_len: usize,
}

impl DeviceUpdateBatch {
    /// Mean-removes and rotates raw updates `g_m`.
    pub fn prepare(updates: Vec<Vec<f64>>, rotation_seed: u64, segment_len: usize) -> Result<Self> {
        if updates.is_empty() {
            return Err(domain("batch needs at least one device"));
        }
        let n = updates[0].len();
        if n == 0 || updates.iter().any(|u| u.len() != n) {
            return Err(shape("updates must share a positive length"));
        }
        let (centered, means): (Vec<Vec<f64>>, Vec<f64>) = updates.iter().map(|g| mean_remove(g)).unzip();
        let rotated = haar_rotate_all(&centered, rotation_seed, segment_len)?;
        Ok(Self {
            updates,
            means,
            rotated,
            rotation_seed,
            segment_len,
        })
    }

    pub fn devices(&self) -> usize {
        self.updates.len()
    }

    pub fn len(&self) -> usize {
        self.updates[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn updates(&self) -> &[Vec<f64>] {
        &self.updates
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    /// Rotated mean-removed vectors `x_m`.
    pub fn rotated(&self) -> &[Vec<f64>] {
        &self.rotated
    }

    pub fn rotation_seed(&self) -> u64 {
        self.rotation_seed
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    /// `Σ_m c_m g_m`
    pub fn target(&self, c: &[f64]) -> Result<Vec<f64>> {
        weighted_sum(&self.updates, c)
    }

    /// Server-side reconstruction from an estimate in the rotated domain.
    pub fn inverse_transform(&self, x_hat: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        if x_hat.len() != self.len() {
            return Err(shape(format!("estimate has length {}, batch has {}", x_hat.len(), self.len())));
        }
        if c.len() != self.devices() {
            return Err(shape("coefficient count differs from device count"));
        }
        inverse_transform(x_hat, &self.means, c, self.rotation_seed, self.segment_len)
    }

    /// Header `(M, N, segment_len, seed)` as little-endian u64, followed by
    /// the raw updates as little-endian f64, device by device.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        for h in [self.devices() as u64, self.len() as u64, self.segment_len as u64, self.rotation_seed] {
            w.write_all(&h.to_le_bytes()).map_err(io)?;
        }
        for u in &self.updates {
            for v in u {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Format(e.to_string()))?;
        if bytes.len() < 32 {
            return Err(Error::Format("batch header truncated".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("8 bytes"));
        let (m, n, seg, seed) = (word(0), word(1), word(2), word(3));
        let expected = m
            .checked_mul(n)
            .and_then(|k| k.checked_mul(8))
            .and_then(|k| k.checked_add(32));
        if expected != Some(bytes.len() as u64) {
            return Err(Error::Format(format!(
                "batch payload has {} bytes, header declares M={m}, N={n}",
                bytes.len()
            )));
        }
        let (m, n) = (m as usize, n as usize);
        let updates = (0..m)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let at = 32 + 8 * (i * n + j);
                        f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
                    })
                    .collect()
            })
            .collect();
        Self::prepare(updates, seed, seg as usize)
    }
}

/// `Σ_m c_m v_m`
pub fn weighted_sum(vectors: &[Vec<f64>], c: &[f64]) -> Result<Vec<f64>> {
    if vectors.len() != c.len() {
        return Err(shape(format!("{} vectors for {} coefficients", vectors.len(), c.len())));
    }
    let n = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != n) {
        return Err(shape("vectors differ in length"));
    }
    let mut out = vec![0.0; n];
    for (v, &w) in vectors.iter().zip(c) {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
    }
    Ok(out)
}

/// Element law of the isotropic components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ComponentLaw {
    Gaussian,
    /// Unit-variance Laplace, excess kurtosis 3.
    Laplace,
}

/// Linear-mixture description of correlated updates: `g̃_m = Σ_k e_{m,k} p_k`
/// with independent components of energy `τ_k²` per symbol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureSpec {
    /// `M` rows of `K` mixing coefficients.
    pub coefficients: Vec<Vec<f64>>,
    pub taus: Vec<f64>,
    /// Makes `p_1` half a fixed dense direction and half Gaussian.
    pub anisotropic_first: bool,
    pub law: ComponentLaw,
}

impl MixtureSpec {
    pub fn new(coefficients: Vec<Vec<f64>>, taus: Vec<f64>) -> Result<Self> {
        let spec = Self {
            coefficients,
            taus,
            anisotropic_first: false,
            law: ComponentLaw::Gaussian,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `e = [√ρ | √(1−ρ)·I]`, `τ = 1`.
    pub fn common_plus_private(rho: f64, m: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) || m == 0 {
            return Err(domain(format!("need 0 ≤ ρ < 1 and M ≥ 1, got ρ={rho}, M={m}")));
        }
        let coefficients = (0..m)
            .map(|i| {
                let mut row = vec![0.0; m + 1];
                row[0] = rho.sqrt();
                row[i + 1] = (1.0 - rho).sqrt();
                row
            })
            .collect();
        Self::new(coefficients, vec![1.0; m + 1])
    }

    fn validate(&self) -> Result<()> {
        let k = self.taus.len();
        if k == 0 {
            return Err(domain("need at least one component"));
        }
        if self.taus.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(domain("component scales must be positive"));
        }
        if self.coefficients.is_empty() || self.coefficients.iter().any(|r| r.len() != k) {
            return Err(shape("coefficient rows must have one entry per component"));
        }
        Ok(())
    }

    pub fn devices(&self) -> usize {
        self.coefficients.len()
    }

    /// `E·diag(τ²)·Eᵀ`
    pub fn model_covariance(&self) -> nalgebra::DMatrix<f64> {
        let m = self.devices();
        nalgebra::DMatrix::from_fn(m, m, |i, j| {
            self.coefficients[i]
                .iter()
                .zip(&self.coefficients[j])
                .zip(&self.taus)
                .map(|((a, b), t)| a * b * t * t)
                .sum()
        })
    }
}

fn laplace(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -u.signum() * (1.0 - 2.0 * u.abs()).ln() / std::f64::consts::SQRT_2
}

fn component(spec: &MixtureSpec, k: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &["component".into(), k.into()]);
    let tau = spec.taus[k];
    let draw = |rng: &mut ChaCha8Rng| match spec.law {
        ComponentLaw::Gaussian => rng.sample::<f64, _>(StandardNormal),
        ComponentLaw::Laplace => laplace(rng),
    };
    if k == 0 && spec.anisotropic_first {
        let mut dir = rng_for(seed, &["direction".into()]);
        (0..n)
            .map(|_| {
                let d = if dir.random::<bool>() { 1.0 } else { -1.0 };
                tau * std::f64::consts::FRAC_1_SQRT_2 * (d + draw(&mut rng))
            })
            .collect()
    } else {
        (0..n).map(|_| tau * draw(&mut rng)).collect()
    }
}

/// Raw mixtures `Σ_k e_{m,k} p_k` before mean removal.
pub fn mixture_sources(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut out = vec![vec![0.0; n]; spec.devices()];
    for k in 0..spec.taus.len() {
        if spec.coefficients.iter().all(|row| row[k] == 0.0) {
            continue;
        }
        let p = component(spec, k, n, seed);
        for (row, g) in spec.coefficients.iter().zip(out.iter_mut()) {
            let e = row[k];
            if e != 0.0 {
                g.iter_mut().zip(&p).for_each(|(a, b)| *a += e * b);
            }
        }
    }
    Ok(out)
}

/// Mean-removed updates drawn from `spec`.
pub fn centered_sources(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(mixture_sources(spec, n, seed)?
        .iter()
        .map(|g| mean_remove(g).0)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianizationReport {
    /// Largest entry of `|Ĉ(rotated) − Ĉ(pre_rotation)|`.
    pub covariance_error: f64,
    pub excess_kurtosis: Vec<f64>,
}

/// Sample excess kurtosis of the elements of `v`.
pub fn excess_kurtosis(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let (m2, m4) = v.iter().fold((0.0, 0.0), |(a, b), x| {
        let d = (x - mean) * (x - mean);
        (a + d, b + d * d)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if m2 == 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}

pub fn gaussianization_check(rotated: &[Vec<f64>], pre_rotation: &[Vec<f64>]) -> Result<GaussianizationReport> {
    if rotated.len() != pre_rotation.len() {
        return Err(shape("device count mismatch"));
    }
    let a = crate::model::empirical_covariance(rotated)?;
    let b = crate::model::empirical_covariance(pre_rotation)?;
    let covariance_error = (a - b).amax();
    Ok(GaussianizationReport {
        covariance_error,
        excess_kurtosis: rotated.iter().map(|v| excess_kurtosis(v)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn mean_remove_examples() {
        assert_eq!(mean_remove(&[1.0, 2.0, 3.0]), (vec![-1.0, 0.0, 1.0], 2.0));
        assert_eq!(mean_remove(&[4.0; 5]), (vec![0.0; 5], 4.0));
    }

    #[test]
    fn rotation_is_orthogonal() {
        for n in [1, 2, 3, 17, 64] {
            let q = HaarRotation::sample(n, &mut rng_for(3, &[n.into()])).to_matrix();
            let err = (q.transpose() * &q - nalgebra::DMatrix::identity(n, n)).amax();
            assert!(err < 1e-10, "n={n}: {err}");
        }
    }

    #[test]
    fn round_trip_with_short_tail() {
        let mut rng = rng_for(9, &[]);
        let g: Vec<f64> = (0..2500).map(|_| rng.sample(StandardNormal)).collect();
        let x = haar_rotate(&g, 11, DEFAULT_SEGMENT_LEN).unwrap();
        assert!((norm(&x) - norm(&g)).abs() < 1e-9 * norm(&g));
        let back = inverse_rotate(&x, 11, DEFAULT_SEGMENT_LEN).unwrap();
        let err: f64 = back.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        assert_eq!(x, haar_rotate(&g, 11, DEFAULT_SEGMENT_LEN).unwrap());
    }

    #[test]
    fn zero_estimate_gives_constant() {
        let g = inverse_transform(&[0.0; 4], &[1.0, 3.0], &[0.5, 0.5], 1, 1024).unwrap();
        assert_eq!(g, vec![2.0; 4]);
        assert!(inverse_transform(&[0.0; 4], &[1.0], &[0.5, 0.5], 1, 1024).is_err());
    }

    #[test]
    fn batch_binary_round_trip() {
        let b = DeviceUpdateBatch::prepare(vec![vec![1.0, 2.0, 3.5], vec![-1.0, 0.0, 7.0]], 42, 2).unwrap();
        let mut bytes = Vec::new();
        b.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 32 + 6 * 8);
        assert_eq!(DeviceUpdateBatch::read_from(bytes.as_slice()).unwrap(), b);
        assert!(DeviceUpdateBatch::read_from(&bytes[..40]).is_err());
    }

    #[test]
    fn laplace_has_unit_variance() {
        let mut rng = rng_for(5, &[]);
        let v: Vec<f64> = (0..200_000).map(|_| laplace(&mut rng)).collect();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 1.0).abs() < 0.03, "{var}");
        assert!((excess_kurtosis(&v) - 3.0).abs() < 0.3);
    }
}
