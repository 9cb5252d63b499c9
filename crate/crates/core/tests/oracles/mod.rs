//! Reference computations that do not go through the library's own region
//! code: explicit small determinants and adjugate inverses, brute-force grid
//! search, sampling, and power iteration.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Determinant by cofactor expansion; meant for M ≤ 4.
pub fn det(a: &[Vec<f64>]) -> f64 {
    match a.len() {
        0 => 1.0,
        1 => a[0][0],
        2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
        3 => {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        }
        n => (0..n)
            .map(|j| {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * a[0][j] * det(&minor(a, 0, j))
            })
            .sum(),
    }
}

fn minor(a: &[Vec<f64>], row: usize, col: usize) -> Vec<Vec<f64>> {
    a.iter()
        .enumerate()
        .filter(|(i, _)| *i != row)
        .map(|(_, r)| r.iter().enumerate().filter(|(j, _)| *j != col).map(|(_, v)| *v).collect())
        .collect()
}

/// Inverse by adjugate.
pub fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let d = det(a);
    if n == 1 {
        return vec![vec![1.0 / d]];
    }
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                    sign * det(&minor(a, j, i)) / d
                })
                .collect()
        })
        .collect()
}

fn sub(a: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| idx.iter().map(|&j| a[i][j]).collect()).collect()
}

/// Explicit-formula evaluator for small models.
pub struct SmallModel {
    pub sigma: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl SmallModel {
    pub fn new(sigma: Vec<Vec<f64>>, c: Vec<f64>) -> Self {
        Self { sigma, c }
    }

    pub fn m(&self) -> usize {
        self.c.len()
    }

    fn plus_noise(&self, q: &[f64]) -> Vec<Vec<f64>> {
        let mut a = self.sigma.clone();
        for i in 0..q.len() {
            a[i][i] += q[i];
        }
        a
    }

    /// `½ log2(det(Σ+Q) / (det(Σ^{Sc}+Q^{Sc}) Π_{m∈S} q_m))`; full mask gives the sum rate.
    pub fn mi(&self, q: &[f64], mask: u32) -> f64 {
        let m = self.m();
        let joint = det(&self.plus_noise(q));
        let sc: Vec<usize> = (0..m).filter(|i| mask & (1 << i) == 0).collect();
        let rest = det(&sub(&self.plus_noise(q), &sc));
        let noise: f64 = (0..m).filter(|i| mask & (1 << i) != 0).map(|i| q[i]).product();
        0.5 * (joint / (rest * noise)).log2()
    }

    pub fn feasible(&self, q: &[f64], budget: &[f64]) -> bool {
        let m = self.m();
        let full = (1u32 << m) - 1;
        (1..=full).all(|mask| {
            let b: f64 = (0..m).filter(|i| mask & (1 << i) != 0).map(|i| budget[i]).sum();
            self.mi(q, mask) <= b + 1e-9
        })
    }

    pub fn distortion(&self, q: &[f64]) -> f64 {
        let m = self.m();
        let sc: Vec<f64> = (0..m).map(|i| (0..m).map(|j| self.sigma[i][j] * self.c[j]).sum()).collect();
        let energy: f64 = self.c.iter().zip(&sc).map(|(a, b)| a * b).sum();
        let inv = inverse(&self.plus_noise(q));
        let explained: f64 = (0..m).map(|i| (0..m).map(|j| sc[i] * inv[i][j] * sc[j]).sum::<f64>()).sum();
        energy - explained
    }
}

fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Minimum distortion over a log-spaced grid of feasible `q`, refined
/// `zooms` times by re-gridding `zoom_points` per axis around the incumbent
/// at half the previous spacing. A refinement whose incumbent sits on the
/// edge of the grid re-centers at the same spacing instead of shrinking, so
/// the search can follow a curved constraint boundary.
pub fn grid_optimum(model: &SmallModel, budget: &[f64], points: usize, zoom_points: usize, zooms: usize) -> (Vec<f64>, f64) {
    let m = model.m();
    let scale = (0..m).map(|i| model.sigma[i][i]).sum::<f64>() / m as f64;
    let mut ranges = vec![(1e-4 * scale, 1e4 * scale); m];
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut n = points;
    let mut shrinks = 0;
    for _ in 0..1000 {
        let axes: Vec<Vec<f64>> = ranges.iter().map(|&(lo, hi)| log_grid(lo, hi, n)).collect();
        let mut idx = vec![0usize; m];
        let mut level_best: Option<(Vec<usize>, f64)> = None;
        loop {
            let q: Vec<f64> = idx.iter().zip(&axes).map(|(&i, ax)| ax[i]).collect();
            if model.feasible(&q, budget) {
                let d = model.distortion(&q);
                if level_best.as_ref().map_or(true, |(_, bd)| d < *bd) {
                    level_best = Some((idx.clone(), d));
                }
                if best.as_ref().map_or(true, |(_, bd)| d < *bd) {
                    best = Some((q, d));
                }
            }
            let mut k = 0;
            loop {
                if k == m {
                    break;
                }
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == m {
                break;
            }
        }
        if shrinks == zooms {
            break;
        }
        let (bq, _) = best.as_ref().expect("grid contains a feasible point");
        let ratio = (ranges[0].1 / ranges[0].0).powf(1.0 / (n - 1) as f64);
        let on_edge = shrinks > 0
            && level_best.as_ref().is_some_and(|(i, _)| i.iter().any(|&k| k == 0 || k == n - 1));
        if on_edge {
            let half = ratio.powi((n as i32 - 1) / 2);
            ranges = bq.iter().map(|&v| (v / half, v * half)).collect();
        } else {
            let half = ratio.powf((zoom_points - 1) as f64 / 4.0);
            ranges = bq.iter().map(|&v| (v / half, v * half)).collect();
            n = zoom_points;
            shrinks += 1;
        }
    }
    best.expect("grid contains a feasible point")
}

/// Gaussian plug-in estimate of `I(x^S; u^S | u^{S^c})` from sampled
/// `(x, u = x + v)`: sample covariance of `u`, conditional variance of `u^S`
/// given `u^{S^c}`, divided by the noise variance. Two-device models only.
pub fn mc_conditional_mi_2(sigma: &[Vec<f64>], q: &[f64], s_index: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l11 = sigma[0][0].sqrt();
    let l21 = sigma[1][0] / l11;
    let l22 = (sigma[1][1] - l21 * l21).sqrt();
    let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
    let (mut n0, mut n1) = (0.0, 0.0);
    for _ in 0..samples {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let x0 = l11 * z0;
        let x1 = l21 * z0 + l22 * z1;
        let v0 = q[0].sqrt() * rng.sample::<f64, _>(StandardNormal);
        let v1 = q[1].sqrt() * rng.sample::<f64, _>(StandardNormal);
        let (u0, u1) = (x0 + v0, x1 + v1);
        s00 += u0 * u0;
        s01 += u0 * u1;
        s11 += u1 * u1;
        n0 += v0 * v0;
        n1 += v1 * v1;
    }
    let k = samples as f64;
    let (s00, s01, s11, n0, n1) = (s00 / k, s01 / k, s11 / k, n0 / k, n1 / k);
    let (cond, noise) = if s_index == 0 {
        (s00 - s01 * s01 / s11, n0)
    } else {
        (s11 - s01 * s01 / s00, n1)
    };
    0.5 * (cond / noise).log2()
}

/// `(λ_min, λ_max)` of a symmetric positive definite matrix by power and
/// inverse iteration.
pub fn extreme_eigenvalues(h: &DMatrix<f64>, iterations: usize) -> (f64, f64) {
    let n = h.nrows();
    let lu = h.clone().lu();
    let start = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    let mut v = start.normalize();
    let mut hi = 0.0;
    for _ in 0..iterations {
        let w = h * &v;
        hi = v.dot(&w);
        v = w.normalize();
    }
    let mut v = start.normalize();
    let mut lo = 0.0;
    for _ in 0..iterations {
        let w = lu.solve(&v).expect("nonsingular");
        lo = 1.0 / v.dot(&w);
        v = w.normalize();
    }
    (lo, hi)
}

/// Central-difference gradient.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Equicorrelated covariance as nested rows.
pub fn equicorrelated(rho: f64, sigma2: f64, m: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| (0..m).map(|j| if i == j { sigma2 } else { rho * sigma2 }).collect())
        .collect()
}

/// Random covariance `B Bᵀ/M + δI` with a seeded Gaussian `B`.
pub fn random_covariance(m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b: Vec<Vec<f64>> = (0..m).map(|_| (0..m).map(|_| rng.sample(StandardNormal)).collect()).collect();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let s: f64 = (0..m).map(|k| b[i][k] * b[j][k]).sum::<f64>() / m as f64;
                    if i == j {
                        s + 0.1
                    } else {
                        s
                    }
                })
                .collect()
        })
        .collect()
}

/// Seeded general instance: random covariance, coefficients in `[0.1, 1]`,
/// budgets in `[0.3, 2]` bits.
pub fn random_instance(m: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let sigma = random_covariance(m, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let c = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let budget = (0..m).map(|_| rng.random_range(0.3..2.0)).collect();
    (sigma, c, budget)
}
