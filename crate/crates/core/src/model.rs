//! Source statistics, target coefficients and rate budgets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::linalg::symmetric_eigenvalues;

/// Smallest admissible auxiliary-noise variance.
pub const Q_MIN: f64 = 1e-12;

/// Relative PSD tolerance: eigenvalues down to `-PSD_TOLERANCE * trace / M`
/// are treated as round-off.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Jitter added to near-PSD matrices, relative to `trace / M`.
pub const PSD_JITTER: f64 = 1e-12;

/// Covariance of the (rotated, mean-removed) local updates together with the
/// coefficients of the aggregation target `Y = c^T x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSourceModel {
    sigma_x: DMatrix<f64>,
    c: DVector<f64>,
}

impl GaussianSourceModel {
    pub fn new(sigma_x: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let m = sigma_x.nrows();
        if m == 0 {
            return Err(domain("model needs at least one device"));
        }
        if sigma_x.ncols() != m {
            return Err(shape(format!("sigma_x is {}x{}, expected square", m, sigma_x.ncols())));
        }
        if c.len() != m {
            return Err(shape(format!("c has length {}, expected {m}", c.len())));
        }
        if sigma_x.iter().chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(domain("model entries must be finite"));
        }
        let scale = sigma_x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..m {
            for j in (i + 1)..m {
                if (sigma_x[(i, j)] - sigma_x[(j, i)]).abs() > 1e-12 * scale {
                    return Err(domain(format!("sigma_x is not symmetric at ({i},{j})")));
                }
            }
        }
        let sigma_x = validate_psd(sigma_x)?;
        Ok(Self { sigma_x, c })
    }

    pub fn from_rows(rows: &[Vec<f64>], c: &[f64]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(shape("covariance rows must all have length M"));
        }
        let sigma = DMatrix::from_fn(m, m, |i, j| rows[i][j]);
        Self::new(sigma, DVector::from_column_slice(c))
    }

    pub fn devices(&self) -> usize {
        self.sigma_x.nrows()
    }

    pub fn sigma_x(&self) -> &DMatrix<f64> {
        &self.sigma_x
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    /// Variance of the aggregation target, `c^T Σ_X c`.
    pub fn target_energy(&self) -> f64 {
        (self.c.transpose() * &self.sigma_x * &self.c)[(0, 0)]
    }

    /// Same source statistics with every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            sigma_x: &self.sigma_x * factor,
            c: self.c.clone(),
        }
    }
}

/// `ρσ² 11ᵀ + (1-ρ)σ² I`.
pub fn symmetric_covariance(rho: f64, sigma2: f64, m: usize) -> Result<DMatrix<f64>> {
    check_rho_sigma(rho, sigma2)?;
    if m == 0 {
        return Err(domain("device count must be positive"));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| if i == j { sigma2 } else { rho * sigma2 }))
}

fn check_rho_sigma(rho: f64, sigma2: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(domain(format!("correlation {rho} outside [0, 1)")));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(domain(format!("variance {sigma2} must be positive")));
    }
    Ok(())
}

/// Gram matrix `g_i^T g_j / N` of mean-removed update vectors.
pub fn empirical_covariance(updates: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = updates.len();
    if m == 0 {
        return Err(shape("no update vectors"));
    }
    let n = updates[0].len();
    if n == 0 {
        return Err(shape("update vectors are empty"));
    }
    if let Some(bad) = updates.iter().position(|u| u.len() != n) {
        return Err(shape(format!("vector {bad} has length {}, expected {n}", updates[bad].len())));
    }
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let dot: f64 = updates[i].iter().zip(&updates[j]).map(|(a, b)| a * b).sum();
            cov[(i, j)] = dot / n as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Ok(cov)
}

/// Accepts PSD matrices, jitters ones that are PSD up to round-off, and
/// rejects the rest.
pub fn validate_psd(a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = a.nrows();
    if m == 0 || a.ncols() != m {
        return Err(shape("validate_psd needs a non-empty square matrix"));
    }
    let scale = (a.trace() / m as f64).abs();
    let min_eig = symmetric_eigenvalues(&a).min();
    let tolerance = PSD_TOLERANCE * scale;
    if min_eig >= 0.0 {
        return Ok(a);
    }
    if min_eig >= -tolerance {
        let jitter = PSD_JITTER * scale;
        return Ok(a + DMatrix::identity(m, m) * jitter);
    }
    Err(Error::NotPsd {
        min_eigenvalue: min_eig,
        tolerance,
    })
}

/// One group of devices sharing a rate budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceGroup {
    pub size: usize,
    pub rate: f64,
}

/// Equicorrelated sources with grouped rate budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricSourceModel {
    rho: f64,
    sigma2: f64,
    groups: Vec<DeviceGroup>,
}

impl SymmetricSourceModel {
    pub fn new(rho: f64, sigma2: f64, groups: Vec<DeviceGroup>) -> Result<Self> {
        check_rho_sigma(rho, sigma2)?;
        if groups.is_empty() {
            return Err(domain("at least one device group is required"));
        }
        for (j, g) in groups.iter().enumerate() {
            if g.size == 0 {
                return Err(domain(format!("group {j} is empty")));
            }
            if !(g.rate > 0.0 && g.rate.is_finite()) {
                return Err(domain(format!("group {j} rate {} must be positive", g.rate)));
            }
        }
        Ok(Self { rho, sigma2, groups })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn groups(&self) -> &[DeviceGroup] {
        &self.groups
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.size).collect()
    }

    pub fn devices(&self) -> usize {
        self.groups.iter().map(|g| g.size).sum()
    }

    /// Group index of every device, devices numbered group by group.
    pub fn device_groups(&self) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(j, g)| std::iter::repeat_n(j, g.size))
            .collect()
    }

    /// Full covariance model with target `c = λ·1`.
    pub fn expand(&self, lambda: f64) -> Result<GaussianSourceModel> {
        let m = self.devices();
        let sigma = symmetric_covariance(self.rho, self.sigma2, m)?;
        GaussianSourceModel::new(sigma, DVector::from_element(m, lambda))
    }

    pub fn budget(&self) -> RateBudget {
        RateBudget(
            self.groups
                .iter()
                .flat_map(|g| std::iter::repeat_n(g.rate, g.size))
                .collect(),
        )
    }
}

/// Per-device source-coding rate limits in bits per symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RateBudget(Vec<f64>);

impl RateBudget {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(domain("rate budget is empty"));
        }
        if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(domain(format!("rate {r} must be positive and finite")));
        }
        Ok(Self(rates))
    }

    pub fn uniform(m: usize, rate: f64) -> Result<Self> {
        Self::new(vec![rate; m])
    }

    pub fn rates(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `Σ_{m∈S} r_m` for a subset bitmask.
    pub fn subset_sum(&self, mask: u32) -> f64 {
        self.0
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, r)| r)
            .sum()
    }
}

impl TryFrom<Vec<f64>> for RateBudget {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RateBudget> for Vec<f64> {
    fn from(b: RateBudget) -> Self {
        b.0
    }
}

/// Auxiliary-noise variances `q_m` of the test channels `U_m = X_m + V_m`.
///
/// Entries are clamped to at least [`Q_MIN`]. `f64::INFINITY` marks a silent
/// device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbtcParams(Vec<f64>);

impl MbtcParams {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(domain("MBTC parameter vector is empty"));
        }
        if let Some(v) = q.iter().find(|v| v.is_nan() || **v <= 0.0) {
            return Err(domain(format!("MBTC parameter {v} must be strictly positive")));
        }
        Ok(Self(q.into_iter().map(|v| v.max(Q_MIN)).collect()))
    }

    pub fn uniform(m: usize, q: f64) -> Result<Self> {
        Self::new(vec![q; m])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A rate-distortion tuple `(R_1, …, R_M, D)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdTuple {
    pub rates: Vec<f64>,
    pub distortion: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::close;

    #[test]
    fn symmetric_covariance_examples() {
        assert_eq!(symmetric_covariance(0.0, 1.0, 3).unwrap(), DMatrix::identity(3, 3));
        let s = symmetric_covariance(0.5, 2.0, 2).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        let s = symmetric_covariance(0.9, 1.0, 10).unwrap();
        let mut eig: Vec<f64> = symmetric_eigenvalues(&s).iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        assert!(close(eig[0], 0.1, 1e-12));
        for e in &eig[..9] {
            assert!(close(*e, 0.1, 1e-12));
        }
        assert!(close(eig[9], 1.0 + 9.0 * 0.9, 1e-12));
    }

    #[test]
    fn symmetric_covariance_rejects_bad_args() {
        assert!(matches!(symmetric_covariance(1.0, 1.0, 2), Err(Error::Domain(_))));
        assert!(matches!(symmetric_covariance(-0.1, 1.0, 2), Err(Error::Domain(_))));
        assert!(matches!(symmetric_covariance(0.5, 0.0, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn empirical_covariance_examples() {
        let z = empirical_covariance(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(z, DMatrix::zeros(2, 2));
        let c = empirical_covariance(&[vec![1.0, -1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(c, DMatrix::identity(2, 2));
        assert!(matches!(
            empirical_covariance(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn validate_psd_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_eq!(validate_psd(i.clone()).unwrap(), i);
        let r1 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let v = validate_psd(r1.clone()).unwrap();
        assert!((v - r1).abs().max() <= 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(validate_psd(bad), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn expansion_reads_back_parameters() {
        let s = SymmetricSourceModel::new(
            0.37,
            2.5,
            vec![DeviceGroup { size: 2, rate: 1.0 }, DeviceGroup { size: 3, rate: 0.5 }],
        )
        .unwrap();
        let g = s.expand(0.2).unwrap();
        assert_eq!(g.devices(), 5);
        let sig = g.sigma_x();
        for i in 0..5 {
            assert!(close(sig[(i, i)], 2.5, 1e-12));
            for j in 0..5 {
                if i != j {
                    assert!(close(sig[(i, j)] / sig[(i, i)], 0.37, 1e-12));
                }
            }
        }
        assert_eq!(s.budget().rates(), &[1.0, 1.0, 0.5, 0.5, 0.5]);
        assert_eq!(s.device_groups(), vec![0, 0, 1, 1, 1]);
    }

    #[test]
    fn budgets_and_params_validate() {
        assert!(RateBudget::new(vec![1.0, 0.0]).is_err());
        assert!(RateBudget::new(vec![f64::INFINITY]).is_err());
        assert!(MbtcParams::new(vec![-1.0]).is_err());
        assert_eq!(MbtcParams::new(vec![1e-20]).unwrap().values(), &[Q_MIN]);
        assert_eq!(MbtcParams::new(vec![f64::INFINITY]).unwrap().values(), &[f64::INFINITY]);
        let b = RateBudget::new(vec![1.0, 2.0, 4.0]).unwrap();
        assert_eq!(b.subset_sum(0b101), 5.0);
    }

    #[test]
    fn model_rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianSourceModel::new(a, DVector::from_element(2, 0.5)).is_err());
    }
}
