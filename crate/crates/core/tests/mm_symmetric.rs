mod oracles;

use mbtc_core::mm_general::{self, MmOptions};
use mbtc_core::mm_symmetric::*;
use mbtc_core::model::{DeviceGroup, SymmetricSourceModel};
use nalgebra::DMatrix;
use oracles::SmallModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn expand(q: &[f64], sizes: &[usize]) -> Vec<f64> {
    q.iter().zip(sizes).flat_map(|(&v, &n)| std::iter::repeat_n(v, n)).collect()
}

fn model(rho: f64, sigma2: f64, groups: &[(usize, f64)]) -> SymmetricSourceModel {
    let g = groups.iter().map(|&(size, rate)| DeviceGroup { size, rate }).collect();
    SymmetricSourceModel::new(rho, sigma2, g).unwrap()
}

#[test]
fn theta_matches_explicit_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let j = rng.random_range(1..=3);
        let sizes: Vec<usize> = (0..j).map(|_| rng.random_range(1..=2)).collect();
        let m: usize = sizes.iter().sum();
        let rho = rng.random_range(0.0..0.95);
        let sigma2 = rng.random_range(0.5..2.0);
        let q: Vec<f64> = (0..j).map(|_| rng.random_range(0.05..3.0)).collect();
        let small = SmallModel::new(oracles::equicorrelated(rho, sigma2, m), vec![1.0; m]);
        for sel in enumerate_selections(&sizes).unwrap() {
            let th = theta(rho, sigma2, &sizes, &q, &sel).unwrap();
            let exact = small.mi(&expand(&q, &sizes), sel.representative_mask(&sizes));
            assert!((th - exact).abs() < 1e-10, "{sizes:?} {:?}: {th} vs {exact}", sel.counts);
        }
    }
}

#[test]
fn selections_are_lexicographic_and_nonempty() {
    let s = enumerate_selections(&[1, 2]).unwrap();
    let counts: Vec<Vec<usize>> = s.into_iter().map(|v| v.counts).collect();
    assert_eq!(counts, vec![vec![0, 1], vec![0, 2], vec![1, 0], vec![1, 1], vec![1, 2]]);
}

#[test]
fn theta_up_is_an_upper_bound_tight_at_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sizes = [3, 2];
    let sels = enumerate_selections(&sizes).unwrap();
    for _ in 0..50 {
        let q_hat = [rng.random_range(0.05..3.0), rng.random_range(0.05..3.0)];
        let q = [rng.random_range(0.05..3.0), rng.random_range(0.05..3.0)];
        for sel in &sels {
            let up = theta_up(0.6, 1.3, &sizes, &q, sel, &q_hat).unwrap();
            assert!(up >= theta(0.6, 1.3, &sizes, &q, sel).unwrap() - 1e-12);
            let at = theta_up(0.6, 1.3, &sizes, &q_hat, sel, &q_hat).unwrap();
            assert!((at - theta(0.6, 1.3, &sizes, &q_hat, sel).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn objective_maps_to_distortion() {
    let sizes = [2, 1];
    let q = [0.4, 1.7];
    let (rho, sigma2, lambda) = (0.3, 1.5, 0.7);
    let t = symmetric_objective(rho, sigma2, &sizes, &q).unwrap();
    let small = SmallModel::new(oracles::equicorrelated(rho, sigma2, 3), vec![lambda; 3]);
    let d = small.distortion(&expand(&q, &sizes));
    assert!((distortion_from_objective(rho, sigma2, 3, lambda, t) - d).abs() < 1e-12);
}

#[test]
fn agrees_with_general_algorithm() {
    for (rho, groups) in [(0.5, vec![(2, 0.5), (3, 1.5)]), (0.8, vec![(4, 1.0)]), (0.2, vec![(1, 2.0), (2, 0.3)])] {
        let sym = model(rho, 1.0, &groups);
        let m = sym.devices();
        let lambda = 1.0 / m as f64;
        let s = optimize_symmetric(&sym, lambda, &MmOptions::default()).unwrap();
        let g = mm_general::optimize(&sym.expand(lambda).unwrap(), &sym.budget(), &MmOptions::default()).unwrap();
        let rel = (s.distortion - g.distortion).abs() / g.distortion;
        assert!(rel <= 1e-4, "{groups:?}: {} vs {} ({rel})", s.distortion, g.distortion);
        assert_eq!(s.constraint_count, enumerate_selections(&sym.group_sizes()).unwrap().len());
    }
}

/// `½ log2 det` by Cholesky, independent of the library.
fn half_log2_det(a: &DMatrix<f64>) -> f64 {
    let l = a.clone().cholesky().unwrap();
    (0..a.nrows()).map(|i| l.l()[(i, i)].ln()).sum::<f64>() / std::f64::consts::LN_2
}

#[test]
fn ten_devices_match_grid() {
    let (rho, sizes, rates) = (0.5, [5usize, 5], [0.5, 2.0]);
    let m = 10;
    let sigma = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho });
    let c = nalgebra::DVector::from_element(m, 0.1);
    let sels = enumerate_selections(&sizes).unwrap();
    let check = |q: [f64; 2]| -> Option<f64> {
        let qd = expand(&q, &sizes);
        let mut a = sigma.clone();
        for i in 0..m {
            a[(i, i)] += qd[i];
        }
        let joint = half_log2_det(&a);
        for sel in &sels {
            let mask = sel.representative_mask(&sizes);
            let rest: Vec<usize> = (0..m).filter(|i| mask & (1 << i) == 0).collect();
            let sub = DMatrix::from_fn(rest.len(), rest.len(), |i, j| a[(rest[i], rest[j])]);
            let cond = if rest.is_empty() { 0.0 } else { half_log2_det(&sub) };
            let noise: f64 = (0..m).filter(|i| mask & (1 << i) != 0).map(|i| 0.5 * qd[i].log2()).sum();
            let budget: f64 = sel.counts.iter().zip(&rates).map(|(&k, r)| k as f64 * r).sum();
            if joint - cond - noise > budget + 1e-9 {
                return None;
            }
        }
        let sc = &sigma * &c;
        let inv = a.try_inverse().unwrap();
        Some(c.dot(&sc) - (sc.transpose() * inv * &sc)[(0, 0)])
    };
    let (mut lo, mut hi): ([f64; 2], [f64; 2]) = ([1e-3; 2], [1e3; 2]);
    let mut best = (f64::INFINITY, [0.0; 2]);
    for _ in 0..5 {
        let ax = |k: usize, i: usize| (lo[k].ln() + (hi[k].ln() - lo[k].ln()) * i as f64 / 119.0).exp();
        for i in 0..120 {
            for j in 0..120 {
                let q = [ax(0, i), ax(1, j)];
                if let Some(d) = check(q) {
                    if d < best.0 {
                        best = (d, q);
                    }
                }
            }
        }
        let step: f64 = ((hi[0] / lo[0]).ln() / 119.0).exp();
        lo = [best.1[0] / step.powi(3), best.1[1] / step.powi(3)];
        hi = [best.1[0] * step.powi(3), best.1[1] * step.powi(3)];
    }
    let sym = model(rho, 1.0, &[(5, 0.5), (5, 2.0)]);
    let s = optimize_symmetric(&sym, 0.1, &MmOptions::default()).unwrap();
    assert!((s.distortion - best.0).abs() <= 1e-3 * best.0, "{} vs {:?}", s.distortion, best);
}

#[test]
fn trace_is_monotone() {
    let sym = model(0.7, 2.0, &[(3, 0.4), (2, 1.2), (1, 3.0)]);
    let s = optimize_symmetric(&sym, 0.2, &MmOptions::default()).unwrap();
    assert!(s.converged);
    for w in s.trace.windows(2) {
        assert!(w[1].objective >= w[0].objective - 1e-10);
    }
    assert!(s.trace.iter().all(|t| t.worst_slack >= -1e-9));
}
