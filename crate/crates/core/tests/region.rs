mod oracles;

use mbtc_core::model::{symmetric_covariance, GaussianSourceModel, MbtcParams, RateBudget};
use mbtc_core::region::*;
use nalgebra::{DMatrix, DVector};
use oracles::SmallModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rows(m: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(m.len(), m.len(), |i, j| m[i][j])
}

#[test]
fn conditional_mi_matches_sampled_estimate() {
    let sigma = oracles::equicorrelated(0.9, 1.0, 2);
    let model = GaussianSourceModel::new(rows(&sigma), DVector::from_element(2, 0.5)).unwrap();
    let q = MbtcParams::new(vec![0.1, 0.2]).unwrap();
    let exact = cond_mutual_info(&model, &q, 0b01).unwrap();
    let mc = oracles::mc_conditional_mi_2(&sigma, q.values(), 0, 1_000_000, 17);
    assert!((exact - mc).abs() < 0.02, "{exact} vs {mc}");
    let exact = cond_mutual_info(&model, &q, 0b10).unwrap();
    let mc = oracles::mc_conditional_mi_2(&sigma, q.values(), 1, 1_000_000, 18);
    assert!((exact - mc).abs() < 0.02, "{exact} vs {mc}");
}

#[test]
fn explicit_determinants_agree() {
    for seed in 0..10 {
        let m = 2 + (seed as usize % 3);
        let sigma = oracles::random_covariance(m, seed);
        let small = SmallModel::new(sigma.clone(), vec![0.3; m]);
        let model = GaussianSourceModel::new(rows(&sigma), DVector::from_element(m, 0.3)).unwrap();
        let q: Vec<f64> = (0..m).map(|i| 0.05 + 0.2 * i as f64).collect();
        let qp = MbtcParams::new(q.clone()).unwrap();
        for mask in 1..(1u32 << m) {
            let a = constraint_mutual_info(&model, &qp, mask).unwrap();
            let b = small.mi(&q, mask);
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "mask {mask}: {a} vs {b}");
        }
        let d = distortion(&model, &qp).unwrap();
        assert!((d - small.distortion(&q)).abs() < 1e-10);
    }
}

#[test]
fn chain_rule_identity() {
    for seed in 0..10 {
        let m = 2 + (seed as usize % 4);
        let sigma = rows(&oracles::random_covariance(m, 100 + seed));
        let model = GaussianSourceModel::new(sigma.clone(), DVector::from_element(m, 1.0)).unwrap();
        let q: Vec<f64> = (0..m).map(|i| 0.1 + 0.3 * i as f64).collect();
        let qp = MbtcParams::new(q.clone()).unwrap();
        let sum = sum_mutual_info(&model, &qp).unwrap();
        for mask in 1..((1u32 << m) - 1) {
            let sc: Vec<usize> = (0..m).filter(|i| mask & (1 << i) == 0).collect();
            let marginal = DMatrix::from_fn(sc.len(), sc.len(), |a, b| {
                sigma[(sc[a], sc[b])] + if a == b { q[sc[a]] } else { 0.0 }
            });
            let noise: f64 = sc.iter().map(|&i| q[i]).product();
            let rest = 0.5 * (marginal.determinant() / noise).log2();
            let cond = cond_mutual_info(&model, &qp, mask).unwrap();
            assert!((sum - cond - rest).abs() <= 1e-10 * sum, "mask {mask}");
        }
    }
}

#[test]
fn sampled_mmse_matches_closed_form() {
    let m = 3;
    let sigma_rows = oracles::random_covariance(m, 5);
    let sigma = rows(&sigma_rows);
    let c = DVector::from_vec(vec![0.2, 0.5, 0.3]);
    let model = GaussianSourceModel::new(sigma.clone(), c.clone()).unwrap();
    let q = MbtcParams::new(vec![0.3, 0.1, 0.6]).unwrap();
    let w = mmse_combiner(&model, &q).unwrap();
    let l = sigma.cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples = 1_000_000;
    let mut err = 0.0;
    for _ in 0..samples {
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &l * z;
        let u = DVector::from_fn(m, |i, _| x[i] + q.values()[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let e = c.dot(&x) - w.dot(&u);
        err += e * e;
    }
    let empirical = err / samples as f64;
    let exact = distortion(&model, &q).unwrap();
    assert!((empirical - exact).abs() < 0.01 * exact, "{empirical} vs {exact}");
}

#[test]
fn single_source_point_is_on_the_boundary() {
    for (s2, r) in [(1.0, 1.0), (1.0, 0.5), (4.0, 2.0), (0.3, 3.0)] {
        let (q, d) = single_source_rd(s2, r).unwrap();
        let model = GaussianSourceModel::new(DMatrix::from_element(1, 1, s2), DVector::from_element(1, 1.0)).unwrap();
        let qp = MbtcParams::new(vec![q]).unwrap();
        assert!((distortion(&model, &qp).unwrap() - d).abs() <= 1e-12 * d);
        assert!((sum_mutual_info(&model, &qp).unwrap() - r).abs() < 1e-12);
    }
}

#[test]
fn grid_feasibility_verdicts_match() {
    let sigma = oracles::equicorrelated(0.9, 1.0, 2);
    let small = SmallModel::new(sigma.clone(), vec![0.5, 0.5]);
    let model = GaussianSourceModel::new(rows(&sigma), DVector::from_element(2, 0.5)).unwrap();
    let budget = RateBudget::new(vec![1.0, 1.0]).unwrap();
    let mut disagreements = 0;
    for i in 0..100 {
        for j in 0..100 {
            let q = [10f64.powf(-2.0 + 3.0 * i as f64 / 99.0), 10f64.powf(-2.0 + 3.0 * j as f64 / 99.0)];
            let ours = is_feasible(&model, &MbtcParams::new(q.to_vec()).unwrap(), &budget).unwrap().feasible;
            if ours != small.feasible(&q, budget.rates()) {
                disagreements += 1;
            }
        }
    }
    assert_eq!(disagreements, 0);
}

#[test]
fn evaluation_invariants() {
    let model = GaussianSourceModel::new(symmetric_covariance(0.6, 2.0, 4).unwrap(), DVector::from_element(4, 0.25)).unwrap();
    let ev = evaluate(&model, &MbtcParams::new(vec![0.2, 0.4, 0.8, 1.6]).unwrap()).unwrap();
    assert_eq!(ev.conditional_rates.len(), 14);
    for v in ev.conditional_rates.values() {
        assert!(*v <= ev.sum_rate + 1e-9 && *v >= 0.0);
    }
    assert!(ev.distortion >= 0.0 && ev.distortion <= model.target_energy() + 1e-9);
}

#[test]
fn silent_devices_drop_out() {
    let model = GaussianSourceModel::new(symmetric_covariance(0.9, 1.0, 2).unwrap(), DVector::from_element(2, 0.5)).unwrap();
    let silent = MbtcParams::new(vec![f64::INFINITY; 2]).unwrap();
    assert!((distortion(&model, &silent).unwrap() - 0.95).abs() < 1e-15);
    let one = MbtcParams::new(vec![0.5, f64::INFINITY]).unwrap();
    let huge = MbtcParams::new(vec![0.5, 1e12]).unwrap();
    assert!((distortion(&model, &one).unwrap() - distortion(&model, &huge).unwrap()).abs() < 1e-9);
    assert_eq!(mmse_combiner(&model, &one).unwrap()[1], 0.0);
}

#[test]
fn enumeration_cap() {
    let m = 26;
    let model = GaussianSourceModel::new(DMatrix::identity(m, m), DVector::from_element(m, 1.0)).unwrap();
    let r = is_feasible(&model, &MbtcParams::uniform(m, 1.0).unwrap(), &RateBudget::uniform(m, 1.0).unwrap());
    assert!(matches!(r, Err(mbtc_core::Error::Size(_))));
}
