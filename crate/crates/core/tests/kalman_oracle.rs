mod common;

use common::{norm_rel_err, random_model, random_observations, JointGaussian};
use lrtbench::kalman::{filter, log_likelihood, log_likelihood_from_innovations, smooth};
use lrtbench::linalg::min_eigenvalue;
use lrtbench::{ModelParams, Seed};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[test]
fn likelihood_matches_dense_gaussian() {
    let mut rng = Seed(100).rng();
    for trial in 0..120 {
        let (n, m) = match trial % 3 {
            0 => (1, 1),
            1 => (2, 1),
            _ => (2, 2),
        };
        let t = rng.random_range(1..=8);
        let p = random_model(&mut rng, n, m);
        let z = random_observations(&mut rng, m, t);
        let got = log_likelihood(&p, &z).unwrap();
        let want = JointGaussian::new(&p, t).log_density(&z);
        let rel = (got - want).abs() / want.abs();
        assert!(rel < 1e-8, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn random_scalar_t6_likelihood() {
    let mut rng = Seed(6).rng();
    let p = random_model(&mut rng, 1, 1);
    let z = random_observations(&mut rng, 1, 6);
    let want = JointGaussian::new(&p, 6).log_density(&z);
    assert!((log_likelihood(&p, &z).unwrap() - want).abs() <= 1e-9 * want.abs());
}

#[test]
fn smoother_matches_dense_conditioning() {
    let mut rng = Seed(200).rng();
    for trial in 0..60 {
        let n = if trial % 4 == 3 { 2 } else { 1 };
        let t = rng.random_range(1..=6);
        let p = random_model(&mut rng, n, 1);
        let z = random_observations(&mut rng, 1, t);
        let (_, sr) = smooth(&p, &z).unwrap();
        let jg = JointGaussian::new(&p, t);
        let (mean, cov) = jg.condition(&z);
        let means: Vec<DMatrix<f64>> =
            (0..=t).map(|k| DMatrix::from_column_slice(n, 1, mean.rows(k * n, n).as_slice())).collect();
        let got_means: Vec<DMatrix<f64>> =
            sr.x_smooth.iter().map(|x| DMatrix::from_column_slice(n, 1, x.as_slice())).collect();
        assert!(norm_rel_err(&got_means, &means) < 1e-8, "trial {trial} means");
        let covs: Vec<DMatrix<f64>> = (0..=t).map(|k| jg.block(&cov, k, k)).collect();
        assert!(norm_rel_err(&sr.p_smooth, &covs) < 1e-8, "trial {trial} covs");
        let lags: Vec<DMatrix<f64>> = (1..=t).map(|k| jg.block(&cov, k, k - 1)).collect();
        assert!(norm_rel_err(&sr.p_lag, &lags) < 1e-8, "trial {trial} lags");
    }
}

#[test]
fn filter_result_is_internally_consistent() {
    let mut rng = Seed(300).rng();
    for _ in 0..30 {
        let p = random_model(&mut rng, 2, 2);
        let z = random_observations(&mut rng, 2, 7);
        let fr = filter(&p, &z).unwrap();
        assert!((log_likelihood_from_innovations(&fr) - fr.log_likelihood).abs() < 1e-12);
        for s in &fr.innovation_cov {
            assert!(min_eigenvalue(s) > 0.0);
        }
        for pm in fr.p_filt.iter().chain(&fr.p_pred) {
            assert_eq!(pm, &pm.transpose());
            assert!(min_eigenvalue(pm) > -1e-10);
        }
    }
}

#[test]
fn smoothing_never_increases_uncertainty() {
    let mut rng = Seed(400).rng();
    for _ in 0..40 {
        let p = random_model(&mut rng, 2, 1);
        let z = random_observations(&mut rng, 1, 8);
        let (fr, sr) = smooth(&p, &z).unwrap();
        for (pf, ps) in fr.p_filt.iter().zip(&sr.p_smooth) {
            assert!(min_eigenvalue(&(pf - ps)) >= -1e-10);
        }
    }
}

#[test]
fn likelihood_is_basis_independent() {
    let mut rng = Seed(500).rng();
    for _ in 0..20 {
        let p = random_model(&mut rng, 2, 1);
        let z = random_observations(&mut rng, 1, 8);
        let tm = DMatrix::from_row_slice(2, 2, &[1.3, 0.4, -0.2, 0.9]);
        let ti = tm.clone().try_inverse().unwrap();
        let q = ModelParams {
            f: &tm * &p.f * &ti,
            h: &p.h * &ti,
            q: {
                let a = &tm * &p.q * tm.transpose();
                (&a + a.transpose()) * 0.5
            },
            r: p.r.clone(),
            mu0: &tm * &p.mu0,
            sigma0: {
                let a = &tm * &p.sigma0 * tm.transpose();
                (&a + a.transpose()) * 0.5
            },
        };
        let a = log_likelihood(&p, &z).unwrap();
        let b = log_likelihood(&q, &z).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn scalar_example_values() {
    let p = ModelParams::scalar(1.0, 1.0, 0.5, 0.5, 0.0, 1.0);
    let fr = filter(&p, &[DVector::from_element(1, 2.0)]).unwrap();
    assert_eq!(fr.innovation_cov[0][(0, 0)], 2.0);
}
