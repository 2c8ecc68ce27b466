//! Test-only oracles. Nothing here calls into the Kalman recursions.
#![allow(dead_code)]

use lrtbench::em::SufficientStats;
use lrtbench::lstm::{self, backward, forward, LstmParams, Normalizer, Tensor};
use lrtbench::{Label, ModelParams, Seed};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Joint Gaussian of (x_0..x_T, z_1..z_T) assembled by explicit covariance
/// propagation.
pub struct JointGaussian {
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub mean_x: DVector<f64>,
    pub mean_z: DVector<f64>,
    pub cov_xx: DMatrix<f64>,
    pub cov_xz: DMatrix<f64>,
    pub cov_zz: DMatrix<f64>,
}

impl JointGaussian {
    pub fn new(p: &ModelParams, t: usize) -> Self {
        let n = p.f.nrows();
        let m = p.h.nrows();
        // c[k][j] = Cov(x_k, x_j)
        let mut c = vec![vec![DMatrix::<f64>::zeros(n, n); t + 1]; t + 1];
        c[0][0] = p.sigma0.clone();
        for k in 1..=t {
            for j in 0..k {
                c[k][j] = &p.f * &c[k - 1][j];
                c[j][k] = c[k][j].transpose();
            }
            c[k][k] = &p.f * &c[k - 1][k - 1] * p.f.transpose() + &p.q;
        }
        let mut mean_x = DVector::zeros(n * (t + 1));
        let mut mk = p.mu0.clone();
        for k in 0..=t {
            if k > 0 {
                mk = &p.f * &mk;
            }
            mean_x.rows_mut(k * n, n).copy_from(&mk);
        }
        let mut mean_z = DVector::zeros(m * t);
        for k in 1..=t {
            let xk = mean_x.rows(k * n, n).into_owned();
            mean_z.rows_mut((k - 1) * m, m).copy_from(&(&p.h * xk));
        }
        let mut cov_xx = DMatrix::zeros(n * (t + 1), n * (t + 1));
        for i in 0..=t {
            for j in 0..=t {
                cov_xx.view_mut((i * n, j * n), (n, n)).copy_from(&c[i][j]);
            }
        }
        let mut cov_xz = DMatrix::zeros(n * (t + 1), m * t);
        for i in 0..=t {
            for k in 1..=t {
                cov_xz.view_mut((i * n, (k - 1) * m), (n, m)).copy_from(&(&c[i][k] * p.h.transpose()));
            }
        }
        let mut cov_zz = DMatrix::zeros(m * t, m * t);
        for i in 1..=t {
            for j in 1..=t {
                let mut blk = &p.h * &c[i][j] * p.h.transpose();
                if i == j {
                    blk += &p.r;
                }
                cov_zz.view_mut(((i - 1) * m, (j - 1) * m), (m, m)).copy_from(&blk);
            }
        }
        JointGaussian { n, m, t, mean_x, mean_z, cov_xx, cov_xz, cov_zz }
    }

    fn stack(&self, z: &[DVector<f64>]) -> DVector<f64> {
        let mut v = DVector::zeros(self.m * self.t);
        for (k, zk) in z.iter().enumerate() {
            v.rows_mut(k * self.m, self.m).copy_from(zk);
        }
        v
    }

    pub fn log_density(&self, z: &[DVector<f64>]) -> f64 {
        let d = self.stack(z) - &self.mean_z;
        let lu = self.cov_zz.clone().lu();
        let det = lu.determinant();
        let sol = lu.solve(&d).unwrap();
        let dim = (self.m * self.t) as f64;
        -0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + det.ln() + d.dot(&sol))
    }

    /// Posterior mean and covariance of the stacked states given z.
    pub fn condition(&self, z: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.stack(z) - &self.mean_z;
        let inv = self.cov_zz.clone().try_inverse().unwrap();
        let gain = &self.cov_xz * inv;
        let mean = &self.mean_x + &gain * d;
        let cov = &self.cov_xx - &gain * self.cov_xz.transpose();
        (mean, cov)
    }

    pub fn block(&self, cov: &DMatrix<f64>, i: usize, j: usize) -> DMatrix<f64> {
        cov.view((i * self.n, j * self.n), (self.n, self.n)).into_owned()
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn random_spd<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    if n == 1 {
        return DMatrix::from_element(1, 1, log_uniform(rng, lo, hi));
    }
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| log_uniform(rng, lo, hi)));
    let m = &a * &a.transpose() * 0.3 * lo.max(hi * 0.1) + d;
    (&m + m.transpose()) * 0.5
}

pub fn random_model<R: Rng>(rng: &mut R, n: usize, m: usize) -> ModelParams {
    let f = if n == 1 {
        DMatrix::from_element(1, 1, rng.random_range(-1.2..1.2))
    } else {
        DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.7..0.7))
    };
    let h = DMatrix::from_fn(m, n, |_, _| {
        let v: f64 = rng.random_range(0.2..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    ModelParams {
        f,
        h,
        q: random_spd(rng, n, 1e-2, 1.0),
        r: random_spd(rng, m, 1e-2, 1.0),
        mu0: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        sigma0: random_spd(rng, n, 1e-2, 1.0),
    }
}

pub fn random_observations<R: Rng>(rng: &mut R, m: usize, t: usize) -> Vec<DVector<f64>> {
    (0..t).map(|_| DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0))).collect()
}

/// max |a - b| / max(max |b|, 1e-300) over a set of matrices.
pub fn norm_rel_err(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    let scale = b.iter().flat_map(|m| m.iter()).fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(u, v)| (u - v).abs())).fold(0.0, f64::max) / scale
}

/// Scalar statistics built from moments of random samples, so they are
/// jointly consistent.
pub fn random_scalar_stats<R: Rng>(rng: &mut R) -> SufficientStats {
    let t = rng.random_range(5..200);
    let n_seq = rng.random_range(1..10);
    let draws: Vec<(f64, f64, f64)> = (0..t)
        .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
        .collect();
    let sum = |f: &dyn Fn(&(f64, f64, f64)) -> f64| draws.iter().map(f).sum::<f64>();
    let s00 = sum(&|d| d.0 * d.0) + 0.1;
    let s10 = sum(&|d| d.1 * d.0);
    let s11 = sum(&|d| d.1 * d.1) + 0.1;
    let m10 = sum(&|d| d.2 * d.1);
    let m11 = sum(&|d| d.2 * d.2) + 0.1;
    let x0s: Vec<f64> = (0..n_seq).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p0 = rng.random_range(0.01..1.0);
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    SufficientStats {
        s11: m(s11),
        s10: m(s10),
        s00: m(s00),
        m11: m(m11),
        m10: m(m10),
        m00: m(s11),
        x0_sum: DVector::from_element(1, x0s.iter().sum()),
        p0_sum: m(x0s.iter().map(|x| p0 + x * x).sum()),
        n_seq,
        t_total: t,
    }
}

pub fn random_instance(seed: u64, n_h: usize, m_z: usize, t: usize) -> (LstmParams, Vec<DVector<f64>>, Label) {
    let mut rng = Seed(seed).rng();
    let mut p = LstmParams::init(n_h, m_z, &mut rng);
    for v in p.values.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let obs = (0..t).map(|_| DVector::from_fn(m_z, |_, _| rng.random_range(-2.0..2.0))).collect();
    let label = if rng.random_bool(0.5) { Label::One } else { Label::Two };
    (p, obs, label)
}

fn loss_at(p: &LstmParams, obs: &[DVector<f64>], label: Label) -> f64 {
    lstm::loss(&forward(p, &Normalizer::identity(p.m_z()), obs).unwrap(), label)
}

/// Largest per-tensor error of the analytic gradient against central
/// differences, relative to the tensor's largest finite-difference entry.
pub fn gradient_check(p: &LstmParams, obs: &[DVector<f64>], label: Label) -> (f64, &'static str) {
    let cache = forward(p, &Normalizer::identity(p.m_z()), obs).unwrap();
    let analytic = backward(&cache, p, label).unwrap();
    let h = 1e-5;
    let mut worst = (0.0, "");
    for t in Tensor::ALL {
        let range = p.layout.range(t);
        let mut numeric = Vec::with_capacity(range.len());
        for i in range.clone() {
            let mut plus = p.clone();
            plus.values[i] += h;
            let mut minus = p.clone();
            minus.values[i] -= h;
            numeric.push((loss_at(&plus, obs, label) - loss_at(&minus, obs, label)) / (2.0 * h));
        }
        let scale = numeric.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-8);
        let err = range.zip(&numeric).map(|(i, n)| (analytic[i] - n).abs()).fold(0.0, f64::max) / scale;
        if err > worst.0 {
            worst = (err, t.name());
        }
    }
    worst
}
