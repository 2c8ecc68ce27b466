//! Kalman filter with the innovations-form log-likelihood, and the RTS
//! smoother with lag-one cross-covariances.
//!
//! For a fixed model and sequence length the covariance recursion does not
//! depend on the observations, so it is run once and shared by every
//! sequence of a batch. The mean recursions then run column-wise over an
//! `m × N` matrix holding all sequences at one time step.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{self, CompensatedSum};
use crate::ssm::{validate_model, ModelParams};

const MAX_CONDITION: f64 = 1e14;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Observations of `N` equal-length sequences, stored per time step as an
/// `m_z × N` matrix.
#[derive(Clone, Debug)]
pub struct ObservationBatch {
    steps: Vec<DMatrix<f64>>,
    n: usize,
}

impl ObservationBatch {
    pub fn new<'a, I>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [DVector<f64>]>,
    {
        let seqs: Vec<&[DVector<f64>]> = sequences.into_iter().collect();
        let first =
            seqs.first().ok_or_else(|| Error::InvalidInput("batch must contain at least one sequence".into()))?;
        let t = first.len();
        if t == 0 {
            return Err(Error::InvalidInput("sequences must have at least one observation".into()));
        }
        let m = first[0].len();
        for (i, s) in seqs.iter().enumerate() {
            if s.len() != t || s.iter().any(|z| z.len() != m) {
                return Err(Error::Dimension(format!("sequence {i} does not match T={t}, m_z={m}")));
            }
            if s.iter().any(|z| z.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("observations of sequence {i}")));
            }
        }
        let n = seqs.len();
        let steps = (0..t).map(|k| DMatrix::from_fn(m, n, |i, j| seqs[j][k][i])).collect();
        Ok(ObservationBatch { steps, n })
    }

    pub fn from_sequence(obs: &[DVector<f64>]) -> Result<Self> {
        Self::new(std::iter::once(obs))
    }

    /// Number of sequences.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn seq_len(&self) -> usize {
        self.steps.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.steps[0].nrows()
    }

    /// `z_k` for all sequences, `k` in `1..=T`.
    pub fn step(&self, k: usize) -> &DMatrix<f64> {
        &self.steps[k - 1]
    }

    pub(crate) fn steps(&self) -> &[DMatrix<f64>] {
        &self.steps
    }
}

/// Data-independent part of the forward pass. Step-indexed vectors hold step
/// `k` at index `k - 1`; `p_filt` holds `Sigma0` at index 0.
pub(crate) struct CovariancePass {
    pub p_pred: Vec<DMatrix<f64>>,
    pub p_filt: Vec<DMatrix<f64>>,
    pub s: Vec<DMatrix<f64>>,
    pub s_chol: Vec<Cholesky<f64, Dyn>>,
    pub log_det_2pi_s: Vec<f64>,
    pub gain: Vec<DMatrix<f64>>,
}

impl CovariancePass {
    pub fn run(params: &ModelParams, t: usize) -> Result<Self> {
        let n = params.state_dim();
        let m = params.obs_dim();
        let eye = DMatrix::<f64>::identity(n, n);
        let ft = params.f.transpose();
        let ht = params.h.transpose();
        let mut pass = CovariancePass {
            p_pred: Vec::with_capacity(t),
            p_filt: Vec::with_capacity(t + 1),
            s: Vec::with_capacity(t),
            s_chol: Vec::with_capacity(t),
            log_det_2pi_s: Vec::with_capacity(t),
            gain: Vec::with_capacity(t),
        };
        pass.p_filt.push(linalg::symmetrize(&params.sigma0));
        for k in 1..=t {
            let p_prev = &pass.p_filt[k - 1];
            let p_pred = linalg::symmetrize(&(&params.f * p_prev * &ft + &params.q));
            let s = linalg::symmetrize(&(&params.h * &p_pred * &ht + &params.r));
            let condition = linalg::condition_number(&s);
            if !(condition <= MAX_CONDITION) {
                return Err(Error::FilterDivergence { step: k, condition });
            }
            let chol = linalg::cholesky(&s).ok_or(Error::FilterDivergence { step: k, condition })?;
            // K = P_pred Hᵀ S⁻¹, obtained as (S⁻¹ H P_pred)ᵀ.
            let gain = chol.solve(&(&params.h * &p_pred)).transpose();
            let a = &eye - &gain * &params.h;
            let p_filt = linalg::symmetrize(&(&a * &p_pred * a.transpose() + &gain * &params.r * gain.transpose()));
            pass.log_det_2pi_s.push(m as f64 * LN_2PI + linalg::log_det_from_cholesky(&chol));
            pass.p_pred.push(p_pred);
            pass.s.push(s);
            pass.s_chol.push(chol);
            pass.gain.push(gain);
            pass.p_filt.push(p_filt);
        }
        Ok(pass)
    }

    pub fn seq_len(&self) -> usize {
        self.p_pred.len()
    }
}

/// Data-independent part of the backward pass.
pub(crate) struct CovarianceSmoother {
    /// `J_k` for `k = 0..T-1`.
    pub gains: Vec<DMatrix<f64>>,
    /// `P_{k|T}` for `k = 0..T`.
    pub p_smooth: Vec<DMatrix<f64>>,
    /// `P_{k,k-1|T}` at index `k - 1`.
    pub p_lag: Vec<DMatrix<f64>>,
}

impl CovarianceSmoother {
    pub fn run(params: &ModelParams, cov: &CovariancePass) -> Result<Self> {
        let t = cov.seq_len();
        let n = params.state_dim();
        let ft = params.f.transpose();
        let mut gains = Vec::with_capacity(t);
        for k in 0..t {
            // J_k = P_{k|k} Fᵀ P_{k+1|k}⁻¹ = (P_{k+1|k}⁻¹ F P_{k|k})ᵀ
            let p_pred = &cov.p_pred[k];
            let rhs = &params.f * &cov.p_filt[k];
            let condition = linalg::condition_number(p_pred);
            let gain = if condition <= MAX_CONDITION {
                let chol = linalg::cholesky(p_pred).ok_or(Error::SmootherSingular { step: k + 1, condition })?;
                chol.solve(&rhs).transpose()
            } else if rhs.iter().all(|v| *v == 0.0) {
                // The state at step k is known exactly, so there is nothing to propagate.
                DMatrix::zeros(n, n)
            } else {
                return Err(Error::SmootherSingular { step: k + 1, condition });
            };
            gains.push(gain);
        }

        let mut p_smooth = vec![DMatrix::zeros(n, n); t + 1];
        p_smooth[t] = cov.p_filt[t].clone();
        for k in (0..t).rev() {
            let j = &gains[k];
            let p = &cov.p_filt[k] + j * (&p_smooth[k + 1] - &cov.p_pred[k]) * j.transpose();
            p_smooth[k] = linalg::symmetrize(&p);
        }

        let mut p_lag = vec![DMatrix::zeros(n, n); t];
        let eye = DMatrix::<f64>::identity(n, n);
        p_lag[t - 1] = (&eye - &cov.gain[t - 1] * &params.h) * &params.f * &cov.p_filt[t - 1];
        for k in (1..t).rev() {
            let jt_prev = gains[k - 1].transpose();
            p_lag[k - 1] = &cov.p_filt[k] * &jt_prev + &gains[k] * (&p_lag[k] - &params.f * &cov.p_filt[k]) * &jt_prev;
        }
        let _ = ft;
        Ok(CovarianceSmoother { gains, p_smooth, p_lag })
    }
}

/// Column-batched forward means. Layout as in [`CovariancePass`].
pub(crate) struct MeanFilter {
    pub x_pred: Vec<DMatrix<f64>>,
    pub x_filt: Vec<DMatrix<f64>>,
    pub innovations: Vec<DMatrix<f64>>,
    pub log_likelihood: Vec<f64>,
}

impl MeanFilter {
    pub fn run(params: &ModelParams, cov: &CovariancePass, batch: &ObservationBatch) -> Self {
        let n = batch.len();
        let t = batch.seq_len();
        let mut x = DMatrix::from_fn(params.state_dim(), n, |i, _| params.mu0[i]);
        let mut x_pred = Vec::with_capacity(t);
        let mut x_filt = Vec::with_capacity(t + 1);
        let mut innovations = Vec::with_capacity(t);
        let mut ll = vec![CompensatedSum::default(); n];
        x_filt.push(x.clone());
        for (k, z) in batch.steps().iter().enumerate() {
            let xp = &params.f * &x;
            let innov = z - &params.h * &xp;
            let solved = cov.s_chol[k].solve(&innov);
            for (j, acc) in ll.iter_mut().enumerate() {
                let quad = innov.column(j).dot(&solved.column(j));
                acc.add(-0.5 * (cov.log_det_2pi_s[k] + quad));
            }
            x = &xp + &cov.gain[k] * &innov;
            x_pred.push(xp);
            innovations.push(innov);
            x_filt.push(x.clone());
        }
        MeanFilter { x_pred, x_filt, innovations, log_likelihood: ll.iter().map(CompensatedSum::value).collect() }
    }
}

/// Smoothed means `x_{k|T}` for `k = 0..T`, column-batched.
pub(crate) fn smooth_means(cs: &CovarianceSmoother, mf: &MeanFilter) -> Vec<DMatrix<f64>> {
    let t = mf.x_pred.len();
    let mut xs = vec![DMatrix::zeros(0, 0); t + 1];
    xs[t] = mf.x_filt[t].clone();
    for k in (0..t).rev() {
        xs[k] = &mf.x_filt[k] + &cs.gains[k] * (&xs[k + 1] - &mf.x_pred[k]);
    }
    xs
}

/// All forward and backward quantities for a batch.
pub(crate) struct BatchSmooth {
    pub cov: CovariancePass,
    pub cov_smooth: CovarianceSmoother,
    pub means: MeanFilter,
    pub x_smooth: Vec<DMatrix<f64>>,
}

fn check_compat(params: &ModelParams, batch: &ObservationBatch) -> Result<()> {
    validate_model(params)?;
    if batch.obs_dim() != params.obs_dim() {
        return Err(Error::Dimension(format!(
            "observations have m_z={}, model expects {}",
            batch.obs_dim(),
            params.obs_dim()
        )));
    }
    Ok(())
}

pub(crate) fn smooth_batch(params: &ModelParams, batch: &ObservationBatch) -> Result<BatchSmooth> {
    check_compat(params, batch)?;
    let cov = CovariancePass::run(params, batch.seq_len())?;
    let cov_smooth = CovarianceSmoother::run(params, &cov)?;
    let means = MeanFilter::run(params, &cov, batch);
    let x_smooth = smooth_means(&cov_smooth, &means);
    Ok(BatchSmooth { cov, cov_smooth, means, x_smooth })
}

/// Innovations-form log-likelihood of every sequence in the batch.
pub fn log_likelihood_batch(params: &ModelParams, batch: &ObservationBatch) -> Result<Vec<f64>> {
    check_compat(params, batch)?;
    let cov = CovariancePass::run(params, batch.seq_len())?;
    Ok(MeanFilter::run(params, &cov, batch).log_likelihood)
}

/// Forward-pass output. Entries indexed by step hold step `k` at `k - 1`;
/// `x_filt` / `p_filt` hold the prior `mu0` / `Sigma0` at index 0.
#[derive(Clone, Debug)]
pub struct FilterResult {
    pub x_pred: Vec<DVector<f64>>,
    pub p_pred: Vec<DMatrix<f64>>,
    pub x_filt: Vec<DVector<f64>>,
    pub p_filt: Vec<DMatrix<f64>>,
    pub innovations: Vec<DVector<f64>>,
    pub innovation_cov: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

#[derive(Clone, Debug)]
pub struct SmootherResult {
    /// `x_{k|T}`, `k = 0..T`.
    pub x_smooth: Vec<DVector<f64>>,
    /// `P_{k|T}`, `k = 0..T`.
    pub p_smooth: Vec<DMatrix<f64>>,
    /// `P_{k,k-1|T}` at index `k - 1`.
    pub p_lag: Vec<DMatrix<f64>>,
}

fn first_column(m: &DMatrix<f64>) -> DVector<f64> {
    m.column(0).into_owned()
}

fn filter_result(cov: &CovariancePass, means: &MeanFilter) -> FilterResult {
    FilterResult {
        x_pred: means.x_pred.iter().map(first_column).collect(),
        p_pred: cov.p_pred.clone(),
        x_filt: means.x_filt.iter().map(first_column).collect(),
        p_filt: cov.p_filt.clone(),
        innovations: means.innovations.iter().map(first_column).collect(),
        innovation_cov: cov.s.clone(),
        gains: cov.gain.clone(),
        log_likelihood: means.log_likelihood[0],
    }
}

pub fn filter(params: &ModelParams, obs: &[DVector<f64>]) -> Result<FilterResult> {
    let batch = ObservationBatch::from_sequence(obs)?;
    check_compat(params, &batch)?;
    let cov = CovariancePass::run(params, batch.seq_len())?;
    let means = MeanFilter::run(params, &cov, &batch);
    Ok(filter_result(&cov, &means))
}

/// `log p(z_1..z_T)` from the innovations:
/// `-½ Σ_k [log det(2π S_k) + υ_kᵀ S_k⁻¹ υ_k]`.
pub fn log_likelihood(params: &ModelParams, obs: &[DVector<f64>]) -> Result<f64> {
    Ok(log_likelihood_batch(params, &ObservationBatch::from_sequence(obs)?)?[0])
}

pub fn smooth(params: &ModelParams, obs: &[DVector<f64>]) -> Result<(FilterResult, SmootherResult)> {
    let batch = ObservationBatch::from_sequence(obs)?;
    let bs = smooth_batch(params, &batch)?;
    let fr = filter_result(&bs.cov, &bs.means);
    let sr = SmootherResult {
        x_smooth: bs.x_smooth.iter().map(first_column).collect(),
        p_smooth: bs.cov_smooth.p_smooth,
        p_lag: bs.cov_smooth.p_lag,
    };
    Ok((fr, sr))
}

/// Recomputes the log-likelihood from stored innovations; used to check
/// internal consistency of a [`FilterResult`].
pub fn log_likelihood_from_innovations(fr: &FilterResult) -> f64 {
    fr.innovations
        .iter()
        .zip(&fr.innovation_cov)
        .map(|(v, s)| {
            let chol = linalg::cholesky(s).expect("innovation covariance is positive definite");
            let quad = v.dot(&chol.solve(v));
            -0.5 * (v.len() as f64 * LN_2PI + linalg::log_det_from_cholesky(&chol) + quad)
        })
        .collect::<CompensatedSum>()
        .value()
}
