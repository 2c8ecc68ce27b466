//! Maximum-likelihood estimation of state-space parameters with EM.
//!
//! The E-step smooths every training sequence under the current parameters
//! and accumulates the second-moment statistics `S11, S10, S00, M11, M10,
//! M00`; the M-step applies the closed-form updates
//!
//! ```text
//! F = S10 S00⁻¹        Q = (S11 − S10 S00⁻¹ S10ᵀ) / T
//! H = M10 M00⁻¹        R = (M11 − M10 M00⁻¹ M10ᵀ) / T
//! ```
//!
//! Several equal-length sequences are handled by summing their statistics,
//! with `T` the total number of steps. The initial-state update uses the
//! smoothed `x_{0|T}` of every sequence: `mu0` is their mean and `Sigma0` the
//! mean smoothed covariance plus their spread around `mu0`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::kalman::{self, ObservationBatch};
use crate::linalg::{self, CompensatedSum};
use crate::rng::Seed;
use crate::ssm::{validate_model, ModelParams, ModelSpec, StateTrajectory};
use crate::textfmt::to_toml_string;

const COVARIANCE_FLOOR: f64 = 1e-12;
const MAX_STATS_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats {
    pub s11: DMatrix<f64>,
    pub s10: DMatrix<f64>,
    pub s00: DMatrix<f64>,
    pub m11: DMatrix<f64>,
    pub m10: DMatrix<f64>,
    pub m00: DMatrix<f64>,
    /// `Σ_i x^{(i)}_{0|T}`.
    pub x0_sum: DVector<f64>,
    /// `Σ_i (P^{(i)}_{0|T} + x^{(i)}_{0|T} x^{(i)ᵀ}_{0|T})`.
    pub p0_sum: DMatrix<f64>,
    pub n_seq: usize,
    pub t_total: usize,
}

impl SufficientStats {
    pub fn zeros(n: usize, m: usize) -> Self {
        SufficientStats {
            s11: DMatrix::zeros(n, n),
            s10: DMatrix::zeros(n, n),
            s00: DMatrix::zeros(n, n),
            m11: DMatrix::zeros(m, m),
            m10: DMatrix::zeros(m, n),
            m00: DMatrix::zeros(n, n),
            x0_sum: DVector::zeros(n),
            p0_sum: DMatrix::zeros(n, n),
            n_seq: 0,
            t_total: 0,
        }
    }

    /// Mean smoothed initial state.
    pub fn x0_smooth(&self) -> DVector<f64> {
        &self.x0_sum / self.n_seq as f64
    }

    /// Mean smoothed initial covariance including between-sequence spread.
    pub fn p0_smooth(&self) -> DMatrix<f64> {
        let mean = self.x0_smooth();
        linalg::symmetrize(&(&self.p0_sum / self.n_seq as f64 - &mean * mean.transpose()))
    }

    pub fn merge(&self, other: &SufficientStats) -> SufficientStats {
        SufficientStats {
            s11: &self.s11 + &other.s11,
            s10: &self.s10 + &other.s10,
            s00: &self.s00 + &other.s00,
            m11: &self.m11 + &other.m11,
            m10: &self.m10 + &other.m10,
            m00: &self.m00 + &other.m00,
            x0_sum: &self.x0_sum + &other.x0_sum,
            p0_sum: &self.p0_sum + &other.p0_sum,
            n_seq: self.n_seq + other.n_seq,
            t_total: self.t_total + other.t_total,
        }
    }
}

/// E-step over a batch; also returns the observed-data log-likelihood of the
/// batch under `params`, which the forward pass yields for free.
pub fn e_step_with_log_likelihood(params: &ModelParams, batch: &ObservationBatch) -> Result<(SufficientStats, f64)> {
    // Covariances are shared by the batch, so a failure surfaces on the first sequence.
    let bs = kalman::smooth_batch(params, batch).map_err(|e| e.in_sequence(0))?;
    let n_seq = batch.len();
    let t = batch.seq_len();
    let w = n_seq as f64;
    let xs = &bs.x_smooth;
    let ps = &bs.cov_smooth.p_smooth;
    let mut st = SufficientStats::zeros(params.state_dim(), params.obs_dim());
    for k in 1..=t {
        let cur = &xs[k] * xs[k].transpose() + &ps[k] * w;
        st.s10 += &xs[k] * xs[k - 1].transpose() + &bs.cov_smooth.p_lag[k - 1] * w;
        st.s00 += &xs[k - 1] * xs[k - 1].transpose() + &ps[k - 1] * w;
        let z = batch.step(k);
        st.m11 += z * z.transpose();
        st.m10 += z * xs[k].transpose();
        st.s11 += &cur;
        st.m00 += cur;
    }
    st.x0_sum = xs[0].column_sum();
    st.p0_sum = &ps[0] * w + &xs[0] * xs[0].transpose();
    st.n_seq = n_seq;
    st.t_total = n_seq * t;
    let ll = bs.means.log_likelihood.iter().copied().collect::<CompensatedSum>().value();
    Ok((st, ll))
}

pub fn e_step(params: &ModelParams, batch: &ObservationBatch) -> Result<SufficientStats> {
    e_step_with_log_likelihood(params, batch).map(|(s, _)| s)
}

fn solve_right(numerator: &DMatrix<f64>, gram: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let condition = linalg::condition_number(gram);
    if !(condition < MAX_STATS_CONDITION) {
        return Err(Error::DegenerateStats(format!("{name} has condition number {condition:e}")));
    }
    // numerator · gram⁻¹ = (gram⁻¹ numeratorᵀ)ᵀ for symmetric gram.
    gram.clone()
        .lu()
        .solve(&numerator.transpose())
        .map(|x| x.transpose())
        .ok_or_else(|| Error::DegenerateStats(format!("{name} is singular")))
}

/// Closed-form maximizer of the expected complete-data log-likelihood.
/// When `estimate_initial_state` is false, `mu0` and `Sigma0` are copied
/// from `previous`.
pub fn m_step(stats: &SufficientStats, estimate_initial_state: bool, previous: &ModelParams) -> Result<ModelParams> {
    if stats.t_total == 0 || stats.n_seq == 0 {
        return Err(Error::DegenerateStats("no observations accumulated".into()));
    }
    let t = stats.t_total as f64;
    let f = solve_right(&stats.s10, &stats.s00, "S00")?;
    let q = (&stats.s11 - &f * stats.s10.transpose()) / t;
    let h = solve_right(&stats.m10, &stats.m00, "M00")?;
    let r = (&stats.m11 - &h * stats.m10.transpose()) / t;
    let (mu0, sigma0) = if estimate_initial_state {
        (stats.x0_smooth(), linalg::floor_eigenvalues(&stats.p0_smooth(), 0.0))
    } else {
        (previous.mu0.clone(), previous.sigma0.clone())
    };
    Ok(ModelParams {
        f,
        h,
        q: linalg::floor_eigenvalues(&q, COVARIANCE_FLOOR),
        r: linalg::floor_eigenvalues(&r, COVARIANCE_FLOOR),
        mu0,
        sigma0,
    })
}

fn trace_of_solve(cov: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<(f64, f64)> {
    let chol = linalg::cholesky(cov)?;
    Some((linalg::log_det_from_cholesky(&chol), chol.solve(rhs).trace()))
}

/// Expected complete-data log-likelihood (additive constants dropped) of
/// `params` given accumulated statistics. Returns `-inf` when a covariance
/// is not positive definite.
pub fn q_function(params: &ModelParams, stats: &SufficientStats) -> f64 {
    let (f, h) = (&params.f, &params.h);
    let n_seq = stats.n_seq as f64;
    let t = stats.t_total as f64;
    let mu = &params.mu0;
    let init =
        &stats.p0_sum - &stats.x0_sum * mu.transpose() - mu * stats.x0_sum.transpose() + mu * mu.transpose() * n_seq;
    let dyn_resid =
        &stats.s11 - &stats.s10 * f.transpose() - f * stats.s10.transpose() + f * &stats.s00 * f.transpose();
    let obs_resid =
        &stats.m11 - &stats.m10 * h.transpose() - h * stats.m10.transpose() + h * &stats.m00 * h.transpose();
    let terms = [(n_seq, &params.sigma0, init), (t, &params.q, dyn_resid), (t, &params.r, obs_resid)];
    let mut total = 0.0;
    for (weight, cov, resid) in terms.iter() {
        match trace_of_solve(cov, resid) {
            Some((log_det, tr)) => total += weight * log_det + tr,
            None => return f64::NEG_INFINITY,
        }
    }
    -0.5 * total
}

/// `-2 log p(Z, X | Θ)` with constants dropped, for a fully observed state
/// trajectory.
pub fn complete_data_neg2_log_likelihood(
    params: &ModelParams,
    states: &StateTrajectory,
    observations: &[DVector<f64>],
) -> Result<f64> {
    let t = observations.len();
    if states.states.len() != t + 1 {
        return Err(Error::Dimension("trajectory must have T + 1 states".into()));
    }
    let chol = |m: &DMatrix<f64>, name: &'static str| linalg::cholesky(m).ok_or(Error::NotPositiveDefinite { name });
    let (c0, cq, cr) = (chol(&params.sigma0, "Sigma0")?, chol(&params.q, "Q")?, chol(&params.r, "R")?);
    let x = &states.states;
    let d0 = &x[0] - &params.mu0;
    let mut acc = CompensatedSum::default();
    acc.add(linalg::log_det_from_cholesky(&c0));
    acc.add(t as f64 * linalg::log_det_from_cholesky(&cq));
    acc.add(t as f64 * linalg::log_det_from_cholesky(&cr));
    acc.add(d0.dot(&c0.solve(&d0)));
    for k in 1..=t {
        let v = &x[k] - &params.f * &x[k - 1];
        let w = &observations[k - 1] - &params.h * &x[k];
        acc.add(v.dot(&cq.solve(&v)));
        acc.add(w.dot(&cr.solve(&w)));
    }
    Ok(acc.value())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub n_restarts: usize,
    pub max_iters: usize,
    pub param_tol: f64,
    pub f_range: [f64; 2],
    pub h_range: [f64; 2],
    /// Bounds for the log-uniform draws of the diagonal of Q and R.
    pub qr_log_range: [f64; 2],
    pub estimate_initial_state: bool,
    /// Latent state dimension of the fitted model.
    pub state_dim: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            n_restarts: 50,
            max_iters: 50,
            param_tol: 1e-7,
            f_range: [0.5, 1.5],
            h_range: [0.5, 1.5],
            qr_log_range: [1e-6, 1e-2],
            estimate_initial_state: true,
            state_dim: 1,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] < r[1];
        if self.n_restarts == 0 {
            return Err(Error::Config("em.n_restarts must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("em.max_iters must be at least 1".into()));
        }
        if !(self.param_tol > 0.0) {
            return Err(Error::Config("em.param_tol must be positive".into()));
        }
        if !range_ok(&self.f_range) || !range_ok(&self.h_range) {
            return Err(Error::Config("em.f_range and em.h_range must be non-empty".into()));
        }
        if !range_ok(&self.qr_log_range) || self.qr_log_range[0] <= 0.0 {
            return Err(Error::Config("em.qr_log_range must be a non-empty positive range".into()));
        }
        if self.state_dim == 0 {
            return Err(Error::Config("em.state_dim must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmFitResult {
    pub params: ModelParams,
    pub train_log_likelihood: f64,
    pub iterations_used: usize,
    pub restart_index: usize,
    /// Observed-data log-likelihood of every iterate, starting with the
    /// initialization and ending with `params`.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    /// Set when an iteration failed and the run stopped at the last valid iterate.
    pub failure: Option<String>,
}

/// EM iterations from `init` until `max_iters` or until the largest absolute
/// parameter change drops below `param_tol`.
pub fn em_run(init: &ModelParams, batch: &ObservationBatch, config: &EmConfig) -> Result<EmFitResult> {
    config.validate()?;
    validate_model(init)?;
    let (mut stats, mut ll) = e_step_with_log_likelihood(init, batch)?;
    let mut params = init.clone();
    let mut trace = vec![ll];
    let mut iterations_used = 0;
    let mut converged = false;
    let mut failure = None;
    while iterations_used < config.max_iters {
        let next =
            match m_step(&stats, config.estimate_initial_state, &params).and_then(|p| validate_model(&p).map(|_| p)) {
                Ok(p) => p,
                Err(e) => {
                    failure = Some(format!("M-step at iteration {}: {e}", iterations_used + 1));
                    break;
                }
            };
        let step = match e_step_with_log_likelihood(&next, batch) {
            Ok(v) if v.1.is_finite() => v,
            Ok(_) => {
                failure = Some(format!("non-finite likelihood at iteration {}", iterations_used + 1));
                break;
            }
            Err(e) => {
                failure = Some(format!("E-step at iteration {}: {e}", iterations_used + 1));
                break;
            }
        };
        let delta = next.max_abs_change(&params);
        params = next;
        (stats, ll) = step;
        trace.push(ll);
        iterations_used += 1;
        if delta < config.param_tol {
            converged = true;
            break;
        }
    }
    Ok(EmFitResult {
        params,
        train_log_likelihood: ll,
        iterations_used,
        restart_index: 0,
        loglik_trace: trace,
        converged,
        failure,
    })
}

fn log_uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    rng.random_range(range[0].ln()..range[1].ln()).exp()
}

/// Random initialization for one restart. `mu0` maps the mean first
/// observation through the pseudo-inverse of the drawn `H`; `Sigma0 = 1e-2 I`.
pub fn random_init(batch: &ObservationBatch, config: &EmConfig, seed: Seed) -> ModelParams {
    let mut rng = seed.rng();
    let n = config.state_dim;
    let m = batch.obs_dim();
    let f = DMatrix::from_fn(n, n, |_, _| rng.random_range(config.f_range[0]..config.f_range[1]));
    let h = DMatrix::from_fn(m, n, |_, _| rng.random_range(config.h_range[0]..config.h_range[1]));
    let q = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| log_uniform(&mut rng, config.qr_log_range)));
    let r = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| log_uniform(&mut rng, config.qr_log_range)));
    let z1_mean = batch.step(1).column_mean();
    let mu0 = h.clone().pseudo_inverse(1e-12).map(|pinv| pinv * z1_mean).unwrap_or_else(|_| DVector::zeros(n));
    ModelParams { f, h, q, r, mu0, sigma0: DMatrix::identity(n, n) * 1e-2 }
}

/// Multi-restart EM. Restart `i` is initialized from `seed.child(i)`; the
/// restart with the highest training log-likelihood wins, ties going to the
/// lowest index.
pub fn fit(batch: &ObservationBatch, config: &EmConfig, seed: Seed, par: Parallelism) -> Result<EmFitResult> {
    config.validate()?;
    let inits: Vec<ModelParams> =
        (0..config.n_restarts).map(|i| random_init(batch, config, seed.child(i as u64))).collect();
    fit_from_inits(batch, &inits, config, par)
}

/// Runs EM from each of `inits` and keeps the best run by training
/// log-likelihood (ties to the lowest index).
pub fn fit_from_inits(
    batch: &ObservationBatch,
    inits: &[ModelParams],
    config: &EmConfig,
    par: Parallelism,
) -> Result<EmFitResult> {
    config.validate()?;
    let runs = exec::map_indexed(par, inits.len(), |i| {
        em_run(&inits[i], batch, config).map(|mut r| {
            r.restart_index = i;
            r
        })
    });
    let mut best: Option<EmFitResult> = None;
    let mut failures = Vec::new();
    for (i, run) in runs.into_iter().enumerate() {
        match run {
            Ok(r) if r.train_log_likelihood.is_finite() => {
                if best.as_ref().is_none_or(|b| r.train_log_likelihood > b.train_log_likelihood) {
                    best = Some(r);
                }
            }
            Ok(_) => failures.push(format!("restart {i}: non-finite likelihood")),
            Err(e) => failures.push(format!("restart {i}: {e}")),
        }
    }
    best.ok_or_else(|| Error::AllRestartsFailed { attempts: inits.len(), details: failures.join("; ") })
}

/// On-disk form of a parameter set, optionally with fit metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct ParamsFile {
    pub format: String,
    pub provenance: String,
    pub F: Vec<Vec<f64>>,
    pub H: Vec<Vec<f64>>,
    pub Q: Vec<Vec<f64>>,
    pub R: Vec<Vec<f64>>,
    pub mu0: Vec<f64>,
    pub Sigma0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_log_likelihood: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restart_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations_used: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
}

pub const PARAMS_FORMAT: &str = "lrtbench-ssm-params/1";

impl ParamsFile {
    pub fn new(params: &ModelParams, provenance: &str) -> Self {
        let spec = ModelSpec::from(params);
        ParamsFile {
            format: PARAMS_FORMAT.into(),
            provenance: provenance.into(),
            F: spec.F,
            H: spec.H,
            Q: spec.Q,
            R: spec.R,
            mu0: spec.mu0,
            Sigma0: spec.Sigma0,
            train_log_likelihood: None,
            restart_index: None,
            iterations_used: None,
            converged: None,
        }
    }

    pub fn from_fit(fit: &EmFitResult) -> Self {
        ParamsFile {
            train_log_likelihood: Some(fit.train_log_likelihood),
            restart_index: Some(fit.restart_index),
            iterations_used: Some(fit.iterations_used),
            converged: Some(fit.converged),
            ..ParamsFile::new(&fit.params, "em-estimated")
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelSpec {
            F: self.F.clone(),
            H: self.H.clone(),
            Q: self.Q.clone(),
            R: self.R.clone(),
            mu0: self.mu0.clone(),
            Sigma0: self.Sigma0.clone(),
        }
        .to_params()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(to_toml_string(self)?.as_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let file: ParamsFile = toml::from_str(&text)?;
        if file.format != PARAMS_FORMAT {
            return Err(Error::Format(format!("unsupported params format {:?}", file.format)));
        }
        Ok(file)
    }
}
