//! Linear Gaussian state-space models: parameters, validation, simulation and
//! labeled datasets.
//!
//! ```text
//! x_k = F x_{k-1} + v_k,   v_k ~ N(0, Q)
//! z_k = H x_k     + w_k,   w_k ~ N(0, R)
//! x_0 ~ N(mu0, Sigma0)
//! ```

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Seed;
use crate::textfmt::fmt17;

const SYMMETRY_TOL: f64 = 1e-10;
const EIGEN_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
}

impl ModelParams {
    pub fn scalar(f: f64, h: f64, q: f64, r: f64, mu0: f64, sigma0: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        ModelParams { f: m(f), h: m(h), q: m(q), r: m(r), mu0: DVector::from_element(1, mu0), sigma0: m(sigma0) }
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        validate_model(self)
    }

    /// Largest absolute entrywise difference over all parameter blocks.
    pub fn max_abs_change(&self, other: &ModelParams) -> f64 {
        [
            linalg::max_abs_diff_mat(&self.f, &other.f),
            linalg::max_abs_diff_mat(&self.h, &other.h),
            linalg::max_abs_diff_mat(&self.q, &other.q),
            linalg::max_abs_diff_mat(&self.r, &other.r),
            linalg::max_abs_diff_vec(&self.mu0, &other.mu0),
            linalg::max_abs_diff_mat(&self.sigma0, &other.sigma0),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.f.nrows();
        let m = self.h.nrows();
        let dim = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Dimension(format!("{what} is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1)))
            }
        };
        if n == 0 || m == 0 {
            return Err(Error::Dimension("state and observation dimensions must be positive".into()));
        }
        dim("F", self.f.shape(), (n, n))?;
        dim("H", self.h.shape(), (m, n))?;
        dim("Q", self.q.shape(), (n, n))?;
        dim("R", self.r.shape(), (m, m))?;
        dim("mu0", (self.mu0.len(), 1), (n, 1))?;
        dim("Sigma0", self.sigma0.shape(), (n, n))?;
        for (name, values) in [
            ("F", self.f.as_slice()),
            ("H", self.h.as_slice()),
            ("Q", self.q.as_slice()),
            ("R", self.r.as_slice()),
            ("mu0", self.mu0.as_slice()),
            ("Sigma0", self.sigma0.as_slice()),
        ] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }
}

fn check_symmetric(name: &'static str, a: &DMatrix<f64>) -> Result<()> {
    let asymmetry = linalg::max_asymmetry(a);
    if asymmetry > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { name, asymmetry });
    }
    Ok(())
}

fn check_psd(name: &'static str, a: &DMatrix<f64>) -> Result<()> {
    check_symmetric(name, a)?;
    if linalg::cholesky(a).is_some() {
        return Ok(());
    }
    let eigenvalue = linalg::min_eigenvalue(&linalg::symmetrize(a));
    if eigenvalue < -EIGEN_TOL {
        return Err(Error::NegativeEigenvalue { name, eigenvalue });
    }
    Ok(())
}

/// Accepts iff shapes agree, Q and Sigma0 are symmetric PSD and R is
/// symmetric positive definite.
pub fn validate_model(params: &ModelParams) -> Result<()> {
    params.check_shapes()?;
    check_psd("Q", &params.q)?;
    check_psd("Sigma0", &params.sigma0)?;
    check_symmetric("R", &params.r)?;
    if linalg::cholesky(&linalg::symmetrize(&params.r)).is_none() {
        return Err(Error::NotPositiveDefinite { name: "R" });
    }
    Ok(())
}

/// Simulation only needs every covariance to be PSD, so R = 0 is allowed here.
fn validate_for_simulation(params: &ModelParams) -> Result<()> {
    params.check_shapes()?;
    check_psd("Q", &params.q)?;
    check_psd("Sigma0", &params.sigma0)?;
    check_psd("R", &params.r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    One,
    Two,
}

impl Label {
    pub fn index(self) -> u8 {
        match self {
            Label::One => 1,
            Label::Two => 2,
        }
    }

    pub fn from_index(i: i64) -> Result<Label> {
        match i {
            1 => Ok(Label::One),
            2 => Ok(Label::Two),
            other => Err(Error::InvalidInput(format!("label must be 1 or 2, got {other}"))),
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::One => Label::Two,
            Label::Two => Label::One,
        }
    }
}

/// Latent states `x_0..x_T` (length `T + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct StateTrajectory {
    pub states: Vec<DVector<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    /// `z_1..z_T`.
    pub observations: Vec<DVector<f64>>,
    pub label: Label,
}

impl LabeledSequence {
    pub fn new(observations: Vec<DVector<f64>>, label: Label) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::InvalidInput("sequence must have at least one observation".into()));
        }
        let m = observations[0].len();
        if m == 0 || observations.iter().any(|z| z.len() != m) {
            return Err(Error::Dimension("observations must share one non-zero dimension".into()));
        }
        Ok(LabeledSequence { observations, label })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations[0].len()
    }
}

/// Pre-factored noise covariances of one model.
struct NoiseFactors {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    sigma0: DMatrix<f64>,
}

impl NoiseFactors {
    fn new(params: &ModelParams) -> Self {
        NoiseFactors {
            q: linalg::psd_factor(&params.q),
            r: linalg::psd_factor(&params.r),
            sigma0: linalg::psd_factor(&params.sigma0),
        }
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn simulate_with<R: Rng + ?Sized>(
    params: &ModelParams,
    noise: &NoiseFactors,
    t: usize,
    rng: &mut R,
) -> (StateTrajectory, Vec<DVector<f64>>) {
    let (n, m) = (params.state_dim(), params.obs_dim());
    let mut states = Vec::with_capacity(t + 1);
    let mut obs = Vec::with_capacity(t);
    let mut x = &params.mu0 + &noise.sigma0 * standard_normal(rng, n);
    states.push(x.clone());
    for _ in 0..t {
        x = &params.f * &x + &noise.q * standard_normal(rng, n);
        let z = &params.h * &x + &noise.r * standard_normal(rng, m);
        states.push(x.clone());
        obs.push(z);
    }
    (StateTrajectory { states }, obs)
}

/// Draws `x_0..x_T` and `z_1..z_T`. Per call the stream is consumed as: `m_x`
/// normals for `x_0`, then for each step `m_x` normals for `v_k` followed by
/// `m_z` normals for `w_k`.
pub fn simulate_sequence<R: Rng + ?Sized>(
    params: &ModelParams,
    t: usize,
    rng: &mut R,
) -> Result<(StateTrajectory, Vec<DVector<f64>>)> {
    validate_for_simulation(params)?;
    if t == 0 {
        return Err(Error::InvalidInput("sequence length T must be at least 1".into()));
    }
    Ok(simulate_with(params, &NoiseFactors::new(params), t, rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sequences: Vec<LabeledSequence>,
    t: usize,
    m_z: usize,
    counts: [usize; 2],
}

impl Dataset {
    pub fn new(sequences: Vec<LabeledSequence>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::InvalidInput("dataset must contain at least one sequence".into()))?;
        let (t, m_z) = (first.len(), first.obs_dim());
        let mut counts = [0usize; 2];
        for (i, s) in sequences.iter().enumerate() {
            if s.len() != t || s.obs_dim() != m_z {
                return Err(Error::Dimension(format!(
                    "sequence {i} has shape T={} m_z={}, expected T={t} m_z={m_z}",
                    s.len(),
                    s.obs_dim()
                )));
            }
            counts[(s.label.index() - 1) as usize] += 1;
        }
        Ok(Dataset { sequences, t, m_z, counts })
    }

    pub fn sequences(&self) -> &[LabeledSequence] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.t
    }

    pub fn obs_dim(&self) -> usize {
        self.m_z
    }

    pub fn count(&self, label: Label) -> usize {
        self.counts[(label.index() - 1) as usize]
    }

    pub fn labels(&self) -> Vec<Label> {
        self.sequences.iter().map(|s| s.label).collect()
    }

    pub fn of_class(&self, label: Label) -> impl Iterator<Item = &LabeledSequence> {
        self.sequences.iter().filter(move |s| s.label == label)
    }

    /// Writes `seq_id,label,k,z_1..z_{m_z}` rows sorted by `(seq_id, k)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["seq_id".to_string(), "label".to_string(), "k".to_string()];
        header.extend((1..=self.m_z).map(|j| format!("z_{j}")));
        w.write_record(&header)?;
        for (id, s) in self.sequences.iter().enumerate() {
            for (k, z) in s.observations.iter().enumerate() {
                let mut row = vec![id.to_string(), s.label.index().to_string(), (k + 1).to_string()];
                row.extend(z.iter().map(|v| fmt17(*v)));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let m_z = header.len().saturating_sub(3);
        let expected: Vec<String> =
            ["seq_id", "label", "k"].iter().map(|s| s.to_string()).chain((1..=m_z).map(|j| format!("z_{j}"))).collect();
        if m_z == 0 || header.iter().ne(expected.iter().map(|s| s.as_str())) {
            return Err(Error::Format(format!(
                "dataset header must be seq_id,label,k,z_1..z_m, got {}",
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut sequences: Vec<LabeledSequence> = Vec::new();
        let mut current: Option<(u64, Label, Vec<DVector<f64>>)> = None;
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let row = line + 2;
            let parse_int = |i: usize| -> Result<i64> {
                record[i].trim().parse::<i64>().map_err(|e| Error::Format(format!("line {row}, column {}: {e}", i + 1)))
            };
            let id = parse_int(0)? as u64;
            let label = Label::from_index(parse_int(1)?).map_err(|e| Error::Format(format!("line {row}: {e}")))?;
            let k = parse_int(2)?;
            let z = (0..m_z)
                .map(|j| {
                    record[3 + j]
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("line {row}, column {}: {e}", 4 + j)))
                })
                .collect::<Result<Vec<_>>>()?;
            match &mut current {
                Some((cid, clabel, obs)) if *cid == id => {
                    if *clabel != label || k as usize != obs.len() + 1 {
                        return Err(Error::Format(format!("line {row}: inconsistent label or step index")));
                    }
                    obs.push(DVector::from_vec(z));
                }
                _ => {
                    if let Some((cid, l, obs)) = current.take() {
                        if id <= cid {
                            return Err(Error::Format(format!("line {row}: rows not sorted by seq_id")));
                        }
                        sequences.push(LabeledSequence::new(obs, l)?);
                    }
                    if k != 1 {
                        return Err(Error::Format(format!("line {row}: sequence must start at k=1")));
                    }
                    current = Some((id, label, vec![DVector::from_vec(z)]));
                }
            }
        }
        if let Some((_, l, obs)) = current {
            sequences.push(LabeledSequence::new(obs, l)?);
        }
        Dataset::new(sequences)
    }
}

/// `n_per_class` sequences from each model, interleaved so that label 1 sits
/// at even indices and label 2 at odd indices.
pub fn generate_dataset(
    params1: &ModelParams,
    params2: &ModelParams,
    n_per_class: usize,
    t: usize,
    seed: Seed,
) -> Result<Dataset> {
    validate_for_simulation(params1)?;
    validate_for_simulation(params2)?;
    if params1.obs_dim() != params2.obs_dim() {
        return Err(Error::Dimension(format!(
            "models disagree on m_z: {} vs {}",
            params1.obs_dim(),
            params2.obs_dim()
        )));
    }
    if n_per_class == 0 || t == 0 {
        return Err(Error::InvalidInput("n_per_class and T must be at least 1".into()));
    }
    let noise1 = NoiseFactors::new(params1);
    let noise2 = NoiseFactors::new(params2);
    let mut rng = seed.rng();
    let mut sequences = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        let (_, z1) = simulate_with(params1, &noise1, t, &mut rng);
        sequences.push(LabeledSequence { observations: z1, label: Label::One });
        let (_, z2) = simulate_with(params2, &noise2, t, &mut rng);
        sequences.push(LabeledSequence { observations: z2, label: Label::Two });
    }
    Dataset::new(sequences)
}

/// Row-major nested-array form of [`ModelParams`] used in config and model files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct ModelSpec {
    pub F: Vec<Vec<f64>>,
    pub H: Vec<Vec<f64>>,
    pub Q: Vec<Vec<f64>>,
    pub R: Vec<Vec<f64>>,
    pub mu0: Vec<f64>,
    pub Sigma0: Vec<Vec<f64>>,
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{name} must be a non-empty rectangular array of rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ModelSpec {
    pub fn to_params(&self) -> Result<ModelParams> {
        let params = ModelParams {
            f: rows_to_matrix("F", &self.F)?,
            h: rows_to_matrix("H", &self.H)?,
            q: rows_to_matrix("Q", &self.Q)?,
            r: rows_to_matrix("R", &self.R)?,
            mu0: DVector::from_vec(self.mu0.clone()),
            sigma0: rows_to_matrix("Sigma0", &self.Sigma0)?,
        };
        params.check_shapes()?;
        Ok(params)
    }
}

impl From<&ModelParams> for ModelSpec {
    fn from(p: &ModelParams) -> Self {
        ModelSpec {
            F: matrix_to_rows(&p.f),
            H: matrix_to_rows(&p.h),
            Q: matrix_to_rows(&p.q),
            R: matrix_to_rows(&p.r),
            mu0: p.mu0.iter().copied().collect(),
            Sigma0: matrix_to_rows(&p.sigma0),
        }
    }
}
