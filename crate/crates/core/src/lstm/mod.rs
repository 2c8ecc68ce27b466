//! Single-layer LSTM sequence classifier trained from scratch.
//!
//! All weights live in one flat vector so that gradients, Adam moments and
//! clipping operate on plain slices. [`Tensor`] names the blocks of that
//! vector.

mod adam;
mod cell;
mod io;
mod train;

use std::ops::Range;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::Dataset;

pub use adam::{adam_step, clip_gradients, gradient_norm, AdamState};
pub use cell::{backward, forward, loss, ForwardCache};
pub use io::MODEL_FORMAT;
pub use train::{train, EpochRecord, TrainingLog};

/// Named blocks of the flat parameter vector. Gate-indexed blocks use the
/// order input, forget, output, candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tensor {
    Wi,
    Wf,
    Wo,
    Wc,
    Ri,
    Rf,
    Ro,
    Rc,
    Bi,
    Bf,
    Bo,
    Bc,
    WOut,
    BOut,
}

impl Tensor {
    pub const ALL: [Tensor; 14] = [
        Tensor::Wi,
        Tensor::Wf,
        Tensor::Wo,
        Tensor::Wc,
        Tensor::Ri,
        Tensor::Rf,
        Tensor::Ro,
        Tensor::Rc,
        Tensor::Bi,
        Tensor::Bf,
        Tensor::Bo,
        Tensor::Bc,
        Tensor::WOut,
        Tensor::BOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::Wi => "W_i",
            Tensor::Wf => "W_f",
            Tensor::Wo => "W_o",
            Tensor::Wc => "W_c",
            Tensor::Ri => "R_i",
            Tensor::Rf => "R_f",
            Tensor::Ro => "R_o",
            Tensor::Rc => "R_c",
            Tensor::Bi => "b_i",
            Tensor::Bf => "b_f",
            Tensor::Bo => "b_o",
            Tensor::Bc => "b_c",
            Tensor::WOut => "W_out",
            Tensor::BOut => "b_out",
        }
    }

    pub fn from_name(name: &str) -> Option<Tensor> {
        Tensor::ALL.into_iter().find(|t| t.name() == name)
    }
}

/// Shape bookkeeping for a network with `n_h` hidden units and `m_z` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n_h: usize,
    pub m_z: usize,
}

impl Layout {
    /// Rows and columns of a tensor (biases are columns of width 1).
    pub fn shape(self, t: Tensor) -> (usize, usize) {
        let (n, m) = (self.n_h, self.m_z);
        match t {
            Tensor::Wi | Tensor::Wf | Tensor::Wo | Tensor::Wc => (n, m),
            Tensor::Ri | Tensor::Rf | Tensor::Ro | Tensor::Rc => (n, n),
            Tensor::Bi | Tensor::Bf | Tensor::Bo | Tensor::Bc => (n, 1),
            Tensor::WOut => (2, n),
            Tensor::BOut => (2, 1),
        }
    }

    pub fn range(self, t: Tensor) -> Range<usize> {
        let (n, m) = (self.n_h, self.m_z);
        let gate = |g: usize, base: usize, width: usize| {
            let start = base + g * n * width;
            start..start + n * width
        };
        let r0 = 4 * n * m;
        let b0 = r0 + 4 * n * n;
        let o0 = b0 + 4 * n;
        match t {
            Tensor::Wi => gate(0, 0, m),
            Tensor::Wf => gate(1, 0, m),
            Tensor::Wo => gate(2, 0, m),
            Tensor::Wc => gate(3, 0, m),
            Tensor::Ri => gate(0, r0, n),
            Tensor::Rf => gate(1, r0, n),
            Tensor::Ro => gate(2, r0, n),
            Tensor::Rc => gate(3, r0, n),
            Tensor::Bi => gate(0, b0, 1),
            Tensor::Bf => gate(1, b0, 1),
            Tensor::Bo => gate(2, b0, 1),
            Tensor::Bc => gate(3, b0, 1),
            Tensor::WOut => o0..o0 + 2 * n,
            Tensor::BOut => o0 + 2 * n..o0 + 2 * n + 2,
        }
    }

    pub fn len(self) -> usize {
        4 * self.n_h * (self.m_z + self.n_h + 1) + 2 * self.n_h + 2
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    // Offsets of the stacked blocks used by the cell.
    pub(crate) fn input_weights(self) -> Range<usize> {
        0..4 * self.n_h * self.m_z
    }

    pub(crate) fn recurrent_weights(self) -> Range<usize> {
        let s = 4 * self.n_h * self.m_z;
        s..s + 4 * self.n_h * self.n_h
    }

    pub(crate) fn biases(self) -> Range<usize> {
        let s = 4 * self.n_h * (self.m_z + self.n_h);
        s..s + 4 * self.n_h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(n_h: usize, m_z: usize) -> Self {
        let layout = Layout { n_h, m_z };
        LstmParams { layout, values: vec![0.0; layout.len()] }
    }

    /// Input and recurrent matrices and the output weights are drawn from
    /// `U(-1/√fan_in, 1/√fan_in)`; the forget-gate bias is 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(n_h: usize, m_z: usize, rng: &mut R) -> Self {
        let mut p = LstmParams::zeros(n_h, m_z);
        for t in Tensor::ALL {
            let fan_in = match t {
                Tensor::Wi | Tensor::Wf | Tensor::Wo | Tensor::Wc => m_z,
                Tensor::Ri | Tensor::Rf | Tensor::Ro | Tensor::Rc | Tensor::WOut => n_h,
                _ => continue,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in p.tensor_mut(t) {
                *v = rng.random_range(-bound..bound);
            }
        }
        p.tensor_mut(Tensor::Bf).fill(1.0);
        p
    }

    pub fn n_h(&self) -> usize {
        self.layout.n_h
    }

    pub fn m_z(&self) -> usize {
        self.layout.m_z
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.values[self.layout.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.layout.range(t);
        &mut self.values[r]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-channel z-score transform fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    pub fn identity(m_z: usize) -> Self {
        Normalizer { mean: vec![0.0; m_z], std: vec![1.0; m_z] }
    }

    /// Mean and (population) standard deviation per channel over every step
    /// of every sequence; the standard deviation is floored at `STD_FLOOR`.
    pub fn fit(data: &Dataset) -> Result<Self> {
        let m = data.obs_dim();
        let count = (data.len() * data.seq_len()) as f64;
        let steps = || data.sequences().iter().flat_map(|s| s.observations.iter());
        let mut mean = vec![0.0; m];
        for z in steps() {
            for (acc, v) in mean.iter_mut().zip(z.iter()) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= count);
        let mut var = vec![0.0; m];
        for z in steps() {
            for ((acc, v), mu) in var.iter_mut().zip(z.iter()).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(STD_FLOOR)).collect();
        Ok(Normalizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalized observations flattened step-major.
    pub fn apply(&self, obs: &[DVector<f64>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(obs.len() * self.dim());
        for (k, z) in obs.iter().enumerate() {
            if z.len() != self.dim() {
                return Err(Error::Dimension(format!(
                    "observation {} has {} channels, normalizer expects {}",
                    k + 1,
                    z.len(),
                    self.dim()
                )));
            }
            out.extend(z.iter().zip(&self.mean).zip(&self.std).map(|((v, mu), sd)| (v - mu) / sd));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipScope {
    #[default]
    Global,
    PerTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_h: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clip_threshold: f64,
    pub clip_scope: ClipScope,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_h: 16,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            clip_threshold: 1.0,
            clip_scope: ClipScope::Global,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.n_h == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("lstm.n_h, batch_size and max_epochs must be at least 1".into()));
        }
        if !positive(self.learning_rate) || !positive(self.clip_threshold) || !positive(self.epsilon) {
            return Err(Error::Config("lstm.learning_rate, clip_threshold and epsilon must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("lstm.{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// A trained network with the input transform and the settings it was
/// trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmModel {
    pub params: LstmParams,
    pub normalizer: Normalizer,
    pub config: TrainConfig,
}

impl LstmModel {
    pub fn predict(&self, obs: &[DVector<f64>]) -> Result<crate::classify::Prediction> {
        predict(&self.params, &self.normalizer, obs)
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<crate::classify::Prediction>> {
        data.sequences()
            .iter()
            .enumerate()
            .map(|(i, s)| self.predict(&s.observations).map_err(|e| e.in_sequence(i)))
            .collect()
    }
}

/// Argmax of the class probabilities; an exact tie goes to label 1. The
/// prediction scores are log class probabilities.
pub fn predict(params: &LstmParams, norm: &Normalizer, obs: &[DVector<f64>]) -> Result<crate::classify::Prediction> {
    let cache = forward(params, norm, obs)?;
    Ok(crate::classify::Prediction::from_scores(cache.log_probs[0], cache.log_probs[1]))
}
