//! Likelihood-ratio classification and accuracy.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{self, ObservationBatch};
use crate::ssm::{validate_model, Dataset, Label, ModelParams};
use crate::textfmt::fmt17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    True,
    EmEstimated,
}

/// A predicted label with the per-class scores behind it. For the LRT the
/// scores are log-likelihoods; for the LSTM they are log class probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub score1: f64,
    pub score2: f64,
}

impl Prediction {
    /// Larger score wins; an exact tie goes to label 1.
    pub fn from_scores(score1: f64, score2: f64) -> Self {
        let label = if score2 > score1 { Label::Two } else { Label::One };
        Prediction { label, score1, score2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrtClassifier {
    pub params1: ModelParams,
    pub params2: ModelParams,
    pub provenance: Provenance,
}

impl LrtClassifier {
    pub fn new(params1: ModelParams, params2: ModelParams, provenance: Provenance) -> Result<Self> {
        validate_model(&params1)?;
        validate_model(&params2)?;
        if params1.obs_dim() != params2.obs_dim() {
            return Err(Error::Dimension(format!(
                "models disagree on m_z: {} vs {}",
                params1.obs_dim(),
                params2.obs_dim()
            )));
        }
        Ok(LrtClassifier { params1, params2, provenance })
    }

    fn log_likelihoods(&self, batch: &ObservationBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        let under = |model: u8, p: &ModelParams| {
            kalman::log_likelihood_batch(p, batch).map_err(|e| Error::Classification { model, source: Box::new(e) })
        };
        Ok((under(1, &self.params1)?, under(2, &self.params2)?))
    }

    pub fn classify(&self, obs: &[DVector<f64>]) -> Result<Prediction> {
        let (l1, l2) = self.log_likelihoods(&ObservationBatch::from_sequence(obs)?)?;
        Ok(Prediction::from_scores(l1[0], l2[0]))
    }

    /// Classifies every sequence of a dataset, sharing the covariance pass.
    pub fn classify_dataset(&self, data: &Dataset) -> Result<Vec<Prediction>> {
        let batch = ObservationBatch::new(data.sequences().iter().map(|s| s.observations.as_slice()))?;
        let (l1, l2) = self.log_likelihoods(&batch)?;
        Ok(l1.into_iter().zip(l2).map(|(a, b)| Prediction::from_scores(a, b)).collect())
    }
}

/// Confusion counts with class 2 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

pub fn evaluate(predictions: &[Label], truth: &[Label]) -> Result<(ConfusionCounts, f64)> {
    if predictions.len() != truth.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} labels", predictions.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty prediction set".into()));
    }
    let mut c = ConfusionCounts::default();
    for (p, t) in predictions.iter().zip(truth) {
        match (t, p) {
            (Label::Two, Label::Two) => c.tp += 1,
            (Label::One, Label::One) => c.tn += 1,
            (Label::One, Label::Two) => c.fp += 1,
            (Label::Two, Label::One) => c.fn_ += 1,
        }
    }
    Ok((c, c.accuracy()))
}

pub fn write_predictions_csv<W: Write>(out: W, truth: &[Label], predictions: &[Prediction]) -> Result<()> {
    if truth.len() != predictions.len() {
        return Err(Error::InvalidInput("truth and predictions differ in length".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seq_id", "true_label", "pred_label", "loglik1", "loglik2"])?;
    for (i, (t, p)) in truth.iter().zip(predictions).enumerate() {
        w.write_record([
            i.to_string(),
            t.index().to_string(),
            p.label.index().to_string(),
            fmt17(p.score1),
            fmt17(p.score2),
        ])?;
    }
    w.flush()?;
    Ok(())
}
