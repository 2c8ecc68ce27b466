use rand::seq::SliceRandom;

use super::cell::{backward_into, forward_normalized, loss};
use super::{adam_step, AdamState, LstmModel, LstmParams, Normalizer, TrainConfig};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::rng::Seed;
use crate::ssm::{Dataset, Label};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss of the forward passes made during the epoch.
    pub mean_loss: f64,
    /// Accuracy of those same forward passes.
    pub train_accuracy: f64,
}

pub type TrainingLog = Vec<EpochRecord>;

struct SequenceStep {
    grad: Vec<f64>,
    loss: f64,
    correct: bool,
}

fn sequence_step(params: &LstmParams, inputs: &[f64], label: Label) -> Result<SequenceStep> {
    let cache = forward_normalized(params, inputs.to_vec())?;
    let mut grad = vec![0.0; params.values.len()];
    backward_into(&cache, params, label, &mut grad)?;
    let predicted = if cache.log_probs[1] > cache.log_probs[0] { Label::Two } else { Label::One };
    Ok(SequenceStep { grad, loss: loss(&cache, label), correct: predicted == label })
}

/// Trains for exactly `config.max_epochs` epochs. Parameters are initialized
/// from `seed.child(0)` and the per-epoch shuffles drawn from `seed.child(1)`.
/// Per-sequence gradients within a mini-batch may be computed in parallel;
/// they are always summed in sequence order.
pub fn train(data: &Dataset, config: &TrainConfig, seed: Seed, par: Parallelism) -> Result<(LstmModel, TrainingLog)> {
    config.validate()?;
    let normalizer = Normalizer::fit(data)?;
    let inputs: Vec<Vec<f64>> =
        data.sequences().iter().map(|s| normalizer.apply(&s.observations)).collect::<Result<_>>()?;
    let labels = data.labels();
    let mut params = LstmParams::init(config.n_h, data.obs_dim(), &mut seed.child(0).rng());
    let mut shuffle_rng = seed.child(1).rng();
    let mut adam = AdamState::new(params.values.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.max_epochs);
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let fail = |e: Error| Error::Training { epoch, batch: b + 1, source: Box::new(e) };
            let steps = exec::map_indexed(par, chunk.len(), |j| {
                let i = chunk[j];
                sequence_step(&params, &inputs[i], labels[i]).map_err(|e| e.in_sequence(i))
            });
            let mut grad = vec![0.0; params.values.len()];
            for step in steps {
                let step = step.map_err(fail)?;
                for (g, s) in grad.iter_mut().zip(&step.grad) {
                    *g += s;
                }
                loss_sum += step.loss;
                correct += step.correct as usize;
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam_step(&mut params.values, &mut grad, &mut adam, params.layout, config).map_err(fail)?;
        }
        log.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((LstmModel { params, normalizer, config: config.clone() }, log))
}
