//! Monte Carlo comparison of the three classifiers over a parameter sweep.
//!
//! Each trial draws fresh training and test sets, then evaluates the
//! true-parameter LRT, the EM-fitted LRT and a freshly trained LSTM on the
//! test set. All randomness of a trial comes from a seed derived from
//! (master seed, grid index, trial index), and every stage draws from its own
//! sub-seed, so results do not depend on thread count or on which
//! classifiers are enabled.

mod output;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classify::{evaluate, LrtClassifier, Prediction, Provenance};
use crate::em::{self, EmConfig};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::kalman::ObservationBatch;
use crate::linalg::CompensatedSum;
use crate::lstm::{self, TrainConfig};
use crate::rng::Seed;
use crate::ssm::{generate_dataset, Dataset, Label, ModelParams};
use crate::textfmt::{merge_tables, to_toml_string};

pub use output::{
    execute, read_manifest, write_raw_rows, write_summary, RawCsv, RunManifest, RunReport, MANIFEST_FORMAT,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Grid values are `Q2 / Q1`.
    QRatio,
    /// Grid values are `R2 / R1`.
    RRatio,
    /// Grid values are sequence lengths.
    SequenceLength,
    /// Grid values are total training-set sizes (both classes).
    TrainSize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    True,
    Em,
    Lstm,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [ClassifierKind::True, ClassifierKind::Em, ClassifierKind::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::True => "true",
            ClassifierKind::Em => "em",
            ClassifierKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassifierKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown classifier {s:?} (expected true, em or lstm)")))
    }
}

/// Named sweeps with their default configurations.
pub const SWEEP_NAMES: [&str; 4] = ["task-difficulty-q", "task-difficulty-r", "seq-length", "train-size"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct ExperimentConfig {
    pub sweep: SweepAxis,
    pub grid: Vec<f64>,
    pub T: usize,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub n_mc: usize,
    pub seed: Seed,
    pub classifiers: Vec<ClassifierKind>,
    pub F: f64,
    pub H: f64,
    pub mu0: f64,
    pub Sigma0: f64,
    pub Q1: f64,
    pub Q2: f64,
    pub R1: f64,
    pub R2: f64,
    pub em: EmConfig,
    pub lstm: TrainConfig,
}

fn ratio_grid() -> Vec<f64> {
    (0..10).map(|i| 10f64.powf(4.0 * i as f64 / 9.0)).collect()
}

impl ExperimentConfig {
    /// Defaults for one of [`SWEEP_NAMES`].
    pub fn for_sweep(name: &str) -> Result<Self> {
        let base = ExperimentConfig {
            sweep: SweepAxis::QRatio,
            grid: ratio_grid(),
            T: 120,
            n_train_per_class: 250,
            n_test_per_class: 250,
            n_mc: 100,
            seed: Seed(20_240_601),
            classifiers: ClassifierKind::ALL.to_vec(),
            F: 1.0,
            H: 1.0,
            mu0: 0.0,
            Sigma0: 1e-4,
            Q1: 1e-5,
            Q2: 2e-5,
            R1: 1e-3,
            R2: 1e-3,
            em: EmConfig::default(),
            lstm: TrainConfig::default(),
        };
        Ok(match name {
            "task-difficulty-q" => base,
            "task-difficulty-r" => {
                ExperimentConfig { sweep: SweepAxis::RRatio, Q1: 1e-3, Q2: 1e-3, R1: 1e-5, R2: 1e-5, ..base }
            }
            "seq-length" => ExperimentConfig {
                sweep: SweepAxis::SequenceLength,
                grid: vec![10.0, 21.0, 45.0, 95.0, 200.0, 423.0, 894.0],
                ..base
            },
            "train-size" => ExperimentConfig {
                sweep: SweepAxis::TrainSize,
                grid: vec![20.0, 50.0, 126.0, 316.0, 794.0, 2000.0],
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep {other:?}; expected one of {}",
                    SWEEP_NAMES.join(", ")
                )))
            }
        })
    }

    /// Defaults for `name` overridden by the keys present in `overrides`
    /// (TOML). Unknown keys are rejected.
    pub fn load(name: &str, overrides: Option<&str>) -> Result<Self> {
        let defaults = ExperimentConfig::for_sweep(name)?;
        let Some(text) = overrides else {
            return Ok(defaults);
        };
        let patch: toml::Table = toml::from_str(text)?;
        let mut table: toml::Table = toml::from_str(&to_toml_string(&defaults)?)?;
        merge_tables(&mut table, patch);
        let config: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.grid.is_empty() {
            return bad("grid must not be empty".into());
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("grid must be strictly increasing".into());
        }
        if self.T == 0 || self.n_train_per_class == 0 || self.n_test_per_class == 0 || self.n_mc == 0 {
            return bad("T, n_train_per_class, n_test_per_class and n_mc must be at least 1".into());
        }
        if self.classifiers.is_empty() {
            return bad("at least one classifier must be selected".into());
        }
        let mut kinds = self.classifiers.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.classifiers.len() {
            return bad("classifiers must not repeat".into());
        }
        for &v in &self.grid {
            let ok = match self.sweep {
                SweepAxis::QRatio | SweepAxis::RRatio => v > 0.0 && v.is_finite(),
                SweepAxis::SequenceLength => v >= 1.0 && v.fract() == 0.0,
                SweepAxis::TrainSize => v >= 2.0 && v.fract() == 0.0 && (v as u64) % 2 == 0,
            };
            if !ok {
                return bad(format!("grid value {v} is not valid for sweep {:?}", self.sweep));
            }
        }
        for i in 0..self.grid.len() {
            let p = self.resolve(i);
            p.params1.validate()?;
            p.params2.validate()?;
        }
        self.em.validate()?;
        self.lstm.validate()
    }

    /// Model pair and sizes at grid point `index`.
    pub fn resolve(&self, index: usize) -> TrialPoint {
        let v = self.grid[index];
        let (mut q2, mut r2, mut t, mut n_train) = (self.Q2, self.R2, self.T, self.n_train_per_class);
        match self.sweep {
            SweepAxis::QRatio => q2 = self.Q1 * v,
            SweepAxis::RRatio => r2 = self.R1 * v,
            SweepAxis::SequenceLength => t = v as usize,
            SweepAxis::TrainSize => n_train = v as usize / 2,
        }
        TrialPoint {
            params1: ModelParams::scalar(self.F, self.H, self.Q1, self.R1, self.mu0, self.Sigma0),
            params2: ModelParams::scalar(self.F, self.H, q2, r2, self.mu0, self.Sigma0),
            seq_len: t,
            n_train_per_class: n_train,
            n_test_per_class: self.n_test_per_class,
        }
    }
}

/// A fully resolved grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialPoint {
    pub params1: ModelParams,
    pub params2: ModelParams,
    pub seq_len: usize,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
}

/// Stages of a trial, used to tag failures and timings.
pub const STAGES: [&str; 4] = ["data", "true", "em", "lstm"];

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    /// Accuracy, or the failure message, per requested classifier.
    pub results: BTreeMap<ClassifierKind, std::result::Result<f64, String>>,
    /// Wall-clock seconds per stage.
    pub seconds: BTreeMap<&'static str, f64>,
}

fn accuracy(predictions: &[Prediction], test: &Dataset) -> Result<f64> {
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    Ok(evaluate(&labels, &test.labels())?.1)
}

fn class_batch(data: &Dataset, label: Label) -> Result<ObservationBatch> {
    ObservationBatch::new(data.of_class(label).map(|s| s.observations.as_slice()))
}

fn tagged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Trial { stage, source: Box::new(e) })
}

/// EM is fitted separately on the training sequences of each class.
fn em_accuracy(train: &Dataset, test: &Dataset, config: &EmConfig, seed: Seed, par: Parallelism) -> Result<f64> {
    let fit1 = em::fit(&class_batch(train, Label::One)?, config, seed.child(1), par)?;
    let fit2 = em::fit(&class_batch(train, Label::Two)?, config, seed.child(2), par)?;
    let c = LrtClassifier::new(fit1.params, fit2.params, Provenance::EmEstimated)?;
    accuracy(&c.classify_dataset(test)?, test)
}

/// One Monte Carlo trial. Stage seeds: training data `seed.child(0)`, test
/// data `seed.child(1)`, EM `seed.child(2)`, LSTM `seed.child(3)`.
pub fn run_trial(
    point: &TrialPoint,
    classifiers: &[ClassifierKind],
    em_config: &EmConfig,
    lstm_config: &TrainConfig,
    seed: Seed,
    par: Parallelism,
) -> Result<TrialOutcome> {
    let mut seconds = BTreeMap::new();
    let clock = Instant::now();
    let (train, test) = tagged(
        "data",
        (|| {
            let train = generate_dataset(
                &point.params1,
                &point.params2,
                point.n_train_per_class,
                point.seq_len,
                seed.child(0),
            )?;
            let test =
                generate_dataset(&point.params1, &point.params2, point.n_test_per_class, point.seq_len, seed.child(1))?;
            Ok((train, test))
        })(),
    )?;
    seconds.insert("data", clock.elapsed().as_secs_f64());
    let mut results = BTreeMap::new();
    for &kind in classifiers {
        let clock = Instant::now();
        let r = match kind {
            ClassifierKind::True => LrtClassifier::new(point.params1.clone(), point.params2.clone(), Provenance::True)
                .and_then(|c| c.classify_dataset(&test))
                .and_then(|p| accuracy(&p, &test)),
            ClassifierKind::Em => em_accuracy(&train, &test, em_config, seed.child(2), par),
            ClassifierKind::Lstm => lstm::train(&train, lstm_config, seed.child(3), par)
                .and_then(|(model, _)| model.predict_dataset(&test))
                .and_then(|p| accuracy(&p, &test)),
        };
        seconds.insert(kind.name(), clock.elapsed().as_secs_f64());
        results.insert(kind, tagged(kind.name(), r).map_err(|e| e.to_string()));
    }
    Ok(TrialOutcome { results, seconds })
}

/// Mean and sample standard deviation (denominator `n - 1`; 0 for a single value).
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate an empty set of accuracies".into()));
    }
    let n = values.len() as f64;
    let first = values[0];
    let mean = first + values.iter().map(|v| v - first).collect::<CompensatedSum>().value() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).collect::<CompensatedSum>().value();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierRuns {
    /// `(run index, accuracy)` of completed runs, in run order.
    pub accuracies: Vec<(usize, f64)>,
    /// `(run index, message)` of excluded runs.
    pub failures: Vec<(usize, String)>,
}

impl ClassifierRuns {
    pub fn values(&self) -> Vec<f64> {
        self.accuracies.iter().map(|(_, a)| *a).collect()
    }

    /// `None` when every run failed.
    pub fn summary(&self) -> Option<(f64, f64)> {
        aggregate(&self.values()).ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointResult {
    pub grid_index: usize,
    pub value: f64,
    pub runs: BTreeMap<ClassifierKind, ClassifierRuns>,
    /// Total wall-clock seconds per stage over the trials of this point.
    pub seconds: BTreeMap<&'static str, f64>,
}

impl PointResult {
    pub fn n_failed(&self) -> usize {
        self.runs.values().map(|r| r.failures.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub sweep: SweepAxis,
    pub points: Vec<PointResult>,
}

impl ResultTable {
    pub fn n_failed(&self) -> usize {
        self.points.iter().map(|p| p.n_failed()).sum()
    }

    pub fn stage_seconds(&self) -> BTreeMap<&'static str, f64> {
        let mut total = BTreeMap::new();
        for p in &self.points {
            for (stage, s) in &p.seconds {
                *total.entry(*stage).or_insert(0.0) += s;
            }
        }
        total
    }
}

/// Seed of trial `trial` at grid point `grid_index`.
pub fn trial_seed(master: Seed, grid_index: usize, trial: usize) -> Seed {
    master.derive(&[grid_index as u64, trial as u64])
}

/// Runs the trials of one grid point (in parallel when `par` allows) and
/// collects them in trial order.
pub fn run_point(config: &ExperimentConfig, grid_index: usize, par: Parallelism) -> PointResult {
    let point = config.resolve(grid_index);
    let outcomes = exec::map_indexed(par, config.n_mc, |trial| {
        run_trial(
            &point,
            &config.classifiers,
            &config.em,
            &config.lstm,
            trial_seed(config.seed, grid_index, trial),
            par,
        )
    });
    let mut runs: BTreeMap<ClassifierKind, ClassifierRuns> = config
        .classifiers
        .iter()
        .map(|&k| (k, ClassifierRuns { accuracies: Vec::new(), failures: Vec::new() }))
        .collect();
    let mut seconds = BTreeMap::new();
    for (trial, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                for (kind, r) in o.results {
                    let slot = runs.get_mut(&kind).expect("classifier requested");
                    match r {
                        Ok(a) => slot.accuracies.push((trial, a)),
                        Err(msg) => slot.failures.push((trial, msg)),
                    }
                }
                for (stage, s) in o.seconds {
                    *seconds.entry(stage).or_insert(0.0) += s;
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for slot in runs.values_mut() {
                    slot.failures.push((trial, msg.clone()));
                }
            }
        }
    }
    PointResult { grid_index, value: config.grid[grid_index], runs, seconds }
}

/// Runs every grid point in order, calling `on_point` after each so that
/// results can be persisted incrementally.
pub fn run_sweep<F>(config: &ExperimentConfig, par: Parallelism, mut on_point: F) -> Result<ResultTable>
where
    F: FnMut(&PointResult) -> Result<()>,
{
    config.validate()?;
    let mut points = Vec::with_capacity(config.grid.len());
    for i in 0..config.grid.len() {
        let p = run_point(config, i, par);
        on_point(&p)?;
        points.push(p);
    }
    Ok(ResultTable { sweep: config.sweep, points })
}
