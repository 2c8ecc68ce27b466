use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lrtbench::em::{self, EmConfig};
use lrtbench::exec::Parallelism;
use lrtbench::experiments::{run_point, ClassifierKind, ExperimentConfig};
use lrtbench::kalman::ObservationBatch;
use lrtbench::lstm::{self, TrainConfig};
use lrtbench::ssm::generate_dataset;
use lrtbench::{Label, ModelParams, Seed};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn models() -> (ModelParams, ModelParams) {
    (ModelParams::scalar(1.0, 1.0, 1e-5, 1e-3, 0.0, 1e-4), ModelParams::scalar(1.0, 1.0, 1e-4, 1e-3, 0.0, 1e-4))
}

fn em_restarts(c: &mut Criterion) {
    let (p1, p2) = models();
    let data = generate_dataset(&p1, &p2, 50, 120, Seed(1)).unwrap();
    let batch = ObservationBatch::new(data.of_class(Label::One).map(|s| s.observations.as_slice())).unwrap();
    let config = EmConfig { n_restarts: 8, max_iters: 20, ..EmConfig::default() };
    let mut group = c.benchmark_group("em_fit_8_restarts");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| em::fit(&batch, &config, Seed(2), par).unwrap())
        });
    }
    group.finish();
}

fn lstm_epochs(c: &mut Criterion) {
    let (p1, p2) = models();
    let data = generate_dataset(&p1, &p2, 32, 120, Seed(3)).unwrap();
    let config = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let mut group = c.benchmark_group("lstm_two_epochs");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| lstm::train(&data, &config, Seed(4), par).unwrap())
        });
    }
    group.finish();
}

fn sweep_point(c: &mut Criterion) {
    let mut config = ExperimentConfig::for_sweep("task-difficulty-q").unwrap();
    config.n_mc = 8;
    config.n_train_per_class = 25;
    config.classifiers = vec![ClassifierKind::True, ClassifierKind::Em];
    config.em.n_restarts = 4;
    let mut group = c.benchmark_group("sweep_point_8_trials");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_point(&config, 5, par)));
    }
    group.finish();
}

criterion_group!(benches, em_restarts, lstm_epochs, sweep_point);
criterion_main!(benches);
