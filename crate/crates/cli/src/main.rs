use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lrtbench::classify::{evaluate, write_predictions_csv, LrtClassifier, Prediction, Provenance};
use lrtbench::em::{self, EmConfig, ParamsFile};
use lrtbench::exec::{self, Parallelism};
use lrtbench::experiments::{self, ClassifierKind, ExperimentConfig, PointResult, ResultTable, RunReport};
use lrtbench::kalman::ObservationBatch;
use lrtbench::lstm::{self, LstmModel, TrainConfig};
use lrtbench::ssm::{generate_dataset, ModelSpec};
use lrtbench::textfmt::{fmt17, to_toml_string};
use lrtbench::{Dataset, Label, Seed};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "lrtbench",
    version,
    about = "Likelihood-ratio vs. LSTM classification on linear Gaussian state-space models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Workers {
    /// Worker threads (default: available parallelism).
    #[arg(long, env = "LRTBENCH_WORKERS")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset from two models.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model per class by EM and write model1.toml and model2.toml.
    FitEm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file overriding EM settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        workers: Workers,
    },
    /// Train an LSTM classifier.
    TrainLstm {
        #[arg(long)]
        data: PathBuf,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// TOML file overriding training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-epoch loss and accuracy CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        workers: Workers,
    },
    /// Classify a dataset with a model pair or a trained network.
    Classify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 2, value_names = ["MODEL1", "MODEL2"], conflicts_with = "net", required_unless_present = "net")]
        models: Option<Vec<PathBuf>>,
        #[arg(long)]
        net: Option<PathBuf>,
        /// Per-sequence predictions CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo sweep.
    Experiment {
        /// One of task-difficulty-q, task-difficulty-r, seq-length, train-size.
        sweep: String,
        /// TOML file overriding the sweep defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: results/<sweep>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_mc: Option<usize>,
        /// Comma-separated subset of true, em, lstm.
        #[arg(long, value_delimiter = ',')]
        classifiers: Option<Vec<ClassifierKind>>,
        /// Exit with status 0 even when some trials were excluded.
        #[arg(long)]
        allow_partial: bool,
        #[command(flatten)]
        workers: Workers,
    },
    /// Repeat a sweep from its manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_partial: bool,
        #[command(flatten)]
        workers: Workers,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct SimulateConfig {
    T: usize,
    n_per_class: usize,
    seed: Seed,
    model1: ModelSpec,
    model2: ModelSpec,
}

#[derive(Serialize)]
struct SimulateManifest<'a> {
    format: &'static str,
    tool_version: &'static str,
    created_unix_s: f64,
    config: &'a SimulateConfig,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Dataset::read_csv(file).with_context(|| format!("cannot parse dataset {}", path.display()))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(BufWriter<File>) -> lrtbench::Result<()>,
{
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    f(BufWriter::new(file)).with_context(|| format!("cannot write {}", path.display()))
}

fn simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg: SimulateConfig =
        toml::from_str(&read_text(config)?).with_context(|| format!("invalid config {}", config.display()))?;
    let p1 = cfg.model1.to_params().context("model1")?;
    let p2 = cfg.model2.to_params().context("model2")?;
    fs::create_dir_all(out)?;
    let manifest = SimulateManifest {
        format: "lrtbench-simulate/1",
        tool_version: env!("CARGO_PKG_VERSION"),
        created_unix_s: unix_now(),
        config: &cfg,
    };
    fs::write(out.join("manifest.toml"), to_toml_string(&manifest)?)?;
    let data = generate_dataset(&p1, &p2, cfg.n_per_class, cfg.T, cfg.seed)?;
    write_with(&out.join("dataset.csv"), |w| data.write_csv(w))?;
    write_with(&out.join("model1.toml"), |w| ParamsFile::new(&p1, "true").write(w))?;
    write_with(&out.join("model2.toml"), |w| ParamsFile::new(&p2, "true").write(w))?;
    println!("wrote {} sequences of length {} to {}", data.len(), cfg.T, out.display());
    Ok(())
}

fn fit_em(data: &Path, out: &Path, config: Option<&Path>, seed: u64, workers: Option<usize>) -> Result<()> {
    let cfg: EmConfig = match config {
        Some(p) => toml::from_str(&read_text(p)?).with_context(|| format!("invalid EM config {}", p.display()))?,
        None => EmConfig::default(),
    };
    cfg.validate()?;
    let data = read_dataset(data)?;
    fs::create_dir_all(out)?;
    for label in [Label::One, Label::Two] {
        let batch = ObservationBatch::new(data.of_class(label).map(|s| s.observations.as_slice()))
            .with_context(|| format!("class {} has no usable sequences", label.index()))?;
        let seed = Seed(seed).child(label.index() as u64);
        let fit = exec::with_workers(workers, || em::fit(&batch, &cfg, seed, Parallelism::Parallel))
            .with_context(|| format!("EM fit for class {}", label.index()))?;
        let path = out.join(format!("model{}.toml", label.index()));
        write_with(&path, |w| ParamsFile::from_fit(&fit).write(w))?;
        println!(
            "class {}: log-likelihood {} (restart {}, {} iterations) -> {}",
            label.index(),
            fmt17(fit.train_log_likelihood),
            fit.restart_index,
            fit.iterations_used,
            path.display()
        );
    }
    Ok(())
}

fn train_lstm(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
    log: Option<&Path>,
    workers: Option<usize>,
) -> Result<()> {
    let cfg: TrainConfig = match config {
        Some(p) => {
            toml::from_str(&read_text(p)?).with_context(|| format!("invalid training config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    let data = read_dataset(data)?;
    let (model, history) = exec::with_workers(workers, || lstm::train(&data, &cfg, Seed(seed), Parallelism::Parallel))?;
    write_with(out, |w| model.write(w))?;
    if let Some(path) = log {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
        w.write_record(["epoch", "mean_loss", "train_accuracy"])?;
        for r in &history {
            w.write_record([r.epoch.to_string(), fmt17(r.mean_loss), fmt17(r.train_accuracy)])?;
        }
        w.flush()?;
    }
    if let Some(last) = history.last() {
        println!("final epoch loss {} accuracy {}", fmt17(last.mean_loss), fmt17(last.train_accuracy));
    }
    Ok(())
}

fn check_obs_dim(data: &Dataset, expected: usize, what: &str) -> Result<()> {
    if data.obs_dim() != expected {
        bail!(
            "dimension mismatch: dataset observations have dimension {} but {what} expects {expected}",
            data.obs_dim()
        );
    }
    Ok(())
}

fn classify(data: &Path, models: Option<&[PathBuf]>, net: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let data = read_dataset(data)?;
    let predictions: Vec<Prediction> = match (models, net) {
        (Some([m1, m2]), None) => {
            let load = |p: &PathBuf| -> Result<_> {
                let file = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
                ParamsFile::read(file)?.params().with_context(|| format!("invalid model file {}", p.display()))
            };
            let (p1, p2) = (load(m1)?, load(m2)?);
            check_obs_dim(&data, p1.obs_dim(), "model 1")?;
            check_obs_dim(&data, p2.obs_dim(), "model 2")?;
            LrtClassifier::new(p1, p2, Provenance::EmEstimated)?.classify_dataset(&data)?
        }
        (None, Some(path)) => {
            let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
            let model = LstmModel::read(file).with_context(|| format!("invalid network file {}", path.display()))?;
            check_obs_dim(&data, model.params.m_z(), "the network")?;
            model.predict_dataset(&data)?
        }
        _ => bail!("pass either --models MODEL1 MODEL2 or --net NET"),
    };
    let truth = data.labels();
    if let Some(path) = out {
        write_with(path, |w| write_predictions_csv(w, &truth, &predictions))?;
    }
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    let (counts, acc) = evaluate(&labels, &truth)?;
    println!(
        "accuracy {} ({} of {}; tp {} tn {} fp {} fn {})",
        fmt17(acc),
        counts.tp + counts.tn,
        counts.total(),
        counts.tp,
        counts.tn,
        counts.fp,
        counts.fn_
    );
    Ok(())
}

fn progress_line(p: &PointResult) {
    let parts: Vec<String> = p
        .runs
        .iter()
        .map(|(k, r)| match r.summary() {
            Some((m, _)) => format!("{k} {m:.4}"),
            None => format!("{k} failed"),
        })
        .collect();
    eprintln!("point {} ({}): {} [{:.1}s]", p.grid_index, p.value, parts.join(", "), p.seconds.values().sum::<f64>());
}

fn print_table(table: &ResultTable) {
    let kinds: Vec<ClassifierKind> = table.points.first().map(|p| p.runs.keys().copied().collect()).unwrap_or_default();
    let mut header = format!("{:>12}", "value");
    for k in &kinds {
        header.push_str(&format!(" {:>20}", k.name()));
    }
    println!("{header}");
    for p in &table.points {
        let mut line = format!("{:>12.6}", p.value);
        for k in &kinds {
            let cell = match p.runs[k].summary() {
                Some((m, s)) => {
                    let failed = p.runs[k].failures.len();
                    let mark = if failed > 0 { format!(" ({failed}x)") } else { String::new() };
                    format!("{m:.4} ± {s:.4}{mark}")
                }
                None => "failed".to_string(),
            };
            line.push_str(&format!(" {cell:>20}"));
        }
        println!("{line}");
    }
}

fn finish(report: &RunReport, allow_partial: bool) -> ExitCode {
    print_table(&report.table);
    println!("results in {}", report.out_dir.display());
    let failed = report.table.n_failed();
    if failed > 0 {
        eprintln!("{failed} classifier runs were excluded; see failures.csv");
        if !allow_partial {
            return ExitCode::from(3);
        }
    }
    ExitCode::SUCCESS
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out)?,
        Command::FitEm { data, out, config, seed, workers } => {
            fit_em(&data, &out, config.as_deref(), seed, workers.workers)?
        }
        Command::TrainLstm { data, out, config, seed, log, workers } => {
            train_lstm(&data, &out, config.as_deref(), seed, log.as_deref(), workers.workers)?
        }
        Command::Classify { data, models, net, out } => {
            classify(&data, models.as_deref(), net.as_deref(), out.as_deref())?
        }
        Command::Experiment { sweep, config, out, seed, n_mc, classifiers, allow_partial, workers } => {
            let overrides = config.as_deref().map(read_text).transpose()?;
            let mut cfg = ExperimentConfig::load(&sweep, overrides.as_deref()).with_context(|| match &config {
                Some(p) => format!("invalid experiment config {}", p.display()),
                None => format!("sweep {sweep}"),
            })?;
            if let Some(s) = seed {
                cfg.seed = Seed(s);
            }
            if let Some(n) = n_mc {
                cfg.n_mc = n;
            }
            if let Some(k) = classifiers {
                cfg.classifiers = k;
            }
            let out = out.unwrap_or_else(|| Path::new("results").join(&sweep));
            let report = experiments::execute(&cfg, &sweep, &out, workers.workers, progress_line)?;
            return Ok(finish(&report, allow_partial));
        }
        Command::Rerun { manifest, out, allow_partial, workers } => {
            let m = experiments::read_manifest(&manifest)
                .with_context(|| format!("invalid manifest {}", manifest.display()))?;
            let report = experiments::execute(&m.config, &m.sweep_name, &out, workers.workers, progress_line)?;
            return Ok(finish(&report, allow_partial));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
