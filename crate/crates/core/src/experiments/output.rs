//! Result files and run manifests.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{run_sweep, ExperimentConfig, PointResult, ResultTable};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::textfmt::{fmt17, to_toml_string};

pub const MANIFEST_FORMAT: &str = "lrtbench-run/1";
pub const RAW_FILE: &str = "raw.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Appends `sweep_value,classifier,run_idx,accuracy` rows for one point.
pub fn write_raw_rows<W: Write>(out: &mut csv::Writer<W>, point: &PointResult) -> Result<()> {
    for (kind, runs) in &point.runs {
        for (run, acc) in &runs.accuracies {
            out.write_record([fmt17(point.value), kind.to_string(), run.to_string(), fmt17(*acc)])?;
        }
    }
    Ok(())
}

/// Raw per-run CSV that is flushed after every grid point, so an
/// interrupted sweep leaves every completed point on disk. Excluded runs go
/// to a companion failures file.
pub struct RawCsv {
    raw: csv::Writer<File>,
    failures: csv::Writer<File>,
}

impl RawCsv {
    pub fn create(dir: &Path) -> Result<Self> {
        let mut raw = csv::Writer::from_path(dir.join(RAW_FILE))?;
        raw.write_record(["sweep_value", "classifier", "run_idx", "accuracy"])?;
        raw.flush()?;
        let mut failures = csv::Writer::from_path(dir.join(FAILURES_FILE))?;
        failures.write_record(["sweep_value", "classifier", "run_idx", "error"])?;
        failures.flush()?;
        Ok(RawCsv { raw, failures })
    }

    pub fn append(&mut self, point: &PointResult) -> Result<()> {
        write_raw_rows(&mut self.raw, point)?;
        for (kind, runs) in &point.runs {
            for (run, msg) in &runs.failures {
                self.failures.write_record([fmt17(point.value), kind.to_string(), run.to_string(), msg.clone()])?;
            }
        }
        self.raw.flush()?;
        self.failures.flush()?;
        Ok(())
    }
}

/// `sweep_value,classifier,acc_mean,acc_std,n_ok,n_failed`; mean and std are
/// `nan` when every run of a classifier failed.
pub fn write_summary<W: Write>(out: W, table: &ResultTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sweep_value", "classifier", "acc_mean", "acc_std", "n_ok", "n_failed"])?;
    for p in &table.points {
        for (kind, runs) in &p.runs {
            let (mean, std) = runs.summary().unwrap_or((f64::NAN, f64::NAN));
            w.write_record([
                fmt17(p.value),
                kind.to_string(),
                fmt17(mean),
                fmt17(std),
                runs.accuracies.len().to_string(),
                runs.failures.len().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to repeat a run: the sweep name and the fully resolved
/// configuration, plus bookkeeping that does not affect results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub sweep_name: String,
    pub workers: usize,
    pub started_unix_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix_s: Option<f64>,
    /// `running`, `complete` or `partial` (some runs excluded).
    pub status: String,
    #[serde(default)]
    pub n_failed: usize,
    #[serde(default)]
    pub stage_seconds: BTreeMap<String, f64>,
    pub config: ExperimentConfig,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    fs::write(path, to_toml_string(m)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let m: RunManifest = toml::from_str(&fs::read_to_string(path)?)?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("unsupported manifest format {:?}", m.format)));
    }
    m.config.validate()?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub table: ResultTable,
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

/// Runs a sweep into `out_dir`: the manifest is written before any trial
/// starts, raw rows after each grid point, and the summary at the end.
/// `workers` bounds the thread pool (default: available parallelism).
pub fn execute<F>(
    config: &ExperimentConfig,
    sweep_name: &str,
    out_dir: &Path,
    workers: Option<usize>,
    mut progress: F,
) -> Result<RunReport>
where
    F: FnMut(&PointResult) + Send,
{
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        sweep_name: sweep_name.into(),
        workers: workers.unwrap_or_else(exec::available_workers),
        started_unix_s: unix_now(),
        finished_unix_s: None,
        status: "running".into(),
        n_failed: 0,
        stage_seconds: BTreeMap::new(),
        config: config.clone(),
    };
    write_manifest(&manifest_path, &manifest)?;
    let mut raw = RawCsv::create(out_dir)?;
    let table = exec::with_workers(workers, || {
        run_sweep(config, Parallelism::Parallel, |p| {
            raw.append(p)?;
            progress(p);
            Ok(())
        })
    })?;
    write_summary(BufWriter::new(File::create(out_dir.join(SUMMARY_FILE))?), &table)?;
    manifest.finished_unix_s = Some(unix_now());
    manifest.n_failed = table.n_failed();
    manifest.status = if manifest.n_failed == 0 { "complete" } else { "partial" }.into();
    manifest.stage_seconds = table.stage_seconds().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    write_manifest(&manifest_path, &manifest)?;
    Ok(RunReport { table, manifest, out_dir: out_dir.to_path_buf() })
}
