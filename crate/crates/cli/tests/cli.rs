use std::fs::{self, File};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use lrtbench::classify::{write_predictions_csv, LrtClassifier, Provenance};
use lrtbench::em::{self, EmConfig, ParamsFile};
use lrtbench::exec::Parallelism;
use lrtbench::kalman::ObservationBatch;
use lrtbench::ssm::generate_dataset;
use lrtbench::{Dataset, Label, ModelParams, Seed};
use tempfile::tempdir;

fn lrtbench(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrtbench"))
        .args(args)
        .current_dir(dir)
        .env_remove("LRTBENCH_WORKERS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn model_table(name: &str, q: f64, r: f64) -> String {
    format!("[{name}]\nF = [[1.0]]\nH = [[1.0]]\nQ = [[{q:e}]]\nR = [[{r:e}]]\nmu0 = [0.0]\nSigma0 = [[1e-4]]\n")
}

fn simulate_config(ratio: f64) -> String {
    format!(
        "T = 120\nn_per_class = 40\nseed = 11\n{}{}",
        model_table("model1", 1e-5, 1e-3),
        model_table("model2", 1e-5 * ratio, 1e-3)
    )
}

fn accuracy_of(o: &Output) -> f64 {
    let text = String::from_utf8_lossy(&o.stdout);
    let line = text.lines().find(|l| l.starts_with("accuracy")).expect("accuracy line");
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn missing_sequence_length_is_reported_by_key() {
    let dir = tempdir().unwrap();
    let cfg = simulate_config(10.0).replace("T = 120\n", "");
    fs::write(dir.path().join("sim.toml"), cfg).unwrap();
    let o = lrtbench(&["simulate", "--config", "sim.toml", "--out", "data"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing field `T`"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("sim.toml"), simulate_config(10.0) + "extra = 1\n").unwrap();
    let o = lrtbench(&["simulate", "--config", "sim.toml", "--out", "data"], dir.path());
    assert!(!o.status.success());
    fs::write(dir.path().join("exp.toml"), "n_mcc = 3\n").unwrap();
    let o = lrtbench(&["experiment", "seq-length", "--config", "exp.toml"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("n_mcc"), "{}", stderr(&o));
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("sim.toml"), simulate_config(10.0)).unwrap();
    for out in ["a", "b"] {
        let o = lrtbench(&["simulate", "--config", "sim.toml", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["dataset.csv", "model1.toml", "model2.toml"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let data = Dataset::read_csv(File::open(dir.path().join("a/dataset.csv")).unwrap()).unwrap();
    assert_eq!((data.count(Label::One), data.count(Label::Two), data.seq_len()), (40, 40, 120));
    assert!(dir.path().join("a/manifest.toml").exists());
}

#[test]
fn true_models_separate_an_easy_pair() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("sim.toml"), simulate_config(1e4)).unwrap();
    assert!(lrtbench(&["simulate", "--config", "sim.toml", "--out", "d"], dir.path()).status.success());
    let o = lrtbench(
        &["classify", "--data", "d/dataset.csv", "--models", "d/model1.toml", "d/model2.toml", "--out", "p.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(accuracy_of(&o) >= 0.99);
    let preds = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert_eq!(preds.lines().next().unwrap(), "seq_id,true_label,pred_label,loglik1,loglik2");
    assert_eq!(preds.lines().count(), 81);
}

#[test]
fn fitted_model_files_classify_like_the_in_memory_fit() {
    let dir = tempdir().unwrap();
    let p1 = ModelParams::scalar(1.0, 1.0, 1e-5, 1e-3, 0.0, 1e-4);
    let p2 = ModelParams::scalar(1.0, 1.0, 3e-4, 1e-3, 0.0, 1e-4);
    let data = generate_dataset(&p1, &p2, 15, 60, Seed(4)).unwrap();
    data.write_csv(File::create(dir.path().join("data.csv")).unwrap()).unwrap();
    let cfg = EmConfig { n_restarts: 4, ..EmConfig::default() };
    let fits: Vec<_> = [Label::One, Label::Two]
        .into_iter()
        .map(|l| {
            let batch = ObservationBatch::new(data.of_class(l).map(|s| s.observations.as_slice())).unwrap();
            em::fit(&batch, &cfg, Seed(l.index() as u64), Parallelism::Sequential).unwrap()
        })
        .collect();
    for (i, fit) in fits.iter().enumerate() {
        ParamsFile::from_fit(fit).write(File::create(dir.path().join(format!("m{}.toml", i + 1))).unwrap()).unwrap();
    }
    let c = LrtClassifier::new(fits[0].params.clone(), fits[1].params.clone(), Provenance::EmEstimated).unwrap();
    let mut expected = Vec::new();
    write_predictions_csv(&mut expected, &data.labels(), &c.classify_dataset(&data).unwrap()).unwrap();

    let o =
        lrtbench(&["classify", "--data", "data.csv", "--models", "m1.toml", "m2.toml", "--out", "p.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(dir.path().join("p.csv")).unwrap(), expected);
}

#[test]
fn observation_dimension_mismatch_is_diagnosed() {
    let dir = tempdir().unwrap();
    let mut wide = String::from("seq_id,label,k,z_1,z_2\n");
    for (seq, label) in [(0, 1), (1, 2)] {
        for k in 1..=5 {
            wide.push_str(&format!("{seq},{label},{k},0.{k},-0.{k}\n"));
        }
    }
    fs::write(dir.path().join("wide.csv"), wide).unwrap();
    fs::write(dir.path().join("sim.toml"), simulate_config(10.0)).unwrap();
    assert!(lrtbench(&["simulate", "--config", "sim.toml", "--out", "d"], dir.path()).status.success());
    let o = lrtbench(&["classify", "--data", "wide.csv", "--models", "d/model1.toml", "d/model2.toml"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("dimension mismatch"), "{}", stderr(&o));
}

#[test]
fn lstm_trains_and_classifies_from_files() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("sim.toml"), simulate_config(1e4)).unwrap();
    fs::write(dir.path().join("net.toml"), "max_epochs = 60\n").unwrap();
    assert!(lrtbench(&["simulate", "--config", "sim.toml", "--out", "d"], dir.path()).status.success());
    let o = lrtbench(
        &["train-lstm", "--data", "d/dataset.csv", "--out", "net.out.toml", "--config", "net.toml", "--log", "log.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("log.csv")).unwrap().lines().count(), 61);
    let o = lrtbench(&["classify", "--data", "d/dataset.csv", "--net", "net.out.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(accuracy_of(&o) >= 0.8);
}

const FAST: &str =
    "grid = [1.0, 1000.0]\nT = 40\nn_train_per_class = 10\nn_test_per_class = 30\n[em]\nn_restarts = 3\n";

#[test]
fn experiment_subset_reruns_identically_from_its_manifest() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("fast.toml"), FAST).unwrap();
    let o = lrtbench(
        &[
            "experiment",
            "task-difficulty-q",
            "--config",
            "fast.toml",
            "--n-mc",
            "2",
            "--classifiers",
            "true,em",
            "--out",
            "a",
            "--workers",
            "1",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("±"), "{stdout}");
    let summary = fs::read_to_string(dir.path().join("a/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2);

    let o = Command::new(env!("CARGO_BIN_EXE_lrtbench"))
        .args(["rerun", "--manifest", "a/manifest.toml", "--out", "b"])
        .env("LRTBENCH_WORKERS", "3")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(dir.path().join("b/manifest.toml")).unwrap();
    assert!(manifest.contains("workers = 3"), "{manifest}");
    for file in ["raw.csv", "summary.csv", "failures.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(file)).unwrap(),
            fs::read(dir.path().join("b").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn excluded_trials_fail_the_run_unless_partial_results_are_allowed() {
    let dir = tempdir().unwrap();
    // Initial transition coefficients this large overflow the filter on every restart.
    fs::write(dir.path().join("bad.toml"), FAST.to_string() + "f_range = [1e200, 2e200]\n").unwrap();
    let args = ["experiment", "task-difficulty-q", "--config", "bad.toml", "--n-mc", "2", "--classifiers", "true,em"];
    let o = lrtbench(&[&args[..], &["--out", "strict"]].concat(), dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let failures = fs::read_to_string(dir.path().join("strict/failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 1 + 2 * 2);
    assert!(failures.contains("all 3 EM restarts failed"));
    let manifest = fs::read_to_string(dir.path().join("strict/manifest.toml")).unwrap();
    assert!(manifest.contains("status = \"partial\""));

    let o = lrtbench(&[&args[..], &["--out", "lenient", "--allow-partial"]].concat(), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_sweep_is_rejected() {
    let dir = tempdir().unwrap();
    let o = lrtbench(&["experiment", "task-difficulty-x"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown sweep"), "{}", stderr(&o));
}

#[test]
fn interrupted_sweep_leaves_complete_points_on_disk() {
    let dir = tempdir().unwrap();
    let per_point = 2 * 2;
    let grid: Vec<String> = (0..12).map(|i| format!("{}.0", 1 + i)).collect();
    let cfg = format!("grid = [{}]\nT = 120\nn_train_per_class = 40\nn_test_per_class = 40\n", grid.join(", "));
    fs::write(dir.path().join("slow.toml"), cfg).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_lrtbench"))
        .args([
            "experiment",
            "task-difficulty-q",
            "--config",
            "slow.toml",
            "--n-mc",
            "2",
            "--classifiers",
            "true,em",
            "--out",
            "run",
            "--workers",
            "1",
        ])
        .current_dir(dir.path())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let raw = dir.path().join("run/raw.csv");
    let start = Instant::now();
    loop {
        let rows = fs::read_to_string(&raw).map(|s| s.lines().count()).unwrap_or(0);
        if rows > 1 {
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "no grid point finished");
        assert!(child.try_wait().unwrap().is_none(), "sweep exited early");
        sleep(Duration::from_millis(10));
    }
    child.kill().unwrap();
    child.wait().unwrap();

    let text = fs::read_to_string(&raw).unwrap();
    assert!(text.ends_with('\n'));
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "sweep_value,classifier,run_idx,accuracy");
    let data = rows.len() - 1;
    assert!(data > 0 && data % per_point == 0, "{data} rows is not a whole number of points");
    assert!(data < grid.len() * per_point, "the sweep finished before it was interrupted");
    for row in &rows[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 4);
        fields[3].parse::<f64>().unwrap();
    }
    assert!(!dir.path().join("run/summary.csv").exists());
    let manifest = fs::read_to_string(dir.path().join("run/manifest.toml")).unwrap();
    assert!(manifest.contains("status = \"running\""));
}
