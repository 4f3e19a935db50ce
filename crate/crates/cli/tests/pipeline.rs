use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_gasfgan");

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// Synthetic corpus of `groups * per_group` sensors, 21 days at T = 24.
    fn new(groups: usize, per_group: usize, extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ws = Self { dir };
        let out = ws.run(&[
            "synth",
            "--out",
            "flows.csv",
            "--groups",
            &groups.to_string(),
            "--per-group",
            &per_group.to_string(),
            "--days",
            "21",
            "--intervals",
            "24",
            "--gappy",
            "0.1",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        ws.write_config(extra);
        ws
    }

    fn write_config(&self, extra: &str) {
        let cfg = format!(
            r#"seed = 3
output_dir = "out"

[data]
csv = ["flows.csv"]
intervals = 24
pad = 2

[cluster]
k_min = 1
k_max = 5

[model]
latent_dim = 6
generator_channels = [6, 4]
discriminator_channels = [4, 6]

[train]
epochs = 2
batch_size = 4

[impute]
iterations = 3
restarts = 1

[evaluate]
missing_rates = [0.1, 0.5]
repetitions = 2
{extra}"#
        );
        fs::write(self.path().join("gasfgan.toml"), cfg).unwrap();
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn out(&self) -> PathBuf {
        self.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .current_dir(self.path())
            .env_remove("GASFGAN_OUTPUT_DIR")
            .env_remove("GASFGAN_DEVICE")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn config_errors_stop_before_any_work() {
    let ws = Workspace::new(1, 2, "");
    fs::remove_file(ws.path().join("flows.csv")).unwrap();
    let o = ws.run(&["ingest"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not exist"));
    assert!(!ws.out().exists());

    let ws = Workspace::new(1, 2, "");
    let o = ws.run(&["impute", "--mr", "0.99"]);
    assert_eq!(code(&o), 2);
    assert!(!ws.out().exists());

    let o = ws.run(&["--config", "missing.toml", "ingest"]);
    assert_eq!(code(&o), 2);

    fs::write(ws.path().join("bad.toml"), "seed = 1\nunknown_key = true\n").unwrap();
    assert_eq!(code(&ws.run(&["--config", "bad.toml", "ingest"])), 2);

    let o = Command::new(BIN)
        .args(["ingest"])
        .current_dir(ws.path())
        .env("GASFGAN_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_csv_is_a_data_error_with_location() {
    let ws = Workspace::new(1, 2, "");
    fs::write(
        ws.path().join("flows.csv"),
        "timestamp,sensor_id,flow\n2013-01-01T00:00:00,a,abc\n",
    )
    .unwrap();
    let o = ws.run(&["ingest"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("flows.csv:2"), "{}", stderr(&o));
}

#[test]
fn ingest_is_byte_identical_on_rerun() {
    let ws = Workspace::new(2, 2, "");
    ws.ok(&["ingest"]);
    let first = tree(&ws.out());
    ws.ok(&["ingest"]);
    assert_eq!(first, tree(&ws.out()));
    let summary = json(&ws.out().join("ingest_summary.json"));
    assert_eq!(summary["sensors"].as_array().unwrap().len(), 4);
}

#[test]
fn output_root_comes_from_the_environment() {
    let ws = Workspace::new(1, 2, "");
    let alt = ws.path().join("elsewhere");
    let o = Command::new(BIN)
        .arg("ingest")
        .current_dir(ws.path())
        .env("GASFGAN_OUTPUT_DIR", &alt)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(alt.join("datasets/index.json").exists());
    assert!(!ws.out().exists());
}

#[test]
fn clustering_choices() {
    let ws = Workspace::new(3, 3, "");
    ws.ok(&["ingest"]);
    ws.ok(&["cluster"]);
    let e = json(&ws.out().join("clusters/elbow.json"));
    assert_eq!(e["k"], 3);
    assert_eq!(e["method"], "elbow");
    let inertias: Vec<f64> = e["inertias"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(inertias.windows(2).all(|w| w[1] <= w[0]));

    ws.ok(&["cluster", "--k", "5"]);
    let e = json(&ws.out().join("clusters/elbow.json"));
    assert_eq!(
        (e["k"].as_u64(), e["method"].as_str()),
        (Some(5), Some("override"))
    );
    assert_eq!(json(&ws.out().join("clusters/assignment.json"))["k"], 5);

    let single = Workspace::new(1, 1, "");
    single.ok(&["ingest"]);
    single.ok(&["cluster"]);
    assert_eq!(json(&single.out().join("clusters/elbow.json"))["k"], 1);
}

#[test]
fn pipeline_trains_resumes_imputes_and_reports() {
    let ws = Workspace::new(2, 2, "");
    ws.ok(&["ingest"]);
    ws.ok(&["cluster", "--k", "2"]);

    // Imputing before training names the missing cluster.
    let o = ws.run(&["impute"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("cluster 0"), "{}", stderr(&o));

    ws.ok(&["train"]);
    for c in 0..2 {
        for class in ["weekday", "nonweekday"] {
            assert!(ws.out().join(format!("{c}/{class}/checkpoint")).exists());
        }
    }
    let log = ws.out().join("0/weekday/train_log.jsonl");
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);

    let cfg = fs::read_to_string(ws.path().join("gasfgan.toml"))
        .unwrap()
        .replace("epochs = 2", "epochs = 4");
    fs::write(ws.path().join("gasfgan.toml"), cfg).unwrap();
    ws.ok(&[
        "train",
        "--cluster",
        "0",
        "--day-class",
        "weekday",
        "--resume",
    ]);
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 4);

    ws.ok(&["impute"]);
    let metrics = fs::read_to_string(ws.out().join("impute/metrics.csv")).unwrap();
    // Exactly one row per repetition for each (method, sensor, day class, missing rate).
    let mut reader = csv_rows(&metrics);
    let header = reader.remove(0);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut cells: std::collections::BTreeMap<Vec<String>, Vec<String>> = Default::default();
    for r in &reader {
        let key = ["method", "sensor_id", "day_class", "missing_rate"]
            .map(|k| r[col(k)].clone())
            .to_vec();
        cells
            .entry(key)
            .or_default()
            .push(r[col("repetition")].clone());
    }
    assert!(cells.len() >= 3 * 4 * 2);
    assert!(cells.values().all(|reps| reps == &["0", "1"]), "{cells:?}");
    let first_run = metrics.clone();
    ws.ok(&["impute"]);
    assert_eq!(
        first_run,
        fs::read_to_string(ws.out().join("impute/metrics.csv")).unwrap()
    );
    assert!(ws.out().join("impute/mae_vs_missing_rate.svg").exists());
    assert!(ws.out().join("impute/trend.json").exists());

    ws.ok(&["evaluate"]);
    for g in ["sensor", "cluster", "missing_rate"] {
        assert!(ws.out().join(format!("evaluate/by_{g}.csv")).exists());
    }
    ws.ok(&["report"]);
    let summary = fs::read_to_string(ws.out().join("report/summary.md")).unwrap();
    assert!(summary.contains("K = 2"));
    assert!(ws.out().join("report/mmd_0_weekday.svg").exists());

    // One corrupted day through --one-shot.
    let flows = fs::read_to_string(ws.path().join("flows.csv")).unwrap();
    let mut lines = flows.lines();
    let header = lines.next().unwrap();
    let day: Vec<&str> = lines
        .filter(|l| l.starts_with("2013-01-08") && l.contains(",g0s00,"))
        .take(20)
        .collect();
    fs::write(
        ws.path().join("one.csv"),
        format!("{header}\n{}\n", day.join("\n")),
    )
    .unwrap();
    ws.ok(&["impute", "--one-shot", "one.csv"]);
    let shot = fs::read_to_string(ws.out().join("impute/one_shot.csv")).unwrap();
    assert_eq!(shot.lines().count(), 1 + 24);
    assert_eq!(
        shot.lines().filter(|l| l.ends_with(",imputed")).count(),
        24 - day.len()
    );

    let unknown = day
        .iter()
        .map(|l| l.replace("g0s00", "nobody"))
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(
        ws.path().join("unknown.csv"),
        format!("{header}\n{unknown}\n"),
    )
    .unwrap();
    assert_eq!(code(&ws.run(&["impute", "--one-shot", "unknown.csv"])), 3);
}

#[test]
fn concurrent_runs_are_rejected() {
    let ws = Workspace::new(1, 2, "");
    fs::create_dir_all(ws.out()).unwrap();
    fs::write(ws.out().join(".gasfgan.lock"), "pid 1\n").unwrap();
    let o = ws.run(&["ingest"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lock"));
    assert!(!ws.out().join("datasets").exists());
}
