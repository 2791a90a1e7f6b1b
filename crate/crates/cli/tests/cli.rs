use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_conda-tgl"));
    c.env("CONDA_TGL_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_str(&stdout(o)).unwrap()
}

fn synth(dir: &Path, name: &str, seed: u64) -> (PathBuf, serde_json::Value) {
    let out = dir.join(name);
    let seed = seed.to_string();
    let o = run(&["synth", "--nodes", "40", "--events", "400", "--seed", &seed, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (out, json(&o))
}

const TINY: &str = "seq_len = 4\ndim = 8\ntime_dim = 4\nr_ctdg = 1\nr_conda = 1\ncycles = 1\n\
                    batch_size = 100\ntrain_ratio = 0.6\nval_ratio = 0.2\ntest_ratio = 0.2\ntiming = false\n";

fn config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let out = dir.join("runs");
    fs::write(&path, format!("data = {}\nout = {}\n{TINY}{extra}", data.display(), out.display())).unwrap();
    path
}

fn run_dir(o: &Output) -> PathBuf {
    let text = stdout(o);
    let line = text.lines().find_map(|l| l.strip_prefix("outputs in ")).expect("output directory line");
    PathBuf::from(line)
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, sa) = synth(dir.path(), "a.cnde", 4);
    let (b, sb) = synth(dir.path(), "b.cnde", 4);
    let (_, sc) = synth(dir.path(), "c.cnde", 5);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    assert_eq!(sa["content_hash"], sb["content_hash"]);
    assert_ne!(sa["content_hash"], sc["content_hash"]);
    assert_eq!(sa["num_nodes"], 40);
    assert_eq!(sa["num_events"], 400);
    assert!(dir.path().join("a.stats.json").exists());
}

#[test]
fn ingest_reports_stats_and_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("edges.csv");
    fs::write(&csv, "src,dst,t\n0,1,1.0\n1,2,2.0\n0,2,3.0\n").unwrap();
    let out = dir.path().join("edges.cnde");
    let args = ["ingest", "--input", csv.to_str().unwrap(), "--format", "edgelist", "--out", out.to_str().unwrap()];
    let first = run(&args);
    assert!(first.status.success());
    let stats = json(&first);
    assert_eq!((stats["num_nodes"].as_u64(), stats["num_events"].as_u64()), (Some(3), Some(3)));
    assert_eq!(json(&run(&args))["content_hash"], stats["content_hash"]);

    fs::write(&csv, "").unwrap();
    let empty = run(&args);
    assert_eq!(empty.status.code(), Some(2));
    assert!(!empty.stderr.is_empty());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["synth", "--out", "x", "--format", "y"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let (data, _) = synth(dir.path(), "g.cnde", 1);
    let cfg = config(dir.path(), &data, "no_such_key = 1\n");
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
    let cfg = config(dir.path(), &data, "");
    let bad = run(&["train", "--config", cfg.to_str().unwrap(), "--set", "diff_len=9"]);
    assert_eq!(bad.status.code(), Some(1));
    let threads = bin().env("CONDA_TGL_THREADS", "zero").args(["train", "--config", cfg.to_str().unwrap()]).output();
    assert_eq!(threads.unwrap().status.code(), Some(1));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &dir.path().join("absent.cnde"), "");
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.cnde"));
}

#[test]
fn train_writes_traceable_reproducible_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, stats) = synth(dir.path(), "g.cnde", 2);
    let cfg = config(dir.path(), &data, "");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--augmenter", "conda"];
    let first = run(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let out = run_dir(&first);
    let report = fs::read_to_string(out.join("report.jsonl")).unwrap();
    assert!(out.join("best.ckpt").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dataset_hash"], stats["content_hash"]);
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["augmenter"], "conda");
    assert!(out.ends_with(format!("train-{}", manifest["run_id"].as_str().unwrap())));

    let second = run(&args);
    assert_eq!(run_dir(&second), out);
    assert_eq!(fs::read_to_string(out.join("report.jsonl")).unwrap(), report);

    let baseline = run(&["train", "--config", cfg.to_str().unwrap(), "--augmenter", "none"]);
    assert!(baseline.status.success());
    assert_ne!(run_dir(&baseline), out);
    assert!(!fs::read_to_string(run_dir(&baseline).join("report.jsonl")).unwrap().contains("\"conda\""));
}

#[test]
fn sweep_keeps_value_order_and_baseline_row() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = synth(dir.path(), "g.cnde", 3);
    let cfg = config(dir.path(), &data, "");
    let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "k", "--values", "1e-2,0", "--seeds", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir(&o).join("sweep.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    let values: Vec<&str> = rows.iter().map(|r| r["value"].as_str().unwrap()).collect();
    assert_eq!(values, ["1e-2", "0"]);
    assert_eq!(rows[1]["mean_ap"], table["baseline"]["mean_ap"]);
    assert!(stdout(&o).contains("test AP"));

    let empty = run(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "k", "--values", ""]);
    assert_eq!(empty.status.code(), Some(1));
}
