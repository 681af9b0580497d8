//! End-to-end checks of the `sheaf-sim` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_sheaf-sim");

fn reference_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/reference.json")
}

fn sim(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(BIN);
    c.args(args);
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn run(out: &Path, sets: &[&str], envs: &[(&str, &str)]) -> Output {
    let cfg = reference_path();
    let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    sim(&args, envs)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_requested_rounds() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["train.rounds=5"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let hash = stdout.lines().next().unwrap().strip_prefix("config hash ").unwrap().to_string();

    let log = fs::read_to_string(dir.path().join("runlog.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 6);
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(&header[..3], ["round", "psi", "psi_next"]);
    assert_eq!(*header.last().unwrap(), "config_hash");
    assert!(lines[1..].iter().all(|l| l.ends_with(&hash)));

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], hash.as_str());
    assert_eq!(summary["rounds_completed"], 5);
    assert!(dir.path().join("checkpoint.json").exists());
    assert!(dir.path().join("timing.csv").exists());
}

#[test]
fn disconnected_modality_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["graph.modalities=[[0],[0],[1],[1],[1],[1],[0],[0],[0]]"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("disconnected"), "{}", stderr(&o));
    assert!(!dir.path().join("runlog.csv").exists());
}

#[test]
fn unknown_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["train.bogus=1"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn divergence_exits_3_with_partial_log() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["train.rounds=50", "train.alpha=1e6", "train.eta_phi=1e6"], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let done = summary["rounds_completed"].as_u64().unwrap() as usize;
    assert!(done < 50);
    let log = fs::read_to_string(dir.path().join("runlog.csv")).unwrap();
    assert_eq!(log.lines().count(), done + 1);
}

#[test]
fn runlog_independent_of_thread_count() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let sets = ["train.rounds=15", "train.batch_size=32", "train.full_batch=false"];
    assert_eq!(run(a.path(), &sets, &[("SHEAF_SIM_THREADS", "1")]).status.code(), Some(0));
    assert_eq!(run(b.path(), &sets, &[("SHEAF_SIM_THREADS", "4")]).status.code(), Some(0));
    let ra = fs::read(a.path().join("runlog.csv")).unwrap();
    let rb = fs::read(b.path().join("runlog.csv")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn sweep_layout_and_aggregate() {
    let dir = TempDir::new().unwrap();
    let cfg = reference_path();
    let o = sim(
        &[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--set",
            "train.rounds=5",
            "--seeds",
            "3,4",
            "--algorithms",
            "sheaf_dmfl_att,local",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for alg in ["sheaf_dmfl_att", "local"] {
        for s in [3, 4] {
            assert!(dir.path().join(alg).join(format!("seed_{s}")).join("runlog.csv").exists());
        }
    }
    let a = fs::read(dir.path().join("sheaf_dmfl_att/seed_3/runlog.csv")).unwrap();
    let b = fs::read(dir.path().join("sheaf_dmfl_att/seed_4/runlog.csv")).unwrap();
    assert_ne!(a, b);
    let agg = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    let rows: Vec<&str> = agg.lines().collect();
    assert_eq!(rows[0], "algorithm,group,n_seeds,mean_test_acc,sd_test_acc");
    assert_eq!(rows.len(), 1 + 2 * 3);
}

#[test]
fn single_seed_aggregate_equals_run() {
    let dir = TempDir::new().unwrap();
    let cfg = reference_path();
    let o = sim(
        &[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--set",
            "train.rounds=5",
            "--seeds",
            "0",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sheaf_dmfl_att/seed_0/summary.json")).unwrap())
            .unwrap();
    let finals: Vec<f64> = summary["final_test_acc"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let mut rdr = csv::Reader::from_path(dir.path().join("aggregate.csv")).unwrap();
    let means: Vec<f64> = rdr.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
    assert_eq!(means, finals);
}

#[test]
fn resume_continues_and_rejects_other_configs() {
    let full = TempDir::new().unwrap();
    let part = TempDir::new().unwrap();
    let sets = ["train.rounds=12", "output.checkpoint_every=4"];
    assert_eq!(run(full.path(), &sets, &[]).status.code(), Some(0));
    assert_eq!(run(part.path(), &sets, &[]).status.code(), Some(0));
    // resuming a finished run changes nothing
    let cfg = reference_path();
    let o = sim(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            part.path().to_str().unwrap(),
            "--resume",
            "--set",
            sets[0],
            "--set",
            sets[1],
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(full.path().join("runlog.csv")).unwrap(), fs::read(part.path().join("runlog.csv")).unwrap());

    let o = sim(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            part.path().to_str().unwrap(),
            "--resume",
            "--set",
            "train.rounds=13",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn verify_catches_tampered_mixing() {
    let o = sim(&["verify", "--level", "fast", "--inject-fault", "mixing"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("[FAIL] mixing matrices")), "{stdout}");
}

#[test]
fn verify_fast_passes() {
    let o = sim(&["verify", "--level", "fast"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}
