use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "benchmark": { "subjects": 3, "train_trials": 12, "test_trials": 8 },
  "train": { "epochs": 3, "batch_size": 8 }
}"#;

fn subcond(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subcond"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SUBCOND_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}, stderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn param_count_satisfies_counting_identity() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&subcond(&["param-count", "--out", "o"], dir.path()));
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("condition,shared,per_subject,subjects,total,active"));
    let mut seen = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let n: Vec<usize> = f[1..].iter().map(|v| v.parse().unwrap()).collect();
        let (shared, per, subjects, total, active) = (n[0], n[1], n[2], n[3], n[4]);
        assert_eq!(total, shared + subjects * per, "{line}");
        assert_eq!(active, shared + per, "{line}");
        if f[0] == "subject_conditioned" {
            assert_eq!(subjects, 6);
            assert!(per > 0);
        }
        seen += 1;
    }
    assert_eq!(seen, 4);
    assert!(dir.path().join("o/manifest.json").exists());
}

#[test]
fn bad_config_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"benchmark": {"shift_strenght": 1.0}}"#).unwrap();
    let out = subcond(&["compare", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("benchmark.shift_strenght"), "{stderr}");
    assert_eq!(stderr.trim().lines().count(), 1);

    let out = subcond(&["compare", "--set", "train.batch_size=\"many\""], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));

    let out = subcond(&["compare", "--set", "benchmark.shift_rank=40"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = subcond(
        &["train", "--mode", "sc", "--train-data", "missing.scnd", "--test-data", "missing.scnd"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.scnd"));
}

#[test]
fn compare_is_byte_identical_across_runs_and_manifest_reruns() {
    let dir = tiny_dir();
    let p = dir.path();
    for out in ["a", "b"] {
        ok(&subcond(&["compare", "--config", "tiny.json", "--seeds", "1,2", "--out", out], p));
    }
    ok(&subcond(&["compare", "--manifest", "a/manifest.json", "--jobs", "3", "--out", "c"], p));
    let names = ["results.csv", "aggregate.csv", "diagnostics.csv", "embeddings_seed1.csv", "embeddings_seed2.csv"];
    for name in names {
        let a = fs::read(p.join("a").join(name)).unwrap();
        assert_eq!(a, fs::read(p.join("b").join(name)).unwrap(), "{name}");
        assert_eq!(a, fs::read(p.join("c").join(name)).unwrap(), "{name}");
    }
    let results = fs::read_to_string(p.join("a/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 4 * 2 * 3);
}

#[test]
fn training_from_written_files_matches_in_memory() {
    let dir = tiny_dir();
    let p = dir.path();
    ok(&subcond(&["gen-data", "--config", "tiny.json", "--seed", "4", "--out", "data"], p));
    let common = ["--config", "tiny.json", "--seed", "4", "--mode", "lora"];
    ok(&subcond(
        &[&["train", "--out", "mem"][..], &common[..]].concat(),
        p,
    ));
    ok(&subcond(
        &[
            &["train", "--out", "file", "--train-data", "data/train_seed4.scnd", "--test-data", "data/test_seed4.scnd"][..],
            &common[..],
        ]
        .concat(),
        p,
    ));
    assert_eq!(
        fs::read(p.join("mem/results.csv")).unwrap(),
        fs::read(p.join("file/results.csv")).unwrap()
    );
}

#[test]
fn out_dir_falls_back_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_subcond"))
        .args(["param-count", "--mode", "agnostic"])
        .current_dir(dir.path())
        .env("SUBCOND_OUT_DIR", &target)
        .output()
        .unwrap();
    ok(&out);
    assert!(target.join("param_count.csv").exists());
}

#[test]
fn finetune_export_and_similarity_commands() {
    let dir = tiny_dir();
    let p = dir.path();
    let stdout = ok(&subcond(&["finetune", "--config", "tiny.json", "--seed", "1", "--out", "ft"], p));
    let row = stdout.lines().nth(1).unwrap();
    assert!(row.starts_with("1,2,"), "{row}");
    assert!(row.ends_with(",true,true"), "{row}");

    ok(&subcond(&["export-embeddings", "--config", "tiny.json", "--seed", "1", "--out", "emb"], p));
    let emb = fs::read_to_string(p.join("emb/embeddings_seed1.csv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + 3 * 3 * 8);

    ok(&subcond(&["adapter-sim", "--config", "tiny.json", "--seed", "1", "--out", "sim"], p));
    let sim = fs::read_to_string(p.join("sim/adapter_similarity.csv")).unwrap();
    let rows: Vec<&str> = sim.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 3 * 3);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        let v: f64 = f[4].parse().unwrap();
        if f[2] == f[3] {
            assert!((v - 1.0).abs() < 1e-12, "{r}");
        }
        assert!((-1.0..=1.0).contains(&v));
    }
}
