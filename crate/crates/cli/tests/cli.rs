use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vmamba3d"));
    c.env("SOURCE_DATE_EPOCH", "1700000000");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path, train: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
  "model": {{
    "input_dims": [32, 32, 16], "patch_size": 4, "embed_dim": 8,
    "stage_dims": [8, 16], "stage_depths": [1, 1], "state_dim": 8,
    "num_classes": 3, "directions": 6, "seed": 0
  }},
  "train": {train}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: u64) -> PathBuf {
    let o = run(&[
        "synth",
        "--count",
        &count.to_string(),
        "--seed",
        "4",
        "--out",
        s(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("manifest.tsv")
}

fn manifest_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let manifest = synth(&a, 10);
    synth(&b, 10);
    let rows = manifest_rows(&manifest);
    assert_eq!(rows.len(), 30);
    for label in ["AD", "MCI", "CN"] {
        assert_eq!(rows.iter().filter(|r| r[1] == label).count(), 10);
    }
    let files: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".nii"))
        .collect();
    assert_eq!(files.len(), 30);
    for f in files {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap());
    }
}

#[test]
fn split_halves_partition() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("data"), 4);
    let out = tmp.path().join("split");
    let o = run(&[
        "split",
        "--manifest",
        s(&manifest),
        "--fraction",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let train = manifest_rows(&out.join("train.tsv"));
    let test = manifest_rows(&out.join("test.tsv"));
    for label in ["AD", "MCI", "CN"] {
        assert_eq!(train.iter().filter(|r| r[1] == label).count(), 2);
        assert_eq!(test.iter().filter(|r| r[1] == label).count(), 2);
    }
    let mut all: Vec<&String> = train.iter().chain(&test).map(|r| &r[0]).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 12);
}

#[test]
fn train_then_eval_on_overfit_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth(&data, 3);
    // eight volumes: 3 AD, 3 MCI, 2 CN
    let text = fs::read_to_string(&manifest).unwrap();
    let subset: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .take(8)
        .collect();
    let sub = data.join("subset.tsv");
    fs::write(&sub, subset.join("\n") + "\n").unwrap();

    let config = tiny_config(tmp.path(), r#"{"epochs": 500, "batch_size": 8}"#);
    let run_dir = tmp.path().join("run");
    let o = run(&[
        "--config",
        s(&config),
        "train",
        "--train",
        s(&sub),
        "--eval",
        s(&sub),
        "--epochs",
        "120",
        "--out",
        s(&run_dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let history = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,eval_loss,eval_accuracy");
    assert_eq!(lines.len(), 121, "flag overrides the config epoch count");

    let ckpt = run_dir.join("model.ckpt");
    let rep1 = tmp.path().join("rep1");
    let rep2 = tmp.path().join("rep2");
    for rep in [&rep1, &rep2] {
        let o = run(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--manifest",
            s(&sub),
            "--dataset",
            "subset",
            "--out",
            s(rep),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let json = fs::read_to_string(rep1.join("report.json")).unwrap();
    assert_eq!(json, fs::read_to_string(rep2.join("report.json")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["accuracy"], 1.0, "{json}");
    assert_eq!(v["timestamp"], 1_700_000_000u64);
    assert_eq!(v["dataset"], "subset");
    let csv = fs::read_to_string(rep1.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn config_file_sets_epochs_and_resume_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("data"), 2);
    let config = tiny_config(tmp.path(), r#"{"epochs": 2, "batch_size": 3}"#);
    let out = tmp.path().join("run");
    let o = run(&[
        "--config",
        s(&config),
        "train",
        "--train",
        s(&manifest),
        "--eval",
        s(&manifest),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(out.join("history.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let more = tmp.path().join("more");
    let o = run(&[
        "train",
        "--train",
        s(&manifest),
        "--eval",
        s(&manifest),
        "--resume",
        s(&out.join("model.ckpt")),
        "--epochs",
        "3",
        "--out",
        s(&more),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let hist = fs::read_to_string(more.join("history.csv")).unwrap();
    let rows: Vec<&str> = hist.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("3,"));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("data"), 2);
    let config = tiny_config(tmp.path(), r#"{"epochs": 3, "batch_size": 2}"#);
    let o = run(&[
        "--config",
        s(&config),
        "train",
        "--train",
        s(&manifest),
        "--eval",
        s(&manifest),
        "--lr",
        "1e300",
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn grad_check_table_and_fault() {
    let o = run(&["grad-check", "--ops-only", "--trials", "1"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for name in [
        "linear",
        "conv3d",
        "selective_scan_parallel",
        "cross_entropy",
    ] {
        let rows = out
            .lines()
            .filter(|l| l.split_whitespace().next() == Some(name))
            .count();
        assert_eq!(rows, 1, "{name}");
    }
    let o = run(&[
        "grad-check",
        "--ops-only",
        "--trials",
        "1",
        "--inject-fault",
        "silu",
    ]);
    assert_eq!(code(&o), 1);
    let row = stdout(&o)
        .lines()
        .find(|l| l.starts_with("silu "))
        .unwrap()
        .to_string();
    assert!(row.ends_with("FAIL"), "{row}");
}

#[test]
fn scan_check_passes() {
    let o = run(&[
        "scan-check",
        "--trials",
        "30",
        "--max-len",
        "300",
        "--seed",
        "2",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("30 trials"));
}

#[test]
fn bench_csv_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "bench",
        "--lengths",
        "32,64,128",
        "--repetitions",
        "5",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(tmp.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mechanism,L,median_seconds");
    assert_eq!(lines.len(), 1 + 3 * 3);
    assert_eq!(stdout(&o).matches("log-log slope").count(), 3);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["scan-check", "--no-such-flag"])), 1);
    assert_eq!(code(&run(&["scan-check", "--precision", "half"])), 1);
    assert_eq!(
        code(&run(&[
            "eval",
            "--checkpoint",
            "/nonexistent/x.ckpt",
            "--manifest",
            "/nonexistent/m.tsv"
        ])),
        2
    );
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"patch_size": 4, "bogus": 1}}"#).unwrap();
    assert_eq!(
        code(&run(&["--config", s(&bad), "scan-check", "--trials", "1"])),
        1
    );
    let manifest = synth(&tmp.path().join("data"), 1);
    assert_eq!(
        code(&run(&[
            "split",
            "--manifest",
            s(&manifest),
            "--fraction",
            "1.5",
            "--out",
            s(tmp.path())
        ])),
        1
    );
}
