use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn genbp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genbp"))
        .args(args)
        .output()
        .expect("spawn genbp")
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_shipped_transport_config() {
    let out = TempDir::new().unwrap();
    let o = genbp(&[
        "run",
        "--config",
        arg(&shipped("transport-default.json")),
        "--out",
        arg(out.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[1].starts_with("transport,genbp,64,64,0,ok,"), "{}", lines[1]);
    assert!(out.path().join("diagnostics.json").exists());
}

#[test]
fn selftest_passes() {
    let o = genbp(&["selftest"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{table}");
    assert!(!table.contains("FAIL"));
    assert!(table.lines().count() > 4);
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sweep.json");
    fs::write(
        &cfg,
        r#"{
  "base": { "problem": { "kind": "transport", "t": 2 }, "n": 16, "reference": "never" },
  "dims": [64, 256],
  "methods": ["genbp", "gabp"],
  "seeds": [0, 1, 2, 3, 4]
}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = genbp(&["sweep", "--config", arg(&cfg), "--out", arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    assert_eq!(fs::read_dir(out.join("diagnostics")).unwrap().count(), 20);
}

#[test]
fn config_errors_name_the_line() {
    let dir = TempDir::new().unwrap();

    let typo = dir.path().join("typo.json");
    fs::write(&typo, "{\n  \"problem\": { \"kind\": \"sysid-toy\" },\n  \"nn\": 4\n}").unwrap();
    let o = genbp(&["run", "--config", arg(&typo), "--out", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("typo.json:3:"), "{}", stderr(&o));

    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        "{\n  \"problem\": {\n    \"kind\": \"transport\",\n    \"d\": 64,\n    \"downsample\": 3\n  }\n}",
    )
    .unwrap();
    let o = genbp(&["run", "--config", arg(&bad), "--out", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("bad.json:5:") && msg.contains("downsample"), "{msg}");

    let o = genbp(&["run", "--config", arg(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let toy = shipped("sysid-toy.json");
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["run", "--config", arg(&toy), "--out", arg(&out)];
        args.extend_from_slice(extra);
        let o = genbp(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let read = |f: &str| fs::read(out.join(f)).unwrap();
        (read("metrics.csv"), read("diagnostics.json"))
    };
    let a = run("a", &[]);
    assert_eq!(a, run("b", &[]));
    let seeded = run("c", &["--seed", "9"]);
    assert_ne!(a.0, seeded.0);
    assert_eq!(seeded, run("d", &["--seed", "9"]));
}
