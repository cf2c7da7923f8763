//! Exit codes and file layout of the `viewplan` binary.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[geometry]
views = 12
width = 16
height = 16

[tasks.edge]
family = "edge_band"
n_train = 2
n_test = 1

[tasks.les]
family = "center_blob"
n_train = 3
n_test = 2
label_mode = "lesion_binary"

[train]
vs = 4
steps = 8
batch = 2

[downstream]
task = "les"
steps = 3
batch = 4

[nps]
task = "edge"
repeats = 2
"#;

fn viewplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viewplan"))
        .current_dir(dir)
        .env("VIEWPLAN_THREADS", "1")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn every_command_runs_and_writes_the_layout() {
    let dir = setup();
    let base = ["--config", "tiny.toml", "--out", "out"];
    for cmd in ["gen-data", "train", "eval", "export-strategy", "oracle", "nps"] {
        let o = viewplan(dir.path(), &[&base[..], &[cmd]].concat());
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    let out = dir.path().join("out");
    for f in ["datasets/edge.vpds", "checkpoints/model.vpck", "strategies/les.txt", "metrics/edge.csv", "plots/les_pmf.png", "manifest.toml"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.toml")).unwrap();
    for cmd in ["gen-data", "train", "eval", "export-strategy", "oracle", "nps"] {
        assert!(manifest.contains(&format!("[runs.{cmd}]")), "{manifest}");
    }
    let mut top: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    top.sort();
    assert_eq!(top, ["out", "tiny.toml"]);
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = setup();
    for (out, seed) in [("a", "1"), ("b", "2"), ("c", "1")] {
        let o = viewplan(dir.path(), &["--config", "tiny.toml", "--out", out, "--seed", seed, "gen-data"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("datasets/edge.vpds")).unwrap();
    assert_ne!(read("a"), read("b"));
    assert_eq!(read("a"), read("c"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = setup();
    assert_eq!(code(&viewplan(dir.path(), &[])), 1);
    assert_eq!(code(&viewplan(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&viewplan(dir.path(), &["--profile", "huge", "gen-data"])), 1);
    assert_eq!(code(&viewplan(dir.path(), &["--seed", "x", "gen-data"])), 1);
    assert_eq!(code(&viewplan(dir.path(), &["--help"])), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_viewplan"))
        .current_dir(dir.path())
        .env("VIEWPLAN_THREADS", "zero")
        .args(["--config", "tiny.toml", "--out", "out", "gen-data"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("VIEWPLAN_THREADS"));
}

#[test]
fn data_errors_exit_2_and_name_the_culprit() {
    let dir = setup();
    let o = viewplan(dir.path(), &["--config", "missing.toml", "gen-data"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    let o = viewplan(dir.path(), &["--config", "bad.toml", "gen-data"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.toml") && stderr(&o).contains("stepz"), "{}", stderr(&o));

    let o = viewplan(dir.path(), &["--config", "tiny.toml", "--out", "out", "eval"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.vpck"), "{}", stderr(&o));

    assert_eq!(code(&viewplan(dir.path(), &["--config", "tiny.toml", "--out", "out", "gen-data"])), 0);
    std::fs::write(dir.path().join("out/datasets/les.vpds"), b"garbage").unwrap();
    let o = viewplan(dir.path(), &["--config", "tiny.toml", "--out", "out", "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("les.vpds"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let dir = setup();
    let wild = TINY.replace("steps = 8\n", "steps = 8\nlr = 1e300\n");
    std::fs::write(dir.path().join("wild.toml"), wild).unwrap();
    let o = viewplan(dir.path(), &["--config", "wild.toml", "--out", "out", "train"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
