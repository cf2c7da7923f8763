//! End-to-end runs of the commands on a tiny configuration.

use std::path::Path;

use viewplan::config::{Profile, RunConfig};
use viewplan::pipeline::{self, Layout};
use viewplan::trainer::{load_checkpoint, shared_hash};

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
steps = 12
batch = 2

[downstream]
task = "les"
steps = 4
batch = 4

[nps]
task = "edge"
repeats = 2
"#;

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::with_overlay(Profile::Desk, TINY, "tiny").unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn files_below(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().display().to_string());
            }
        }
    }
    out.sort();
    out
}

fn run_all(cfg: &RunConfig) {
    pipeline::gen_data(cfg).unwrap();
    pipeline::train(cfg).unwrap();
    pipeline::eval(cfg).unwrap();
    pipeline::export_strategy(cfg).unwrap();
    pipeline::oracle(cfg, "edge").unwrap();
    pipeline::nps_command(cfg).unwrap();
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all(&tiny(&a));
    run_all(&tiny(&b));
    let files = files_below(&a);
    assert_eq!(files, files_below(&b));
    for f in &files {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs between runs");
    }
    for expected in ["metrics/edge.csv", "metrics/les_classification.csv", "strategies/edge.txt", "plots/edge_pmf.png"] {
        assert!(files.iter().any(|f| f == expected), "missing {expected}");
    }
}

#[test]
fn outputs_stay_inside_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    run_all(&tiny(&out));
    let top: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top, ["out"]);
    let layout = Layout::new(&out);
    for d in [layout.datasets(), layout.checkpoints(), layout.strategies(), layout.metrics(), layout.plots()] {
        assert!(d.is_dir(), "{}", d.display());
    }
}

#[test]
fn eval_needs_only_checkpoint_and_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    let cfg = tiny(&src);
    pipeline::gen_data(&cfg).unwrap();
    pipeline::train(&cfg).unwrap();
    let want = pipeline::eval(&cfg).unwrap();

    // A fresh directory holding nothing but the checkpoint and datasets, with
    // a config whose training section differs.
    let dst = dir.path().join("dst");
    let (from, to) = (Layout::new(&src), Layout::new(&dst));
    to.create().unwrap();
    std::fs::copy(from.checkpoint(), to.checkpoint()).unwrap();
    for t in ["edge", "les"] {
        std::fs::copy(from.dataset(t), to.dataset(t)).unwrap();
    }
    let mut other = tiny(&dst);
    other.train.steps = 999;
    other.train.lr = 0.5;
    assert_eq!(pipeline::eval(&other).unwrap(), want);
    assert_eq!(read(&from.task_metrics("edge")), read(&to.task_metrics("edge")));
}

#[test]
fn add_task_keeps_shared_weights_and_existing_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = tiny(&out);
    pipeline::gen_data(&cfg).unwrap();
    pipeline::train(&cfg).unwrap();
    pipeline::eval(&cfg).unwrap();
    let layout = Layout::new(&out);
    let before = load_checkpoint(&layout.checkpoint()).unwrap();
    let old_csv = read(&layout.task_metrics("edge"));

    let extra = format!("{TINY}\n[tasks.blob]\nfamily = \"center_blob\"\nn_train = 2\nn_test = 1\n");
    let mut cfg2 = RunConfig::with_overlay(Profile::Desk, &extra, "extra").unwrap();
    cfg2.output_dir = out.clone();
    assert_eq!(pipeline::add_task(&cfg2).unwrap(), ["blob"]);
    let after = load_checkpoint(&layout.checkpoint()).unwrap();
    assert_eq!(shared_hash(&before.shared), shared_hash(&after.shared));
    for b in &before.branches {
        let a = after.branch(&b.task_id).unwrap();
        assert_eq!(a.importance.mu.value, b.importance.mu.value);
        assert_eq!(a.completion.w1.value, b.completion.w1.value);
    }
    pipeline::eval(&cfg2).unwrap();
    assert_eq!(read(&layout.task_metrics("edge")), old_csv);
    assert!(layout.task_metrics("blob").exists());
    assert!(pipeline::add_task(&cfg2).is_err());
}

#[test]
fn errors_name_the_failing_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = tiny(&out);
    let e = pipeline::eval(&cfg).unwrap_err();
    assert!(e.to_string().contains("model.vpck"), "{e}");

    pipeline::gen_data(&cfg).unwrap();
    let path = Layout::new(&out).dataset("edge");
    std::fs::write(&path, b"not a dataset").unwrap();
    let e = pipeline::train(&cfg).unwrap_err();
    assert!(e.to_string().contains("edge.vpds"), "{e}");
    assert!(!e.is_numeric());
}

#[test]
fn manifest_records_each_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("out"));
    let layout = Layout::new(&cfg.output_dir);
    pipeline::gen_data(&cfg).unwrap();
    pipeline::write_manifest(&layout, "gen-data", &cfg, &[]).unwrap();
    pipeline::write_manifest(&layout, "train", &cfg, &[("extra", "1")]).unwrap();
    let doc: toml::Table = std::fs::read_to_string(layout.manifest()).unwrap().parse().unwrap();
    let runs = doc["runs"].as_table().unwrap();
    assert_eq!(runs["gen-data"]["config_hash"].as_str().unwrap(), cfg.hash());
    assert_eq!(runs["train"]["seed"].as_integer().unwrap(), 0);
    assert_eq!(runs["train"]["versions"]["extra"].as_str().unwrap(), "1");
}
