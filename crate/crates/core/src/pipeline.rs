//! The commands behind the `viewplan` binary.
//!
//! Every command reads a [`RunConfig`] and writes only below its
//! `output_dir`, in the layout of [`Layout`]. Outputs are pure functions of
//! the config, so repeated runs produce identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::completion::{interp_baseline, mask_rows, uniform_mask};
use crate::config::RunConfig;
use crate::downstream::{joint_finetune, predict, prediction_metrics, predictions_csv, FinetuneRow, Prediction, ViewSource};
use crate::error::{Error, Result};
use crate::eval::{mean_sd, metrics_csv, reconstruct_masked, score_strategy, ImageScores, MetricsRow, IMAGE_PEAK};
use crate::geometry::{build_index_table, classic_fbp, FanBeamGeometry};
use crate::metrics::{binomial, brute_force_best_strategy, nps, psnr, ssim, MAX_SUBSETS};
use crate::phantom::{gen_task, load_dataset, save_dataset, Dataset, DATASET_VERSION};
use crate::plot;
use crate::recon::LearnableFbp;
use crate::rng;
use crate::sampler::{export_strategy as write_strategy, extract_strategy, view_pmf, Strategy};
use crate::trainer::{
    add_task as train_new_task, load_checkpoint, round_robin_train, save_checkpoint, shared_hash, History, TaskBranch,
    TaskData, TrainState, CHECKPOINT_FORMAT,
};

pub const PLOT_WIDTH: u32 = 480;
pub const PLOT_HEIGHT: u32 = 240;

/// Paths below `output_dir`.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn strategies(&self) -> PathBuf {
        self.root.join("strategies")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn dataset(&self, task: &str) -> PathBuf {
        self.datasets().join(format!("{task}.vpds"))
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoints().join("model.vpck")
    }
    pub fn strategy(&self, task: &str) -> PathBuf {
        self.strategies().join(format!("{task}.txt"))
    }
    pub fn task_metrics(&self, task: &str) -> PathBuf {
        self.metrics().join(format!("{task}.csv"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.toml")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.datasets(), self.checkpoints(), self.strategies(), self.metrics(), self.plots()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }
}

fn write(path: &Path, content: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Record one run of `command` in `manifest.toml`, keeping other commands'
/// entries.
pub fn write_manifest(layout: &Layout, command: &str, cfg: &RunConfig, extra_versions: &[(&str, &str)]) -> Result<()> {
    let path = layout.manifest();
    let mut doc: toml::Table = match std::fs::read_to_string(&path) {
        Ok(text) => text.parse().map_err(|e| Error::Config { section: path.display().to_string(), msg: format!("{e}") })?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => toml::Table::new(),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let mut versions = toml::Table::new();
    versions.insert("viewplan_core".into(), env!("CARGO_PKG_VERSION").into());
    versions.insert("dataset_format".into(), i64::from(DATASET_VERSION).into());
    versions.insert("checkpoint_format".into(), (CHECKPOINT_FORMAT as i64).into());
    for (k, v) in extra_versions {
        versions.insert((*k).into(), (*v).into());
    }
    let mut run = toml::Table::new();
    run.insert("config_hash".into(), cfg.hash().into());
    run.insert("seed".into(), (cfg.seed as i64).into());
    run.insert("versions".into(), versions.into());
    let runs = doc.entry("runs").or_insert_with(|| toml::Table::new().into());
    let runs = runs
        .as_table_mut()
        .ok_or_else(|| Error::Config { section: path.display().to_string(), msg: "runs must be a table".into() })?;
    runs.insert(command.into(), run.into());
    write(&path, toml::to_string(&doc).expect("manifest serializes"))
}

/// Generate and save every task's dataset.
pub fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.output_dir);
    layout.create()?;
    let geom = cfg.geometry()?;
    let mut out = Vec::new();
    for id in cfg.tasks.keys() {
        let ds = gen_task(&cfg.task_spec(id)?, &geom)?;
        let path = layout.dataset(id);
        save_dataset(&ds, &path)?;
        out.push(path);
    }
    Ok(out)
}

/// Load the dataset of `task`, generating and saving it first if missing.
fn dataset(cfg: &RunConfig, layout: &Layout, geom: &FanBeamGeometry, task: &str) -> Result<Dataset> {
    let path = layout.dataset(task);
    if path.exists() {
        let ds = load_dataset(&path)?;
        if ds.task_id != task {
            return Err(Error::Invalid(format!("{}: holds task {}, expected {task}", path.display(), ds.task_id)));
        }
        let shape = ds.train.first().map(|s| s.image.shape().to_vec());
        if shape.is_some_and(|s| s != [geom.height, geom.width]) {
            return Err(Error::Invalid(format!("{}: image size differs from [geometry]", path.display())));
        }
        return Ok(ds);
    }
    let ds = gen_task(&cfg.task_spec(task)?, geom)?;
    save_dataset(&ds, &path)?;
    Ok(ds)
}

fn history_csv(rows: &[FinetuneRow]) -> String {
    let mut s = String::from("step,ce,train_acc\n");
    for r in rows {
        writeln!(s, "{},{:.9e},{:.6}", r.step, r.ce, r.train_acc).unwrap();
    }
    s
}

/// Train all tasks jointly, then fine-tune the downstream task if one is
/// configured. Writes the checkpoint and loss histories.
pub fn train(cfg: &RunConfig) -> Result<TrainState> {
    let layout = Layout::new(&cfg.output_dir);
    layout.create()?;
    let geom = cfg.geometry()?;
    let mut data = Vec::new();
    for id in cfg.tasks.keys() {
        data.push(TaskData::from_samples(&dataset(cfg, &layout, &geom, id)?.train, &geom)?);
    }
    let all: Vec<Tensor> = data.iter().flat_map(|d| d.sinos.iter().cloned()).collect();
    let shared = LearnableFbp::init_from_classical(&geom, &all)?;
    let mut branches = Vec::new();
    for id in cfg.tasks.keys() {
        branches.push(TaskBranch::new(id, &shared, &cfg.train_config(id)?)?);
    }
    let mut state = TrainState { shared, branches, step: 0 };
    let tcfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let history = round_robin_train(&mut state, &data, &tcfg)?;
    write(&layout.metrics().join("train_history.csv"), history.to_csv())?;
    if let (Some(d), Some(fc)) = (&cfg.downstream, cfg.finetune_config()) {
        let k = state
            .branches
            .iter()
            .position(|b| b.task_id == d.task)
            .expect("downstream task validated against [tasks]");
        let tau = cfg.train.tau;
        let vs = state.branches[k].vs;
        let mut baseline = state.branches[k].clone();
        let base_rows = joint_finetune(
            &mut baseline,
            &state.shared,
            &data[k],
            &ViewSource::Fixed(uniform_mask(geom.views, vs)),
            vs,
            tau,
            &fc,
        )?;
        let joint_rows = joint_finetune(&mut state.branches[k], &state.shared, &data[k], &ViewSource::Learned, vs, tau, &fc)?;
        state.branches[k].uniform_head = baseline.head;
        write(&layout.metrics().join(format!("{}_finetune_joint.csv", d.task)), history_csv(&joint_rows))?;
        write(&layout.metrics().join(format!("{}_finetune_uniform.csv", d.task)), history_csv(&base_rows))?;
    }
    save_checkpoint(&state, &layout.checkpoint())?;
    Ok(state)
}

use crate::trainer::TrainConfig;

fn load_state(layout: &Layout) -> Result<TrainState> {
    let path = layout.checkpoint();
    if !path.exists() {
        return Err(Error::Invalid(format!("{}: no checkpoint; run train first", path.display())));
    }
    load_checkpoint(&path)
}

/// Test-set scores of classic interpolation and FBP on `mask`.
fn classic_scores(geom: &FanBeamGeometry, data: &TaskData, mask: &[bool]) -> Result<ImageScores> {
    let table = build_index_table(geom);
    let mut scores = ImageScores { psnr: vec![], ssim: vec![] };
    for (y, x) in data.sinos.iter().zip(&data.images) {
        let full = interp_baseline(&mask_rows(y, mask), mask)?;
        let rec = classic_fbp(&full, geom, &table)?;
        scores.psnr.push(psnr(&rec, x, IMAGE_PEAK)?);
        scores.ssim.push(ssim(&rec, x, IMAGE_PEAK)?);
    }
    Ok(scores)
}

fn classification_csv(task: &str, rows: &[(&str, &[Prediction])]) -> Result<String> {
    let mut s = String::from("task_id,method,acc,sens,spec,n_cases\n");
    for (method, preds) in rows {
        let m = prediction_metrics(preds)?;
        let fmt = |v: f64, defined: bool| if defined { format!("{v:.6}") } else { "nan".into() };
        writeln!(
            s,
            "{task},{method},{:.6},{},{},{}",
            m.acc,
            fmt(m.sens, m.sens_defined),
            fmt(m.spec, m.spec_defined),
            preds.len()
        )
        .unwrap();
    }
    Ok(s)
}

/// Score every task in the checkpoint on its test split. Needs only the
/// checkpoint and the datasets.
pub fn eval(cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    let layout = Layout::new(&cfg.output_dir);
    layout.create()?;
    let state = load_state(&layout)?;
    let geom = state.shared.geom.clone();
    let mut all = Vec::new();
    for b in &state.branches {
        let ds = load_dataset(&layout.dataset(&b.task_id))?;
        let test = TaskData::from_samples(&ds.test, &geom)?;
        let strategy = extract_strategy(&b.task_id, &b.importance, b.vs, &geom)?;
        let uni = uniform_mask(geom.views, b.vs);
        let rows = vec![
            MetricsRow {
                task_id: b.task_id.clone(),
                method: "learned".into(),
                scores: score_strategy(&b.completion, &state.shared, &test, &strategy.mask)?,
            },
            MetricsRow {
                task_id: b.task_id.clone(),
                method: "uniform".into(),
                scores: score_strategy(&b.completion, &state.shared, &test, &uni)?,
            },
            MetricsRow { task_id: b.task_id.clone(), method: "classic_uniform".into(), scores: classic_scores(&geom, &test, &uni)? },
        ];
        write(&layout.task_metrics(&b.task_id), metrics_csv(&rows))?;
        let pmf = view_pmf(&b.importance, &geom)?;
        let img = plot::bar_plot(&pmf, &strategy.mask, PLOT_WIDTH, PLOT_HEIGHT)?;
        plot::save_png(&img, &layout.plots().join(format!("{}_pmf.png", b.task_id)))?;
        if let (Some(joint), Some(base)) = (&b.head, &b.uniform_head) {
            let c = joint.slices(geom.height, geom.width);
            let pj = predict(joint, &b.completion, &state.shared, &test, &strategy.mask, c)?;
            let pb = predict(base, &b.completion, &state.shared, &test, &uni, c)?;
            let m = layout.metrics();
            write(&m.join(format!("{}_predictions_joint.csv", b.task_id)), predictions_csv(&pj))?;
            write(&m.join(format!("{}_predictions_uniform.csv", b.task_id)), predictions_csv(&pb))?;
            let csv = classification_csv(&b.task_id, &[("joint", &pj), ("frozen_uniform", &pb)])?;
            write(&m.join(format!("{}_classification.csv", b.task_id)), csv)?;
        }
        all.extend(rows);
    }
    Ok(all)
}

/// Write one strategy file per task in the checkpoint.
pub fn export_strategy(cfg: &RunConfig) -> Result<Vec<Strategy>> {
    let layout = Layout::new(&cfg.output_dir);
    layout.create()?;
    let state = load_state(&layout)?;
    let mut out = Vec::new();
    for b in &state.branches {
        let s = extract_strategy(&b.task_id, &b.importance, b.vs, &state.shared.geom)?;
        write_strategy(&s, &layout.strategy(&b.task_id))?;
        out.push(s);
    }
    Ok(out)
}

/// Summary of one oracle run.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSummary {
    pub task_id: String,
    pub subsets: usize,
    pub uniform_rank: usize,
    /// Present when a checkpoint with this task exists.
    pub learned_rank: Option<usize>,
}

/// Rank every `V_s`-subset of the task's training images by the error of
/// classic interpolation and FBP; place the uniform and learned subsets.
pub fn oracle(cfg: &RunConfig, task: &str) -> Result<OracleSummary> {
    let layout = Layout::new(&cfg.output_dir);
    layout.create()?;
    let geom = cfg.geometry()?;
    let vs = cfg.vs_for(task)?;
    let count = binomial(geom.views as u64, vs as u64);
    if count > MAX_SUBSETS as u64 {
        return Err(Error::Config {
            section: "oracle".into(),
            msg: format!("C({}, {vs}) = {count} subsets exceeds the limit of {MAX_SUBSETS}", geom.views),
        });
    }
    let ds = dataset(cfg, &layout, &geom, task)?;
    let images: Vec<Tensor> = ds.train.iter().map(|s| s.image.clone()).collect();
    let ranking = brute_force_best_strategy(&images, &geom, vs)?;
    let uni: Vec<usize> = (0..geom.views).filter(|&i| uniform_mask(geom.views, vs)[i]).collect();
    let uniform_rank = ranking.rank_of(&uni).expect("uniform subset is enumerated");
    let learned = if layout.checkpoint().exists() {
        let state = load_checkpoint(&layout.checkpoint())?;
        match state.branch(task) {
            Some(b) if b.vs == vs && state.shared.geom == geom => {
                let s = extract_strategy(task, &b.importance, vs, &geom)?;
                Some((ranking.rank_of(&s.indices).expect("learned subset is enumerated"), s.indices))
            }
            _ => None,
        }
    } else {
        None
    };
    let mut csv = String::from("rank,error,views\n");
    for (r, (views, err)) in ranking.entries.iter().enumerate() {
        let v: Vec<String> = views.iter().map(usize::to_string).collect();
        writeln!(csv, "{r},{err:.9e},{}", v.join(" ")).unwrap();
    }
    write(&layout.metrics().join(format!("oracle_{task}.csv")), csv)?;
    let mut summary = String::from("subset,rank,error,views\n");
    let mut line = |name: &str, rank: usize| {
        let (views, err) = &ranking.entries[rank];
        let v: Vec<String> = views.iter().map(usize::to_string).collect();
        writeln!(summary, "{name},{rank},{err:.9e},{}", v.join(" ")).unwrap();
    };
    line("best", 0);
    line("uniform", uniform_rank);
    if let Some((r, _)) = &learned {
        line("learned", *r);
    }
    write(&layout.metrics().join(format!("oracle_{task}_summary.csv")), summary)?;
    Ok(OracleSummary {
        task_id: task.to_string(),
        subsets: ranking.entries.len(),
        uniform_rank,
        learned_rank: learned.map(|l| l.0),
    })
}

/// Noise power spectra of reconstructions from noisy sinograms with the
/// learned and the uniform strategy.
pub fn nps_command(cfg: &RunConfig) -> Result<PathBuf> {
    let layout = Layout::new(&cfg.output_dir);
    layout.create()?;
    let n = cfg
        .nps
        .as_ref()
        .ok_or_else(|| Error::Config { section: "nps".into(), msg: "missing [nps] section".into() })?;
    let state = load_state(&layout)?;
    let b = state
        .branch(&n.task)
        .ok_or_else(|| Error::Config { section: "nps".into(), msg: format!("task {:?} is not in the checkpoint", n.task) })?;
    let geom = state.shared.geom.clone();
    let ds = load_dataset(&layout.dataset(&n.task))?;
    let sample = ds
        .test
        .first()
        .ok_or_else(|| Error::Invalid(format!("task {}: empty test split", n.task)))?;
    let clean = crate::geometry::forward_project(&sample.image, &geom)?;
    let sigma = n.noise_rel * clean.max_abs();
    let learned = extract_strategy(&b.task_id, &b.importance, b.vs, &geom)?.mask;
    let uni = uniform_mask(geom.views, b.vs);
    let mut curves = Vec::new();
    for mask in [&learned, &uni] {
        let reference = reconstruct_masked(&b.completion, &state.shared, &clean, mask)?;
        let mut noise = Vec::with_capacity(n.repeats);
        for r in 0..n.repeats {
            let mut g = rng::stream(cfg.seed, "nps/noise", r as u64);
            let mut noisy = clean.clone();
            for v in noisy.data_mut() {
                let z: f64 = StandardNormal.sample(&mut g);
                *v += sigma * z;
            }
            let mut rec = reconstruct_masked(&b.completion, &state.shared, &noisy, mask)?;
            for (v, r) in rec.data_mut().iter_mut().zip(reference.data()) {
                *v -= r;
            }
            noise.push(rec);
        }
        curves.push(nps(&noise, geom.pixel_size)?);
    }
    let mut csv = String::from("freq,nps_learned,nps_uniform\n");
    for (i, f) in curves[0].freqs.iter().enumerate() {
        writeln!(csv, "{f:.9e},{:.9e},{:.9e}", curves[0].nps1d[i], curves[1].nps1d[i]).unwrap();
    }
    let path = layout.metrics().join(format!("nps_{}.csv", n.task));
    write(&path, csv)?;
    let series: Vec<(Vec<f64>, Vec<f64>)> = curves.iter().map(|c| (c.freqs.clone(), c.nps1d.clone())).collect();
    plot::save_png(&plot::line_plot(&series, PLOT_WIDTH, PLOT_HEIGHT)?, &layout.plots().join(format!("nps_{}.png", n.task)))?;
    Ok(path)
}

/// Train the configured tasks missing from the checkpoint against the
/// frozen shared reconstructor. Returns the ids added.
pub fn add_task(cfg: &RunConfig) -> Result<Vec<String>> {
    let layout = Layout::new(&cfg.output_dir);
    layout.create()?;
    let mut state = load_state(&layout)?;
    let geom = cfg.geometry()?;
    if geom != state.shared.geom {
        return Err(Error::Config { section: "geometry".into(), msg: "differs from the checkpoint geometry".into() });
    }
    let before = shared_hash(&state.shared);
    let new: Vec<String> = cfg.tasks.keys().filter(|id| state.branch(id).is_none()).cloned().collect();
    if new.is_empty() {
        return Err(Error::Config { section: "tasks".into(), msg: "every configured task is already in the checkpoint".into() });
    }
    let mut history = History::default();
    for id in &new {
        let data = TaskData::from_samples(&dataset(cfg, &layout, &geom, id)?.train, &geom)?;
        let tcfg = cfg.train_config(id)?;
        let branch = TaskBranch::new(id, &state.shared, &tcfg)?;
        history.rows.extend(train_new_task(&mut state, branch, &data, &tcfg)?.rows);
    }
    debug_assert_eq!(before, shared_hash(&state.shared));
    write(&layout.metrics().join(format!("add_task_history_{}.csv", new.join("+"))), history.to_csv())?;
    save_checkpoint(&state, &layout.checkpoint())?;
    Ok(new)
}

/// Mean PSNR of a metrics row set, by method.
pub fn mean_psnr(rows: &[MetricsRow], method: &str) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.psnr_mean()).collect();
    mean_sd(&v).0
}
