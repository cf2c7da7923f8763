//! Round-robin multi-task training of per-task samplers and completion
//! models around one shared reconstructor.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Parameter, Tape, Tensor, Var};
use crate::completion::CompletionModel;
use crate::container;
use crate::downstream::ClassifierHead;
use crate::error::{Error, Result};
use crate::geometry::{forward_project, FanBeamGeometry};
use crate::phantom::Sample;
use crate::recon::LearnableFbp;
use crate::rng;
use crate::sampler::{draw_gumbels, gumbel_topk_sample, sampled_baseline, soft_rows, ImportanceModel};

/// Step-size multipliers per parameter group, applied on top of `lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrScale {
    pub importance: f64,
    pub completion: f64,
    pub recon: f64,
    pub head: f64,
}

impl Default for LrScale {
    fn default() -> Self {
        LrScale { importance: 1.0, completion: 1.0, recon: 1.0, head: 1.0 }
    }
}

fn default_tau() -> f64 {
    1.0
}
fn default_one() -> f64 {
    1.0
}
fn default_clip() -> f64 {
    10.0
}
fn default_centers() -> usize {
    crate::sampler::DEFAULT_CENTERS
}

/// Default initial component width, in view spacings: narrow enough for the
/// pmf to resolve single views, wide enough to overlap neighbours.
pub const SIGMA_PER_SPACING: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub vs: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "default_one")]
    pub lambda_sino: f64,
    #[serde(default = "default_one")]
    pub lambda_img: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub freeze_shared: bool,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_centers")]
    pub centers: usize,
    /// Initial width of the mixture components in radians; unset means
    /// [`SIGMA_PER_SPACING`] view spacings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_init: Option<f64>,
    #[serde(default)]
    pub lr_scale: LrScale,
}

impl TrainConfig {
    pub fn new(vs: usize, lr: f64, steps: usize, batch: usize, seed: u64) -> Self {
        TrainConfig {
            vs,
            tau: 1.0,
            lr,
            steps,
            batch,
            lambda_sino: 1.0,
            lambda_img: 1.0,
            seed,
            freeze_shared: false,
            clip_norm: 10.0,
            centers: default_centers(),
            sigma_init: None,
            lr_scale: LrScale::default(),
        }
    }

    pub fn sigma_for(&self, views: usize) -> f64 {
        self.sigma_init.unwrap_or(SIGMA_PER_SPACING * std::f64::consts::TAU / views as f64)
    }

    pub fn validate(&self, views: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { section: "train".into(), msg });
        if self.vs < 2 || self.vs >= views {
            return bad(format!("vs must satisfy 2 <= vs < V = {views}, got {}", self.vs));
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive".into());
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return bad("lr and batch must be positive".into());
        }
        if self.lambda_sino < 0.0 || self.lambda_img < 0.0 || self.lambda_sino + self.lambda_img == 0.0 {
            return bad("loss weights must be non-negative and not both zero".into());
        }
        if !(self.clip_norm > 0.0) || self.centers == 0 || self.sigma_init.is_some_and(|s| !(s > 0.0)) {
            return bad("clip_norm, centers and sigma_init must be positive".into());
        }
        Ok(())
    }
}

/// Training images with their full-view sinograms.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub images: Vec<Tensor>,
    pub sinos: Vec<Tensor>,
    pub labels: Vec<Option<u8>>,
    pub case_ids: Vec<u32>,
}

impl TaskData {
    pub fn from_samples(samples: &[Sample], geom: &FanBeamGeometry) -> Result<Self> {
        use rayon::prelude::*;
        let sinos = samples
            .par_iter()
            .map(|s| forward_project(&s.image, geom))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskData {
            images: samples.iter().map(|s| s.image.clone()).collect(),
            sinos,
            labels: samples.iter().map(|s| s.label).collect(),
            case_ids: samples.iter().map(|s| s.case_id).collect(),
        })
    }

    /// Pool several datasets, e.g. to train one strategy for all tasks.
    pub fn concat(parts: &[TaskData]) -> Self {
        let mut out = TaskData { images: vec![], sinos: vec![], labels: vec![], case_ids: vec![] };
        for p in parts {
            out.images.extend(p.images.iter().cloned());
            out.sinos.extend(p.sinos.iter().cloned());
            out.labels.extend(p.labels.iter().copied());
            out.case_ids.extend(p.case_ids.iter().copied());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Index ranges of consecutive samples sharing a case id.
    pub fn case_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.case_ids.len() {
            if i == self.case_ids.len() || self.case_ids[i] != self.case_ids[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TaskBranch {
    pub task_id: String,
    /// Views measured per scan.
    pub vs: usize,
    pub importance: ImportanceModel,
    pub completion: CompletionModel,
    pub head: Option<ClassifierHead>,
    /// Head fine-tuned on the evenly spaced mask with the sampler frozen, the
    /// reference for the jointly tuned `head`.
    pub uniform_head: Option<ClassifierHead>,
}

impl TaskBranch {
    pub fn new(task_id: &str, shared: &LearnableFbp, cfg: &TrainConfig) -> Result<Self> {
        Ok(TaskBranch {
            task_id: task_id.to_string(),
            vs: cfg.vs,
            importance: ImportanceModel::uniform(cfg.centers, cfg.sigma_for(shared.geom.views))?,
            completion: CompletionModel::new(shared.geom.views, cfg.vs, shared.input_scale)?,
            head: None,
            uniform_head: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub sino_mse: f64,
    pub img_mse: f64,
    pub ce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub task_id: String,
    pub losses: StepLosses,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,task_id,sino_mse,img_mse,ce\n");
        for r in &self.rows {
            let ce = r.losses.ce.map(|v| format!("{v:.9e}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{:.9e},{:.9e},{ce}\n",
                r.step, r.task_id, r.losses.sino_mse, r.losses.img_mse
            ));
        }
        s
    }

    pub fn for_task<'a>(&'a self, task_id: &'a str) -> impl Iterator<Item = &'a HistoryRow> + 'a {
        self.rows.iter().filter(move |r| r.task_id == task_id)
    }
}

/// Global-norm clipping followed by plain gradient descent.
pub(crate) fn apply_updates(groups: &mut [(&mut Parameter, f64)], clip: f64) {
    let norm2: f64 = groups.iter().map(|(p, _)| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum();
    let norm = norm2.sqrt();
    let factor = if norm > clip { clip / norm } else { 1.0 };
    for (p, lr) in groups.iter_mut() {
        let step = *lr * factor;
        let Parameter { value, grad, .. } = &mut **p;
        for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
            *v -= step * g;
        }
    }
}

/// Map in-step numeric faults to a divergence at `step`.
pub(crate) fn diverged(step: usize, task_id: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| {
        if e.is_numeric() {
            Error::Diverged { step, task_id: task_id.to_string() }
        } else {
            e
        }
    }
}

/// Indices of the samples used by `task_id` at `step`.
pub fn batch_indices(seed: u64, task_id: &str, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, &format!("{task_id}/batch"), step as u64);
    (0..batch).map(|_| r.gen_range(0..n)).collect()
}

struct BranchVars {
    mu: Var,
    log_sigma: Var,
    w1: Var,
    w2: Var,
    eta: Var,
    epsilon: Var,
}

/// Forward one sample through sample → complete → reconstruct and return
/// `(ŷ, x̂, sino_loss, img_loss)` vars.
fn forward_sample(
    tape: &mut Tape,
    branch: &TaskBranch,
    shared: &LearnableFbp,
    sino: &Tensor,
    image: &Tensor,
    gumbels: &[f64],
    cfg: &TrainConfig,
) -> Result<(BranchVars, Var, Var)> {
    let iv = branch.importance.bind(tape);
    let cv = branch.completion.bind(tape);
    let rv = shared.bind(tape);
    let pmf = branch.importance.view_pmf_var(tape, &iv, &shared.geom)?;
    let draw = gumbel_topk_sample(tape.value(pmf).data(), branch.vs, cfg.tau, gumbels)?;
    let soft = soft_rows(tape, pmf, &draw, cfg.tau)?;
    let base = sampled_baseline(tape, sino, soft, &draw)?;
    let yhat = branch.completion.residual(tape, &cv, base)?;
    let x = shared.reconstruct(tape, &rv, yhat)?;
    let s = shared.input_scale;
    let yn = tape.scale(yhat, s)?;
    let target = tape.constant(sino.scaled(s));
    let sino_loss = tape.mse(yn, target)?;
    let img = tape.constant(image.clone());
    let img_loss = tape.mse(x, img)?;
    let vars = BranchVars { mu: iv.mu, log_sigma: iv.log_sigma, w1: cv.w1, w2: cv.w2, eta: rv.eta, epsilon: rv.epsilon };
    Ok((vars, sino_loss, img_loss))
}

fn accumulate(g: &Gradients, v: &BranchVars, branch: &mut TaskBranch, shared: &mut LearnableFbp, w: f64, with_shared: bool) {
    g.accumulate_into(v.mu, &mut branch.importance.mu, w);
    g.accumulate_into(v.log_sigma, &mut branch.importance.log_sigma, w);
    g.accumulate_into(v.w1, &mut branch.completion.w1, w);
    g.accumulate_into(v.w2, &mut branch.completion.w2, w);
    if with_shared {
        g.accumulate_into(v.eta, &mut shared.eta, w);
        g.accumulate_into(v.epsilon, &mut shared.epsilon, w);
    }
}

/// One gradient step for `branch` (and `shared` unless frozen) on a batch
/// drawn from `data`.
pub fn train_step(
    branch: &mut TaskBranch,
    shared: &mut LearnableFbp,
    data: &TaskData,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLosses> {
    if data.is_empty() {
        return Err(Error::Invalid(format!("task {}: empty dataset", branch.task_id)));
    }
    let tid = branch.task_id.clone();
    let v = shared.geom.views;
    let idx = batch_indices(cfg.seed, &tid, step, data.len(), cfg.batch);
    let gumbels = draw_gumbels(cfg.seed, &format!("{tid}/gumbel"), step as u64, v * cfg.batch);
    for p in branch.importance.params_mut() {
        p.zero_grad();
    }
    for p in branch.completion.params_mut() {
        p.zero_grad();
    }
    for p in shared.params_mut() {
        p.zero_grad();
    }
    let w = 1.0 / cfg.batch as f64;
    let (mut sino_total, mut img_total) = (0.0, 0.0);
    for (b, &i) in idx.iter().enumerate() {
        let mut tape = Tape::new();
        let (vars, sl, il) = forward_sample(
            &mut tape,
            branch,
            shared,
            &data.sinos[i],
            &data.images[i],
            &gumbels[b * v..(b + 1) * v],
            cfg,
        )
        .map_err(diverged(step, &tid))?;
        let a = tape.scale(sl, cfg.lambda_sino)?;
        let c = tape.scale(il, cfg.lambda_img)?;
        let loss = tape.add(a, c).map_err(diverged(step, &tid))?;
        sino_total += tape.value(sl).item();
        img_total += tape.value(il).item();
        let g = tape.backward(loss)?;
        accumulate(&g, &vars, branch, shared, w, !cfg.freeze_shared);
    }
    let losses = StepLosses { sino_mse: sino_total * w, img_mse: img_total * w, ce: None };
    if !losses.sino_mse.is_finite() || !losses.img_mse.is_finite() {
        return Err(Error::Diverged { step, task_id: tid });
    }
    let lr = cfg.lr;
    let s = &cfg.lr_scale;
    let TaskBranch { importance, completion, .. } = branch;
    let [mu, ls] = importance.params_mut();
    let [w1, w2] = completion.params_mut();
    let mut groups: Vec<(&mut Parameter, f64)> = vec![
        (mu, lr * s.importance),
        (ls, lr * s.importance),
        (w1, lr * s.completion),
        (w2, lr * s.completion),
    ];
    if !cfg.freeze_shared {
        let [eta, eps] = shared.params_mut();
        groups.push((eta, lr * s.recon));
        groups.push((eps, lr * s.recon));
    }
    apply_updates(&mut groups, cfg.clip_norm);
    Ok(losses)
}

/// Whole training state: the shared reconstructor, one branch per task and
/// the index of the next step.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub shared: LearnableFbp,
    pub branches: Vec<TaskBranch>,
    pub step: usize,
}

impl TrainState {
    pub fn branch(&self, task_id: &str) -> Option<&TaskBranch> {
        self.branches.iter().find(|b| b.task_id == task_id)
    }
}

fn check_vs(b: &TaskBranch, views: usize) -> Result<()> {
    if b.vs < 2 || b.vs >= views {
        return Err(Error::Config {
            section: format!("tasks.{}", b.task_id),
            msg: format!("vs must satisfy 2 <= vs < V = {views}, got {}", b.vs),
        });
    }
    Ok(())
}

/// Steps `state.step .. cfg.steps`; step `t` trains branch `t mod B`.
pub fn round_robin_train(state: &mut TrainState, data: &[TaskData], cfg: &TrainConfig) -> Result<History> {
    if state.branches.is_empty() {
        return Err(Error::Invalid("round_robin_train needs at least one task".into()));
    }
    if data.len() != state.branches.len() {
        return Err(Error::contract("round_robin_train", "one dataset per branch"));
    }
    cfg.validate(state.shared.geom.views)?;
    let mut ids = BTreeSet::new();
    for b in &state.branches {
        check_vs(b, state.shared.geom.views)?;
        if !ids.insert(b.task_id.as_str()) {
            return Err(Error::Invalid(format!("duplicate task_id {}", b.task_id)));
        }
    }
    let nb = state.branches.len();
    let mut history = History::default();
    while state.step < cfg.steps {
        let t = state.step;
        let k = t % nb;
        let losses = train_step(&mut state.branches[k], &mut state.shared, &data[k], cfg, t)?;
        history.rows.push(HistoryRow { step: t, task_id: state.branches[k].task_id.clone(), losses });
        state.step += 1;
    }
    Ok(history)
}

/// Train a new branch against the frozen shared reconstructor and append it
/// to `state`. Existing branches and shared weights are untouched.
pub fn add_task(state: &mut TrainState, mut branch: TaskBranch, data: &TaskData, cfg: &TrainConfig) -> Result<History> {
    if state.branch(&branch.task_id).is_some() {
        return Err(Error::Invalid(format!("task_id {} already exists in the checkpoint", branch.task_id)));
    }
    let cfg = TrainConfig { freeze_shared: true, ..cfg.clone() };
    cfg.validate(state.shared.geom.views)?;
    check_vs(&branch, state.shared.geom.views)?;
    let mut shared = state.shared.clone();
    let mut history = History::default();
    for t in 0..cfg.steps {
        let losses = train_step(&mut branch, &mut shared, data, &cfg, t)?;
        history.rows.push(HistoryRow { step: t, task_id: branch.task_id.clone(), losses });
    }
    state.branches.push(branch);
    Ok(history)
}

pub const CHECKPOINT_FORMAT: f64 = 1.0;

fn geom_tensor(g: &FanBeamGeometry) -> Tensor {
    Tensor::from_vec(vec![
        g.views as f64,
        g.detectors as f64,
        g.detector_interval,
        g.source_radius,
        g.width as f64,
        g.height as f64,
        g.pixel_size,
    ])
}

pub fn checkpoint_entries(state: &TrainState) -> Vec<(String, Tensor)> {
    let mut e = vec![
        ("meta/format".to_string(), Tensor::scalar(CHECKPOINT_FORMAT)),
        ("meta/step".to_string(), Tensor::scalar(state.step as f64)),
        ("meta/geometry".to_string(), geom_tensor(&state.shared.geom)),
        ("shared/recon/eta".to_string(), state.shared.eta.value.clone()),
        ("shared/recon/epsilon".to_string(), state.shared.epsilon.value.clone()),
        ("shared/recon/input_scale".to_string(), Tensor::scalar(state.shared.input_scale)),
    ];
    for b in &state.branches {
        let p = format!("task/{}", b.task_id);
        e.push((format!("{p}/vs"), Tensor::scalar(b.vs as f64)));
        e.push((format!("{p}/importance/mu"), b.importance.mu.value.clone()));
        e.push((format!("{p}/importance/log_sigma"), b.importance.log_sigma.value.clone()));
        e.push((format!("{p}/completion/w1"), b.completion.w1.value.clone()));
        e.push((format!("{p}/completion/w2"), b.completion.w2.value.clone()));
        e.push((format!("{p}/completion/scale"), Tensor::scalar(b.completion.scale)));
        for (kind, head) in [("head", &b.head), ("uniform_head", &b.uniform_head)] {
            if let Some(h) = head {
                for (name, t) in h.entries() {
                    e.push((format!("{p}/{kind}/{name}"), t));
                }
            }
        }
    }
    e
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    container::encode(&checkpoint_entries(state))
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<TrainState> {
    let entries = container::decode(buf)?;
    let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let need = |name: &str| {
        find(name).ok_or_else(|| {
            let section = name.rsplit_once('/').map_or(name, |(s, _)| s);
            Error::Invalid(format!("checkpoint is missing section {section} (entry {name})"))
        })
    };
    let format = need("meta/format")?.item();
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Invalid(format!("checkpoint format {format}, expected {CHECKPOINT_FORMAT}")));
    }
    let gt = need("meta/geometry")?.data().to_vec();
    if gt.len() != 7 {
        return Err(Error::Invalid("meta/geometry must hold 7 values".into()));
    }
    let geom = FanBeamGeometry {
        views: gt[0] as usize,
        detectors: gt[1] as usize,
        detector_interval: gt[2],
        source_radius: gt[3],
        width: gt[4] as usize,
        height: gt[5] as usize,
        pixel_size: gt[6],
    };
    geom.validate()?;
    let shared = LearnableFbp::from_parts(
        &geom,
        need("shared/recon/eta")?.clone(),
        need("shared/recon/epsilon")?.clone(),
        need("shared/recon/input_scale")?.item(),
    )?;
    let mut ids: Vec<String> = Vec::new();
    for (n, _) in &entries {
        if let Some(rest) = n.strip_prefix("task/") {
            let id = rest.split('/').next().unwrap_or_default().to_string();
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
    }
    let mut branches = Vec::new();
    for id in ids {
        let p = format!("task/{id}");
        let importance = ImportanceModel {
            mu: Parameter::new("mu", need(&format!("{p}/importance/mu"))?.clone()),
            log_sigma: Parameter::new("log_sigma", need(&format!("{p}/importance/log_sigma"))?.clone()),
        };
        let completion = CompletionModel {
            w1: Parameter::new("w1", need(&format!("{p}/completion/w1"))?.clone()),
            w2: Parameter::new("w2", need(&format!("{p}/completion/w2"))?.clone()),
            scale: need(&format!("{p}/completion/scale"))?.item(),
        };
        let read_head = |kind: &str| -> Result<Option<ClassifierHead>> {
            let prefix = format!("{p}/{kind}/");
            let found: Vec<(String, Tensor)> = entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|k| (k.to_string(), t.clone())))
                .collect();
            if found.is_empty() {
                Ok(None)
            } else {
                ClassifierHead::from_entries(&found).map(Some)
            }
        };
        let head = read_head("head")?;
        let uniform_head = read_head("uniform_head")?;
        let vs = need(&format!("{p}/vs"))?.item() as usize;
        if vs < 2 || vs >= geom.views {
            return Err(Error::Invalid(format!("checkpoint section {p}: vs {vs} out of range")));
        }
        branches.push(TaskBranch { task_id: id, vs, importance, completion, head, uniform_head });
    }
    Ok(TrainState { shared, branches, step: need("meta/step")?.item() as usize })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf).map_err(|e| e.in_file(path))
}

/// SHA-256 over the shared reconstructor's tensors, hex encoded.
pub fn shared_hash(shared: &LearnableFbp) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for t in [&shared.eta.value, &shared.epsilon.value] {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(shared.input_scale.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
