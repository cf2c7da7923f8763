//! Case-level classification from grouped slices and joint fine-tuning of
//! the sampler against the frozen reconstructor.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::completion::{interp_baseline, mask_rows, CompletionModel};
use crate::error::{Error, Result};
use crate::metrics::{cls_metrics, ClsMetrics};
use crate::recon::LearnableFbp;
use crate::rng;
use crate::sampler::{draw_gumbels, extract_strategy, gumbel_topk_sample, sampled_baseline, soft_rows};
use crate::trainer::{apply_updates, diverged, LrScale, TaskBranch, TaskData};

pub const POOL_BLOCK: usize = 8;
pub const CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SliceGrouping {
    pub c: usize,
    pub groups: Vec<Range<usize>>,
}

impl SliceGrouping {
    /// `c` contiguous groups over `n` slices; earlier groups take the extra
    /// slice when `n` is not divisible by `c`.
    pub fn new(n: usize, c: usize) -> Result<Self> {
        if c == 0 || c > n {
            return Err(Error::contract("select_slices", format!("c = {c} with {n} slices")));
        }
        let (base, extra) = (n / c, n % c);
        let mut groups = Vec::with_capacity(c);
        let mut start = 0;
        for g in 0..c {
            let len = base + usize::from(g < extra);
            groups.push(start..start + len);
            start += len;
        }
        Ok(SliceGrouping { c, groups })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceMode {
    Train,
    Test,
}

/// One slice per group: uniformly random in training, the middle slice
/// (`start + len/2`) in testing.
pub fn select_slices(n: usize, c: usize, mode: SliceMode, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let g = SliceGrouping::new(n, c)?;
    Ok(g.groups
        .into_iter()
        .map(|r| match mode {
            SliceMode::Train => rng.gen_range(r),
            SliceMode::Test => r.start + r.len() / 2,
        })
        .collect())
}

/// Mean-pool each slice over 8x8 blocks, flatten, then two linear maps with
/// relu between.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    /// Frozen per-feature standardization `(f - shift) * gain`, `[F, 1]`.
    pub shift: Tensor,
    pub gain: Tensor,
}

pub struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl ClassifierHead {
    pub fn new(c: usize, height: usize, width: usize, hidden: usize, seed: u64) -> Result<Self> {
        if height % POOL_BLOCK != 0 || width % POOL_BLOCK != 0 {
            return Err(Error::contract("classifier", format!("{height}x{width} not divisible by {POOL_BLOCK}")));
        }
        let f = c * (height / POOL_BLOCK) * (width / POOL_BLOCK);
        let mut r = rng::stream(seed, "head", 0);
        let mut init = |rows: usize, cols: usize| {
            let a = 1.0 / (cols as f64).sqrt();
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-a..a)).collect()).unwrap()
        };
        Ok(ClassifierHead {
            w1: Parameter::new("w1", init(hidden, f)),
            b1: Parameter::new("b1", Tensor::zeros(&[hidden, 1])),
            w2: Parameter::new("w2", init(CLASSES, hidden)),
            b2: Parameter::new("b2", Tensor::zeros(&[CLASSES, 1])),
            shift: Tensor::zeros(&[f, 1]),
            gain: Tensor::full(&[f, 1], 1.0),
        })
    }

    pub fn inputs(&self) -> usize {
        self.w1.value.shape()[1]
    }

    /// Number of slices the head reads for images of `height x width`.
    pub fn slices(&self, height: usize, width: usize) -> usize {
        self.inputs() / ((height / POOL_BLOCK) * (width / POOL_BLOCK)).max(1)
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            w1: tape.param(&self.w1),
            b1: tape.param(&self.b1),
            w2: tape.param(&self.w2),
            b2: tape.param(&self.b2),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        let mut e: Vec<(String, Tensor)> = [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        e.push(("shift".into(), self.shift.clone()));
        e.push(("gain".into(), self.gain.clone()));
        e
    }

    /// Set the standardization from pooled feature vectors (one per case, as
    /// returned by [`ClassifierHead::features`]). Features whose spread is
    /// below a hundredth of the typical spread are scaled as if at that floor.
    pub fn fit_normalization(&mut self, features: &[Tensor]) -> Result<()> {
        let f = self.inputs();
        if features.is_empty() || features.iter().any(|t| t.len() != f) {
            return Err(Error::contract("fit_normalization", format!("need feature vectors of length {f}")));
        }
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..f).map(|j| features.iter().map(|t| t.data()[j]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..f)
            .map(|j| (features.iter().map(|t| (t.data()[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        let floor = (sd.iter().sum::<f64>() / f as f64 * 0.01).max(f64::MIN_POSITIVE);
        self.shift = Tensor::matrix(f, 1, mean)?;
        self.gain = Tensor::matrix(f, 1, sd.iter().map(|s| 1.0 / s.max(floor)).collect())?;
        Ok(())
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |n: &str| {
            entries
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| Parameter::new(n, t.clone()))
                .ok_or_else(|| Error::Invalid(format!("classifier head is missing {n}")))
        };
        let (w1, b1, w2, b2) = (get("w1")?, get("b1")?, get("w2")?, get("b2")?);
        let f = w1.value.shape().get(1).copied().unwrap_or(0);
        let shift = get("shift")?.value;
        let gain = get("gain")?.value;
        if shift.shape() != [f, 1] || gain.shape() != [f, 1] {
            return Err(Error::Invalid(format!("classifier head normalization must be [{f}, 1]")));
        }
        Ok(ClassifierHead { w1, b1, w2, b2, shift, gain })
    }

    /// Pooled, flattened `[F, 1]` features of `c` slices, each `[H, W]`,
    /// before standardization.
    pub fn features(&self, tape: &mut Tape, slices: &[Var]) -> Result<Var> {
        let first = *slices.first().ok_or_else(|| Error::contract("classify", "no slices"))?;
        let shape = tape.shape(first).to_vec();
        let [h, w] = shape[..] else {
            return Err(Error::contract("classify", "slices must be rank 2"));
        };
        let mut stacked = Vec::with_capacity(slices.len());
        for &s in slices {
            if tape.shape(s) != [h, w] {
                return Err(Error::contract("classify", "slice shapes differ"));
            }
            stacked.push(tape.reshape(s, &[1, h, w])?);
        }
        let x = tape.concat(&stacked)?;
        let pooled = tape.mean_pool(x, POOL_BLOCK)?;
        let n = tape.value(pooled).len();
        if n != self.inputs() {
            return Err(Error::contract("classify", format!("{n} pooled features, head expects {}", self.inputs())));
        }
        tape.reshape(pooled, &[n, 1])
    }

    /// `[1, 2]` logits for `c` slices, each `[H, W]`.
    pub fn classify(&self, tape: &mut Tape, vars: &HeadVars, slices: &[Var]) -> Result<Var> {
        let f = self.features(tape, slices)?;
        let shift = tape.constant(self.shift.clone());
        let gain = tape.constant(self.gain.clone());
        let f = tape.sub(f, shift)?;
        let f = tape.mul(f, gain)?;
        let z = tape.matmul(vars.w1, f)?;
        let z = tape.add(z, vars.b1)?;
        let z = tape.relu(z)?;
        let o = tape.matmul(vars.w2, z)?;
        let o = tape.add(o, vars.b2)?;
        tape.reshape(o, &[1, CLASSES])
    }
}

/// How the views are chosen during fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub enum ViewSource {
    /// Gumbel draws from the branch's importance model, trained jointly.
    Learned,
    /// A fixed mask; the importance model is left untouched.
    Fixed(Vec<bool>),
}

fn default_c() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_c")]
    pub c: usize,
    pub steps: usize,
    /// Cases per step.
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_scale: LrScale,
    /// Weight of an optional image-MSE anchor on the reconstructed slices.
    #[serde(default)]
    pub anchor_img: f64,
    pub hidden: usize,
    #[serde(default)]
    pub train_completion: bool,
    #[serde(default)]
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config { section: "downstream".into(), msg: msg.into() });
        if self.c == 0 || self.batch == 0 || self.hidden == 0 {
            return bad("c, batch and hidden must be positive");
        }
        if !(self.lr > 0.0) || self.anchor_img < 0.0 {
            return bad("lr must be positive and anchor_img non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRow {
    pub step: usize,
    pub ce: f64,
    pub train_acc: f64,
}

fn case_label(data: &TaskData, r: &Range<usize>) -> Result<u8> {
    data.labels[r.start].ok_or_else(|| Error::Invalid("downstream training needs labeled samples".into()))
}

/// Fine-tune the head (always), the importance model (with
/// [`ViewSource::Learned`]) and optionally the completion model, with the
/// shared reconstructor frozen. `vs` views per scan, temperature `tau`.
#[allow(clippy::too_many_arguments)]
pub fn joint_finetune(
    branch: &mut TaskBranch,
    shared: &LearnableFbp,
    data: &TaskData,
    views: &ViewSource,
    vs: usize,
    tau: f64,
    cfg: &FinetuneConfig,
) -> Result<Vec<FinetuneRow>> {
    cfg.validate()?;
    let geom = &shared.geom;
    let cases = data.case_ranges();
    if cases.is_empty() {
        return Err(Error::Invalid("downstream training needs at least one case".into()));
    }
    for r in &cases {
        case_label(data, r)?;
    }
    if branch.head.is_none() {
        let mut head = ClassifierHead::new(cfg.c, geom.height, geom.width, cfg.hidden, cfg.seed)?;
        let mask = match views {
            ViewSource::Fixed(mask) => mask.clone(),
            ViewSource::Learned => extract_strategy(&branch.task_id, &branch.importance, vs, geom)?.mask,
        };
        let feats = case_features(&head, &branch.completion, shared, data, &mask, cfg.c)?;
        head.fit_normalization(&feats)?;
        branch.head = Some(head);
    }
    let tid = branch.task_id.clone();
    let learn_views = matches!(views, ViewSource::Learned);
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, &format!("{tid}/finetune"), step as u64);
        let picks: Vec<usize> = (0..cfg.batch).map(|_| r.gen_range(0..cases.len())).collect();
        let head = branch.head.as_mut().unwrap();
        for p in head.params_mut() {
            p.zero_grad();
        }
        for p in branch.importance.params_mut() {
            p.zero_grad();
        }
        for p in branch.completion.params_mut() {
            p.zero_grad();
        }
        let (mut ce_total, mut correct) = (0.0, 0usize);
        let w = 1.0 / cfg.batch as f64;
        for (b, &ci) in picks.iter().enumerate() {
            let range = &cases[ci];
            let label = case_label(data, range)?;
            let chosen = select_slices(range.len(), cfg.c, SliceMode::Train, &mut r)?;
            let mut tape = Tape::new();
            let head = branch.head.as_ref().unwrap();
            let hv = head.bind(&mut tape);
            let iv = branch.importance.bind(&mut tape);
            let cv = branch.completion.bind(&mut tape);
            let rv = shared.bind(&mut tape);
            // One acquisition protocol per case.
            let (soft, draw) = match views {
                ViewSource::Learned => {
                    let pmf = branch.importance.view_pmf_var(&mut tape, &iv, geom)?;
                    let g = draw_gumbels(cfg.seed, &format!("{tid}/finetune-gumbel"), (step * cfg.batch + b) as u64, geom.views);
                    let draw = gumbel_topk_sample(tape.value(pmf).data(), vs, tau, &g)?;
                    (Some(soft_rows(&mut tape, pmf, &draw, tau)?), Some(draw))
                }
                ViewSource::Fixed(_) => (None, None),
            };
            let mut slices = Vec::with_capacity(cfg.c);
            let mut anchor = Vec::new();
            for &s in &chosen {
                let k = range.start + s;
                let base = match (views, soft, &draw) {
                    (ViewSource::Fixed(mask), _, _) => {
                        let grid = mask_rows(&data.sinos[k], mask);
                        tape.constant(interp_baseline(&grid, mask)?)
                    }
                    (_, Some(soft), Some(draw)) => sampled_baseline(&mut tape, &data.sinos[k], soft, draw)?,
                    _ => unreachable!(),
                };
                let yhat = branch.completion.residual(&mut tape, &cv, base)?;
                let x = shared.reconstruct(&mut tape, &rv, yhat)?;
                if cfg.anchor_img > 0.0 {
                    let t = tape.constant(data.images[k].clone());
                    anchor.push(tape.mse(x, t)?);
                }
                slices.push(x);
            }
            let logits = head.classify(&mut tape, &hv, &slices).map_err(diverged(step, &tid))?;
            let lv = tape.value(logits).data();
            correct += usize::from((lv[1] > lv[0]) == (label == 1));
            let mut loss = tape.cross_entropy(logits, &[label as usize]).map_err(diverged(step, &tid))?;
            ce_total += tape.value(loss).item();
            for a in anchor {
                let a = tape.scale(a, cfg.anchor_img / cfg.c as f64)?;
                loss = tape.add(loss, a)?;
            }
            let g = tape.backward(loss)?;
            let head = branch.head.as_mut().unwrap();
            g.accumulate_into(hv.w1, &mut head.w1, w);
            g.accumulate_into(hv.b1, &mut head.b1, w);
            g.accumulate_into(hv.w2, &mut head.w2, w);
            g.accumulate_into(hv.b2, &mut head.b2, w);
            if learn_views {
                g.accumulate_into(iv.mu, &mut branch.importance.mu, w);
                g.accumulate_into(iv.log_sigma, &mut branch.importance.log_sigma, w);
            }
            if cfg.train_completion {
                g.accumulate_into(cv.w1, &mut branch.completion.w1, w);
                g.accumulate_into(cv.w2, &mut branch.completion.w2, w);
            }
            let _ = rv;
        }
        let ce = ce_total * w;
        if !ce.is_finite() {
            return Err(Error::Diverged { step, task_id: tid });
        }
        let s = &cfg.lr_scale;
        let TaskBranch { importance, completion, head, .. } = &mut *branch;
        let mut groups: Vec<(&mut Parameter, f64)> = Vec::new();
        for p in head.as_mut().unwrap().params_mut() {
            groups.push((p, cfg.lr * s.head));
        }
        if learn_views {
            for p in importance.params_mut() {
                groups.push((p, cfg.lr * s.importance));
            }
        }
        if cfg.train_completion {
            for p in completion.params_mut() {
                groups.push((p, cfg.lr * s.completion));
            }
        }
        apply_updates(&mut groups, 10.0);
        rows.push(FinetuneRow { step, ce, train_acc: correct as f64 / cfg.batch as f64 });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub case_id: u32,
    pub label: Option<u8>,
    pub logits: [f64; 2],
    pub pred: u8,
}

/// Reconstructions of the test-mode slices of one case, views from `mask`.
fn case_slices(
    tape: &mut Tape,
    completion: &CompletionModel,
    shared: &LearnableFbp,
    data: &TaskData,
    range: &Range<usize>,
    mask: &[bool],
    c: usize,
) -> Result<Vec<Var>> {
    let mut unused = rng::stream(0, "unused", 0);
    let chosen = select_slices(range.len(), c, SliceMode::Test, &mut unused)?;
    let mut slices = Vec::with_capacity(c);
    for &s in &chosen {
        let k = range.start + s;
        let grid = mask_rows(&data.sinos[k], mask);
        let full = completion.complete(&grid, mask)?;
        slices.push(tape.constant(shared.reconstruct_value(&full)?));
    }
    Ok(slices)
}

/// Unstandardized pooled features of every case, views from `mask`.
fn case_features(
    head: &ClassifierHead,
    completion: &CompletionModel,
    shared: &LearnableFbp,
    data: &TaskData,
    mask: &[bool],
    c: usize,
) -> Result<Vec<Tensor>> {
    data.case_ranges()
        .iter()
        .map(|range| {
            let mut tape = Tape::new();
            let slices = case_slices(&mut tape, completion, shared, data, range, mask, c)?;
            let f = head.features(&mut tape, &slices)?;
            Ok(tape.value(f).clone())
        })
        .collect()
}

/// Deterministic case-level predictions: middle slice of each group, views
/// from `mask`.
pub fn predict(
    head: &ClassifierHead,
    completion: &CompletionModel,
    shared: &LearnableFbp,
    data: &TaskData,
    mask: &[bool],
    c: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for range in data.case_ranges() {
        let mut tape = Tape::new();
        let hv = head.bind(&mut tape);
        let slices = case_slices(&mut tape, completion, shared, data, &range, mask, c)?;
        let logits = head.classify(&mut tape, &hv, &slices)?;
        let l = tape.value(logits).data();
        out.push(Prediction {
            case_id: data.case_ids[range.start],
            label: data.labels[range.start],
            logits: [l[0], l[1]],
            pred: u8::from(l[1] > l[0]),
        });
    }
    Ok(out)
}

pub fn predictions_csv(preds: &[Prediction]) -> String {
    let mut s = String::from("case_id,label,logit_0,logit_1,pred\n");
    for p in preds {
        let label = p.label.map(|l| l.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{label},{:.9e},{:.9e},{}\n", p.case_id, p.logits[0], p.logits[1], p.pred));
    }
    s
}

pub fn prediction_metrics(preds: &[Prediction]) -> Result<ClsMetrics> {
    let labels: Vec<u8> = preds
        .iter()
        .map(|p| p.label.ok_or_else(|| Error::Invalid("predictions without labels".into())))
        .collect::<Result<_>>()?;
    let p: Vec<u8> = preds.iter().map(|p| p.pred).collect();
    cls_metrics(&p, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_mode_middle_slices() {
        let mut r = rng::stream(0, "s", 0);
        assert_eq!(select_slices(8, 4, SliceMode::Test, &mut r).unwrap(), vec![1, 3, 5, 7]);
        assert_eq!(select_slices(8, 8, SliceMode::Test, &mut r).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(select_slices(8, 8, SliceMode::Train, &mut r).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(select_slices(3, 4, SliceMode::Test, &mut r).is_err());
    }

    #[test]
    fn train_mode_stays_in_group() {
        let mut r = rng::stream(1, "s", 0);
        for _ in 0..10_000 {
            let s = select_slices(8, 4, SliceMode::Train, &mut r).unwrap();
            for (g, &i) in s.iter().enumerate() {
                assert!((2 * g..2 * g + 2).contains(&i));
            }
        }
    }

    #[test]
    fn groups_partition_uneven() {
        let g = SliceGrouping::new(7, 3).unwrap();
        assert_eq!(g.groups, vec![0..3, 3..5, 5..7]);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut h = ClassifierHead::new(2, 16, 16, 3, 0).unwrap();
        for p in h.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut tape = Tape::new();
        let hv = h.bind(&mut tape);
        let a = tape.constant(Tensor::full(&[16, 16], 0.7));
        let b = tape.constant(Tensor::full(&[16, 16], -0.2));
        let l = h.classify(&mut tape, &hv, &[a, b]).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0, 0.0]);
    }
}
