//! Run configuration: TOML file, built-in profiles and overlays.
//!
//! A run is described by one [`RunConfig`]. The built-in `desk` and `paper`
//! profiles are complete configs; a user file is merged on top of the
//! selected profile key by key, so it only needs the values it changes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::downstream::FinetuneConfig;
use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::phantom::{Family, LabelMode, TaskSpec};
use crate::rng;
use crate::trainer::{LrScale, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    pub fn toml(self) -> &'static str {
        match self {
            Profile::Desk => DESK_PROFILE,
            Profile::Paper => PAPER_PROFILE,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config { section: "profile".into(), msg: format!("unknown profile {s:?}; use desk or paper") }),
        }
    }
}

/// Desk scale: 64x64 images, 90 views, 12 measured views per scan.
pub const DESK_PROFILE: &str = r#"
seed = 0
output_dir = "viewplan-out"

[geometry]
views = 90
width = 64
height = 64

[tasks.edge]
family = "edge_band"
n_train = 8
n_test = 2
orientation_deg = 0.0

[tasks.blob]
family = "center_blob"
n_train = 8
n_test = 2

[tasks.lobes]
family = "dual_lobe"
n_train = 8
n_test = 2
orientation_deg = 45.0

[tasks.lesion]
family = "center_blob"
n_train = 100
n_test = 100
label_mode = "lesion_binary"
orientation_deg = 30.0

[train]
vs = 12
lr = 0.01
steps = 4000
batch = 4

[train.lr_scale]
importance = 300.0
completion = 100.0
recon = 1.0
head = 1.0

[downstream]
task = "lesion"
c = 4
steps = 300
batch = 8
lr = 0.01
hidden = 16

[downstream.lr_scale]
importance = 30.0
completion = 1.0
recon = 1.0
head = 1.0

[nps]
task = "blob"
noise_rel = 0.01
repeats = 16
"#;

/// Full clinical scale: 512x512 images, 448 views, 30 measured views. Shipped
/// for reference; expect hours per command.
pub const PAPER_PROFILE: &str = r#"
seed = 0
output_dir = "viewplan-out"

[geometry]
views = 448
width = 512
height = 512

[tasks.edge]
family = "edge_band"
n_train = 40
n_test = 10
orientation_deg = 0.0

[tasks.blob]
family = "center_blob"
n_train = 40
n_test = 10

[tasks.lobes]
family = "dual_lobe"
n_train = 40
n_test = 10
orientation_deg = 45.0

[tasks.lesion]
family = "center_blob"
n_train = 200
n_test = 100
label_mode = "lesion_binary"
orientation_deg = 30.0

[train]
vs = 30
lr = 0.01
steps = 20000
batch = 4

[train.lr_scale]
importance = 300.0
completion = 100.0
recon = 1.0
head = 1.0

[downstream]
task = "lesion"
c = 4
steps = 2000
batch = 8
lr = 0.01
hidden = 64

[downstream.lr_scale]
importance = 30.0
completion = 1.0
recon = 1.0
head = 1.0

[nps]
task = "blob"
noise_rel = 0.01
repeats = 32
"#;

fn default_pixel() -> f64 {
    1.0
}

/// Geometry block; unset optional values take the defaults of
/// [`FanBeamGeometry::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_pixel")]
    pub pixel_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectors: Option<usize>,
    /// Radians per detector bin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_interval: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_radius: Option<f64>,
}

impl GeometryConfig {
    pub fn build(&self) -> Result<FanBeamGeometry> {
        if self.width == 0 || self.height == 0 || self.views < 2 {
            return Err(Error::Config { section: "geometry".into(), msg: "views >= 2 and a non-empty image are required".into() });
        }
        let base = FanBeamGeometry::new(self.views, self.width, self.height)?;
        let radius_scale = self.pixel_size / base.pixel_size;
        let detectors = self.detectors.unwrap_or(base.detectors);
        let g = FanBeamGeometry {
            detectors,
            detector_interval: self
                .detector_interval
                .unwrap_or(base.detector_interval * base.detectors as f64 / detectors as f64),
            source_radius: self.source_radius.unwrap_or(base.source_radius * radius_scale),
            pixel_size: self.pixel_size,
            ..base
        };
        g.validate()?;
        Ok(g)
    }
}

fn default_band() -> f64 {
    10.0
}

/// One `[tasks.<id>]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub family: Family,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default)]
    pub label_mode: LabelMode,
    /// Mixed with the run seed to seed this task's phantoms.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub orientation_deg: f64,
    #[serde(default = "default_band")]
    pub band_deg: f64,
    /// Measured views per scan; defaults to `train.vs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vs: Option<usize>,
}

fn default_c() -> usize {
    4
}

/// `[downstream]`: joint fine-tuning of one labeled task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamConfig {
    pub task: String,
    /// Slices fed to the classifier per case.
    #[serde(default = "default_c")]
    pub c: usize,
    pub steps: usize,
    /// Cases per step.
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_scale: LrScale,
    #[serde(default)]
    pub anchor_img: f64,
    pub hidden: usize,
    #[serde(default)]
    pub train_completion: bool,
}

fn default_noise() -> f64 {
    0.01
}
fn default_repeats() -> usize {
    16
}

/// `[nps]`: noise added to the sinogram as a fraction of its peak.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpsConfig {
    pub task: String,
    #[serde(default = "default_noise")]
    pub noise_rel: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub geometry: GeometryConfig,
    pub tasks: BTreeMap<String, TaskEntry>,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream: Option<DownstreamConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nps: Option<NpsConfig>,
}

/// Recursively overlay `top` onto `base`: tables merge, other values replace.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_error(origin: &str, e: impl std::fmt::Display) -> Error {
    Error::Config { section: origin.to_string(), msg: e.to_string().trim_end().to_string() }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| parse_error("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes to TOML")
    }

    pub fn profile(p: Profile) -> Self {
        Self::from_toml(p.toml()).expect("built-in profiles are valid")
    }

    /// `profile` with `overlay` (a TOML document) merged on top. Tables merge
    /// key by key except `[tasks]`, which the overlay replaces whole.
    pub fn with_overlay(p: Profile, overlay: &str, origin: &str) -> Result<Self> {
        let mut base: toml::Value = toml::from_str(p.toml()).expect("built-in profiles parse");
        let top: toml::Value = toml::from_str(overlay).map_err(|e| parse_error(origin, e))?;
        // A task list in the overlay replaces the profile's instead of adding to it.
        if top.get("tasks").is_some() {
            base.as_table_mut().expect("profile is a table").remove("tasks");
        }
        merge(&mut base, top);
        let cfg = RunConfig::deserialize(base).map_err(|e| parse_error(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(p: Profile, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::with_overlay(p, &text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let geom = self.geometry.build()?;
        if self.tasks.is_empty() {
            return Err(Error::Config { section: "tasks".into(), msg: "at least one task is required".into() });
        }
        if self.train.seed != 0 {
            return Err(Error::Config { section: "train".into(), msg: "set the seed at top level, not in [train]".into() });
        }
        self.train.validate(geom.views)?;
        for id in self.tasks.keys() {
            let spec = self.task_spec(id)?;
            spec.validate()?;
            let vs = self.vs_for(id)?;
            if vs < 2 || vs >= geom.views {
                return Err(Error::Config {
                    section: format!("tasks.{id}"),
                    msg: format!("vs must satisfy 2 <= vs < V = {}, got {vs}", geom.views),
                });
            }
        }
        if let Some(d) = &self.downstream {
            self.finetune_config().expect("downstream present").validate()?;
            let entry = self.tasks.get(&d.task).ok_or_else(|| Error::Config {
                section: "downstream".into(),
                msg: format!("task {:?} is not defined under [tasks]", d.task),
            })?;
            if entry.label_mode != LabelMode::LesionBinary {
                return Err(Error::Config { section: "downstream".into(), msg: format!("task {:?} has no labels", d.task) });
            }
            if self.tasks[&d.task].n_train < 2 {
                return Err(Error::Config { section: "downstream".into(), msg: "need at least 2 training cases".into() });
            }
        }
        if let Some(n) = &self.nps {
            if !self.tasks.contains_key(&n.task) {
                return Err(Error::Config { section: "nps".into(), msg: format!("task {:?} is not defined under [tasks]", n.task) });
            }
            if !(n.noise_rel > 0.0) || n.repeats == 0 {
                return Err(Error::Config { section: "nps".into(), msg: "noise_rel and repeats must be positive".into() });
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<FanBeamGeometry> {
        self.geometry.build()
    }

    /// Phantom spec of task `id`; its seed mixes the run seed with the task's.
    pub fn task_spec(&self, id: &str) -> Result<TaskSpec> {
        use rand::RngCore;
        let e = self
            .tasks
            .get(id)
            .ok_or_else(|| Error::Config { section: "tasks".into(), msg: format!("unknown task {id:?}") })?;
        let seed = rng::stream(self.seed, &format!("data/{id}"), e.seed).next_u64();
        Ok(TaskSpec {
            task_id: id.to_string(),
            family: e.family,
            n_train: e.n_train,
            n_test: e.n_test,
            label_mode: e.label_mode,
            seed,
            orientation_deg: e.orientation_deg,
            band_deg: e.band_deg,
        })
    }

    pub fn vs_for(&self, id: &str) -> Result<usize> {
        let e = self
            .tasks
            .get(id)
            .ok_or_else(|| Error::Config { section: "tasks".into(), msg: format!("unknown task {id:?}") })?;
        Ok(e.vs.unwrap_or(self.train.vs))
    }

    /// Training settings for task `id` with the run seed applied.
    pub fn train_config(&self, id: &str) -> Result<TrainConfig> {
        Ok(TrainConfig { vs: self.vs_for(id)?, seed: self.seed, ..self.train.clone() })
    }

    pub fn finetune_config(&self) -> Option<FinetuneConfig> {
        self.downstream.as_ref().map(|d| FinetuneConfig {
            c: d.c,
            steps: d.steps,
            batch: d.batch,
            lr: d.lr,
            lr_scale: d.lr_scale.clone(),
            anchor_img: d.anchor_img,
            hidden: d.hidden,
            train_completion: d.train_completion,
            seed: self.seed,
        })
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_parse_and_validate() {
        let d = RunConfig::profile(Profile::Desk);
        assert_eq!(d.geometry.views, 90);
        assert_eq!((d.geometry.width, d.geometry.height), (64, 64));
        assert_eq!(d.train.vs, 12);
        let p = RunConfig::profile(Profile::Paper);
        assert_eq!(p.geometry.views, 448);
        assert_eq!(p.geometry.width, 512);
    }

    #[test]
    fn serialization_round_trips() {
        let d = RunConfig::profile(Profile::Desk);
        let again = RunConfig::from_toml(&d.to_toml()).unwrap();
        assert_eq!(again, d);
        assert_eq!(again.to_toml(), d.to_toml());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::with_overlay(Profile::Desk, "[train]\nlearning_rate = 1.0\n", "user.toml").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::with_overlay(Profile::Desk, "colour = 3\n", "user.toml").is_err());
    }

    #[test]
    fn overlay_changes_only_named_keys() {
        let c = RunConfig::with_overlay(Profile::Desk, "seed = 5\n[train]\nsteps = 10\n", "u").unwrap();
        let d = RunConfig::profile(Profile::Desk);
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.lr, d.train.lr);
        assert_eq!(c.tasks, d.tasks);
    }

    #[test]
    fn overlay_tasks_replace_profile_tasks() {
        let only = "[tasks.only]\nfamily = \"edge_band\"\nn_train = 2\nn_test = 1\n[nps]\ntask = \"only\"\n";
        let e = RunConfig::with_overlay(Profile::Desk, only, "u").unwrap_err();
        assert!(e.to_string().contains("[downstream]"), "{e}");
        let les = "[tasks.les]\nfamily = \"center_blob\"\nn_train = 2\nn_test = 1\nlabel_mode = \"lesion_binary\"\n";
        let c = RunConfig::with_overlay(Profile::Desk, &format!("{only}{les}[downstream]\ntask = \"les\"\n"), "u").unwrap();
        assert_eq!(c.tasks.keys().collect::<Vec<_>>(), ["les", "only"]);
    }

    #[test]
    fn task_seeds_depend_on_run_seed_and_id() {
        let a = RunConfig::profile(Profile::Desk);
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.task_spec("edge").unwrap().seed, b.task_spec("edge").unwrap().seed);
        assert_ne!(a.task_spec("edge").unwrap().seed, a.task_spec("blob").unwrap().seed);
        assert_eq!(a.task_spec("edge").unwrap(), a.clone().task_spec("edge").unwrap());
    }

    #[test]
    fn bad_references_name_their_section() {
        let e = RunConfig::with_overlay(Profile::Desk, "[downstream]\ntask = \"nope\"\n", "u").unwrap_err();
        assert!(e.to_string().contains("[downstream]"), "{e}");
        let edge = "[tasks.edge]\nfamily = \"edge_band\"\nn_train = 2\nn_test = 1\nvs = 90\n";
        let e = RunConfig::with_overlay(Profile::Desk, edge, "u").unwrap_err();
        assert!(e.to_string().contains("tasks.edge"), "{e}");
        let e = RunConfig::with_overlay(Profile::Desk, "[geometry]\nviews = 1\n", "u").unwrap_err();
        assert!(e.to_string().contains("geometry"), "{e}");
    }

    #[test]
    fn geometry_overrides_apply() {
        let c = RunConfig::with_overlay(Profile::Desk, "[geometry]\ndetectors = 120\nsource_radius = 300.0\n", "u").unwrap();
        let g = c.geometry().unwrap();
        assert_eq!(g.detectors, 120);
        assert_eq!(g.source_radius, 300.0);
        let d = RunConfig::profile(Profile::Desk).geometry().unwrap();
        assert!((g.detector_interval * 120.0 - d.detector_interval * d.detectors as f64).abs() < 1e-12);
    }
}
