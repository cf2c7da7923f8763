//! Synthetic phantom families and dataset files.
//!
//! Each family concentrates its structure differently in angle: `edge_band`
//! draws long bars inside an orientation band, `center_blob` concentric
//! discs, `dual_lobe` a pair of off-center ellipses. Samples are grouped into
//! cases of [`SLICES_PER_CASE`] consecutive slices whose parameters drift
//! smoothly, a toy stand-in for a scanned volume.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::container::{self, Reader};
use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::rng;

pub const SLICES_PER_CASE: usize = 8;
pub const DATASET_MAGIC: &[u8; 4] = b"VPDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    EdgeBand,
    CenterBlob,
    DualLobe,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    None,
    LesionBinary,
}

fn default_band() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub family: Family,
    /// Number of training cases; each case holds [`SLICES_PER_CASE`] slices.
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default)]
    pub label_mode: LabelMode,
    pub seed: u64,
    /// Structure orientation in degrees: bar direction for `edge_band`, lobe
    /// axis for `dual_lobe`; ignored by `center_blob`.
    #[serde(default)]
    pub orientation_deg: f64,
    /// Half-width in degrees of the orientation band.
    #[serde(default = "default_band")]
    pub band_deg: f64,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, family: Family, n_train: usize, n_test: usize, seed: u64) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            family,
            n_train,
            n_test,
            label_mode: LabelMode::None,
            seed,
            orientation_deg: 0.0,
            band_deg: default_band(),
        }
    }

    pub fn with_orientation(mut self, deg: f64) -> Self {
        self.orientation_deg = deg;
        self
    }

    pub fn with_labels(mut self, mode: LabelMode) -> Self {
        self.label_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let section = format!("tasks.{}", self.task_id);
        let bad = |msg: &str| Err(Error::Config { section: section.clone(), msg: msg.into() });
        if self.task_id.is_empty() || self.task_id.contains(['/', ' ', '\n']) {
            return bad("task_id must be non-empty without '/' or whitespace");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive");
        }
        if !(0.0..=90.0).contains(&self.band_deg) {
            return bad("band_deg must lie in [0, 90]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: Option<u8>,
    pub case_id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task_id: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Slices of each case, in slice order.
    pub fn cases(samples: &[Sample]) -> Vec<&[Sample]> {
        samples.chunk_by(|a, b| a.case_id == b.case_id).collect()
    }
}

/// Smooth step from 0 to 1 across `d = 0` over about one pixel.
fn soft(d: f64, edge: f64) -> f64 {
    0.5 * (1.0 + (d / edge).tanh())
}

/// Circular taper that fades content to zero near the image border.
fn taper(r: f64) -> f64 {
    if r <= 0.75 {
        1.0
    } else if r >= 0.95 {
        0.0
    } else {
        0.5 * (1.0 + (PI * (r - 0.75) / 0.2).cos())
    }
}

/// Bars run along their axis from `BAR_START` to `BAR_STOP` (normalized
/// units), so they sit on one side of the isocenter and the tangential view
/// with the source on that side samples them more finely than its conjugate.
const BAR_START: f64 = 0.15;
const BAR_STOP: f64 = 1.2;
const BAR_END_SOFTNESS: f64 = 0.12;

struct Bar {
    offset: f64,
    half_width: f64,
    amp: f64,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    amp: f64,
}

impl Ellipse {
    /// Signed distance proxy, positive inside, in normalized units.
    fn inside(&self, x: f64, y: f64, edge: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
        let rho = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        soft((1.0 - rho) * self.a.min(self.b), edge)
    }
}

/// Parameters of one case; slice `s` is rendered with `phase(s)` drift.
enum CaseParams {
    Bars { psi: f64, drift: f64, bars: Vec<Bar> },
    Blob { cx: f64, cy: f64, radii: Vec<(f64, f64)>, drift: f64 },
    Lobes { alpha: f64, dist: f64, a: f64, b: f64, amps: (f64, f64), drift: f64 },
}

/// Lesion centre distance from the isocenter and its jitter (normalized
/// units), and the angular jitter of its position.
const LESION_RADIUS: f64 = 0.5;
const LESION_RADIUS_JITTER: f64 = 0.05;
const LESION_ANGLE_JITTER: f64 = 0.17;

struct Lesion {
    ellipse: Ellipse,
}

fn draw_case(spec: &TaskSpec, r: &mut impl Rng) -> CaseParams {
    let psi0 = spec.orientation_deg.to_radians();
    let band = spec.band_deg.to_radians();
    match spec.family {
        Family::EdgeBand => {
            let n = r.gen_range(2..=4);
            let bars = (0..n)
                .map(|_| Bar {
                    offset: r.gen_range(-0.55..0.55),
                    half_width: r.gen_range(0.04..0.10),
                    amp: r.gen_range(0.5..1.0),
                })
                .collect();
            CaseParams::Bars {
                psi: psi0 + r.gen_range(-0.5..0.5) * band,
                drift: r.gen_range(-1.0..1.0),
                bars,
            }
        }
        Family::CenterBlob => {
            let outer = r.gen_range(0.45..0.65);
            let mid = outer * r.gen_range(0.45..0.7);
            let inner = mid * r.gen_range(0.3..0.6);
            CaseParams::Blob {
                cx: r.gen_range(-0.04..0.04),
                cy: r.gen_range(-0.04..0.04),
                radii: vec![
                    (outer, r.gen_range(0.3..0.5)),
                    (mid, r.gen_range(0.2..0.3)),
                    (inner, r.gen_range(0.2..0.3)),
                ],
                drift: r.gen_range(-1.0..1.0),
            }
        }
        Family::DualLobe => CaseParams::Lobes {
            alpha: psi0 + r.gen_range(-0.5..0.5) * band,
            dist: r.gen_range(0.3..0.45),
            a: r.gen_range(0.15..0.25),
            b: r.gen_range(0.08..0.14),
            amps: (r.gen_range(0.5..1.0), r.gen_range(0.5..1.0)),
            drift: r.gen_range(-1.0..1.0),
        },
    }
}

fn draw_lesion(spec: &TaskSpec, r: &mut impl Rng) -> Lesion {
    let psi = spec.orientation_deg.to_radians();
    // Centred off-axis, at a jittered spot on the ray perpendicular to the
    // long axis, so the pooled cell holding it is nearly the same every case.
    let ang = psi + FRAC_PI_2 + r.gen_range(-1.0..1.0) * LESION_ANGLE_JITTER;
    let rad = LESION_RADIUS + r.gen_range(-1.0..1.0) * LESION_RADIUS_JITTER;
    Lesion {
        ellipse: Ellipse {
            cx: rad * ang.cos(),
            cy: rad * ang.sin(),
            a: r.gen_range(0.18..0.26),
            b: r.gen_range(0.04..0.06),
            angle: psi,
            amp: r.gen_range(0.35..0.5),
        },
    }
}

fn render(geom: &FanBeamGeometry, case: &CaseParams, lesion: Option<&Lesion>, slice: usize) -> Tensor {
    let (w, h) = (geom.width, geom.height);
    let half = 0.5 * w.min(h) as f64 * geom.pixel_size;
    // One pixel in normalized units sets the edge softness.
    let edge = 0.6 * geom.pixel_size / half;
    // Slice phase in [-1, 1].
    let t = (slice as f64 - 0.5 * (SLICES_PER_CASE - 1) as f64) / (0.5 * (SLICES_PER_CASE - 1) as f64);
    let mut data = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let (x, y) = geom.pixel_center(row, col);
            let (x, y) = (x / half, y / half);
            let r = (x * x + y * y).sqrt();
            let mut v = match case {
                CaseParams::Bars { psi, drift, bars } => {
                    let psi = psi + 0.02 * drift * t;
                    // Distance across and along the bar direction.
                    let across = -x * psi.sin() + y * psi.cos();
                    let along = x * psi.cos() + y * psi.sin();
                    let reach = soft(along - BAR_START, BAR_END_SOFTNESS) * soft(BAR_STOP - along, BAR_END_SOFTNESS);
                    reach * bars
                        .iter()
                        .map(|b| {
                            let c = b.offset + 0.04 * drift * t;
                            b.amp * soft(b.half_width - (across - c).abs(), edge)
                        })
                        .fold(0.0, f64::max)
                }
                CaseParams::Blob { cx, cy, radii, drift } => {
                    let rr = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    let grow = 1.0 + 0.08 * drift * t;
                    radii.iter().map(|&(rad, amp)| amp * soft(rad * grow - rr, edge)).sum()
                }
                CaseParams::Lobes { alpha, dist, a, b, amps, drift } => {
                    let d = dist * (1.0 + 0.08 * drift * t);
                    let (s, c) = alpha.sin_cos();
                    let e1 = Ellipse { cx: d * c, cy: d * s, a: *a, b: *b, angle: *alpha, amp: amps.0 };
                    let e2 = Ellipse { cx: -d * c, cy: -d * s, a: *a, b: *b, angle: *alpha, amp: amps.1 };
                    e1.amp * e1.inside(x, y, edge) + e2.amp * e2.inside(x, y, edge)
                }
            };
            if let Some(les) = lesion {
                let mut e = Ellipse { ..les.ellipse };
                // Largest at mid-volume.
                let size = 1.0 - 0.3 * t * t;
                e.a *= size;
                e.b *= size;
                v += e.amp * e.inside(x, y, edge);
            }
            data[row * w + col] = (v * taper(r)).clamp(0.0, 1.0);
        }
    }
    Tensor::matrix(h, w, data).unwrap()
}

fn gen_split(spec: &TaskSpec, geom: &FanBeamGeometry, split: &str, cases: usize, first_case: u32) -> Vec<Sample> {
    let key = format!("{}/{split}", spec.task_id);
    let mut out = Vec::with_capacity(cases * SLICES_PER_CASE);
    for c in 0..cases {
        let mut r = rng::stream(spec.seed, &key, c as u64);
        let case = draw_case(spec, &mut r);
        let (label, lesion) = match spec.label_mode {
            LabelMode::None => (None, None),
            LabelMode::LesionBinary => {
                let les = draw_lesion(spec, &mut r);
                if r.gen_bool(0.5) {
                    (Some(1), Some(les))
                } else {
                    (Some(0), None)
                }
            }
        };
        for s in 0..SLICES_PER_CASE {
            out.push(Sample {
                image: render(geom, &case, lesion.as_ref(), s),
                label,
                case_id: first_case + c as u32,
            });
        }
    }
    out
}

/// Deterministic dataset for `spec` rendered on the image grid of `geom`.
pub fn gen_task(spec: &TaskSpec, geom: &FanBeamGeometry) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        task_id: spec.task_id.clone(),
        train: gen_split(spec, geom, "train", spec.n_train, 0),
        test: gen_split(spec, geom, "test", spec.n_test, spec.n_train as u32),
    })
}

/// `VPDS | version u32 | task_id | VPCK container | count u32 | (case_id u32, label i8) * count`.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.task_id.len() as u32).to_le_bytes());
    out.extend_from_slice(ds.task_id.as_bytes());
    let all = ds.train.iter().map(|s| ("train", s)).chain(ds.test.iter().map(|s| ("test", s)));
    let entries: Vec<(String, Tensor)> = all
        .clone()
        .enumerate()
        .map(|(i, (split, s))| (format!("{split}/{i}"), s.image.clone()))
        .collect();
    out.extend(container::encode(&entries));
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (_, s) in all {
        out.extend_from_slice(&s.case_id.to_le_bytes());
        let l: i8 = s.label.map_or(-1, |v| v as i8);
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(buf);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected VPDS".into() });
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return r.fail(format!("unsupported dataset version {version}"));
    }
    let task_id = r.string()?;
    let entries = container::decode_from(&mut r)?;
    let count = r.u32()? as usize;
    if count != entries.len() {
        return r.fail(format!("manifest lists {count} samples, container holds {}", entries.len()));
    }
    let mut ds = Dataset { task_id, train: Vec::new(), test: Vec::new() };
    for (name, image) in entries {
        let case_id = r.u32()?;
        let label = match r.u8()? as i8 {
            -1 => None,
            l @ (0 | 1) => Some(l as u8),
            l => return r.fail(format!("label {l} out of range")),
        };
        let sample = Sample { image, label, case_id };
        match name.split_once('/') {
            Some(("train", _)) => ds.train.push(sample),
            Some(("test", _)) => ds.test.push(sample),
            _ => return r.fail(format!("unexpected entry '{name}'")),
        }
    }
    if !r.is_done() {
        return r.fail("trailing bytes after manifest");
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&buf).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> FanBeamGeometry {
        FanBeamGeometry::new(12, 32, 32).unwrap()
    }

    #[test]
    fn deterministic() {
        let spec = TaskSpec::new("a", Family::DualLobe, 2, 1, 5);
        assert_eq!(gen_task(&spec, &geom()).unwrap(), gen_task(&spec, &geom()).unwrap());
        let other = TaskSpec { seed: 6, ..spec.clone() };
        assert_ne!(gen_task(&other, &geom()).unwrap().train[0], gen_task(&spec, &geom()).unwrap().train[0]);
    }

    #[test]
    fn values_in_unit_range_and_cases_grouped() {
        for fam in [Family::EdgeBand, Family::CenterBlob, Family::DualLobe] {
            let spec = TaskSpec::new("t", fam, 3, 2, 1).with_labels(LabelMode::LesionBinary);
            let ds = gen_task(&spec, &geom()).unwrap();
            assert_eq!(ds.train.len(), 3 * SLICES_PER_CASE);
            assert_eq!(Dataset::cases(&ds.test).len(), 2);
            for s in ds.train.iter().chain(&ds.test) {
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(s.label.is_some());
                assert!(s.image.max_abs() > 0.1);
            }
        }
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(gen_task(&TaskSpec::new("t", Family::EdgeBand, 0, 1, 0), &geom()).is_err());
    }

    #[test]
    fn round_trip_and_truncation() {
        let spec = TaskSpec::new("rt", Family::CenterBlob, 1, 1, 3).with_labels(LabelMode::LesionBinary);
        let ds = gen_task(&spec, &geom()).unwrap();
        let buf = encode_dataset(&ds);
        assert_eq!(decode_dataset(&buf).unwrap(), ds);
        for cut in [3, 20, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(decode_dataset(&buf[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }
}
