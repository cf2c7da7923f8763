//! Learnable filtered backprojection shared by all tasks.
//!
//! Filtering is a dense `D x D` matrix followed by tanh; backprojection reads
//! each view's filtered profile at the nearest detector bin and weights it by
//! a per-pixel, per-view coefficient.

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{build_index_table, ramp_filter_matrix, BackprojIndexTable, FanBeamGeometry};

/// Target 99th percentile of the tanh pre-activation at initialization.
pub const TANH_OPERATING_POINT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct LearnableFbp {
    pub geom: FanBeamGeometry,
    /// `[D, D]`.
    pub eta: Parameter,
    /// `[K, V]`.
    pub epsilon: Parameter,
    pub input_scale: f64,
    pub table: BackprojIndexTable,
    flat_idx: Vec<usize>,
    valid: Tensor,
}

pub struct ReconVars {
    pub eta: Var,
    pub epsilon: Var,
}

/// 99th percentile of `|v|` over all values.
pub fn abs_percentile99(values: impl Iterator<Item = f64>) -> f64 {
    let mut a: Vec<f64> = values.map(f64::abs).collect();
    if a.is_empty() {
        return 0.0;
    }
    let k = ((a.len() - 1) as f64 * 0.99).round() as usize;
    *a.select_nth_unstable_by(k, f64::total_cmp).1
}

impl LearnableFbp {
    /// Assemble from explicit weights, e.g. when loading a checkpoint.
    pub fn from_parts(geom: &FanBeamGeometry, eta: Tensor, epsilon: Tensor, input_scale: f64) -> Result<Self> {
        let table = build_index_table(geom);
        if eta.shape() != [geom.detectors, geom.detectors] || epsilon.shape() != [geom.pixels(), geom.views] {
            return Err(Error::contract("learnable_fbp", "weight shapes do not match the geometry"));
        }
        if !(input_scale > 0.0) || !input_scale.is_finite() {
            return Err(Error::contract("learnable_fbp", "input_scale must be positive"));
        }
        let flat_idx = table.flat_sino_indices(geom.detectors);
        let valid = Tensor::matrix(
            geom.pixels(),
            geom.views,
            table.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )?;
        Ok(LearnableFbp {
            geom: geom.clone(),
            eta: Parameter::new("eta", eta),
            epsilon: Parameter::new("epsilon", epsilon),
            input_scale,
            table,
            flat_idx,
            valid,
        })
    }

    /// Classical initialization: `input_scale = 1/p99|y|`, `η = c·M` for the
    /// windowed ramp matrix `M` with `c` putting the p99 tanh input at
    /// [`TANH_OPERATING_POINT`], and `ε = Δβ/L² / (c·input_scale)`.
    pub fn init_from_classical(geom: &FanBeamGeometry, train_sinos: &[Tensor]) -> Result<Self> {
        let p99 = abs_percentile99(train_sinos.iter().flat_map(|s| s.data().iter().copied()));
        if !(p99 > 0.0) || !p99.is_finite() {
            return Err(Error::contract("init_from_classical", "training sinograms are all zero"));
        }
        let s = 1.0 / p99;
        let m = ramp_filter_matrix(geom);
        let mt = m.transpose();
        let mut filtered = Vec::new();
        for y in train_sinos {
            filtered.extend(y.matmul(&mt)?.data().iter().map(|v| v * s));
        }
        let fp99 = abs_percentile99(filtered.into_iter());
        if !(fp99 > 0.0) {
            return Err(Error::contract("init_from_classical", "filtered sinograms are all zero"));
        }
        let c = TANH_OPERATING_POINT / fp99;
        let table = build_index_table(geom);
        let eps: Vec<f64> = table.fan_weights().iter().map(|w| w / (c * s)).collect();
        let eps = Tensor::matrix(geom.pixels(), geom.views, eps)?;
        Self::from_parts(geom, m.scaled(c), eps, s)
    }

    pub fn bind(&self, tape: &mut Tape) -> ReconVars {
        ReconVars {
            eta: tape.param(&self.eta),
            epsilon: tape.param(&self.epsilon),
        }
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.eta, &self.epsilon]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.eta, &mut self.epsilon]
    }

    /// `y_f = tanh((input_scale · y) · ηᵀ)`, one filtered profile per view.
    pub fn filter_views(&self, tape: &mut Tape, vars: &ReconVars, sino: Var) -> Result<Var> {
        let ys = tape.scale(sino, self.input_scale)?;
        let et = tape.transpose(vars.eta)?;
        let pre = tape.matmul(ys, et)?;
        tape.tanh(pre)
    }

    /// `x(p) = Σ_j valid(p,j) · ε(p,j) · y_f(j, idx(p,j))`, as `[H, W]`.
    pub fn learned_backproject(&self, tape: &mut Tape, vars: &ReconVars, yf: Var) -> Result<Var> {
        let g = &self.geom;
        if tape.shape(yf) != [g.views, g.detectors] {
            return Err(Error::contract("learned_backproject", "filtered sinogram shape"));
        }
        let flat = tape.reshape(yf, &[g.sino_len(), 1])?;
        let picked = tape.gather_rows(flat, &self.flat_idx)?;
        let picked = tape.reshape(picked, &[g.pixels(), g.views])?;
        let valid = tape.constant(self.valid.clone());
        let w = tape.mul(vars.epsilon, valid)?;
        let terms = tape.mul(w, picked)?;
        let img = tape.sum_last(terms)?;
        tape.reshape(img, &[g.height, g.width])
    }

    pub fn reconstruct(&self, tape: &mut Tape, vars: &ReconVars, sino: Var) -> Result<Var> {
        let yf = self.filter_views(tape, vars, sino)?;
        self.learned_backproject(tape, vars, yf)
    }

    /// Reconstruction without recording gradients.
    pub fn reconstruct_value(&self, sino: &Tensor) -> Result<Tensor> {
        let g = &self.geom;
        if sino.shape() != [g.views, g.detectors] {
            return Err(Error::contract("reconstruct", format!("sinogram {:?}", sino.shape())));
        }
        let yf = sino.scaled(self.input_scale).matmul(&self.eta.value.transpose())?.map(f64::tanh);
        if !yf.is_finite() {
            return Err(Error::NonFinite { op: "reconstruct" });
        }
        let eps = self.epsilon.value.data();
        let y = yf.data();
        let v = g.views;
        let img: Vec<f64> = (0..g.pixels())
            .map(|p| {
                (0..v)
                    .filter(|&j| self.table.valid[p * v + j])
                    .map(|j| eps[p * v + j] * y[self.flat_idx[p * v + j]])
                    .sum()
            })
            .collect();
        let img = Tensor::matrix(g.height, g.width, img)?;
        if !img.is_finite() {
            return Err(Error::NonFinite { op: "reconstruct" });
        }
        Ok(img)
    }
}

/// Zero-initialized residual refinement `x + k2 * relu(k1 * x)`.
#[cfg(feature = "refiner")]
#[derive(Clone, Debug)]
pub struct Refiner {
    pub k1: Parameter,
    pub k2: Parameter,
}

#[cfg(feature = "refiner")]
impl Refiner {
    pub const HIDDEN: usize = 4;

    /// `k1` gets a small deterministic pattern so gradients reach `k2`; `k2`
    /// starts at zero so the refiner is the identity.
    pub fn new(seed: u64) -> Self {
        use rand::Rng;
        let mut r = crate::rng::stream(seed, "refiner", 0);
        let k1 = (0..Self::HIDDEN * 9).map(|_| r.gen_range(-0.1..0.1)).collect();
        Refiner {
            k1: Parameter::new("k1", Tensor::new(vec![Self::HIDDEN, 1, 3, 3], k1).unwrap()),
            k2: Parameter::new("k2", Tensor::zeros(&[1, Self::HIDDEN, 3, 3])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        let [h, w] = shape[..] else {
            return Err(Error::contract("refiner", "image must be rank 2"));
        };
        let k1 = tape.param(&self.k1);
        let k2 = tape.param(&self.k2);
        let x = tape.reshape(image, &[1, h, w])?;
        let hid = tape.conv3x3(x, k1)?;
        let hid = tape.relu(hid)?;
        let out = tape.conv3x3(hid, k2)?;
        let out = tape.reshape(out, &[h, w])?;
        tape.add(image, out)
    }
}
