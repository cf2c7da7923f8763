//! Classical equiangular fan-beam FBP and the nearest-bin lookup table it
//! shares with the learnable reconstructor.

use rustfft::{num_complex::Complex64, FftPlanner};

use super::FanBeamGeometry;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// For each pixel `p` and view `j`, the detector bin hit by the ray from the
/// source through the pixel center, rounded to the nearest bin.
#[derive(Clone, Debug, PartialEq)]
pub struct BackprojIndexTable {
    pub views: usize,
    pub pixels: usize,
    /// `idx[p * views + j]`; only meaningful where `valid` is set.
    pub idx: Vec<u32>,
    pub valid: Vec<bool>,
    /// Squared source-to-pixel distance, same layout as `idx`.
    pub dist2: Vec<f64>,
}

impl BackprojIndexTable {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn get(&self, pixel: usize, view: usize) -> Option<usize> {
        let k = pixel * self.views + view;
        self.valid[k].then(|| self.idx[k] as usize)
    }

    /// Flat indices into a `[V, D]` sinogram, `p * V + j` order. Invalid
    /// entries point at bin 0 of their view and must be masked by the caller.
    pub fn flat_sino_indices(&self, detectors: usize) -> Vec<usize> {
        (0..self.len())
            .map(|k| {
                let j = k % self.views;
                let i = if self.valid[k] { self.idx[k] as usize } else { 0 };
                j * detectors + i
            })
            .collect()
    }

    /// Classical fan-beam backprojection weights `Δβ / L²`, zero where invalid.
    pub fn fan_weights(&self) -> Vec<f64> {
        let dbeta = std::f64::consts::TAU / self.views as f64;
        self.dist2
            .iter()
            .zip(&self.valid)
            .map(|(&l2, &ok)| if ok { dbeta / l2 } else { 0.0 })
            .collect()
    }
}

pub fn build_index_table(geom: &FanBeamGeometry) -> BackprojIndexTable {
    let v = geom.views;
    let k = geom.pixels();
    let mut idx = vec![0u32; k * v];
    let mut valid = vec![false; k * v];
    let mut dist2 = vec![0.0; k * v];
    let half = (geom.detectors / 2) as i64;
    let trig: Vec<_> = (0..v).map(|j| geom.theta(j)).collect();
    for row in 0..geom.height {
        for col in 0..geom.width {
            let p = row * geom.width + col;
            let (n, m) = geom.pixel_center(row, col);
            for (j, &theta) in trig.iter().enumerate() {
                let (a, b) = FanBeamGeometry::view_frame(theta, n, m);
                let along = geom.source_radius - b;
                let bin = ((a / along).atan() / geom.detector_interval).round() as i64 + half;
                let e = p * v + j;
                dist2[e] = a * a + along * along;
                if (0..geom.detectors as i64).contains(&bin) {
                    idx[e] = bin as u32;
                    valid[e] = true;
                }
            }
        }
    }
    BackprojIndexTable {
        views: v,
        pixels: k,
        idx,
        valid,
        dist2,
    }
}

/// Hann-apodised equiangular ramp kernel sampled at integer bin offsets
/// `0..detectors`, including the `γ_d` quadrature factor.
fn windowed_kernel(geom: &FanBeamGeometry) -> Vec<f64> {
    let d = geom.detectors;
    let alpha = geom.detector_interval;
    let n = (4 * d).next_power_of_two();
    let raw = |k: usize| -> f64 {
        if k == 0 {
            1.0 / (8.0 * alpha * alpha)
        } else if k % 2 == 0 {
            0.0
        } else {
            let s = (k as f64 * alpha).sin();
            -1.0 / (2.0 * std::f64::consts::PI.powi(2) * s * s)
        }
    };
    let mut buf: Vec<Complex64> = (0..n)
        .map(|k| {
            let off = if k <= n / 2 { k } else { n - k };
            Complex64::new(raw(off), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } / n as f64;
        *c *= 0.5 * (1.0 + (std::f64::consts::TAU * f).cos());
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    (0..d).map(|k| alpha * buf[k].re / n as f64).collect()
}

/// `[D, D]` matrix taking a raw detector profile to its filtered profile:
/// cosine pre-weighting followed by the windowed ramp convolution.
pub fn ramp_filter_matrix(geom: &FanBeamGeometry) -> Tensor {
    let d = geom.detectors;
    let kern = windowed_kernel(geom);
    let mut m = vec![0.0; d * d];
    for k in 0..d {
        for i in 0..d {
            let pre = geom.source_radius * geom.gamma(i).cos();
            m[k * d + i] = kern[k.abs_diff(i)] * pre;
        }
    }
    Tensor::matrix(d, d, m).unwrap()
}

/// Filter each view with [`ramp_filter_matrix`] and backproject along the
/// fan with `Δβ / L²` weights through the nearest-bin table.
pub fn classic_fbp(sino: &Tensor, geom: &FanBeamGeometry, table: &BackprojIndexTable) -> Result<Tensor> {
    if sino.shape() != [geom.views, geom.detectors] {
        return Err(Error::contract("classic_fbp", format!("sinogram {:?}", sino.shape())));
    }
    if table.views != geom.views || table.pixels != geom.pixels() {
        return Err(Error::contract("classic_fbp", "index table built for another geometry"));
    }
    let filt = ramp_filter_matrix(geom);
    let filtered = sino.matmul(&filt.transpose())?;
    Ok(backproject_table(&filtered, geom, table, &table.fan_weights()))
}

/// `x[p] = Σ_j w[p, j] · y[j, idx(p, j)]` over valid entries.
pub(crate) fn backproject_table(
    filtered: &Tensor,
    geom: &FanBeamGeometry,
    table: &BackprojIndexTable,
    weights: &[f64],
) -> Tensor {
    let v = geom.views;
    let d = geom.detectors;
    let y = filtered.data();
    let img: Vec<f64> = (0..geom.pixels())
        .map(|p| {
            (0..v)
                .filter_map(|j| {
                    let e = p * v + j;
                    table.valid[e].then(|| weights[e] * y[j * d + table.idx[e] as usize])
                })
                .sum()
        })
        .collect();
    Tensor::matrix(geom.height, geom.width, img).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::forward_project;

    #[test]
    fn isocenter_maps_to_central_bin() {
        let g = FanBeamGeometry::new(30, 16, 16).unwrap();
        let t = build_index_table(&g);
        let p = 8 * 16 + 8;
        for j in 0..g.views {
            assert_eq!(t.get(p, j), Some(g.detectors / 2));
        }
        assert_eq!(t.len(), g.pixels() * g.views);
    }

    #[test]
    fn x_axis_pixel_at_view_zero_matches_hand_evaluation() {
        let g = FanBeamGeometry::new(12, 16, 16).unwrap();
        let t = build_index_table(&g);
        // Pixel at (row 8, col 13) is x = 5, y = 0. At θ = 0: a = 5, b = 0,
        // so the ray angle is atan(5 / R) with R = 32.
        let gamma = (5.0f64 / 32.0).atan();
        let want = (gamma / g.detector_interval).round() as usize + g.detectors / 2;
        assert_eq!(t.get(8 * 16 + 13, 0), Some(want));
        // By hand: γ_d = 2·asin((√128 + 1)/32)/24 ≈ 0.032916, γ/γ_d ≈ 4.709, rounds to 5.
        assert_eq!(want, g.detectors / 2 + 5);
    }

    #[test]
    fn quarter_turn_shifts_view_index() {
        let g = FanBeamGeometry::new(4, 16, 16).unwrap();
        let t = build_index_table(&g);
        let (w, h) = (g.width as i64, g.height as i64);
        for row in 0..h {
            for col in 0..w {
                // Clockwise quarter turn about the isocenter: (x, y) -> (y, -x).
                let (x, y) = (col - w / 2, h / 2 - row);
                let (xr, yr) = (y, -x);
                let (cr, rr) = (xr + w / 2, h / 2 - yr);
                if !(0..w).contains(&cr) || !(0..h).contains(&rr) {
                    continue;
                }
                let p = (row * w + col) as usize;
                let q = (rr * w + cr) as usize;
                for j in 0..3 {
                    assert_eq!(t.get(p, j), t.get(q, j + 1), "pixel ({row},{col}) view {j}");
                }
            }
        }
    }

    #[test]
    fn zero_sinogram_reconstructs_zero() {
        let g = FanBeamGeometry::new(16, 16, 16).unwrap();
        let t = build_index_table(&g);
        let x = classic_fbp(&Tensor::zeros(&[16, g.detectors]), &g, &t).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_disc_amplitude() {
        let g = FanBeamGeometry::new(180, 64, 64).unwrap();
        let t = build_index_table(&g);
        let mut img = Tensor::zeros(&[64, 64]);
        for r in 0..64 {
            for c in 0..64 {
                let (x, y) = g.pixel_center(r, c);
                if x * x + y * y <= 400.0 {
                    img.data_mut()[r * 64 + c] = 1.0;
                }
            }
        }
        let rec = classic_fbp(&forward_project(&img, &g).unwrap(), &g, &t).unwrap();
        let center = rec.at2(32, 32);
        assert!((center - 1.0).abs() < 0.05, "center {center}");
        assert!(rec.at2(2, 2).abs() < 0.05);
    }
}
