//! Noise power spectrum of reconstruction noise images.

use rustfft::{num_complex::Complex64, FftPlanner};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct NpsResult {
    /// `[H, W]` spectrum with zero frequency at `(H/2, W/2)`.
    pub nps2d: Tensor,
    /// Radially averaged spectrum; bin `b` covers radial index `(b, b+1]`.
    pub nps1d: Vec<f64>,
    /// Bin center frequencies in cycles per unit length.
    pub freqs: Vec<f64>,
    pub pixel_size: f64,
    /// Set when too few images were available to average.
    pub warning: Option<String>,
}

fn fft2(img: &[f64], h: usize, w: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = img.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    buf
}

/// Signed frequency index of DFT bin `k` out of `n`.
fn signed(k: usize, n: usize) -> f64 {
    if k <= (n - 1) / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// `NPS2D = p²/(W·H) · mean |DFT(x - mean x)|²` over the images, and its
/// annular average.
pub fn nps(noise_images: &[Tensor], pixel_size: f64) -> Result<NpsResult> {
    let first = noise_images
        .first()
        .ok_or_else(|| Error::contract("nps", "no images"))?;
    let (h, w) = first
        .dims2()
        .ok_or_else(|| Error::contract("nps", "images must be rank 2"))?;
    if noise_images.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::contract("nps", "images differ in shape"));
    }
    if !(pixel_size > 0.0) {
        return Err(Error::contract("nps", "pixel_size must be positive"));
    }
    let mut planner = FftPlanner::new();
    let mut acc = vec![0.0; h * w];
    for img in noise_images {
        let m = img.sum() / img.len() as f64;
        let centered: Vec<f64> = img.data().iter().map(|v| v - m).collect();
        for (a, c) in acc.iter_mut().zip(fft2(&centered, h, w, &mut planner)) {
            *a += c.norm_sqr();
        }
    }
    let norm = pixel_size * pixel_size / (w * h) as f64 / noise_images.len() as f64;

    let nbins = h.min(w).div_ceil(2);
    let short = h.min(w) as f64;
    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    let mut centered = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let v = acc[r * w + c] * norm;
            centered[((r + h / 2) % h) * w + (c + w / 2) % w] = v;
            // Radial index in units of the shorter axis' frequency step.
            let fy = signed(r, h) / h as f64 * short;
            let fx = signed(c, w) / w as f64 * short;
            let rad = (fx * fx + fy * fy).sqrt();
            if rad > 0.0 {
                let b = rad.ceil() as usize - 1;
                if b < nbins {
                    sums[b] += v;
                    counts[b] += 1;
                }
            }
        }
    }
    let nps1d = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let freqs = (0..nbins)
        .map(|b| (b as f64 + 0.5) / (short * pixel_size))
        .collect();
    let warning = (noise_images.len() < 2)
        .then(|| "single noise image: spectrum is not averaged".to_string());
    Ok(NpsResult {
        nps2d: Tensor::matrix(h, w, centered)?,
        nps1d,
        freqs,
        pixel_size,
        warning,
    })
}

impl NpsResult {
    /// Energy in the double wedge of half-width `half_width` around direction
    /// `angle` (radians, in the frequency plane, 0 = +x), excluding DC.
    pub fn wedge_energy(&self, angle: f64, half_width: f64) -> f64 {
        let (h, w) = self.nps2d.dims2().unwrap();
        let mut e = 0.0;
        for r in 0..h {
            for c in 0..w {
                let fx = c as f64 - (w / 2) as f64;
                let fy = (h / 2) as f64 - r as f64;
                if fx == 0.0 && fy == 0.0 {
                    continue;
                }
                let mut d = (fy.atan2(fx) - angle).rem_euclid(std::f64::consts::PI);
                if d > std::f64::consts::FRAC_PI_2 {
                    d = std::f64::consts::PI - d;
                }
                if d <= half_width {
                    e += self.nps2d.at2(r, c);
                }
            }
        }
        e
    }

    /// Ratio of wedge energy along `angle` to that along the perpendicular.
    pub fn anisotropy(&self, angle: f64) -> f64 {
        let q = std::f64::consts::FRAC_PI_8;
        self.wedge_energy(angle, q) / self.wedge_energy(angle + std::f64::consts::FRAC_PI_2, q)
    }
}
