use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    if a.is_empty() {
        return Err(Error::contract("mse", "empty images"));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::contract("psnr", "peak must be positive"));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            w[y * SSIM_WINDOW + x] = g[y] * g[x];
        }
    }
    w
}

/// Mean SSIM over all fully-contained 11x11 Gaussian windows (σ = 1.5),
/// with dynamic range `range`.
pub fn ssim(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w) = a
        .dims2()
        .ok_or_else(|| Error::contract("ssim", "images must be rank 2"))?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!("image {h}x{w} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let win = gaussian_window();
    let (pa, pb) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = win[dy * SSIM_WINDOW + dx];
                    let p = (y0 + dy) * w + x0 + dx;
                    let (va, vb) = (pa[p], pb[p]);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_identical_is_infinite() {
        let a = Tensor::full(&[4, 4], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_unit_mse_at_8bit_peak() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::full(&[2, 2], 1.0);
        let v = psnr(&a, &b, 255.0).unwrap();
        assert!((v - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert!((v - 48.1308).abs() < 1e-4);
        assert_eq!(v, psnr(&b, &a, 255.0).unwrap());
    }

    #[test]
    fn psnr_shape_mismatch() {
        assert!(psnr(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 3]), 1.0).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = Tensor::new(vec![16, 16], (0..256).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constants_matches_closed_form() {
        let (l, c) = (1.0, 0.2);
        let a = Tensor::full(&[12, 12], c);
        let b = Tensor::full(&[12, 12], c + l);
        let c1 = (0.01 * l) * (0.01 * l);
        // Zero variances: the contrast-structure term is c2/c2 = 1.
        let want = (2.0 * c * (c + l) + c1) / (c * c + (c + l) * (c + l) + c1);
        let got = ssim(&a, &b, l).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert_eq!(got, ssim(&b, &a, l).unwrap());
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros(&[10, 20]);
        assert!(ssim(&a, &a, 1.0).is_err());
    }
}
