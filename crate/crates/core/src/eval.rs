//! Test-set scoring of fixed view strategies through a trained pipeline.

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::completion::{mask_rows, CompletionModel};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::recon::LearnableFbp;
use crate::trainer::TaskData;

/// Images are rendered in `[0, 1]`.
pub const IMAGE_PEAK: f64 = 1.0;

/// Complete the masked views of `sino` and reconstruct.
pub fn reconstruct_masked(
    completion: &CompletionModel,
    shared: &LearnableFbp,
    sino: &Tensor,
    mask: &[bool],
) -> Result<Tensor> {
    if mask.len() != shared.geom.views {
        return Err(Error::contract("reconstruct_masked", "mask length differs from view count"));
    }
    let full = completion.complete(&mask_rows(sino, mask), mask)?;
    shared.reconstruct_value(&full)
}

/// Per-image scores, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

pub fn score_strategy(
    completion: &CompletionModel,
    shared: &LearnableFbp,
    data: &TaskData,
    mask: &[bool],
) -> Result<ImageScores> {
    let pairs = data
        .sinos
        .par_iter()
        .zip(&data.images)
        .map(|(y, x)| {
            let rec = reconstruct_masked(completion, shared, y, mask)?;
            Ok((psnr(&rec, x, IMAGE_PEAK)?, ssim(&rec, x, IMAGE_PEAK)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageScores {
        psnr: pairs.iter().map(|p| p.0).collect(),
        ssim: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub task_id: String,
    pub method: String,
    pub scores: ImageScores,
}

impl MetricsRow {
    pub fn psnr_mean(&self) -> f64 {
        mean_sd(&self.scores.psnr).0
    }

    pub fn ssim_mean(&self) -> f64 {
        mean_sd(&self.scores.ssim).0
    }
}

pub const METRICS_HEADER: &str = "task_id,method,psnr_mean,psnr_sd,ssim_mean,ssim_sd";

/// One line per row with fixed formatting so repeated runs compare bytewise.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let (pm, ps) = mean_sd(&r.scores.psnr);
        let (sm, ss) = mean_sd(&r.scores.ssim);
        s.push_str(&format!("{},{},{pm:.6},{ps:.6},{sm:.6},{ss:.6}\n", r.task_id, r.method));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn csv_layout() {
        let row = MetricsRow {
            task_id: "a".into(),
            method: "learned".into(),
            scores: ImageScores { psnr: vec![20.0, 22.0], ssim: vec![0.5, 0.7] },
        };
        let csv = metrics_csv(&[row]);
        assert_eq!(csv, format!("{METRICS_HEADER}\na,learned,21.000000,1.414214,0.600000,0.141421\n"));
    }
}
