//! Image-quality, noise, classification and significance metrics, plus the
//! exhaustive view-subset oracle.

mod image;
mod nps;
mod oracle;
mod stats;

pub use image::{mse, psnr, ssim, SSIM_SIGMA, SSIM_WINDOW};
pub use nps::{nps, NpsResult};
pub use oracle::{binomial, brute_force_best_strategy, combinations, OracleRanking, SubsetEvaluator, MAX_SUBSETS};
pub use stats::{cls_metrics, wilcoxon_signed_rank, wilcoxon_with, ClsMetrics, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};
