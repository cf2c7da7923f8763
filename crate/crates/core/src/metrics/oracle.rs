//! Exhaustive search over view subsets with classical reconstruction.

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::completion::interp_matrix;
use crate::error::{Error, Result};
use crate::geometry::{build_index_table, forward_project, ramp_filter_matrix, FanBeamGeometry};

/// Largest number of subsets the oracle will enumerate.
pub const MAX_SUBSETS: u64 = 100_000;

#[derive(Clone, Debug)]
pub struct OracleRanking {
    /// `(selected view indices, mean image MSE)`, best first; equal errors
    /// keep lexicographic subset order.
    pub entries: Vec<(Vec<usize>, f64)>,
}

impl OracleRanking {
    /// 0-based position of the subset with these views.
    pub fn rank_of(&self, views: &[usize]) -> Option<usize> {
        self.entries.iter().position(|(v, _)| v == views)
    }

    /// Number of subsets with error strictly below `err`, i.e. the rank an
    /// externally evaluated subset would take.
    pub fn rank_of_error(&self, err: f64) -> usize {
        self.entries.partition_point(|(_, e)| *e < err)
    }
}

pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let Some(i) = (0..k).rev().find(|&i| c[i] != i + n - k) else {
            return out;
        };
        c[i] += 1;
        for j in i + 1..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

/// Precomputed filtered sinograms so each subset costs one view-axis
/// interpolation and one backprojection per image.
pub struct SubsetEvaluator<'a> {
    geom: &'a FanBeamGeometry,
    images: &'a [Tensor],
    filtered: Vec<Tensor>,
    table: crate::geometry::BackprojIndexTable,
    weights: Vec<f64>,
}

impl<'a> SubsetEvaluator<'a> {
    pub fn new(images: &'a [Tensor], geom: &'a FanBeamGeometry) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::contract("oracle", "empty dataset"));
        }
        let filt_t = ramp_filter_matrix(geom).transpose();
        let filtered = images
            .iter()
            .map(|img| forward_project(img, geom)?.matmul(&filt_t))
            .collect::<Result<Vec<_>>>()?;
        let table = build_index_table(geom);
        let weights = table.fan_weights();
        Ok(SubsetEvaluator { geom, images, filtered, table, weights })
    }

    /// Mean image MSE of linear interpolation plus classical FBP from `views`.
    /// Filtering and view interpolation are both linear and act on different
    /// axes, so interpolating the filtered sinogram is equivalent.
    pub fn error(&self, views: &[usize]) -> Result<f64> {
        let mut mask = vec![false; self.geom.views];
        for &v in views {
            mask[v] = true;
        }
        let l = interp_matrix(&mask)?;
        let mut total = 0.0;
        for (img, f) in self.images.iter().zip(&self.filtered) {
            let full = l.matmul(f)?;
            let rec = crate::geometry::backproject_table(&full, self.geom, &self.table, &self.weights);
            total += crate::metrics::mse(&rec, img)?;
        }
        Ok(total / self.images.len() as f64)
    }
}

/// Rank every `vs`-subset of the `V` views by mean reconstruction MSE.
pub fn brute_force_best_strategy(images: &[Tensor], geom: &FanBeamGeometry, vs: usize) -> Result<OracleRanking> {
    if vs < 2 || vs > geom.views {
        return Err(Error::contract("oracle", format!("V_s = {vs} outside 2..={}", geom.views)));
    }
    let count = binomial(geom.views as u64, vs as u64);
    if count > MAX_SUBSETS {
        return Err(Error::contract(
            "oracle",
            format!("C({}, {vs}) = {count} subsets exceeds the limit of {MAX_SUBSETS}", geom.views),
        ));
    }
    let eval = SubsetEvaluator::new(images, geom)?;
    let subsets = combinations(geom.views, vs);
    let errors: Vec<f64> = subsets
        .par_iter()
        .map(|s| eval.error(s))
        .collect::<Result<Vec<_>>>()?;
    let mut entries: Vec<(Vec<usize>, f64)> = subsets.into_iter().zip(errors).collect();
    entries.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(OracleRanking { entries })
}
