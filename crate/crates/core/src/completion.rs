//! Sparse-to-full sinogram completion along the view axis.
//!
//! The classical baseline is periodic linear interpolation between the
//! nearest measured views. The learnable model adds a residual
//! `W2·tanh(W1·B)` on top of that baseline `B`, with both matrices acting on
//! the view axis and shared across detector bins.

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn selected(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Place `rows` (`[V_s, D]`, ascending view order) at the masked views of a
/// zero `[V, D]` grid. Also returns the mask broadcast to `[V, D]`.
pub fn scatter_sparse(rows: &Tensor, mask: &[bool]) -> Result<(Tensor, Tensor)> {
    let sel = selected(mask);
    let (n, d) = rows
        .dims2()
        .ok_or_else(|| Error::contract("scatter_sparse", "rows must be rank 2"))?;
    if n != sel.len() {
        return Err(Error::contract(
            "scatter_sparse",
            format!("{n} rows for {} selected views", sel.len()),
        ));
    }
    let v = mask.len();
    let mut grid = vec![0.0; v * d];
    let mut mg = vec![0.0; v * d];
    for (r, &j) in sel.iter().enumerate() {
        grid[j * d..(j + 1) * d].copy_from_slice(rows.row(r));
        mg[j * d..(j + 1) * d].fill(1.0);
    }
    Ok((Tensor::matrix(v, d, grid)?, Tensor::matrix(v, d, mg)?))
}

/// Copy of a full `[V, D]` sinogram with the unmasked rows zeroed.
pub fn mask_rows(sino: &Tensor, mask: &[bool]) -> Tensor {
    let d = sino.shape()[1];
    let mut out = sino.clone();
    for (j, &m) in mask.iter().enumerate() {
        if !m {
            out.data_mut()[j * d..(j + 1) * d].fill(0.0);
        }
    }
    out
}

/// `[V, V]` operator `L` with `L·grid` the periodic linear interpolation of
/// the masked rows of `grid`.
pub fn interp_matrix(mask: &[bool]) -> Result<Tensor> {
    let sel = selected(mask);
    if sel.len() < 2 {
        return Err(Error::contract(
            "interp_baseline",
            format!("need at least 2 selected views, got {}", sel.len()),
        ));
    }
    let v = mask.len();
    let mut l = vec![0.0; v * v];
    let mut k = 0;
    for j in 0..v {
        if mask[j] {
            l[j * v + j] = 1.0;
            continue;
        }
        while k < sel.len() && sel[k] < j {
            k += 1;
        }
        let (prev, next) = match k {
            0 => (sel[sel.len() - 1] as i64 - v as i64, sel[0] as i64),
            k if k == sel.len() => (sel[k - 1] as i64, (sel[0] + v) as i64),
            k => (sel[k - 1] as i64, sel[k] as i64),
        };
        let t = (j as i64 - prev) as f64 / (next - prev) as f64;
        l[j * v + prev.rem_euclid(v as i64) as usize] += 1.0 - t;
        l[j * v + next.rem_euclid(v as i64) as usize] += t;
    }
    Tensor::matrix(v, v, l)
}

pub fn interp_baseline(grid: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if grid.shape().first() != Some(&mask.len()) || grid.rank() != 2 {
        return Err(Error::contract("interp_baseline", "grid rows must match mask length"));
    }
    interp_matrix(mask)?.matmul(grid)
}

/// Evenly spaced mask with `vs` of `v` views: indices `floor(k·v/vs)`.
pub fn uniform_mask(v: usize, vs: usize) -> Vec<bool> {
    let mut m = vec![false; v];
    for k in 0..vs.min(v) {
        m[k * v / vs] = true;
    }
    m
}

#[derive(Clone, Debug)]
pub struct CompletionModel {
    pub w1: Parameter,
    pub w2: Parameter,
    /// Multiplies sinogram values before `W1` so the tanh sees unit-scale input.
    pub scale: f64,
}

pub struct CompletionVars {
    pub w1: Var,
    pub w2: Var,
}

impl CompletionModel {
    /// `W1` starts as the interpolation operator of the evenly spaced
    /// `vs`-view mask, `W2` at zero.
    pub fn new(views: usize, vs: usize, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::contract("completion", "scale must be positive"));
        }
        Ok(CompletionModel {
            w1: Parameter::new("w1", interp_matrix(&uniform_mask(views, vs.max(2)))?),
            w2: Parameter::new("w2", Tensor::zeros(&[views, views])),
            scale,
        })
    }

    pub fn views(&self) -> usize {
        self.w1.value.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> CompletionVars {
        CompletionVars {
            w1: tape.param(&self.w1),
            w2: tape.param(&self.w2),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.w1, &mut self.w2]
    }

    /// `ŷ = B + W2·tanh(W1·s·B) / s` for a baseline `B` already on the tape.
    pub fn residual(&self, tape: &mut Tape, vars: &CompletionVars, baseline: Var) -> Result<Var> {
        let b = tape.scale(baseline, self.scale)?;
        let h = tape.matmul(vars.w1, b)?;
        let h = tape.tanh(h)?;
        let r = tape.matmul(vars.w2, h)?;
        let r = tape.scale(r, 1.0 / self.scale)?;
        tape.add(baseline, r)
    }

    /// Complete a scattered grid without recording gradients.
    pub fn complete(&self, grid: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let base = tape.constant(interp_baseline(grid, mask)?);
        let out = self.residual(&mut tape, &vars, base)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(v: usize, idx: &[usize]) -> Vec<bool> {
        (0..v).map(|i| idx.contains(&i)).collect()
    }

    #[test]
    fn full_scatter_is_identity() {
        let rows = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let (g, m) = scatter_sparse(&rows, &[true; 3]).unwrap();
        assert_eq!(g, rows);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scatter_conserves_and_checks_count() {
        let rows = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (g, _) = scatter_sparse(&rows, &mask_of(5, &[1, 4])).unwrap();
        assert_eq!(g.sum(), rows.sum());
        assert_eq!(g.row(4), &[3., 4.]);
        assert!(scatter_sparse(&rows, &mask_of(5, &[1])).is_err());
    }

    #[test]
    fn midpoint_between_two_views() {
        let v = 8;
        let mask = mask_of(v, &[0, v / 2]);
        let mut grid = Tensor::zeros(&[v, 3]);
        grid.data_mut()[..3].fill(2.0);
        grid.data_mut()[(v / 2) * 3..(v / 2) * 3 + 3].fill(6.0);
        let out = interp_baseline(&grid, &mask).unwrap();
        assert_eq!(out.row(v / 4), &[4.0, 4.0, 4.0]);
        // Wrapping side.
        assert_eq!(out.row(3 * v / 4), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn interpolation_preserves_constants_and_full_masks() {
        let mask = mask_of(9, &[2, 3, 7]);
        let l = interp_matrix(&mask).unwrap();
        for r in 0..9 {
            assert!((l.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let g = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(interp_baseline(&g, &[true; 4]).unwrap(), g);
        assert!(interp_matrix(&mask_of(5, &[2])).is_err());
    }

    #[test]
    fn zero_residual_at_init() {
        let mask = mask_of(6, &[0, 2, 5]);
        let grid = Tensor::new(vec![6, 2], (0..12).map(|i| i as f64 * 0.3).collect()).unwrap();
        let m = CompletionModel::new(6, 3, 0.5).unwrap();
        let out = m.complete(&grid, &mask).unwrap();
        assert_eq!(out, interp_baseline(&grid, &mask).unwrap());
    }

    #[test]
    fn uniform_mask_spacing() {
        assert_eq!(selected(&uniform_mask(12, 4)), vec![0, 3, 6, 9]);
        assert_eq!(selected(&uniform_mask(90, 12)).len(), 12);
    }
}
