//! View-importance distribution and Gumbel-top-k subset sampling.
//!
//! The importance model is an equal-weight mixture of wrapped normals over the
//! view angle. A draw perturbs `log P` with Gumbel noise and keeps the top
//! `V_s` views; soft rows are the tempered softmax of the same scores with
//! earlier picks excluded, so gradients reach `P` while the forward pass uses
//! the discrete selection.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::completion::interp_matrix;
use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::rng;

/// Periodic images of each normal summed on either side.
pub const WRAPS: i32 = 3;
pub const DEFAULT_CENTERS: usize = 100;

#[derive(Clone, Debug)]
pub struct ImportanceModel {
    pub mu: Parameter,
    pub log_sigma: Parameter,
}

pub struct ImportanceVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl ImportanceModel {
    /// `centers` equally spaced means with common width `sigma`.
    pub fn uniform(centers: usize, sigma: f64) -> Result<Self> {
        if centers == 0 || !(sigma > 0.0) {
            return Err(Error::contract("importance", "need centers > 0 and sigma > 0"));
        }
        let step = std::f64::consts::TAU / centers as f64;
        Ok(ImportanceModel {
            mu: Parameter::new("mu", Tensor::from_vec((0..centers).map(|k| k as f64 * step).collect())),
            log_sigma: Parameter::new("log_sigma", Tensor::full(&[centers], sigma.ln())),
        })
    }

    pub fn centers(&self) -> usize {
        self.mu.value.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> ImportanceVars {
        ImportanceVars {
            mu: tape.param(&self.mu),
            log_sigma: tape.param(&self.log_sigma),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.mu, &mut self.log_sigma]
    }

    /// Differentiable pmf over the views of `geom`.
    pub fn view_pmf_var(&self, tape: &mut Tape, vars: &ImportanceVars, geom: &FanBeamGeometry) -> Result<Var> {
        let dens = tape.wrapped_mixture(vars.mu, vars.log_sigma, &geom.thetas(), WRAPS)?;
        tape.normalize(dens)
    }
}

/// `P_i ∝ Σ_k N_wrapped(θ_i; μ_k, σ_k)` on the view grid, normalized.
pub fn view_pmf(model: &ImportanceModel, geom: &FanBeamGeometry) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let p = model.view_pmf_var(&mut tape, &vars, geom)?;
    Ok(tape.value(p).data().to_vec())
}

pub fn gumbel(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// `n` standard Gumbel draws from the `(seed, key, counter)` stream.
pub fn draw_gumbels(seed: u64, key: &str, counter: u64, n: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, key, counter);
    (0..n).map(|_| gumbel(rng::open_unit(&mut r))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    /// `[V_s, V]`; row `r` is the softmax of the perturbed scores with views
    /// picked in rows `0..r` excluded.
    pub soft: Tensor,
    /// Exactly `V_s` true entries.
    pub hard: Vec<bool>,
    /// Selected views in pick order (descending score).
    pub order: Vec<usize>,
    pub gumbels: Vec<f64>,
}

impl SampleDraw {
    /// Selected views in ascending order.
    pub fn selected(&self) -> Vec<usize> {
        let mut s = self.order.clone();
        s.sort_unstable();
        s
    }

    /// Per-row exclusion masks for the soft rows.
    fn row_masks(&self) -> Vec<bool> {
        let v = self.hard.len();
        let mut masks = vec![true; self.order.len() * v];
        for r in 0..self.order.len() {
            for &prev in &self.order[..r] {
                masks[r * v + prev] = false;
            }
        }
        masks
    }
}

/// Pick order for scores `z`: descending, ties to the lower index.
fn top_order(z: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Gumbel-top-`vs` draw from pmf `p` with the given perturbations.
pub fn gumbel_topk_sample(p: &[f64], vs: usize, tau: f64, gumbels: &[f64]) -> Result<SampleDraw> {
    let v = p.len();
    if vs == 0 || vs > v {
        return Err(Error::contract("gumbel_topk_sample", format!("V_s = {vs} with V = {v}")));
    }
    if !(tau > 0.0) {
        return Err(Error::contract("gumbel_topk_sample", "tau must be positive"));
    }
    if gumbels.len() != v {
        return Err(Error::contract("gumbel_topk_sample", "one Gumbel value per view"));
    }
    if p.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::contract("gumbel_topk_sample", "pmf entries must be positive"));
    }
    let z: Vec<f64> = p.iter().zip(gumbels).map(|(pi, g)| (pi.ln() + g) / tau).collect();
    let order = top_order(&z, vs);
    let mut hard = vec![false; v];
    for &i in &order {
        hard[i] = true;
    }
    let mut draw = SampleDraw {
        soft: Tensor::zeros(&[vs, v]),
        hard,
        order,
        gumbels: gumbels.to_vec(),
    };
    let masks = draw.row_masks();
    let mut soft = vec![0.0; vs * v];
    for r in 0..vs {
        let row = &masks[r * v..(r + 1) * v];
        let mx = z.iter().zip(row).filter(|(_, &m)| m).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..v {
            if row[i] {
                soft[r * v + i] = (z[i] - mx).exp();
                total += soft[r * v + i];
            }
        }
        soft[r * v..(r + 1) * v].iter_mut().for_each(|s| *s /= total);
    }
    draw.soft = Tensor::matrix(vs, v, soft)?;
    Ok(draw)
}

/// Soft rows of `draw` recomputed on the tape from a differentiable pmf.
pub fn soft_rows(tape: &mut Tape, pmf: Var, draw: &SampleDraw, tau: f64) -> Result<Var> {
    let v = draw.hard.len();
    let vs = draw.order.len();
    if tape.shape(pmf) != [v] {
        return Err(Error::contract("soft_rows", "pmf length differs from draw"));
    }
    let logp = tape.log(pmf)?;
    let logp = tape.reshape(logp, &[1, v])?;
    let ones = tape.constant(Tensor::full(&[vs, 1], 1.0));
    let tiled = tape.matmul(ones, logp)?;
    let g = Tensor::matrix(vs, v, (0..vs).flat_map(|_| draw.gumbels.iter().copied()).collect())?;
    let g = tape.constant(g);
    let z = tape.add(tiled, g)?;
    let z = tape.scale(z, 1.0 / tau)?;
    tape.masked_softmax(z, &draw.row_masks())
}

/// Rows of `sino_full` at the picked views (pick order). The forward value
/// is the hard selection; the backward pass flows through `soft · sino_full`.
pub fn straight_through_subsample(tape: &mut Tape, sino_full: Var, soft: Var, draw: &SampleDraw) -> Result<Var> {
    let full = tape.value(sino_full);
    let (v, d) = full
        .dims2()
        .ok_or_else(|| Error::contract("straight_through_subsample", "sinogram must be rank 2"))?;
    if v != draw.hard.len() {
        return Err(Error::contract("straight_through_subsample", "view count differs from draw"));
    }
    let mut hard = Vec::with_capacity(draw.order.len() * d);
    for &j in &draw.order {
        hard.extend_from_slice(full.row(j));
    }
    let hard = Tensor::matrix(draw.order.len(), d, hard)?;
    let mixed = tape.matmul(soft, sino_full)?;
    tape.straight_through(mixed, hard)
}

/// Full-grid interpolation baseline of a draw with a straight-through path
/// to the soft view occupancy `c = Σ_r soft_r`.
///
/// Forward: `B = L_S · (S ⊙ y)`, linear interpolation from the hard picks.
/// Backward: through `B + Σ_u c_u Δ_u`, where `Δ_u` is the change of the
/// interpolated sinogram when view `u` is measured rather than interpolated,
/// the other picks held fixed. A view is credited both for its own row and
/// for sharpening the interpolation of its missing neighbours.
pub fn sampled_baseline(tape: &mut Tape, sino_full: &Tensor, soft: Var, draw: &SampleDraw) -> Result<Var> {
    let (v, d) = sino_full
        .dims2()
        .ok_or_else(|| Error::contract("sampled_baseline", "sinogram must be rank 2"))?;
    if v != draw.hard.len() {
        return Err(Error::contract("sampled_baseline", "view count differs from draw"));
    }
    let base = interp_fill(sino_full, &draw.hard)?;
    // Row u holds the change of the interpolated sinogram when view u is
    // measured rather than interpolated, with the rest of the draw fixed.
    let mut delta = vec![0.0; v * v * d];
    let mut flipped = draw.hard.clone();
    for u in 0..v {
        flipped[u] = !flipped[u];
        let row = &mut delta[u * v * d..(u + 1) * v * d];
        if flipped.iter().filter(|&&m| m).count() >= 2 {
            let other = interp_fill(sino_full, &flipped)?;
            let (with, without) = if draw.hard[u] { (&base, &other) } else { (&other, &base) };
            for ((r, a), b) in row.iter_mut().zip(with.data()).zip(without.data()) {
                *r = a - b;
            }
        } else {
            // Too few views left to interpolate; credit the own row only.
            for k in 0..d {
                row[u * d + k] = sino_full.data()[u * d + k] - base.data()[u * d + k];
            }
        }
        flipped[u] = !flipped[u];
    }
    let vs = draw.order.len();
    let ones_r = tape.constant(Tensor::full(&[1, vs], 1.0));
    let occ = tape.matmul(ones_r, soft)?;
    let delta = tape.constant(Tensor::matrix(v, v * d, delta)?);
    let credit = tape.matmul(occ, delta)?;
    let credit = tape.reshape(credit, &[v, d])?;
    let base_c = tape.constant(base.clone());
    let soft_base = tape.add(base_c, credit)?;
    tape.straight_through(soft_base, base)
}

/// Periodic linear interpolation of the masked rows of `sino`, measured rows
/// kept as is.
fn interp_fill(sino: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (v, d) = (mask.len(), sino.shape()[1]);
    let l = interp_matrix(mask)?;
    let mut out = vec![0.0; v * d];
    for j in 0..v {
        for (u, &w) in l.data()[j * v..(j + 1) * v].iter().enumerate() {
            if w != 0.0 {
                let src = &sino.data()[u * d..(u + 1) * d];
                for (o, s) in out[j * d..(j + 1) * d].iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
    Tensor::matrix(v, d, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Strategy {
    pub task_id: String,
    pub mask: Vec<bool>,
    /// Selected view indices, ascending.
    pub indices: Vec<usize>,
    pub angles_deg: Vec<f64>,
}

impl Strategy {
    pub fn from_indices(task_id: &str, mut indices: Vec<usize>, geom: &FanBeamGeometry) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.iter().any(|&i| i >= geom.views) {
            return Err(Error::contract("strategy", "view index out of range"));
        }
        let mut mask = vec![false; geom.views];
        for &i in &indices {
            mask[i] = true;
        }
        Ok(Strategy {
            task_id: task_id.to_string(),
            mask,
            angles_deg: indices.iter().map(|&i| geom.angle_deg(i)).collect(),
            indices,
        })
    }

    pub fn views(&self) -> usize {
        self.mask.len()
    }

    /// `task_id V V_s`, then `index angle_deg` per selected view.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.task_id, self.views(), self.indices.len());
        for (i, a) in self.indices.iter().zip(&self.angles_deg) {
            writeln!(s, "{i} {a}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format { offset: line, msg: format!("strategy line {}: {msg}", line + 1) };
        let mut lines = text.lines();
        let head: Vec<&str> = lines.next().ok_or_else(|| bad(0, "empty file"))?.split_whitespace().collect();
        let [task_id, v, vs] = head[..] else {
            return Err(bad(0, "expected 'task_id V V_s'"));
        };
        let v: usize = v.parse().map_err(|_| bad(0, "V is not an integer"))?;
        let vs: usize = vs.parse().map_err(|_| bad(0, "V_s is not an integer"))?;
        let mut indices = Vec::new();
        let mut angles = Vec::new();
        for (n, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [i, a] = parts[..] else {
                return Err(bad(n + 1, "expected 'index angle_deg'"));
            };
            let i: usize = i.parse().map_err(|_| bad(n + 1, "bad index"))?;
            let a: f64 = a.parse().map_err(|_| bad(n + 1, "bad angle"))?;
            if i >= v || indices.last().is_some_and(|&p| p >= i) {
                return Err(bad(n + 1, "indices must be ascending and below V"));
            }
            indices.push(i);
            angles.push(a);
        }
        if indices.len() != vs {
            return Err(bad(0, &format!("header says {vs} views, found {}", indices.len())));
        }
        let mut mask = vec![false; v];
        for &i in &indices {
            mask[i] = true;
        }
        Ok(Strategy { task_id: task_id.to_string(), mask, indices, angles_deg: angles })
    }
}

/// Deterministic deployment strategy: the `vs` most probable views, ties to
/// the lower index.
pub fn extract_strategy(task_id: &str, model: &ImportanceModel, vs: usize, geom: &FanBeamGeometry) -> Result<Strategy> {
    let p = view_pmf(model, geom)?;
    strategy_from_pmf(task_id, &p, vs, geom)
}

pub fn strategy_from_pmf(task_id: &str, p: &[f64], vs: usize, geom: &FanBeamGeometry) -> Result<Strategy> {
    if vs == 0 || vs > p.len() || p.len() != geom.views {
        return Err(Error::contract("extract_strategy", format!("V_s = {vs}, pmf length {}", p.len())));
    }
    Strategy::from_indices(task_id, top_order(p, vs), geom)
}

pub fn export_strategy(strategy: &Strategy, path: &Path) -> Result<()> {
    std::fs::write(path, strategy.to_text()).map_err(|e| Error::io(path, e))
}

pub fn import_strategy(path: &Path) -> Result<Strategy> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Strategy::parse(&text).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_of_half() {
        assert!((gumbel(0.5) - 0.366_512_920_581_664_3).abs() < 1e-15);
    }

    #[test]
    fn uniform_init_is_flat() {
        let g = FanBeamGeometry::new(90, 16, 16).unwrap();
        let p = view_pmf(&ImportanceModel::uniform(100, 0.3).unwrap(), &g).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| (x - 1.0 / 90.0).abs() < 1e-3));
    }

    #[test]
    fn narrow_center_peaks_at_nearest_view() {
        let g = FanBeamGeometry::new(12, 8, 8).unwrap();
        let mut m = ImportanceModel::uniform(3, 0.05).unwrap();
        m.mu.value = Tensor::from_vec(vec![1.6, 1.6, 1.6]);
        let p = view_pmf(&m, &g).unwrap();
        let arg = (0..12).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(arg, 3);
    }

    #[test]
    fn full_subset_and_tau_invariance() {
        let p = [0.4, 0.3, 0.2, 0.1];
        let g = draw_gumbels(1, "t", 0, 4);
        assert!(gumbel_topk_sample(&p, 4, 1.0, &g).unwrap().hard.iter().all(|&h| h));
        let a = gumbel_topk_sample(&p, 2, 1.0, &g).unwrap();
        let b = gumbel_topk_sample(&p, 2, 0.1, &g).unwrap();
        assert_eq!(a.hard, b.hard);
        assert_ne!(a.soft, b.soft);
        for r in 0..2 {
            assert!((a.soft.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(a.soft.row(r)[a.order[r]], a.soft.row(r).iter().cloned().fold(0.0, f64::max));
        }
        assert_eq!(a.soft.row(1)[a.order[0]], 0.0);
    }

    #[test]
    fn tape_soft_rows_match_values() {
        let p = [0.4, 0.3, 0.2, 0.1];
        let g = draw_gumbels(3, "t", 2, 4);
        let d = gumbel_topk_sample(&p, 3, 0.7, &g).unwrap();
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::from_vec(p.to_vec()));
        let s = soft_rows(&mut tape, pv, &d, 0.7).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(d.soft.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn strategy_round_trip_and_ties() {
        let g = FanBeamGeometry::new(8, 8, 8).unwrap();
        let s = strategy_from_pmf("head", &[0.125; 8], 3, &g).unwrap();
        assert_eq!(s.indices, vec![0, 1, 2]);
        let text = s.to_text();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(Strategy::parse(&text).unwrap(), s);
        assert!(Strategy::parse("head 8 2\n3 135\n1 45\n").is_err());
    }
}
