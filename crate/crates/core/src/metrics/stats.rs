//! Binary classification metrics and the Wilcoxon signed-rank test.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClsMetrics {
    pub acc: f64,
    pub sens: f64,
    pub spec: f64,
    /// False when there were no positive labels and `sens` is reported as 0.
    pub sens_defined: bool,
    /// False when there were no negative labels and `spec` is reported as 0.
    pub spec_defined: bool,
}

pub fn cls_metrics(preds: &[u8], labels: &[u8]) -> Result<ClsMetrics> {
    if preds.is_empty() {
        return Err(Error::contract("cls_metrics", "empty input"));
    }
    if preds.len() != labels.len() {
        return Err(Error::contract(
            "cls_metrics",
            format!("{} predictions, {} labels", preds.len(), labels.len()),
        ));
    }
    if preds.iter().chain(labels).any(|&v| v > 1) {
        return Err(Error::contract("cls_metrics", "values must be 0 or 1"));
    }
    let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            _ => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { (0.0, false) } else { (a as f64 / (a + b) as f64, true) };
    let (sens, sens_defined) = ratio(tp, fneg);
    let (spec, spec_defined) = ratio(tn, fp);
    Ok(ClsMetrics {
        acc: (tp + tn) as f64 / preds.len() as f64,
        sens,
        spec,
        sens_defined,
        spec_defined,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

/// Largest sample size handled by exact enumeration in [`wilcoxon_signed_rank`].
pub const EXACT_MAX_N: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Pairs remaining after dropping zero differences.
    pub n: usize,
    pub method: WilcoxonMethod,
}

/// Nonzero differences and their average ranks by absolute value, both
/// doubled so tied ranks stay integral.
fn ranks(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<u64>)> {
    if x.len() != y.len() {
        return Err(Error::contract("wilcoxon", format!("{} vs {} samples", x.len(), y.len())));
    }
    let mut d: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::contract("wilcoxon", "all differences are zero"));
    }
    if d.len() < 5 {
        return Err(Error::contract("wilcoxon", format!("need at least 5 nonzero differences, got {}", d.len())));
    }
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut r2 = vec![0u64; d.len()];
    let mut i = 0;
    while i < d.len() {
        let mut j = i;
        while j + 1 < d.len() && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        // Average of 1-based ranks i+1..=j+1, doubled.
        for r in &mut r2[i..=j] {
            *r = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    Ok((d, r2))
}

/// Two-sided paired signed-rank test on `y - x`. Exact for
/// `n <= EXACT_MAX_N`, normal approximation otherwise.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    let n = x.iter().zip(y).filter(|(a, b)| a != b).count();
    let method = if n <= EXACT_MAX_N { WilcoxonMethod::Exact } else { WilcoxonMethod::Normal };
    wilcoxon_with(x, y, method)
}

pub fn wilcoxon_with(x: &[f64], y: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    let (d, r2) = ranks(x, y)?;
    let n = d.len();
    let w2: u64 = d.iter().zip(&r2).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let p = match method {
        WilcoxonMethod::Exact => {
            if n > 24 {
                return Err(Error::contract("wilcoxon", format!("exact enumeration over 2^{n} patterns")));
            }
            let (mut le, mut ge) = (0u64, 0u64);
            for pattern in 0u64..(1 << n) {
                let s: u64 = (0..n).filter(|k| pattern >> k & 1 == 1).map(|k| r2[k]).sum();
                le += (s <= w2) as u64;
                ge += (s >= w2) as u64;
            }
            let total = (1u64 << n) as f64;
            (2.0 * le.min(ge) as f64 / total).min(1.0)
        }
        WilcoxonMethod::Normal => {
            let nf = n as f64;
            let mean = nf * (nf + 1.0) / 4.0;
            let mut tie = 0.0;
            let mut i = 0;
            while i < n {
                let t = r2[i..].iter().take_while(|&&r| r == r2[i]).count() as f64;
                tie += t * t * t - t;
                i += t as usize;
            }
            let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
            let dev = w2 as f64 / 2.0 - mean;
            let z = (dev.abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (2.0 * (1.0 - normal.cdf(z))).min(1.0)
        }
    };
    Ok(WilcoxonResult {
        p_value: p,
        w_plus: w2 as f64 / 2.0,
        n,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        let m = cls_metrics(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((m.acc, m.sens, m.spec), (1.0, 1.0, 1.0));
    }

    #[test]
    fn always_positive_predictor() {
        let m = cls_metrics(&[1; 6], &[1, 0, 1, 0, 1, 0]).unwrap();
        assert_eq!((m.sens, m.spec), (1.0, 0.0));
        assert!(m.spec_defined);
    }

    #[test]
    fn hand_confusion_matrix() {
        // TP=3, FN=1, TN=2, FP=2.
        let preds = [1, 1, 1, 0, 0, 0, 1, 1];
        let labels = [1, 1, 1, 1, 0, 0, 0, 0];
        let m = cls_metrics(&preds, &labels).unwrap();
        assert_eq!((m.acc, m.sens, m.spec), (0.625, 0.75, 0.5));
    }

    #[test]
    fn undefined_ratios_are_flagged() {
        let m = cls_metrics(&[1, 0], &[1, 1]).unwrap();
        assert!(!m.spec_defined && m.spec == 0.0 && m.sens_defined);
        assert!(cls_metrics(&[], &[]).is_err());
        assert!(cls_metrics(&[2], &[1]).is_err());
    }

    #[test]
    fn exact_all_positive_six() {
        let x = [0.1, 0.5, 0.9, 1.3, 2.0, 2.2];
        let y: Vec<f64> = x.iter().map(|v| v + 1.0 + v * 0.1).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, WilcoxonMethod::Exact);
        assert_eq!(r.p_value, 0.03125);
        assert_eq!(wilcoxon_signed_rank(&y, &x).unwrap().p_value, r.p_value);
    }

    #[test]
    fn ties_use_average_ranks() {
        let x = [0.0; 6];
        let y = [1.0, -1.0, 2.0, 2.0, 3.0, 4.0];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        // Ranks 1.5, 1.5, 3.5, 3.5, 5, 6; positive sum excludes one 1.5.
        assert_eq!(r.w_plus, 19.5);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(wilcoxon_signed_rank(&[1.0; 6], &[1.0; 6]).is_err());
        assert!(wilcoxon_signed_rank(&[0.0; 4], &[1.0; 4]).is_err());
        assert!(wilcoxon_signed_rank(&[0.0; 6], &[1.0; 5]).is_err());
    }
}
