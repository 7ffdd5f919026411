//! Wilcoxon signed-rank, Kruskal-Wallis, and Cohen's d.

use serde::{Deserialize, Serialize};

use super::rank::{mean, midranks, tie_groups};
use super::special::{chi_square_sf, normal_two_sided};
use crate::error::{Error, Result};

/// Largest sample (after zero removal) for which the exact null is used.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    /// Exact for `n <= 25`, normal approximation above.
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`; `None` when every difference is zero.
    pub statistic: Option<f64>,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

impl WilcoxonResult {
    pub fn is_degenerate(&self) -> bool {
        self.statistic.is_none()
    }
}

/// Paired Wilcoxon signed-rank test on `after - before`, two-sided.
pub fn wilcoxon_signed_rank(before: &[f64], after: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(before, after, WilcoxonMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(
    before: &[f64],
    after: &[f64],
    method: WilcoxonMethod,
) -> Result<WilcoxonResult> {
    if before.len() != after.len() {
        return Err(Error::Shape(format!(
            "paired samples of length {} and {}",
            before.len(),
            after.len()
        )));
    }
    let diffs: Vec<f64> = before
        .iter()
        .zip(after)
        .map(|(b, a)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("non-finite paired difference".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: None,
            w_plus: 0.0,
            w_minus: 0.0,
            n: 0,
            p_value: 1.0,
            exact: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(w_minus);
    let exact = match method {
        WilcoxonMethod::Auto => n <= WILCOXON_EXACT_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p_value = if exact {
        exact_signed_rank_p(&ranks, w)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let ties: f64 = tie_groups(&abs).iter().map(|&t| (t * t * t - t) as f64).sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        if var > 0.0 {
            let z = ((w - mu).abs() - 0.5).max(0.0) / var.sqrt();
            normal_two_sided(z)
        } else {
            1.0
        }
    };
    Ok(WilcoxonResult {
        statistic: Some(w),
        w_plus,
        w_minus,
        n,
        p_value,
        exact,
    })
}

/// Exact two-sided p for `min(W+, W-) = w` over all `2^n` sign assignments
/// of the given (mid-)ranks. Ranks are doubled so half-ranks become integers.
fn exact_signed_rank_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let target = (2.0 * w).round() as usize;
    let below: f64 = counts[..=target.min(max)].iter().sum();
    let total = 2f64.powi(ranks.len() as i32);
    (2.0 * below / total).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalResult {
    pub h: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Kruskal-Wallis H test with tie correction.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalResult> {
    if groups.len() < 2 {
        return Err(Error::Domain("Kruskal-Wallis needs at least two groups".into()));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Domain("Kruskal-Wallis group is empty".into()));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let total = pooled.len();
    if total < 3 {
        return Err(Error::Domain("Kruskal-Wallis needs n >= 3".into()));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite observation".into()));
    }
    let ranks = midranks(&pooled);
    let nf = total as f64;
    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let raw = 12.0 / (nf * (nf + 1.0)) * sum - 3.0 * (nf + 1.0);
    let ties: f64 = tie_groups(&pooled).iter().map(|&t| (t * t * t - t) as f64).sum();
    let correction = 1.0 - ties / (nf * nf * nf - nf);
    let h = if correction > 0.0 { (raw / correction).max(0.0) } else { 0.0 };
    let df = groups.len() - 1;
    Ok(KruskalResult {
        h,
        df,
        p_value: chi_square_sf(h, df as f64),
    })
}

fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Standardized mean difference `(mean(a) - mean(b)) / pooled_sd`.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::UndefinedEffect("each group needs at least two values".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = ((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b)) / (na + nb - 2.0);
    if !(pooled > 0.0) {
        return Err(Error::UndefinedEffect("pooled variance is zero".into()));
    }
    Ok((mean(a) - mean(b)) / pooled.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilcoxon_examples() {
        let before = [1.0, 2.0, 3.0, 4.0];
        let r = wilcoxon_signed_rank(&before, &before).unwrap();
        assert!(r.is_degenerate());
        assert_eq!(r.p_value, 1.0);

        let zeros = [0.0; 5];
        let r = wilcoxon_signed_rank(&zeros, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(r.statistic, Some(0.0));
        assert!((r.p_value - 2.0 / 32.0).abs() < 1e-15);

        let r = wilcoxon_signed_rank(&[0.0; 4], &[1.0, -1.0, 2.0, -2.0]).unwrap();
        assert_eq!(r.w_plus, r.w_minus);
        assert_eq!(r.p_value, 1.0);

        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn wilcoxon_normal_branch_is_sane() {
        let before = vec![0.0; 40];
        let after: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&before, &after).unwrap();
        assert!(!r.exact);
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn kruskal_examples() {
        let r = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        // 12/42 * (36/3 + 225/3) - 21
        assert!((r.h - (12.0 / 42.0 * 87.0 - 21.0)).abs() < 1e-12);
        assert!((r.h - 3.857).abs() < 1e-3);
        let r = kruskal_wallis(&[vec![2.0; 3], vec![2.0; 4]]).unwrap();
        assert_eq!(r.h, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(kruskal_wallis(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn cohens_d_examples() {
        let b = [-1.0, 0.0, 1.0];
        let a: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
        assert!((cohens_d(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cohens_d(&b, &b).unwrap(), 0.0);
        assert_eq!(cohens_d(&b, &a).unwrap(), -cohens_d(&a, &b).unwrap());
        assert!(cohens_d(&[1.0, 1.0], &[1.0, 1.0]).is_err());
    }
}
