//! Rank correlations: Spearman, Kendall tau-b, and partial Spearman.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rank::{midranks, pearson, tie_groups};
use super::regression::residualize;
use super::special::{normal_two_sided, student_t_two_sided};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub coefficient: f64,
    pub p_value: f64,
    pub n: usize,
}

fn check_inputs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("need n >= 3, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite input".into()));
    }
    for (name, v) in [("x", x), ("y", y)] {
        if v.iter().all(|&a| a == v[0]) {
            return Err(Error::UndefinedCorrelation(format!("{name} is constant")));
        }
    }
    Ok(())
}

/// Two-sided p-value of a correlation coefficient via the t approximation.
fn t_test_p(r: f64, df: f64) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    student_t_two_sided(t, df)
}

/// Spearman rank correlation with a t-approximation p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_inputs(x, y)?;
    let rho = pearson(&midranks(x), &midranks(y))?;
    let n = x.len();
    Ok(CorrelationResult {
        coefficient: rho,
        p_value: t_test_p(rho, (n - 2) as f64),
        n,
    })
}

/// Spearman correlation with a permutation p-value, for small samples.
///
/// The p-value is `(1 + #{|rho_perm| >= |rho|}) / (iterations + 1)`.
pub fn spearman_permutation(
    x: &[f64],
    y: &[f64],
    iterations: usize,
    seed: u64,
) -> Result<CorrelationResult> {
    check_inputs(x, y)?;
    let rx = midranks(x);
    let mut ry = midranks(y);
    let observed = pearson(&rx, &ry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..iterations {
        ry.shuffle(&mut rng);
        if pearson(&rx, &ry)?.abs() >= observed.abs() - 1e-12 {
            extreme += 1;
        }
    }
    Ok(CorrelationResult {
        coefficient: observed,
        p_value: (1 + extreme) as f64 / (iterations + 1) as f64,
        n: x.len(),
    })
}

/// Counts inversions of `v` while merge-sorting it in place.
fn count_inversions(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        count_inversions(left, bl) + count_inversions(right, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

fn pairs(t: usize) -> u64 {
    (t as u64 * (t as u64).saturating_sub(1)) / 2
}

/// Kendall tau-b (tie-corrected), O(n log n) via Knight's algorithm.
///
/// The p-value uses the normal approximation to the score `S` with the
/// tie-corrected variance.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_inputs(x, y)?;
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    // joint ties: runs equal in both x and y
    let mut joint = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && x[order[j]] == x[order[i]] && y[order[j]] == y[order[i]] {
            j += 1;
        }
        joint += pairs(j - i);
        i = j;
    }

    let x_groups = tie_groups(x);
    let y_groups = tie_groups(y);
    let x_ties: u64 = x_groups.iter().map(|&t| pairs(t)).sum();
    let y_ties: u64 = y_groups.iter().map(|&t| pairs(t)).sum();

    let mut ys: Vec<f64> = order.iter().map(|&k| y[k]).collect();
    let mut buf = vec![0.0; n];
    let swaps = count_inversions(&mut ys, &mut buf);

    let total = pairs(n);
    let s = total as f64 - x_ties as f64 - y_ties as f64 + joint as f64 - 2.0 * swaps as f64;
    let denom = ((total - x_ties) as f64 * (total - y_ties) as f64).sqrt();
    let tau = (s / denom).clamp(-1.0, 1.0);

    let nf = n as f64;
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let term = |g: &[usize], f: fn(f64) -> f64| g.iter().map(|&t| f(t as f64)).sum::<f64>();
    let vt = term(&x_groups, |t| t * (t - 1.0) * (2.0 * t + 5.0));
    let vu = term(&y_groups, |t| t * (t - 1.0) * (2.0 * t + 5.0));
    let v1 = term(&x_groups, |t| t * (t - 1.0)) * term(&y_groups, |t| t * (t - 1.0)) / (2.0 * nf * (nf - 1.0));
    let v2 = term(&x_groups, |t| t * (t - 1.0) * (t - 2.0)) * term(&y_groups, |t| t * (t - 1.0) * (t - 2.0))
        / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    let var_s = (v0 - vt - vu) / 18.0 + v1 + v2;
    let p_value = if var_s > 0.0 {
        normal_two_sided(s / var_s.sqrt())
    } else {
        1.0
    };
    Ok(CorrelationResult {
        coefficient: tau,
        p_value,
        n,
    })
}

/// Spearman correlation of `x` and `y` after removing the (ranked) controls.
///
/// `controls` holds one column per covariate. Each of `x`, `y` and the
/// controls is rank-transformed; ranked `x` and `y` are residualized on the
/// ranked controls plus an intercept and the residuals are correlated. The
/// p-value uses `n - 2 - k` degrees of freedom.
pub fn partial_spearman(x: &[f64], y: &[f64], controls: &[Vec<f64>]) -> Result<CorrelationResult> {
    check_inputs(x, y)?;
    let n = x.len();
    let k = controls.len();
    if n <= k + 2 {
        return Err(Error::Domain(format!("n = {n} is too small for {k} controls")));
    }
    if let Some(c) = controls.iter().find(|c| c.len() != n) {
        return Err(Error::Shape(format!("control of length {} for n = {n}", c.len())));
    }
    let ranked: Vec<Vec<f64>> = controls.iter().map(|c| midranks(c)).collect();
    let rx = residual_ranks(x, &ranked)?;
    let ry = residual_ranks(y, &ranked)?;
    let r = pearson(&rx, &ry)
        .map_err(|_| Error::Collinearity("residuals have no variance left".into()))?;
    Ok(CorrelationResult {
        coefficient: r,
        p_value: t_test_p(r, (n - 2 - k) as f64),
        n,
    })
}

/// Residualized ranks of `v`; fails when the controls explain (almost) all of it.
fn residual_ranks(v: &[f64], ranked_controls: &[Vec<f64>]) -> Result<Vec<f64>> {
    let ranks = midranks(v);
    let resid = residualize(&ranks, ranked_controls)?;
    let m = ranks.iter().sum::<f64>() / ranks.len() as f64;
    let total: f64 = ranks.iter().map(|r| (r - m).powi(2)).sum();
    let left: f64 = resid.iter().map(|r| r * r).sum();
    if left <= 1e-20 * total {
        return Err(Error::Collinearity("controls fully determine a ranked variable".into()));
    }
    Ok(resid)
}
