//! Multiple-comparison corrections and seed aggregation.

use serde::{Deserialize, Serialize};

use super::rank::mean;
use crate::error::{Error, Result};

/// Per-test significance level `alpha / m`.
pub fn bonferroni(alpha: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Domain("Bonferroni needs at least one comparison".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(alpha / m as f64)
}

/// Rejection mask at the Bonferroni level for `p_values.len()` comparisons.
pub fn bonferroni_mask(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if p_values.is_empty() {
        return Ok(Vec::new());
    }
    let level = bonferroni(alpha, p_values.len())?;
    Ok(p_values.iter().map(|&p| p <= level).collect())
}

/// Benjamini-Hochberg step-up procedure at false discovery rate `q`.
pub fn benjamini_hochberg(p_values: &[f64], q: f64) -> Result<Vec<bool>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("q {q} outside (0, 1)")));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let passing = order
        .iter()
        .enumerate()
        .filter(|(rank, &i)| p_values[i] <= (rank + 1) as f64 * q / m as f64)
        .map(|(rank, _)| rank + 1)
        .max()
        .unwrap_or(0);
    let mut mask = vec![false; m];
    for &i in &order[..passing] {
        mask[i] = true;
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single seed.
    pub std: f64,
    pub n: usize,
    pub single_seed: bool,
}

pub fn seed_aggregate(values: &[f64]) -> SeedAggregate {
    let n = values.len();
    if n == 0 {
        return SeedAggregate {
            mean: f64::NAN,
            std: 0.0,
            n: 0,
            single_seed: false,
        };
    }
    let m = mean(values);
    let std = if n > 1 {
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    SeedAggregate {
        mean: m,
        std,
        n,
        single_seed: n == 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bonferroni_examples() {
        assert_eq!(bonferroni(0.05, 25).unwrap(), 0.002);
        assert_eq!(bonferroni(0.05, 1).unwrap(), 0.05);
        assert!((bonferroni(0.01, 10).unwrap() - 0.001).abs() < 1e-18);
        assert!(bonferroni(0.05, 0).is_err());
    }

    #[test]
    fn bh_examples() {
        assert_eq!(benjamini_hochberg(&[0.001, 0.02, 0.04], 0.05).unwrap(), vec![true; 3]);
        assert_eq!(benjamini_hochberg(&[0.9, 0.9], 0.05).unwrap(), vec![false; 2]);
        assert!(benjamini_hochberg(&[], 0.05).unwrap().is_empty());
        // step-up: a later passing rank rescues an earlier failing one
        assert_eq!(
            benjamini_hochberg(&[0.04, 0.03, 0.5], 0.05).unwrap(),
            vec![false, false, false]
        );
        assert_eq!(
            benjamini_hochberg(&[0.026, 0.03, 0.01], 0.05).unwrap(),
            vec![true, true, true]
        );
    }

    #[test]
    fn seed_aggregate_examples() {
        let a = seed_aggregate(&[0.304, 0.327, 0.295]);
        assert!((a.mean - 0.308_666_666_666_666_7).abs() < 1e-12);
        assert!((a.std - 0.0165).abs() < 5e-4);
        assert_eq!(format!("{:.3}", a.mean), "0.309");
        assert_eq!(format!("{:.3}", a.std), "0.017");
        let s = seed_aggregate(&[0.5]);
        assert!(s.single_seed && s.std == 0.0 && s.mean == 0.5);
        assert_eq!(seed_aggregate(&[0.2; 4]).std, 0.0);
    }

    proptest! {
        #[test]
        fn bh_dominates_bonferroni(p in prop::collection::vec(0.0f64..=1.0, 1..40), alpha in 0.001f64..0.2) {
            let bh = benjamini_hochberg(&p, alpha).unwrap();
            let bon = bonferroni_mask(&p, alpha).unwrap();
            for (b, h) in bon.iter().zip(&bh) {
                prop_assert!(!*b || *h);
            }
        }
    }
}
