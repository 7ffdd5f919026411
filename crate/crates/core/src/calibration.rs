//! Prediction sharpness and calibration metrics.

use serde::{Deserialize, Serialize};

use crate::annotation::distribution_entropy;
use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 10;

const SIMPLEX_TOL: f64 = 1e-6;

fn check_simplex(dist: &[f64]) -> Result<()> {
    if dist.is_empty() {
        return Err(Error::Domain("empty probability vector".into()));
    }
    let sum: f64 = dist.iter().sum();
    if dist.iter().any(|q| !(*q >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain(format!("not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// Entropy (nats) of a predicted distribution.
pub fn prediction_entropy(dist: &[f64]) -> Result<f64> {
    check_simplex(dist)?;
    Ok(distribution_entropy(dist))
}

fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &q) in dist.iter().enumerate() {
        if q > dist[best] {
            best = i;
        }
    }
    best
}

/// Bin index for a confidence on `[0, 1]` split into `bins` equal-width bins.
/// Values on an interior edge go to the lower bin; 1.0 lands in the last one.
fn confidence_bin(conf: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut j = ((conf * b).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    if j > 0 && conf <= j as f64 / b {
        j -= 1;
    }
    j
}

/// Expected calibration error with equal-width confidence bins.
pub fn ece(dists: &[Vec<f64>], golds: &[usize], bins: usize) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::EmptyInput("ECE needs predictions"));
    }
    if dists.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} predictions but {} labels",
            dists.len(),
            golds.len()
        )));
    }
    if bins == 0 {
        return Err(Error::Domain("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (dist, &gold) in dists.iter().zip(golds) {
        check_simplex(dist)?;
        let pred = argmax(dist);
        let conf = dist[pred];
        let b = confidence_bin(conf, bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == gold {
            correct[b] += 1;
        }
    }
    let n = dists.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub label: String,
    pub n: usize,
    pub mean_prediction_entropy: f64,
    pub mean_max_confidence: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: usize,
    pub overall: CalibrationRow,
    pub by_category: Vec<CalibrationRow>,
    /// Requested categories that had no examples and were left out.
    pub omitted: Vec<String>,
}

fn row(label: &str, dists: &[&Vec<f64>], golds: &[usize], bins: usize) -> Result<CalibrationRow> {
    let owned: Vec<Vec<f64>> = dists.iter().map(|d| (*d).clone()).collect();
    let n = dists.len() as f64;
    let mut h = 0.0;
    let mut conf = 0.0;
    for d in dists {
        h += prediction_entropy(d)?;
        conf += d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(CalibrationRow {
        label: label.to_string(),
        n: dists.len(),
        mean_prediction_entropy: h / n,
        mean_max_confidence: conf / n,
        ece: ece(&owned, golds, bins)?,
    })
}

/// Calibration metrics overall and for each label in `order`.
///
/// `categories[i]` names the group of example `i`; labels in `order` with no
/// examples are reported in `omitted`.
pub fn calibration_by_category(
    dists: &[Vec<f64>],
    golds: &[usize],
    categories: &[String],
    order: &[String],
    bins: usize,
) -> Result<CalibrationReport> {
    if dists.len() != categories.len() || dists.len() != golds.len() {
        return Err(Error::Shape("calibration inputs are not aligned".into()));
    }
    let all: Vec<&Vec<f64>> = dists.iter().collect();
    let overall = row("overall", &all, golds, bins)?;
    let mut by_category = Vec::new();
    let mut omitted = Vec::new();
    for label in order {
        let idx: Vec<usize> = (0..dists.len()).filter(|&i| &categories[i] == label).collect();
        if idx.is_empty() {
            omitted.push(label.clone());
            continue;
        }
        let d: Vec<&Vec<f64>> = idx.iter().map(|&i| &dists[i]).collect();
        let g: Vec<usize> = idx.iter().map(|&i| golds[i]).collect();
        by_category.push(row(label, &d, &g, bins)?);
    }
    Ok(CalibrationReport {
        bins,
        overall,
        by_category,
        omitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::entropy;
    use proptest::prelude::*;

    #[test]
    fn entropy_examples() {
        let third = 1.0 / 3.0;
        assert!((prediction_entropy(&[third; 3]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(prediction_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((prediction_entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!(prediction_entropy(&[0.5, 0.6]).is_err());
        assert!(prediction_entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn matches_annotation_entropy() {
        for counts in [[1u32, 2, 1], [5, 0, 5], [7, 1, 2]] {
            let total: u32 = counts.iter().sum();
            let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
            assert!((prediction_entropy(&p).unwrap() - entropy(&counts).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn ece_examples() {
        let confident = vec![vec![1.0, 0.0, 0.0]; 4];
        assert_eq!(ece(&confident, &[0; 4], 10).unwrap(), 0.0);

        // three uniform predictions; argmax picks class 0, right one time in three
        let third = 1.0 / 3.0;
        let uniform = vec![vec![third; 3]; 3];
        assert!(ece(&uniform, &[0, 1, 2], 10).unwrap() < 1e-12);

        let two = vec![vec![0.8, 0.1, 0.1]; 2];
        assert!((ece(&two, &[0, 1], 10).unwrap() - 0.3).abs() < 1e-12);

        assert!(matches!(ece(&[], &[], 10), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn bin_edges() {
        assert_eq!(confidence_bin(1.0, 10), 9);
        assert_eq!(confidence_bin(0.3, 10), 2);
        assert_eq!(confidence_bin(0.30000001, 10), 3);
        assert_eq!(confidence_bin(0.0, 10), 0);
        assert_eq!(confidence_bin(0.55, 1), 0);
    }

    #[test]
    fn by_category_examples() {
        let d = vec![vec![0.9, 0.05, 0.05], vec![0.2, 0.7, 0.1]];
        let g = vec![0, 1];
        let order: Vec<String> = ["clean", "ambiguous", "contested"].map(String::from).to_vec();
        let cats = vec!["clean".to_string(); 2];
        let r = calibration_by_category(&d, &g, &cats, &order, 10).unwrap();
        assert_eq!(r.by_category.len(), 1);
        assert_eq!(r.omitted, vec!["ambiguous".to_string(), "contested".to_string()]);
        let mut clean = r.by_category[0].clone();
        clean.label = "overall".into();
        assert_eq!(clean, r.overall);

        let d2: Vec<Vec<f64>> = d.iter().chain(&d).cloned().collect();
        let g2 = vec![0, 1, 0, 1];
        let cats2: Vec<String> = ["clean", "clean", "contested", "contested"].map(String::from).to_vec();
        let r = calibration_by_category(&d2, &g2, &cats2, &order, 10).unwrap();
        let (a, b) = (&r.by_category[0], &r.by_category[1]);
        assert_eq!(
            (a.n, a.ece, a.mean_max_confidence, a.mean_prediction_entropy),
            (b.n, b.ece, b.mean_max_confidence, b.mean_prediction_entropy)
        );
    }

    #[test]
    fn overconfident_contested_subset() {
        let mut d = Vec::new();
        let mut g = Vec::new();
        let mut cats = Vec::new();
        for i in 0..20 {
            // clean: confident and right
            d.push(vec![0.95, 0.03, 0.02]);
            g.push(0);
            cats.push("clean".to_string());
            // contested: confident and usually wrong
            d.push(vec![0.05, 0.9, 0.05]);
            g.push(if i % 4 == 0 { 1 } else { 2 });
            cats.push("contested".to_string());
        }
        let order: Vec<String> = ["clean", "contested"].map(String::from).to_vec();
        let r = calibration_by_category(&d, &g, &cats, &order, 10).unwrap();
        assert!(r.by_category[1].ece > r.by_category[0].ece);
    }

    proptest! {
        /// Each bin gets examples whose confidence equals its accuracy by construction.
        #[test]
        fn perfectly_calibrated_sets_have_zero_ece(groups in prop::collection::vec((1usize..10, 1usize..6), 1..6)) {
            let mut dists = Vec::new();
            let mut golds = Vec::new();
            for (size_factor, k) in groups {
                // k correct out of every 5 at confidence k/5, class 0 predicted
                let conf = k as f64 / 5.0;
                prop_assume!(conf > 1.0 / 3.0);
                let rest = (1.0 - conf) / 2.0;
                for rep in 0..size_factor {
                    for j in 0..5 {
                        dists.push(vec![conf, rest, rest]);
                        golds.push(if j < k { 0 } else { 1 + (rep % 2) });
                    }
                }
            }
            prop_assert!(ece(&dists, &golds, 10).unwrap() < 1e-12);
        }

        #[test]
        fn ece_is_order_invariant(seed in 0u64..1000) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut items: Vec<(Vec<f64>, usize)> = (0..30)
                .map(|_| {
                    let a: f64 = rng.random_range(0.0..1.0);
                    let b: f64 = rng.random_range(0.0..1.0 - a);
                    (vec![a, b, 1.0 - a - b], rng.random_range(0..3))
                })
                .collect();
            let before = ece(
                &items.iter().map(|i| i.0.clone()).collect::<Vec<_>>(),
                &items.iter().map(|i| i.1).collect::<Vec<_>>(),
                10,
            ).unwrap();
            items.shuffle(&mut rng);
            let after = ece(
                &items.iter().map(|i| i.0.clone()).collect::<Vec<_>>(),
                &items.iter().map(|i| i.1).collect::<Vec<_>>(),
                10,
            ).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
        }
    }
}
