//! Synthetic probe and bulk sets with controlled annotation entropy.
//!
//! Each probe example draws a latent annotator distribution `p` from a
//! symmetric Dirichlet, then `K` annotator votes from `p`. Its features sit at
//! the `p`-weighted mix of class centroids plus Gaussian noise, so contested
//! examples land between class regions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::config::ToyConfig;
use super::stream;
use crate::annotation::{distribution_entropy, entropy, majority_label, AnnotationRecord, EntropyCategory};
use crate::error::{Error, Result};

pub(crate) const DATA_STREAM: u64 = 1;
pub(crate) const SPLIT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub uid: String,
    pub features: Vec<f64>,
    /// Latent annotator distribution.
    pub p: Vec<f64>,
    pub counts: Vec<u32>,
    pub gold: usize,
    pub tier: EntropyCategory,
    /// Nuisance covariate standing in for sentence length.
    pub length: u32,
}

impl SyntheticExample {
    /// Empirical vote distribution `counts / K`.
    pub fn vote_distribution(&self) -> Vec<f64> {
        let total: u32 = self.counts.iter().sum();
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    pub fn to_record(&self) -> AnnotationRecord {
        AnnotationRecord {
            uid: self.uid.clone(),
            counts: self.counts.clone(),
            gold: self.gold,
            text: Some(serde_json::json!({ "length": self.length })),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub probe: Vec<SyntheticExample>,
    pub bulk: Vec<SyntheticExample>,
}

impl ToyDataset {
    pub fn probe_records(&self) -> Vec<AnnotationRecord> {
        self.probe.iter().map(SyntheticExample::to_record).collect()
    }
}

/// Class centroids on scaled basis vectors, `separation` apart pairwise.
pub fn centroids(config: &ToyConfig) -> Vec<Vec<f64>> {
    let scale = config.centroid_separation / std::f64::consts::SQRT_2;
    (0..config.num_classes)
        .map(|c| {
            let mut v = vec![0.0; config.feature_dim];
            v[c] = scale;
            v
        })
        .collect()
}

fn tier_band(config: &ToyConfig, tier: EntropyCategory) -> (f64, f64) {
    let ceiling = (config.num_classes as f64).ln();
    match tier {
        EntropyCategory::Clean => (0.0, config.clean_threshold),
        EntropyCategory::Ambiguous => (config.clean_threshold, config.contested_threshold),
        EntropyCategory::Contested => (config.contested_threshold, ceiling + 1e-12),
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, dim: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 {
            return draws.iter().map(|g| g / sum).collect();
        }
    }
}

fn multinomial(rng: &mut ChaCha8Rng, trials: u32, p: &[f64]) -> Vec<u32> {
    let mut counts = vec![0u32; p.len()];
    for _ in 0..trials {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = p.len() - 1;
        for (c, &pc) in p.iter().enumerate() {
            acc += pc;
            if u < acc {
                pick = c;
                break;
            }
        }
        counts[pick] += 1;
    }
    counts
}

fn features(rng: &mut ChaCha8Rng, config: &ToyConfig, mu: &[Vec<f64>], p: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; config.feature_dim];
    for (pc, m) in p.iter().zip(mu) {
        for (xi, mi) in x.iter_mut().zip(m) {
            *xi += pc * mi;
        }
    }
    if config.feature_noise > 0.0 {
        let noise = Normal::new(0.0, config.feature_noise).expect("finite noise");
        for xi in x.iter_mut() {
            *xi += noise.sample(rng);
        }
    }
    x
}

/// Splits `n` items across tiers by largest remainder so counts are exact.
fn tier_counts(n: usize, shares: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Deterministic probe and bulk sets for `config` and `seed`.
pub fn generate_dataset(config: &ToyConfig, seed: u64) -> Result<ToyDataset> {
    config.validate()?;
    let mut rng = stream(seed, DATA_STREAM);
    let mu = centroids(config);
    let c = config.num_classes;

    let per_tier = tier_counts(config.probe_size, &config.tier_proportions);
    let mut tiers: Vec<EntropyCategory> = EntropyCategory::ALL
        .iter()
        .zip(per_tier)
        .flat_map(|(&t, n)| std::iter::repeat_n(t, n))
        .collect();
    // interleave tiers so uid order carries no tier information
    for i in (1..tiers.len()).rev() {
        let j = rng.random_range(0..=i);
        tiers.swap(i, j);
    }

    let mut probe = Vec::with_capacity(config.probe_size);
    for (i, tier) in tiers.into_iter().enumerate() {
        let (lo, hi) = tier_band(config, tier);
        let alpha = config.tier_concentrations[tier.index()];
        let mut accepted = None;
        for _ in 0..config.max_rejection_attempts {
            let p = dirichlet(&mut rng, alpha, c);
            let hp = distribution_entropy(&p);
            if hp < lo || hp >= hi {
                continue;
            }
            let counts = multinomial(&mut rng, config.annotators, &p);
            let hc = entropy(&counts)?;
            if hc >= lo && hc < hi {
                accepted = Some((p, counts));
                break;
            }
        }
        let (p, counts) = accepted.ok_or_else(|| {
            Error::Generation(format!(
                "no {tier} example with entropy in [{lo:.3}, {hi:.3}) after {} attempts",
                config.max_rejection_attempts
            ))
        })?;
        let x = features(&mut rng, config, &mu, &p);
        let length = rng.random_range(5..=40);
        probe.push(SyntheticExample {
            uid: format!("p{i:05}"),
            features: x,
            gold: majority_label(&counts),
            p,
            counts,
            tier,
            length,
        });
    }

    let mut bulk = Vec::with_capacity(config.bulk_size);
    for i in 0..config.bulk_size {
        let class = rng.random_range(0..c);
        let mut p = vec![0.0; c];
        p[class] = 1.0;
        let mut counts = vec![0u32; c];
        counts[class] = config.annotators;
        let x = features(&mut rng, config, &mu, &p);
        bulk.push(SyntheticExample {
            uid: format!("b{i:06}"),
            features: x,
            p,
            counts,
            gold: class,
            tier: EntropyCategory::Clean,
            length: 0,
        });
    }
    Ok(ToyDataset { probe, bulk })
}

/// Train/validation split of the probe set, stratified by measured entropy
/// category. Both halves keep uid order.
pub fn stratified_split(
    probe: &[SyntheticExample],
    config: &ToyConfig,
    seed: u64,
) -> Result<(Vec<SyntheticExample>, Vec<SyntheticExample>)> {
    let mut rng = stream(seed, SPLIT_STREAM);
    let scheme = crate::annotation::BinningScheme::fixed(config.clean_threshold, config.contested_threshold)?;
    let mut by_cat: [Vec<usize>; 3] = Default::default();
    for (i, ex) in probe.iter().enumerate() {
        let h = entropy(&ex.counts)?;
        let cat = crate::annotation::categorize(h, &scheme)?.index();
        by_cat[cat].push(i);
    }
    let mut is_train = vec![false; probe.len()];
    for idx in by_cat.iter_mut() {
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let take = (config.train_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..take] {
            is_train[i] = true;
        }
    }
    let (train, val): (Vec<_>, Vec<_>) = probe.iter().cloned().zip(is_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(e, _)| e).collect(),
        val.into_iter().map(|(e, _)| e).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{categorize, BinningScheme};

    fn small() -> ToyConfig {
        ToyConfig {
            probe_size: 300,
            bulk_size: 200,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_dataset(&small(), 9).unwrap();
        let b = generate_dataset(&small(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiers_exact_and_in_band() {
        let ds = generate_dataset(&small(), 42).unwrap();
        let scheme = BinningScheme::default();
        let mut per = [0usize; 3];
        for ex in &ds.probe {
            let h = entropy(&ex.counts).unwrap();
            let cat = categorize(h, &scheme).unwrap().category().unwrap();
            assert_eq!(cat, ex.tier, "uid {} entropy {h}", ex.uid);
            per[cat.index()] += 1;
            assert_eq!(ex.counts.iter().sum::<u32>(), 100);
            assert!((ex.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(ex.gold, majority_label(&ex.counts));
        }
        assert_eq!(per, [100, 100, 100]);
    }

    #[test]
    fn noise_free_uniform_example_sits_at_centroid_mean() {
        let cfg = ToyConfig {
            feature_noise: 0.0,
            probe_size: 30,
            bulk_size: 3,
            ..ToyConfig::default()
        };
        let ds = generate_dataset(&cfg, 1).unwrap();
        let mu = centroids(&cfg);
        for ex in ds.probe.iter().filter(|e| e.tier == EntropyCategory::Contested) {
            for i in 0..cfg.feature_dim {
                let expected: f64 = ex.p.iter().zip(&mu).map(|(p, m)| p * m[i]).sum();
                assert!((ex.features[i] - expected).abs() < 1e-9);
            }
            // near-uniform p puts the point near the centroid mean
            let mean: Vec<f64> = (0..cfg.feature_dim)
                .map(|i| mu.iter().map(|m| m[i]).sum::<f64>() / 3.0)
                .collect();
            let dist: f64 = ex.features.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let maxdev = ex.p.iter().map(|p| (p - 1.0 / 3.0).abs()).fold(0.0, f64::max);
            assert!(dist <= 3.0 * maxdev * cfg.centroid_separation + 1e-9);
        }
        for b in &ds.bulk {
            let m = &mu[b.gold];
            assert!(b.features.iter().zip(m).all(|(a, c)| (a - c).abs() < 1e-12));
        }
    }

    #[test]
    fn centroid_spacing() {
        let cfg = ToyConfig::default();
        let mu = centroids(&cfg);
        for a in 0..3 {
            for b in (a + 1)..3 {
                let d: f64 = mu[a].iter().zip(&mu[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((d - cfg.centroid_separation).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unreachable_band_errors() {
        let cfg = ToyConfig {
            tier_concentrations: [0.1, 0.5, 1e-3],
            max_rejection_attempts: 50,
            probe_size: 30,
            bulk_size: 0,
            ..ToyConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn split_is_stratified() {
        let cfg = small();
        let ds = generate_dataset(&cfg, 42).unwrap();
        let (train, val) = stratified_split(&ds.probe, &cfg, 42).unwrap();
        assert_eq!(train.len() + val.len(), 300);
        for tier in EntropyCategory::ALL {
            assert_eq!(train.iter().filter(|e| e.tier == tier).count(), 80);
        }
        assert!(train.windows(2).all(|w| w[0].uid < w[1].uid));
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(tier_counts(300, &[1.0 / 3.0; 3]), [100, 100, 100]);
        assert_eq!(tier_counts(10, &[0.25, 0.5, 0.25]).iter().sum::<usize>(), 10);
    }
}
