use serde::{Deserialize, Serialize};

use crate::annotation::{CLEAN_THRESHOLD, CONTESTED_THRESHOLD};
use crate::error::{Error, Result};
use crate::trajectory::MethodTag;

/// Generative and training configuration for one toy run.
///
/// Every field has a default, so JSON documents only need the overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub feature_dim: usize,
    pub num_classes: usize,

    pub probe_size: usize,
    /// Target clean/ambiguous/contested shares of the probe set.
    pub tier_proportions: [f64; 3],
    /// Symmetric Dirichlet concentration used to draw each tier's
    /// annotator distribution before rejection into the tier's band.
    pub tier_concentrations: [f64; 3],
    pub clean_threshold: f64,
    pub contested_threshold: f64,
    pub bulk_size: usize,
    /// Pairwise distance between class centroids.
    pub centroid_separation: f64,
    pub feature_noise: f64,
    pub annotators: u32,
    pub max_rejection_attempts: usize,
    /// Share of each entropy category that goes to the tracked train split.
    pub train_fraction: f64,

    pub method: MethodTag,
    pub rank: usize,
    /// Adapter scale numerator; `None` means `2 * rank`.
    pub alpha: Option<f64>,
    pub adapter_dropout: f64,
    pub adapter_init_std: f64,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub log_every: usize,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub base_init_std: f64,

    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            num_classes: 3,
            probe_size: 300,
            tier_proportions: [1.0 / 3.0; 3],
            tier_concentrations: [0.1, 0.5, 5.0],
            clean_threshold: CLEAN_THRESHOLD,
            contested_threshold: CONTESTED_THRESHOLD,
            bulk_size: 3000,
            centroid_separation: 8.0,
            feature_noise: 2.0,
            annotators: 100,
            max_rejection_attempts: 100_000,
            train_fraction: 0.8,
            method: MethodTag::Lowrank,
            rank: 2,
            alpha: None,
            adapter_dropout: 0.05,
            adapter_init_std: 0.02,
            lr: 5e-3,
            epochs: 5,
            batch_size: 32,
            warmup_fraction: 0.06,
            clip_norm: 1.0,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 20,
            pretrain_epochs: 2,
            pretrain_lr: 3e-3,
            base_init_std: 0.01,
            seed: 42,
        }
    }
}

impl ToyConfig {
    pub fn with_method(mut self, method: MethodTag, rank: usize) -> Self {
        self.method = method;
        self.rank = if method == MethodTag::Lowrank { rank } else { 0 };
        self
    }

    pub fn effective_alpha(&self) -> f64 {
        match self.method {
            MethodTag::Lowrank => self.alpha.unwrap_or(2.0 * self.rank as f64),
            _ => self.alpha.unwrap_or(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.feature_dim < self.num_classes {
            return fail(format!(
                "feature_dim {} must be at least num_classes {}",
                self.feature_dim, self.num_classes
            ));
        }
        if self.method == MethodTag::Lowrank && self.rank == 0 {
            return fail("lowrank method needs rank >= 1".into());
        }
        let share: f64 = self.tier_proportions.iter().sum();
        if self.tier_proportions.iter().any(|p| *p < 0.0) || (share - 1.0).abs() > 1e-9 {
            return fail(format!("tier proportions must be non-negative and sum to 1 (sum {share})"));
        }
        if self.tier_concentrations.iter().any(|a| !(*a > 0.0)) {
            return fail("Dirichlet concentrations must be positive".into());
        }
        let ceiling = (self.num_classes as f64).ln();
        if !(0.0 < self.clean_threshold
            && self.clean_threshold < self.contested_threshold
            && self.contested_threshold < ceiling)
        {
            return fail(format!(
                "thresholds must satisfy 0 < {} < {} < ln C = {ceiling:.4}",
                self.clean_threshold, self.contested_threshold
            ));
        }
        if self.annotators == 0 {
            return fail("annotators must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.adapter_dropout) {
            return fail(format!("adapter_dropout {} outside [0, 1)", self.adapter_dropout));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return fail(format!("train_fraction {} outside (0, 1]", self.train_fraction));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return fail("batch_size and log_every must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.pretrain_lr >= 0.0) {
            return fail("learning rates must be non-negative".into());
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.centroid_separation > 0.0) || !(self.feature_noise >= 0.0) {
            return fail("centroid_separation must be positive and feature_noise non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = ToyConfig::default();
        c.validate().unwrap();
        assert_eq!(c.effective_alpha(), 4.0);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ToyConfig>(&json).unwrap(), c);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: ToyConfig = serde_json::from_str(r#"{"method":"full","seed":7}"#).unwrap();
        assert_eq!(c.method, MethodTag::Full);
        assert_eq!(c.seed, 7);
        assert_eq!(c.feature_dim, 16);
        assert!(serde_json::from_str::<ToyConfig>(r#"{"not_a_field":1}"#).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ToyConfig::default();
        c.rank = 0;
        assert!(c.validate().is_err());
        let mut c = ToyConfig::default();
        c.tier_proportions = [0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
        let mut c = ToyConfig::default();
        c.contested_threshold = 1.2;
        assert!(c.validate().is_err());
    }
}
