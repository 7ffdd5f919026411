//! Statistical procedures for the entropy-dynamics analysis.

mod correlation;
mod multiple;
mod nonparametric;
pub mod rank;
mod regression;
pub mod special;

pub use correlation::{kendall_tau_b, partial_spearman, spearman, spearman_permutation, CorrelationResult};
pub use multiple::{benjamini_hochberg, bonferroni, bonferroni_mask, seed_aggregate, SeedAggregate};
pub use nonparametric::{
    cohens_d, kruskal_wallis, wilcoxon_signed_rank, wilcoxon_signed_rank_with, KruskalResult,
    WilcoxonMethod, WilcoxonResult, WILCOXON_EXACT_MAX_N,
};
pub use regression::{ols_regression, RegressionResult};
