//! Experiment drivers on top of the toy lab: per-run analysis, rank sweep,
//! label-noise injection, soft-label training, training-set composition,
//! and multi-seed condition matrices with multiple-comparison verdicts.
//!
//! Every protocol is replay-deterministic; runs that share a seed share one
//! dataset and pretrained base.

mod analysis;
mod experiments;
mod manifest;

pub use analysis::{
    aggregate_condition, aggregate_runs, analyze_run, condition_label, correction_verdicts, BinSpec,
    CartographySummary, CategoryDynamics, ConditionSummary, Controls, ControlsList, ExampleRow, GradNormRow,
    GradNormSummary, HeroLine, RunAnalysis, Verdicts,
};
pub use experiments::{
    composition_ablation, composition_mask, condition_matrix, noise_injection, prepare, rank_sweep, run_condition,
    run_id, single_run, soft_label_run, AnalysisOptions, CompositionMode, CompositionReport, CompositionRow, Condition,
    MatrixReport, NoisePlan, NoiseReport, NoiseRow, Prepared, RunArtifact, SoftLabelReport, SweepReport, SweepRow,
    TOY_DATASET,
};
pub use manifest::{execute, tracked_records, Manifest, ManifestOutcome, ProtocolKind, ProtocolReport};
