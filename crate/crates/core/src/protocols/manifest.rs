use std::path::Path;

use serde::{Deserialize, Serialize};

use super::analysis::{BinSpec, ControlsList};
use super::experiments::{
    composition_ablation, condition_matrix, noise_injection, rank_sweep, single_run, soft_label_run,
    AnalysisOptions, CompositionMode, CompositionReport, Condition, MatrixReport, NoiseReport, RunArtifact,
    SoftLabelReport, SweepReport,
};
use crate::annotation::AnnotationRecord;
use crate::error::{Error, Result};
use crate::lab::{generate_dataset, stratified_split, ToyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Train,
    Sweep,
    Noise,
    Softlabel,
    Composition,
    Matrix,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Sweep => "sweep",
            Self::Noise => "noise",
            Self::Softlabel => "softlabel",
            Self::Composition => "composition",
            Self::Matrix => "matrix",
        }
    }
}

impl<'de> Deserialize<'de> for BinSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for BinSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

fn default_seeds() -> Vec<u64> {
    vec![42, 123, 456]
}

fn default_ranks() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.3, 0.6]
}

fn default_modes() -> Vec<CompositionMode> {
    CompositionMode::ALL.to_vec()
}

fn default_alpha() -> f64 {
    0.05
}

/// An experiment description read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub protocol: ProtocolKind,
    /// Seed for single-seed protocols; overrides `config.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Seeds for the noise protocol.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Overrides on top of the default toy config.
    #[serde(default)]
    pub config: ToyConfig,
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<CompositionMode>,
    #[serde(default)]
    pub conditions: Vec<Condition>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Number of comparisons for Bonferroni; the condition count when absent.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub controls: ControlsList,
    #[serde(default)]
    pub bins: BinSpec,
    #[serde(default)]
    pub track_gradients: bool,
}

impl Manifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let manifest: Manifest = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Manifest {
                path: format!("{}: {}", origin.display(), if path == "." { "<root>".into() } else { path }),
                reason: e.into_inner().to_string(),
            }
        })?;
        manifest.validate(origin)?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    fn validate(&self, origin: &Path) -> Result<()> {
        let fail = |field: &str, reason: &str| Error::Manifest {
            path: format!("{}: {field}", origin.display()),
            reason: reason.to_string(),
        };
        if self.protocol == ProtocolKind::Matrix && self.conditions.is_empty() {
            return Err(fail("conditions", "the matrix protocol needs at least one condition"));
        }
        if self.protocol == ProtocolKind::Noise && self.seeds.is_empty() {
            return Err(fail("seeds", "the noise protocol needs at least one seed"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(fail("alpha", "must lie in (0, 1)"));
        }
        self.base_config()
            .validate()
            .map_err(|e| fail("config", &e.to_string()))
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.seeds = vec![seed];
        for c in &mut self.conditions {
            c.seeds = vec![seed];
        }
    }

    pub fn base_config(&self) -> ToyConfig {
        let mut c = self.config.clone();
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c
    }

    pub fn analysis_options(&self) -> AnalysisOptions {
        AnalysisOptions {
            controls: self.controls.0,
            bins: self.bins,
            track_gradients: self.track_gradients,
        }
    }

    /// Seeds whose tracked examples appear in the results.
    pub fn run_seeds(&self) -> Vec<u64> {
        let mut seeds = match self.protocol {
            ProtocolKind::Noise => self.seeds.clone(),
            ProtocolKind::Matrix => self.conditions.iter().flat_map(|c| c.seeds.clone()).collect(),
            _ => vec![self.base_config().seed],
        };
        seeds.sort_unstable();
        seeds.dedup();
        seeds
    }
}

/// Protocol-specific summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "lowercase")]
pub enum ProtocolReport {
    Train { seed: u64, bulk_accuracy: f64 },
    Sweep(SweepReport),
    Noise(NoiseReport),
    Softlabel(SoftLabelReport),
    Composition(CompositionReport),
    Matrix(MatrixReport),
}

/// Result of executing a manifest, before anything is written.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestOutcome {
    pub protocol: ProtocolKind,
    pub report: ProtocolReport,
    pub runs: Vec<RunArtifact>,
    /// Runs that failed, as (label, message).
    pub failures: Vec<(String, String)>,
    /// Tracked annotation records per seed.
    pub annotations: Vec<(u64, Vec<AnnotationRecord>)>,
}

/// Tracked probe records for one seed, regenerated without training.
pub fn tracked_records(config: &ToyConfig, seed: u64) -> Result<Vec<AnnotationRecord>> {
    let config = ToyConfig { seed, ..config.clone() };
    let ds = generate_dataset(&config, seed)?;
    let (train, _) = stratified_split(&ds.probe, &config, seed)?;
    Ok(train.iter().map(|e| e.to_record()).collect())
}

pub fn execute(manifest: &Manifest) -> Result<ManifestOutcome> {
    let config = manifest.base_config();
    let opts = manifest.analysis_options();
    let mut failures = Vec::new();
    let (report, runs) = match manifest.protocol {
        ProtocolKind::Train => {
            let (prep, run) = single_run(&config, &opts)?;
            (
                ProtocolReport::Train {
                    seed: config.seed,
                    bulk_accuracy: prep.bulk_accuracy,
                },
                vec![run],
            )
        }
        ProtocolKind::Sweep => {
            let (r, runs) = rank_sweep(&config, &manifest.ranks, &opts)?;
            failures.extend(r.failures.iter().map(|f| ("sweep".to_string(), f.clone())));
            (ProtocolReport::Sweep(r), runs)
        }
        ProtocolKind::Noise => {
            let (r, runs) = noise_injection(&config, &manifest.fractions, &manifest.seeds, &opts)?;
            (ProtocolReport::Noise(r), runs)
        }
        ProtocolKind::Softlabel => {
            let (r, runs) = soft_label_run(&config, &opts)?;
            (ProtocolReport::Softlabel(r), runs)
        }
        ProtocolKind::Composition => {
            let (r, runs) = composition_ablation(&config, &manifest.modes, &opts)?;
            (ProtocolReport::Composition(r), runs)
        }
        ProtocolKind::Matrix => {
            let (r, runs) = condition_matrix(&config, &manifest.conditions, manifest.alpha, manifest.m, &opts)?;
            for c in &r.conditions {
                failures.extend(c.failures.iter().map(|f| (c.label.clone(), f.clone())));
            }
            for (label, fs) in &r.failed_conditions {
                failures.extend(fs.iter().map(|f| (label.clone(), f.clone())));
            }
            (ProtocolReport::Matrix(r), runs)
        }
    };
    let annotations = manifest
        .run_seeds()
        .into_iter()
        .map(|s| tracked_records(&config, s).map(|r| (s, r)))
        .collect::<Result<_>>()?;
    Ok(ManifestOutcome {
        protocol: manifest.protocol,
        report,
        runs,
        failures,
        annotations,
    })
}
