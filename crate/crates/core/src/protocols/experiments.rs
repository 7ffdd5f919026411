use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::analysis::{
    aggregate_condition, analyze_run, condition_label, correction_verdicts, BinSpec, ConditionSummary, Controls,
    RunAnalysis, Verdicts,
};
use crate::annotation::{entropy, AnnotationRecord, EntropyCategory};
use crate::error::{Error, Result};
use crate::lab::{finetune, generate_dataset, pretrain_base, stratified_split, stream, AdapterModel};
use crate::lab::{FinetuneOptions, SyntheticExample, ToyConfig, ToyDataset};
use crate::stats::rank::{midranks, pearson};
use crate::stats::{cohens_d, wilcoxon_signed_rank, WilcoxonResult};
use crate::trajectory::{MethodTag, RunLog};

pub(crate) const NOISE_STREAM: u64 = 6;
pub(crate) const COMPOSITION_STREAM: u64 = 7;

/// Dataset name written into every toy run header.
pub const TOY_DATASET: &str = "toy";

/// Shared analysis settings for every run of a protocol.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AnalysisOptions {
    pub controls: Controls,
    pub bins: BinSpec,
    pub track_gradients: bool,
}

// ---------------------------------------------------------------------------
// Shared preparation
// ---------------------------------------------------------------------------

/// Data, split and pretrained base for one seed; reused by every run that
/// shares the seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ToyConfig,
    pub dataset: ToyDataset,
    /// Tracked examples: the training half of the probe split.
    pub train: Vec<SyntheticExample>,
    pub validation: Vec<SyntheticExample>,
    pub base: AdapterModel,
    /// Accuracy of the pretrained base on the bulk set.
    pub bulk_accuracy: f64,
}

impl Prepared {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn train_records(&self) -> Vec<AnnotationRecord> {
        self.train.iter().map(SyntheticExample::to_record).collect()
    }

    /// Measured entropy category of each tracked example under the config
    /// thresholds.
    pub fn categories(&self) -> Result<Vec<EntropyCategory>> {
        let scheme = BinSpec::Fixed(self.config.clean_threshold, self.config.contested_threshold).resolve(&[])?;
        self.train
            .iter()
            .map(|e| {
                let h = entropy(&e.counts)?;
                crate::annotation::categorize(h, &scheme)?
                    .category()
                    .ok_or_else(|| Error::Protocol("fixed scheme produced a non-category bin".into()))
            })
            .collect()
    }
}

pub fn prepare(config: &ToyConfig) -> Result<Prepared> {
    config.validate()?;
    let dataset = generate_dataset(config, config.seed)?;
    let (train, validation) = stratified_split(&dataset.probe, config, config.seed)?;
    let base = pretrain_base(&dataset.bulk, config)?;
    let correct = dataset
        .bulk
        .iter()
        .filter(|e| {
            let q = base.predict(&e.features);
            (0..q.len()).all(|c| q[e.gold] >= q[c])
        })
        .count();
    let bulk_accuracy = correct as f64 / dataset.bulk.len() as f64;
    Ok(Prepared {
        config: config.clone(),
        dataset,
        train,
        validation,
        base,
        bulk_accuracy,
    })
}

/// One fine-tuning run with its log and analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub log: RunLog,
    pub analysis: RunAnalysis,
    /// Gradient contributions per tracked example, in `train` order.
    pub trained_counts: Vec<u64>,
}

pub fn run_id(prefix: &str, method: MethodTag, rank: usize, seed: u64) -> String {
    format!("{prefix}-{}-s{seed}", condition_label(method, rank))
}

/// Fine-tunes on a prepared seed with `method`/`rank` and analyzes the log.
pub fn run_condition(
    prep: &Prepared,
    method: MethodTag,
    rank: usize,
    mut options: FinetuneOptions,
    analysis: &AnalysisOptions,
) -> Result<RunArtifact> {
    let config = prep.config.clone().with_method(method, rank);
    if options.dataset.is_empty() {
        options.dataset = TOY_DATASET.to_string();
    }
    options.track_gradients |= analysis.track_gradients;
    let outcome = finetune(&prep.base, &prep.train, &prep.dataset.bulk, &config, &options)?;
    let records = prep.train_records();
    let scheme = analysis.bins.resolve_records(&records)?;
    let report = analyze_run(&records, &outcome.log, &scheme, &analysis.controls)?;
    Ok(RunArtifact {
        log: outcome.log,
        analysis: report,
        trained_counts: outcome.trained_counts,
    })
}

/// The plain run of the config's own method on one seed.
pub fn single_run(config: &ToyConfig, analysis: &AnalysisOptions) -> Result<(Prepared, RunArtifact)> {
    let prep = prepare(config)?;
    let options = FinetuneOptions {
        run_id: run_id("train", config.method, config.rank, config.seed),
        ..Default::default()
    };
    let run = run_condition(&prep, config.method, config.rank, options, analysis)?;
    Ok((prep, run))
}

// ---------------------------------------------------------------------------
// Rank sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rank: usize,
    pub rho: f64,
    pub p_value: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    /// Spearman correlation of rank order with rho; `None` for fewer than two
    /// finished ranks.
    pub monotonicity: Option<f64>,
    /// Set when a run failed and the sweep stopped early.
    pub partial: bool,
    pub failures: Vec<String>,
}

pub fn rank_sweep(
    config: &ToyConfig,
    ranks: &[usize],
    analysis: &AnalysisOptions,
) -> Result<(SweepReport, Vec<RunArtifact>)> {
    if ranks.is_empty() {
        return Err(Error::Protocol("rank sweep needs at least one rank".into()));
    }
    if ranks.windows(2).any(|w| w[0] >= w[1]) || ranks[0] == 0 {
        return Err(Error::Protocol(format!("ranks must be positive and strictly increasing: {ranks:?}")));
    }
    let prep = prepare(config)?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &r in ranks {
        let options = FinetuneOptions {
            run_id: run_id("sweep", MethodTag::Lowrank, r, config.seed),
            ..Default::default()
        };
        match run_condition(&prep, MethodTag::Lowrank, r, options, analysis) {
            Ok(run) => runs.push(run),
            Err(e) => {
                failures.push(format!("rank {r}: {e}"));
                break;
            }
        }
    }
    let rows: Vec<SweepRow> = runs
        .iter()
        .map(|r| SweepRow {
            rank: r.analysis.rank,
            rho: r.analysis.spearman.coefficient,
            p_value: r.analysis.spearman.p_value,
            tau: r.analysis.kendall.coefficient,
        })
        .collect();
    let monotonicity = if rows.len() < 2 {
        None
    } else {
        let order: Vec<f64> = (0..rows.len()).map(|i| i as f64).collect();
        let rhos: Vec<f64> = rows.iter().map(|r| r.rho).collect();
        // identical rho values leave the statistic undefined
        pearson(&order, &midranks(&rhos)).ok()
    };
    let report = SweepReport {
        seed: config.seed,
        rows,
        monotonicity,
        partial: !failures.is_empty(),
        failures,
    };
    Ok((report, runs))
}

// ---------------------------------------------------------------------------
// Noise injection
// ---------------------------------------------------------------------------

/// Replacement plan for clean tracked examples: a fixed visiting order and a
/// pre-drawn uniform label for each position, so larger fractions extend
/// smaller ones.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePlan {
    pub order: Vec<usize>,
    pub replacement: Vec<usize>,
}

impl NoisePlan {
    pub fn new(clean: &[usize], num_classes: usize, seed: u64) -> Self {
        let mut rng = stream(seed, NOISE_STREAM);
        let mut order = clean.to_vec();
        order.shuffle(&mut rng);
        let replacement = order.iter().map(|_| rng.random_range(0..num_classes)).collect();
        Self { order, replacement }
    }

    pub fn chosen(&self, fraction: f64) -> usize {
        (fraction * self.order.len() as f64).round() as usize
    }

    /// Training labels after replacing the first `chosen(fraction)` clean
    /// examples.
    pub fn labels(&self, gold: &[usize], fraction: f64) -> Vec<usize> {
        let mut labels = gold.to_vec();
        for (&i, &y) in self.order.iter().zip(&self.replacement).take(self.chosen(fraction)) {
            labels[i] = y;
        }
        labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub seed: u64,
    pub fraction: f64,
    pub clean_n: usize,
    /// Clean examples whose label was redrawn.
    pub replaced: usize,
    /// Redrawn labels that differ from gold.
    pub changed: usize,
    pub clean_aulc_mean: f64,
    /// Paired by uid against the unreplaced run.
    pub wilcoxon: WilcoxonResult,
    /// Noised minus baseline clean AULC; `None` when both sets are constant.
    pub cohens_d: Option<f64>,
    pub rho: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub fractions: Vec<f64>,
    pub rows: Vec<NoiseRow>,
    /// Per seed: clean AULC never decreases as the fraction grows.
    pub non_decreasing: Vec<(u64, bool)>,
}

fn clean_aulcs(run: &RunAnalysis, clean_uids: &[String]) -> Vec<f64> {
    clean_uids
        .iter()
        .filter_map(|u| run.examples.iter().find(|e| &e.uid == u).map(|e| e.aulc))
        .collect()
}

pub fn noise_injection(
    config: &ToyConfig,
    fractions: &[f64],
    seeds: &[u64],
    analysis: &AnalysisOptions,
) -> Result<(NoiseReport, Vec<RunArtifact>)> {
    if fractions.is_empty() || seeds.is_empty() {
        return Err(Error::Protocol("noise injection needs fractions and seeds".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Protocol(format!("fraction {f} is outside [0, 1]")));
    }
    let per_seed: Vec<Result<(Vec<NoiseRow>, Vec<RunArtifact>)>> = seeds
        .par_iter()
        .map(|&seed| noise_for_seed(&ToyConfig { seed, ..config.clone() }, fractions, analysis))
        .collect();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for r in per_seed {
        let (rw, rn) = r?;
        rows.extend(rw);
        runs.extend(rn);
    }
    let mut sorted = fractions.to_vec();
    sorted.sort_by(f64::total_cmp);
    let non_decreasing = seeds
        .iter()
        .map(|&s| {
            let means: Vec<f64> = sorted
                .iter()
                .filter_map(|f| rows.iter().find(|r| r.seed == s && r.fraction == *f).map(|r| r.clean_aulc_mean))
                .collect();
            (s, means.windows(2).all(|w| w[1] >= w[0]))
        })
        .collect();
    Ok((
        NoiseReport {
            fractions: fractions.to_vec(),
            rows,
            non_decreasing,
        },
        runs,
    ))
}

fn noise_for_seed(
    config: &ToyConfig,
    fractions: &[f64],
    analysis: &AnalysisOptions,
) -> Result<(Vec<NoiseRow>, Vec<RunArtifact>)> {
    let prep = prepare(config)?;
    let cats = prep.categories()?;
    let clean: Vec<usize> = (0..prep.train.len()).filter(|&i| cats[i] == EntropyCategory::Clean).collect();
    if clean.is_empty() {
        return Err(Error::Protocol("no clean examples to corrupt".into()));
    }
    let clean_uids: Vec<String> = clean.iter().map(|&i| prep.train[i].uid.clone()).collect();
    let plan = NoisePlan::new(&clean, config.num_classes, config.seed);
    let gold: Vec<usize> = prep.train.iter().map(|e| e.gold).collect();
    let (method, rank) = (config.method, config.rank);

    let run_at = |f: f64| -> Result<RunArtifact> {
        let tag = format!("noise{:03}", (f * 100.0).round() as u32);
        let options = FinetuneOptions {
            run_id: run_id(&tag, method, rank, config.seed),
            label_overrides: (plan.chosen(f) > 0).then(|| plan.labels(&gold, f)),
            ..Default::default()
        };
        run_condition(&prep, method, rank, options, analysis)
    };
    let baseline = run_at(0.0)?;
    let before = clean_aulcs(&baseline.analysis, &clean_uids);

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &f in fractions {
        let run = if plan.chosen(f) == 0 { baseline.clone() } else { run_at(f)? };
        let after = clean_aulcs(&run.analysis, &clean_uids);
        let labels = plan.labels(&gold, f);
        rows.push(NoiseRow {
            seed: config.seed,
            fraction: f,
            clean_n: clean.len(),
            replaced: plan.chosen(f),
            changed: clean.iter().filter(|&&i| labels[i] != gold[i]).count(),
            clean_aulc_mean: after.iter().sum::<f64>() / after.len() as f64,
            wilcoxon: wilcoxon_signed_rank(&before, &after)?,
            cohens_d: cohens_d(&after, &before).ok(),
            rho: run.analysis.spearman.coefficient,
            p_value: run.analysis.spearman.p_value,
        });
        if !runs.iter().any(|r: &RunArtifact| r.log.meta.run_id == run.log.meta.run_id) {
            runs.push(run);
        }
    }
    Ok((rows, runs))
}

// ---------------------------------------------------------------------------
// Soft labels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelReport {
    pub seed: u64,
    pub hard_contested_delta: f64,
    pub soft_contested_delta: f64,
    pub hard_clean_delta: f64,
    pub soft_clean_delta: f64,
    pub hard_rho: f64,
    pub soft_rho: f64,
    pub sign_agreement: bool,
    /// Tracking loss is hard-label cross-entropy in both runs.
    pub tracking_loss: String,
}

pub fn soft_label_run(config: &ToyConfig, analysis: &AnalysisOptions) -> Result<(SoftLabelReport, Vec<RunArtifact>)> {
    let prep = prepare(config)?;
    if let Some(e) = prep.train.iter().chain(&prep.dataset.bulk).find(|e| e.counts.iter().sum::<u32>() == 0) {
        return Err(Error::Protocol(format!("`{}` has no annotator counts", e.uid)));
    }
    let (method, rank) = (config.method, config.rank);
    let make = |soft: bool| {
        let options = FinetuneOptions {
            run_id: run_id(if soft { "soft" } else { "hard" }, method, rank, config.seed),
            soft,
            ..Default::default()
        };
        run_condition(&prep, method, rank, options, analysis)
    };
    let hard = make(false)?;
    let soft = make(true)?;
    let delta = |r: &RunArtifact, c: EntropyCategory| r.analysis.category(c.name()).map_or(f64::NAN, |d| d.delta_mean);
    let (hc, sc) = (delta(&hard, EntropyCategory::Contested), delta(&soft, EntropyCategory::Contested));
    let report = SoftLabelReport {
        seed: config.seed,
        hard_contested_delta: hc,
        soft_contested_delta: sc,
        hard_clean_delta: delta(&hard, EntropyCategory::Clean),
        soft_clean_delta: delta(&soft, EntropyCategory::Clean),
        hard_rho: hard.analysis.spearman.coefficient,
        soft_rho: soft.analysis.spearman.coefficient,
        sign_agreement: hc.signum() == sc.signum(),
        tracking_loss: "hard-label cross-entropy".into(),
    };
    Ok((report, vec![hard, soft]))
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionMode {
    /// Lower half of tracked examples by entropy.
    LowOnly,
    /// Upper half of tracked examples by entropy.
    HighOnly,
    /// Equal count from every entropy category.
    Balanced,
    /// Every tracked example.
    All,
}

impl CompositionMode {
    pub const ALL: [CompositionMode; 4] = [Self::LowOnly, Self::HighOnly, Self::Balanced, Self::All];

    pub fn name(self) -> &'static str {
        match self {
            Self::LowOnly => "low-only",
            Self::HighOnly => "high-only",
            Self::Balanced => "balanced",
            Self::All => "all",
        }
    }
}

/// Which tracked examples join the training union under `mode`; `None`
/// means all of them.
pub fn composition_mask(prep: &Prepared, mode: CompositionMode) -> Result<Option<Vec<bool>>> {
    let n = prep.train.len();
    let mask = match mode {
        CompositionMode::All => return Ok(None),
        CompositionMode::LowOnly | CompositionMode::HighOnly => {
            let h = prep.train.iter().map(|e| entropy(&e.counts)).collect::<Result<Vec<_>>>()?;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then_with(|| prep.train[a].uid.cmp(&prep.train[b].uid)));
            let half = n / 2;
            let picked = if mode == CompositionMode::LowOnly { &order[..half] } else { &order[half..] };
            let mut m = vec![false; n];
            picked.iter().for_each(|&i| m[i] = true);
            m
        }
        CompositionMode::Balanced => {
            let cats = prep.categories()?;
            let groups: Vec<Vec<usize>> = EntropyCategory::ALL
                .iter()
                .map(|c| (0..n).filter(|&i| cats[i] == *c).collect())
                .collect();
            let take = groups.iter().map(Vec::len).min().unwrap_or(0);
            let mut rng = stream(prep.seed(), COMPOSITION_STREAM);
            let mut m = vec![false; n];
            for mut g in groups {
                g.shuffle(&mut rng);
                g[..take].iter().for_each(|&i| m[i] = true);
            }
            m
        }
    };
    if !mask.iter().any(|&b| b) {
        return Err(Error::Protocol(format!("composition mode {} selects no examples", mode.name())));
    }
    Ok(Some(mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub mode: CompositionMode,
    pub trained: usize,
    pub tracked: usize,
    pub rho: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub seed: u64,
    pub rows: Vec<CompositionRow>,
    /// max minus min rho over modes.
    pub spread: f64,
}

pub fn composition_ablation(
    config: &ToyConfig,
    modes: &[CompositionMode],
    analysis: &AnalysisOptions,
) -> Result<(CompositionReport, Vec<RunArtifact>)> {
    if modes.is_empty() {
        return Err(Error::Protocol("composition ablation needs at least one mode".into()));
    }
    let prep = prepare(config)?;
    let (method, rank) = (config.method, config.rank);
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &mode in modes {
        let mask = composition_mask(&prep, mode)?;
        let trained = mask.as_ref().map_or(prep.train.len(), |m| m.iter().filter(|&&b| b).count());
        let options = FinetuneOptions {
            run_id: run_id(&format!("comp-{}", mode.name()), method, rank, config.seed),
            train_mask: mask,
            ..Default::default()
        };
        let run = run_condition(&prep, method, rank, options, analysis)?;
        rows.push(CompositionRow {
            mode,
            trained,
            tracked: run.analysis.n,
            rho: run.analysis.spearman.coefficient,
            p_value: run.analysis.spearman.p_value,
        });
        runs.push(run);
    }
    let rhos = rows.iter().map(|r| r.rho);
    let spread = rhos.clone().fold(f64::NEG_INFINITY, f64::max) - rhos.fold(f64::INFINITY, f64::min);
    Ok((
        CompositionReport {
            seed: config.seed,
            rows,
            spread,
        },
        runs,
    ))
}

// ---------------------------------------------------------------------------
// Condition matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub method: MethodTag,
    #[serde(default)]
    pub rank: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub conditions: Vec<ConditionSummary>,
    /// Conditions where no seed finished; excluded from the corrections.
    pub failed_conditions: Vec<(String, Vec<String>)>,
    pub verdicts: Option<Verdicts>,
}

pub fn condition_matrix(
    config: &ToyConfig,
    conditions: &[Condition],
    alpha: f64,
    m: Option<usize>,
    analysis: &AnalysisOptions,
) -> Result<(MatrixReport, Vec<RunArtifact>)> {
    if conditions.is_empty() {
        return Err(Error::Protocol("condition matrix needs at least one condition".into()));
    }
    if let Some(c) = conditions.iter().find(|c| c.seeds.is_empty()) {
        return Err(Error::Protocol(format!("condition {} has no seeds", condition_label(c.method, c.rank))));
    }
    let mut seeds: Vec<u64> = conditions.iter().flat_map(|c| c.seeds.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let prepared: Vec<(u64, Result<Prepared>)> = seeds
        .par_iter()
        .map(|&s| (s, prepare(&ToyConfig { seed: s, ..config.clone() })))
        .collect();

    let jobs: Vec<(usize, u64)> = conditions
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Result<RunArtifact>> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let c = &conditions[i];
            let prep = match &prepared.iter().find(|(k, _)| *k == s).map(|(_, p)| p) {
                Some(Ok(p)) => p,
                Some(Err(e)) => return Err(Error::Protocol(format!("seed {s} preparation failed: {e}"))),
                None => unreachable!("every seed was prepared"),
            };
            let options = FinetuneOptions {
                run_id: run_id("matrix", c.method, c.rank, s),
                ..Default::default()
            };
            run_condition(prep, c.method, c.rank, options, analysis)
        })
        .collect();

    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    let mut failed_conditions = Vec::new();
    let mut results = results.into_iter();
    for c in conditions {
        let mut ok = Vec::new();
        let mut failures = Vec::new();
        for &s in &c.seeds {
            match results.next().expect("one result per job") {
                Ok(run) => ok.push(run),
                Err(e) => failures.push(format!("seed {s}: {e}")),
            }
        }
        if ok.is_empty() {
            failed_conditions.push((condition_label(c.method, c.rank), failures));
            continue;
        }
        let refs: Vec<&RunAnalysis> = ok.iter().map(|r| &r.analysis).collect();
        summaries.push(aggregate_condition(&refs, c.seeds.len(), failures)?);
        runs.extend(ok);
    }
    let verdicts = if summaries.is_empty() {
        None
    } else {
        let p: Vec<f64> = summaries.iter().map(|s| s.p_value).collect();
        Some(correction_verdicts(&p, alpha, m.or(Some(conditions.len())))?)
    };
    Ok((
        MatrixReport {
            conditions: summaries,
            failed_conditions,
            verdicts,
        },
        runs,
    ))
}
