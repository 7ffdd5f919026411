use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotation::{percentile_bins, AnnotationRecord, BinningScheme};
use crate::calibration::{calibration_by_category, CalibrationReport, DEFAULT_ECE_BINS};
use crate::error::{Error, Result};
use crate::stats::{
    benjamini_hochberg, bonferroni, bonferroni_mask, kendall_tau_b, kruskal_wallis, ols_regression,
    partial_spearman, seed_aggregate, spearman, CorrelationResult, KruskalResult, RegressionResult, SeedAggregate,
};
use crate::trajectory::{join, CosineRecord, JoinedTable, MethodTag, RunLog};

/// Covariates partialled out of the AULC-entropy correlation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Controls {
    pub length: bool,
    pub gold: bool,
}

impl Controls {
    pub fn is_empty(&self) -> bool {
        !self.length && !self.gold
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.length {
            v.push("length".to_string());
        }
        if self.gold {
            v.push("gold".to_string());
        }
        v
    }
}

impl FromStr for Controls {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut c = Controls::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "length" => c.length = true,
                "gold" => c.gold = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown control `{other}` (expected length, gold)"
                    )))
                }
            }
        }
        Ok(c)
    }
}

impl Serialize for ControlsList {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ControlsList {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names.join(",").parse().map(ControlsList).map_err(serde::de::Error::custom)
    }
}

/// Controls written as a list of names in JSON documents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ControlsList(pub Controls);

/// How entropies are binned: fixed thresholds, or k data-driven quantile bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinSpec {
    Fixed(f64, f64),
    Quantile(usize),
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec::Fixed(0.4, 0.7)
    }
}

impl BinSpec {
    /// Concrete scheme for a set of entropies.
    pub fn resolve(&self, entropies: &[f64]) -> Result<BinningScheme> {
        match *self {
            BinSpec::Fixed(lo, hi) => BinningScheme::fixed(lo, hi),
            BinSpec::Quantile(k) => percentile_bins(entropies, k),
        }
    }

    pub fn resolve_records(&self, records: &[AnnotationRecord]) -> Result<BinningScheme> {
        let h = records.iter().map(AnnotationRecord::entropy).collect::<Result<Vec<_>>>()?;
        self.resolve(&h)
    }
}

impl FromStr for BinSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "quartile" => return Ok(BinSpec::Quantile(4)),
            "tercile" => return Ok(BinSpec::Quantile(3)),
            _ => {}
        }
        let bad = || Error::Config(format!("invalid bins `{s}` (expected fixed:<lo>,<hi>, quartile or tercile)"));
        let rest = s.strip_prefix("fixed:").ok_or_else(bad)?;
        let (lo, hi) = rest.split_once(',').ok_or_else(bad)?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        BinningScheme::fixed(lo, hi)?;
        Ok(BinSpec::Fixed(lo, hi))
    }
}

impl std::fmt::Display for BinSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BinSpec::Fixed(lo, hi) => write!(f, "fixed:{lo},{hi}"),
            BinSpec::Quantile(4) => f.write_str("quartile"),
            BinSpec::Quantile(3) => f.write_str("tercile"),
            BinSpec::Quantile(k) => write!(f, "quantile:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDynamics {
    pub label: String,
    pub n: usize,
    pub delta_mean: f64,
    pub delta_std: f64,
    pub aulc_mean: f64,
    pub aulc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartographySummary {
    pub confidence_vs_aulc: CorrelationResult,
    pub variability_vs_aulc: Option<CorrelationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormRow {
    pub uid: String,
    pub label: String,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormSummary {
    pub step: u64,
    pub medians: Vec<(String, f64)>,
    pub kruskal: Option<KruskalResult>,
    pub rows: Vec<GradNormRow>,
}

/// Mean loss per category at each checkpoint with normal 95% half-widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeroLine {
    pub label: String,
    pub n: usize,
    pub mean: Vec<f64>,
    pub ci_half_width: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub uid: String,
    pub entropy: f64,
    pub label: String,
    pub aulc: f64,
    pub delta: f64,
    pub confidence: Option<f64>,
    pub variability: Option<f64>,
}

/// Everything computed for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub run_id: String,
    pub method: MethodTag,
    pub rank: usize,
    pub seed: u64,
    pub dataset: String,
    pub n: usize,
    pub spearman: CorrelationResult,
    pub kendall: CorrelationResult,
    pub controls: Vec<String>,
    pub partial: Option<CorrelationResult>,
    pub by_category: Vec<CategoryDynamics>,
    pub regression: RegressionResult,
    pub calibration: Option<CalibrationReport>,
    pub cartography: Option<CartographySummary>,
    pub grad_norms: Option<GradNormSummary>,
    pub steps: Vec<u64>,
    pub hero: Vec<HeroLine>,
    pub cosines: Vec<CosineRecord>,
    pub examples: Vec<ExampleRow>,
}

impl RunAnalysis {
    pub fn category(&self, label: &str) -> Option<&CategoryDynamics> {
        self.by_category.iter().find(|c| c.label == label)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let a = seed_aggregate(v);
    (a.mean, a.std)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Covariate columns for the requested controls, in a fixed order.
fn control_columns(
    table: &JoinedTable,
    records: &BTreeMap<&str, &AnnotationRecord>,
    controls: &Controls,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut cols = Vec::new();
    if controls.length {
        let lengths = table
            .rows
            .iter()
            .map(|r| {
                records[r.uid.as_str()]
                    .text_length()
                    .ok_or_else(|| Error::MissingData(format!("no text length for `{}`", r.uid)))
            })
            .collect::<Result<Vec<f64>>>()?;
        cols.push(("length".to_string(), lengths));
    }
    if controls.gold {
        let mut present: Vec<usize> = table.rows.iter().map(|r| r.gold).collect();
        present.sort_unstable();
        present.dedup();
        // dummy coding with the first present class as reference
        for &c in present.iter().skip(1) {
            let col = table.rows.iter().map(|r| f64::from(u8::from(r.gold == c))).collect();
            cols.push((format!("gold_{c}"), col));
        }
    }
    Ok(cols)
}

/// Joins `records` with `log` and computes the full per-run battery.
pub fn analyze_run(
    records: &[AnnotationRecord],
    log: &RunLog,
    scheme: &BinningScheme,
    controls: &Controls,
) -> Result<RunAnalysis> {
    let epoch_idx = log.meta.epoch_indices();
    let table = join(records, &log.trajectories, scheme, &epoch_idx)?;
    let by_uid: BTreeMap<&str, &AnnotationRecord> = records.iter().map(|r| (r.uid.as_str(), r)).collect();
    let entropies = table.entropies();
    let aulcs = table.aulcs();

    let rho = spearman(&aulcs, &entropies)?;
    let tau = kendall_tau_b(&aulcs, &entropies)?;
    let covariates = control_columns(&table, &by_uid, controls)?;
    let partial = if controls.is_empty() {
        None
    } else {
        let cols: Vec<Vec<f64>> = covariates.iter().map(|(_, c)| c.clone()).collect();
        Some(partial_spearman(&aulcs, &entropies, &cols)?)
    };
    let mut predictors = vec![("entropy".to_string(), entropies.clone())];
    predictors.extend(covariates);
    let regression = ols_regression(&aulcs, &predictors, true)?;

    let labels = scheme.labels();
    let mut by_category = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let rows: Vec<_> = table.rows.iter().filter(|r| r.bin_index == i).collect();
        if rows.is_empty() {
            continue;
        }
        let (dm, ds) = mean_std(&rows.iter().map(|r| r.delta).collect::<Vec<_>>());
        let (am, asd) = mean_std(&rows.iter().map(|r| r.aulc).collect::<Vec<_>>());
        by_category.push(CategoryDynamics {
            label: label.clone(),
            n: rows.len(),
            delta_mean: dm,
            delta_std: ds,
            aulc_mean: am,
            aulc_std: asd,
        });
    }

    let traj_by_uid: BTreeMap<&str, usize> = log
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| (t.uid.as_str(), i))
        .collect();
    let joined_trajs: Vec<_> = table
        .rows
        .iter()
        .map(|r| &log.trajectories[traj_by_uid[r.uid.as_str()]])
        .collect();

    let calibration = if joined_trajs.iter().all(|t| t.pred_dists.is_some()) {
        let last: Vec<Vec<f64>> = joined_trajs
            .iter()
            .map(|t| t.pred_dists.as_ref().and_then(|d| d.last().cloned()).unwrap_or_default())
            .collect();
        let golds: Vec<usize> = table.rows.iter().map(|r| r.gold).collect();
        let cats: Vec<String> = table.rows.iter().map(|r| r.bin.clone()).collect();
        Some(calibration_by_category(&last, &golds, &cats, &labels, DEFAULT_ECE_BINS)?)
    } else {
        None
    };

    let cartography = if table.rows.iter().all(|r| r.confidence.is_some()) {
        let conf: Vec<f64> = table.rows.iter().filter_map(|r| r.confidence).collect();
        let var: Vec<f64> = table.rows.iter().filter_map(|r| r.variability).collect();
        Some(CartographySummary {
            confidence_vs_aulc: spearman(&conf, &aulcs)?,
            // a single epoch checkpoint leaves every variability at zero
            variability_vs_aulc: spearman(&var, &aulcs).ok(),
        })
    } else {
        None
    };

    let grad_norms = log.grad_norms.last().map(|rec| {
        let rows: Vec<GradNormRow> = table
            .rows
            .iter()
            .filter_map(|r| {
                rec.norms.get(&r.uid).map(|&norm| GradNormRow {
                    uid: r.uid.clone(),
                    label: r.bin.clone(),
                    norm,
                })
            })
            .collect();
        let groups: Vec<(String, Vec<f64>)> = labels
            .iter()
            .map(|l| (l.clone(), rows.iter().filter(|g| &g.label == l).map(|g| g.norm).collect::<Vec<_>>()))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        let medians = groups.iter().map(|(l, v)| (l.clone(), median(v))).collect();
        let samples: Vec<Vec<f64>> = groups.into_iter().map(|(_, v)| v).collect();
        GradNormSummary {
            step: rec.step,
            medians,
            kruskal: kruskal_wallis(&samples).ok(),
            rows,
        }
    });

    let steps = log.meta.schedule.steps().to_vec();
    let hero = labels
        .iter()
        .enumerate()
        .filter_map(|(i, label)| {
            let members: Vec<_> = table
                .rows
                .iter()
                .zip(&joined_trajs)
                .filter(|(r, _)| r.bin_index == i)
                .map(|(_, t)| *t)
                .collect();
            if members.is_empty() {
                return None;
            }
            let n = members.len();
            let (mut mean, mut half) = (Vec::with_capacity(steps.len()), Vec::with_capacity(steps.len()));
            for t in 0..steps.len() {
                let at: Vec<f64> = members.iter().map(|m| m.losses[t]).collect();
                let (m, sd) = mean_std(&at);
                mean.push(m);
                half.push(1.96 * sd / (n as f64).sqrt());
            }
            Some(HeroLine {
                label: label.clone(),
                n,
                mean,
                ci_half_width: half,
            })
        })
        .collect();

    let examples = table
        .rows
        .iter()
        .map(|r| ExampleRow {
            uid: r.uid.clone(),
            entropy: r.entropy,
            label: r.bin.clone(),
            aulc: r.aulc,
            delta: r.delta,
            confidence: r.confidence,
            variability: r.variability,
        })
        .collect();

    Ok(RunAnalysis {
        run_id: log.meta.run_id.clone(),
        method: log.meta.method,
        rank: log.meta.rank,
        seed: log.meta.seed,
        dataset: log.meta.dataset.clone(),
        n: table.rows.len(),
        spearman: rho,
        kendall: tau,
        controls: controls.names(),
        partial,
        by_category,
        regression,
        calibration,
        cartography,
        grad_norms,
        steps,
        hero,
        cosines: log.cosines.clone(),
        examples,
    })
}

// ---------------------------------------------------------------------------
// Seed aggregation and corrections
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub label: String,
    pub method: MethodTag,
    pub rank: usize,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub rho: SeedAggregate,
    pub tau: SeedAggregate,
    pub partial: Option<SeedAggregate>,
    pub delta_by_category: Vec<(String, SeedAggregate)>,
    /// Median of the per-seed Spearman p-values; the value corrections use.
    pub p_value: f64,
    /// Fewer seeds than requested finished.
    pub reduced_seeds: bool,
    pub failures: Vec<String>,
}

/// Corrected verdicts, recomputed from the stored condition p-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub alpha: f64,
    pub m: usize,
    pub bonferroni_threshold: f64,
    pub bonferroni: Vec<bool>,
    pub benjamini_hochberg: Vec<bool>,
}

pub fn condition_label(method: MethodTag, rank: usize) -> String {
    match method {
        MethodTag::Lowrank => format!("lowrank-r{rank}"),
        other => other.to_string(),
    }
}

/// Seed-aggregates runs that share method, rank and dataset.
pub fn aggregate_condition(runs: &[&RunAnalysis], requested_seeds: usize, failures: Vec<String>) -> Result<ConditionSummary> {
    let first = runs.first().ok_or(Error::EmptyInput("condition has no finished runs"))?;
    let collect = |f: &dyn Fn(&RunAnalysis) -> f64| runs.iter().map(|r| f(r)).collect::<Vec<_>>();
    let partial = if runs.iter().all(|r| r.partial.is_some()) {
        Some(seed_aggregate(&collect(&|r| r.partial.as_ref().map_or(f64::NAN, |p| p.coefficient))))
    } else {
        None
    };
    let mut labels: Vec<String> = Vec::new();
    for r in runs {
        for c in &r.by_category {
            if !labels.contains(&c.label) {
                labels.push(c.label.clone());
            }
        }
    }
    let delta_by_category = labels
        .into_iter()
        .map(|l| {
            let v: Vec<f64> = runs.iter().filter_map(|r| r.category(&l).map(|c| c.delta_mean)).collect();
            (l, seed_aggregate(&v))
        })
        .collect();
    Ok(ConditionSummary {
        label: condition_label(first.method, first.rank),
        method: first.method,
        rank: first.rank,
        dataset: first.dataset.clone(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        rho: seed_aggregate(&collect(&|r| r.spearman.coefficient)),
        tau: seed_aggregate(&collect(&|r| r.kendall.coefficient)),
        partial,
        delta_by_category,
        p_value: median(&collect(&|r| r.spearman.p_value)),
        reduced_seeds: runs.len() < requested_seeds,
        failures,
    })
}

/// Groups runs by (method, rank, dataset) in first-seen order.
pub fn aggregate_runs(runs: &[RunAnalysis]) -> Result<Vec<ConditionSummary>> {
    let mut keys: Vec<(MethodTag, usize, String)> = Vec::new();
    for r in runs {
        let k = (r.method, r.rank, r.dataset.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.iter()
        .map(|k| {
            let group: Vec<&RunAnalysis> = runs
                .iter()
                .filter(|r| r.method == k.0 && r.rank == k.1 && r.dataset == k.2)
                .collect();
            aggregate_condition(&group, group.len(), Vec::new())
        })
        .collect()
}

/// Bonferroni and BH verdicts over condition p-values; `m` defaults to the
/// number of conditions.
pub fn correction_verdicts(p_values: &[f64], alpha: f64, m: Option<usize>) -> Result<Verdicts> {
    let m = m.unwrap_or(p_values.len());
    if m < p_values.len() {
        return Err(Error::Config(format!(
            "m = {m} is smaller than the {} tested conditions",
            p_values.len()
        )));
    }
    let threshold = bonferroni(alpha, m)?;
    let bonf = if m == p_values.len() {
        bonferroni_mask(p_values, alpha)?
    } else {
        p_values.iter().map(|&p| p <= threshold).collect()
    };
    Ok(Verdicts {
        alpha,
        m,
        bonferroni_threshold: threshold,
        bonferroni: bonf,
        benjamini_hochberg: benjamini_hochberg(p_values, alpha)?,
    })
}
