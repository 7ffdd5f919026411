//! Per-example loss trajectories and their summaries.
//!
//! A run is logged as line-delimited JSON: one `meta` record followed by one
//! `checkpoint` record per logged step. Optional `grad_norms` and
//! `group_cosine` sidecar records may be interleaved.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::{categorize_bounded, AnnotationRecord, BinLabel, BinningScheme};
use crate::error::{Error, Result};

/// Strictly increasing global steps at which per-example losses are logged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct CheckpointSchedule(Vec<u64>);

impl CheckpointSchedule {
    pub fn new(steps: Vec<u64>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Header("checkpoint schedule is empty".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Header(
                "checkpoint schedule is not strictly increasing".into(),
            ));
        }
        Ok(Self(steps))
    }

    pub fn steps(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, step: u64) -> Option<usize> {
        self.0.binary_search(&step).ok()
    }
}

impl TryFrom<Vec<u64>> for CheckpointSchedule {
    type Error = Error;
    fn try_from(v: Vec<u64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CheckpointSchedule> for Vec<u64> {
    fn from(s: CheckpointSchedule) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodTag {
    Lowrank,
    Full,
    Scaling,
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodTag::Lowrank => "lowrank",
            MethodTag::Full => "full",
            MethodTag::Scaling => "scaling",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub method: MethodTag,
    /// Adapter rank; 0 for methods without one.
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
    pub dataset: String,
    pub schedule: CheckpointSchedule,
    /// Steps that close an epoch, a subset of `schedule`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_steps: Vec<u64>,
}

impl RunMeta {
    pub fn validate(&self) -> Result<()> {
        if self.method == MethodTag::Lowrank && self.rank == 0 {
            return Err(Error::Header("lowrank run with rank 0".into()));
        }
        if let Some(s) = self.epoch_steps.iter().find(|&&s| self.schedule.position(s).is_none()) {
            return Err(Error::Header(format!("epoch step {s} is not in the schedule")));
        }
        Ok(())
    }

    /// Schedule indices of the epoch-boundary checkpoints.
    pub fn epoch_indices(&self) -> Vec<usize> {
        self.epoch_steps
            .iter()
            .filter_map(|&s| self.schedule.position(s))
            .collect()
    }
}

/// One example's loss (and optional gold-class probability) at every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrajectory {
    pub uid: String,
    pub losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_dists: Option<Vec<Vec<f64>>>,
}

impl LossTrajectory {
    pub fn new(uid: impl Into<String>, losses: Vec<f64>) -> Self {
        Self {
            uid: uid.into(),
            losses,
            gold_probs: None,
            pred_dists: None,
        }
    }

    pub fn with_gold_probs(mut self, probs: Vec<f64>) -> Self {
        self.gold_probs = Some(probs);
        self
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidTrajectory {
            uid: self.uid.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.losses.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return Err(self.invalid(format!("loss {bad} is not a finite non-negative value")));
        }
        if let Some(probs) = &self.gold_probs {
            if probs.len() != self.losses.len() {
                return Err(self.invalid("gold_probs length differs from losses"));
            }
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(self.invalid("gold probability outside [0, 1]"));
            }
        }
        if let Some(dists) = &self.pred_dists {
            if dists.len() != self.losses.len() {
                return Err(self.invalid("pred_dists length differs from losses"));
            }
            for row in dists {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|q| !(*q >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                    return Err(self.invalid("predicted distribution is not on the simplex"));
                }
            }
        }
        Ok(())
    }

    pub fn aulc(&self) -> Result<f64> {
        aulc(self)
    }

    pub fn delta_loss(&self) -> Result<f64> {
        delta_loss(self)
    }
}

/// Area under the loss curve: the mean loss over all checkpoints.
pub fn aulc(traj: &LossTrajectory) -> Result<f64> {
    if traj.losses.is_empty() {
        return Err(Error::EmptyInput("trajectory has no checkpoints"));
    }
    if traj.losses.iter().any(|l| !l.is_finite()) {
        return Err(traj.invalid("non-finite loss"));
    }
    Ok(traj.losses.iter().sum::<f64>() / traj.losses.len() as f64)
}

/// Last-checkpoint loss minus first-checkpoint loss. Positive means un-learning.
pub fn delta_loss(traj: &LossTrajectory) -> Result<f64> {
    let n = traj.losses.len();
    if n < 2 {
        return Err(Error::InsufficientCheckpoints {
            uid: traj.uid.clone(),
            len: n,
        });
    }
    Ok(traj.losses[n - 1] - traj.losses[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartographyStats {
    pub confidence: f64,
    pub variability: f64,
}

/// Mean and population standard deviation of the gold-class probability over
/// the given checkpoint indices.
pub fn cartography_stats(traj: &LossTrajectory, epoch_checkpoints: &[usize]) -> Result<CartographyStats> {
    let probs = traj
        .gold_probs
        .as_ref()
        .ok_or_else(|| Error::MissingData(format!("trajectory `{}` has no gold_probs", traj.uid)))?;
    if epoch_checkpoints.is_empty() {
        return Err(Error::EmptyInput("no epoch checkpoints selected"));
    }
    let values = epoch_checkpoints
        .iter()
        .map(|&i| {
            probs
                .get(i)
                .copied()
                .ok_or_else(|| traj.invalid(format!("checkpoint index {i} out of range")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = values.len() as f64;
    let confidence = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - confidence).powi(2)).sum::<f64>() / n;
    Ok(CartographyStats {
        confidence,
        variability: variance.sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Log format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Meta(RunMeta),
    Checkpoint {
        step: u64,
        losses: BTreeMap<String, f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gold_probs: Option<BTreeMap<String, f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pred_dists: Option<BTreeMap<String, Vec<f64>>>,
    },
    GradNorms {
        step: u64,
        norms: BTreeMap<String, f64>,
    },
    GroupCosine {
        step: u64,
        /// `None` when either group's aggregate gradient vanished.
        cosine_clean_vs_contested: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormRecord {
    pub step: u64,
    pub norms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineRecord {
    pub step: u64,
    pub cosine: Option<f64>,
}

/// A fully ingested run: header, aligned trajectories, and sidecar series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub meta: RunMeta,
    /// Sorted by uid.
    pub trajectories: Vec<LossTrajectory>,
    #[serde(default)]
    pub grad_norms: Vec<GradNormRecord>,
    #[serde(default)]
    pub cosines: Vec<CosineRecord>,
}

impl RunLog {
    pub fn uids(&self) -> BTreeSet<&str> {
        self.trajectories.iter().map(|t| t.uid.as_str()).collect()
    }

    /// Serializes the run in the line-delimited log format.
    pub fn emit(&self) -> String {
        let mut lines = Vec::with_capacity(self.meta.schedule.len() + 1);
        let push = |lines: &mut Vec<String>, rec: &LogRecord| {
            lines.push(serde_json::to_string(rec).expect("log records serialize"));
        };
        push(&mut lines, &LogRecord::Meta(self.meta.clone()));
        let has_probs = self.trajectories.iter().any(|t| t.gold_probs.is_some());
        let has_dists = self.trajectories.iter().any(|t| t.pred_dists.is_some());
        let norms: HashMap<u64, &GradNormRecord> = self.grad_norms.iter().map(|g| (g.step, g)).collect();
        let cosines: HashMap<u64, &CosineRecord> = self.cosines.iter().map(|c| (c.step, c)).collect();
        for (t, &step) in self.meta.schedule.steps().iter().enumerate() {
            let losses = self
                .trajectories
                .iter()
                .map(|tr| (tr.uid.clone(), tr.losses[t]))
                .collect();
            let gold_probs = has_probs.then(|| {
                self.trajectories
                    .iter()
                    .filter_map(|tr| tr.gold_probs.as_ref().map(|p| (tr.uid.clone(), p[t])))
                    .collect()
            });
            let pred_dists = has_dists.then(|| {
                self.trajectories
                    .iter()
                    .filter_map(|tr| tr.pred_dists.as_ref().map(|d| (tr.uid.clone(), d[t].clone())))
                    .collect()
            });
            push(
                &mut lines,
                &LogRecord::Checkpoint {
                    step,
                    losses,
                    gold_probs,
                    pred_dists,
                },
            );
            if let Some(g) = norms.get(&step) {
                push(
                    &mut lines,
                    &LogRecord::GradNorms {
                        step,
                        norms: g.norms.clone(),
                    },
                );
            }
            if let Some(c) = cosines.get(&step) {
                push(
                    &mut lines,
                    &LogRecord::GroupCosine {
                        step,
                        cosine_clean_vs_contested: c.cosine,
                    },
                );
            }
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

pub fn ingest_log(path: impl AsRef<Path>) -> Result<RunLog> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    parse_log(std::io::BufReader::new(file), path)
}

#[derive(Default)]
struct CheckpointData {
    losses: BTreeMap<String, f64>,
    gold_probs: Option<BTreeMap<String, f64>>,
    pred_dists: Option<BTreeMap<String, Vec<f64>>>,
}

/// Parses and aligns a trajectory log from any reader.
pub fn parse_log(reader: impl BufRead, origin: &Path) -> Result<RunLog> {
    let mut meta: Option<RunMeta> = None;
    let mut checkpoints: BTreeMap<u64, CheckpointData> = BTreeMap::new();
    let mut grad_norms = Vec::new();
    let mut cosines = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", origin.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            reason: e.to_string(),
        })?;
        match record {
            LogRecord::Meta(m) => {
                if meta.is_some() {
                    return Err(Error::Header(format!("second meta record on line {lineno}")));
                }
                if lineno != 1 {
                    return Err(Error::Header("meta record must be the first line".into()));
                }
                m.validate()?;
                meta = Some(m);
            }
            _ if meta.is_none() => {
                return Err(Error::Header("log does not start with a meta record".into()));
            }
            LogRecord::Checkpoint {
                step,
                losses,
                gold_probs,
                pred_dists,
            } => {
                let entry = checkpoints.entry(step).or_default();
                if !entry.losses.is_empty() {
                    return Err(Error::Parse {
                        path: origin.to_path_buf(),
                        line: lineno,
                        reason: format!("duplicate checkpoint for step {step}"),
                    });
                }
                *entry = CheckpointData {
                    losses,
                    gold_probs,
                    pred_dists,
                };
            }
            LogRecord::GradNorms { step, norms } => grad_norms.push(GradNormRecord { step, norms }),
            LogRecord::GroupCosine {
                step,
                cosine_clean_vs_contested,
            } => cosines.push(CosineRecord {
                step,
                cosine: cosine_clean_vs_contested,
            }),
        }
    }
    let meta = meta.ok_or_else(|| Error::Header("no meta record".into()))?;
    let trajectories = align(&meta, &checkpoints)?;
    Ok(RunLog {
        meta,
        trajectories,
        grad_norms,
        cosines,
    })
}

fn align(meta: &RunMeta, checkpoints: &BTreeMap<u64, CheckpointData>) -> Result<Vec<LossTrajectory>> {
    if let Some(extra) = checkpoints.keys().find(|s| meta.schedule.position(**s).is_none()) {
        return Err(Error::Header(format!("checkpoint step {extra} is not in the schedule")));
    }
    let uids: BTreeSet<&String> = checkpoints.values().flat_map(|c| c.losses.keys()).collect();
    if uids.is_empty() {
        return Err(Error::Header("log contains no checkpoint records".into()));
    }
    let with_probs = checkpoints.values().any(|c| c.gold_probs.is_some());
    let with_dists = checkpoints.values().any(|c| c.pred_dists.is_some());
    let first_uid = uids.iter().next().map(|u| u.to_string()).unwrap_or_default();
    let mut out = Vec::with_capacity(uids.len());
    for uid in uids {
        let t_len = meta.schedule.len();
        let mut losses = Vec::with_capacity(t_len);
        let mut probs = Vec::with_capacity(if with_probs { t_len } else { 0 });
        let mut dists = Vec::with_capacity(if with_dists { t_len } else { 0 });
        for &step in meta.schedule.steps() {
            let missing = || Error::Alignment {
                uid: uid.clone(),
                step,
            };
            let cp = checkpoints.get(&step).ok_or_else(|| Error::Alignment {
                uid: first_uid.clone(),
                step,
            })?;
            losses.push(*cp.losses.get(uid).ok_or_else(missing)?);
            if with_probs {
                let p = cp.gold_probs.as_ref().and_then(|m| m.get(uid)).ok_or_else(missing)?;
                probs.push(*p);
            }
            if with_dists {
                let d = cp.pred_dists.as_ref().and_then(|m| m.get(uid)).ok_or_else(missing)?;
                dists.push(d.clone());
            }
        }
        let traj = LossTrajectory {
            uid: uid.clone(),
            losses,
            gold_probs: with_probs.then_some(probs),
            pred_dists: with_dists.then_some(dists),
        };
        traj.validate()?;
        out.push(traj);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Join
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedRow {
    pub uid: String,
    pub entropy: f64,
    pub bin: String,
    pub bin_index: usize,
    pub gold: usize,
    pub aulc: f64,
    pub delta: f64,
    pub confidence: Option<f64>,
    pub variability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedTable {
    pub rows: Vec<JoinedRow>,
    pub dropped_annotations: usize,
    pub dropped_trajectories: usize,
}

impl JoinedTable {
    pub fn entropies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.entropy).collect()
    }

    pub fn aulcs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.aulc).collect()
    }
}

/// Aligns annotations with trajectories on uid, one row per shared uid.
///
/// Cartography statistics are filled in when the trajectories carry gold
/// probabilities and `epoch_checkpoints` is non-empty.
pub fn join(
    records: &[AnnotationRecord],
    trajs: &[LossTrajectory],
    scheme: &BinningScheme,
    epoch_checkpoints: &[usize],
) -> Result<JoinedTable> {
    let by_uid: HashMap<&str, &LossTrajectory> = trajs.iter().map(|t| (t.uid.as_str(), t)).collect();
    let mut rows = Vec::new();
    for rec in records {
        let Some(traj) = by_uid.get(rec.uid.as_str()) else {
            continue;
        };
        let entropy = rec.entropy()?;
        let bin: BinLabel = categorize_bounded(entropy, rec.num_classes(), scheme)?;
        let carto = if traj.gold_probs.is_some() && !epoch_checkpoints.is_empty() {
            Some(cartography_stats(traj, epoch_checkpoints)?)
        } else {
            None
        };
        rows.push(JoinedRow {
            uid: rec.uid.clone(),
            entropy,
            bin: bin.name(),
            bin_index: bin.index(),
            gold: rec.gold,
            aulc: aulc(traj)?,
            delta: delta_loss(traj)?,
            confidence: carto.map(|c| c.confidence),
            variability: carto.map(|c| c.variability),
        });
    }
    if rows.is_empty() {
        return Err(Error::Join("annotations and trajectories share no uid".into()));
    }
    rows.sort_by(|a, b| a.uid.cmp(&b.uid));
    Ok(JoinedTable {
        dropped_annotations: records.len() - rows.len(),
        dropped_trajectories: trajs.len() - rows.len(),
        rows,
    })
}
