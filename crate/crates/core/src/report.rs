//! Report emission: typed tables written as CSV, plot-ready series, result
//! directories for manifest runs, and atomic file writes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationRecord, BinningScheme, categorize_bounded, write_annotations};
use crate::error::{Error, Result};
use crate::protocols::{
    ConditionSummary, ManifestOutcome, ProtocolReport, RunAnalysis, Verdicts,
};

/// Significant digits kept in CSV numeric cells.
pub const CSV_SIGNIFICANT_DIGITS: usize = 6;

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Int,
    Num,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn int(name: &str) -> Self {
        Self { name: name.into(), kind: ColumnKind::Int }
    }
    pub fn num(name: &str) -> Self {
        Self { name: name.into(), kind: ColumnKind::Num }
    }
    pub fn text(name: &str) -> Self {
        Self { name: name.into(), kind: ColumnKind::Text }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Int(i64),
    /// Already rounded to [`CSV_SIGNIFICANT_DIGITS`].
    Num(f64),
    Text(String),
    Missing,
}

/// Rounds to `digits` significant digits.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x).parse().unwrap_or(x)
}

impl Cell {
    pub fn num(x: f64) -> Self {
        if x.is_nan() {
            Cell::Missing
        } else {
            Cell::Num(round_sig(x, CSV_SIGNIFICANT_DIGITS))
        }
    }

    pub fn opt_num(x: Option<f64>) -> Self {
        x.map_or(Cell::Missing, Cell::num)
    }

    pub fn int(x: impl TryInto<i64>) -> Self {
        x.try_into().map_or(Cell::Missing, Cell::Int)
    }

    pub fn text(s: impl Into<String>) -> Self {
        Cell::Text(s.into())
    }

    pub fn bool(b: bool) -> Self {
        Cell::Text(if b { "true" } else { "false" }.into())
    }

    fn kind_matches(&self, kind: ColumnKind) -> bool {
        matches!(
            (self, kind),
            (Cell::Missing, _) | (Cell::Int(_), ColumnKind::Int) | (Cell::Num(_), ColumnKind::Num) | (Cell::Text(_), ColumnKind::Text)
        )
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Num(v) if v.is_infinite() => f.write_str(if *v > 0.0 { "inf" } else { "-inf" }),
            Cell::Num(v) if *v != 0.0 && !(1e-4..1e9).contains(&v.abs()) => write!(f, "{v:e}"),
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Missing => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub name: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Cell>>,
    /// Flags attached to the table, emitted as `#` lines after the rows.
    pub footnotes: Vec<String>,
}

impl ReportTable {
    pub fn new(name: &str, columns: Vec<Column>) -> Self {
        Self {
            name: name.into(),
            columns,
            rows: Vec::new(),
            footnotes: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Format(format!(
                "table {}: row has {} cells for {} columns",
                self.name,
                row.len(),
                self.columns.len()
            )));
        }
        if let Some((c, _)) = self.columns.iter().zip(&row).find(|(c, v)| !v.kind_matches(c.kind)) {
            return Err(Error::Format(format!("table {}: cell type mismatch in column {}", self.name, c.name)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn footnote(&mut self, note: impl Into<String>) {
        self.footnotes.push(note.into());
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt_err = |e: csv::Error| Error::Format(format!("table {}: {e}", self.name));
        w.write_record(self.columns.iter().map(|c| c.name.as_str())).map_err(fmt_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.to_string())).map_err(fmt_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        let mut out = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
        for note in &self.footnotes {
            out.push_str("# ");
            out.push_str(note);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses CSV written by [`ReportTable::to_csv`] against a known schema.
    pub fn parse_csv(name: &str, columns: Vec<Column>, text: &str) -> Result<Self> {
        let mut body = String::new();
        let mut footnotes = Vec::new();
        for line in text.lines() {
            match line.strip_prefix("# ") {
                Some(note) => footnotes.push(note.to_string()),
                None => {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        let fmt_err = |e: String| Error::Format(format!("table {name}: {e}"));
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let header = r.headers().map_err(|e| fmt_err(e.to_string()))?.clone();
        let expected: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(fmt_err(format!("header {:?} does not match schema {expected:?}", header)));
        }
        let mut table = ReportTable::new(name, columns);
        for rec in r.records() {
            let rec = rec.map_err(|e| fmt_err(e.to_string()))?;
            let row = rec
                .iter()
                .zip(&table.columns)
                .map(|(v, c)| parse_cell(v, c.kind).ok_or_else(|| fmt_err(format!("bad value `{v}` in {}", c.name))))
                .collect::<Result<Vec<_>>>()?;
            table.push(row)?;
        }
        table.footnotes = footnotes;
        Ok(table)
    }
}

fn parse_cell(v: &str, kind: ColumnKind) -> Option<Cell> {
    if v.is_empty() {
        return Some(Cell::Missing);
    }
    Some(match kind {
        ColumnKind::Int => Cell::Int(v.parse().ok()?),
        ColumnKind::Num => Cell::Num(match v {
            "inf" => f64::INFINITY,
            "-inf" => f64::NEG_INFINITY,
            _ => v.parse().ok()?,
        }),
        ColumnKind::Text => Cell::Text(v.to_string()),
    })
}

// ---------------------------------------------------------------------------
// Atomic writes
// ---------------------------------------------------------------------------

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("renaming into {}", path.display()), e)
    })
}

/// A set of files staged in memory and written together.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Staged {
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, rel: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((rel.into(), bytes.into()));
    }

    pub fn add_table(&mut self, rel: impl Into<PathBuf>, table: &ReportTable) -> Result<()> {
        self.add(rel, table.to_csv()?);
        Ok(())
    }

    pub fn add_json<T: Serialize>(&mut self, rel: impl Into<PathBuf>, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        self.add(rel, s);
        Ok(())
    }

    /// Writes every staged file under `root`, each atomically.
    pub fn commit(&self, root: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (rel, bytes) in &self.files {
            let path = root.join(rel);
            write_atomic(&path, bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

// ---------------------------------------------------------------------------
// Analysis tables
// ---------------------------------------------------------------------------

/// Everything `plotdata` needs, serialized at full precision.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub runs: Vec<RunAnalysis>,
    #[serde(default)]
    pub conditions: Vec<ConditionSummary>,
    #[serde(default)]
    pub verdicts: Option<Verdicts>,
}

impl Bundle {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

fn main_correlation_columns(partial: bool) -> Vec<Column> {
    let mut cols = vec![
        Column::text("run_id"),
        Column::text("method"),
        Column::int("rank"),
        Column::int("seed"),
        Column::int("n"),
        Column::num("rho"),
        Column::num("rho_p"),
        Column::num("tau"),
        Column::num("tau_p"),
    ];
    if partial {
        cols.extend([Column::num("partial_rho"), Column::num("partial_p")]);
    }
    cols.extend([Column::int("n_seeds"), Column::num("rho_std"), Column::num("tau_std")]);
    cols
}

/// One row per run, then one mean/std row per condition when any condition
/// has more than one seed.
pub fn main_correlation_table(runs: &[RunAnalysis], conditions: &[ConditionSummary]) -> Result<ReportTable> {
    let partial = runs.iter().any(|r| r.partial.is_some());
    let mut t = ReportTable::new("main_correlation", main_correlation_columns(partial));
    for r in runs {
        let mut row = vec![
            Cell::text(&r.run_id),
            Cell::text(r.method.to_string()),
            Cell::int(r.rank),
            Cell::int(r.seed),
            Cell::int(r.n),
            Cell::num(r.spearman.coefficient),
            Cell::num(r.spearman.p_value),
            Cell::num(r.kendall.coefficient),
            Cell::num(r.kendall.p_value),
        ];
        if partial {
            row.push(Cell::opt_num(r.partial.as_ref().map(|p| p.coefficient)));
            row.push(Cell::opt_num(r.partial.as_ref().map(|p| p.p_value)));
        }
        row.extend([Cell::int(1), Cell::Missing, Cell::Missing]);
        t.push(row)?;
    }
    for c in conditions.iter().filter(|c| c.seeds.len() > 1 || c.reduced_seeds) {
        let mut row = vec![
            Cell::text(format!("mean:{}", c.label)),
            Cell::text(c.method.to_string()),
            Cell::int(c.rank),
            Cell::Missing,
            Cell::Missing,
            Cell::num(c.rho.mean),
            Cell::num(c.p_value),
            Cell::num(c.tau.mean),
            Cell::Missing,
        ];
        if partial {
            row.push(Cell::opt_num(c.partial.map(|p| p.mean)));
            row.push(Cell::Missing);
        }
        row.extend([Cell::int(c.seeds.len()), Cell::num(c.rho.std), Cell::num(c.tau.std)]);
        t.push(row)?;
        if c.reduced_seeds {
            t.footnote(format!("{}: reduced seeds ({} finished)", c.label, c.seeds.len()));
        }
    }
    if conditions.iter().any(|c| c.seeds.len() > 1) {
        t.footnote("mean rows: rho_p is the median per-seed p-value; std is the sample standard deviation across seeds");
    }
    Ok(t)
}

pub fn delta_table(runs: &[RunAnalysis], conditions: &[ConditionSummary]) -> Result<ReportTable> {
    let mut t = ReportTable::new(
        "delta_by_category",
        vec![
            Column::text("run_id"),
            Column::int("seed"),
            Column::text("category"),
            Column::int("n"),
            Column::num("delta_mean"),
            Column::num("delta_std"),
            Column::num("aulc_mean"),
            Column::num("aulc_std"),
        ],
    );
    for r in runs {
        for c in &r.by_category {
            t.push(vec![
                Cell::text(&r.run_id),
                Cell::int(r.seed),
                Cell::text(&c.label),
                Cell::int(c.n),
                Cell::num(c.delta_mean),
                Cell::num(c.delta_std),
                Cell::num(c.aulc_mean),
                Cell::num(c.aulc_std),
            ])?;
        }
    }
    for c in conditions.iter().filter(|c| c.seeds.len() > 1) {
        for (label, agg) in &c.delta_by_category {
            t.push(vec![
                Cell::text(format!("mean:{}", c.label)),
                Cell::Missing,
                Cell::text(label),
                Cell::int(agg.n),
                Cell::num(agg.mean),
                Cell::num(agg.std),
                Cell::Missing,
                Cell::Missing,
            ])?;
        }
    }
    if conditions.iter().any(|c| c.seeds.len() > 1) {
        t.footnote("mean rows: n counts seeds; delta_std is across per-seed category means");
    }
    Ok(t)
}

pub fn regression_table(runs: &[RunAnalysis]) -> Result<ReportTable> {
    let mut t = ReportTable::new(
        "regression",
        vec![
            Column::text("run_id"),
            Column::text("term"),
            Column::num("coefficient"),
            Column::num("std_error"),
            Column::num("t"),
            Column::num("p"),
            Column::num("r_squared"),
            Column::int("n"),
        ],
    );
    for r in runs {
        let g = &r.regression;
        for i in 0..g.names.len() {
            t.push(vec![
                Cell::text(&r.run_id),
                Cell::text(&g.names[i]),
                Cell::num(g.coefficients[i]),
                Cell::num(g.std_errors[i]),
                Cell::num(g.t_stats[i]),
                Cell::num(g.p_values[i]),
                Cell::num(g.r_squared),
                Cell::int(g.n),
            ])?;
        }
    }
    if runs.iter().any(|r| r.regression.standardized) {
        t.footnote("standardized: response and predictors z-scored before fitting");
    }
    Ok(t)
}

pub fn calibration_table(runs: &[RunAnalysis]) -> Result<ReportTable> {
    let mut t = ReportTable::new(
        "calibration",
        vec![
            Column::text("run_id"),
            Column::text("category"),
            Column::int("n"),
            Column::num("mean_prediction_entropy"),
            Column::num("mean_max_confidence"),
            Column::num("ece"),
            Column::int("bins"),
        ],
    );
    for r in runs {
        let Some(cal) = &r.calibration else { continue };
        for row in std::iter::once(&cal.overall).chain(&cal.by_category) {
            t.push(vec![
                Cell::text(&r.run_id),
                Cell::text(&row.label),
                Cell::int(row.n),
                Cell::num(row.mean_prediction_entropy),
                Cell::num(row.mean_max_confidence),
                Cell::num(row.ece),
                Cell::int(cal.bins),
            ])?;
        }
        for label in &cal.omitted {
            t.footnote(format!("{}: category {label} omitted (no examples)", r.run_id));
        }
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Entropy summary
// ---------------------------------------------------------------------------

pub fn entropy_tables(records: &[AnnotationRecord], scheme: &BinningScheme) -> Result<(ReportTable, ReportTable)> {
    let mut per_uid = ReportTable::new(
        "entropy",
        vec![Column::text("uid"), Column::num("entropy"), Column::text("category")],
    );
    let labels = scheme.labels();
    let mut sums = vec![(0usize, 0.0f64); labels.len()];
    for r in records {
        let h = r.entropy()?;
        let bin = categorize_bounded(h, r.num_classes(), scheme)?;
        sums[bin.index()].0 += 1;
        sums[bin.index()].1 += h;
        per_uid.push(vec![Cell::text(&r.uid), Cell::num(h), Cell::text(bin.name())])?;
    }
    let mut summary = ReportTable::new(
        "entropy_summary",
        vec![
            Column::text("category"),
            Column::int("n"),
            Column::num("fraction"),
            Column::num("mean_entropy"),
        ],
    );
    let total = records.len() as f64;
    for (label, (n, s)) in labels.iter().zip(&sums) {
        summary.push(vec![
            Cell::text(label),
            Cell::int(*n),
            Cell::num(*n as f64 / total),
            if *n > 0 { Cell::num(s / *n as f64) } else { Cell::Missing },
        ])?;
    }
    let all: f64 = sums.iter().map(|(_, s)| s).sum();
    summary.push(vec![Cell::text("all"), Cell::int(records.len()), Cell::num(1.0), Cell::num(all / total)])?;
    Ok((per_uid, summary))
}

// ---------------------------------------------------------------------------
// Plot series
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    Hero,
    Gradnorm,
    Cosine,
    Calibration,
    Cartography,
}

impl Figure {
    pub const ALL: [Figure; 5] = [Self::Hero, Self::Gradnorm, Self::Cosine, Self::Calibration, Self::Cartography];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hero => "hero",
            Self::Gradnorm => "gradnorm",
            Self::Cosine => "cosine",
            Self::Calibration => "calibration",
            Self::Cartography => "cartography",
        }
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|f| f.name()).collect();
            Error::Config(format!("unknown figure `{s}`; valid figures: {}", names.join(", ")))
        })
    }
}

/// Plot-ready series for `figure` across every run in the bundle.
pub fn plot_series(bundle: &Bundle, figure: Figure) -> Result<ReportTable> {
    let mut t = match figure {
        Figure::Hero => ReportTable::new(
            "hero",
            vec![
                Column::text("run_id"),
                Column::text("category"),
                Column::int("step"),
                Column::int("n"),
                Column::num("mean_loss"),
                Column::num("ci_half_width"),
            ],
        ),
        Figure::Gradnorm => ReportTable::new(
            "gradnorm",
            vec![
                Column::text("run_id"),
                Column::int("step"),
                Column::text("uid"),
                Column::text("category"),
                Column::num("grad_norm"),
            ],
        ),
        Figure::Cosine => ReportTable::new(
            "cosine",
            vec![Column::text("run_id"), Column::int("step"), Column::num("cosine")],
        ),
        Figure::Calibration => return calibration_table(&bundle.runs).map(|mut t| {
            t.name = "calibration".into();
            t
        }),
        Figure::Cartography => ReportTable::new(
            "cartography",
            vec![
                Column::text("run_id"),
                Column::text("uid"),
                Column::text("category"),
                Column::num("confidence"),
                Column::num("variability"),
                Column::num("aulc"),
            ],
        ),
    };
    for r in &bundle.runs {
        match figure {
            Figure::Hero => {
                for line in &r.hero {
                    for (i, step) in r.steps.iter().enumerate() {
                        t.push(vec![
                            Cell::text(&r.run_id),
                            Cell::text(&line.label),
                            Cell::int(*step),
                            Cell::int(line.n),
                            Cell::num(line.mean[i]),
                            Cell::num(line.ci_half_width[i]),
                        ])?;
                    }
                }
            }
            Figure::Gradnorm => {
                if let Some(g) = &r.grad_norms {
                    for row in &g.rows {
                        t.push(vec![
                            Cell::text(&r.run_id),
                            Cell::int(g.step),
                            Cell::text(&row.uid),
                            Cell::text(&row.label),
                            Cell::num(row.norm),
                        ])?;
                    }
                }
            }
            Figure::Cosine => {
                for c in &r.cosines {
                    t.push(vec![Cell::text(&r.run_id), Cell::int(c.step), Cell::opt_num(c.cosine)])?;
                }
            }
            Figure::Cartography => {
                for e in &r.examples {
                    t.push(vec![
                        Cell::text(&r.run_id),
                        Cell::text(&e.uid),
                        Cell::text(&e.label),
                        Cell::opt_num(e.confidence),
                        Cell::opt_num(e.variability),
                        Cell::num(e.aulc),
                    ])?;
                }
            }
            Figure::Calibration => unreachable!(),
        }
    }
    match figure {
        Figure::Hero => t.footnote("ci_half_width = 1.96 * sd / sqrt(n), normal approximation"),
        Figure::Gradnorm if t.rows.is_empty() => t.footnote("no gradient-norm records; rerun with track_gradients"),
        Figure::Cosine if t.rows.is_empty() => t.footnote("no cosine records; rerun with track_gradients"),
        _ => {}
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Manifest results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub run_id: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultIndex {
    pub protocol: String,
    pub runs: Vec<IndexEntry>,
    pub reports: Vec<String>,
    pub annotations: Vec<String>,
}

fn protocol_table(report: &ProtocolReport) -> Result<ReportTable> {
    Ok(match report {
        ProtocolReport::Train { seed, bulk_accuracy } => {
            let mut t = ReportTable::new("train", vec![Column::int("seed"), Column::num("bulk_accuracy")]);
            t.push(vec![Cell::int(*seed), Cell::num(*bulk_accuracy)])?;
            t
        }
        ProtocolReport::Sweep(r) => {
            let mut t = ReportTable::new(
                "sweep",
                vec![Column::int("rank"), Column::num("rho"), Column::num("p"), Column::num("tau")],
            );
            for row in &r.rows {
                t.push(vec![Cell::int(row.rank), Cell::num(row.rho), Cell::num(row.p_value), Cell::num(row.tau)])?;
            }
            match r.monotonicity {
                Some(m) => t.footnote(format!("monotonicity (Spearman of rank order vs rho): {}", round_sig(m, 6))),
                None => t.footnote("monotonicity undefined (fewer than two distinct rank results)"),
            }
            for f in &r.failures {
                t.footnote(format!("partial sweep: {f}"));
            }
            t
        }
        ProtocolReport::Noise(r) => {
            let mut t = ReportTable::new(
                "noise",
                vec![
                    Column::int("seed"),
                    Column::num("fraction"),
                    Column::int("clean_n"),
                    Column::int("replaced"),
                    Column::int("changed"),
                    Column::num("clean_aulc_mean"),
                    Column::num("wilcoxon_p"),
                    Column::num("cohens_d"),
                    Column::num("rho"),
                    Column::num("rho_p"),
                ],
            );
            for row in &r.rows {
                t.push(vec![
                    Cell::int(row.seed),
                    Cell::num(row.fraction),
                    Cell::int(row.clean_n),
                    Cell::int(row.replaced),
                    Cell::int(row.changed),
                    Cell::num(row.clean_aulc_mean),
                    Cell::num(row.wilcoxon.p_value),
                    Cell::opt_num(row.cohens_d),
                    Cell::num(row.rho),
                    Cell::num(row.p_value),
                ])?;
            }
            for (seed, ok) in &r.non_decreasing {
                t.footnote(format!("seed {seed}: clean AULC non-decreasing in fraction: {ok}"));
            }
            t
        }
        ProtocolReport::Softlabel(r) => {
            let mut t = ReportTable::new(
                "softlabel",
                vec![Column::text("mode"), Column::num("delta_contested"), Column::num("delta_clean"), Column::num("rho")],
            );
            t.push(vec![Cell::text("hard"), Cell::num(r.hard_contested_delta), Cell::num(r.hard_clean_delta), Cell::num(r.hard_rho)])?;
            t.push(vec![Cell::text("soft"), Cell::num(r.soft_contested_delta), Cell::num(r.soft_clean_delta), Cell::num(r.soft_rho)])?;
            t.footnote(format!("tracking loss: {}", r.tracking_loss));
            t.footnote(format!("contested sign agreement: {}", r.sign_agreement));
            t
        }
        ProtocolReport::Composition(r) => {
            let mut t = ReportTable::new(
                "composition",
                vec![Column::text("mode"), Column::int("trained"), Column::int("tracked"), Column::num("rho"), Column::num("p")],
            );
            for row in &r.rows {
                t.push(vec![
                    Cell::text(row.mode.name()),
                    Cell::int(row.trained),
                    Cell::int(row.tracked),
                    Cell::num(row.rho),
                    Cell::num(row.p_value),
                ])?;
            }
            t.footnote(format!("rho spread: {}", round_sig(r.spread, 6)));
            t
        }
        ProtocolReport::Matrix(r) => {
            let mut t = ReportTable::new(
                "matrix",
                vec![
                    Column::text("condition"),
                    Column::int("n_seeds"),
                    Column::num("rho_mean"),
                    Column::num("rho_std"),
                    Column::num("tau_mean"),
                    Column::num("tau_std"),
                    Column::num("p_median"),
                    Column::text("bonferroni"),
                    Column::text("bh"),
                ],
            );
            for (i, c) in r.conditions.iter().enumerate() {
                let verdict = |f: fn(&Verdicts) -> &Vec<bool>| {
                    r.verdicts.as_ref().map_or(Cell::Missing, |v| Cell::bool(f(v)[i]))
                };
                t.push(vec![
                    Cell::text(&c.label),
                    Cell::int(c.seeds.len()),
                    Cell::num(c.rho.mean),
                    Cell::num(c.rho.std),
                    Cell::num(c.tau.mean),
                    Cell::num(c.tau.std),
                    Cell::num(c.p_value),
                    verdict(|v| &v.bonferroni),
                    verdict(|v| &v.benjamini_hochberg),
                ])?;
                if c.reduced_seeds {
                    t.footnote(format!("{}: reduced seeds", c.label));
                }
            }
            if let Some(v) = &r.verdicts {
                t.footnote(format!("alpha {} m {} bonferroni threshold {}", v.alpha, v.m, round_sig(v.bonferroni_threshold, 6)));
            }
            for (label, _) in &r.failed_conditions {
                t.footnote(format!("{label}: every seed failed"));
            }
            t
        }
    })
}

fn bundle_for(runs: &[RunAnalysis], report: &ProtocolReport) -> Bundle {
    let (conditions, verdicts) = match report {
        ProtocolReport::Matrix(m) => (m.conditions.clone(), m.verdicts.clone()),
        _ => (Vec::new(), None),
    };
    Bundle {
        runs: runs.to_vec(),
        conditions,
        verdicts,
    }
}

/// Stages every artifact of a manifest run: logs, tables, bundle, tracked
/// annotations and the index.
pub fn stage_results(outcome: &ManifestOutcome) -> Result<(Staged, ResultIndex)> {
    let mut staged = Staged::default();
    let protocol = outcome.protocol.name();
    let mut index = ResultIndex {
        protocol: protocol.to_string(),
        runs: Vec::new(),
        reports: Vec::new(),
        annotations: Vec::new(),
    };
    for run in &outcome.runs {
        let rel = format!("logs/{}.jsonl", run.log.meta.run_id);
        staged.add(&rel, run.log.emit());
        index.runs.push(IndexEntry {
            run_id: run.log.meta.run_id.clone(),
            status: "ok".into(),
            seed: Some(run.log.meta.seed),
            log: Some(rel),
            error: None,
        });
    }
    for (label, err) in &outcome.failures {
        index.runs.push(IndexEntry {
            run_id: label.clone(),
            status: "failed".into(),
            seed: None,
            log: None,
            error: Some(err.clone()),
        });
    }
    let analyses: Vec<RunAnalysis> = outcome.runs.iter().map(|r| r.analysis.clone()).collect();
    let bundle = bundle_for(&analyses, &outcome.report);
    let mut reports: Vec<(String, ReportTable)> = vec![
        (format!("reports/{protocol}.csv"), protocol_table(&outcome.report)?),
        ("reports/main_correlation.csv".into(), main_correlation_table(&analyses, &bundle.conditions)?),
        ("reports/delta_by_category.csv".into(), delta_table(&analyses, &bundle.conditions)?),
        ("reports/regression.csv".into(), regression_table(&analyses)?),
    ];
    if analyses.iter().any(|a| a.calibration.is_some()) {
        reports.push(("reports/calibration.csv".into(), calibration_table(&analyses)?));
    }
    for (rel, table) in &reports {
        staged.add_table(rel, table)?;
        index.reports.push(rel.clone());
    }
    let summary_rel = format!("reports/{protocol}.json");
    staged.add_json(&summary_rel, &outcome.report)?;
    staged.add_json("reports/bundle.json", &bundle)?;
    index.reports.extend([summary_rel, "reports/bundle.json".to_string()]);
    for (seed, records) in &outcome.annotations {
        let rel = format!("annotations-s{seed}.jsonl");
        staged.add(&rel, write_annotations(records));
        index.annotations.push(rel);
    }
    staged.add_json("index.json", &index)?;
    Ok((staged, index))
}

/// Index written when a protocol aborts before producing results.
pub fn failure_index(protocol: &str, error: &Error) -> ResultIndex {
    ResultIndex {
        protocol: protocol.to_string(),
        runs: vec![IndexEntry {
            run_id: protocol.to_string(),
            status: "failed".into(),
            seed: None,
            log: None,
            error: Some(error.to_string()),
        }],
        reports: Vec::new(),
        annotations: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> Vec<Column> {
        vec![Column::text("name"), Column::int("k"), Column::num("x")]
    }

    #[test]
    fn rounding_to_six_digits() {
        assert_eq!(round_sig(0.123456789, 6), 0.123457);
        assert_eq!(round_sig(123456789.0, 6), 123457000.0);
        assert_eq!(round_sig(-1.5e-9, 6), -1.5e-9);
        assert_eq!(Cell::num(f64::NAN), Cell::Missing);
    }

    #[test]
    fn schema_is_enforced() {
        let mut t = ReportTable::new("t", schema());
        assert!(t.push(vec![Cell::text("a"), Cell::int(1)]).is_err());
        assert!(t.push(vec![Cell::text("a"), Cell::num(1.0), Cell::num(1.0)]).is_err());
        assert!(t.push(vec![Cell::text("a"), Cell::Missing, Cell::num(1.0)]).is_ok());
        assert!(ReportTable::parse_csv("t", vec![Column::text("other")], &t.to_csv().unwrap()).is_err());
    }

    #[test]
    fn footnotes_and_quoting_round_trip() {
        let mut t = ReportTable::new("t", schema());
        t.push(vec![Cell::text("a, \"quoted\""), Cell::int(-3), Cell::num(f64::INFINITY)]).unwrap();
        t.push(vec![Cell::text(""), Cell::Missing, Cell::Missing]).unwrap();
        t.footnote("reduced seeds");
        let back = ReportTable::parse_csv("t", schema(), &t.to_csv().unwrap()).unwrap();
        // an empty text cell reads back as missing
        assert_eq!(back.rows[0], t.rows[0]);
        assert_eq!(back.rows[1][1], Cell::Missing);
        assert_eq!(back.footnotes, t.footnotes);
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in proptest::collection::vec(("[a-z ,\"]{1,8}", any::<i64>(), -1e12f64..1e12, any::<bool>()), 0..20)) {
            let mut t = ReportTable::new("t", schema());
            for (s, k, x, missing) in rows {
                t.push(vec![Cell::text(s), Cell::Int(k), if missing { Cell::Missing } else { Cell::num(x) }]).unwrap();
            }
            t.footnote("note");
            let back = ReportTable::parse_csv("t", schema(), &t.to_csv().unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn unknown_figure_lists_names() {
        let err = "histogram".parse::<Figure>().unwrap_err().to_string();
        for f in Figure::ALL {
            assert!(err.contains(f.name()));
        }
    }
}
