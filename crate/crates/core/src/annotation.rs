//! Annotator label distributions, annotation entropy, and entropy binning.
//!
//! Entropy is always measured in nats. Records are loaded from line-delimited
//! JSON where every line carries a `uid` and an integer `counts` array.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default clean/ambiguous boundary in nats.
pub const CLEAN_THRESHOLD: f64 = 0.4;
/// Default ambiguous/contested boundary in nats.
pub const CONTESTED_THRESHOLD: f64 = 0.7;

const ENTROPY_SLACK: f64 = 1e-12;

/// One example's aggregated annotator votes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub uid: String,
    pub counts: Vec<u32>,
    pub gold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<serde_json::Value>,
}

impl AnnotationRecord {
    /// Builds a record, deriving the gold label from the vote counts.
    pub fn new(uid: impl Into<String>, counts: Vec<u32>) -> Result<Self> {
        let uid = uid.into();
        if counts.is_empty() {
            return Err(Error::InvalidRecord {
                uid,
                reason: "no classes".into(),
            });
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::InvalidRecord {
                uid,
                reason: "counts sum to zero".into(),
            });
        }
        let gold = majority_label(&counts);
        Ok(Self {
            uid,
            counts,
            gold,
            text: None,
        })
    }

    pub fn with_text(mut self, text: serde_json::Value) -> Self {
        self.text = Some(text);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Empirical annotator distribution `counts / total`.
    pub fn distribution(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }

    pub fn entropy(&self) -> Result<f64> {
        entropy(&self.counts).map_err(|_| Error::InvalidRecord {
            uid: self.uid.clone(),
            reason: "counts sum to zero".into(),
        })
    }

    /// Whitespace token count of the text payload, if there is one.
    ///
    /// Strings are tokenized directly; objects contribute their string
    /// fields, or a numeric `length` field when present.
    pub fn text_length(&self) -> Option<f64> {
        fn tokens(s: &str) -> usize {
            s.split_whitespace().count()
        }
        match self.text.as_ref()? {
            serde_json::Value::String(s) => Some(tokens(s) as f64),
            serde_json::Value::Object(map) => {
                if let Some(len) = map.get("length").and_then(|v| v.as_f64()) {
                    return Some(len);
                }
                let n: usize = map.values().filter_map(|v| v.as_str()).map(tokens).sum();
                Some(n as f64)
            }
            _ => None,
        }
    }
}

/// Index of the largest count; the lowest class index wins ties.
pub fn majority_label(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy (nats) of the empirical distribution behind `counts`.
pub fn entropy(counts: &[u32]) -> Result<f64> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total == 0 {
        return Err(Error::InvalidRecord {
            uid: String::new(),
            reason: "counts sum to zero".into(),
        });
    }
    let total = total as f64;
    // Summing in sorted order makes the result exactly invariant to class order.
    let mut nonzero: Vec<u32> = counts.iter().copied().filter(|&c| c > 0).collect();
    nonzero.sort_unstable();
    let h = -nonzero
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Shannon entropy (nats) of a probability vector, with `0 ln 0 = 0`.
///
/// No simplex validation happens here; callers that accept untrusted input
/// check it first.
pub fn distribution_entropy(p: &[f64]) -> f64 {
    let h = -p
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>();
    h.max(0.0)
}

// ---------------------------------------------------------------------------
// Categories and binning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyCategory {
    Clean,
    Ambiguous,
    Contested,
}

impl EntropyCategory {
    pub const ALL: [EntropyCategory; 3] = [
        EntropyCategory::Clean,
        EntropyCategory::Ambiguous,
        EntropyCategory::Contested,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EntropyCategory::Clean => "clean",
            EntropyCategory::Ambiguous => "ambiguous",
            EntropyCategory::Contested => "contested",
        }
    }
}

impl fmt::Display for EntropyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BinningScheme {
    FixedThresholds { lower: f64, upper: f64 },
    /// `cuts` holds the k-1 interior cut points, non-decreasing.
    Percentile { cuts: Vec<f64> },
}

impl Default for BinningScheme {
    fn default() -> Self {
        BinningScheme::FixedThresholds {
            lower: CLEAN_THRESHOLD,
            upper: CONTESTED_THRESHOLD,
        }
    }
}

impl BinningScheme {
    pub fn fixed(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && lower < upper && upper.is_finite()) {
            return Err(Error::Domain(format!(
                "fixed thresholds must satisfy 0 < lower < upper (got {lower}, {upper})"
            )));
        }
        Ok(BinningScheme::FixedThresholds { lower, upper })
    }

    pub fn num_bins(&self) -> usize {
        match self {
            BinningScheme::FixedThresholds { .. } => 3,
            BinningScheme::Percentile { cuts } => cuts.len() + 1,
        }
    }

    /// Human-readable label for each bin, in bin order.
    pub fn labels(&self) -> Vec<String> {
        match self {
            BinningScheme::FixedThresholds { .. } => EntropyCategory::ALL
                .iter()
                .map(|c| c.name().to_string())
                .collect(),
            BinningScheme::Percentile { cuts } => {
                (1..=cuts.len() + 1).map(|j| format!("q{j}")).collect()
            }
        }
    }
}

/// Result of placing an entropy value into a bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinLabel {
    Category(EntropyCategory),
    Quantile { bin: usize, of: usize },
}

impl BinLabel {
    pub fn index(self) -> usize {
        match self {
            BinLabel::Category(c) => c.index(),
            BinLabel::Quantile { bin, .. } => bin,
        }
    }

    pub fn category(self) -> Option<EntropyCategory> {
        match self {
            BinLabel::Category(c) => Some(c),
            BinLabel::Quantile { .. } => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            BinLabel::Category(c) => c.name().to_string(),
            BinLabel::Quantile { bin, .. } => format!("q{}", bin + 1),
        }
    }
}

impl fmt::Display for BinLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Places entropy `h` into a bin of `scheme`.
///
/// Fixed thresholds give half-open categories `[0, lower)`, `[lower, upper)`,
/// `[upper, ..]`. Percentile bins are half-open with the last bin closed.
pub fn categorize(h: f64, scheme: &BinningScheme) -> Result<BinLabel> {
    if !(h >= 0.0) {
        return Err(Error::EntropyDomain(h));
    }
    match scheme {
        BinningScheme::FixedThresholds { lower, upper } => {
            let cat = if h < *lower {
                EntropyCategory::Clean
            } else if h < *upper {
                EntropyCategory::Ambiguous
            } else {
                EntropyCategory::Contested
            };
            Ok(BinLabel::Category(cat))
        }
        BinningScheme::Percentile { cuts } => {
            let bin = cuts.iter().take_while(|&&c| h >= c).count();
            Ok(BinLabel::Quantile {
                bin,
                of: cuts.len() + 1,
            })
        }
    }
}

/// Like [`categorize`] but checks `h` against the `ln C` ceiling first,
/// clamping values that exceed it by float noise only.
pub fn categorize_bounded(h: f64, num_classes: usize, scheme: &BinningScheme) -> Result<BinLabel> {
    let ceiling = (num_classes as f64).ln();
    if h > ceiling + ENTROPY_SLACK {
        return Err(Error::EntropyDomain(h));
    }
    categorize(h.min(ceiling), scheme)
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = prob * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Builds a `k`-bin percentile scheme with cuts at the `j/k` quantiles.
pub fn percentile_bins(entropies: &[f64], k: usize) -> Result<BinningScheme> {
    if k < 2 {
        return Err(Error::DegenerateBins(format!("need at least 2 bins, got {k}")));
    }
    if entropies.iter().any(|h| !h.is_finite()) {
        return Err(Error::DegenerateBins("non-finite entropy value".into()));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::DegenerateBins(format!(
            "{} distinct values cannot fill {k} bins",
            distinct.len()
        )));
    }
    let cuts: Vec<f64> = (1..k)
        .map(|j| quantile_sorted(&sorted, j as f64 / k as f64))
        .collect();
    let scheme = BinningScheme::Percentile { cuts };
    let mut sizes = vec![0usize; k];
    for &h in &sorted {
        sizes[categorize(h, &scheme)?.index()] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::DegenerateBins(format!(
            "bin {} is empty under heavy ties",
            empty + 1
        )));
    }
    Ok(scheme)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct RawRecord {
    uid: String,
    #[serde(alias = "label_count")]
    counts: Vec<i64>,
    #[serde(default)]
    gold: Option<i64>,
    #[serde(default, alias = "example")]
    text: Option<serde_json::Value>,
}

/// Stored gold label that disagrees with the recomputed majority vote.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldMismatch {
    pub line: usize,
    pub uid: String,
    pub stored: usize,
    pub recomputed: usize,
}

#[derive(Debug, Clone)]
pub struct LoadedAnnotations {
    pub records: Vec<AnnotationRecord>,
    pub warnings: Vec<GoldMismatch>,
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<LoadedAnnotations> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    parse_annotations(std::io::BufReader::new(file), path)
}

/// Parses annotation lines from any reader; `origin` is used in messages.
pub fn parse_annotations(reader: impl BufRead, origin: &Path) -> Result<LoadedAnnotations> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    let mut width = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", origin.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if raw.counts.iter().any(|&c| c < 0 || c > u32::MAX as i64) {
            return Err(parse_err(lineno, "counts must be non-negative integers".into()));
        }
        let counts: Vec<u32> = raw.counts.iter().map(|&c| c as u32).collect();
        match width {
            None => width = Some(counts.len()),
            Some(c) if c != counts.len() => {
                return Err(parse_err(
                    lineno,
                    format!("expected {c} classes, found {}", counts.len()),
                ))
            }
            _ => {}
        }
        let mut record =
            AnnotationRecord::new(raw.uid, counts).map_err(|e| parse_err(lineno, e.to_string()))?;
        if let Some(stored) = raw.gold {
            if stored < 0 || stored as usize >= record.num_classes() {
                return Err(parse_err(lineno, format!("gold label {stored} out of range")));
            }
            if stored as usize != record.gold {
                warnings.push(GoldMismatch {
                    line: lineno,
                    uid: record.uid.clone(),
                    stored: stored as usize,
                    recomputed: record.gold,
                });
            }
        }
        record.text = raw.text;
        if !seen.insert(record.uid.clone()) {
            return Err(Error::DuplicateUid {
                uid: record.uid,
                line: lineno,
            });
        }
        records.push(record);
    }
    Ok(LoadedAnnotations { records, warnings })
}

/// Serializes records in the line-delimited annotation format.
pub fn write_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("annotation records serialize"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub labels: Vec<String>,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub n: usize,
}

pub fn distribution_summary(
    records: &[AnnotationRecord],
    scheme: &BinningScheme,
) -> Result<DistributionSummary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("distribution summary needs records"));
    }
    let mut counts = vec![0usize; scheme.num_bins()];
    for r in records {
        let h = r.entropy()?;
        counts[categorize_bounded(h, r.num_classes(), scheme)?.index()] += 1;
    }
    let n = records.len();
    let fractions = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(DistributionSummary {
        labels: scheme.labels(),
        counts,
        fractions,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(uid: &str, counts: &[u32]) -> AnnotationRecord {
        AnnotationRecord::new(uid, counts.to_vec()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[1, 1, 1]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((entropy(&[1, 1, 1]).unwrap() - 1.0986).abs() < 1e-4);
        assert_eq!(entropy(&[100, 0, 0]).unwrap(), 0.0);
        assert!((entropy(&[50, 50, 0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(entropy(&[0, 0, 0]).is_err());
    }

    #[test]
    fn majority_breaks_ties_low() {
        assert_eq!(majority_label(&[3, 3, 1]), 0);
        assert_eq!(majority_label(&[1, 5, 5]), 1);
        assert_eq!(majority_label(&[10, 80, 10]), 1);
    }

    #[test]
    fn fixed_threshold_boundaries() {
        let s = BinningScheme::default();
        let cat = |h| categorize(h, &s).unwrap().category().unwrap();
        assert_eq!(cat(0.39), EntropyCategory::Clean);
        assert_eq!(cat(0.40), EntropyCategory::Ambiguous);
        assert_eq!(cat(0.70), EntropyCategory::Contested);
        assert_eq!(cat(0.0), EntropyCategory::Clean);
        assert!(categorize(-0.01, &s).is_err());
        assert!(categorize(f64::NAN, &s).is_err());
    }

    #[test]
    fn bounded_categorize_clamps_noise_only() {
        let s = BinningScheme::default();
        let ceiling = 3f64.ln();
        assert!(categorize_bounded(ceiling + 1e-13, 3, &s).is_ok());
        assert!(categorize_bounded(ceiling + 1e-6, 3, &s).is_err());
    }

    #[test]
    fn median_cut_on_ten_points() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        match percentile_bins(&v, 2).unwrap() {
            BinningScheme::Percentile { cuts } => {
                assert_eq!(cuts.len(), 1);
                assert!((cuts[0] - 0.55).abs() < 1e-12);
            }
            other => panic!("unexpected scheme {other:?}"),
        }
    }

    #[test]
    fn constant_vector_is_degenerate() {
        assert!(matches!(
            percentile_bins(&[0.5; 10], 3),
            Err(Error::DegenerateBins(_))
        ));
        assert!(percentile_bins(&[0.1, 0.2], 1).is_err());
    }

    #[test]
    fn heavy_ties_rejected_when_a_bin_would_be_empty() {
        let v = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.9];
        assert!(matches!(percentile_bins(&v, 3), Err(Error::DegenerateBins(_))));
    }

    #[test]
    fn load_well_formed_and_mismatch() {
        let text = "{\"uid\":\"a\",\"counts\":[90,5,5]}\n\
                    {\"uid\":\"b\",\"counts\":[10,80,10],\"gold\":0}\n\
                    {\"uid\":\"c\",\"counts\":[30,30,40],\"text\":\"a man sleeps\"}\n";
        let loaded = parse_annotations(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(loaded.records.len(), 3);
        assert_eq!(loaded.warnings.len(), 1);
        assert_eq!(loaded.warnings[0].uid, "b");
        assert_eq!(loaded.warnings[0].recomputed, 1);
        assert_eq!(loaded.records[2].text_length(), Some(3.0));
    }

    #[test]
    fn load_rejects_zero_counts_with_line() {
        let text = "{\"uid\":\"a\",\"counts\":[90,5,5]}\n{\"uid\":\"b\",\"counts\":[0,0,0]}\n";
        match parse_annotations(text.as_bytes(), Path::new("mem")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_duplicates_and_width_changes() {
        let dup = "{\"uid\":\"a\",\"counts\":[1,0,0]}\n{\"uid\":\"a\",\"counts\":[0,1,0]}\n";
        assert!(matches!(
            parse_annotations(dup.as_bytes(), Path::new("mem")),
            Err(Error::DuplicateUid { line: 2, .. })
        ));
        let width = "{\"uid\":\"a\",\"counts\":[1,0,0]}\n{\"uid\":\"b\",\"counts\":[0,1]}\n";
        assert!(matches!(
            parse_annotations(width.as_bytes(), Path::new("mem")),
            Err(Error::Parse { line: 2, .. })
        ));
        let junk = "{\"uid\":\"a\",\"counts\":[1,0,0]}\nnot json\n";
        assert!(matches!(
            parse_annotations(junk.as_bytes(), Path::new("mem")),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn chaosnli_field_alias() {
        let text = "{\"uid\":\"x\",\"label_count\":[3,90,7],\"example\":{\"premise\":\"a b\",\"hypothesis\":\"c\"}}\n";
        let loaded = parse_annotations(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(loaded.records[0].gold, 1);
        assert_eq!(loaded.records[0].text_length(), Some(3.0));
    }

    #[test]
    fn summary_single_clean_record() {
        let s = distribution_summary(&[rec("a", &[100, 0, 0])], &BinningScheme::default()).unwrap();
        assert_eq!(s.counts, vec![1, 0, 0]);
        assert_eq!(s.fractions[0], 1.0);
        assert!(distribution_summary(&[], &BinningScheme::default()).is_err());
    }

    proptest! {
        #[test]
        fn entropy_bounded(counts in prop::collection::vec(0u32..200, 2..6)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let h = entropy(&counts).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (counts.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn entropy_permutation_invariant(counts in prop::collection::vec(0u32..200, 3), rot in 0usize..3) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let mut shuffled = counts.clone();
            shuffled.rotate_left(rot);
            shuffled.swap(0, 2);
            prop_assert_eq!(entropy(&counts).unwrap(), entropy(&shuffled).unwrap());
        }

        #[test]
        fn entropy_scale_invariant(counts in prop::collection::vec(0u32..100, 3), m in 1u32..20) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let scaled: Vec<u32> = counts.iter().map(|&c| c * m).collect();
            prop_assert!((entropy(&counts).unwrap() - entropy(&scaled).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn fixed_scheme_is_total(h in 0.0f64..=1.0986122886681098) {
            let label = categorize(h, &BinningScheme::default()).unwrap();
            prop_assert!(label.category().is_some());
        }

        #[test]
        fn percentile_bins_balanced(values in prop::collection::hash_set(0u32..1_000_000, 8..200), k in 2usize..6) {
            let v: Vec<f64> = values.into_iter().map(|x| x as f64 / 1e6).collect();
            prop_assume!(v.len() >= k);
            let scheme = percentile_bins(&v, k).unwrap();
            let mut sizes = vec![0usize; k];
            for &h in &v {
                sizes[categorize(h, &scheme).unwrap().index()] += 1;
            }
            let max = *sizes.iter().max().unwrap();
            let min = *sizes.iter().min().unwrap();
            prop_assert!(max - min <= 1, "sizes {:?}", sizes);
            prop_assert_eq!(sizes.iter().sum::<usize>(), v.len());
        }
    }
}
