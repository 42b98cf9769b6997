//! Inter-rater agreement: accuracy, Cohen's and Fleiss' kappa, Gwet's AC1,
//! prevalence, pairwise accuracy bounds and Landis-Koch bands.
//!
//! Coefficients are evaluated as a single ratio of integer counts, so
//! degenerate cases (kappa exactly 0, chance agreement exactly 1) come out
//! exact instead of within rounding noise.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ErrorLabel, RatingMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgreementError {
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("rating table has no subjects")]
    NoSubjects,
    #[error("need at least two raters, got {0}")]
    TooFewRaters(usize),
    #[error("ragged table: subject {subject} has {got} ratings, expected {expected}")]
    Ragged { subject: usize, got: usize, expected: usize },
    #[error("rater vectors differ in length: {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error("{0} raters is unsupported (2 or 3 expected)")]
    UnsupportedRaterCount(usize),
    #[error("value {0} outside [-1, 1]")]
    OutOfRange(f64),
    #[error("unknown rater {0:?}")]
    UnknownRater(String),
    #[error("invalid prevalence mode {0:?} (expected median or rater=ID)")]
    InvalidPrevalenceMode(String),
}

/// Two raters' binary judgements: `n10` counts subjects rater A marked 1
/// and rater B marked 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Confusion2x2 {
    pub n11: u64,
    pub n10: u64,
    pub n01: u64,
    pub n00: u64,
}

impl Confusion2x2 {
    pub fn new(n11: u64, n10: u64, n01: u64, n00: u64) -> Result<Self, AgreementError> {
        let c = Confusion2x2 { n11, n10, n01, n00 };
        if c.n() == 0 {
            return Err(AgreementError::EmptyConfusion);
        }
        Ok(c)
    }

    pub fn from_vectors(a: &[bool], b: &[bool]) -> Result<Self, AgreementError> {
        if a.len() != b.len() {
            return Err(AgreementError::LengthMismatch(vec![a.len(), b.len()]));
        }
        let mut c = Confusion2x2 { n11: 0, n10: 0, n01: 0, n00: 0 };
        for (&x, &y) in a.iter().zip(b) {
            match (x, y) {
                (true, true) => c.n11 += 1,
                (true, false) => c.n10 += 1,
                (false, true) => c.n01 += 1,
                (false, false) => c.n00 += 1,
            }
        }
        Confusion2x2::new(c.n11, c.n10, c.n01, c.n00)
    }

    pub fn n(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }

    /// Swaps the raters.
    pub fn transpose(&self) -> Self {
        Confusion2x2 { n11: self.n11, n10: self.n01, n01: self.n10, n00: self.n00 }
    }

    /// Swaps the categories.
    pub fn swap_labels(&self) -> Self {
        Confusion2x2 { n11: self.n00, n10: self.n01, n01: self.n10, n00: self.n11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricResult {
    Value { value: f64 },
    NotCalculable { reason: String },
}

impl MetricResult {
    fn value(v: f64) -> Self {
        MetricResult::Value { value: v }
    }

    fn not_calculable(reason: impl Into<String>) -> Self {
        MetricResult::NotCalculable { reason: reason.into() }
    }

    pub fn as_value(&self) -> Option<f64> {
        match self {
            MetricResult::Value { value } => Some(*value),
            MetricResult::NotCalculable { .. } => None,
        }
    }

    pub fn is_calculable(&self) -> bool {
        self.as_value().is_some()
    }
}

fn ratio(num: i128, den: i128) -> f64 {
    num as f64 / den as f64
}

pub fn accuracy(c: &Confusion2x2) -> f64 {
    (c.n11 + c.n00) as f64 / c.n() as f64
}

pub fn cohen_kappa(c: &Confusion2x2) -> MetricResult {
    let n = c.n() as i128;
    let (a1, b1) = ((c.n11 + c.n10) as i128, (c.n11 + c.n01) as i128);
    let (a0, b0) = (n - a1, n - b1);
    // po = agree/n, pe = chance/n^2.
    let agree = (c.n11 + c.n00) as i128;
    let chance = a1 * b1 + a0 * b0;
    if chance == n * n {
        return MetricResult::not_calculable("chance agreement is 1 (division by zero)");
    }
    MetricResult::value(ratio(n * agree - chance, n * n - chance))
}

/// Two-category AC1 from `pa = agree_pairs / (n·r·(r-1))` and
/// `π = positives / (n·r)`.
fn ac1_from_counts(agree_pairs: i128, positives: i128, n: i128, r: i128) -> f64 {
    let d = n * r * (r - 1);
    let m = n * r;
    let chance = 2 * positives * (m - positives);
    ratio(agree_pairs * m * m - chance * d, d * (m * m - chance))
}

/// Fleiss' kappa from the same counts; `None` when every rating falls in one
/// category.
fn fleiss_from_counts(agree_pairs: i128, positives: i128, n: i128, r: i128) -> Option<f64> {
    let d = n * r * (r - 1);
    let m = n * r;
    let chance = positives * positives + (m - positives) * (m - positives);
    if chance == m * m {
        return None;
    }
    Some(ratio(agree_pairs * m * m - chance * d, d * (m * m - chance)))
}

/// Always calculable: chance agreement 2π(1−π) never exceeds ½.
pub fn gwet_ac1(c: &Confusion2x2) -> MetricResult {
    let n = c.n() as i128;
    let agree_pairs = 2 * (c.n11 + c.n00) as i128;
    let positives = (2 * c.n11 + c.n10 + c.n01) as i128;
    MetricResult::value(ac1_from_counts(agree_pairs, positives, n, 2))
}

struct TableCounts {
    n: i128,
    r: i128,
    agree_pairs: i128,
    positives: i128,
}

fn table_counts(table: &[Vec<bool>]) -> Result<TableCounts, AgreementError> {
    let first = table.first().ok_or(AgreementError::NoSubjects)?;
    let r = first.len();
    if r < 2 {
        return Err(AgreementError::TooFewRaters(r));
    }
    let mut agree_pairs = 0i128;
    let mut positives = 0i128;
    for (i, row) in table.iter().enumerate() {
        if row.len() != r {
            return Err(AgreementError::Ragged { subject: i, got: row.len(), expected: r });
        }
        let ones = row.iter().filter(|&&x| x).count() as i128;
        let zeros = r as i128 - ones;
        agree_pairs += ones * (ones - 1) + zeros * (zeros - 1);
        positives += ones;
    }
    Ok(TableCounts { n: table.len() as i128, r: r as i128, agree_pairs, positives })
}

/// `table[i][r]` is rater `r`'s judgement on subject `i`.
pub fn fleiss_kappa(table: &[Vec<bool>]) -> Result<MetricResult, AgreementError> {
    let t = table_counts(table)?;
    Ok(match fleiss_from_counts(t.agree_pairs, t.positives, t.n, t.r) {
        Some(v) => MetricResult::value(v),
        None => MetricResult::not_calculable("all ratings in one category (division by zero)"),
    })
}

/// Multi-rater AC1 with pa equal to Fleiss' mean per-subject agreement.
pub fn gwet_ac1_multi(table: &[Vec<bool>]) -> Result<MetricResult, AgreementError> {
    let t = table_counts(table)?;
    Ok(MetricResult::value(ac1_from_counts(t.agree_pairs, t.positives, t.n, t.r)))
}

/// Min and max accuracy over the three rater pairs.
pub fn pairwise_accuracy_bounds(a: &[bool], b: &[bool], c: &[bool]) -> Result<(f64, f64), AgreementError> {
    if a.len() != b.len() || a.len() != c.len() {
        return Err(AgreementError::LengthMismatch(vec![a.len(), b.len(), c.len()]));
    }
    if a.is_empty() {
        return Err(AgreementError::NoSubjects);
    }
    let acc = |x: &[bool], y: &[bool]| -> Result<f64, AgreementError> { Ok(accuracy(&Confusion2x2::from_vectors(x, y)?)) };
    let pairs = [acc(a, b)?, acc(a, c)?, acc(b, c)?];
    let min = pairs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = pairs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PrevalenceMode {
    /// Per subject the median across raters; even counts take the lower
    /// median, so ties count as error_absent.
    #[default]
    Median,
    Rater(String),
}

impl FromStr for PrevalenceMode {
    type Err = AgreementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "median" {
            return Ok(PrevalenceMode::Median);
        }
        match s.strip_prefix("rater=") {
            Some(id) if !id.trim().is_empty() => Ok(PrevalenceMode::Rater(id.trim().to_string())),
            _ => Err(AgreementError::InvalidPrevalenceMode(s.to_string())),
        }
    }
}

impl fmt::Display for PrevalenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrevalenceMode::Median => f.write_str("median"),
            PrevalenceMode::Rater(id) => write!(f, "rater={id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prevalence {
    /// `None` when every subject was excluded.
    pub value: Option<f64>,
    pub counted: usize,
    /// Subjects without a determinate verdict from the chosen rater(s).
    pub excluded: usize,
}

pub fn prevalence(matrix: &RatingMatrix, label: ErrorLabel, mode: &PrevalenceMode) -> Result<Prevalence, AgreementError> {
    let raters: Vec<usize> = match mode {
        PrevalenceMode::Median => (0..matrix.raters().len()).collect(),
        PrevalenceMode::Rater(id) => {
            vec![matrix.rater_index(id).map_err(|_| AgreementError::UnknownRater(id.clone()))?]
        }
    };
    let (mut positives, mut counted, mut excluded) = (0usize, 0usize, 0usize);
    for s in 0..matrix.subjects().len() {
        let mut votes: Vec<bool> = raters
            .iter()
            .filter_map(|&r| matrix.verdict(s, r, label).as_bool())
            .collect();
        if votes.is_empty() {
            excluded += 1;
            continue;
        }
        votes.sort_unstable();
        counted += 1;
        if votes[(votes.len() - 1) / 2] {
            positives += 1;
        }
    }
    let value = (counted > 0).then(|| positives as f64 / counted as f64);
    Ok(Prevalence { value, counted, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Poor,
    Slight,
    Fair,
    Moderate,
    Substantial,
    AlmostPerfect,
}

impl Band {
    pub fn name(self) -> &'static str {
        match self {
            Band::Poor => "poor (below slight)",
            Band::Slight => "slight agreement",
            Band::Fair => "fair agreement",
            Band::Moderate => "moderate agreement",
            Band::Substantial => "substantial agreement",
            Band::AlmostPerfect => "almost perfect agreement",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rounds to hundredths, halves away from zero, on the decimal expansion so
/// that 0.605 (stored as 0.60499999...) still rounds up.
pub fn round_hundredths(value: f64) -> i64 {
    let text = format!("{:.10}", value.abs());
    let (int, frac) = text.split_once('.').expect("fixed-point format");
    let mut hundredths: i64 = int.parse::<i64>().expect("digits") * 100 + frac[..2].parse::<i64>().expect("digits");
    if frac.as_bytes()[2] >= b'5' {
        hundredths += 1;
    }
    if value < 0.0 {
        -hundredths
    } else {
        hundredths
    }
}

pub fn landis_koch_band(value: f64) -> Result<Band, AgreementError> {
    if !value.is_finite() || !(-1.0..=1.0).contains(&value) {
        return Err(AgreementError::OutOfRange(value));
    }
    Ok(match round_hundredths(value) {
        h if h < 0 => Band::Poor,
        0..=20 => Band::Slight,
        21..=40 => Band::Fair,
        41..=60 => Band::Moderate,
        61..=80 => Band::Substantial,
        _ => Band::AlmostPerfect,
    })
}

/// Table-style number: two decimals, no leading zero, integers bare
/// (".92", "-.04", "1", "0").
pub fn format_coefficient(value: f64) -> String {
    let h = round_hundredths(value);
    let sign = if h < 0 { "-" } else { "" };
    let (whole, frac) = (h.abs() / 100, h.abs() % 100);
    match (whole, frac) {
        (0, 0) => "0".to_string(),
        (w, 0) => format!("{sign}{w}"),
        (0, f) => format!("{sign}.{f:02}"),
        (w, f) => format!("{sign}{w}.{f:02}"),
    }
}

fn format_metric(m: &MetricResult) -> String {
    match m {
        MetricResult::Value { value } => format_coefficient(*value),
        MetricResult::NotCalculable { .. } => "◊".to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportShape {
    /// Cohen's kappa, one accuracy.
    TwoRaters,
    /// Fleiss' kappa, min/max pairwise accuracy.
    ThreeRaters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub label: ErrorLabel,
    pub prevalence: Prevalence,
    /// Subjects kept after dropping indeterminate cells pairwise.
    pub n: usize,
    pub dropped: usize,
    /// Two raters only.
    pub accuracy: Option<f64>,
    /// Three raters only.
    pub accuracy_bounds: Option<(f64, f64)>,
    pub kappa: MetricResult,
    pub ac1: MetricResult,
    pub kappa_band: Option<Band>,
    pub ac1_band: Option<Band>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub shape: ReportShape,
    pub raters: Vec<String>,
    pub subjects: usize,
    pub prevalence_mode: PrevalenceMode,
    pub rows: Vec<AgreementRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReportConfig {
    pub prevalence: PrevalenceMode,
}

fn band_of(m: &MetricResult) -> Option<Band> {
    m.as_value().and_then(|v| landis_koch_band(v).ok())
}

pub fn build_report(matrix: &RatingMatrix, cfg: &ReportConfig) -> Result<AgreementReport, AgreementError> {
    let r = matrix.raters().len();
    let shape = match r {
        2 => ReportShape::TwoRaters,
        3 => ReportShape::ThreeRaters,
        0 | 1 => return Err(AgreementError::TooFewRaters(r)),
        _ => return Err(AgreementError::UnsupportedRaterCount(r)),
    };
    let mut rows = Vec::with_capacity(ErrorLabel::ALL.len());
    for label in ErrorLabel::ALL {
        let prevalence = prevalence(matrix, label, &cfg.prevalence)?;
        let proj = matrix.project_all(label);
        let empty = || MetricResult::not_calculable("no subjects left after dropping indeterminate cells");
        let (accuracy, accuracy_bounds, kappa, ac1) = if proj.rows.is_empty() {
            (None, None, empty(), empty())
        } else {
            match shape {
                ReportShape::TwoRaters => {
                    let c = Confusion2x2::from_vectors(&proj.rater_column(0), &proj.rater_column(1))?;
                    (Some(accuracy(&c)), None, cohen_kappa(&c), gwet_ac1(&c))
                }
                ReportShape::ThreeRaters => {
                    let bounds = pairwise_accuracy_bounds(
                        &proj.rater_column(0),
                        &proj.rater_column(1),
                        &proj.rater_column(2),
                    )?;
                    (None, Some(bounds), fleiss_kappa(&proj.rows)?, gwet_ac1_multi(&proj.rows)?)
                }
            }
        };
        rows.push(AgreementRow {
            label,
            prevalence,
            n: proj.rows.len(),
            dropped: proj.dropped,
            accuracy,
            accuracy_bounds,
            kappa_band: band_of(&kappa),
            ac1_band: band_of(&ac1),
            kappa,
            ac1,
        });
    }
    Ok(AgreementReport {
        shape,
        raters: matrix.raters().to_vec(),
        subjects: matrix.subjects().len(),
        prevalence_mode: cfg.prevalence.clone(),
        rows,
    })
}

fn csv_number(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_metric(m: &MetricResult) -> String {
    match m {
        MetricResult::Value { value } => format!("{value:.6}"),
        MetricResult::NotCalculable { .. } => "not_calculable".to_string(),
    }
}

impl AgreementReport {
    /// Machine-readable form, one row per label. Numbers carry six decimals.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let kappa = match self.shape {
            ReportShape::TwoRaters => "cohen_kappa",
            ReportShape::ThreeRaters => "fleiss_kappa",
        };
        let header = [
            "label", "prevalence", "n", "dropped", "accuracy", "accuracy_min", "accuracy_max", kappa, "gwet_ac1",
            "kappa_band", "ac1_band",
        ];
        w.write_record(header).expect("in-memory write");
        for row in &self.rows {
            let (lo, hi) = row.accuracy_bounds.unzip();
            w.write_record([
                row.label.as_str().to_string(),
                csv_number(row.prevalence.value),
                row.n.to_string(),
                row.dropped.to_string(),
                csv_number(row.accuracy),
                csv_number(lo),
                csv_number(hi),
                csv_metric(&row.kappa),
                csv_metric(&row.ac1),
                row.kappa_band.map(|b| b.name().to_string()).unwrap_or_default(),
                row.ac1_band.map(|b| b.name().to_string()).unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Fixed-width table in the column order of the published tables.
    pub fn to_table(&self) -> String {
        let mut header: Vec<String> = vec!["Error".into(), "Prevalence".into()];
        match self.shape {
            ReportShape::TwoRaters => header.extend(["Accuracy".into(), "Cohen's κ".into()]),
            ReportShape::ThreeRaters => {
                header.extend(["Acc. min".into(), "Acc. max".into(), "Fleiss' κ".into()])
            }
        }
        header.extend(["Gwet's AC1".into(), "Dropped".into()]);
        let mut lines: Vec<Vec<String>> = vec![header];
        for row in &self.rows {
            let mut cells = vec![
                row.label.description().to_string(),
                row.prevalence.value.map(format_coefficient).unwrap_or_else(|| "NA".into()),
            ];
            match self.shape {
                ReportShape::TwoRaters => {
                    cells.push(row.accuracy.map(format_coefficient).unwrap_or_else(|| "NA".into()));
                }
                ReportShape::ThreeRaters => {
                    let (lo, hi) = row.accuracy_bounds.unzip();
                    cells.push(lo.map(format_coefficient).unwrap_or_else(|| "NA".into()));
                    cells.push(hi.map(format_coefficient).unwrap_or_else(|| "NA".into()));
                }
            }
            cells.push(format_metric(&row.kappa));
            cells.push(format_metric(&row.ac1));
            cells.push(row.dropped.to_string());
            lines.push(cells);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Raters: {} | subjects: {} | prevalence: {}",
            self.raters.join(", "),
            self.subjects,
            self.prevalence_mode
        );
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| {
                    let pad = w - cell.chars().count();
                    if c == 0 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out.push_str("◊ not calculable (division by zero)\n");
        out
    }
}
