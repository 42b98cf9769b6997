//! C ABI over the protocheck library.
//!
//! Every function returns a [`PcStatus`]. On failure the message is kept in
//! thread-local storage and can be read with [`pc_last_error`]. Strings
//! handed out by the library are owned by the caller and released with
//! [`pc_string_free`]; handles are released with their matching `_free`.
//! Panics never cross the boundary; they surface as `PC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use protocheck::agreement::{
    accuracy, cohen_kappa, fleiss_kappa, gwet_ac1, gwet_ac1_multi, landis_koch_band, AgreementReport, Band, Confusion2x2,
    MetricResult, PrevalenceMode, ReportConfig,
};
use protocheck::corpus::{agree, builtin_task, parse_ratings, CorpusError};
use protocheck::detectors::{detect_design_errors, detect_hypothesis_errors, detect_observation_errors, DetectorConfig};
use protocheck::extraction::{ExperimentFeatures, Lexicon};
use protocheck::model::Rating;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Unparseable or inconsistent input (CSV, TOML, counts).
    InvalidInput = 3,
    /// The coefficient is undefined for these counts; no value was written.
    NotCalculable = 4,
    /// Valid input the library does not handle, such as four raters.
    Unsupported = 5,
    Panic = 6,
}

/// Built-in lexicon or one parsed from TOML.
pub struct PcLexicon(Lexicon);

/// Rating sets added one CSV text at a time.
pub struct PcRatings {
    sets: Vec<Vec<Rating>>,
}

pub struct PcReport(AgreementReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PcStatus, String);

type Res<T> = Result<T, Failure>;

fn fail<T>(status: PcStatus, msg: impl Into<String>) -> Res<T> {
    Err(Failure(status, msg.into()))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Res<()>) -> PcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PcStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return fail(PcStatus::NullArgument, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| fail(PcStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Res<&'a mut T> {
    p.as_mut().map_or_else(|| fail(PcStatus::NullArgument, format!("{what} is null")), Ok)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Res<&'a T> {
    p.as_ref().map_or_else(|| fail(PcStatus::NullArgument, format!("{what} is null")), Ok)
}

fn to_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

fn corpus_failure(e: CorpusError) -> Failure {
    use protocheck::agreement::AgreementError as A;
    let status = match &e {
        CorpusError::Agreement(A::UnsupportedRaterCount(_) | A::TooFewRaters(_)) => PcStatus::Unsupported,
        _ => PcStatus::InvalidInput,
    };
    Failure(status, e.to_string())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn confusion(n11: u64, n10: u64, n01: u64, n00: u64) -> Res<Confusion2x2> {
    Confusion2x2::new(n11, n10, n01, n00).or_else(|e| fail(PcStatus::InvalidInput, e.to_string()))
}

fn write_metric(m: MetricResult, out: &mut f64) -> Res<()> {
    match m {
        MetricResult::Value { value } => {
            *out = value;
            Ok(())
        }
        MetricResult::NotCalculable { reason } => fail(PcStatus::NotCalculable, reason),
    }
}

/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn pc_accuracy(n11: u64, n10: u64, n01: u64, n00: u64, out: *mut f64) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = accuracy(&confusion(n11, n10, n01, n00)?);
        Ok(())
    })
}

/// Cohen's kappa; `PC_STATUS_NOT_CALCULABLE` when chance agreement is 1.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn pc_cohen_kappa(n11: u64, n10: u64, n01: u64, n00: u64, out: *mut f64) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        write_metric(cohen_kappa(&confusion(n11, n10, n01, n00)?), out)
    })
}

/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn pc_gwet_ac1(n11: u64, n10: u64, n01: u64, n00: u64, out: *mut f64) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        write_metric(gwet_ac1(&confusion(n11, n10, n01, n00)?), out)
    })
}

/// Row-major subjects x raters table; nonzero cells mean error present.
unsafe fn table(cells: *const u8, subjects: usize, raters: usize) -> Res<Vec<Vec<bool>>> {
    if cells.is_null() {
        return fail(PcStatus::NullArgument, "cells is null");
    }
    let len = subjects
        .checked_mul(raters)
        .map_or_else(|| fail(PcStatus::InvalidInput, "table size overflows"), Ok)?;
    let flat = std::slice::from_raw_parts(cells, len);
    Ok(flat.chunks(raters.max(1)).take(subjects).map(|row| row.iter().map(|&c| c != 0).collect()).collect())
}

/// Fleiss' kappa over a row-major `subjects x raters` table of 0/1 cells.
///
/// # Safety
/// `cells` must point to `subjects * raters` bytes; `out` to a double.
#[no_mangle]
pub unsafe extern "C" fn pc_fleiss_kappa(cells: *const u8, subjects: usize, raters: usize, out: *mut f64) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let t = table(cells, subjects, raters)?;
        let m = fleiss_kappa(&t).or_else(|e| fail(PcStatus::InvalidInput, e.to_string()))?;
        write_metric(m, out)
    })
}

/// Multi-rater Gwet's AC1 over a row-major `subjects x raters` table.
///
/// # Safety
/// `cells` must point to `subjects * raters` bytes; `out` to a double.
#[no_mangle]
pub unsafe extern "C" fn pc_gwet_ac1_multi(cells: *const u8, subjects: usize, raters: usize, out: *mut f64) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let t = table(cells, subjects, raters)?;
        let m = gwet_ac1_multi(&t).or_else(|e| fail(PcStatus::InvalidInput, e.to_string()))?;
        write_metric(m, out)
    })
}

/// Landis-Koch band name for a coefficient, as a static string that must
/// not be freed.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_landis_koch_band(value: f64, out: *mut *const c_char) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let band = landis_koch_band(value).or_else(|e| fail(PcStatus::InvalidInput, e.to_string()))?;
        let name: &'static CStr = match band {
            Band::Poor => c"poor (below slight)",
            Band::Slight => c"slight agreement",
            Band::Fair => c"fair agreement",
            Band::Moderate => c"moderate agreement",
            Band::Substantial => c"substantial agreement",
            Band::AlmostPerfect => c"almost perfect agreement",
        };
        *out = name.as_ptr();
        Ok(())
    })
}

/// Built-in lexicon by task id ("cones", "yeast").
///
/// # Safety
/// `id` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_lexicon_builtin(id: *const c_char, out: *mut *mut PcLexicon) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let id = text(id, "id")?;
        let lex = Lexicon::builtin(id).map_or_else(|| fail(PcStatus::InvalidInput, format!("no built-in lexicon {id:?}")), Ok)?;
        *out = Box::into_raw(Box::new(PcLexicon(lex)));
        Ok(())
    })
}

/// Lexicon from TOML text in the bundled lexicon format.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_lexicon_parse(toml: *const c_char, out: *mut *mut PcLexicon) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let lex = Lexicon::parse(text(toml, "toml")?).or_else(|e| fail(PcStatus::InvalidInput, e.to_string()))?;
        *out = Box::into_raw(Box::new(PcLexicon(lex)));
        Ok(())
    })
}

/// Canonical variable name for a surface term; unknown terms come back as
/// "unknown:<term>". The result is freed with `pc_string_free`.
///
/// # Safety
/// `lexicon` must come from this library; `term` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pc_lexicon_canonicalize(
    lexicon: *const PcLexicon,
    term: *const c_char,
    out: *mut *mut c_char,
) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let lex = handle(lexicon, "lexicon")?;
        let v = lex.0.canonicalize(text(term, "term")?).or_else(|e| fail(PcStatus::InvalidInput, e.to_string()))?;
        *out = to_c(v.to_string());
        Ok(())
    })
}

/// # Safety
/// `lexicon` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pc_lexicon_free(lexicon: *mut PcLexicon) {
    if !lexicon.is_null() {
        drop(Box::from_raw(lexicon));
    }
}

/// An empty collection of rating files.
#[no_mangle]
pub extern "C" fn pc_ratings_new() -> *mut PcRatings {
    Box::into_raw(Box::new(PcRatings { sets: Vec::new() }))
}

/// Adds one rating file (CSV text with protocol_id, rater_id and 16 label
/// columns).
///
/// # Safety
/// `ratings` must come from `pc_ratings_new`; `csv` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pc_ratings_add_csv(ratings: *mut PcRatings, csv: *const c_char) -> PcStatus {
    guard(|| {
        let set = parse_ratings(text(csv, "csv")?, "<ffi>").map_err(corpus_failure)?;
        let ratings = out_ptr(ratings, "ratings")?;
        ratings.sets.push(set);
        Ok(())
    })
}

/// Number of rating files added so far.
///
/// # Safety
/// `ratings` must be null or come from `pc_ratings_new`.
#[no_mangle]
pub unsafe extern "C" fn pc_ratings_file_count(ratings: *const PcRatings) -> usize {
    ratings.as_ref().map_or(0, |r| r.sets.len())
}

/// # Safety
/// `ratings` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pc_ratings_free(ratings: *mut PcRatings) {
    if !ratings.is_null() {
        drop(Box::from_raw(ratings));
    }
}

/// Agreement report over the subjects all files share. `prevalence` is
/// "median", "rater=ID", or null for median.
///
/// # Safety
/// `ratings` must come from `pc_ratings_new`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pc_report_build(
    ratings: *const PcRatings,
    prevalence: *const c_char,
    out: *mut *mut PcReport,
) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ratings = handle(ratings, "ratings")?;
        let prevalence: PrevalenceMode = if prevalence.is_null() {
            PrevalenceMode::Median
        } else {
            text(prevalence, "prevalence")?.parse().or_else(|e: protocheck::agreement::AgreementError| {
                fail(PcStatus::InvalidInput, e.to_string())
            })?
        };
        let report = agree(&ratings.sets, &ReportConfig { prevalence }).map_err(corpus_failure)?;
        *out = Box::into_raw(Box::new(PcReport(report)));
        Ok(())
    })
}

/// Machine-readable report; freed with `pc_string_free`.
///
/// # Safety
/// `report` must come from `pc_report_build`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pc_report_to_csv(report: *const PcReport, out: *mut *mut c_char) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = to_c(handle(report, "report")?.0.to_csv());
        Ok(())
    })
}

/// Human-readable table; freed with `pc_string_free`.
///
/// # Safety
/// `report` must come from `pc_report_build`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pc_report_to_table(report: *const PcReport, out: *mut *mut c_char) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = to_c(handle(report, "report")?.0.to_table());
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pc_report_free(report: *mut PcReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Runs the feature-derived detectors (every label except the three
/// result-section labels, which need a model) on one features record in
/// TOML. Writes "label,verdict" lines with verdict 1, 0 or NA; freed with
/// `pc_string_free`.
///
/// # Safety
/// `features_toml` and `task_id` must be NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pc_detect_features(
    features_toml: *const c_char,
    task_id: *const c_char,
    out: *mut *mut c_char,
) -> PcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let task_id = text(task_id, "task_id")?;
        let task = builtin_task(task_id).map_or_else(|| fail(PcStatus::InvalidInput, format!("unknown task {task_id:?}")), Ok)?;
        let f = ExperimentFeatures::from_toml(text(features_toml, "features_toml")?, "<ffi>")
            .or_else(|e| fail(PcStatus::InvalidInput, e.to_string()))?;
        let mut detections = detect_hypothesis_errors(&f, "");
        detections.extend(detect_design_errors(&f, &task, &DetectorConfig::default()));
        detections.extend(detect_observation_errors(&f));
        let lines: String = detections.iter().map(|(label, d)| format!("{label},{}\n", d.verdict.cell())).collect();
        *out = to_c(lines);
        Ok(())
    })
}
