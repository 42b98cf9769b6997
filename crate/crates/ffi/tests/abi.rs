use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use protocheck_ffi::*;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    pc_string_free(s);
    out
}

unsafe fn last_error() -> String {
    CStr::from_ptr(pc_last_error()).to_string_lossy().into_owned()
}

#[test]
fn confusion_metrics() {
    unsafe {
        let mut v = 0.0;
        assert_eq!(pc_cohen_kappa(23, 6, 1, 10, &mut v), PcStatus::Ok);
        assert!((v - 0.62).abs() <= 0.005);
        assert_eq!(pc_gwet_ac1(23, 6, 1, 10, &mut v), PcStatus::Ok);
        assert!((v - 0.68).abs() <= 0.005);
        assert_eq!(pc_accuracy(23, 6, 1, 10, &mut v), PcStatus::Ok);
        assert_eq!(v, 0.825);

        v = -7.0;
        assert_eq!(pc_cohen_kappa(0, 0, 0, 40, &mut v), PcStatus::NotCalculable);
        assert_eq!(v, -7.0, "no value written when not calculable");
        assert_eq!(pc_gwet_ac1(0, 0, 0, 40, &mut v), PcStatus::Ok);
        assert_eq!(v, 1.0);

        assert_eq!(pc_accuracy(0, 0, 0, 0, &mut v), PcStatus::InvalidInput);
        assert!(last_error().contains("empty"));
        assert_eq!(pc_accuracy(1, 0, 0, 0, ptr::null_mut()), PcStatus::NullArgument);
    }
}

#[test]
fn table_metrics() {
    // 17 subjects x 3 raters, one dissenting rating.
    let mut cells = vec![0u8; 17 * 3];
    cells[4 * 3 + 1] = 1;
    unsafe {
        let mut v = 0.0;
        assert_eq!(pc_fleiss_kappa(cells.as_ptr(), 17, 3, &mut v), PcStatus::Ok);
        assert!((v + 0.02).abs() <= 0.005, "{v}");
        assert_eq!(pc_gwet_ac1_multi(cells.as_ptr(), 17, 3, &mut v), PcStatus::Ok);
        assert!((v - 0.96).abs() <= 0.005, "{v}");
        let zeros = vec![0u8; 15 * 3];
        assert_eq!(pc_fleiss_kappa(zeros.as_ptr(), 15, 3, &mut v), PcStatus::NotCalculable);
        assert_eq!(pc_fleiss_kappa(ptr::null(), 15, 3, &mut v), PcStatus::NullArgument);
        assert_eq!(pc_fleiss_kappa(zeros.as_ptr(), 15, 1, &mut v), PcStatus::InvalidInput);
    }
}

#[test]
fn bands() {
    unsafe {
        let mut name: *const c_char = ptr::null();
        assert_eq!(pc_landis_koch_band(0.605, &mut name), PcStatus::Ok);
        assert_eq!(CStr::from_ptr(name).to_str().unwrap(), "substantial agreement");
        assert_eq!(pc_landis_koch_band(1.5, &mut name), PcStatus::InvalidInput);
    }
}

#[test]
fn lexicon_handle() {
    unsafe {
        let mut lex = ptr::null_mut();
        assert_eq!(pc_lexicon_builtin(c("cones").as_ptr(), &mut lex), PcStatus::Ok);
        for (term, want) in [("Hairdryer", "heat"), ("water (hot)", "heat"), ("ice", "cold"), ("glitter", "unknown:glitter")] {
            let mut out = ptr::null_mut();
            assert_eq!(pc_lexicon_canonicalize(lex, c(term).as_ptr(), &mut out), PcStatus::Ok);
            assert_eq!(take(out), want);
        }
        let mut out = ptr::null_mut();
        assert_eq!(pc_lexicon_canonicalize(lex, c("  ").as_ptr(), &mut out), PcStatus::InvalidInput);
        pc_lexicon_free(lex);

        assert_eq!(pc_lexicon_builtin(c("volcano").as_ptr(), &mut lex), PcStatus::InvalidInput);
        assert_eq!(pc_lexicon_parse(c("not = [toml").as_ptr(), &mut lex), PcStatus::InvalidInput);
        let bad_utf8 = [0xffu8, 0];
        assert_eq!(pc_lexicon_builtin(bad_utf8.as_ptr().cast(), &mut lex), PcStatus::InvalidUtf8);
        pc_lexicon_free(ptr::null_mut());
    }
}

#[test]
fn ratings_and_report() {
    let dir = fixtures().join("agreement/human_ai");
    let ai = c(&std::fs::read_to_string(dir.join("ai.csv")).unwrap());
    let human = c(&std::fs::read_to_string(dir.join("human.csv")).unwrap());
    unsafe {
        let ratings = pc_ratings_new();
        assert_eq!(pc_ratings_add_csv(ratings, ai.as_ptr()), PcStatus::Ok);
        assert_eq!(pc_ratings_add_csv(ratings, human.as_ptr()), PcStatus::Ok);
        assert_eq!(pc_ratings_add_csv(ratings, c("protocol_id\nx\n").as_ptr()), PcStatus::InvalidInput);
        assert_eq!(pc_ratings_file_count(ratings), 2);

        let mut report = ptr::null_mut();
        assert_eq!(pc_report_build(ratings, c("rater=ai").as_ptr(), &mut report), PcStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(pc_report_to_csv(report, &mut out), PcStatus::Ok);
        let csv = take(out);
        let is_test = csv.lines().find(|l| l.starts_with("is_test,")).unwrap();
        assert!(is_test.starts_with("is_test,0.725000,40,0,0.825000"), "{is_test}");
        assert_eq!(pc_report_to_table(report, &mut out), PcStatus::Ok);
        assert!(take(out).contains("Missing test trial"));
        pc_report_free(report);

        assert_eq!(pc_report_build(ratings, c("mode").as_ptr(), &mut report), PcStatus::InvalidInput);
        pc_ratings_free(ratings);

        let single = pc_ratings_new();
        assert_eq!(pc_ratings_add_csv(single, ai.as_ptr()), PcStatus::Ok);
        assert_eq!(pc_report_build(single, ptr::null(), &mut report), PcStatus::Unsupported);
        pc_ratings_free(single);
    }
}

#[test]
fn detectors_over_features() {
    let features = c(&std::fs::read_to_string(fixtures().join("corpus/gold/C-03.toml")).unwrap());
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(pc_detect_features(features.as_ptr(), c("cones").as_ptr(), &mut out), PcStatus::Ok);
        let lines = take(out);
        assert_eq!(lines.lines().count(), 13);
        for expected in ["is_test,1", "is_control,0", "one_trial,1", "few_obs,0", "hyp_exists,0"] {
            assert!(lines.lines().any(|l| l == expected), "{expected} not in {lines}");
        }
        assert_eq!(pc_detect_features(features.as_ptr(), c("volcano").as_ptr(), &mut out), PcStatus::InvalidInput);
        assert!(last_error().contains("volcano"));
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/protocheck.h")).unwrap();
    for f in [
        "pc_last_error", "pc_string_free", "pc_accuracy", "pc_cohen_kappa", "pc_gwet_ac1", "pc_fleiss_kappa",
        "pc_gwet_ac1_multi", "pc_landis_koch_band", "pc_lexicon_builtin", "pc_lexicon_parse", "pc_lexicon_canonicalize",
        "pc_lexicon_free", "pc_ratings_new", "pc_ratings_add_csv", "pc_ratings_file_count", "pc_ratings_free",
        "pc_report_build", "pc_report_to_csv", "pc_report_to_table", "pc_report_free", "pc_detect_features",
    ] {
        let declared = header.lines().any(|l| l.split(|c: char| c == ' ' || c == '*').any(|w| w == format!("{f}(") || w.starts_with(&format!("{f}("))));
        assert!(declared, "{f} missing from header");
    }
    assert!(header.contains("typedef struct PcLexicon PcLexicon;"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "protocheck.h"
int main(void) {
    double k = 0;
    if (pc_cohen_kappa(23, 6, 1, 10, &k) != PC_STATUS_OK) return 1;
    if (pc_cohen_kappa(0, 0, 0, 40, &k) != PC_STATUS_NOT_CALCULABLE) return 2;
    PcLexicon *lex = NULL;
    if (pc_lexicon_builtin("yeast", &lex) != PC_STATUS_OK) return 3;
    char *name = NULL;
    if (pc_lexicon_canonicalize(lex, "hot water", &name) != PC_STATUS_OK) return 4;
    printf("%s\n", name);
    pc_string_free(name);
    pc_lexicon_free(lex);
    return 0;
}
"#;

/// Compiles and links a C caller against the static library, when a C
/// compiler is on PATH.
#[test]
fn c_caller_links_against_staticlib() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler on PATH; C link check not run");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libprotocheck_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "warmth");
}
