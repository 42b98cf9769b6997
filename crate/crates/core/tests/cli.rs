use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protocheck"))
        .args(args)
        .env_remove("PROTOCHECK_API_KEY")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Rewrites the rater column of a rating file.
fn relabel(src: &Path, dst: &Path, rater: &str) {
    let text = fs::read_to_string(src).unwrap();
    let mut lines = text.lines();
    let mut out = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let mut cells: Vec<&str> = line.split(',').collect();
        cells[1] = rater;
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(dst, out).unwrap();
}

#[test]
fn help_exits_zero_everywhere() {
    let top = run(&["--help"]);
    assert!(top.status.success());
    assert!(stdout(&top).contains("Exit codes"));
    for cmd in ["extract", "rate", "agree", "report", "detectors"] {
        let o = run(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd} --help: {}", stderr(&o));
    }
}

#[test]
fn detectors_lists_every_label() {
    let o = run(&["detectors"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for label in ["hyp_var_obs", "is_test", "few_obs", "if_no_result"] {
        assert!(text.contains(label), "{label} missing");
    }
    assert!(text.contains("direct") && text.contains("derived"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["agree", "only-one.csv"]).status.code(), Some(2));
}

#[test]
fn empty_protocol_directory_is_an_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("features");
    let o = run(&["extract", "--protocols", p(dir.path()), "--out", p(&out), "--provider", "mock", "--gold", p(&corpus().join("gold"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no protocols found"), "{}", stderr(&o));
}

#[test]
fn remote_mode_without_credential_exits_4() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "extract",
        "--protocols",
        p(&corpus().join("protocols")),
        "--out",
        p(&dir.path().join("f")),
        "--provider",
        "remote",
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("PROTOCHECK_API_KEY"), "{}", stderr(&o));
}

#[test]
fn mock_mode_without_gold_exits_4() {
    let dir = TempDir::new().unwrap();
    let o = run(&["extract", "--protocols", p(&corpus().join("protocols")), "--out", p(&dir.path().join("f")), "--provider", "mock"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn credential_in_config_file_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[llm]\napi_key = \"sk-test\"\n").unwrap();
    let o = run(&["--config", p(&cfg), "detectors"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("api_key"), "{}", stderr(&o));
}

#[test]
fn replay_with_empty_cache_fails_every_protocol() {
    let dir = TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    fs::create_dir(&cache).unwrap();
    let protocols = dir.path().join("protocols");
    fs::create_dir(&protocols).unwrap();
    for id in ["C-01", "Y-02"] {
        fs::copy(corpus().join(format!("protocols/{id}.toml")), protocols.join(format!("{id}.toml"))).unwrap();
    }
    let o = run(&[
        "extract",
        "--protocols",
        p(&protocols),
        "--out",
        p(&dir.path().join("f")),
        "--provider",
        "cache",
        "--cache-dir",
        p(&cache),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("cache miss"), "{err}");
}

#[test]
fn rate_with_missing_features_writes_na_row() {
    let dir = TempDir::new().unwrap();
    let gold = corpus().join("gold");
    let features = dir.path().join("features");
    let o = run(&["extract", "--protocols", p(&corpus().join("protocols")), "--out", p(&features), "--provider", "mock", "--gold", p(&gold)]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::remove_file(features.join("C-03.toml")).unwrap();
    let ratings = dir.path().join("ai.csv");
    let o = run(&[
        "rate",
        "--protocols",
        p(&corpus().join("protocols")),
        "--features",
        p(&features),
        "--out",
        p(&ratings),
        "--provider",
        "mock",
        "--gold",
        p(&gold),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("C-03"));
    let text = fs::read_to_string(&ratings).unwrap();
    let row = text.lines().find(|l| l.starts_with("C-03,")).unwrap();
    assert_eq!(row, format!("C-03,ai{}", ",NA".repeat(16)));
    let empty = text.lines().find(|l| l.starts_with("Y-07,")).unwrap();
    assert_eq!(empty, "Y-07,ai,0,0,0,1,1,NA,NA,NA,0,0,0,1,NA,0,0,1");
}

#[test]
fn agree_writes_both_outputs() {
    let dir = TempDir::new().unwrap();
    let prefix = dir.path().join("agreement");
    let o = run(&[
        "agree",
        p(&corpus().join("expected/ai.csv")),
        p(&corpus().join("ratings/human.csv")),
        "--out",
        p(&prefix),
        "--prevalence",
        "rater=human",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("agreement.csv")).unwrap();
    assert!(csv.starts_with("label,prevalence,n,dropped,accuracy"));
    assert_eq!(csv.lines().count(), 17);
    let table = fs::read_to_string(dir.path().join("agreement.txt")).unwrap();
    assert_eq!(table, stdout(&o));
    assert!(table.contains("prevalence: rater=human"));
}

#[test]
fn three_identical_raters_agree_perfectly() {
    let dir = TempDir::new().unwrap();
    let mut files = Vec::new();
    for r in ["r1", "r2", "r3"] {
        let f = dir.path().join(format!("{r}.csv"));
        relabel(&corpus().join("expected/ai.csv"), &f, r);
        files.push(f);
    }
    let prefix = dir.path().join("irr");
    let o = run(&["agree", p(&files[0]), p(&files[1]), p(&files[2]), "--out", p(&prefix)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("irr.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(csv.as_bytes());
    let headers = rows.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    for rec in rows.records() {
        let rec = rec.unwrap();
        assert_eq!(&rec[col("accuracy_min")], "1.000000");
        assert_eq!(&rec[col("accuracy_max")], "1.000000");
        let kappa = &rec[col("fleiss_kappa")];
        assert!(kappa == "1.000000" || kappa == "not_calculable", "{kappa}");
        assert_eq!(&rec[col("gwet_ac1")], "1.000000");
    }
}

#[test]
fn disjoint_subjects_are_an_error() {
    let dir = TempDir::new().unwrap();
    let other = dir.path().join("other.csv");
    let text = fs::read_to_string(corpus().join("ratings/human.csv")).unwrap();
    fs::write(&other, text.replace("C-", "X-").replace("Y-", "Z-")).unwrap();
    let o = run(&["agree", p(&corpus().join("expected/ai.csv")), p(&other)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("share no subjects"), "{}", stderr(&o));
}

#[test]
fn four_raters_are_unsupported() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["agree".to_string()];
    for r in ["a", "b", "c", "d"] {
        let f = dir.path().join(format!("{r}.csv"));
        relabel(&corpus().join("expected/ai.csv"), &f, r);
        args.push(p(&f).to_string());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(run(&args).status.code(), Some(6));
}

#[test]
fn report_matches_manifest() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("report.md");
    let o = run(&[
        "report",
        "--protocols",
        p(&corpus().join("protocols")),
        "--manifest",
        p(&corpus().join("manifest.toml")),
        "--ratings",
        p(&corpus().join("expected/ai.csv")),
        p(&corpus().join("ratings/human.csv")),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("| protocols | 24 | 8 | 8 | 16 |"), "{text}");
    assert!(text.contains("| gender: unspecified |"));
    for split in ["all", "training", "human_irr", "human_vs_ai"] {
        assert!(text.contains(&format!("## Agreement: {split}")), "{split}");
    }
}

#[test]
fn report_on_single_protocol_corpus() {
    let dir = TempDir::new().unwrap();
    let protocols = dir.path().join("protocols");
    fs::create_dir(&protocols).unwrap();
    fs::copy(corpus().join("protocols/C-01.toml"), protocols.join("C-01.toml")).unwrap();
    let ratings = dir.path().join("r.csv");
    let expected = fs::read_to_string(corpus().join("expected/ai.csv")).unwrap();
    let mut lines = expected.lines();
    let header = lines.next().unwrap();
    let row = lines.next().unwrap();
    fs::write(&ratings, format!("{header}\n{row}\n{}\n", row.replace(",ai,", ",human,"))).unwrap();
    let out = dir.path().join("report.md");
    let o = run(&["report", "--protocols", p(&protocols), "--ratings", p(&ratings), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("| protocols | 1 |"), "{text}");
}
