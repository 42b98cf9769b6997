use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use protocheck::agreement::{AgreementError, PrevalenceMode, ReportConfig};
use protocheck::corpus::{
    agree, load_features, load_protocols, ratings_to_csv, read_ratings, render_summary, write_atomic, write_features,
    Corpus, CorpusError, Pipeline, RunConfig, TaskRegistry,
};
use protocheck::detectors::registry;
use protocheck::extraction::{ExtractionError, GoldStore, Segmentation};
use protocheck::llm::{LlmError, ProviderKind};
use protocheck::model::ErrorLabel;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  every protocol failed to extract
  2  usage error
  3  invalid or unreadable input (corpus, manifest, rating or feature files)
  4  configuration error (missing credential, missing gold annotations, bad config)
  5  model gateway error (cache miss in replay mode, provider failure)
  6  agreement not computable for these inputs (e.g. more than three raters)";

#[derive(Parser)]
#[command(name = "protocheck", version, about = "Detect student errors in experimentation protocols and measure rater agreement")]
#[command(after_help = EXIT_CODES)]
struct Cli {
    /// Run configuration file (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Remote,
    Cache,
    Mock,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegmentationArg {
    Prompting,
    Numbering,
}

#[derive(Args)]
struct RunArgs {
    /// Model provider. Remote mode reads the API key from PROTOCHECK_API_KEY.
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Pinned model snapshot.
    #[arg(long)]
    model: Option<String>,
    /// Sampling temperature [default: 0].
    #[arg(long)]
    temperature: Option<f64>,
    /// Response cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Worker threads across protocols.
    #[arg(long)]
    jobs: Option<usize>,
    /// Gold annotation sidecars (required with --provider mock).
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Extra task definitions (*.toml).
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Extra lexicons (*.toml).
    #[arg(long)]
    lexicons: Option<PathBuf>,
    /// Trial segmentation strategy.
    #[arg(long, value_enum)]
    segmentation: Option<SegmentationArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features from every protocol into one file per protocol.
    Extract {
        #[arg(long)]
        protocols: PathBuf,
        /// Output directory for feature files.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run all detectors and write a rating file.
    Rate {
        #[arg(long)]
        protocols: PathBuf,
        /// Directory of feature files written by `extract`.
        #[arg(long)]
        features: PathBuf,
        /// Output rating file (CSV).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ai")]
        rater_id: String,
        /// Also write per-label evidence (CSV).
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare two or three rating files.
    Agree {
        #[arg(required = true, num_args = 2..)]
        ratings: Vec<PathBuf>,
        /// Output prefix; writes PREFIX.csv and PREFIX.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// median or rater=ID.
        #[arg(long)]
        prevalence: Option<String>,
    },
    /// Write a Markdown summary of corpus composition and agreement.
    Report {
        #[arg(long)]
        protocols: PathBuf,
        /// Split manifest (TOML).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        ratings: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prevalence: Option<String>,
    },
    /// List the detector registry.
    Detectors,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        let code = match &e {
            CorpusError::Config(_) | CorpusError::Llm(LlmError::MissingCredential(_)) => 4,
            CorpusError::Llm(_) | CorpusError::Extraction(ExtractionError::Gateway(_)) => 5,
            CorpusError::Agreement(AgreementError::UnsupportedRaterCount(_) | AgreementError::TooFewRaters(_)) => 6,
            CorpusError::Agreement(AgreementError::InvalidPrevalenceMode(_) | AgreementError::UnknownRater(_)) => 4,
            CorpusError::Agreement(_) => 6,
            _ => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| Failure { code: 4, message: e.to_string() }),
        None => Ok(RunConfig::default()),
    }
}

fn apply(mut cfg: RunConfig, run: &RunArgs) -> RunConfig {
    if let Some(p) = run.provider {
        cfg.llm.provider = match p {
            ProviderArg::Remote => ProviderKind::RemoteChatApi,
            ProviderArg::Cache => ProviderKind::CacheReplay,
            ProviderArg::Mock => ProviderKind::Mock,
        };
    }
    if let Some(m) = &run.model {
        cfg.llm.model_id = m.clone();
    }
    if let Some(t) = run.temperature {
        cfg.llm.temperature = t;
    }
    if let Some(d) = &run.cache_dir {
        cfg.llm.cache_dir = d.clone();
    }
    if let Some(j) = run.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = run.segmentation {
        cfg.segmentation = match s {
            SegmentationArg::Prompting => Segmentation::Prompting,
            SegmentationArg::Numbering => Segmentation::Numbering,
        };
    }
    cfg
}

fn pipeline(cfg: RunConfig, run: &RunArgs) -> Result<Pipeline, Failure> {
    let tasks = TaskRegistry::load(run.tasks.as_deref(), run.lexicons.as_deref())?;
    let gold = match &run.gold {
        Some(dir) => Some(GoldStore::load_dir(dir).map_err(CorpusError::from)?),
        None => None,
    };
    Ok(Pipeline::new(cfg, tasks, gold)?)
}

fn report_config(cfg: &RunConfig, flag: Option<&str>) -> Result<ReportConfig, Failure> {
    let prevalence: PrevalenceMode = match flag {
        Some(s) => s.parse().map_err(CorpusError::from)?,
        None => cfg.prevalence_mode()?,
    };
    Ok(ReportConfig { prevalence })
}

fn extract(protocols: &Path, out: &Path, cfg: RunConfig, run: &RunArgs) -> Outcome {
    let corpus = load_protocols(protocols)?;
    let pipe = pipeline(cfg, run)?;
    let outcomes = pipe.extract(&corpus);
    let mut ok = Vec::new();
    let mut failed = 0;
    for (id, res) in outcomes {
        match res {
            Ok(f) => ok.push(f),
            Err(e) => {
                failed += 1;
                eprintln!("extract {id}: {e}");
            }
        }
    }
    write_features(out, &ok)?;
    eprintln!("extracted {} of {} protocols into {}", ok.len(), ok.len() + failed, out.display());
    if ok.is_empty() {
        return Err(Failure { code: 1, message: "every protocol failed to extract".into() });
    }
    Ok(())
}

fn evidence_csv(reports: &[protocheck::detectors::DetectionReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["protocol_id", "label", "verdict", "evidence"]).expect("in-memory write");
    for r in reports {
        for (label, d) in &r.detections {
            w.write_record([r.protocol_id.as_str(), label.as_str(), d.verdict.cell(), d.evidence.as_str()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn rate(
    protocols: &Path,
    features: &Path,
    out: &Path,
    rater_id: &str,
    evidence: Option<&Path>,
    cfg: RunConfig,
    run: &RunArgs,
) -> Outcome {
    let corpus = load_protocols(protocols)?;
    let features = load_features(features)?;
    let pipe = pipeline(cfg, run)?;
    let reports = pipe.detect(&corpus, &features);
    let ratings: Vec<_> = reports.iter().map(|r| r.rating(rater_id)).collect();
    write_atomic(out, ratings_to_csv(&ratings).as_bytes())?;
    if let Some(path) = evidence {
        write_atomic(path, evidence_csv(&reports).as_bytes())?;
    }
    eprintln!("rated {} protocols into {}", ratings.len(), out.display());
    Ok(())
}

fn agree_cmd(files: &[PathBuf], out: Option<&Path>, rc: &ReportConfig) -> Outcome {
    let sets = files.iter().map(|f| read_ratings(f)).collect::<Result<Vec<_>, _>>()?;
    let report = agree(&sets, rc)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(prefix) = out {
        let with = |ext: &str| {
            let mut p = prefix.as_os_str().to_owned();
            p.push(ext);
            PathBuf::from(p)
        };
        write_atomic(&with(".csv"), report.to_csv().as_bytes())?;
        write_atomic(&with(".txt"), table.as_bytes())?;
    }
    Ok(())
}

fn report_cmd(protocols: &Path, manifest: Option<&Path>, ratings: &[PathBuf], out: &Path, rc: &ReportConfig) -> Outcome {
    let corpus = Corpus::load(protocols, manifest)?;
    let mut all = Vec::new();
    for f in ratings {
        all.extend(read_ratings(f)?);
    }
    let text = render_summary(&corpus, &all, rc)?;
    write_atomic(out, text.as_bytes())?;
    Ok(())
}

fn list_detectors() {
    let width = ErrorLabel::ALL.iter().map(|l| l.as_str().len()).max().unwrap_or(0);
    for spec in registry() {
        let knobs = if spec.knobs.is_empty() { "-".to_string() } else { spec.knobs.join(",") };
        let template = spec.template.unwrap_or("-");
        println!(
            "{:width$}  {:7}  template={template}  knobs={knobs}\n{:width$}  {}",
            spec.label.as_str(),
            spec.mode.as_str(),
            "",
            spec.rule
        );
    }
}

fn run(cli: Cli) -> Outcome {
    let base = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Extract { protocols, out, run } => {
            let cfg = apply(base, &run);
            extract(&protocols, &out, cfg, &run)
        }
        Command::Rate { protocols, features, out, rater_id, evidence, run } => {
            let cfg = apply(base, &run);
            rate(&protocols, &features, &out, &rater_id, evidence.as_deref(), cfg, &run)
        }
        Command::Agree { ratings, out, prevalence } => {
            let rc = report_config(&base, prevalence.as_deref())?;
            agree_cmd(&ratings, out.as_deref(), &rc)
        }
        Command::Report { protocols, manifest, ratings, out, prevalence } => {
            let rc = report_config(&base, prevalence.as_deref())?;
            report_cmd(&protocols, manifest.as_deref(), &ratings, &out, &rc)
        }
        Command::Detectors => {
            list_detectors();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
