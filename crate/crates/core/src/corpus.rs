//! Corpus files, split manifests, rating and feature files, run
//! configuration, and the extract/rate/agree/report pipeline the CLI drives.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{build_report, AgreementError, AgreementReport, PrevalenceMode, ReportConfig};
use crate::detectors::{failed_report, run_all, DetectionReport, DetectorConfig};
use crate::extraction::{
    mock_extract, ExperimentFeatures, ExtractionError, Extractor, GoldAnnotation, GoldStore, Lexicon, Segmentation,
};
use crate::llm::{
    Gateway, HttpTransport, LlmConfig, LlmError, MockProvider, PromptSet, Provider, ProviderKind, RemoteChatProvider,
};
use crate::model::{
    ErrorLabel, Protocol, ProtocolValidator, RawProtocol, Rating, RatingMatrix, TaskSpec, Verdict, Verdicts,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("{path}: invalid protocol: {}", problems.join("; "))]
    InvalidProtocol { path: String, problems: Vec<String> },
    #[error("no protocols found in {0}")]
    NoProtocols(String),
    #[error("split manifest: {0}")]
    Split(String),
    #[error("task definitions: {0}")]
    Task(String),
    #[error("{path}: {detail}")]
    Ratings { path: String, detail: String },
    #[error("rating files share no subjects")]
    NoCommonSubjects,
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

fn read_text(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// `*.toml` files in `dir`, sorted by name.
fn toml_files(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CorpusError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e.error })?;
    Ok(())
}

const TASK_CONES: &str = include_str!("../data/tasks/cones.toml");
const TASK_YEAST: &str = include_str!("../data/tasks/yeast.toml");

pub fn builtin_task(id: &str) -> Option<TaskSpec> {
    let text = match id {
        "cones" => TASK_CONES,
        "yeast" => TASK_YEAST,
        _ => return None,
    };
    Some(toml::from_str(text).expect("built-in task is valid"))
}

/// Task definitions with their lexicons.
#[derive(Debug, Clone)]
pub struct TaskRegistry {
    tasks: BTreeMap<String, TaskSpec>,
    lexicons: BTreeMap<String, Lexicon>,
}

impl TaskRegistry {
    pub fn builtin() -> Self {
        let mut reg = TaskRegistry { tasks: BTreeMap::new(), lexicons: BTreeMap::new() };
        for id in ["cones", "yeast"] {
            reg.tasks.insert(id.to_string(), builtin_task(id).expect("builtin task"));
            reg.lexicons.insert(id.to_string(), Lexicon::builtin(id).expect("builtin lexicon"));
        }
        reg.check().expect("built-in tasks are consistent");
        reg
    }

    /// Built-in tasks and lexicons, overridden or extended by the `*.toml`
    /// files in the given directories.
    pub fn load(tasks_dir: Option<&Path>, lexicons_dir: Option<&Path>) -> Result<Self, CorpusError> {
        let mut reg = Self::builtin();
        if let Some(dir) = lexicons_dir {
            for path in toml_files(dir)? {
                let lex = Lexicon::load(&path)?;
                reg.lexicons.insert(lex.lexicon_id.clone(), lex);
            }
        }
        if let Some(dir) = tasks_dir {
            for path in toml_files(dir)? {
                let task: TaskSpec = toml::from_str(&read_text(&path)?)
                    .map_err(|e| CorpusError::Parse { path: path.display().to_string(), detail: e.to_string() })?;
                reg.tasks.insert(task.task_id.clone(), task);
            }
        }
        reg.check()?;
        Ok(reg)
    }

    fn check(&self) -> Result<(), CorpusError> {
        for task in self.tasks.values() {
            let lex = self.lexicons.get(&task.lexicon_id).ok_or_else(|| {
                CorpusError::Task(format!("task {} references unknown lexicon {}", task.task_id, task.lexicon_id))
            })?;
            for c in &task.required_components {
                if !lex.contains_variable(c) {
                    return Err(CorpusError::Task(format!(
                        "task {}: required component {c} is not a variable of lexicon {}",
                        task.task_id, task.lexicon_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.get(id)
    }

    pub fn lexicon(&self, id: &str) -> Option<&Lexicon> {
        self.lexicons.get(id)
    }

    pub fn task_for(&self, protocol: &Protocol) -> Result<(&TaskSpec, &Lexicon), CorpusError> {
        let id = protocol.topic.task_id();
        let task = self
            .task(id)
            .ok_or_else(|| CorpusError::Task(format!("protocol {}: no task definition for topic {id}", protocol.id)))?;
        let lex = self.lexicon(&task.lexicon_id).expect("checked at load");
        Ok((task, lex))
    }
}

pub fn parse_protocol(text: &str, origin: &str) -> Result<RawProtocol, CorpusError> {
    toml::from_str(text).map_err(|e| CorpusError::Parse { path: origin.to_string(), detail: e.to_string() })
}

pub fn protocol_to_toml(p: &Protocol) -> String {
    toml::to_string(&p.to_raw()).expect("protocol serializes")
}

/// Every `*.toml` protocol file in `dir`, validated and sorted by id.
pub fn load_protocols(dir: &Path) -> Result<Vec<Protocol>, CorpusError> {
    let paths = toml_files(dir)?;
    if paths.is_empty() {
        return Err(CorpusError::NoProtocols(dir.display().to_string()));
    }
    let mut validator = ProtocolValidator::new();
    let mut protocols = Vec::with_capacity(paths.len());
    for path in paths {
        let origin = path.display().to_string();
        let raw = parse_protocol(&read_text(&path)?, &origin)?;
        match validator.validate(&raw) {
            Ok(v) => {
                for w in &v.warnings {
                    log::warn!("{origin}: {w}");
                }
                protocols.push(v.protocol);
            }
            Err(errors) => {
                return Err(CorpusError::InvalidProtocol {
                    path: origin,
                    problems: errors.iter().map(|e| e.to_string()).collect(),
                })
            }
        }
    }
    protocols.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(protocols)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Training,
    HumanIrr,
    HumanVsAi,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Training, Split::HumanIrr, Split::HumanVsAi];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::HumanIrr => "human_irr",
            Split::HumanVsAi => "human_vs_ai",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    #[serde(default)]
    pub training: BTreeSet<String>,
    #[serde(default)]
    pub human_irr: BTreeSet<String>,
    #[serde(default)]
    pub human_vs_ai: BTreeSet<String>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        toml::from_str(&read_text(path)?)
            .map_err(|e| CorpusError::Parse { path: path.display().to_string(), detail: e.to_string() })
    }

    pub fn get(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Training => &self.training,
            Split::HumanIrr => &self.human_irr,
            Split::HumanVsAi => &self.human_vs_ai,
        }
    }

    /// Subset and disjointness rules, plus every id naming a known protocol.
    pub fn check(&self, known: &BTreeSet<String>) -> Result<(), CorpusError> {
        let outside: Vec<&String> = self.human_irr.difference(&self.human_vs_ai).collect();
        if !outside.is_empty() {
            return Err(CorpusError::Split(format!("human_irr ids not in human_vs_ai: {outside:?}")));
        }
        let overlap: Vec<&String> = self.training.intersection(&self.human_vs_ai).collect();
        if !overlap.is_empty() {
            return Err(CorpusError::Split(format!("ids in both training and human_vs_ai: {overlap:?}")));
        }
        for split in Split::ALL {
            let unknown: Vec<&String> = self.get(split).difference(known).collect();
            if !unknown.is_empty() {
                return Err(CorpusError::Split(format!("{} names unknown protocols: {unknown:?}", split.as_str())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub protocols: Vec<Protocol>,
    pub splits: SplitManifest,
    /// protocol id -> task id.
    pub task_bindings: BTreeMap<String, String>,
}

impl Corpus {
    pub fn new(protocols: Vec<Protocol>, splits: SplitManifest) -> Result<Self, CorpusError> {
        let known: BTreeSet<String> = protocols.iter().map(|p| p.id.clone()).collect();
        splits.check(&known)?;
        let task_bindings = protocols.iter().map(|p| (p.id.clone(), p.topic.task_id().to_string())).collect();
        Ok(Corpus { protocols, splits, task_bindings })
    }

    pub fn load(dir: &Path, manifest: Option<&Path>) -> Result<Self, CorpusError> {
        let protocols = load_protocols(dir)?;
        let splits = match manifest {
            Some(path) => SplitManifest::load(path)?,
            None => SplitManifest::default(),
        };
        Corpus::new(protocols, splits)
    }
}

const RATING_KEYS: [&str; 2] = ["protocol_id", "rater_id"];

/// Rating rows sorted as given; cells are `1`, `0` or `NA`.
pub fn ratings_to_csv(ratings: &[Rating]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = RATING_KEYS.iter().copied().chain(ErrorLabel::ALL.iter().map(|l| l.as_str())).collect();
    w.write_record(&header).expect("in-memory write");
    for r in ratings {
        let mut row = vec![r.protocol_id.as_str(), r.rater_id.as_str()];
        row.extend(r.verdicts.iter().map(|(_, v)| v.cell()));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn parse_ratings(text: &str, origin: &str) -> Result<Vec<Rating>, CorpusError> {
    let bad = |detail: String| CorpusError::Ratings { path: origin.to_string(), detail };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (pid, rid) = match (col("protocol_id"), col("rater_id")) {
        (Some(p), Some(r)) => (p, r),
        _ => return Err(bad("header needs protocol_id and rater_id".into())),
    };
    let mut label_cols = Vec::new();
    for label in ErrorLabel::ALL {
        label_cols.push((label, col(label.as_str()).ok_or_else(|| bad(format!("missing column {label}")))?));
    }
    if let Some(extra) = header
        .iter()
        .find(|h| !RATING_KEYS.contains(h) && h.parse::<ErrorLabel>().is_err())
    {
        return Err(bad(format!("unknown column {extra:?}")));
    }
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let row = line + 2;
        let protocol_id = record[pid].to_string();
        let rater_id = record[rid].to_string();
        if protocol_id.is_empty() || rater_id.is_empty() {
            return Err(bad(format!("row {row}: empty protocol_id or rater_id")));
        }
        if !seen.insert((protocol_id.clone(), rater_id.clone())) {
            return Err(bad(format!("row {row}: duplicate rating for {protocol_id} by {rater_id}")));
        }
        let mut verdicts = Verdicts::default();
        for &(label, c) in &label_cols {
            let v = Verdict::from_cell(&record[c])
                .ok_or_else(|| bad(format!("row {row}, column {label}: expected 1, 0 or NA, got {:?}", &record[c])))?;
            verdicts.set(label, v);
        }
        out.push(Rating { protocol_id, rater_id, verdicts });
    }
    Ok(out)
}

pub fn read_ratings(path: &Path) -> Result<Vec<Rating>, CorpusError> {
    parse_ratings(&read_text(path)?, &path.display().to_string())
}

/// Writes `<id>.toml` per feature record.
pub fn write_features(dir: &Path, features: &[ExperimentFeatures]) -> Result<(), CorpusError> {
    for f in features {
        write_atomic(&dir.join(format!("{}.toml", f.protocol_id)), f.to_toml().as_bytes())?;
    }
    Ok(())
}

pub fn load_features(dir: &Path) -> Result<BTreeMap<String, ExperimentFeatures>, CorpusError> {
    let mut out = BTreeMap::new();
    for path in toml_files(dir)? {
        let f = ExperimentFeatures::from_toml(&read_text(&path)?, &path.display().to_string())?;
        f.validate()?;
        out.insert(f.protocol_id.clone(), f);
    }
    Ok(out)
}

/// Everything a pipeline run needs besides its inputs. Credentials are never
/// part of it; remote mode reads the key from the environment variable named
/// by `llm.api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub llm: LlmConfig,
    pub detectors: DetectorConfig,
    pub prevalence: String,
    pub locale: String,
    pub segmentation: Segmentation,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            llm: LlmConfig::default(),
            detectors: DetectorConfig::default(),
            prevalence: "median".to_string(),
            locale: "en".to_string(),
            segmentation: Segmentation::default(),
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        toml::from_str(&read_text(path)?)
            .map_err(|e| CorpusError::Parse { path: path.display().to_string(), detail: e.to_string() })
    }

    pub fn prevalence_mode(&self) -> Result<PrevalenceMode, CorpusError> {
        Ok(self.prevalence.parse()?)
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Answers the direct classification prompts from gold sidecars, keyed by
/// protocol id.
pub fn gold_direct_provider(gold: &GoldStore, ids: impl IntoIterator<Item = String>) -> MockProvider {
    let mut mock = MockProvider::new();
    for id in ids {
        let Some(ann) = gold.get(&id) else { continue };
        let d = ann.direct;
        for (template, answer) in
            [("best_result", d.best_result), ("result_repeats", d.result_obs_hyp_same), ("no_result", d.no_result_statement)]
        {
            let text = format!("Gold annotation for {id}.\nANSWER: {}", if answer { "YES" } else { "NO" });
            mock = mock.with_response(template, Some(&id), text);
        }
    }
    mock
}

/// A provider that replies to every pipeline prompt in the expected answer
/// format, from gold sidecars. Used to record cache fixtures without network
/// access. Observation-link questions are answered "none", so observed flags
/// come from explicit trial mentions only.
#[derive(Debug)]
pub struct GoldScriptedProvider {
    gold: GoldStore,
}

impl GoldScriptedProvider {
    pub fn new(gold: GoldStore) -> Self {
        GoldScriptedProvider { gold }
    }

    fn annotation(&self, subject: Option<&str>) -> Result<&GoldAnnotation, LlmError> {
        let id = subject.ok_or_else(|| LlmError::Provider("request has no subject".into()))?;
        self.gold.get(id).ok_or_else(|| LlmError::Provider(format!("no gold annotation for {id}")))
    }
}

fn list(items: &BTreeSet<crate::extraction::CanonicalVariable>) -> String {
    if items.is_empty() {
        return "none".to_string();
    }
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

impl Provider for GoldScriptedProvider {
    fn name(&self) -> &str {
        "gold-scripted"
    }

    fn send(&self, request: &crate::llm::CompletionRequest) -> Result<String, LlmError> {
        let ann = self.annotation(request.subject.as_deref())?;
        let f = &ann.features;
        let mut out = String::from("Answer derived from the gold annotation.\n");
        match request.template_id.as_str() {
            "hypothesis_structure" => {
                let h = &f.hypothesis;
                let _ = write!(
                    out,
                    "```answer\nexists: {}\ndependent_variable: {}\nindependent_variables: {}\nconjoined: {}\nobservation_focused: {}\n```",
                    yes_no(h.exists),
                    h.dependent_variable.as_deref().unwrap_or("none"),
                    list(&h.independent_variables),
                    yes_no(h.conjoined),
                    yes_no(h.observation_focused)
                );
            }
            "trial_segmentation" => {
                let _ = writeln!(out, "```answer\ntrial_count: {}", f.trials.len());
                for t in &f.trials {
                    let _ = writeln!(out, "trial.{}.variables: {}", t.index, list(&t.variables));
                    let _ = writeln!(out, "trial.{}.instruments: {}", t.index, list(&t.instruments));
                    let _ = writeln!(out, "trial.{}.altered: {}", t.index, yes_no(t.altered));
                }
                out.push_str("```");
            }
            "observation_links" => {
                let count = request.prompt.user.lines().filter(|l| l.starts_with("Sentence ")).count();
                out.push_str("```answer\n");
                for k in 1..=count {
                    let _ = writeln!(out, "sentence.{k}: none");
                }
                out.push_str("```");
            }
            "result_kind" => {
                let _ = write!(out, "```answer\nkind: {}\n```", f.result_kind.as_str());
            }
            "best_result" => {
                let _ = write!(out, "ANSWER: {}", if ann.direct.best_result { "YES" } else { "NO" });
            }
            "result_repeats" => {
                let _ = write!(out, "ANSWER: {}", if ann.direct.result_obs_hyp_same { "YES" } else { "NO" });
            }
            "no_result" => {
                let _ = write!(out, "ANSWER: {}", if ann.direct.no_result_statement { "YES" } else { "NO" });
            }
            other => return Err(LlmError::UnknownTemplate(other.to_string())),
        }
        Ok(out)
    }
}

/// Outcome of extracting one protocol.
pub type ExtractOutcome = (String, Result<ExperimentFeatures, String>);

/// Extraction and rating over a corpus with one configuration.
pub struct Pipeline {
    pub config: RunConfig,
    tasks: TaskRegistry,
    prompts: PromptSet,
    gateway: Gateway,
    gold: Option<GoldStore>,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// Builds the provider from the configuration. Mock mode needs gold
    /// sidecars; remote mode needs the credential variable.
    pub fn new(config: RunConfig, tasks: TaskRegistry, gold: Option<GoldStore>) -> Result<Self, CorpusError> {
        let provider: Option<Arc<dyn Provider>> = match config.llm.provider {
            ProviderKind::Mock => {
                let gold = gold
                    .as_ref()
                    .ok_or_else(|| CorpusError::Config("mock provider needs gold annotations (--gold)".into()))?;
                let ids: Vec<String> = gold_ids(gold);
                Some(Arc::new(gold_direct_provider(gold, ids)))
            }
            ProviderKind::CacheReplay => None,
            ProviderKind::RemoteChatApi => Some(Arc::new(RemoteChatProvider::from_env(
                &config.llm,
                Arc::new(HttpTransport::default()),
            )?)),
        };
        Self::with_provider(config, tasks, gold, provider)
    }

    pub fn with_provider(
        config: RunConfig,
        tasks: TaskRegistry,
        gold: Option<GoldStore>,
        provider: Option<Arc<dyn Provider>>,
    ) -> Result<Self, CorpusError> {
        if config.llm.temperature < 0.0 || !config.llm.temperature.is_finite() {
            return Err(CorpusError::Config(format!("temperature {} must be >= 0", config.llm.temperature)));
        }
        let prompts = PromptSet::builtin(&config.locale)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs.max(1))
            .build()
            .map_err(|e| CorpusError::Config(e.to_string()))?;
        let gateway = Gateway::new(config.llm.clone(), provider);
        Ok(Pipeline { config, tasks, prompts, gateway, gold, pool })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn extract_one(&self, p: &Protocol) -> Result<ExperimentFeatures, CorpusError> {
        if self.config.llm.provider == ProviderKind::Mock {
            let gold = self.gold.as_ref().expect("checked in new");
            return Ok(mock_extract(p, gold)?);
        }
        let (task, lexicon) = self.tasks.task_for(p)?;
        let extractor = Extractor {
            gateway: &self.gateway,
            prompts: &self.prompts,
            lexicon,
            task,
            segmentation: self.config.segmentation,
        };
        Ok(extractor.extract(p)?)
    }

    /// One outcome per protocol, in input order.
    pub fn extract(&self, protocols: &[Protocol]) -> Vec<ExtractOutcome> {
        self.pool.install(|| {
            protocols
                .par_iter()
                .map(|p| (p.id.clone(), self.extract_one(p).map_err(|e| e.to_string())))
                .collect()
        })
    }

    /// Detection reports in input order. Protocols without features get an
    /// all-indeterminate report.
    pub fn detect(&self, protocols: &[Protocol], features: &BTreeMap<String, ExperimentFeatures>) -> Vec<DetectionReport> {
        self.pool.install(|| {
            protocols
                .par_iter()
                .map(|p| {
                    let Some(f) = features.get(&p.id) else {
                        log::warn!("{}: no features, rating row left NA", p.id);
                        return failed_report(&p.id, "no features for this protocol");
                    };
                    match self.tasks.task_for(p) {
                        Ok((task, _)) => run_all(p, f, task, &self.config.detectors, &self.gateway, &self.prompts),
                        Err(e) => {
                            log::warn!("{}: {e}", p.id);
                            failed_report(&p.id, &e.to_string())
                        }
                    }
                })
                .collect()
        })
    }

    pub fn rate(
        &self,
        protocols: &[Protocol],
        features: &BTreeMap<String, ExperimentFeatures>,
        rater_id: &str,
    ) -> Vec<Rating> {
        self.detect(protocols, features).iter().map(|r| r.rating(rater_id)).collect()
    }
}

fn gold_ids(gold: &GoldStore) -> Vec<String> {
    gold.ids().map(str::to_string).collect()
}

/// Combines rating sets (one per file) over the subjects they all share and
/// builds the agreement report. Subjects are ordered by id.
pub fn agree(rating_sets: &[Vec<Rating>], cfg: &ReportConfig) -> Result<AgreementReport, CorpusError> {
    let mut common: Option<BTreeSet<String>> = None;
    for set in rating_sets {
        let ids: BTreeSet<String> = set.iter().map(|r| r.protocol_id.clone()).collect();
        common = Some(match common {
            None => ids,
            Some(c) => c.intersection(&ids).cloned().collect(),
        });
    }
    let common = common.unwrap_or_default();
    if common.is_empty() {
        return Err(CorpusError::NoCommonSubjects);
    }
    let mut combined: Vec<Rating> = rating_sets
        .iter()
        .flatten()
        .filter(|r| common.contains(&r.protocol_id))
        .cloned()
        .collect();
    combined.sort_by(|a, b| a.protocol_id.cmp(&b.protocol_id));
    let matrix = RatingMatrix::from_ratings(&combined).map_err(|e| CorpusError::Ratings {
        path: "<combined>".into(),
        detail: e.to_string(),
    })?;
    Ok(build_report(&matrix, cfg)?)
}

/// Per-split metadata counts, rows like `topic: cones`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composition {
    pub columns: Vec<String>,
    pub rows: BTreeMap<(u8, String), Vec<usize>>,
}

pub fn composition(corpus: &Corpus) -> Composition {
    let mut columns = vec!["all".to_string()];
    let mut members: Vec<BTreeSet<String>> = vec![corpus.protocols.iter().map(|p| p.id.clone()).collect()];
    for split in Split::ALL {
        if !corpus.splits.get(split).is_empty() {
            columns.push(split.as_str().to_string());
            members.push(corpus.splits.get(split).clone());
        }
    }
    let mut rows: BTreeMap<(u8, String), Vec<usize>> = BTreeMap::new();
    for p in &corpus.protocols {
        let keys = [
            (0u8, format!("topic: {}", p.topic)),
            (1, format!("gender: {}", p.gender)),
            (2, format!("grade: {}", p.grade)),
            (3, format!("performance: {}", p.performance)),
        ];
        for key in keys {
            let counts = rows.entry(key).or_insert_with(|| vec![0; columns.len()]);
            for (c, m) in members.iter().enumerate() {
                if m.contains(&p.id) {
                    counts[c] += 1;
                }
            }
        }
    }
    Composition { columns, rows }
}

impl Composition {
    pub fn total(&self, column: &str) -> Option<usize> {
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.rows.iter().filter(|((group, _), _)| *group == 0).map(|(_, v)| v[c]).sum())
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| category | {} |", self.columns.join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(self.columns.len()));
        let sizes: Vec<String> = (0..self.columns.len())
            .map(|c| self.rows.iter().filter(|((g, _), _)| *g == 0).map(|(_, v)| v[c]).sum::<usize>().to_string())
            .collect();
        let _ = writeln!(out, "| protocols | {} |", sizes.join(" | "));
        for ((_, name), counts) in &self.rows {
            let cells: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
        }
        out
    }
}

/// Markdown summary: corpus composition, then an agreement table for every
/// split (and the whole corpus) the ratings cover with two or three raters.
pub fn render_summary(corpus: &Corpus, ratings: &[Rating], cfg: &ReportConfig) -> Result<String, CorpusError> {
    let mut out = String::from("# Corpus report\n\n## Composition\n\n");
    out.push_str(&composition(corpus).to_markdown());
    let mut scopes: Vec<(String, BTreeSet<String>)> =
        vec![("all".to_string(), corpus.protocols.iter().map(|p| p.id.clone()).collect())];
    for split in Split::ALL {
        if !corpus.splits.get(split).is_empty() {
            scopes.push((split.as_str().to_string(), corpus.splits.get(split).clone()));
        }
    }
    for (name, ids) in scopes {
        let scoped: Vec<Rating> = ratings.iter().filter(|r| ids.contains(&r.protocol_id)).cloned().collect();
        let _ = write!(out, "\n## Agreement: {name}\n\n");
        if scoped.is_empty() {
            out.push_str("No ratings for this split.\n");
            continue;
        }
        let mut scoped = scoped;
        scoped.sort_by(|a, b| a.protocol_id.cmp(&b.protocol_id));
        let matrix = match RatingMatrix::from_ratings(&scoped) {
            Ok(m) => m,
            Err(e) => {
                let _ = writeln!(out, "Ratings incomplete: {e}.");
                continue;
            }
        };
        match build_report(&matrix, cfg) {
            Ok(report) => {
                let _ = write!(out, "```text\n{}```\n", report.to_table());
            }
            Err(e) => {
                let _ = writeln!(out, "Not reported: {e}.");
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_protocol;

    fn protocol(id: &str, topic: &str) -> Protocol {
        validate_protocol(&RawProtocol {
            id: Some(id.into()),
            topic: Some(topic.into()),
            grade: Some(6),
            gender: Some("female".into()),
            performance: None,
            sections: BTreeMap::new(),
        })
        .unwrap()
        .protocol
    }

    #[test]
    fn builtin_tasks_are_consistent() {
        let reg = TaskRegistry::builtin();
        let (task, lex) = reg.task_for(&protocol("Y-1", "yeast")).unwrap();
        assert_eq!(task.research_question, "Find out what yeast needs to produce carbon dioxide");
        assert_eq!(lex.lexicon_id, "yeast");
        assert!(reg.task_for(&protocol("O-1", "other:magnets")).is_err());
    }

    #[test]
    fn manifest_rules() {
        let known: BTreeSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let set = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let ok = SplitManifest { training: set(&["a"]), human_irr: set(&["b"]), human_vs_ai: set(&["b", "c"]) };
        ok.check(&known).unwrap();
        let bad = SplitManifest { human_irr: set(&["a"]), ..ok.clone() };
        assert!(bad.check(&known).unwrap_err().to_string().contains("human_irr ids not in human_vs_ai"));
        let bad = SplitManifest { training: set(&["c"]), ..ok.clone() };
        assert!(bad.check(&known).unwrap_err().to_string().contains("both training and human_vs_ai"));
        let bad = SplitManifest { training: set(&["z"]), ..ok };
        assert!(bad.check(&known).unwrap_err().to_string().contains("unknown protocols"));
    }

    #[test]
    fn ratings_round_trip() {
        let mut v = Verdicts::uniform(Verdict::ErrorAbsent);
        v.set(ErrorLabel::IsTest, Verdict::Indeterminate);
        v.set(ErrorLabel::OneTrial, Verdict::ErrorPresent);
        let ratings = vec![Rating { protocol_id: "C-01".into(), rater_id: "ai".into(), verdicts: v }];
        let text = ratings_to_csv(&ratings);
        assert!(text.lines().nth(1).unwrap().contains(",NA,"));
        assert_eq!(parse_ratings(&text, "x").unwrap(), ratings);
    }

    #[test]
    fn ratings_rejects_bad_input() {
        let good = ratings_to_csv(&[Rating {
            protocol_id: "C-01".into(),
            rater_id: "ai".into(),
            verdicts: Verdicts::uniform(Verdict::ErrorAbsent),
        }]);
        let bad_cell = good.replacen(",0,", ",maybe,", 1);
        assert!(parse_ratings(&bad_cell, "x").unwrap_err().to_string().contains("expected 1, 0 or NA"));
        let missing = good.replace(",if_no_result", "").replace(|c: char| c == '\n', "\n");
        assert!(parse_ratings(&missing, "x").is_err());
        let dup = format!("{good}{}", good.lines().nth(1).unwrap());
        assert!(parse_ratings(&dup, "x").unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let err = toml::from_str::<RunConfig>("api_key = \"sk-...\"\n").unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let cfg: RunConfig = toml::from_str("prevalence = \"rater=ai\"\n[llm]\nprovider = \"cache-replay\"\n").unwrap();
        assert_eq!(cfg.llm.provider, ProviderKind::CacheReplay);
        assert_eq!(cfg.llm.temperature, 0.0);
        assert_eq!(cfg.prevalence_mode().unwrap(), PrevalenceMode::Rater("ai".into()));
    }

    #[test]
    fn composition_counts() {
        let corpus = Corpus::new(
            vec![protocol("C-1", "cones"), protocol("Y-1", "yeast")],
            SplitManifest { human_vs_ai: ["Y-1".to_string()].into(), ..Default::default() },
        )
        .unwrap();
        let c = composition(&corpus);
        assert_eq!(c.columns, ["all", "human_vs_ai"]);
        assert_eq!(c.total("all"), Some(2));
        assert_eq!(c.total("human_vs_ai"), Some(1));
        let md = c.to_markdown();
        assert!(md.contains("| performance: unspecified | 2 | 1 |"));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
