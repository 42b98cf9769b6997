//! Feature extraction: hypothesis structure and trial lists, with every
//! variable mention mapped through a per-task lexicon.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::llm::{Gateway, LlmError, PromptSet};
use crate::model::{Protocol, SectionKind, TaskSpec};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("empty term")]
    EmptyTerm,
    #[error(transparent)]
    Gateway(#[from] LlmError),
    #[error("{template}: malformed answer block: {detail}")]
    Malformed { template: String, detail: String },
    #[error("no gold annotation for protocol {0:?}")]
    MissingAnnotation(String),
    #[error("invalid annotation for {id}: {}", problems.join("; "))]
    InvalidAnnotation { id: String, problems: Vec<String> },
    #[error("invalid lexicon {id}: {}", problems.join("; "))]
    InvalidLexicon { id: String, problems: Vec<String> },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
}

const UNKNOWN_PREFIX: &str = "unknown:";

/// A variable after canonicalization. Terms missing from the lexicon are kept
/// as tagged unknowns so set comparisons still see them.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CanonicalVariable {
    Known(String),
    Unknown(String),
}

impl CanonicalVariable {
    pub fn known(name: &str) -> Self {
        CanonicalVariable::Known(name.to_string())
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, CanonicalVariable::Unknown(_))
    }

    /// The bare name, without the unknown tag.
    pub fn name(&self) -> &str {
        match self {
            CanonicalVariable::Known(n) | CanonicalVariable::Unknown(n) => n,
        }
    }
}

impl fmt::Display for CanonicalVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanonicalVariable::Known(n) => f.write_str(n),
            CanonicalVariable::Unknown(n) => write!(f, "{UNKNOWN_PREFIX}{n}"),
        }
    }
}

impl FromStr for CanonicalVariable {
    type Err = ExtractionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n = normalize_term(s);
        if n.is_empty() {
            return Err(ExtractionError::EmptyTerm);
        }
        Ok(match n.strip_prefix(UNKNOWN_PREFIX) {
            Some(rest) => CanonicalVariable::Unknown(rest.trim().to_string()),
            None => CanonicalVariable::Known(n),
        })
    }
}

impl Serialize for CanonicalVariable {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CanonicalVariable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Lowercases, collapses whitespace and strips surrounding punctuation.
pub fn normalize_term(term: &str) -> String {
    let collapsed = term.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '"' | '\'' | '-' | '*'))
        .trim()
        .to_string()
}

#[derive(Debug, Clone, Deserialize)]
struct LexiconFile {
    lexicon_id: String,
    variables: Vec<String>,
    #[serde(default)]
    instruments: Vec<String>,
    #[serde(default)]
    entries: BTreeMap<String, String>,
    #[serde(default)]
    instrument_entries: BTreeMap<String, String>,
}

/// Surface-form to canonical-variable mapping for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub lexicon_id: String,
    variables: BTreeSet<String>,
    instruments: BTreeSet<String>,
    entries: BTreeMap<String, String>,
    instrument_entries: BTreeMap<String, String>,
}

const LEXICON_CONES: &str = include_str!("../data/lexicons/cones.toml");
const LEXICON_YEAST: &str = include_str!("../data/lexicons/yeast.toml");

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, ExtractionError> {
        let file: LexiconFile = toml::from_str(text).map_err(|e| ExtractionError::Parse {
            path: "<lexicon>".into(),
            detail: e.to_string(),
        })?;
        let norm_map = |m: BTreeMap<String, String>| -> BTreeMap<String, String> {
            m.into_iter().map(|(k, v)| (normalize_term(&k), normalize_term(&v))).collect()
        };
        let lex = Lexicon {
            lexicon_id: file.lexicon_id,
            variables: file.variables.iter().map(|v| normalize_term(v)).collect(),
            instruments: file.instruments.iter().map(|v| normalize_term(v)).collect(),
            entries: norm_map(file.entries),
            instrument_entries: norm_map(file.instrument_entries),
        };
        lex.check()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, ExtractionError> {
        let text = fs::read_to_string(path).map_err(|source| ExtractionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn builtin(id: &str) -> Option<Self> {
        let text = match id {
            "cones" => LEXICON_CONES,
            "yeast" => LEXICON_YEAST,
            _ => return None,
        };
        Some(Self::parse(text).expect("built-in lexicon is valid"))
    }

    /// Entry targets must be canonical, and no canonical name may be
    /// redirected to another canonical (that would break idempotence).
    fn check(&self) -> Result<(), ExtractionError> {
        let mut problems = Vec::new();
        for (universe, entries, kind) in [
            (&self.variables, &self.entries, "variable"),
            (&self.instruments, &self.instrument_entries, "instrument"),
        ] {
            for (surface, target) in entries {
                if !universe.contains(target) {
                    problems.push(format!("{kind} entry {surface:?} targets non-canonical {target:?}"));
                }
                if universe.contains(surface) && surface != target {
                    problems.push(format!("canonical {kind} {surface:?} is redirected to {target:?}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ExtractionError::InvalidLexicon { id: self.lexicon_id.clone(), problems })
        }
    }

    pub fn variables(&self) -> impl Iterator<Item = CanonicalVariable> + '_ {
        self.variables.iter().map(|v| CanonicalVariable::Known(v.clone()))
    }

    pub fn instruments(&self) -> impl Iterator<Item = CanonicalVariable> + '_ {
        self.instruments.iter().map(|v| CanonicalVariable::Known(v.clone()))
    }

    pub fn contains_variable(&self, v: &CanonicalVariable) -> bool {
        matches!(v, CanonicalVariable::Known(n) if self.variables.contains(n))
    }

    /// Surface forms of variable entries, for tests and listings.
    pub fn variable_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn canonicalize(&self, term: &str) -> Result<CanonicalVariable, ExtractionError> {
        canonicalize(term, self)
    }

    pub fn canonicalize_instrument(&self, term: &str) -> Result<CanonicalVariable, ExtractionError> {
        lookup(term, &self.instruments, &self.instrument_entries)
    }

    /// Every variable whose surface form or canonical name occurs in `text` as
    /// a whole phrase. Longer phrases win over the words they contain.
    pub fn scan_variables(&self, text: &str) -> BTreeSet<CanonicalVariable> {
        scan(text, &self.variables, &self.entries)
    }

    pub fn scan_instruments(&self, text: &str) -> BTreeSet<CanonicalVariable> {
        scan(text, &self.instruments, &self.instrument_entries)
    }
}

fn lookup(
    term: &str,
    universe: &BTreeSet<String>,
    entries: &BTreeMap<String, String>,
) -> Result<CanonicalVariable, ExtractionError> {
    let n = normalize_term(term);
    if n.is_empty() {
        return Err(ExtractionError::EmptyTerm);
    }
    if let Some(rest) = n.strip_prefix(UNKNOWN_PREFIX) {
        let rest = rest.trim();
        if rest.is_empty() {
            return Err(ExtractionError::EmptyTerm);
        }
        return Ok(CanonicalVariable::Unknown(rest.to_string()));
    }
    if let Some(target) = entries.get(&n) {
        return Ok(CanonicalVariable::Known(target.clone()));
    }
    if universe.contains(&n) {
        return Ok(CanonicalVariable::Known(n));
    }
    Ok(CanonicalVariable::Unknown(n))
}

/// Maps a surface term to its canonical variable. Unknown terms become
/// `unknown:<normalized term>`.
pub fn canonicalize(term: &str, lex: &Lexicon) -> Result<CanonicalVariable, ExtractionError> {
    lookup(term, &lex.variables, &lex.entries)
}

fn scan(text: &str, universe: &BTreeSet<String>, entries: &BTreeMap<String, String>) -> BTreeSet<CanonicalVariable> {
    let hay = format!(" {} ", tokenize_words(text).join(" "));
    let mut forms: Vec<(String, &String)> = entries
        .iter()
        .map(|(k, v)| (k.clone(), v))
        .chain(universe.iter().map(|u| (u.clone(), u)))
        .collect();
    forms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
    let mut masked = hay;
    let mut found = BTreeSet::new();
    for (form, target) in forms {
        let needle = format!(" {} ", tokenize_words(&form).join(" "));
        if needle.trim().is_empty() {
            continue;
        }
        while let Some(pos) = masked.find(&needle) {
            found.insert(CanonicalVariable::Known(target.clone()));
            let blank = " ".repeat(needle.len() - 2);
            masked.replace_range(pos + 1..pos + needle.len() - 1, &blank);
        }
    }
    found
}

/// Lowercased word tokens; parentheses are kept as separate tokens so forms
/// like "water (hot)" still match.
fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() || c == '-' {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if c == '(' || c == ')' {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Structure of the student's hypothesis.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisAnalysis {
    pub exists: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependent_variable: Option<String>,
    #[serde(default)]
    pub independent_variables: BTreeSet<CanonicalVariable>,
    /// Two or more independent variables asserted jointly in one claim.
    #[serde(default)]
    pub conjoined: bool,
    /// States an expected observation rather than a dependent variable.
    #[serde(default)]
    pub observation_focused: bool,
}

impl HypothesisAnalysis {
    pub fn absent() -> Self {
        Self::default()
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !self.exists
            && (self.dependent_variable.is_some()
                || !self.independent_variables.is_empty()
                || self.conjoined
                || self.observation_focused)
        {
            p.push("hypothesis.exists=false but other hypothesis fields are set".to_string());
        }
        if self.conjoined && self.independent_variables.len() < 2 {
            p.push("hypothesis.conjoined=true with fewer than two independent variables".to_string());
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    /// 1-based position in the trial list.
    pub index: usize,
    #[serde(default)]
    pub variables: BTreeSet<CanonicalVariable>,
    #[serde(default)]
    pub instruments: BTreeSet<CanonicalVariable>,
    /// Modified while running.
    #[serde(default)]
    pub altered: bool,
    /// Referenced in the observation section.
    #[serde(default)]
    pub observed: bool,
}

impl Trial {
    pub fn new(index: usize, variables: &[&str]) -> Self {
        Trial {
            index,
            variables: variables.iter().map(|v| CanonicalVariable::known(v)).collect(),
            instruments: BTreeSet::new(),
            altered: false,
            observed: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResultKind {
    #[default]
    Absent,
    BestTrialStatement,
    RepeatsObservation,
    RepeatsHypothesis,
    VariableStatement,
    Other,
}

impl ResultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResultKind::Absent => "absent",
            ResultKind::BestTrialStatement => "best_trial_statement",
            ResultKind::RepeatsObservation => "repeats_observation",
            ResultKind::RepeatsHypothesis => "repeats_hypothesis",
            ResultKind::VariableStatement => "variable_statement",
            ResultKind::Other => "other",
        }
    }
}

impl FromStr for ResultKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match normalize_term(s).replace([' ', '-'], "_").as_str() {
            "absent" => ResultKind::Absent,
            "best_trial_statement" => ResultKind::BestTrialStatement,
            "repeats_observation" => ResultKind::RepeatsObservation,
            "repeats_hypothesis" => ResultKind::RepeatsHypothesis,
            "variable_statement" => ResultKind::VariableStatement,
            "other" => ResultKind::Other,
            other => return Err(format!("unknown result kind {other:?}")),
        })
    }
}

/// Everything the derived detectors need to know about one protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentFeatures {
    pub protocol_id: String,
    pub material_itemized: bool,
    pub implementation_documented: bool,
    pub observation_documented: bool,
    /// Trials were reconstructed from the observation section because the
    /// implementation section is empty.
    #[serde(default)]
    pub trials_from_observation: bool,
    pub result_kind: ResultKind,
    pub hypothesis: HypothesisAnalysis,
    #[serde(default)]
    pub trials: Vec<Trial>,
}

impl ExperimentFeatures {
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.hypothesis.problems();
        for (i, t) in self.trials.iter().enumerate() {
            if t.index != i + 1 {
                p.push(format!("trial at position {} has index {} (expected 1..n without gaps)", i + 1, t.index));
            }
        }
        if !self.implementation_documented && !self.trials.is_empty() && !self.trials_from_observation {
            p.push("trials present without implementation and not flagged trials_from_observation".into());
        }
        if !self.observation_documented && self.trials.iter().any(|t| t.observed) {
            p.push("trial marked observed but observation section is empty".into());
        }
        p
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ExtractionError::InvalidAnnotation { id: self.protocol_id.clone(), problems })
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("features serialize")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ExtractionError> {
        toml::from_str(text).map_err(|e| ExtractionError::Parse { path: origin.to_string(), detail: e.to_string() })
    }
}

/// Gold judgements for the direct (single-classification) detectors. The mock
/// provider answers classification prompts from these.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectAnswers {
    #[serde(default)]
    pub best_result: bool,
    #[serde(default)]
    pub result_obs_hyp_same: bool,
    #[serde(default)]
    pub no_result_statement: bool,
}

/// A gold-annotation sidecar: features plus direct answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    #[serde(flatten)]
    pub features: ExperimentFeatures,
    #[serde(default)]
    pub direct: DirectAnswers,
}

/// Gold sidecars keyed by protocol id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldStore {
    annotations: BTreeMap<String, GoldAnnotation>,
}

impl GoldStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, annotation: GoldAnnotation) {
        self.annotations.insert(annotation.features.protocol_id.clone(), annotation);
    }

    pub fn get(&self, id: &str) -> Option<&GoldAnnotation> {
        self.annotations.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.annotations.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Loads every `*.toml` sidecar in `dir`. Invariant checks happen at
    /// [`mock_extract`] time so a broken sidecar only fails its own protocol.
    pub fn load_dir(dir: &Path) -> Result<Self, ExtractionError> {
        let io = |source| ExtractionError::Io { path: dir.display().to_string(), source };
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "toml"))
            .collect();
        paths.sort();
        let mut store = GoldStore::new();
        for path in paths {
            let text = fs::read_to_string(&path)
                .map_err(|source| ExtractionError::Io { path: path.display().to_string(), source })?;
            let annotation: GoldAnnotation = toml::from_str(&text).map_err(|e| ExtractionError::Parse {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            store.insert(annotation);
        }
        Ok(store)
    }
}

/// Returns the protocol's gold features unchanged, after checking them.
pub fn mock_extract(protocol: &Protocol, gold: &GoldStore) -> Result<ExperimentFeatures, ExtractionError> {
    let annotation = gold
        .get(&protocol.id)
        .ok_or_else(|| ExtractionError::MissingAnnotation(protocol.id.clone()))?;
    annotation.features.validate()?;
    Ok(annotation.features.clone())
}

/// How implementation text is split into trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segmentation {
    /// One model call, given the detected step numbers as hints.
    #[default]
    Prompting,
    /// Numbered-step splitting and lexicon scanning only; no model calls.
    Numbering,
}

/// Output of [`Extractor::extract_trials`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialExtraction {
    pub trials: Vec<Trial>,
    pub implementation_documented: bool,
}

fn numbered_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)(\d{1,2})[.)](?:\s|$)").expect("regex"))
}

/// Splits text at sequential step numbers "1." "2)" ... Numbers out of
/// sequence stay part of the surrounding text. Returns `(number, segment)`.
pub fn numbered_segments(text: &str) -> Vec<(usize, String)> {
    let mut cuts = Vec::new();
    let mut expected = 1;
    for cap in numbered_marker().captures_iter(text) {
        let n: usize = cap[1].parse().expect("digits");
        if n == expected {
            let m = cap.get(1).expect("group");
            let end = cap.get(0).expect("match").end();
            cuts.push((n, m.start(), end));
            expected += 1;
        }
    }
    if cuts.is_empty() {
        let t = text.trim();
        return if t.is_empty() { Vec::new() } else { vec![(1, t.to_string())] };
    }
    cuts.iter()
        .enumerate()
        .map(|(i, &(n, _, body_start))| {
            let end = cuts.get(i + 1).map(|c| c.1).unwrap_or(text.len());
            (n, text[body_start..end].trim().to_string())
        })
        .collect()
}

fn alteration_cue() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(kept|keep|refill\w*|re-fill\w*|stirr?(ed|ing)?|added more|add more|topped up|removed?|took off|shook|shake|again added)\b")
            .expect("regex")
    })
}

fn explicit_index() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)(?:\b(?:trials?|attempts?|experiments?|tests?|tubes?|glass(?:es)?|beakers?|nr\.?|no\.?|number)\s*#?\s*|^\s*|#)(\d{1,2})(?:\s*(?:-|–|to|and|&|,)\s*(\d{1,2}))?\b",
        )
        .expect("regex")
    })
}

fn all_trials_cue() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:all|every|each)\s+(?:the\s+)?(?:trials?|attempts?|experiments?|tests?|tubes?|glasses|beakers?|cones)\b")
            .expect("regex")
    })
}

/// Sentence split on line breaks and terminal punctuation. A bare step number
/// ("1.") is not a sentence of its own.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut cur = String::new();
        let chars: Vec<char> = line.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            cur.push(c);
            let boundary = matches!(c, '.' | '!' | '?')
                && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
            if boundary {
                let body = cur.trim().trim_end_matches(['.', '!', '?']);
                if !body.is_empty() && !body.chars().all(|ch| ch.is_ascii_digit()) {
                    out.push(cur.trim().to_string());
                    cur.clear();
                }
            }
        }
        if !cur.trim().is_empty() {
            out.push(cur.trim().to_string());
        }
    }
    out
}

/// Trial indices a sentence names explicitly, clipped to `1..=n`.
pub fn explicit_trial_mentions(sentence: &str, n: usize) -> BTreeSet<usize> {
    let mut found = BTreeSet::new();
    if all_trials_cue().is_match(sentence) {
        found.extend(1..=n);
    }
    for cap in explicit_index().captures_iter(sentence) {
        let a: usize = cap[1].parse().unwrap_or(0);
        match cap.get(2).and_then(|m| m.as_str().parse::<usize>().ok()) {
            Some(b) => {
                let sep = &cap[0];
                if sep.contains('-') || sep.contains('–') || sep.to_lowercase().contains("to") {
                    found.extend(a.min(b)..=a.max(b));
                } else {
                    found.insert(a);
                    found.insert(b);
                }
            }
            None => {
                found.insert(a);
            }
        }
    }
    found.retain(|&i| i >= 1 && i <= n);
    found
}

fn parse_bool(fields: &BTreeMap<String, String>, key: &str) -> Option<bool> {
    fields.get(key).and_then(|v| match normalize_term(v).as_str() {
        "yes" | "true" | "y" => Some(true),
        "no" | "false" | "n" => Some(false),
        _ => None,
    })
}

fn split_list(value: &str) -> Vec<String> {
    let v = normalize_term(value);
    if matches!(v.as_str(), "" | "none" | "-" | "n/a" | "nothing") {
        return Vec::new();
    }
    v.split([',', ';'])
        .map(normalize_term)
        .filter(|s| !s.is_empty() && s != "none")
        .collect()
}

/// Runs the model-backed extraction for one task.
pub struct Extractor<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
    pub lexicon: &'a Lexicon,
    pub task: &'a TaskSpec,
    pub segmentation: Segmentation,
}

impl Extractor<'_> {
    fn list_names(items: impl Iterator<Item = CanonicalVariable>) -> String {
        items.map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
    }

    fn malformed(template: &str, detail: impl Into<String>) -> ExtractionError {
        ExtractionError::Malformed { template: template.to_string(), detail: detail.into() }
    }

    /// Blank text yields `exists = false` without a model call.
    pub fn analyze_hypothesis(&self, text: &str, subject: Option<&str>) -> Result<HypothesisAnalysis, ExtractionError> {
        if text.trim().is_empty() {
            return Ok(HypothesisAnalysis::absent());
        }
        const T: &str = "hypothesis_structure";
        let template = self.prompts.get(T)?;
        let bindings = BTreeMap::from([
            ("research_question".to_string(), self.task.research_question.clone()),
            ("hypothesis".to_string(), text.trim().to_string()),
            ("variables".to_string(), Self::list_names(self.lexicon.variables())),
        ]);
        let verdict = self.gateway.complete(template, &bindings, subject)?;
        let fields = verdict.fields().ok_or_else(|| Self::malformed(T, "expected fields"))?;
        let exists = parse_bool(fields, "exists").ok_or_else(|| Self::malformed(T, "missing exists"))?;
        if !exists {
            return Ok(HypothesisAnalysis::absent());
        }
        let dependent = fields
            .get("dependent_variable")
            .map(|v| normalize_term(v))
            .filter(|v| !matches!(v.as_str(), "" | "none" | "-" | "n/a"));
        let independent: BTreeSet<CanonicalVariable> = fields
            .get("independent_variables")
            .map(|v| split_list(v))
            .unwrap_or_default()
            .iter()
            .map(|t| self.lexicon.canonicalize(t))
            .collect::<Result<_, _>>()?;
        let mut conjoined = parse_bool(fields, "conjoined").unwrap_or(false);
        if conjoined && independent.len() < 2 {
            log::info!("{subject:?}: conjoined flag dropped, fewer than two independent variables");
            conjoined = false;
        }
        Ok(HypothesisAnalysis {
            exists: true,
            dependent_variable: dependent,
            independent_variables: independent,
            conjoined,
            observation_focused: parse_bool(fields, "observation_focused").unwrap_or(false),
        })
    }

    fn segment_heuristically(&self, implementation: &str) -> Vec<Trial> {
        let mut trials: Vec<Trial> = Vec::new();
        for (i, (_, segment)) in numbered_segments(implementation).into_iter().enumerate() {
            let mut variables = self.lexicon.scan_variables(&segment);
            let mut instruments = self.lexicon.scan_instruments(&segment);
            if segment.to_lowercase().contains("the same") {
                if let Some(prev) = trials.last() {
                    variables.extend(prev.variables.iter().cloned());
                    instruments.extend(prev.instruments.iter().cloned());
                }
            }
            trials.push(Trial {
                index: i + 1,
                variables,
                instruments,
                altered: alteration_cue().is_match(&segment),
                observed: false,
            });
        }
        trials
    }

    fn segment_with_model(&self, implementation: &str, subject: Option<&str>) -> Result<Vec<Trial>, ExtractionError> {
        const T: &str = "trial_segmentation";
        let template = self.prompts.get(T)?;
        let hints: Vec<String> = numbered_segments(implementation)
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        let hints = if hints.len() > 1 { hints.join(", ") } else { "none".to_string() };
        let bindings = BTreeMap::from([
            ("research_question".to_string(), self.task.research_question.clone()),
            ("implementation".to_string(), implementation.trim().to_string()),
            ("numbering_hints".to_string(), hints),
            ("variables".to_string(), Self::list_names(self.lexicon.variables())),
            ("instruments".to_string(), Self::list_names(self.lexicon.instruments())),
        ]);
        let verdict = self.gateway.complete(template, &bindings, subject)?;
        let fields = verdict.fields().ok_or_else(|| Self::malformed(T, "expected fields"))?;

        let mut by_index: BTreeMap<usize, Trial> = BTreeMap::new();
        for (key, value) in fields {
            let Some(rest) = key.strip_prefix("trial.") else { continue };
            let Some((idx, attr)) = rest.split_once('.') else {
                return Err(Self::malformed(T, format!("bad key {key:?}")));
            };
            let idx: usize = idx.parse().map_err(|_| Self::malformed(T, format!("bad trial index in {key:?}")))?;
            let trial = by_index.entry(idx).or_insert_with(|| Trial::new(idx, &[]));
            match attr {
                "variables" => {
                    for term in split_list(value) {
                        trial.variables.insert(self.lexicon.canonicalize(&term)?);
                    }
                }
                "instruments" => {
                    for term in split_list(value) {
                        trial.instruments.insert(self.lexicon.canonicalize_instrument(&term)?);
                    }
                }
                "altered" => {
                    trial.altered = parse_bool(fields, key)
                        .ok_or_else(|| Self::malformed(T, format!("{key:?} is not yes/no")))?;
                }
                other => log::debug!("{T}: ignoring attribute {other:?}"),
            }
        }
        if let Some(count) = fields.get("trial_count").and_then(|c| c.trim().parse::<usize>().ok()) {
            if count != by_index.len() {
                log::warn!("{subject:?}: trial_count {count} but {} trials listed", by_index.len());
            }
        }
        // Re-number 1..n in the model's order.
        Ok(by_index
            .into_values()
            .enumerate()
            .map(|(i, mut t)| {
                t.index = i + 1;
                t
            })
            .collect())
    }

    /// Links observation sentences to trials: explicit index mentions first,
    /// then variable overlap for the rest. Ambiguous sentences stay unmatched.
    fn link_observations(
        &self,
        trials: &mut [Trial],
        observation: &str,
        subject: Option<&str>,
    ) -> Result<(), ExtractionError> {
        if trials.is_empty() || observation.trim().is_empty() {
            return Ok(());
        }
        let n = trials.len();
        let mut pending = Vec::new();
        for sentence in split_sentences(observation) {
            let hits = explicit_trial_mentions(&sentence, n);
            if hits.is_empty() {
                pending.push(sentence);
            } else {
                for i in hits {
                    trials[i - 1].observed = true;
                }
            }
        }
        if pending.is_empty() {
            return Ok(());
        }
        let links = match self.segmentation {
            Segmentation::Numbering => pending
                .iter()
                .map(|s| self.overlap_link(trials, s))
                .collect::<Vec<_>>(),
            Segmentation::Prompting => self.model_links(trials, &pending, subject)?,
        };
        for idx in links.into_iter().flatten() {
            trials[idx - 1].observed = true;
        }
        Ok(())
    }

    fn overlap_link(&self, trials: &[Trial], sentence: &str) -> Option<usize> {
        let mentioned = self.lexicon.scan_variables(sentence);
        let scores: Vec<usize> = trials
            .iter()
            .map(|t| t.variables.intersection(&mentioned).count())
            .collect();
        let best = *scores.iter().max()?;
        let mut winners = scores.iter().enumerate().filter(|(_, &s)| s == best && s > 0);
        let first = winners.next()?;
        if winners.next().is_some() {
            return None;
        }
        Some(first.0 + 1)
    }

    fn model_links(
        &self,
        trials: &[Trial],
        sentences: &[String],
        subject: Option<&str>,
    ) -> Result<Vec<Option<usize>>, ExtractionError> {
        const T: &str = "observation_links";
        let template = self.prompts.get(T)?;
        let trial_lines = trials
            .iter()
            .map(|t| {
                let vars = if t.variables.is_empty() {
                    "nothing listed".to_string()
                } else {
                    Self::list_names(t.variables.iter().cloned())
                };
                format!("Trial {}: {vars}", t.index)
            })
            .collect::<Vec<_>>()
            .join("\n");
        let sentence_lines = sentences
            .iter()
            .enumerate()
            .map(|(i, s)| format!("Sentence {}: {s}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        let bindings = BTreeMap::from([
            ("trials".to_string(), trial_lines),
            ("sentences".to_string(), sentence_lines),
        ]);
        let verdict = self.gateway.complete(template, &bindings, subject)?;
        let fields = verdict.fields().ok_or_else(|| Self::malformed(T, "expected fields"))?;
        Ok((1..=sentences.len())
            .map(|i| {
                fields
                    .get(&format!("sentence.{i}"))
                    .and_then(|v| v.trim().parse::<usize>().ok())
                    .filter(|&t| t >= 1 && t <= trials.len())
            })
            .collect())
    }

    /// Trials with canonical variable sets and observed flags. An empty
    /// implementation yields no trials and no model call.
    pub fn extract_trials(
        &self,
        implementation: &str,
        observation: &str,
        subject: Option<&str>,
    ) -> Result<TrialExtraction, ExtractionError> {
        if implementation.trim().is_empty() {
            return Ok(TrialExtraction { trials: Vec::new(), implementation_documented: false });
        }
        let mut trials = match self.segmentation {
            Segmentation::Numbering => self.segment_heuristically(implementation),
            Segmentation::Prompting => self.segment_with_model(implementation, subject)?,
        };
        self.link_observations(&mut trials, observation, subject)?;
        Ok(TrialExtraction { trials, implementation_documented: true })
    }

    pub fn classify_result(
        &self,
        result: &str,
        hypothesis: &str,
        observation: &str,
        subject: Option<&str>,
    ) -> Result<ResultKind, ExtractionError> {
        if result.trim().is_empty() {
            return Ok(ResultKind::Absent);
        }
        if self.segmentation == Segmentation::Numbering {
            return Ok(ResultKind::Other);
        }
        const T: &str = "result_kind";
        let template = self.prompts.get(T)?;
        let bindings = BTreeMap::from([
            ("result".to_string(), result.trim().to_string()),
            ("hypothesis".to_string(), hypothesis.trim().to_string()),
            ("observation".to_string(), observation.trim().to_string()),
        ]);
        let verdict = self.gateway.complete(template, &bindings, subject)?;
        let kind = verdict
            .fields()
            .and_then(|f| f.get("kind"))
            .ok_or_else(|| Self::malformed(T, "missing kind"))?;
        Ok(kind.parse().unwrap_or(ResultKind::Other))
    }

    /// Full feature extraction for one protocol. The hypothesis and trial
    /// calls run concurrently.
    pub fn extract(&self, protocol: &Protocol) -> Result<ExperimentFeatures, ExtractionError> {
        let subject = Some(protocol.id.as_str());
        let hyp_text = protocol.section(SectionKind::Hypothesis);
        let implementation = protocol.section(SectionKind::Implementation);
        let observation = protocol.section(SectionKind::Observation);
        let result = protocol.section(SectionKind::Result);

        let (hypothesis, trials) = std::thread::scope(|s| {
            let h = s.spawn(|| self.analyze_hypothesis(hyp_text, subject));
            let t = self.extract_trials(implementation, observation, subject);
            (h.join().expect("hypothesis worker panicked"), t)
        });
        let hypothesis = hypothesis?;
        let trials = trials?;
        let result_kind = self.classify_result(result, hyp_text, observation, subject)?;

        let features = ExperimentFeatures {
            protocol_id: protocol.id.clone(),
            material_itemized: !protocol.section(SectionKind::Material).trim().is_empty(),
            implementation_documented: trials.implementation_documented,
            observation_documented: !observation.trim().is_empty(),
            trials_from_observation: false,
            result_kind,
            hypothesis,
            trials: trials.trials,
        };
        debug_assert!(features.problems().is_empty(), "{:?}", features.problems());
        Ok(features)
    }
}
