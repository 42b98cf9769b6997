//! Domain types shared across the pipeline: protocols, the error taxonomy,
//! ratings and task definitions.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::CanonicalVariable;

/// The six sections of a written experimentation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Hypothesis,
    Material,
    Sketch,
    Implementation,
    Observation,
    Result,
}

impl SectionKind {
    pub const ALL: [SectionKind; 6] = [
        SectionKind::Hypothesis,
        SectionKind::Material,
        SectionKind::Sketch,
        SectionKind::Implementation,
        SectionKind::Observation,
        SectionKind::Result,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SectionKind::Hypothesis => "hypothesis",
            SectionKind::Material => "material",
            SectionKind::Sketch => "sketch",
            SectionKind::Implementation => "implementation",
            SectionKind::Observation => "observation",
            SectionKind::Result => "result",
        }
    }
}

impl FromStr for SectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SectionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown section {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Topic {
    Cones,
    Yeast,
    Other(String),
}

impl Topic {
    /// Default task binding for the topic.
    pub fn task_id(&self) -> &str {
        match self {
            Topic::Cones => "cones",
            Topic::Yeast => "yeast",
            Topic::Other(name) => name,
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topic::Cones => f.write_str("cones"),
            Topic::Yeast => f.write_str("yeast"),
            Topic::Other(name) => write!(f, "other:{name}"),
        }
    }
}

impl FromStr for Topic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "cones" => Ok(Topic::Cones),
            "yeast" => Ok(Topic::Yeast),
            other => match other.strip_prefix("other:") {
                Some(name) if !name.trim().is_empty() => Ok(Topic::Other(name.trim().to_string())),
                _ => Err(format!("unknown topic {other:?} (use cones, yeast or other:<name>)")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Gender {
    Female,
    Male,
    #[default]
    Unspecified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Performance {
    Poor,
    Average,
    Good,
    #[default]
    Unspecified,
}

macro_rules! string_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($name => Ok(Self::$variant),)+
                    other => Err(format!(
                        concat!("invalid ", stringify!($ty), " {:?}"),
                        other
                    )),
                }
            }
        }
    };
}

string_enum!(Gender { Female => "female", Male => "male", Unspecified => "unspecified" });
string_enum!(Performance {
    Poor => "poor",
    Average => "average",
    Good => "good",
    Unspecified => "unspecified",
});

/// One student's write-up. All six sections are always present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Protocol {
    pub id: String,
    pub topic: Topic,
    pub grade: u8,
    pub gender: Gender,
    pub performance: Performance,
    sections: BTreeMap<SectionKind, String>,
}

impl Protocol {
    pub fn section(&self, kind: SectionKind) -> &str {
        self.sections.get(&kind).map(String::as_str).unwrap_or("")
    }

    pub fn sections(&self) -> impl Iterator<Item = (SectionKind, &str)> {
        self.sections.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn to_raw(&self) -> RawProtocol {
        RawProtocol {
            id: Some(self.id.clone()),
            topic: Some(self.topic.to_string()),
            grade: Some(i64::from(self.grade)),
            gender: Some(self.gender.to_string()),
            performance: Some(self.performance.to_string()),
            sections: self
                .sections
                .iter()
                .map(|(k, v)| (k.as_str().to_string(), v.clone()))
                .collect(),
        }
    }
}

/// A protocol record as decoded from a protocol file, before validation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawProtocol {
    pub id: Option<String>,
    pub topic: Option<String>,
    pub grade: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub performance: Option<String>,
    #[serde(default)]
    pub sections: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("duplicate protocol id {0:?}")]
    DuplicateId(String),
    #[error("grade out of range: {0} (allowed 5-8)")]
    GradeOutOfRange(i64),
    #[error("{0}")]
    InvalidTopic(String),
    #[error("{0}")]
    InvalidMetadata(String),
    #[error("unknown section {0:?}")]
    UnknownSection(String),
}

/// A validated protocol plus non-fatal findings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Validated {
    pub protocol: Protocol,
    pub warnings: Vec<String>,
}

/// Validates a single record. Duplicate-id checking needs a corpus; see
/// [`ProtocolValidator`].
pub fn validate_protocol(raw: &RawProtocol) -> Result<Validated, Vec<ValidationError>> {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    let id = match raw.id.as_deref().map(str::trim) {
        Some(id) if !id.is_empty() => Some(id.to_string()),
        _ => {
            errors.push(ValidationError::MissingField("id"));
            None
        }
    };
    let topic = match raw.topic.as_deref() {
        Some(t) => t
            .parse::<Topic>()
            .map_err(|e| errors.push(ValidationError::InvalidTopic(e)))
            .ok(),
        None => {
            errors.push(ValidationError::MissingField("topic"));
            None
        }
    };
    let grade = match raw.grade {
        Some(g @ 5..=8) => Some(g as u8),
        Some(g) => {
            errors.push(ValidationError::GradeOutOfRange(g));
            None
        }
        None => {
            errors.push(ValidationError::MissingField("grade"));
            None
        }
    };
    let gender = raw
        .gender
        .as_deref()
        .map(str::parse::<Gender>)
        .transpose()
        .map_err(|e| errors.push(ValidationError::InvalidMetadata(e)))
        .ok()
        .flatten()
        .unwrap_or_default();
    let performance = raw
        .performance
        .as_deref()
        .map(str::parse::<Performance>)
        .transpose()
        .map_err(|e| errors.push(ValidationError::InvalidMetadata(e)))
        .ok()
        .flatten()
        .unwrap_or_default();

    let mut sections = BTreeMap::new();
    for (key, text) in &raw.sections {
        match key.parse::<SectionKind>() {
            Ok(kind) => {
                sections.insert(kind, text.clone());
            }
            Err(_) => errors.push(ValidationError::UnknownSection(key.clone())),
        }
    }
    for kind in SectionKind::ALL {
        if !sections.contains_key(&kind) {
            warnings.push(format!("section {:?} missing; treated as empty", kind.as_str()));
            sections.insert(kind, String::new());
        }
    }

    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(Validated {
        protocol: Protocol {
            id: id.expect("checked"),
            topic: topic.expect("checked"),
            grade: grade.expect("checked"),
            gender,
            performance,
            sections,
        },
        warnings,
    })
}

/// Validates records in sequence, rejecting ids already seen.
#[derive(Debug, Default)]
pub struct ProtocolValidator {
    seen: HashSet<String>,
}

impl ProtocolValidator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn validate(&mut self, raw: &RawProtocol) -> Result<Validated, Vec<ValidationError>> {
        let validated = validate_protocol(raw)?;
        if !self.seen.insert(validated.protocol.id.clone()) {
            return Err(vec![ValidationError::DuplicateId(validated.protocol.id)]);
        }
        Ok(validated)
    }
}

/// Phase of the inquiry process an error belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Hypothesis,
    DesignConduct,
    ObserveAnalyze,
    ResultConclusion,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Hypothesis => "hypothesis",
            Phase::DesignConduct => "design-conduct",
            Phase::ObserveAnalyze => "observe-analyze",
            Phase::ResultConclusion => "result-conclusion",
        }
    }
}

/// The closed taxonomy of detectable student errors. A verdict of
/// `ErrorPresent` on any label always means the error occurred, even for
/// labels whose names read as positive properties (`is_test`, `hyp_exists`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLabel {
    HypVarObs,
    HypVarComb,
    HypNoDep,
    HypExists,
    MaterialMiss,
    IsTest,
    IsControl,
    MissingComponents,
    NoVariation,
    AlterExp,
    OneTrial,
    NoImpl,
    FewObs,
    BestResult,
    ResultObsHypSame,
    IfNoResult,
}

impl ErrorLabel {
    pub const ALL: [ErrorLabel; 16] = [
        ErrorLabel::HypVarObs,
        ErrorLabel::HypVarComb,
        ErrorLabel::HypNoDep,
        ErrorLabel::HypExists,
        ErrorLabel::MaterialMiss,
        ErrorLabel::IsTest,
        ErrorLabel::IsControl,
        ErrorLabel::MissingComponents,
        ErrorLabel::NoVariation,
        ErrorLabel::AlterExp,
        ErrorLabel::OneTrial,
        ErrorLabel::NoImpl,
        ErrorLabel::FewObs,
        ErrorLabel::BestResult,
        ErrorLabel::ResultObsHypSame,
        ErrorLabel::IfNoResult,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorLabel::HypVarObs => "hyp_var_obs",
            ErrorLabel::HypVarComb => "hyp_var_comb",
            ErrorLabel::HypNoDep => "hyp_no_dep",
            ErrorLabel::HypExists => "hyp_exists",
            ErrorLabel::MaterialMiss => "material_miss",
            ErrorLabel::IsTest => "is_test",
            ErrorLabel::IsControl => "is_control",
            ErrorLabel::MissingComponents => "missing_components",
            ErrorLabel::NoVariation => "no_variation",
            ErrorLabel::AlterExp => "alter_exp",
            ErrorLabel::OneTrial => "one_trial",
            ErrorLabel::NoImpl => "no_impl",
            ErrorLabel::FewObs => "few_obs",
            ErrorLabel::BestResult => "best_result",
            ErrorLabel::ResultObsHypSame => "result_obs_hyp_same",
            ErrorLabel::IfNoResult => "if_no_result",
        }
    }

    pub fn phase(self) -> Phase {
        use ErrorLabel::*;
        match self {
            HypVarObs | HypVarComb | HypNoDep | HypExists => Phase::Hypothesis,
            MaterialMiss | IsTest | IsControl | MissingComponents | NoVariation | AlterExp
            | OneTrial | NoImpl => Phase::DesignConduct,
            FewObs => Phase::ObserveAnalyze,
            BestResult | ResultObsHypSame | IfNoResult => Phase::ResultConclusion,
        }
    }

    /// Short human-readable definition of the error.
    pub fn description(self) -> &'static str {
        use ErrorLabel::*;
        match self {
            HypVarObs => "Hypothesis is not focused on the dependent variable, but on an expected observation",
            HypVarComb => "Hypothesis consists of a combination of independent variables",
            HypNoDep => "Hypothesis has no dependent variable",
            HypExists => "No hypothesis is proposed",
            MaterialMiss => "Material is missing",
            IsTest => "Missing test trial",
            IsControl => "Missing control trial",
            MissingComponents => "Student forgets a necessary component",
            NoVariation => "Trials with the same content (no variation)",
            AlterExp => "Experimental trials are altered",
            OneTrial => "Only one trial is conducted",
            NoImpl => "Documentation of the implementation is missing",
            FewObs => "Observation only in one or a few trials",
            BestResult => "Result focuses on which is the best trial",
            ResultObsHypSame => "Observation or hypothesis given as the result",
            IfNoResult => "No result",
        }
    }
}

impl fmt::Display for ErrorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s.trim())
            .ok_or_else(|| format!("unknown error label {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ErrorPresent,
    ErrorAbsent,
    Indeterminate,
}

impl Verdict {
    pub fn from_bool(present: bool) -> Self {
        if present {
            Verdict::ErrorPresent
        } else {
            Verdict::ErrorAbsent
        }
    }

    /// Binary projection; `None` for indeterminate.
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Verdict::ErrorPresent => Some(true),
            Verdict::ErrorAbsent => Some(false),
            Verdict::Indeterminate => None,
        }
    }

    /// Rating-file cell encoding.
    pub fn cell(self) -> &'static str {
        match self {
            Verdict::ErrorPresent => "1",
            Verdict::ErrorAbsent => "0",
            Verdict::Indeterminate => "NA",
        }
    }

    pub fn from_cell(cell: &str) -> Option<Self> {
        match cell.trim() {
            "1" => Some(Verdict::ErrorPresent),
            "0" => Some(Verdict::ErrorAbsent),
            "NA" => Some(Verdict::Indeterminate),
            _ => None,
        }
    }
}

/// A complete verdict map covering all sixteen labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdicts([Verdict; 16]);

impl Verdicts {
    pub fn uniform(v: Verdict) -> Self {
        Verdicts([v; 16])
    }

    pub fn get(&self, label: ErrorLabel) -> Verdict {
        self.0[label as usize]
    }

    pub fn set(&mut self, label: ErrorLabel, v: Verdict) {
        self.0[label as usize] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ErrorLabel, Verdict)> + '_ {
        ErrorLabel::ALL.into_iter().map(|l| (l, self.get(l)))
    }
}

impl Default for Verdicts {
    fn default() -> Self {
        Verdicts::uniform(Verdict::Indeterminate)
    }
}

impl From<&BTreeMap<ErrorLabel, Verdict>> for Verdicts {
    fn from(map: &BTreeMap<ErrorLabel, Verdict>) -> Self {
        let mut v = Verdicts::default();
        for (l, verdict) in map {
            v.set(*l, *verdict);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rating {
    pub protocol_id: String,
    pub rater_id: String,
    pub verdicts: Verdicts,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatrixError {
    #[error("rating matrix needs at least one subject and one rater")]
    Empty,
    #[error("missing rating for subject {subject:?} by rater {rater:?}")]
    MissingCell { subject: String, rater: String },
    #[error("duplicate rating for subject {subject:?} by rater {rater:?}")]
    DuplicateCell { subject: String, rater: String },
    #[error("unknown rater {0:?}")]
    UnknownRater(String),
}

/// Subjects × raters × sixteen labels. Always rectangular.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingMatrix {
    subjects: Vec<String>,
    raters: Vec<String>,
    cells: Vec<Vec<Verdicts>>,
}

/// Per-label binary view with indeterminate subjects removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryProjection {
    /// `rows[i][r]` is rater `r`'s judgement on the i-th retained subject.
    pub rows: Vec<Vec<bool>>,
    /// Subjects dropped because at least one rater was indeterminate.
    pub dropped: usize,
}

impl BinaryProjection {
    pub fn rater_column(&self, r: usize) -> Vec<bool> {
        self.rows.iter().map(|row| row[r]).collect()
    }
}

impl RatingMatrix {
    /// Builds a matrix from ratings. Subjects and raters keep first-seen order.
    pub fn from_ratings(ratings: &[Rating]) -> Result<Self, MatrixError> {
        let mut subjects: Vec<String> = Vec::new();
        let mut raters: Vec<String> = Vec::new();
        for r in ratings {
            if !subjects.contains(&r.protocol_id) {
                subjects.push(r.protocol_id.clone());
            }
            if !raters.contains(&r.rater_id) {
                raters.push(r.rater_id.clone());
            }
        }
        if subjects.is_empty() {
            return Err(MatrixError::Empty);
        }
        let mut cells: Vec<Vec<Option<Verdicts>>> = vec![vec![None; raters.len()]; subjects.len()];
        for r in ratings {
            let s = subjects.iter().position(|x| *x == r.protocol_id).expect("indexed");
            let k = raters.iter().position(|x| *x == r.rater_id).expect("indexed");
            if cells[s][k].is_some() {
                return Err(MatrixError::DuplicateCell {
                    subject: r.protocol_id.clone(),
                    rater: r.rater_id.clone(),
                });
            }
            cells[s][k] = Some(r.verdicts.clone());
        }
        let cells = cells
            .into_iter()
            .enumerate()
            .map(|(s, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(k, c)| {
                        c.ok_or_else(|| MatrixError::MissingCell {
                            subject: subjects[s].clone(),
                            rater: raters[k].clone(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RatingMatrix { subjects, raters, cells })
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn raters(&self) -> &[String] {
        &self.raters
    }

    pub fn rater_index(&self, rater: &str) -> Result<usize, MatrixError> {
        self.raters
            .iter()
            .position(|r| r == rater)
            .ok_or_else(|| MatrixError::UnknownRater(rater.to_string()))
    }

    pub fn verdict(&self, subject: usize, rater: usize, label: ErrorLabel) -> Verdict {
        self.cells[subject][rater].get(label)
    }

    /// Restricts the matrix to the given subjects (in the given order).
    /// Unknown ids are ignored.
    pub fn restrict(&self, subjects: &[String]) -> Option<RatingMatrix> {
        let picked: Vec<usize> = subjects
            .iter()
            .filter_map(|s| self.subjects.iter().position(|x| x == s))
            .collect();
        if picked.is_empty() {
            return None;
        }
        Some(RatingMatrix {
            subjects: picked.iter().map(|&i| self.subjects[i].clone()).collect(),
            raters: self.raters.clone(),
            cells: picked.iter().map(|&i| self.cells[i].clone()).collect(),
        })
    }

    /// Binary projection of one label over the given raters. A subject is
    /// dropped when any selected rater is indeterminate on it.
    pub fn project(&self, label: ErrorLabel, raters: &[usize]) -> BinaryProjection {
        let mut rows = Vec::with_capacity(self.subjects.len());
        let mut dropped = 0;
        for s in 0..self.subjects.len() {
            let row: Option<Vec<bool>> = raters
                .iter()
                .map(|&r| self.verdict(s, r, label).as_bool())
                .collect();
            match row {
                Some(row) => rows.push(row),
                None => dropped += 1,
            }
        }
        BinaryProjection { rows, dropped }
    }

    pub fn project_all(&self, label: ErrorLabel) -> BinaryProjection {
        let all: Vec<usize> = (0..self.raters.len()).collect();
        self.project(label, &all)
    }
}

/// An experiment task: research question, materials and the variable
/// lexicon used to canonicalize trial descriptions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub research_question: String,
    #[serde(default)]
    pub available_materials: Vec<String>,
    #[serde(default)]
    pub required_components: Vec<CanonicalVariable>,
    pub lexicon_id: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(sections: &[(&str, &str)]) -> RawProtocol {
        RawProtocol {
            id: Some("Y-07".into()),
            topic: Some("yeast".into()),
            grade: Some(7),
            gender: Some("female".into()),
            performance: Some("average".into()),
            sections: sections.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    const FULL: [(&str, &str); 6] = [
        ("hypothesis", "Yeast needs sugar."),
        ("material", "yeast, sugar, test tube"),
        ("sketch", ""),
        ("implementation", "1. Yeast with sugar."),
        ("observation", "Bubbles."),
        ("result", "Yeast needs sugar."),
    ];

    #[test]
    fn complete_record_validates() {
        let v = validate_protocol(&raw(&FULL)).unwrap();
        assert!(v.warnings.is_empty());
        assert_eq!(v.protocol.topic, Topic::Yeast);
        assert_eq!(v.protocol.grade, 7);
        assert_eq!(v.protocol.section(SectionKind::Material), "yeast, sugar, test tube");
    }

    #[test]
    fn missing_section_becomes_empty_with_warning() {
        let sections: Vec<_> = FULL.iter().copied().filter(|(k, _)| *k != "material").collect();
        let v = validate_protocol(&raw(&sections)).unwrap();
        assert_eq!(v.protocol.section(SectionKind::Material), "");
        assert_eq!(v.warnings.len(), 1);
        assert!(v.warnings[0].contains("material"));
        assert_eq!(v.protocol.sections().count(), 6);
    }

    #[test]
    fn grade_out_of_range() {
        let mut r = raw(&FULL);
        r.grade = Some(11);
        let errs = validate_protocol(&r).unwrap_err();
        assert_eq!(errs, vec![ValidationError::GradeOutOfRange(11)]);
        assert!(errs[0].to_string().contains("grade out of range"));
    }

    #[test]
    fn topics() {
        let mut r = raw(&FULL);
        r.topic = Some("pendulum".into());
        assert!(matches!(
            validate_protocol(&r).unwrap_err()[0],
            ValidationError::InvalidTopic(_)
        ));
        r.topic = Some("other:pendulum".into());
        assert_eq!(
            validate_protocol(&r).unwrap().protocol.topic,
            Topic::Other("pendulum".into())
        );
    }

    #[test]
    fn bad_metadata_and_unknown_section_collect_errors() {
        let mut r = raw(&FULL);
        r.gender = Some("x".into());
        r.sections.insert("appendix".into(), String::new());
        let errs = validate_protocol(&r).unwrap_err();
        assert_eq!(errs.len(), 2);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut v = ProtocolValidator::new();
        v.validate(&raw(&FULL)).unwrap();
        assert_eq!(
            v.validate(&raw(&FULL)).unwrap_err(),
            vec![ValidationError::DuplicateId("Y-07".into())]
        );
    }

    #[test]
    fn taxonomy_shape() {
        assert_eq!(ErrorLabel::ALL.len(), 16);
        let count = |p| ErrorLabel::ALL.iter().filter(|l| l.phase() == p).count();
        assert_eq!(count(Phase::Hypothesis), 4);
        assert_eq!(count(Phase::DesignConduct), 8);
        assert_eq!(count(Phase::ObserveAnalyze), 1);
        assert_eq!(count(Phase::ResultConclusion), 3);
        for (i, l) in ErrorLabel::ALL.iter().enumerate() {
            assert_eq!(*l as usize, i);
            assert_eq!(l.as_str().parse::<ErrorLabel>().unwrap(), *l);
        }
    }

    #[test]
    fn matrix_requires_rectangular_input() {
        let rating = |p: &str, r: &str| Rating {
            protocol_id: p.into(),
            rater_id: r.into(),
            verdicts: Verdicts::uniform(Verdict::ErrorAbsent),
        };
        let err = RatingMatrix::from_ratings(&[rating("a", "x"), rating("b", "y")]).unwrap_err();
        assert!(matches!(err, MatrixError::MissingCell { .. }));
        let m = RatingMatrix::from_ratings(&[rating("a", "x"), rating("a", "y")]).unwrap();
        assert_eq!(m.raters(), ["x", "y"]);
    }

    #[test]
    fn projection_drops_indeterminate_pairwise() {
        let mut na = Verdicts::uniform(Verdict::ErrorPresent);
        na.set(ErrorLabel::IsTest, Verdict::Indeterminate);
        let ratings = vec![
            Rating { protocol_id: "a".into(), rater_id: "x".into(), verdicts: na },
            Rating {
                protocol_id: "a".into(),
                rater_id: "y".into(),
                verdicts: Verdicts::uniform(Verdict::ErrorPresent),
            },
            Rating {
                protocol_id: "b".into(),
                rater_id: "x".into(),
                verdicts: Verdicts::uniform(Verdict::ErrorAbsent),
            },
            Rating {
                protocol_id: "b".into(),
                rater_id: "y".into(),
                verdicts: Verdicts::uniform(Verdict::ErrorPresent),
            },
        ];
        let m = RatingMatrix::from_ratings(&ratings).unwrap();
        let p = m.project_all(ErrorLabel::IsTest);
        assert_eq!(p.dropped, 1);
        assert_eq!(p.rows, vec![vec![false, true]]);
        assert_eq!(m.project_all(ErrorLabel::OneTrial).dropped, 0);
    }

    fn arb_raw() -> impl Strategy<Value = RawProtocol> {
        let text = "[ -~\n]{0,40}";
        (
            "[A-Z]-[0-9]{2}",
            prop_oneof![Just("cones".to_string()), Just("yeast".to_string()), "other:[a-z]{1,8}"],
            5i64..=8,
            prop::sample::select(vec!["female", "male", "unspecified"]),
            prop::sample::select(vec!["poor", "average", "good", "unspecified"]),
            prop::collection::btree_map(
                prop::sample::select(SectionKind::ALL.to_vec()),
                text,
                0..6,
            ),
        )
            .prop_map(|(id, topic, grade, gender, perf, sections)| RawProtocol {
                id: Some(id),
                topic: Some(topic),
                grade: Some(grade),
                gender: Some(gender.to_string()),
                performance: Some(perf.to_string()),
                sections: sections
                    .into_iter()
                    .map(|(k, v)| (k.as_str().to_string(), v))
                    .collect(),
            })
    }

    proptest! {
        #[test]
        fn serialize_revalidate_round_trip(raw in arb_raw()) {
            let first = validate_protocol(&raw).unwrap().protocol;
            let text = toml::to_string(&first.to_raw()).unwrap();
            let decoded: RawProtocol = toml::from_str(&text).unwrap();
            let second = validate_protocol(&decoded).unwrap();
            prop_assert!(second.warnings.is_empty());
            prop_assert_eq!(second.protocol, first);
        }
    }
}
