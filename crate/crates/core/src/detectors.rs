//! Error detectors. Derived detectors are pure reductions over extracted
//! features; direct detectors ask the model one yes/no question each.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::extraction::{CanonicalVariable, ExperimentFeatures, Trial};
use crate::llm::{Gateway, PromptSet};
use crate::model::{ErrorLabel, Protocol, Rating, SectionKind, TaskSpec, Verdict, Verdicts};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// is_test needs a test trial for every hypothesis variable.
    pub strict_is_test: bool,
    /// missing_components fires when a required component is absent from any
    /// trial rather than from all of them.
    pub strict_missing_components: bool,
    /// no_variation fires on any duplicated trial signature.
    pub no_variation_any_duplicate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Derived,
    Direct,
}

impl DetectorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorMode::Derived => "derived",
            DetectorMode::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorSpec {
    pub label: ErrorLabel,
    pub mode: DetectorMode,
    pub rule: &'static str,
    /// Prompt template for model-backed decisions, if any.
    pub template: Option<&'static str>,
    pub knobs: &'static [&'static str],
}

const REGISTRY: [DetectorSpec; 16] = [
    DetectorSpec {
        label: ErrorLabel::HypVarObs,
        mode: DetectorMode::Direct,
        rule: "hypothesis states an expected observation (model flag from hypothesis extraction)",
        template: Some("hypothesis_structure"),
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::HypVarComb,
        mode: DetectorMode::Derived,
        rule: "hypothesis asserts two or more independent variables jointly",
        template: None,
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::HypNoDep,
        mode: DetectorMode::Derived,
        rule: "hypothesis exists and names no dependent variable",
        template: None,
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::HypExists,
        mode: DetectorMode::Derived,
        rule: "hypothesis section blank, or the model finds no hypothesis in it",
        template: Some("hypothesis_structure"),
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::MaterialMiss,
        mode: DetectorMode::Derived,
        rule: "material section blank",
        template: None,
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::IsTest,
        mode: DetectorMode::Derived,
        rule: "H nonempty and no trial omits a hypothesis variable; indeterminate if H or T empty",
        template: None,
        knobs: &["strict_is_test"],
    },
    DetectorSpec {
        label: ErrorLabel::IsControl,
        mode: DetectorMode::Derived,
        rule: "H nonempty and no trial contains all hypothesis variables; indeterminate if H or T empty",
        template: None,
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::MissingComponents,
        mode: DetectorMode::Derived,
        rule: "a required task component appears in no trial; indeterminate if T empty",
        template: None,
        knobs: &["strict_missing_components"],
    },
    DetectorSpec {
        label: ErrorLabel::NoVariation,
        mode: DetectorMode::Derived,
        rule: "two or more trials, all with one identical (variables, instruments) signature",
        template: None,
        knobs: &["no_variation_any_duplicate"],
    },
    DetectorSpec {
        label: ErrorLabel::AlterExp,
        mode: DetectorMode::Direct,
        rule: "some trial altered while running (model flag from trial extraction)",
        template: Some("trial_segmentation"),
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::OneTrial,
        mode: DetectorMode::Derived,
        rule: "exactly one trial",
        template: None,
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::NoImpl,
        mode: DetectorMode::Derived,
        rule: "implementation section blank",
        template: None,
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::FewObs,
        mode: DetectorMode::Derived,
        rule: "two or more trials, some but not all observed (or none, with observation text present); indeterminate if T empty",
        template: None,
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::BestResult,
        mode: DetectorMode::Direct,
        rule: "model judges the result a best-trial statement without a variable claim",
        template: Some("best_result"),
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::ResultObsHypSame,
        mode: DetectorMode::Direct,
        rule: "model judges the result a repetition of the hypothesis or the observation",
        template: Some("result_repeats"),
        knobs: &[],
    },
    DetectorSpec {
        label: ErrorLabel::IfNoResult,
        mode: DetectorMode::Derived,
        rule: "result section blank, or the model judges it an explicit no-result statement",
        template: Some("no_result"),
        knobs: &[],
    },
];

/// One spec per label, in taxonomy order.
pub fn registry() -> &'static [DetectorSpec] {
    &REGISTRY
}

pub fn spec_for(label: ErrorLabel) -> &'static DetectorSpec {
    REGISTRY.iter().find(|s| s.label == label).expect("registry covers every label")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub verdict: Verdict,
    /// Rule trace for derived verdicts, model rationale for direct ones.
    pub evidence: String,
}

impl Detection {
    fn new(verdict: Verdict, evidence: impl Into<String>) -> Self {
        Detection { verdict, evidence: evidence.into() }
    }

    fn flag(present: bool, evidence: impl Into<String>) -> Self {
        Self::new(Verdict::from_bool(present), evidence)
    }
}

pub type Detections = BTreeMap<ErrorLabel, Detection>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionReport {
    pub protocol_id: String,
    pub detections: Detections,
    pub elapsed: Duration,
}

impl DetectionReport {
    pub fn verdicts(&self) -> Verdicts {
        let mut v = Verdicts::default();
        for (label, d) in &self.detections {
            v.set(*label, d.verdict);
        }
        v
    }

    pub fn rating(&self, rater_id: &str) -> Rating {
        Rating { protocol_id: self.protocol_id.clone(), rater_id: rater_id.to_string(), verdicts: self.verdicts() }
    }

    pub fn get(&self, label: ErrorLabel) -> &Detection {
        &self.detections[&label]
    }
}

fn names(set: &BTreeSet<CanonicalVariable>) -> String {
    if set.is_empty() {
        return "{}".to_string();
    }
    let items: Vec<String> = set.iter().map(|v| v.to_string()).collect();
    format!("{{{}}}", items.join(", "))
}

fn is_blank(s: &str) -> bool {
    s.trim().is_empty()
}

/// hyp_var_obs, hyp_var_comb, hyp_no_dep, hyp_exists.
pub fn detect_hypothesis_errors(f: &ExperimentFeatures, hypothesis_text: &str) -> Detections {
    let h = &f.hypothesis;
    let mut out = Detections::new();
    let exists_evidence = if is_blank(hypothesis_text) && !h.exists {
        "hypothesis section is blank".to_string()
    } else if h.exists {
        "a hypothesis is stated".to_string()
    } else {
        "no hypothesis found in the hypothesis section".to_string()
    };
    out.insert(ErrorLabel::HypExists, Detection::flag(!h.exists, exists_evidence));
    out.insert(
        ErrorLabel::HypNoDep,
        Detection::flag(
            h.exists && h.dependent_variable.is_none(),
            match (&h.dependent_variable, h.exists) {
                (Some(d), _) => format!("dependent variable: {d}"),
                (None, true) => "hypothesis names no dependent variable".to_string(),
                (None, false) => "no hypothesis".to_string(),
            },
        ),
    );
    out.insert(
        ErrorLabel::HypVarComb,
        Detection::flag(
            h.conjoined,
            if h.conjoined {
                format!("variables {} asserted jointly", names(&h.independent_variables))
            } else {
                "no joint claim".to_string()
            },
        ),
    );
    out.insert(
        ErrorLabel::HypVarObs,
        Detection::flag(
            h.observation_focused,
            if h.observation_focused {
                "hypothesis states an expected observation instead of a dependent variable"
            } else {
                "not observation-focused"
            },
        ),
    );
    out
}

/// Verdict of the is_test rule alone.
pub fn is_test_rule(h: &BTreeSet<CanonicalVariable>, trials: &[Trial], strict: bool) -> Verdict {
    if h.is_empty() || trials.is_empty() {
        return Verdict::Indeterminate;
    }
    let omitted = |v: &CanonicalVariable| trials.iter().any(|t| !t.variables.contains(v));
    let has_test = if strict { h.iter().all(omitted) } else { h.iter().any(omitted) };
    Verdict::from_bool(!has_test)
}

/// Verdict of the is_control rule alone.
pub fn is_control_rule(h: &BTreeSet<CanonicalVariable>, trials: &[Trial]) -> Verdict {
    if h.is_empty() || trials.is_empty() {
        return Verdict::Indeterminate;
    }
    Verdict::from_bool(!trials.iter().any(|t| h.is_subset(&t.variables)))
}

fn signature(t: &Trial) -> (&BTreeSet<CanonicalVariable>, &BTreeSet<CanonicalVariable>) {
    (&t.variables, &t.instruments)
}

/// material_miss, is_test, is_control, missing_components, no_variation,
/// alter_exp, one_trial, no_impl.
pub fn detect_design_errors(f: &ExperimentFeatures, task: &TaskSpec, cfg: &DetectorConfig) -> Detections {
    let h = &f.hypothesis.independent_variables;
    let trials = &f.trials;
    let mut out = Detections::new();

    out.insert(
        ErrorLabel::MaterialMiss,
        Detection::flag(
            !f.material_itemized,
            if f.material_itemized { "material is itemized" } else { "material section is blank" },
        ),
    );
    out.insert(
        ErrorLabel::NoImpl,
        Detection::flag(
            !f.implementation_documented,
            if f.implementation_documented {
                "implementation is described"
            } else {
                "implementation section is blank"
            },
        ),
    );
    out.insert(ErrorLabel::OneTrial, Detection::flag(trials.len() == 1, format!("{} trial(s)", trials.len())));

    let altered: Vec<String> = trials.iter().filter(|t| t.altered).map(|t| t.index.to_string()).collect();
    out.insert(
        ErrorLabel::AlterExp,
        Detection::flag(
            !altered.is_empty(),
            if altered.is_empty() {
                "no trial altered while running".to_string()
            } else {
                format!("trial(s) {} altered while running", altered.join(", "))
            },
        ),
    );

    let verdict = is_test_rule(h, trials, cfg.strict_is_test);
    let evidence = match verdict {
        Verdict::Indeterminate => format!("undefined: H = {}, {} trial(s)", names(h), trials.len()),
        Verdict::ErrorPresent => format!("no trial omits {} variable of H = {}", if cfg.strict_is_test { "each" } else { "any" }, names(h)),
        Verdict::ErrorAbsent => {
            let t = trials.iter().find(|t| h.iter().any(|v| !t.variables.contains(v))).expect("witness");
            format!("trial {} omits part of H = {}", t.index, names(h))
        }
    };
    out.insert(ErrorLabel::IsTest, Detection::new(verdict, evidence));

    let verdict = is_control_rule(h, trials);
    let evidence = match verdict {
        Verdict::Indeterminate => format!("undefined: H = {}, {} trial(s)", names(h), trials.len()),
        Verdict::ErrorPresent => format!("no trial contains all of H = {}", names(h)),
        Verdict::ErrorAbsent => {
            let t = trials.iter().find(|t| h.is_subset(&t.variables)).expect("witness");
            format!("trial {} contains H = {}", t.index, names(h))
        }
    };
    out.insert(ErrorLabel::IsControl, Detection::new(verdict, evidence));

    let missing = if trials.is_empty() {
        Detection::new(Verdict::Indeterminate, "undefined: no trials")
    } else {
        let absent: Vec<&CanonicalVariable> = task
            .required_components
            .iter()
            .filter(|c| {
                if cfg.strict_missing_components {
                    trials.iter().any(|t| !t.variables.contains(c))
                } else {
                    trials.iter().all(|t| !t.variables.contains(c))
                }
            })
            .collect();
        if absent.is_empty() {
            Detection::flag(false, "all required components used")
        } else {
            let list: Vec<String> = absent.iter().map(|c| c.to_string()).collect();
            let scope = if cfg.strict_missing_components { "some trial" } else { "every trial" };
            Detection::flag(true, format!("{} absent from {scope}", list.join(", ")))
        }
    };
    out.insert(ErrorLabel::MissingComponents, missing);

    let no_variation = if trials.len() < 2 {
        Detection::flag(false, format!("{} trial(s)", trials.len()))
    } else if cfg.no_variation_any_duplicate {
        let mut seen = BTreeMap::new();
        let dup = trials.iter().find_map(|t| seen.insert(signature(t), t.index).map(|first| (first, t.index)));
        match dup {
            Some((a, b)) => Detection::flag(true, format!("trials {a} and {b} share one signature")),
            None => Detection::flag(false, "all trial signatures differ"),
        }
    } else {
        let first = signature(&trials[0]);
        if trials.iter().all(|t| signature(t) == first) {
            Detection::flag(true, format!("all {} trials share one signature", trials.len()))
        } else {
            Detection::flag(false, "trial signatures differ")
        }
    };
    out.insert(ErrorLabel::NoVariation, no_variation);
    out
}

/// few_obs.
pub fn detect_observation_errors(f: &ExperimentFeatures) -> Detections {
    let n = f.trials.len();
    let k = f.trials.iter().filter(|t| t.observed).count();
    let d = if n == 0 {
        Detection::new(Verdict::Indeterminate, "undefined: no trials")
    } else if n < 2 {
        Detection::flag(false, "single trial")
    } else if k > 0 && k < n {
        Detection::flag(true, format!("{k} of {n} trials observed"))
    } else if k == n {
        Detection::flag(false, format!("all {n} trials observed"))
    } else if f.observation_documented {
        Detection::flag(true, format!("observation text links to none of {n} trials"))
    } else {
        log::info!("{}: observation section blank, few_obs left absent", f.protocol_id);
        Detection::flag(false, "observation section blank")
    };
    Detections::from([(ErrorLabel::FewObs, d)])
}

/// Section texts the result detectors look at.
#[derive(Debug, Clone, Copy)]
pub struct ResultTexts<'a> {
    pub result: &'a str,
    pub hypothesis: &'a str,
    pub observation: &'a str,
}

/// best_result, result_obs_hyp_same, if_no_result. Each label is decided by
/// its own model call; a failed call leaves only that label indeterminate.
pub fn detect_result_errors(
    texts: ResultTexts<'_>,
    gateway: &Gateway,
    prompts: &PromptSet,
    subject: Option<&str>,
) -> Detections {
    let mut out = Detections::new();
    if is_blank(texts.result) {
        out.insert(ErrorLabel::IfNoResult, Detection::flag(true, "result section is blank"));
        out.insert(ErrorLabel::BestResult, Detection::flag(false, "no result to classify"));
        out.insert(ErrorLabel::ResultObsHypSame, Detection::flag(false, "no result to classify"));
        return out;
    }
    let ask = |template_id: &str, bindings: BTreeMap<String, String>| -> Detection {
        let outcome = prompts
            .get(template_id)
            .and_then(|t| gateway.complete(t, &bindings, subject));
        match outcome {
            Ok(v) => {
                let yes = v.is_yes().unwrap_or(false);
                let rationale = v.rationale.trim();
                let evidence = if rationale.is_empty() {
                    format!("model answered {}", if yes { "YES" } else { "NO" })
                } else {
                    rationale.to_string()
                };
                Detection::flag(yes, evidence)
            }
            Err(e) => Detection::new(Verdict::Indeterminate, format!("model call failed: {e}")),
        }
    };
    let result = ("result".to_string(), texts.result.trim().to_string());
    let (best, same, none) = std::thread::scope(|s| {
        let best = s.spawn(|| ask("best_result", BTreeMap::from([result.clone()])));
        let same = s.spawn(|| {
            ask(
                "result_repeats",
                BTreeMap::from([
                    result.clone(),
                    ("hypothesis".to_string(), texts.hypothesis.trim().to_string()),
                    ("observation".to_string(), texts.observation.trim().to_string()),
                ]),
            )
        });
        let none = ask("no_result", BTreeMap::from([result.clone()]));
        (best.join().expect("detector worker"), same.join().expect("detector worker"), none)
    });
    out.insert(ErrorLabel::BestResult, best);
    out.insert(ErrorLabel::ResultObsHypSame, same);
    out.insert(ErrorLabel::IfNoResult, none);
    out
}

/// Every detector for one protocol, as a complete 16-label report.
pub fn run_all(
    protocol: &Protocol,
    features: &ExperimentFeatures,
    task: &TaskSpec,
    cfg: &DetectorConfig,
    gateway: &Gateway,
    prompts: &PromptSet,
) -> DetectionReport {
    let start = Instant::now();
    let mut detections = Detections::new();
    if features.protocol_id != protocol.id {
        log::warn!("features for {} passed with protocol {}", features.protocol_id, protocol.id);
    }
    detections.extend(detect_hypothesis_errors(features, protocol.section(SectionKind::Hypothesis)));
    detections.extend(detect_design_errors(features, task, cfg));
    detections.extend(detect_observation_errors(features));
    detections.extend(detect_result_errors(
        ResultTexts {
            result: protocol.section(SectionKind::Result),
            hypothesis: protocol.section(SectionKind::Hypothesis),
            observation: protocol.section(SectionKind::Observation),
        },
        gateway,
        prompts,
        Some(protocol.id.as_str()),
    ));
    for label in ErrorLabel::ALL {
        detections
            .entry(label)
            .or_insert_with(|| Detection::new(Verdict::Indeterminate, "detector produced no verdict"));
    }
    DetectionReport { protocol_id: protocol.id.clone(), detections, elapsed: start.elapsed() }
}

/// The report for a protocol whose features could not be produced: every
/// label indeterminate, with the cause as evidence.
pub fn failed_report(protocol_id: &str, cause: &str) -> DetectionReport {
    DetectionReport {
        protocol_id: protocol_id.to_string(),
        detections: ErrorLabel::ALL
            .iter()
            .map(|&l| (l, Detection::new(Verdict::Indeterminate, cause)))
            .collect(),
        elapsed: Duration::ZERO,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{HypothesisAnalysis, ResultKind};
    use crate::llm::MockProvider;
    use crate::model::{validate_protocol, RawProtocol};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn set(vars: &[&str]) -> BTreeSet<CanonicalVariable> {
        vars.iter().map(|v| CanonicalVariable::known(v)).collect()
    }

    fn features(h: &[&str], trials: Vec<Trial>) -> ExperimentFeatures {
        ExperimentFeatures {
            protocol_id: "T-1".into(),
            material_itemized: true,
            implementation_documented: true,
            observation_documented: true,
            trials_from_observation: false,
            result_kind: ResultKind::Other,
            hypothesis: HypothesisAnalysis {
                exists: true,
                dependent_variable: Some("cone-scale movement".into()),
                independent_variables: set(h),
                conjoined: false,
                observation_focused: false,
            },
            trials,
        }
    }

    fn task(id: &str) -> TaskSpec {
        crate::corpus::builtin_task(id).unwrap()
    }

    #[test]
    fn registry_covers_all_labels_once() {
        let labels: BTreeSet<ErrorLabel> = registry().iter().map(|s| s.label).collect();
        assert_eq!(labels.len(), 16);
        assert_eq!(registry().len(), 16);
        for (spec, label) in registry().iter().zip(ErrorLabel::ALL) {
            assert_eq!(spec.label, label);
        }
    }

    #[test]
    fn subset_rule_example() {
        let f = features(&["water"], vec![Trial::new(1, &["water", "cone"]), Trial::new(2, &["cone"])]);
        let d = detect_design_errors(&f, &task("cones"), &DetectorConfig::default());
        assert_eq!(d[&ErrorLabel::IsTest].verdict, Verdict::ErrorAbsent);
        assert_eq!(d[&ErrorLabel::IsControl].verdict, Verdict::ErrorAbsent);
        assert!(d[&ErrorLabel::IsControl].evidence.contains("trial 1"));
    }

    #[test]
    fn empty_trials_are_indeterminate() {
        let mut f = features(&["water"], vec![]);
        f.implementation_documented = false;
        let d = detect_design_errors(&f, &task("cones"), &DetectorConfig::default());
        assert_eq!(d[&ErrorLabel::OneTrial].verdict, Verdict::ErrorAbsent);
        assert_eq!(d[&ErrorLabel::NoImpl].verdict, Verdict::ErrorPresent);
        for l in [ErrorLabel::IsTest, ErrorLabel::IsControl, ErrorLabel::MissingComponents] {
            assert_eq!(d[&l].verdict, Verdict::Indeterminate, "{l}");
        }
        assert_eq!(detect_observation_errors(&f)[&ErrorLabel::FewObs].verdict, Verdict::Indeterminate);
    }

    #[test]
    fn yeast_never_used() {
        let f = features(&["water"], vec![Trial::new(1, &["water", "sugar"]), Trial::new(2, &["sugar"])]);
        let d = detect_design_errors(&f, &task("yeast"), &DetectorConfig::default());
        assert_eq!(d[&ErrorLabel::MissingComponents].verdict, Verdict::ErrorPresent);
        assert!(d[&ErrorLabel::MissingComponents].evidence.contains("yeast"));
    }

    #[test]
    fn strict_missing_components() {
        let f = features(&["water"], vec![Trial::new(1, &["yeast", "water"]), Trial::new(2, &["water"])]);
        let lax = detect_design_errors(&f, &task("yeast"), &DetectorConfig::default());
        let strict = detect_design_errors(
            &f,
            &task("yeast"),
            &DetectorConfig { strict_missing_components: true, ..Default::default() },
        );
        assert_eq!(lax[&ErrorLabel::MissingComponents].verdict, Verdict::ErrorAbsent);
        assert_eq!(strict[&ErrorLabel::MissingComponents].verdict, Verdict::ErrorPresent);
    }

    #[test]
    fn strict_is_test() {
        let h = set(&["water", "warmth"]);
        let trials = vec![Trial::new(1, &["yeast", "water", "warmth"]), Trial::new(2, &["yeast", "water"])];
        assert_eq!(is_test_rule(&h, &trials, false), Verdict::ErrorAbsent);
        assert_eq!(is_test_rule(&h, &trials, true), Verdict::ErrorPresent);
    }

    #[test]
    fn no_variation_modes() {
        let mut a = Trial::new(1, &["yeast", "water", "flour"]);
        a.instruments = set(&["test tube"]);
        let mut b = a.clone();
        b.index = 2;
        let f = features(&["water"], vec![a.clone(), b.clone()]);
        let cfg = DetectorConfig::default();
        assert_eq!(detect_design_errors(&f, &task("yeast"), &cfg)[&ErrorLabel::NoVariation].verdict, Verdict::ErrorPresent);

        let mut c = Trial::new(3, &["yeast", "flour"]);
        c.instruments = set(&["test tube"]);
        let f = features(&["water"], vec![a, b, c]);
        assert_eq!(detect_design_errors(&f, &task("yeast"), &cfg)[&ErrorLabel::NoVariation].verdict, Verdict::ErrorAbsent);
        let dup = DetectorConfig { no_variation_any_duplicate: true, ..Default::default() };
        assert_eq!(detect_design_errors(&f, &task("yeast"), &dup)[&ErrorLabel::NoVariation].verdict, Verdict::ErrorPresent);
    }

    #[test]
    fn few_obs_counting() {
        let mut trials: Vec<Trial> = (1..=4).map(|i| Trial::new(i, &["cone"])).collect();
        trials[0].observed = true;
        let f = features(&["water"], trials.clone());
        assert_eq!(detect_observation_errors(&f)[&ErrorLabel::FewObs].verdict, Verdict::ErrorPresent);

        let all: Vec<Trial> = trials.iter().take(3).cloned().map(|mut t| { t.observed = true; t }).collect();
        assert_eq!(detect_observation_errors(&features(&[], all))[&ErrorLabel::FewObs].verdict, Verdict::ErrorAbsent);

        let mut one = Trial::new(1, &["cone"]);
        one.observed = true;
        assert_eq!(detect_observation_errors(&features(&[], vec![one]))[&ErrorLabel::FewObs].verdict, Verdict::ErrorAbsent);

        let none: Vec<Trial> = (1..=2).map(|i| Trial::new(i, &["cone"])).collect();
        let mut f = features(&[], none);
        assert_eq!(detect_observation_errors(&f)[&ErrorLabel::FewObs].verdict, Verdict::ErrorPresent);
        f.observation_documented = false;
        assert_eq!(detect_observation_errors(&f)[&ErrorLabel::FewObs].verdict, Verdict::ErrorAbsent);
    }

    #[test]
    fn hypothesis_family() {
        let mut f = features(&[], vec![]);
        f.hypothesis = HypothesisAnalysis::absent();
        let d = detect_hypothesis_errors(&f, "");
        assert_eq!(d[&ErrorLabel::HypExists].verdict, Verdict::ErrorPresent);
        for l in [ErrorLabel::HypNoDep, ErrorLabel::HypVarComb, ErrorLabel::HypVarObs] {
            assert_eq!(d[&l].verdict, Verdict::ErrorAbsent);
        }
        f.hypothesis = HypothesisAnalysis {
            exists: true,
            dependent_variable: None,
            independent_variables: set(&["cold", "moisture"]),
            conjoined: true,
            observation_focused: false,
        };
        let d = detect_hypothesis_errors(&f, "I suspect that the cones contract due to the cold and the moisture.");
        assert_eq!(d[&ErrorLabel::HypVarComb].verdict, Verdict::ErrorPresent);
        assert_eq!(d[&ErrorLabel::HypNoDep].verdict, Verdict::ErrorPresent);
        assert_eq!(d[&ErrorLabel::HypExists].verdict, Verdict::ErrorAbsent);
    }

    fn protocol(sections: &[(&str, &str)]) -> Protocol {
        validate_protocol(&RawProtocol {
            id: Some("Y-90".into()),
            topic: Some("yeast".into()),
            grade: Some(7),
            gender: None,
            performance: None,
            sections: sections.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        })
        .unwrap()
        .protocol
    }

    #[test]
    fn result_family_is_independent() {
        let mock = Arc::new(
            MockProvider::new()
                .with_default("best_result", "It names the best trial only.\nANSWER: YES")
                .with_default("result_repeats", "It repeats the observation.\nANSWER: YES")
                .with_default("no_result", "A result is given.\nANSWER: NO"),
        );
        let gw = Gateway::mock(mock);
        let prompts = PromptSet::builtin("en").unwrap();
        let d = detect_result_errors(
            ResultTexts { result: "It closes the most in water.", hypothesis: "", observation: "It closes the most in water." },
            &gw,
            &prompts,
            None,
        );
        assert_eq!(d[&ErrorLabel::BestResult].verdict, Verdict::ErrorPresent);
        assert_eq!(d[&ErrorLabel::ResultObsHypSame].verdict, Verdict::ErrorPresent);
        assert_eq!(d[&ErrorLabel::IfNoResult].verdict, Verdict::ErrorAbsent);
        assert_eq!(d[&ErrorLabel::BestResult].evidence, "It names the best trial only.");
    }

    #[test]
    fn failed_call_is_indeterminate_for_that_label_only() {
        let mock = Arc::new(
            MockProvider::new()
                .with_default("best_result", "no marker here")
                .with_default("result_repeats", "ANSWER: NO")
                .with_default("no_result", "ANSWER: YES"),
        );
        let gw = Gateway::mock(mock);
        let prompts = PromptSet::builtin("en").unwrap();
        let d = detect_result_errors(
            ResultTexts { result: "I have no result. I think my assumption is wrong.", hypothesis: "x", observation: "y" },
            &gw,
            &prompts,
            None,
        );
        assert_eq!(d[&ErrorLabel::BestResult].verdict, Verdict::Indeterminate);
        assert!(d[&ErrorLabel::BestResult].evidence.contains("no answer marker"));
        assert_eq!(d[&ErrorLabel::ResultObsHypSame].verdict, Verdict::ErrorAbsent);
        assert_eq!(d[&ErrorLabel::IfNoResult].verdict, Verdict::ErrorPresent);
    }

    #[test]
    fn all_empty_protocol() {
        let p = protocol(&[]);
        let mut f = features(&[], vec![]);
        f.protocol_id = p.id.clone();
        f.hypothesis = HypothesisAnalysis::absent();
        f.material_itemized = false;
        f.implementation_documented = false;
        f.observation_documented = false;
        f.result_kind = ResultKind::Absent;
        let mock = Arc::new(MockProvider::new());
        let gw = Gateway::mock(mock.clone());
        let prompts = PromptSet::builtin("en").unwrap();
        let r = run_all(&p, &f, &task("yeast"), &DetectorConfig::default(), &gw, &prompts);
        assert_eq!(r.detections.len(), 16);
        assert_eq!(mock.calls(), 0);
        for l in [ErrorLabel::HypExists, ErrorLabel::MaterialMiss, ErrorLabel::NoImpl, ErrorLabel::IfNoResult] {
            assert_eq!(r.get(l).verdict, Verdict::ErrorPresent, "{l}");
        }
        for l in [ErrorLabel::IsTest, ErrorLabel::IsControl, ErrorLabel::MissingComponents, ErrorLabel::FewObs] {
            assert_eq!(r.get(l).verdict, Verdict::Indeterminate, "{l}");
        }
        for (_, d) in &r.detections {
            if d.verdict == Verdict::ErrorPresent {
                assert!(!d.evidence.is_empty());
            }
        }
    }

    fn arb_trials() -> impl Strategy<Value = Vec<Trial>> {
        const UNIVERSE: [&str; 5] = ["a", "b", "c", "d", "e"];
        prop::collection::vec(prop::collection::btree_set(prop::sample::select(&UNIVERSE[..]), 0..=5), 0..=6).prop_map(
            |sets| {
                sets.into_iter()
                    .enumerate()
                    .map(|(i, s)| Trial::new(i + 1, &s.into_iter().collect::<Vec<_>>()))
                    .collect()
            },
        )
    }

    fn arb_h() -> impl Strategy<Value = BTreeSet<CanonicalVariable>> {
        prop::collection::btree_set(prop::sample::select(&["a", "b", "c", "d", "e"][..]), 0..=4)
            .prop_map(|s| s.into_iter().map(CanonicalVariable::known).collect())
    }

    proptest! {
        #[test]
        fn appending_trial_never_creates_error(h in arb_h(), trials in arb_trials(), extra in arb_trials()) {
            for strict in [false, true] {
                let before = is_test_rule(&h, &trials, strict);
                let before_c = is_control_rule(&h, &trials);
                let mut more = trials.clone();
                if let Some(t) = extra.first().cloned() {
                    more.push(Trial { index: more.len() + 1, ..t });
                }
                if before == Verdict::ErrorAbsent {
                    prop_assert_eq!(is_test_rule(&h, &more, strict), Verdict::ErrorAbsent);
                }
                if before_c == Verdict::ErrorAbsent {
                    prop_assert_eq!(is_control_rule(&h, &more), Verdict::ErrorAbsent);
                }
            }
        }

        #[test]
        fn one_trial_iff_exactly_one(n in 0usize..=10) {
            let trials = (1..=n).map(|i| Trial::new(i, &["cone"])).collect();
            let f = features(&["cone"], trials);
            let d = detect_design_errors(&f, &task("cones"), &DetectorConfig::default());
            prop_assert_eq!(d[&ErrorLabel::OneTrial].verdict, Verdict::from_bool(n == 1));
        }

        #[test]
        fn no_variation_silent_on_differing_signatures(trials in arb_trials()) {
            let f = features(&["a"], trials.clone());
            let d = detect_design_errors(&f, &task("cones"), &DetectorConfig::default());
            let differ = trials.iter().any(|t| t.variables != trials[0].variables);
            if differ {
                prop_assert_eq!(d[&ErrorLabel::NoVariation].verdict, Verdict::ErrorAbsent);
            }
        }

        #[test]
        fn derived_detectors_are_pure(h in arb_h(), trials in arb_trials()) {
            let mut f = features(&[], trials);
            f.hypothesis.independent_variables = h;
            let cfg = DetectorConfig::default();
            prop_assert_eq!(detect_design_errors(&f, &task("cones"), &cfg), detect_design_errors(&f, &task("cones"), &cfg));
            prop_assert_eq!(detect_observation_errors(&f), detect_observation_errors(&f));
        }
    }
}
