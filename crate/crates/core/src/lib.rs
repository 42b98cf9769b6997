//! Detection of predefined student errors in written experimentation
//! protocols, and agreement statistics between raters.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`extraction`] turns protocol sections into [`ExperimentFeatures`]
//!    through model prompts (or gold sidecars under the mock provider).
//! 2. [`detectors`] decides each of the sixteen [`ErrorLabel`]s.
//! 3. [`agreement`] compares raters with accuracy, Cohen's and Fleiss' kappa
//!    and Gwet's AC1.
//!
//! All model traffic goes through the [`llm::Gateway`], which caches every
//! response so runs can be replayed offline.

pub mod agreement;
pub mod corpus;
pub mod detectors;
pub mod extraction;
pub mod llm;
pub mod model;

pub use agreement::{AgreementReport, Confusion2x2, MetricResult};
pub use detectors::{DetectionReport, DetectorConfig};
pub use extraction::{CanonicalVariable, ExperimentFeatures, HypothesisAnalysis, Lexicon, Trial};
pub use llm::{Gateway, LlmConfig, ProviderKind};
pub use model::{ErrorLabel, Protocol, Rating, RatingMatrix, TaskSpec, Verdict, Verdicts};
