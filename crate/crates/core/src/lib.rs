//! Trustworthiness audits for legal charge prediction models.
//!
//! Three checks are run against a frozen [`models::ChargeModel`]:
//! element probing on sentence representations ([`probing`]), confusing
//! charge perturbation ([`perturb`]) and element ablation ([`ablate`]).
//! [`audit`] wires them into a reproducible pipeline with report files.

pub mod ablate;
pub mod audit;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod models;
pub mod perturb;
pub mod probing;

pub use corpus::{
    AnnotatedCase, AnnotatedCaseSet, Case, CaseSet, ChargeLabel, ChargeSet, ElementKind, ElementSet,
    LabelSet, Sentence, Split, SplitRatio, SynthSpec, INNOCENT,
};
pub use error::{Error, ErrorClass, Result};
pub use models::{ChargeDistribution, ChargeModel, EncoderOutput, ModelBundle};
