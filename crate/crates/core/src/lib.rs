//! Neurosymbolic rule mining over per-token SHAP values of a black-box code
//! classifier.
//!
//! Snippets are tokenized into grammar leaves and tagged with coarse AST
//! types ([`lexing`]); a [`predictor`] scores masked token sequences;
//! [`attribution`] computes Shapley values per token; [`tensor`] collects
//! them per class; [`probing`] fits logistic probes per (AST type, position
//! range) cell; [`rules`] turns cells that clear the gate into symbolic rules
//! and applies them as a guard. [`harness`] wires the stages together.

pub mod attribution;
pub mod harness;
pub mod lexing;
pub mod predictor;
pub mod probing;
pub mod rules;
pub mod tensor;

pub use attribution::{shap_auto, shap_exact, shap_sampled, AttributionConfig, ShapMethod, ShapVector};
pub use lexing::{AlignedToken, AstTag, ClassLabel, Language, SourceSnippet, Taxonomy};
pub use predictor::{ClassProbability, MaskPattern, Predictor};
pub use probing::{LogisticProbe, PositionRange, ProbeGrid};
pub use rules::{GuardedPrediction, RuleSet, SymbolicRule};
