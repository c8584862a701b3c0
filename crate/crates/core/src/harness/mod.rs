//! Experiment harness: corpora, configuration, the staged pipeline and its report.

pub mod config;
pub mod corpus;
pub mod pipeline;
pub mod report;
pub mod synthetic;

use thiserror::Error;

use crate::attribution::AttributionError;
use crate::lexing::LexError;
use crate::predictor::PredictorError;
use crate::probing::ProbeError;
use crate::rules::RuleError;
use crate::tensor::TensorError;

pub use config::ExperimentConfig;
pub use corpus::{corpus_hash, load_corpus, write_corpus, Corpus, CorpusManifest};
pub use pipeline::{evaluate_guard, run_pipeline, GuardMetrics, RunSummary};
pub use synthetic::{generate_synthetic_corpus, PlantRecord, PlantSpec, SyntheticCorpus};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid plant spec: {0}")]
    InvalidPlantSpec(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HarnessError>,
    },
}

impl HarnessError {
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            already @ HarnessError::Stage { .. } => already,
            other => HarnessError::Stage { stage, source: Box::new(other) },
        }
    }

    /// Process exit code: 2 for configuration problems, 3 when the predictor
    /// cannot be reached or misbehaves, 4 for data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Stage { source, .. } => source.exit_code(),
            HarnessError::Config(_) | HarnessError::InvalidPlantSpec(_) => 2,
            HarnessError::Predictor(_)
            | HarnessError::Attribution(AttributionError::Predictor(_))
            | HarnessError::Rule(RuleError::Predictor(_)) => 3,
            _ => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        let offline = HarnessError::Attribution(AttributionError::Predictor(PredictorError::PredictorUnavailable(
            "down".into(),
        )));
        assert_eq!(offline.in_stage("attribute").exit_code(), 3);
        assert_eq!(HarnessError::Corpus("empty".into()).in_stage("load").exit_code(), 4);
    }

    #[test]
    fn stage_wrapping_is_idempotent() {
        let e = HarnessError::Corpus("x".into()).in_stage("load").in_stage("run");
        assert!(matches!(e, HarnessError::Stage { stage: "load", .. }));
    }
}
