use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::CorpusManifest;
use super::synthetic::{default_markers, markers_with_plants};
use super::HarnessError;
use crate::attribution::{AttributionConfig, DEFAULT_EXACT_LIMIT, DEFAULT_SAMPLES};
use crate::lexing::{AstTag, Language, DEFAULT_MAX_TOKENS};
use crate::predictor::{Flawed, Predictor, RemoteOptions, RemotePredictor, ToyLogit, DEFAULT_MASK_TOKEN};
use crate::probing::{bin_ranges, PositionRange, ProbeConfig, ProbeFeatures, DEFAULT_GATE, DEFAULT_LAMBDA, DEFAULT_MIN_SAMPLES};
use crate::rules::{RuleMode, DEFAULT_TAU};
use crate::tensor::SplitBy;

/// Everything a pipeline run depends on. Read from a plain `key = value`
/// file (TOML syntax); missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub language: Language,
    pub corpus_dir: PathBuf,
    pub output_dir: PathBuf,
    pub class_cap: usize,
    pub token_cap: usize,
    pub probe_max_len: usize,
    pub bin_count: usize,
    pub custom_ranges: Option<Vec<String>>,
    pub tags: Option<Vec<AstTag>>,
    pub seed: u64,
    /// `toy-logit` or an `http://` URL of a predictor server.
    pub predictor: String,
    pub toy_bias: f64,
    pub toy_markers: Option<BTreeMap<String, f64>>,
    /// Fraction of low-confidence inputs whose prediction is inverted.
    pub flaw_rate: f64,
    pub tau: f64,
    pub gate: f64,
    pub samples: usize,
    pub exact_limit: usize,
    pub mask_token: String,
    pub probe_features: ProbeFeatures,
    pub split_by: SplitBy,
    pub min_samples: usize,
    pub lambda: f64,
    pub guard_mode: RuleMode,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            language: Language::C,
            corpus_dir: PathBuf::from("corpus"),
            output_dir: PathBuf::from("out"),
            class_cap: 300,
            token_cap: DEFAULT_MAX_TOKENS,
            probe_max_len: 300,
            bin_count: 6,
            custom_ranges: None,
            tags: None,
            seed: 7,
            predictor: "toy-logit".into(),
            toy_bias: 0.0,
            toy_markers: None,
            flaw_rate: 0.0,
            tau: DEFAULT_TAU,
            gate: DEFAULT_GATE,
            samples: DEFAULT_SAMPLES,
            exact_limit: DEFAULT_EXACT_LIMIT,
            mask_token: DEFAULT_MASK_TOKEN.into(),
            probe_features: ProbeFeatures::PosPhi,
            split_by: SplitBy::Label,
            min_samples: DEFAULT_MIN_SAMPLES,
            lambda: DEFAULT_LAMBDA,
            guard_mode: RuleMode::Presence,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.class_cap == 0 || self.token_cap == 0 {
            return fail("class_cap and token_cap must be >= 1".into());
        }
        if self.bin_count == 0 {
            return fail("bin_count must be >= 1".into());
        }
        if !(self.gate > 0.5 && self.gate < 1.0) {
            return fail(format!("gate {} must lie in (0.5, 1)", self.gate));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau {} must lie in [0, 1]", self.tau));
        }
        if self.samples < 2 || self.samples % 2 != 0 {
            return fail(format!("samples must be even and >= 2, got {}", self.samples));
        }
        if !(0.0..=1.0).contains(&self.flaw_rate) {
            return fail(format!("flaw_rate {} must lie in [0, 1]", self.flaw_rate));
        }
        if self.mask_token.is_empty() {
            return fail("mask_token must not be empty".into());
        }
        self.ranges()?;
        Ok(())
    }

    pub fn ranges(&self) -> Result<Vec<PositionRange>, HarnessError> {
        match &self.custom_ranges {
            Some(specs) if !specs.is_empty() => specs
                .iter()
                .map(|s| s.parse().map_err(|e: crate::probing::ProbeError| HarnessError::Config(e.to_string())))
                .collect(),
            _ => bin_ranges(self.probe_max_len, self.bin_count).map_err(|e| HarnessError::Config(e.to_string())),
        }
    }

    pub fn probe_tags(&self) -> Vec<AstTag> {
        self.tags.clone().unwrap_or_else(|| AstTag::ALL.to_vec())
    }

    pub fn attribution(&self) -> AttributionConfig {
        AttributionConfig { exact_limit: self.exact_limit, samples: self.samples, mask_token: self.mask_token.clone() }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            min_samples: self.min_samples,
            lambda: self.lambda,
            features: self.probe_features,
            ..ProbeConfig::default()
        }
    }

    /// Hash of every setting that affects results; paths and the worker
    /// count are excluded.
    pub fn semantic_hash(&self) -> String {
        let canonical = Self {
            corpus_dir: PathBuf::new(),
            output_dir: PathBuf::new(),
            workers: 0,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Builds the configured predictor. The toy predictor takes its markers
    /// from `toy_markers`, else the language defaults plus any planted
    /// lexemes recorded in the corpus manifest.
    pub fn build_predictor(&self, manifest: Option<&CorpusManifest>) -> Result<Box<dyn Predictor>, HarnessError> {
        let base = self.base_predictor(manifest)?;
        if self.flaw_rate > 0.0 {
            return Ok(Box::new(Flawed::new(base, self.tau, self.flaw_rate, self.seed)));
        }
        Ok(base)
    }

    fn base_predictor(&self, manifest: Option<&CorpusManifest>) -> Result<Box<dyn Predictor>, HarnessError> {
        if self.predictor.starts_with("http://") || self.predictor.starts_with("https://") {
            let remote = RemotePredictor::connect(&self.predictor, RemoteOptions::default())?;
            return Ok(Box::new(remote));
        }
        if self.predictor != "toy-logit" {
            return Err(HarnessError::Config(format!("unknown predictor `{}`", self.predictor)));
        }
        let markers = match (&self.toy_markers, manifest) {
            (Some(m), _) => m.clone(),
            (None, Some(man)) => markers_with_plants(man.language, &man.plants),
            (None, None) => default_markers(self.language),
        };
        Ok(Box::new(ToyLogit::new(markers, self.toy_bias)))
    }
}
