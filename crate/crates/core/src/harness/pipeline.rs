//! Staged pipeline: attribute, tensor, probe, rules, apply, report.
//!
//! Every stage persists its output under the run's output directory and can
//! be re-run from its predecessor's files.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::corpus::{corpus_hash, load_corpus, Corpus};
use super::report::{render_report, ReportInput};
use super::HarnessError;
use crate::attribution::{relative_to_expectation, shap_auto, ShapVector};
use crate::lexing::{tag_snippet, AlignedToken, ClassLabel, Language, SourceSnippet, Taxonomy};
use crate::predictor::{BaselineExpectation, ClassProbability, Predictor};
use crate::probing::{grid_csv, plot_data_jsonl, probe_grid, ProbeGrid};
use crate::rules::{derive_rules, guard_decision, RuleMode, GuardOptions, GuardedPrediction, RuleProvenance, RuleSet};
use crate::tensor::{build_tensor, load_tensor, merge_tensors, save_tensor, Attributed, ClassTensor, Provenance};

pub const SHAP_FILE: &str = "shap.jsonl";
pub const SECURE_TENSOR_FILE: &str = "tensor.secure.jsonl";
pub const INSECURE_TENSOR_FILE: &str = "tensor.insecure.jsonl";
pub const GRID_FILE: &str = "grid.csv";
pub const GRID_META_FILE: &str = "grid.csv.meta";
pub const PLOT_FILE: &str = "grid.plot.jsonl";
pub const RULES_FILE: &str = "rules.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.md";

/// A snippet with its aligned tokens and attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetAttribution {
    pub snippet: SourceSnippet,
    pub tokens: Vec<AlignedToken>,
    pub shap: ShapVector,
}

impl SnippetAttribution {
    pub fn probability(&self) -> Result<ClassProbability, HarnessError> {
        Ok(ClassProbability::new(self.shap.f_full)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeOutput {
    pub attributions: Vec<SnippetAttribution>,
    pub baseline: BaselineExpectation,
    pub secure: ClassTensor,
    pub insecure: ClassTensor,
}

/// Contents of `grid.csv.meta`: the full grid plus what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub gate: f64,
    pub config_hash: String,
    pub provenance: Provenance,
    pub grid: ProbeGrid,
}

impl GridMeta {
    pub fn grid_hash(&self) -> String {
        let json = serde_json::to_string(&self.grid).expect("grid serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub snippet_id: String,
    pub label: Option<ClassLabel>,
    pub prediction: GuardedPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub bare_accuracy: f64,
    pub flipped_count: usize,
    pub flips_fixed: usize,
    pub flips_broken: usize,
    /// Net correct flips: `flips_fixed - flips_broken`.
    pub flip_gain: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub snippet_count: usize,
    pub baseline: BaselineExpectation,
    pub passing_cells: usize,
    pub rule_count: usize,
    pub metrics: GuardMetrics,
}

/// Seed for one snippet's permutation sampler, derived from the run seed and
/// the snippet id so it does not depend on scheduling.
pub fn snippet_seed(seed: u64, snippet_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(snippet_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Tags every snippet. Output order follows `snippets`.
pub fn tag_corpus(
    snippets: &[SourceSnippet],
    token_cap: usize,
) -> Result<Vec<(SourceSnippet, Vec<AlignedToken>)>, HarnessError> {
    let c = Taxonomy::builtin(Language::C);
    let java = Taxonomy::builtin(Language::Java);
    snippets
        .par_iter()
        .map(|s| {
            let taxonomy = match s.language {
                Language::C => &c,
                Language::Java => &java,
            };
            Ok((s.clone(), tag_snippet(s, token_cap, taxonomy)?))
        })
        .collect()
}

/// Tags and attributes every snippet in parallel; output is sorted by id.
pub fn attribute_snippets<P: Predictor + ?Sized>(
    snippets: &[SourceSnippet],
    predictor: &P,
    config: &ExperimentConfig,
) -> Result<Vec<SnippetAttribution>, HarnessError> {
    let attribution = config.attribution();
    let mut out: Vec<SnippetAttribution> = with_workers(config.workers, || {
        tag_corpus(snippets, config.token_cap)?
            .into_par_iter()
            .map(|(snippet, tokens)| {
                let lexemes: Vec<String> = tokens.iter().map(|t| t.lexeme.clone()).collect();
                let seed = snippet_seed(config.seed, &snippet.id);
                let shap = shap_auto(&snippet.id, &lexemes, predictor, &attribution, seed)?;
                Ok(SnippetAttribution { snippet, tokens, shap })
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })??;
    out.sort_by(|a, b| a.snippet.id.cmp(&b.snippet.id));
    Ok(out)
}

fn attribution_method(config: &ExperimentConfig) -> String {
    format!("auto(exact<={},sampled:m={})", config.exact_limit, config.samples)
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(&item)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn load_shap(path: &Path) -> Result<Vec<ShapVector>, HarnessError> {
    read_lines(path)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, HarnessError> {
    read_lines(path)
}

/// Attribute stage: SHAP vectors, baseline anchoring, and both class tensors.
pub fn stage_attribute<P: Predictor + ?Sized>(
    config: &ExperimentConfig,
    corpus: &Corpus,
    predictor: &P,
    out_dir: &Path,
) -> Result<AttributeOutput, HarnessError> {
    let mut attributions = attribute_snippets(&corpus.snippets, predictor, config)?;
    let reference_size = attributions.len();
    let mean = attributions.iter().map(|a| a.shap.f_full).sum::<f64>() / reference_size as f64;
    let baseline = BaselineExpectation { value: mean, reference_size };
    for a in &mut attributions {
        a.shap = relative_to_expectation(a.shap.clone(), &baseline);
    }
    let provenance = Provenance {
        predictor: predictor.name().to_string(),
        seed: config.seed,
        method: attribution_method(config),
        mask_token: config.mask_token.clone(),
        corpus_hash: corpus_hash(&corpus.snippets),
    };
    let predicted: Vec<ClassLabel> = attributions
        .iter()
        .map(|a| a.probability().map(|p| p.predicted_class()))
        .collect::<Result<_, _>>()?;
    let items: Vec<Attributed<'_>> = attributions
        .iter()
        .zip(&predicted)
        .filter(|(a, _)| a.snippet.label.is_some())
        .map(|(a, &p)| Attributed { snippet: &a.snippet, tokens: &a.tokens, shap: &a.shap, predicted: Some(p) })
        .collect();
    let (secure, insecure) = build_tensor(&items, &provenance, config.split_by)?;

    fs::create_dir_all(out_dir)?;
    write_lines(&out_dir.join(SHAP_FILE), attributions.iter().map(|a| &a.shap))?;
    save_tensor(&secure, &out_dir.join(SECURE_TENSOR_FILE))?;
    save_tensor(&insecure, &out_dir.join(INSECURE_TENSOR_FILE))?;
    Ok(AttributeOutput { attributions, baseline, secure, insecure })
}

/// Probe stage: the (tag × range) grid over the merged tensors.
pub fn stage_probe(
    config: &ExperimentConfig,
    secure: &ClassTensor,
    insecure: &ClassTensor,
    out_dir: &Path,
) -> Result<GridMeta, HarnessError> {
    let merged = merge_tensors(secure, insecure)?;
    let ranges = config.ranges()?;
    let grid = probe_grid(&merged.rows, &config.probe_tags(), &ranges, config.seed, &config.probe_config());
    let meta = GridMeta {
        gate: config.gate,
        config_hash: config.semantic_hash(),
        provenance: merged.provenance.clone(),
        grid,
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(GRID_FILE), grid_csv(&meta.grid, config.gate))?;
    fs::write(out_dir.join(GRID_META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    fs::write(out_dir.join(PLOT_FILE), plot_data_jsonl(&merged.rows, &meta.grid))?;
    Ok(meta)
}

pub fn load_tensors(dir: &Path) -> Result<(ClassTensor, ClassTensor), HarnessError> {
    Ok((load_tensor(&dir.join(SECURE_TENSOR_FILE))?, load_tensor(&dir.join(INSECURE_TENSOR_FILE))?))
}

/// Rules stage: derive from a grid and write the rule file.
pub fn stage_rules(meta: &GridMeta, out: &Path) -> Result<RuleSet, HarnessError> {
    let provenance = RuleProvenance { grid_hash: meta.grid_hash(), config_hash: meta.config_hash.clone(), gate: meta.gate };
    let rules = derive_rules(&meta.grid, meta.gate, provenance)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, rules.to_json()?)?;
    Ok(rules)
}

pub fn load_rules(path: &Path) -> Result<RuleSet, HarnessError> {
    Ok(RuleSet::from_json(&fs::read_to_string(path)?)?)
}

/// Guarded predictions for already attributed snippets, in input order.
pub fn apply_rules(
    attributions: &[SnippetAttribution],
    rules: &RuleSet,
    options: &GuardOptions,
) -> Result<Vec<PredictionRecord>, HarnessError> {
    attributions
        .iter()
        .map(|a| {
            let prediction = guard_decision(a.probability()?, &a.tokens, rules, options, Some(&a.shap))?;
            Ok(PredictionRecord { snippet_id: a.snippet.id.clone(), label: a.snippet.label, prediction })
        })
        .collect()
}

/// Apply stage on a corpus: attributes only when the guard needs SHAP values.
pub fn stage_apply<P: Predictor + ?Sized>(
    config: &ExperimentConfig,
    snippets: &[SourceSnippet],
    predictor: &P,
    rules: &RuleSet,
    out: &Path,
) -> Result<Vec<PredictionRecord>, HarnessError> {
    let options = GuardOptions { tau: config.tau, mode: config.guard_mode };
    let attributions = if config.guard_mode == RuleMode::Attribution {
        attribute_snippets(snippets, predictor, config)?
    } else {
        unattributed(snippets, predictor, config)?
    };
    let records = apply_rules(&attributions, rules, &options)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    write_lines(out, &records)?;
    Ok(records)
}

/// Tokens and unmasked predictions only; the SHAP vector is left empty.
fn unattributed<P: Predictor + ?Sized>(
    snippets: &[SourceSnippet],
    predictor: &P,
    config: &ExperimentConfig,
) -> Result<Vec<SnippetAttribution>, HarnessError> {
    let mut out: Vec<SnippetAttribution> = with_workers(config.workers, || {
        tag_corpus(snippets, config.token_cap)?
            .into_par_iter()
            .map(|(snippet, tokens)| {
                let lexemes: Vec<String> = tokens.iter().map(|t| t.lexeme.clone()).collect();
                let p = crate::predictor::predict_unmasked(predictor, &lexemes, &config.mask_token)?;
                let shap = ShapVector {
                    snippet_id: snippet.id.clone(),
                    phis: Vec::new(),
                    method: crate::attribution::ShapMethod::Exact,
                    sample_count: 0,
                    seed: 0,
                    f_full: p.p_positive(),
                    f_empty: p.p_positive(),
                    reference: None,
                };
                Ok(SnippetAttribution { snippet, tokens, shap })
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })??;
    out.sort_by(|a, b| a.snippet.id.cmp(&b.snippet.id));
    Ok(out)
}

/// Guarded versus bare accuracy over aligned predictions and labels.
pub fn evaluate_guard(predictions: &[GuardedPrediction], labels: &[ClassLabel]) -> Result<GuardMetrics, HarnessError> {
    if predictions.len() != labels.len() {
        return Err(HarnessError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    let n = predictions.len();
    let (mut correct, mut bare_correct, mut flipped, mut fixed, mut broken) = (0, 0, 0, 0, 0);
    for (p, &label) in predictions.iter().zip(labels) {
        correct += usize::from(p.final_class == label);
        bare_correct += usize::from(p.model_class == label);
        if p.decided_by == crate::rules::DecidedBy::Rule && p.final_class != p.model_class {
            flipped += 1;
            if p.final_class == label {
                fixed += 1;
            } else {
                broken += 1;
            }
        }
    }
    let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(GuardMetrics {
        n,
        accuracy: rate(correct),
        bare_accuracy: rate(bare_correct),
        flipped_count: flipped,
        flips_fixed: fixed,
        flips_broken: broken,
        flip_gain: fixed as i64 - broken as i64,
    })
}

/// Metrics over the labelled records.
pub fn metrics_for(records: &[PredictionRecord]) -> Result<GuardMetrics, HarnessError> {
    let (preds, labels): (Vec<GuardedPrediction>, Vec<ClassLabel>) = records
        .iter()
        .filter_map(|r| r.label.map(|l| (r.prediction.clone(), l)))
        .unzip();
    evaluate_guard(&preds, &labels)
}

/// Report stage: reads the run's artifacts and writes `report.md`.
pub fn stage_report(out_dir: &Path) -> Result<String, HarnessError> {
    let meta = GridMeta::load(&out_dir.join(GRID_META_FILE))?;
    let rules = load_rules(&out_dir.join(RULES_FILE))?;
    let shap = load_shap(&out_dir.join(SHAP_FILE))?;
    let predictions_path = out_dir.join(PREDICTIONS_FILE);
    let metrics = if predictions_path.is_file() {
        Some(metrics_for(&load_predictions(&predictions_path)?)?)
    } else {
        None
    };
    let report = render_report(&ReportInput { meta: &meta, rules: &rules, shap: &shap, metrics: metrics.as_ref() });
    fs::write(out_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Full pipeline with the configured predictor.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let corpus = load_corpus(&config.corpus_dir, config.class_cap).map_err(|e| e.in_stage("load"))?;
    let predictor = config.build_predictor(corpus.manifest.as_ref()).map_err(|e| e.in_stage("attribute"))?;
    run_pipeline_with(config, &corpus, predictor.as_ref())
}

/// Full pipeline on an already loaded corpus and predictor.
pub fn run_pipeline_with<P: Predictor + ?Sized>(
    config: &ExperimentConfig,
    corpus: &Corpus,
    predictor: &P,
) -> Result<RunSummary, HarnessError> {
    let out_dir = config.output_dir.as_path();
    let attributed = stage_attribute(config, corpus, predictor, out_dir).map_err(|e| e.in_stage("attribute"))?;
    let meta = stage_probe(config, &attributed.secure, &attributed.insecure, out_dir).map_err(|e| e.in_stage("probe"))?;
    let rules = stage_rules(&meta, &out_dir.join(RULES_FILE)).map_err(|e| e.in_stage("rules"))?;
    let options = GuardOptions { tau: config.tau, mode: config.guard_mode };
    let records = apply_rules(&attributed.attributions, &rules, &options)
        .and_then(|r| write_lines(&out_dir.join(PREDICTIONS_FILE), &r).map(|_| r))
        .map_err(|e| e.in_stage("apply"))?;
    let metrics = metrics_for(&records).map_err(|e| e.in_stage("apply"))?;
    fs::write(out_dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)? + "\n")?;
    stage_report(out_dir).map_err(|e| e.in_stage("report"))?;
    let passing_cells = meta
        .grid
        .cells
        .iter()
        .filter(|c| c.probe().is_some_and(|p| p.passes_gate(config.gate)))
        .count();
    Ok(RunSummary {
        output_dir: out_dir.to_path_buf(),
        snippet_count: attributed.attributions.len(),
        baseline: attributed.baseline,
        passing_cells,
        rule_count: rules.rules().len(),
        metrics,
    })
}
