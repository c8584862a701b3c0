use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nspc::harness::config::ExperimentConfig;
use nspc::harness::corpus::{load_corpus, write_corpus};
use nspc::harness::pipeline::{load_tensors, run_pipeline, run_pipeline_with, tag_corpus};
use nspc::harness::synthetic::{generate_synthetic_corpus, markers_with_plants, PlantSpec};
use nspc::lexing::{tag_of, AstTag, ClassLabel, Language};
use nspc::predictor::{baseline_expectation, predict_unmasked, Predictor, ToyLogit};
use nspc::probing::{gather_samples, PositionRange};
use nspc::tensor::merge_tensors;

const ARTIFACTS: [&str; 9] = [
    "tensor.secure.jsonl",
    "tensor.insecure.jsonl",
    "shap.jsonl",
    "grid.csv",
    "grid.csv.meta",
    "grid.plot.jsonl",
    "rules.json",
    "predictions.jsonl",
    "report.md",
];

fn plant() -> PlantSpec {
    "literal:0-49:insecure:0.9".parse().unwrap()
}

fn nspc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nspc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = nspc(args);
    assert!(out.status.success(), "nspc {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_same(a: &Path, b: &Path, files: &[&str]) {
    for f in files {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        assert!(x == y, "{f} differs between {} and {}", a.display(), b.display());
    }
}

fn small_corpus(dir: &Path, n: usize) -> PathBuf {
    let corpus = dir.join("corpus");
    write_corpus(&corpus, &generate_synthetic_corpus(Language::C, n, &[plant()], 7).unwrap()).unwrap();
    corpus
}

#[test]
fn early_literal_count_by_independent_scan() {
    let corpus = generate_synthetic_corpus(Language::C, 200, &[plant()], 7).unwrap();
    let tagged = tag_corpus(&corpus.snippets, 500).unwrap();
    let insecure: Vec<_> = tagged.iter().filter(|(s, _)| s.label == Some(ClassLabel::Insecure)).collect();
    let early_literal = insecure
        .iter()
        .filter(|(_, toks)| toks.iter().any(|t| t.position <= 49 && tag_of(t) == AstTag::Literal))
        .count();
    assert!(early_literal >= 160, "{early_literal} insecure snippets with an early literal");

    let lexemes = nspc::harness::synthetic::plant_lexemes(Language::C, AstTag::Literal);
    let scanned_plants = insecure
        .iter()
        .filter(|(_, toks)| toks.iter().any(|t| t.position <= 49 && lexemes.contains(&t.lexeme.as_str())))
        .count();
    let recorded = corpus.planted.iter().filter(|r| r.snippet_id.starts_with("insecure")).count();
    assert_eq!(scanned_plants, recorded);
}

#[test]
fn cell_sample_count_matches_scan() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        corpus_dir: small_corpus(dir.path(), 20),
        output_dir: dir.path().join("out"),
        ..ExperimentConfig::default()
    };
    run_pipeline(&config).unwrap();
    let (secure, insecure) = load_tensors(&config.output_dir).unwrap();
    let merged = merge_tensors(&secure, &insecure).unwrap();
    let range = PositionRange { lo: 0, hi: 49 };
    let mut count = 0;
    for row in &merged.rows {
        if row.tag == AstTag::Literal && row.position <= 49 {
            count += 1;
        }
    }
    assert_eq!(gather_samples(&merged.rows, AstTag::Literal, range).len(), count);
}

#[test]
fn baseline_is_the_streaming_mean() {
    let corpus = generate_synthetic_corpus(Language::C, 30, &[plant()], 3).unwrap();
    let model = ToyLogit::new(markers_with_plants(Language::C, &corpus.plants), 0.1);
    let inputs: Vec<Vec<String>> = tag_corpus(&corpus.snippets, 500)
        .unwrap()
        .into_iter()
        .map(|(_, toks)| toks.into_iter().map(|t| t.lexeme).collect())
        .collect();
    let mut mean = 0.0;
    for (k, tokens) in inputs.iter().enumerate() {
        let p = predict_unmasked(&model, tokens, "<mask>").unwrap().p_positive();
        mean += (p - mean) / (k + 1) as f64;
    }
    let baseline = baseline_expectation(&inputs, &model, "<mask>").unwrap();
    assert_eq!(baseline.reference_size, 60);
    assert!((baseline.value - mean).abs() <= 1e-12);
}

#[test]
fn stages_rerun_from_persisted_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 30);
    let (full, staged) = (dir.path().join("full"), dir.path().join("staged"));
    ok(&["--seed", "7", "run", "--corpus", s(&corpus), "--out", s(&full)]);

    ok(&["--seed", "7", "attribute", "--corpus", s(&corpus), "--out", s(&staged)]);
    assert_same(&full, &staged, &ARTIFACTS[..3]);

    let reprobe = dir.path().join("reprobe");
    ok(&["--seed", "7", "probe", "--tensors", s(&full), "--out", s(&reprobe)]);
    assert_same(&full, &reprobe, &["grid.csv", "grid.csv.meta", "grid.plot.jsonl"]);

    let rules = reprobe.join("rules.json");
    ok(&["rules", "--grid", s(&reprobe.join("grid.csv.meta")), "--out", s(&rules)]);
    assert_same(&full, &reprobe, &["rules.json"]);

    let predictions = reprobe.join("predictions.jsonl");
    ok(&["--seed", "7", "apply", "--rules", s(&rules), "--tau", "0.6", "--corpus", s(&corpus), "--out", s(&predictions)]);
    assert_same(&full, &reprobe, &["predictions.jsonl"]);

    std::fs::copy(full.join("shap.jsonl"), reprobe.join("shap.jsonl")).unwrap();
    ok(&["report", "--dir", s(&reprobe)]);
    assert_same(&full, &reprobe, &["report.md"]);
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = small_corpus(dir.path(), 25);
    let corpus = load_corpus(&corpus_dir, 300).unwrap();
    let mut outputs = Vec::new();
    for workers in [1, 3] {
        let config = ExperimentConfig {
            corpus_dir: corpus_dir.clone(),
            output_dir: dir.path().join(format!("w{workers}")),
            workers,
            ..ExperimentConfig::default()
        };
        let predictor = config.build_predictor(corpus.manifest.as_ref()).unwrap();
        run_pipeline_with(&config, &corpus, predictor.as_ref()).unwrap();
        outputs.push(config.output_dir);
    }
    assert_same(&outputs[0], &outputs[1], &ARTIFACTS);
}

#[test]
fn split_by_prediction_routes_on_model_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        corpus_dir: small_corpus(dir.path(), 20),
        output_dir: dir.path().join("out"),
        split_by: nspc::tensor::SplitBy::Prediction,
        ..ExperimentConfig::default()
    };
    let corpus = load_corpus(&config.corpus_dir, 300).unwrap();
    let predictor = config.build_predictor(corpus.manifest.as_ref()).unwrap();
    run_pipeline_with(&config, &corpus, predictor.as_ref()).unwrap();
    let (secure, insecure) = load_tensors(&config.output_dir).unwrap();
    let tagged = tag_corpus(&corpus.snippets, 500).unwrap();
    for (snippet, toks) in tagged {
        let lexemes: Vec<String> = toks.iter().map(|t| t.lexeme.clone()).collect();
        let class = predict_unmasked(predictor.as_ref(), &lexemes, "<mask>").unwrap().predicted_class();
        let tensor = if class == ClassLabel::Insecure { &insecure } else { &secure };
        assert_eq!(tensor.rows.iter().filter(|r| r.snippet_id == snippet.id).count(), toks.len());
    }
}

#[test]
fn java_corpus_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let synthetic = generate_synthetic_corpus(Language::Java, 15, &[plant()], 2).unwrap();
    write_corpus(&corpus, &synthetic).unwrap();
    let config = ExperimentConfig {
        language: Language::Java,
        corpus_dir: corpus,
        output_dir: dir.path().join("out"),
        min_samples: 10,
        ..ExperimentConfig::default()
    };
    let summary = run_pipeline(&config).unwrap();
    assert_eq!(summary.snippet_count, 30);
    assert!(config.output_dir.join("report.md").is_file());
}

#[test]
fn offline_predictor_fails_in_attribute_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 2);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = dir.path().join("remote.toml");
    std::fs::write(&config, format!("predictor = \"http://127.0.0.1:{port}\"\n")).unwrap();
    let out = nspc(&["--config", s(&config), "run", "--corpus", s(&corpus), "--out", s(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("attribute") && stderr.contains("unavailable"), "{stderr}");
}

#[test]
fn config_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "gate = 0.4\n").unwrap();
    assert_eq!(nspc(&["--config", s(&bad), "run"]).status.code(), Some(2));
    let missing = dir.path().join("nothing-here");
    assert_eq!(nspc(&["run", "--corpus", s(&missing), "--out", s(&dir.path().join("o"))]).status.code(), Some(4));
    assert_eq!(nspc(&["generate", "--out", s(&dir.path().join("g")), "--plant", "literal:0-49:insecure:0"]).status.code(), Some(2));
}

#[test]
fn predictor_name_reaches_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        corpus_dir: small_corpus(dir.path(), 10),
        output_dir: dir.path().join("out"),
        ..ExperimentConfig::default()
    };
    let corpus = load_corpus(&config.corpus_dir, 300).unwrap();
    let predictor = config.build_predictor(corpus.manifest.as_ref()).unwrap();
    run_pipeline_with(&config, &corpus, predictor.as_ref()).unwrap();
    let (secure, _) = load_tensors(&config.output_dir).unwrap();
    assert_eq!(secure.provenance.predictor, predictor.name());
    assert_eq!(secure.provenance.seed, 7);
}
