use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nspc::harness::config::ExperimentConfig;
use nspc::harness::corpus::{load_corpus, write_corpus};
use nspc::harness::pipeline::{
    load_rules, load_tensors, metrics_for, run_pipeline, stage_apply, stage_attribute, stage_probe, stage_report,
    stage_rules, GridMeta, GRID_META_FILE, METRICS_FILE, RULES_FILE,
};
use nspc::harness::synthetic::{generate_synthetic_corpus, PlantSpec};
use nspc::harness::HarnessError;
use nspc::lexing::Language;
use nspc::rules::RuleMode;
use nspc::tensor::SplitBy;

#[derive(Parser)]
#[command(name = "nspc", version, about = "Mine symbolic rules from token attributions of a code classifier")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config file (key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Attribution threads; 0 uses all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    language: Option<Language>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted patterns.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        /// `tag:lo-hi:class:rate`, e.g. `literal:0-49:insecure:0.9`. Repeatable.
        #[arg(long = "plant")]
        plants: Vec<String>,
    },
    /// Compute SHAP vectors and class tensors for a corpus.
    Attribute {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        split_by: Option<SplitBy>,
    },
    /// Fit the probe grid over the tensors in a directory.
    Probe {
        /// Directory holding the class tensors.
        #[arg(long)]
        tensors: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive rules from a probe grid.
    Rules {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Guarded predictions for a corpus.
    Apply {
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<RuleMode>,
    },
    /// Render report.md from a run directory.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Full pipeline.
    Run {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(global: &Global) -> Result<ExperimentConfig, HarnessError> {
    let mut config = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(workers) = global.workers {
        config.workers = workers;
    }
    if let Some(language) = global.language {
        config.language = language;
    }
    config.validate()?;
    Ok(config)
}

fn set(path: &mut PathBuf, value: Option<PathBuf>) {
    if let Some(v) = value {
        *path = v;
    }
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    let mut config = load_config(&cli.global)?;
    match cli.command {
        Command::Generate { out, n_per_class, plants } => {
            let plants = plants.iter().map(|p| p.parse()).collect::<Result<Vec<PlantSpec>, _>>()?;
            let corpus = generate_synthetic_corpus(config.language, n_per_class, &plants, config.seed)?;
            write_corpus(&out, &corpus)?;
            println!("wrote {} snippets to {}", corpus.snippets.len(), out.display());
        }
        Command::Attribute { corpus, out, split_by } => {
            set(&mut config.corpus_dir, corpus);
            set(&mut config.output_dir, out);
            if let Some(s) = split_by {
                config.split_by = s;
            }
            let corpus = load_corpus(&config.corpus_dir, config.class_cap).map_err(|e| e.in_stage("load"))?;
            let predictor = config.build_predictor(corpus.manifest.as_ref()).map_err(|e| e.in_stage("attribute"))?;
            let output = stage_attribute(&config, &corpus, predictor.as_ref(), &config.output_dir)
                .map_err(|e| e.in_stage("attribute"))?;
            println!(
                "attributed {} snippets ({} secure rows, {} insecure rows), E[f(X)] = {:.6}",
                output.attributions.len(),
                output.secure.rows.len(),
                output.insecure.rows.len(),
                output.baseline.value
            );
        }
        Command::Probe { tensors, out } => {
            let tensors = tensors.unwrap_or_else(|| config.output_dir.clone());
            let out = out.unwrap_or_else(|| tensors.clone());
            let (secure, insecure) = load_tensors(&tensors).map_err(|e| e.in_stage("probe"))?;
            let meta = stage_probe(&config, &secure, &insecure, &out).map_err(|e| e.in_stage("probe"))?;
            let passing = meta.grid.cells.iter().filter(|c| c.probe().is_some_and(|p| p.passes_gate(meta.gate))).count();
            println!("fitted {} cells, {} clear the gate", meta.grid.cells.len(), passing);
        }
        Command::Rules { grid, out } => {
            let meta = GridMeta::load(&grid).map_err(|e| e.in_stage("rules"))?;
            let rules = stage_rules(&meta, &out).map_err(|e| e.in_stage("rules"))?;
            for rule in rules.rules() {
                println!("{}", rule.id());
            }
        }
        Command::Apply { rules, tau, corpus, out, mode } => {
            set(&mut config.corpus_dir, corpus);
            if let Some(t) = tau {
                config.tau = t;
            }
            if let Some(m) = mode {
                config.guard_mode = m;
            }
            config.validate()?;
            let rules = load_rules(&rules).map_err(|e| e.in_stage("apply"))?;
            let corpus = load_corpus(&config.corpus_dir, config.class_cap).map_err(|e| e.in_stage("load"))?;
            let predictor = config.build_predictor(corpus.manifest.as_ref()).map_err(|e| e.in_stage("apply"))?;
            let records = stage_apply(&config, &corpus.snippets, predictor.as_ref(), &rules, &out)
                .map_err(|e| e.in_stage("apply"))?;
            let metrics = metrics_for(&records)?;
            if let Some(dir) = out.parent().filter(|d| d.join(RULES_FILE).is_file() || d.join(GRID_META_FILE).is_file()) {
                std::fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)? + "\n")?;
            }
            println!(
                "{} predictions; accuracy {:.4} (bare {:.4}), flipped {}, flip gain {}",
                records.len(),
                metrics.accuracy,
                metrics.bare_accuracy,
                metrics.flipped_count,
                metrics.flip_gain
            );
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or_else(|| config.output_dir.clone());
            stage_report(&dir).map_err(|e| e.in_stage("report"))?;
            println!("wrote {}", dir.join("report.md").display());
        }
        Command::Run { corpus, out } => {
            set(&mut config.corpus_dir, corpus);
            set(&mut config.output_dir, out);
            let summary = run_pipeline(&config)?;
            println!(
                "{} snippets, {} passing cells, {} rules; guarded accuracy {:.4} (bare {:.4}); output in {}",
                summary.snippet_count,
                summary.passing_cells,
                summary.rule_count,
                summary.metrics.accuracy,
                summary.metrics.bare_accuracy,
                display(&summary.output_dir)
            );
        }
    }
    Ok(())
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
