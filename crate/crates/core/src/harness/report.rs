//! Markdown run report.

use std::fmt::Write;

use super::pipeline::{GridMeta, GuardMetrics};
use crate::attribution::{ShapMethod, ShapVector};
use crate::probing::CellResult;
use crate::rules::{RulePart, RuleSet};

pub struct ReportInput<'a> {
    pub meta: &'a GridMeta,
    pub rules: &'a RuleSet,
    pub shap: &'a [ShapVector],
    pub metrics: Option<&'a GuardMetrics>,
}

/// Renders the report. Output depends only on the inputs.
pub fn render_report(input: &ReportInput<'_>) -> String {
    let mut md = String::new();
    let meta = input.meta;
    let p = &meta.provenance;
    md.push_str("# NsPC run report\n\n");
    md.push_str("## Run\n\n");
    let _ = writeln!(md, "- predictor: `{}`", p.predictor);
    let _ = writeln!(md, "- seed: {}", p.seed);
    let _ = writeln!(md, "- attribution: {}", p.method);
    let _ = writeln!(md, "- mask token: `{}`", p.mask_token);
    let _ = writeln!(md, "- corpus hash: `{}`", p.corpus_hash);
    let _ = writeln!(md, "- config hash: `{}`", meta.config_hash);
    let _ = writeln!(md, "- gate: {}", meta.gate);
    md.push('\n');

    attribution_section(&mut md, input.shap);
    grid_section(&mut md, meta);
    rules_section(&mut md, input.rules);
    low_reliability_section(&mut md, input.rules);

    md.push_str("## Guard\n\n");
    match input.metrics {
        Some(m) => {
            let _ = writeln!(md, "| n | guarded accuracy | bare accuracy | flipped | fixed | broken | flip gain |");
            let _ = writeln!(md, "|---|---|---|---|---|---|---|");
            let _ = writeln!(
                md,
                "| {} | {:.4} | {:.4} | {} | {} | {} | {} |",
                m.n, m.accuracy, m.bare_accuracy, m.flipped_count, m.flips_fixed, m.flips_broken, m.flip_gain
            );
        }
        None => md.push_str("No predictions recorded.\n"),
    }
    md
}

fn attribution_section(md: &mut String, shap: &[ShapVector]) {
    md.push_str("## Attribution\n\n");
    if shap.is_empty() {
        md.push_str("No attribution vectors.\n\n");
        return;
    }
    let n = shap.len() as f64;
    let exact = shap.iter().filter(|v| v.method == ShapMethod::Exact).count();
    let mean = |f: fn(&ShapVector) -> f64| shap.iter().map(f).sum::<f64>() / n;
    let max_gap = shap.iter().map(ShapVector::efficiency_gap).fold(0.0, f64::max);
    let tokens: usize = shap.iter().map(|v| v.phis.len()).sum();
    let _ = writeln!(md, "- snippets: {} ({} exact, {} sampled)", shap.len(), exact, shap.len() - exact);
    let _ = writeln!(md, "- tokens: {tokens}");
    let _ = writeln!(md, "- mean f(full): {:.6}", mean(|v| v.f_full));
    let _ = writeln!(md, "- mean f(empty): {:.6}", mean(|v| v.f_empty));
    if let Some(reference) = shap[0].reference {
        let _ = writeln!(md, "- E[f(X)]: {reference:.6}");
    }
    let _ = writeln!(md, "- max efficiency gap: {max_gap:.3e}");
    md.push('\n');
}

fn grid_section(md: &mut String, meta: &GridMeta) {
    let grid = &meta.grid;
    md.push_str("## Probe test accuracy\n\n");
    md.push_str("Bold cells clear the gate; `n/a` marks cells with too few samples or a single class.\n\n");
    md.push_str("| tag |");
    for r in &grid.ranges {
        let _ = write!(md, " {r} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(grid.ranges.len()));
    md.push('\n');
    for &tag in &grid.tags {
        let _ = write!(md, "| {tag} |");
        for &range in &grid.ranges {
            let text = match grid.cell(tag, range).map(|c| &c.result) {
                Some(CellResult::Fitted { probe }) if probe.passes_gate(meta.gate) => {
                    format!("**{:.3}**", probe.test_accuracy)
                }
                Some(CellResult::Fitted { probe }) => format!("{:.3}", probe.test_accuracy),
                _ => "n/a".to_string(),
            };
            let _ = write!(md, " {text} |");
        }
        md.push('\n');
    }
    md.push('\n');
}

fn rules_section(md: &mut String, rules: &RuleSet) {
    md.push_str("## Rules\n\n");
    let positive: Vec<_> = rules.rules().iter().filter(|r| r.part == RulePart::PositiveCorrelation).collect();
    if positive.is_empty() {
        md.push_str("No cell cleared the gate.\n\n");
        return;
    }
    for r in positive {
        let _ = writeln!(md, "- {r} ({}, confidence {:.3})", mode_name(r.mode), r.confidence);
    }
    md.push('\n');
}

fn low_reliability_section(md: &mut String, rules: &RuleSet) {
    md.push_str("## Low-reliability cells\n\n");
    let low: Vec<_> = rules.rules().iter().filter(|r| r.part == RulePart::LowReliability).collect();
    if low.is_empty() {
        md.push_str("None.\n\n");
        return;
    }
    for r in low {
        let _ = writeln!(md, "- {} {} (test accuracy {:.3})", r.tag, r.range, r.confidence);
    }
    md.push('\n');
}

fn mode_name(mode: crate::rules::RuleMode) -> &'static str {
    match mode {
        crate::rules::RuleMode::Presence => "presence",
        crate::rules::RuleMode::Attribution => "attribution",
    }
}
