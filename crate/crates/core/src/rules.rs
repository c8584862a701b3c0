//! Symbolic rules derived from gate-passing probes, and the inference-time
//! guard that consults them when the model is unsure.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::attribution::ShapVector;
use crate::lexing::{tag_of, AlignedToken, AstTag, ClassLabel};
use crate::predictor::{predict_unmasked, ClassProbability, Predictor, PredictorError};
use crate::probing::{CellResult, PositionRange, ProbeGrid};

pub const DEFAULT_TAU: f64 = 0.6;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("attribution-mode rule `{0}` needs a SHAP vector")]
    MissingAttribution(String),
    #[error("invalid rule set: {0}")]
    Invalid(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleMode {
    Presence,
    Attribution,
}

impl std::str::FromStr for RuleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "presence" => Ok(RuleMode::Presence),
            "attribution" => Ok(RuleMode::Attribution),
            other => Err(format!("unknown rule mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<=")]
    AtMost,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::AtLeast => value >= threshold,
            Comparator::AtMost => value <= threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiCondition {
    pub comparator: Comparator,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RulePart {
    PositiveCorrelation,
    LowReliability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SymbolicRule {
    pub tag: AstTag,
    pub range: PositionRange,
    pub mode: RuleMode,
    #[serde(default)]
    pub phi_condition: Option<PhiCondition>,
    pub target_class: ClassLabel,
    pub confidence: f64,
    pub part: RulePart,
}

impl SymbolicRule {
    pub fn id(&self) -> String {
        let part = match self.part {
            RulePart::PositiveCorrelation => "",
            RulePart::LowReliability => "~",
        };
        let mode = match (self.mode, self.phi_condition) {
            (RuleMode::Presence, _) | (RuleMode::Attribution, None) => "presence".to_string(),
            (RuleMode::Attribution, Some(c)) => {
                let op = if c.comparator == Comparator::AtLeast { ">=" } else { "<=" };
                format!("phi{op}{}", c.threshold)
            }
        };
        format!("{part}{}{}:{mode}=>{}", self.tag, self.range, self.target_class)
    }

    fn validate(&self) -> Result<(), RuleError> {
        let invalid = |m: &str| Err(RuleError::Invalid(format!("rule {}: {m}", self.id())));
        match (self.mode, &self.phi_condition) {
            (RuleMode::Attribution, None) => return invalid("attribution mode requires phiCondition"),
            (RuleMode::Presence, Some(_)) => return invalid("presence mode must not carry phiCondition"),
            _ => {}
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return invalid("confidence outside (0, 1]");
        }
        if self.range.lo > self.range.hi {
            return invalid("range has lo > hi");
        }
        Ok(())
    }

    fn order_key(&self) -> (AstTag, usize, usize, RuleMode, RulePart, ClassLabel) {
        (self.tag, self.range.lo, self.range.hi, self.mode, self.part, self.target_class)
    }
}

impl fmt::Display for SymbolicRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in [{},{}]", self.tag, self.range.lo, self.range.hi)?;
        if let Some(c) = self.phi_condition {
            let op = if c.comparator == Comparator::AtLeast { "≥" } else { "≤" };
            write!(f, " with φ {op} {}", c.threshold)?;
        }
        write!(f, " ⇒ {}", self.target_class)
    }
}

fn rule_order(a: &SymbolicRule, b: &SymbolicRule) -> Ordering {
    b.confidence.total_cmp(&a.confidence).then_with(|| a.order_key().cmp(&b.order_key()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RuleProvenance {
    pub grid_hash: String,
    pub config_hash: String,
    pub gate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    rules: Vec<SymbolicRule>,
    pub provenance: RuleProvenance,
}

impl RuleSet {
    /// Sorts `rules` by descending confidence (ties by tag, then range start)
    /// and checks the set's invariants.
    pub fn new(mut rules: Vec<SymbolicRule>, provenance: RuleProvenance) -> Result<Self, RuleError> {
        rules.sort_by(rule_order);
        let set = Self { rules, provenance };
        set.validate()?;
        Ok(set)
    }

    pub fn empty() -> Self {
        Self {
            rules: Vec::new(),
            provenance: RuleProvenance { grid_hash: String::new(), config_hash: String::new(), gate: 0.6 },
        }
    }

    pub fn rules(&self) -> &[SymbolicRule] {
        &self.rules
    }

    pub fn positive_rules(&self, mode: RuleMode) -> impl Iterator<Item = &SymbolicRule> {
        self.rules.iter().filter(move |r| r.part == RulePart::PositiveCorrelation && r.mode == mode)
    }

    fn validate(&self) -> Result<(), RuleError> {
        let mut seen = HashSet::new();
        for rule in &self.rules {
            rule.validate()?;
            if rule.part == RulePart::PositiveCorrelation && rule.confidence <= self.provenance.gate {
                return Err(RuleError::Invalid(format!("rule {} does not clear the gate", rule.id())));
            }
            if !seen.insert((rule.tag, rule.range, rule.mode, rule.target_class)) {
                return Err(RuleError::Invalid(format!("duplicate rule {}", rule.id())));
            }
        }
        if self.rules.windows(2).any(|w| rule_order(&w[0], &w[1]) == Ordering::Greater) {
            return Err(RuleError::Invalid("rules are not in descending-confidence order".into()));
        }
        Ok(())
    }

    /// JSON array: the provenance object first, then one object per rule.
    pub fn to_json(&self) -> Result<String, RuleError> {
        let mut items = vec![serde_json::to_value(&self.provenance)?];
        for rule in &self.rules {
            items.push(serde_json::to_value(rule)?);
        }
        let mut text = serde_json::to_string_pretty(&items)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self, RuleError> {
        let items: Vec<Value> = serde_json::from_str(text)?;
        let mut iter = items.into_iter();
        let header = iter.next().ok_or_else(|| RuleError::Invalid("missing provenance header".into()))?;
        let provenance: RuleProvenance = serde_json::from_value(header)?;
        let rules = iter.map(serde_json::from_value).collect::<Result<Vec<SymbolicRule>, _>>()?;
        let set = Self { rules, provenance };
        set.validate()?;
        Ok(set)
    }
}

/// Turns a probe grid into rules.
///
/// A cell that clears `gate` with a boundary yields a presence rule and an
/// attribution rule. Both point at the majority class on the side of the
/// boundary that holds most of the cell's samples. The attribution rule's
/// threshold is the midrange φ boundary, oriented toward that side. Any
/// other fitted cell yields a report-only low-reliability marker.
pub fn derive_rules(grid: &ProbeGrid, gate: f64, provenance: RuleProvenance) -> Result<RuleSet, RuleError> {
    let mut rules = Vec::new();
    for cell in &grid.cells {
        let CellResult::Fitted { probe } = &cell.result else { continue };
        match probe.boundary.filter(|_| probe.test_accuracy > gate) {
            Some(boundary) => {
                let sc = probe.side_counts;
                let insecure_side_total: usize = sc.predicted_insecure.iter().sum();
                let secure_side_total: usize = sc.predicted_secure.iter().sum();
                let (side_class, counts) = if insecure_side_total >= secure_side_total {
                    (ClassLabel::Insecure, sc.predicted_insecure)
                } else {
                    (ClassLabel::Secure, sc.predicted_secure)
                };
                let target_class = match counts[1].cmp(&counts[0]) {
                    Ordering::Greater => ClassLabel::Insecure,
                    Ordering::Less => ClassLabel::Secure,
                    Ordering::Equal => side_class,
                };
                let comparator =
                    if boundary.class_above() == side_class { Comparator::AtLeast } else { Comparator::AtMost };
                let base = SymbolicRule {
                    tag: probe.tag,
                    range: probe.range,
                    mode: RuleMode::Presence,
                    phi_condition: None,
                    target_class,
                    confidence: probe.test_accuracy,
                    part: RulePart::PositiveCorrelation,
                };
                rules.push(SymbolicRule {
                    mode: RuleMode::Attribution,
                    phi_condition: Some(PhiCondition { comparator, threshold: boundary.phi_threshold }),
                    ..base.clone()
                });
                rules.push(base);
            }
            None if probe.test_accuracy > 0.0 => {
                let sc = probe.side_counts;
                let secure = sc.predicted_secure[0] + sc.predicted_insecure[0];
                let insecure = sc.predicted_secure[1] + sc.predicted_insecure[1];
                rules.push(SymbolicRule {
                    tag: probe.tag,
                    range: probe.range,
                    mode: RuleMode::Presence,
                    phi_condition: None,
                    target_class: ClassLabel::from_positive(insecure > secure),
                    confidence: probe.test_accuracy,
                    part: RulePart::LowReliability,
                });
            }
            None => {}
        }
    }
    RuleSet::new(rules, RuleProvenance { gate, ..provenance })
}

/// Whether `rule` matches the tagged tokens (and, in attribution mode, their
/// SHAP values).
pub fn rule_fires(
    rule: &SymbolicRule,
    tokens: &[AlignedToken],
    shap: Option<&ShapVector>,
) -> Result<bool, RuleError> {
    let condition = match rule.mode {
        RuleMode::Presence => None,
        RuleMode::Attribution => {
            let shap = shap.ok_or_else(|| RuleError::MissingAttribution(rule.id()))?;
            let condition = rule
                .phi_condition
                .ok_or_else(|| RuleError::Invalid(format!("rule {} lacks phiCondition", rule.id())))?;
            Some((shap, condition))
        }
    };
    Ok(tokens.iter().any(|t| {
        tag_of(t) == rule.tag
            && rule.range.contains(t.position)
            && condition.map_or(true, |(shap, c)| {
                shap.phis.get(t.position).is_some_and(|&phi| c.comparator.holds(phi, c.threshold))
            })
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecidedBy {
    Model,
    Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardedPrediction {
    pub final_class: ClassLabel,
    pub model_class: ClassLabel,
    pub model_confidence: f64,
    pub p_positive: f64,
    pub decided_by: DecidedBy,
    /// Positive-correlation rules that fired, in evaluation order; the first
    /// one decided when `decided_by` is `rule`.
    pub fired_rules: Vec<String>,
}

impl GuardedPrediction {
    /// The bare model's decision, with no rule involvement.
    pub fn from_model(p: ClassProbability) -> Self {
        Self {
            final_class: p.predicted_class(),
            model_class: p.predicted_class(),
            model_confidence: p.confidence(),
            p_positive: p.p_positive(),
            decided_by: DecidedBy::Model,
            fired_rules: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardOptions {
    pub tau: f64,
    pub mode: RuleMode,
}

impl Default for GuardOptions {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, mode: RuleMode::Presence }
    }
}

/// Applies the guard policy to an already computed model probability.
pub fn guard_decision(
    p: ClassProbability,
    tokens: &[AlignedToken],
    rules: &RuleSet,
    options: &GuardOptions,
    shap: Option<&ShapVector>,
) -> Result<GuardedPrediction, RuleError> {
    let mut out = GuardedPrediction::from_model(p);
    if out.model_confidence >= options.tau {
        return Ok(out);
    }
    for rule in rules.positive_rules(options.mode) {
        if rule_fires(rule, tokens, shap)? {
            if out.fired_rules.is_empty() {
                out.final_class = rule.target_class;
                out.decided_by = DecidedBy::Rule;
            }
            out.fired_rules.push(rule.id());
        }
    }
    Ok(out)
}

/// Model prediction, deferred to the first firing rule when the model's
/// confidence is below `tau`.
pub fn guard_predict<P: Predictor + ?Sized>(
    tokens: &[AlignedToken],
    predictor: &P,
    rules: &RuleSet,
    options: &GuardOptions,
    mask_token: &str,
    shap: Option<&ShapVector>,
) -> Result<GuardedPrediction, RuleError> {
    let lexemes: Vec<String> = tokens.iter().map(|t| t.lexeme.clone()).collect();
    let p = predict_unmasked(predictor, &lexemes, mask_token)?;
    guard_decision(p, tokens, rules, options, shap)
}
