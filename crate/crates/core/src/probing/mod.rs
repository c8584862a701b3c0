//! Probing classifiers over SHAP rows.
//!
//! For each (AST tag, position range) cell a logistic-regression probe is
//! trained to predict the class label from `(position, φ)`. A cell whose
//! held-out accuracy clears the gate and whose decision boundary crosses the
//! plotted domain is evidence of a pattern the model relies on.

mod logistic;

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use logistic::{fit_irls, IrlsFit, IrlsOptions};

use crate::lexing::{AstTag, ClassLabel};
use crate::tensor::ShapTensorRow;

pub const DEFAULT_GATE: f64 = 0.6;
pub const DEFAULT_MIN_SAMPLES: usize = 30;
pub const DEFAULT_LAMBDA: f64 = 1e-6;

const DEGENERATE_WEIGHT: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("{n} samples is below the minimum of {min}")]
    InsufficientData { n: usize, min: usize },
    #[error("all samples belong to one class")]
    SingleClass,
}

/// Closed interval of token positions `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PositionRange {
    pub lo: usize,
    pub hi: usize,
}

impl PositionRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self, ProbeError> {
        if lo > hi {
            return Err(ProbeError::InvalidArgs(format!("range [{lo}, {hi}] has lo > hi")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, position: usize) -> bool {
        self.lo <= position && position <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        (self.lo + self.hi) as f64 / 2.0
    }
}

impl std::fmt::Display for PositionRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{}]", self.lo, self.hi)
    }
}

impl FromStr for PositionRange {
    type Err = ProbeError;

    /// Accepts `lo-hi` or `[lo,hi]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ProbeError::InvalidArgs(format!("cannot parse range `{s}`"));
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
        let (lo, hi) = inner.split_once([',', '-']).ok_or_else(bad)?;
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        PositionRange::new(lo, hi)
    }
}

/// `k` contiguous equal-width ranges covering `[0, max_len)`; the last range
/// absorbs the remainder.
pub fn bin_ranges(max_len: usize, k: usize) -> Result<Vec<PositionRange>, ProbeError> {
    if k == 0 || max_len < k {
        return Err(ProbeError::InvalidArgs(format!("need max_len >= k >= 1, got max_len={max_len}, k={k}")));
    }
    let width = max_len / k;
    Ok((0..k)
        .map(|i| {
            let lo = i * width;
            let hi = if i + 1 == k { max_len - 1 } else { lo + width - 1 };
            PositionRange { lo, hi }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub position: usize,
    pub phi: f64,
    /// true for `insecure`
    pub positive: bool,
}

pub fn gather_samples(rows: &[ShapTensorRow], tag: AstTag, range: PositionRange) -> Vec<ProbeSample> {
    rows.iter()
        .filter(|r| r.tag == tag && range.contains(r.position))
        .map(|r| ProbeSample { position: r.position, phi: r.phi, positive: r.class_label.is_positive() })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFeatures {
    #[default]
    PosPhi,
    Phi,
}

impl FromStr for ProbeFeatures {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pos_phi" => Ok(ProbeFeatures::PosPhi),
            "phi" => Ok(ProbeFeatures::Phi),
            other => Err(format!("unknown probe features `{other}` (expected pos_phi or phi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub min_samples: usize,
    pub lambda: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub test_fraction: f64,
    pub features: ProbeFeatures,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            min_samples: DEFAULT_MIN_SAMPLES,
            lambda: DEFAULT_LAMBDA,
            max_iterations: 100,
            tolerance: 1e-8,
            test_fraction: 0.2,
            features: ProbeFeatures::PosPhi,
        }
    }
}

/// Decision boundary of a probe: the φ threshold at the range midpoint and
/// the full line `w_pos·pos + w_phi·φ + bias = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub phi_threshold: f64,
    pub midrange: f64,
    pub w_pos: f64,
    pub w_phi: f64,
    pub bias: f64,
}

impl Boundary {
    /// φ on the boundary at `position`.
    pub fn phi_at(&self, position: f64) -> f64 {
        -(self.bias + self.w_pos * position) / self.w_phi
    }

    /// Class predicted for samples with φ above the boundary.
    pub fn class_above(&self) -> ClassLabel {
        ClassLabel::from_positive(self.w_phi > 0.0)
    }
}

/// Counts of true classes on each side of the probe's decision surface, over
/// every sample of the cell. Index 0 is secure, 1 is insecure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideCounts {
    pub predicted_secure: [usize; 2],
    pub predicted_insecure: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub tag: AstTag,
    pub range: PositionRange,
    /// Raw-unit weights `(w_pos, w_phi)`.
    pub weights: (f64, f64),
    pub bias: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub boundary: Option<Boundary>,
    pub sample_count: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub side_counts: SideCounts,
}

impl LogisticProbe {
    pub fn logit(&self, position: usize, phi: f64) -> f64 {
        self.weights.0 * position as f64 + self.weights.1 * phi + self.bias
    }

    pub fn predict(&self, position: usize, phi: f64) -> bool {
        self.logit(position, phi) >= 0.0
    }

    pub fn passes_gate(&self, gate: f64) -> bool {
        self.test_accuracy > gate && self.boundary.is_some()
    }
}

/// Solves the probe's line for φ at the range midpoint; `None` when the φ
/// weight is (numerically) zero.
pub fn decision_boundary(weights: (f64, f64), bias: f64, range: PositionRange) -> Option<Boundary> {
    let (w_pos, w_phi) = weights;
    if w_phi.abs() < DEGENERATE_WEIGHT {
        return None;
    }
    let midrange = range.midpoint();
    let mut boundary = Boundary { phi_threshold: 0.0, midrange, w_pos, w_phi, bias };
    boundary.phi_threshold = boundary.phi_at(midrange);
    Some(boundary)
}

struct Scaling {
    lo: f64,
    width: f64,
    phi_mean: f64,
    phi_sd: f64,
}

impl Scaling {
    fn fit(samples: &[&ProbeSample], range: PositionRange) -> Self {
        let n = samples.len() as f64;
        let phi_mean = samples.iter().map(|s| s.phi).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.phi - phi_mean).powi(2)).sum::<f64>() / n;
        let phi_sd = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
        Self { lo: range.lo as f64, width: (range.hi - range.lo) as f64, phi_mean, phi_sd }
    }

    fn row(&self, s: &ProbeSample, features: ProbeFeatures) -> Vec<f64> {
        let phi = (s.phi - self.phi_mean) / self.phi_sd;
        match features {
            ProbeFeatures::PosPhi => {
                let pos = if self.width > 0.0 { (s.position as f64 - self.lo) / self.width } else { 0.0 };
                vec![1.0, pos, phi]
            }
            ProbeFeatures::Phi => vec![1.0, phi],
        }
    }

    /// Maps standardized-space coefficients back to raw `(w_pos, w_phi), bias`.
    fn to_raw(&self, beta: &[f64], features: ProbeFeatures) -> ((f64, f64), f64) {
        let (b, a, c) = match features {
            ProbeFeatures::PosPhi => (beta[0], beta[1], beta[2]),
            ProbeFeatures::Phi => (beta[0], 0.0, beta[1]),
        };
        let w_pos = if self.width > 0.0 { a / self.width } else { 0.0 };
        let w_phi = c / self.phi_sd;
        let bias = b - w_pos * self.lo - c * self.phi_mean / self.phi_sd;
        ((w_pos, w_phi), bias)
    }
}

/// Seeded stratified split; returns `(train, test)` index lists. Each class
/// keeps at least one training sample.
fn stratified_split(samples: &[ProbeSample], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].positive == class).collect();
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).min(idx.len().saturating_sub(1));
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn accuracy(probe_fn: impl Fn(&ProbeSample) -> bool, samples: &[ProbeSample], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let correct = idx.iter().filter(|&&i| probe_fn(&samples[i]) == samples[i].positive).count();
    correct as f64 / idx.len() as f64
}

pub fn fit_logistic(
    samples: &[ProbeSample],
    tag: AstTag,
    range: PositionRange,
    seed: u64,
    config: &ProbeConfig,
) -> Result<LogisticProbe, ProbeError> {
    let positives = samples.iter().filter(|s| s.positive).count();
    if !samples.is_empty() && (positives == 0 || positives == samples.len()) {
        return Err(ProbeError::SingleClass);
    }
    if samples.len() < config.min_samples.max(2) {
        return Err(ProbeError::InsufficientData { n: samples.len(), min: config.min_samples });
    }

    let (train, test) = stratified_split(samples, config.test_fraction, seed);
    let train_samples: Vec<&ProbeSample> = train.iter().map(|&i| &samples[i]).collect();
    let scaling = Scaling::fit(&train_samples, range);
    let rows: Vec<Vec<f64>> = train_samples.iter().map(|s| scaling.row(s, config.features)).collect();
    let labels: Vec<bool> = train_samples.iter().map(|s| s.positive).collect();
    let fit = fit_irls(
        &rows,
        &labels,
        IrlsOptions { lambda: config.lambda, max_iterations: config.max_iterations, tolerance: config.tolerance },
    );
    let (weights, bias) = scaling.to_raw(&fit.coefficients, config.features);

    // Predictions are made in standardized space so that they are exactly
    // the fitted model's, independent of back-transformation rounding.
    let predict = |s: &ProbeSample| {
        let x = scaling.row(s, config.features);
        x.iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum::<f64>() >= 0.0
    };
    let train_accuracy = accuracy(predict, samples, &train);
    let test_accuracy = accuracy(predict, samples, &test);

    let mut side_counts = SideCounts::default();
    for s in samples {
        let side = if predict(s) { &mut side_counts.predicted_insecure } else { &mut side_counts.predicted_secure };
        side[usize::from(s.positive)] += 1;
    }

    let boundary = decision_boundary(weights, bias, range).filter(|b| crosses_domain(b, samples, range));

    Ok(LogisticProbe {
        tag,
        range,
        weights,
        bias,
        train_accuracy,
        test_accuracy,
        boundary,
        sample_count: samples.len(),
        train_count: train.len(),
        test_count: test.len(),
        seed,
        iterations: fit.iterations,
        converged: fit.converged,
        side_counts,
    })
}

/// True when the boundary line passes through the box spanned by the range
/// and the samples' φ extent.
fn crosses_domain(boundary: &Boundary, samples: &[ProbeSample], range: PositionRange) -> bool {
    let (phi_min, phi_max) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.phi), hi.max(s.phi)));
    let a = boundary.phi_at(range.lo as f64);
    let b = boundary.phi_at(range.hi as f64);
    let (line_lo, line_hi) = (a.min(b), a.max(b));
    line_lo <= phi_max && line_hi >= phi_min
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CellResult {
    Fitted { probe: LogisticProbe },
    InsufficientData { sample_count: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub tag: AstTag,
    pub range: PositionRange,
    pub result: CellResult,
}

impl GridCell {
    pub fn probe(&self) -> Option<&LogisticProbe> {
        match &self.result {
            CellResult::Fitted { probe } => Some(probe),
            CellResult::InsufficientData { .. } => None,
        }
    }

    pub fn sample_count(&self) -> usize {
        match &self.result {
            CellResult::Fitted { probe } => probe.sample_count,
            CellResult::InsufficientData { sample_count, .. } => *sample_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub seed: u64,
    pub config: ProbeConfig,
    pub tags: Vec<AstTag>,
    pub ranges: Vec<PositionRange>,
    pub cells: Vec<GridCell>,
}

impl ProbeGrid {
    pub fn cell(&self, tag: AstTag, range: PositionRange) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.tag == tag && c.range == range)
    }
}

/// One cell per `(tag, range)`, in tag-major order. Cells are fitted in
/// parallel; the result does not depend on the thread count.
pub fn probe_grid(
    rows: &[ShapTensorRow],
    tags: &[AstTag],
    ranges: &[PositionRange],
    seed: u64,
    config: &ProbeConfig,
) -> ProbeGrid {
    let keys: Vec<(AstTag, PositionRange)> =
        tags.iter().flat_map(|&t| ranges.iter().map(move |&r| (t, r))).collect();
    let cells = keys
        .par_iter()
        .map(|&(tag, range)| {
            let samples = gather_samples(rows, tag, range);
            let result = match fit_logistic(&samples, tag, range, seed, config) {
                Ok(probe) => CellResult::Fitted { probe },
                Err(e) => CellResult::InsufficientData { sample_count: samples.len(), reason: e.to_string() },
            };
            GridCell { tag, range, result }
        })
        .collect();
    ProbeGrid { seed, config: config.clone(), tags: tags.to_vec(), ranges: ranges.to_vec(), cells }
}

pub const GRID_CSV_HEADER: &str = "tag,lo,hi,n,train_acc,test_acc,boundary_type,boundary_values,passed_gate";

/// Grid report, one line per cell. `boundary_values` holds the midrange φ
/// threshold followed by the line coefficients `w_pos;w_phi;bias`.
pub fn grid_csv(grid: &ProbeGrid, gate: f64) -> String {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for cell in &grid.cells {
        let (lo, hi) = (cell.range.lo, cell.range.hi);
        match cell.probe() {
            Some(p) => {
                let (btype, bvals) = match &p.boundary {
                    Some(b) => (
                        "phi-threshold-at-midrange+line",
                        format!("{};{};{};{}", b.phi_threshold, b.w_pos, b.w_phi, b.bias),
                    ),
                    None => ("none", String::new()),
                };
                let _ = writeln!(
                    out,
                    "{},{lo},{hi},{},{},{},{btype},{bvals},{}",
                    cell.tag,
                    p.sample_count,
                    p.train_accuracy,
                    p.test_accuracy,
                    p.passes_gate(gate)
                );
            }
            None => {
                let _ = writeln!(out, "{},{lo},{hi},{},,,insufficient-data,,false", cell.tag, cell.sample_count());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotCell {
    pub tag: AstTag,
    pub lo: usize,
    pub hi: usize,
    /// `(position, φ, class)` triples.
    pub points: Vec<(usize, f64, ClassLabel)>,
    pub boundary: Option<Boundary>,
    pub test_accuracy: Option<f64>,
}

/// Scatter data and boundary line per cell, one JSON object per line.
pub fn plot_data_jsonl(rows: &[ShapTensorRow], grid: &ProbeGrid) -> String {
    let mut out = String::new();
    for cell in &grid.cells {
        let points = gather_samples(rows, cell.tag, cell.range)
            .into_iter()
            .map(|s| (s.position, s.phi, ClassLabel::from_positive(s.positive)))
            .collect();
        let plot = PlotCell {
            tag: cell.tag,
            lo: cell.range.lo,
            hi: cell.range.hi,
            points,
            boundary: cell.probe().and_then(|p| p.boundary),
            test_accuracy: cell.probe().map(|p| p.test_accuracy),
        };
        out.push_str(&serde_json::to_string(&plot).expect("plot cell serializes"));
        out.push('\n');
    }
    out
}
