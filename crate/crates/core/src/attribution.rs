//! Per-token Shapley values of the positive-class probability.
//!
//! A coalition `S` is realized by masking every token outside `S` with the
//! sentinel lexeme, and the value of `S` is the predictor's output on that
//! masked sequence. Inputs of up to `exact_limit` tokens are enumerated over
//! all `2^n` coalitions; longer inputs use antithetic permutation sampling.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{BaselineExpectation, MaskPattern, Predictor, PredictorError, DEFAULT_MASK_TOKEN};

pub const DEFAULT_EXACT_LIMIT: usize = 14;
pub const DEFAULT_SAMPLES: usize = 64;

/// Upper bound on masks sent in a single batch call.
const BATCH_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("{n} tokens exceed the exact-enumeration limit of {limit}")]
    TooManyTokens { n: usize, limit: usize },
    #[error("sample count must be even and >= 2, got {0}")]
    InvalidSampleCount(usize),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapMethod {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapVector {
    pub snippet_id: String,
    pub phis: Vec<f64>,
    pub method: ShapMethod,
    pub sample_count: usize,
    pub seed: u64,
    pub f_full: f64,
    pub f_empty: f64,
    /// `E[f(X)]` over the reference corpus, once attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
}

impl ShapVector {
    /// `|Σφ − (f(full) − f(empty))|`
    pub fn efficiency_gap(&self) -> f64 {
        (self.phis.iter().sum::<f64>() - (self.f_full - self.f_empty)).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub exact_limit: usize,
    pub samples: usize,
    pub mask_token: String,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            exact_limit: DEFAULT_EXACT_LIMIT,
            samples: DEFAULT_SAMPLES,
            mask_token: DEFAULT_MASK_TOKEN.to_string(),
        }
    }
}

/// Exact Shapley values by enumeration of all coalitions.
pub fn shap_exact<P: Predictor + ?Sized>(
    snippet_id: &str,
    tokens: &[String],
    predictor: &P,
    mask_token: &str,
    exact_limit: usize,
) -> Result<ShapVector, AttributionError> {
    let n = tokens.len();
    if n > exact_limit || n >= 63 {
        return Err(AttributionError::TooManyTokens { n, limit: exact_limit });
    }
    let total = 1usize << n;
    let mut values = Vec::with_capacity(total);
    for start in (0..total).step_by(BATCH_CHUNK) {
        let end = (start + BATCH_CHUNK).min(total);
        let masks: Vec<_> = (start..end).map(|bits| MaskPattern::from_u64(bits as u64, n)).collect();
        let batch = predictor.predict_batch(tokens, &masks, mask_token)?;
        values.extend(batch.into_iter().map(|p| p.p_positive()));
    }

    // weight[s] = s! (n - s - 1)! / n!
    let factorial: Vec<f64> = std::iter::once(1.0)
        .chain((1..=n).scan(1.0, |acc, k| {
            *acc *= k as f64;
            Some(*acc)
        }))
        .collect();
    let weight: Vec<f64> = (0..n).map(|s| factorial[s] * factorial[n - s - 1] / factorial[n]).collect();

    let mut phis = vec![0.0; n];
    for (i, phi) in phis.iter_mut().enumerate() {
        let bit = 1usize << i;
        for coalition in (0..total).filter(|s| s & bit == 0) {
            let size = coalition.count_ones() as usize;
            *phi += weight[size] * (values[coalition | bit] - values[coalition]);
        }
    }
    Ok(ShapVector {
        snippet_id: snippet_id.to_string(),
        phis,
        method: ShapMethod::Exact,
        sample_count: 0,
        seed: 0,
        f_full: values[total - 1],
        f_empty: values[0],
        reference: None,
    })
}

/// Permutation-sampling estimate from `m` permutations: `m / 2` seeded
/// uniform draws, each paired with its reverse.
pub fn shap_sampled<P: Predictor + ?Sized>(
    snippet_id: &str,
    tokens: &[String],
    predictor: &P,
    mask_token: &str,
    m: usize,
    seed: u64,
) -> Result<ShapVector, AttributionError> {
    if m < 2 || m % 2 != 0 {
        return Err(AttributionError::InvalidSampleCount(m));
    }
    let n = tokens.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut memo: HashMap<MaskPattern, f64> = HashMap::new();
    let mut sums = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..m / 2 {
        order.shuffle(&mut rng);
        let forward = order.clone();
        let reverse: Vec<usize> = order.iter().rev().copied().collect();
        for perm in [forward, reverse] {
            let values = prefix_values(tokens, &perm, predictor, mask_token, &mut memo)?;
            for (k, &i) in perm.iter().enumerate() {
                sums[i] += values[k + 1] - values[k];
            }
        }
    }

    let f_empty = memo_value(tokens, MaskPattern::empty(n), predictor, mask_token, &mut memo)?;
    let f_full = memo_value(tokens, MaskPattern::full(n), predictor, mask_token, &mut memo)?;
    Ok(ShapVector {
        snippet_id: snippet_id.to_string(),
        phis: sums.into_iter().map(|s| s / m as f64).collect(),
        method: ShapMethod::Sampled,
        sample_count: m,
        seed,
        f_full,
        f_empty,
        reference: None,
    })
}

/// Values of the `n + 1` growing prefixes of `perm`, served from `memo`
/// where possible and batched otherwise.
fn prefix_values<P: Predictor + ?Sized>(
    tokens: &[String],
    perm: &[usize],
    predictor: &P,
    mask_token: &str,
    memo: &mut HashMap<MaskPattern, f64>,
) -> Result<Vec<f64>, AttributionError> {
    let n = tokens.len();
    let mut masks = Vec::with_capacity(n + 1);
    let mut mask = MaskPattern::empty(n);
    masks.push(mask.clone());
    for &i in perm {
        mask.set(i, true);
        masks.push(mask.clone());
    }
    let missing: Vec<MaskPattern> = masks.iter().filter(|m| !memo.contains_key(*m)).cloned().collect();
    if !missing.is_empty() {
        let scored = predictor.predict_batch(tokens, &missing, mask_token)?;
        for (m, p) in missing.into_iter().zip(scored) {
            memo.insert(m, p.p_positive());
        }
    }
    Ok(masks.iter().map(|m| memo[m]).collect())
}

fn memo_value<P: Predictor + ?Sized>(
    tokens: &[String],
    mask: MaskPattern,
    predictor: &P,
    mask_token: &str,
    memo: &mut HashMap<MaskPattern, f64>,
) -> Result<f64, AttributionError> {
    if let Some(&v) = memo.get(&mask) {
        return Ok(v);
    }
    let v = predictor.predict(tokens, &mask, mask_token)?.p_positive();
    memo.insert(mask, v);
    Ok(v)
}

/// Exact enumeration when the input is short enough, sampling otherwise.
pub fn shap_auto<P: Predictor + ?Sized>(
    snippet_id: &str,
    tokens: &[String],
    predictor: &P,
    config: &AttributionConfig,
    seed: u64,
) -> Result<ShapVector, AttributionError> {
    if tokens.len() <= config.exact_limit {
        shap_exact(snippet_id, tokens, predictor, &config.mask_token, config.exact_limit)
    } else {
        shap_sampled(snippet_id, tokens, predictor, &config.mask_token, config.samples, seed)
    }
}

/// Anchors `v` to the corpus-level expected prediction. The per-token values
/// are left untouched.
pub fn relative_to_expectation(mut v: ShapVector, baseline: &BaselineExpectation) -> ShapVector {
    v.reference = Some(baseline.value);
    v
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::predictor::{ClassProbability, ToyLinear, ToyLogit};

    fn toks(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    struct Constant;

    impl Predictor for Constant {
        fn name(&self) -> &str {
            "constant"
        }

        fn predict(&self, _: &[String], _: &MaskPattern, _: &str) -> Result<ClassProbability, PredictorError> {
            ClassProbability::new(0.42)
        }
    }

    #[test]
    fn linear_coefficients_recovered() {
        let model = ToyLinear::new(vec![0.2, 0.1, 0.3]);
        let v = shap_exact("s", &toks(3), &model, "<mask>", 14).unwrap();
        for (phi, c) in v.phis.iter().zip([0.2, 0.1, 0.3]) {
            assert!((phi - c).abs() < 1e-12, "{phi} vs {c}");
        }
    }

    #[test]
    fn single_token_collapses_to_difference() {
        let model = ToyLogit::new(BTreeMap::from([("t0".to_string(), 1.5)]), -0.3);
        let v = shap_exact("s", &toks(1), &model, "<mask>", 14).unwrap();
        let on = model.predict(&toks(1), &MaskPattern::full(1), "<mask>").unwrap().p_positive();
        let off = model.predict(&toks(1), &MaskPattern::empty(1), "<mask>").unwrap().p_positive();
        assert_eq!(v.phis, vec![on - off]);
    }

    #[test]
    fn symmetric_tokens_share_value_and_dummy_is_zero() {
        let markers = BTreeMap::from([("a".to_string(), 0.8), ("b".to_string(), 0.8)]);
        let model = ToyLogit::new(markers, -0.5);
        let tokens: Vec<String> = ["a", "b", "zzz"].map(String::from).to_vec();
        let v = shap_exact("s", &tokens, &model, "<mask>", 14).unwrap();
        assert!((v.phis[0] - v.phis[1]).abs() < 1e-15);
        assert_eq!(v.phis[2], 0.0);
        assert!(v.efficiency_gap() < 1e-12);
    }

    #[test]
    fn exact_limit_enforced() {
        let model = ToyLinear::new(vec![]);
        let err = shap_exact("s", &toks(15), &model, "<mask>", 14).unwrap_err();
        assert!(matches!(err, AttributionError::TooManyTokens { n: 15, limit: 14 }));
    }

    #[test]
    fn sample_count_validated() {
        let model = ToyLinear::new(vec![]);
        for m in [0, 1, 3] {
            assert!(matches!(
                shap_sampled("s", &toks(3), &model, "<mask>", m, 1),
                Err(AttributionError::InvalidSampleCount(_))
            ));
        }
    }

    #[test]
    fn constant_predictor_gives_zeros() {
        let v = shap_sampled("s", &toks(20), &Constant, "<mask>", 10, 5).unwrap();
        assert!(v.phis.iter().all(|&p| p == 0.0));
        let v = shap_exact("s", &toks(5), &Constant, "<mask>", 14).unwrap();
        assert!(v.phis.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn sampled_is_seeded_and_efficient() {
        let markers = BTreeMap::from([("t1".to_string(), 1.0), ("t4".to_string(), -2.0)]);
        let model = ToyLogit::new(markers, 0.2);
        let a = shap_sampled("s", &toks(30), &model, "<mask>", 40, 11).unwrap();
        let b = shap_sampled("s", &toks(30), &model, "<mask>", 40, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.efficiency_gap() < 1e-9);
        let c = shap_sampled("s", &toks(30), &model, "<mask>", 40, 12).unwrap();
        assert_eq!(c.seed, 12);
        assert_eq!(c.sample_count, 40);
    }

    #[test]
    fn auto_switches_on_limit() {
        let model = ToyLinear::new(vec![0.01; 20]);
        let cfg = AttributionConfig { exact_limit: 5, samples: 4, ..Default::default() };
        assert_eq!(shap_auto("s", &toks(5), &model, &cfg, 0).unwrap().method, ShapMethod::Exact);
        assert_eq!(shap_auto("s", &toks(6), &model, &cfg, 0).unwrap().method, ShapMethod::Sampled);
    }

    #[test]
    fn reference_is_metadata_only() {
        let model = ToyLinear::new(vec![0.2, 0.3]);
        let v = shap_exact("s", &toks(2), &model, "<mask>", 14).unwrap();
        let anchored = relative_to_expectation(v.clone(), &BaselineExpectation { value: 0.5, reference_size: 3 });
        assert_eq!(anchored.phis, v.phis);
        assert_eq!(anchored.f_full, v.f_full);
        assert_eq!(anchored.f_empty, v.f_empty);
        assert_eq!(anchored.reference, Some(0.5));
        let json = serde_json::to_string(&anchored).unwrap();
        let back: ShapVector = serde_json::from_str(&json).unwrap();
        assert_eq!(back, anchored);
    }
}
