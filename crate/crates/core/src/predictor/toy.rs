use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{check_mask, ClassProbability, MaskPattern, Predictor, PredictorError};

/// `σ(bias + Σ w(lexeme))` over the lexemes visible after masking.
///
/// Lexemes absent from `markers` weigh zero, as does the sentinel unless it is
/// itself listed.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLogit {
    name: String,
    markers: BTreeMap<String, f64>,
    bias: f64,
}

impl ToyLogit {
    pub fn new(markers: BTreeMap<String, f64>, bias: f64) -> Self {
        let name = format!("toy-logit:{:016x}", params_digest(&markers, bias));
        Self { name, markers, bias }
    }

    pub fn markers(&self) -> &BTreeMap<String, f64> {
        &self.markers
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    fn weight(&self, lexeme: &str) -> f64 {
        self.markers.get(lexeme).copied().unwrap_or(0.0)
    }

    fn score(&self, weights: &[f64], sentinel: f64, mask: &MaskPattern) -> f64 {
        let mut z = self.bias;
        for (w, &keep) in weights.iter().zip(mask.bits()) {
            z += if keep { *w } else { sentinel };
        }
        sigmoid(z)
    }
}

impl Predictor for ToyLogit {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(
        &self,
        tokens: &[String],
        mask: &MaskPattern,
        mask_token: &str,
    ) -> Result<ClassProbability, PredictorError> {
        self.predict_batch(tokens, std::slice::from_ref(mask), mask_token)
            .map(|mut v| v.remove(0))
    }

    fn predict_batch(
        &self,
        tokens: &[String],
        masks: &[MaskPattern],
        mask_token: &str,
    ) -> Result<Vec<ClassProbability>, PredictorError> {
        let weights: Vec<f64> = tokens.iter().map(|t| self.weight(t)).collect();
        let sentinel = self.weight(mask_token);
        masks
            .iter()
            .map(|mask| {
                check_mask(tokens, mask)?;
                ClassProbability::new(self.score(&weights, sentinel, mask))
            })
            .collect()
    }
}

/// `clamp(Σ c_i · included_i, 0, 1)`; positions past the coefficient list weigh zero.
///
/// When the clamp is inactive on every coalition the Shapley value of token
/// `i` is exactly `c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLinear {
    name: String,
    coefficients: Vec<f64>,
}

impl ToyLinear {
    pub fn new(coefficients: Vec<f64>) -> Self {
        let mut h = Sha256::new();
        for c in &coefficients {
            h.update(c.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        let name = format!("toy-linear:{}", hex::encode(&digest[..8]));
        Self { name, coefficients }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
}

impl Predictor for ToyLinear {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(
        &self,
        tokens: &[String],
        mask: &MaskPattern,
        _mask_token: &str,
    ) -> Result<ClassProbability, PredictorError> {
        check_mask(tokens, mask)?;
        let mut sum = 0.0;
        for (c, &keep) in self.coefficients.iter().zip(mask.bits()) {
            if keep {
                sum += c;
            }
        }
        ClassProbability::new(sum.clamp(0.0, 1.0))
    }
}

/// Wraps a predictor and inverts its output on a seeded fraction of the
/// inputs it is unsure about (full-context confidence below `tau`).
///
/// Whether an input is corrupted depends only on its token sequence, so
/// every coalition of one snippet is scored consistently.
#[derive(Debug, Clone)]
pub struct Flawed<P> {
    inner: P,
    name: String,
    tau: f64,
    flip_rate: f64,
    seed: u64,
}

impl<P: Predictor> Flawed<P> {
    pub fn new(inner: P, tau: f64, flip_rate: f64, seed: u64) -> Self {
        let name = format!("flawed({})[tau={tau},rate={flip_rate},seed={seed}]", inner.name());
        Self { inner, name, tau, flip_rate, seed }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    /// True when `tokens` fall in the corrupted subset.
    pub fn is_corrupted(&self, tokens: &[String], mask_token: &str) -> Result<bool, PredictorError> {
        let base = self.inner.predict(tokens, &MaskPattern::full(tokens.len()), mask_token)?;
        Ok(base.confidence() < self.tau && unit_hash(self.seed, tokens) < self.flip_rate)
    }
}

impl<P: Predictor> Predictor for Flawed<P> {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(
        &self,
        tokens: &[String],
        mask: &MaskPattern,
        mask_token: &str,
    ) -> Result<ClassProbability, PredictorError> {
        self.predict_batch(tokens, std::slice::from_ref(mask), mask_token)
            .map(|mut v| v.remove(0))
    }

    fn predict_batch(
        &self,
        tokens: &[String],
        masks: &[MaskPattern],
        mask_token: &str,
    ) -> Result<Vec<ClassProbability>, PredictorError> {
        let corrupted = self.is_corrupted(tokens, mask_token)?;
        let out = self.inner.predict_batch(tokens, masks, mask_token)?;
        if !corrupted {
            return Ok(out);
        }
        out.into_iter().map(|p| ClassProbability::new(1.0 - p.p_positive())).collect()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn params_digest(markers: &BTreeMap<String, f64>, bias: f64) -> u64 {
    let mut h = Sha256::new();
    h.update(bias.to_bits().to_le_bytes());
    for (k, v) in markers {
        h.update(k.as_bytes());
        h.update([0u8]);
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Uniform value in [0, 1) derived from `(seed, tokens)`.
fn unit_hash(seed: u64, tokens: &[String]) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tokens {
        h.update(t.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    let x = u64::from_le_bytes(digest[..8].try_into().unwrap());
    (x >> 11) as f64 / (1u64 << 53) as f64
}
