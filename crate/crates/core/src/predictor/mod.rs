//! Black-box classifier abstraction over (possibly masked) token sequences.
//!
//! Masked positions are replaced by a sentinel lexeme rather than deleted, so
//! token positions are preserved for every coalition the attribution step
//! evaluates.

mod remote;
mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::{PredictorInfo, RemoteOptions, RemotePredictor};
pub use toy::{Flawed, ToyLinear, ToyLogit};

use crate::lexing::ClassLabel;

pub const DEFAULT_MASK_TOKEN: &str = "<mask>";

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("mask length {mask} does not match token count {tokens}")]
    MaskLength { tokens: usize, mask: usize },
    #[error("predictor unavailable: {0}")]
    PredictorUnavailable(String),
    #[error("predictor protocol error: {0}")]
    ProtocolError(String),
    #[error("cannot average over an empty corpus")]
    EmptyCorpus,
}

/// Which tokens are present (`true`) and which are replaced by the sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskPattern(Vec<bool>);

impl MaskPattern {
    pub fn full(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn empty(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Low `n` bits of `bits`, bit `i` controlling token `i`.
    pub fn from_u64(bits: u64, n: usize) -> Self {
        Self((0..n).map(|i| bits >> i & 1 == 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_included(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, included: bool) {
        self.0[i] = included;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_included(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn to_wire(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }
}

/// Probability of the positive (`insecure`) class.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ClassProbability(f64);

impl ClassProbability {
    pub fn new(p_positive: f64) -> Result<Self, PredictorError> {
        if (0.0..=1.0).contains(&p_positive) {
            Ok(Self(p_positive))
        } else {
            Err(PredictorError::ProtocolError(format!("probability {p_positive} outside [0, 1]")))
        }
    }

    pub fn p_positive(self) -> f64 {
        self.0
    }

    /// max(p, 1 - p)
    pub fn confidence(self) -> f64 {
        self.0.max(1.0 - self.0)
    }

    pub fn predicted_class(self) -> ClassLabel {
        ClassLabel::from_positive(self.0 >= 0.5)
    }
}

/// Mean unmasked prediction over a reference set, `E[f(X)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineExpectation {
    pub value: f64,
    pub reference_size: usize,
}

pub trait Predictor: Send + Sync {
    fn name(&self) -> &str;

    fn predict(
        &self,
        tokens: &[String],
        mask: &MaskPattern,
        mask_token: &str,
    ) -> Result<ClassProbability, PredictorError>;

    /// Scores many masks over the same token sequence; replies follow mask order.
    fn predict_batch(
        &self,
        tokens: &[String],
        masks: &[MaskPattern],
        mask_token: &str,
    ) -> Result<Vec<ClassProbability>, PredictorError> {
        masks.iter().map(|m| self.predict(tokens, m, mask_token)).collect()
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn predict(
        &self,
        tokens: &[String],
        mask: &MaskPattern,
        mask_token: &str,
    ) -> Result<ClassProbability, PredictorError> {
        (**self).predict(tokens, mask, mask_token)
    }

    fn predict_batch(
        &self,
        tokens: &[String],
        masks: &[MaskPattern],
        mask_token: &str,
    ) -> Result<Vec<ClassProbability>, PredictorError> {
        (**self).predict_batch(tokens, masks, mask_token)
    }
}

pub(crate) fn check_mask(tokens: &[String], mask: &MaskPattern) -> Result<(), PredictorError> {
    if tokens.len() != mask.len() {
        return Err(PredictorError::MaskLength { tokens: tokens.len(), mask: mask.len() });
    }
    Ok(())
}

/// The lexeme sequence the model actually sees under `mask`.
pub fn apply_mask<'a>(tokens: &'a [String], mask: &MaskPattern, mask_token: &'a str) -> Vec<&'a str> {
    tokens
        .iter()
        .zip(mask.bits())
        .map(|(t, &keep)| if keep { t.as_str() } else { mask_token })
        .collect()
}

pub fn predict_unmasked<P: Predictor + ?Sized>(
    predictor: &P,
    tokens: &[String],
    mask_token: &str,
) -> Result<ClassProbability, PredictorError> {
    predictor.predict(tokens, &MaskPattern::full(tokens.len()), mask_token)
}

/// Arithmetic mean of unmasked predictions over `corpus`.
pub fn baseline_expectation<P: Predictor + ?Sized>(
    corpus: &[Vec<String>],
    predictor: &P,
    mask_token: &str,
) -> Result<BaselineExpectation, PredictorError> {
    if corpus.is_empty() {
        return Err(PredictorError::EmptyCorpus);
    }
    let mut sum = 0.0;
    for tokens in corpus {
        sum += predict_unmasked(predictor, tokens, mask_token)?.p_positive();
    }
    Ok(BaselineExpectation { value: sum / corpus.len() as f64, reference_size: corpus.len() })
}
