//! Image-text similarity functions and the value types they operate on.
//!
//! Four scores are provided:
//!
//! | Function | Input | Scale |
//! |----------|-------|-------|
//! | [`itc_score`] | image and text embeddings | cosine in `[-1, 1]` |
//! | [`itm_score`] / [`itm_score_vqa`] | classifier logit or yes/no log-probs | probability |
//! | [`tl_score`] | conditional token log-probs | mean probability or mean log-prob |
//! | [`mass_score`] | conditional and marginal token log-probs | mean log-ratio |
//!
//! The association score subtracts the text-only (marginal) log-likelihood of
//! every token from its image-conditional log-likelihood, so captions that are
//! merely likely as language no longer outrank captions that match the image.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{compensated_mean, compensated_sum, sigmoid, Scalar};

/// Slack above zero tolerated in log-probabilities coming from adapters.
pub const LOGP_TOLERANCE: f64 = 1e-6;

/// Reserved image id standing for the black-filled null image.
pub const NULL_IMAGE: &str = "null";

/// Opaque, non-empty identifier of an image or a caption.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ItemId(String);

impl ItemId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidInput("item id must be non-empty".into()));
        }
        Ok(Self(id))
    }

    pub fn null() -> Self {
        Self(NULL_IMAGE.to_owned())
    }

    pub fn is_null(&self) -> bool {
        self.0 == NULL_IMAGE
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ItemId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ItemId> for String {
    fn from(value: ItemId) -> Self {
        value.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for ItemId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Dense embedding with finite entries and non-zero norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<S: Scalar = f64> {
    values: Vec<S>,
}

impl<S: Scalar> EmbeddingVector<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DegenerateVector("embedding has dimension 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding has non-finite entry".into()));
        }
        let v = Self { values };
        if v.norm() == S::zero() {
            return Err(Error::DegenerateVector("embedding has zero norm".into()));
        }
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// Euclidean norm, scaled by the largest magnitude to avoid overflow.
    pub fn norm(&self) -> S {
        let scale = self.values.iter().fold(S::zero(), |m, v| m.max(v.abs()));
        if scale == S::zero() {
            return S::zero();
        }
        let ss = compensated_sum(self.values.iter().map(|&v| (v / scale) * (v / scale)));
        scale * ss.sqrt()
    }
}

/// Pre-sigmoid output of an image-text matching classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItmLogit<S: Scalar = f64>(pub S);

/// Yes/no answer log-probabilities from a generation head asked whether the
/// caption matches the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqaYesNoLogProbs<S: Scalar = f64> {
    pub logp_yes: S,
    pub logp_no: S,
}

/// Pre-tokenized caption; never re-tokenized by the engine.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.iter().any(String::is_empty) {
            return Err(Error::InvalidInput("token strings must be non-empty".into()));
        }
        Ok(Self { tokens })
    }

    pub fn from_strs(tokens: &[&str]) -> Result<Self> {
        Self::new(tokens.iter().map(|t| (*t).to_owned()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for TokenSequence {
    type Error = Error;

    fn try_from(value: Vec<String>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<TokenSequence> for Vec<String> {
    fn from(value: TokenSequence) -> Self {
        value.tokens
    }
}

/// Per-token log-likelihoods `log p(x_t | x_<t, c)` for one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProbs<S: Scalar = f64> {
    logp: Vec<S>,
}

impl<S: Scalar> TokenLogProbs<S> {
    /// Validates finiteness, non-emptiness and the `<= 0 + 1e-6` bound.
    pub fn new(logp: Vec<S>) -> Result<Self> {
        if logp.is_empty() {
            return Err(Error::EmptySequence);
        }
        for (t, &v) in logp.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("log-prob at position {t} is not finite")));
            }
            if v > S::of(LOGP_TOLERANCE) {
                return Err(Error::InvalidInput(format!(
                    "log-prob at position {t} is positive ({v})"
                )));
            }
        }
        Ok(Self { logp })
    }

    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.logp
    }

    /// Sequence log-likelihood `Σ_t logp_t`.
    pub fn total(&self) -> S {
        compensated_sum(self.logp.iter().copied())
    }

    pub fn into_values(self) -> Vec<S> {
        self.logp
    }
}

/// Unit attached to a score so downstream consumers never mix scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScale {
    Cosine,
    Probability,
    ProbMean,
    LogprobMean,
    LogratioMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreValue<S: Scalar = f64> {
    pub value: S,
    pub scale: ScoreScale,
}

/// Aggregation used by [`tl_score`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TlMode {
    /// Mean of token probabilities.
    ProbMean,
    /// Mean of token log-probabilities.
    LogprobMean,
}

impl TlMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ProbMean => "prob-mean",
            Self::LogprobMean => "logprob-mean",
        }
    }
}

/// Cosine similarity between an image and a text embedding.
pub fn itc_score<S: Scalar>(
    image_emb: &EmbeddingVector<S>,
    text_emb: &EmbeddingVector<S>,
) -> Result<ScoreValue<S>> {
    if image_emb.dim() != text_emb.dim() {
        return Err(Error::Dimension {
            left: image_emb.dim(),
            right: text_emb.dim(),
        });
    }
    let (nu, nv) = (image_emb.norm(), text_emb.norm());
    if nu == S::zero() || nv == S::zero() {
        return Err(Error::DegenerateVector("zero-norm embedding".into()));
    }
    let dot = compensated_sum(
        image_emb
            .values()
            .iter()
            .zip(text_emb.values())
            .map(|(&a, &b)| (a / nu) * (b / nv)),
    );
    Ok(ScoreValue {
        value: dot.max(-S::one()).min(S::one()),
        scale: ScoreScale::Cosine,
    })
}

/// Matching probability `sigmoid(z)` from a classifier logit.
pub fn itm_score<S: Scalar>(logit: ItmLogit<S>) -> Result<ScoreValue<S>> {
    if !logit.0.is_finite() {
        return Err(Error::InvalidInput("ITM logit is not finite".into()));
    }
    Ok(ScoreValue {
        value: sigmoid(logit.0),
        scale: ScoreScale::Probability,
    })
}

/// `p(yes) / (p(yes) + p(no))`, evaluated as `sigmoid(lp_yes - lp_no)`.
pub fn itm_score_vqa<S: Scalar>(lp: VqaYesNoLogProbs<S>) -> Result<ScoreValue<S>> {
    let tol = S::of(LOGP_TOLERANCE);
    for (name, v) in [("yes", lp.logp_yes), ("no", lp.logp_no)] {
        if !v.is_finite() || v > tol {
            return Err(Error::InvalidInput(format!(
                "{name} log-prob must be finite and <= 0, got {v}"
            )));
        }
    }
    Ok(ScoreValue {
        value: sigmoid(lp.logp_yes - lp.logp_no),
        scale: ScoreScale::Probability,
    })
}

/// Token-likelihood score: mean token probability or mean token log-probability.
pub fn tl_score<S: Scalar>(cond: &TokenLogProbs<S>, mode: TlMode) -> Result<ScoreValue<S>> {
    let value = match mode {
        TlMode::ProbMean => {
            let probs: Vec<S> = cond.values().iter().map(|v| v.exp()).collect();
            compensated_mean(&probs)
        }
        TlMode::LogprobMean => compensated_mean(cond.values()),
    }
    .ok_or(Error::EmptySequence)?;
    let scale = match mode {
        TlMode::ProbMean => ScoreScale::ProbMean,
        TlMode::LogprobMean => ScoreScale::LogprobMean,
    };
    Ok(ScoreValue { value, scale })
}

fn check_aligned<S: Scalar>(cond: &TokenLogProbs<S>, marginal: &TokenLogProbs<S>) -> Result<()> {
    if cond.len() != marginal.len() {
        return Err(Error::Alignment(format!(
            "conditional has {} tokens, marginal has {}",
            cond.len(),
            marginal.len()
        )));
    }
    Ok(())
}

/// Mean per-token pointwise mutual information between image and caption.
pub fn mass_score<S: Scalar>(
    cond: &TokenLogProbs<S>,
    marginal: &TokenLogProbs<S>,
) -> Result<ScoreValue<S>> {
    check_aligned(cond, marginal)?;
    let ratios: Vec<S> = cond
        .values()
        .iter()
        .zip(marginal.values())
        .map(|(&c, &m)| c - m)
        .collect();
    let value = compensated_mean(&ratios).ok_or(Error::EmptySequence)?;
    Ok(ScoreValue {
        value,
        scale: ScoreScale::LogratioMean,
    })
}

/// Splits the conditional log-likelihood into its linguistic part
/// `Σ log p(x_t|x_<t)` and its association part `Σ log p(x_t|x_<t,c)/p(x_t|x_<t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikDecomposition<S: Scalar = f64> {
    pub linguistic: S,
    pub association: S,
}

pub fn decompose_loglik<S: Scalar>(
    cond: &TokenLogProbs<S>,
    marginal: &TokenLogProbs<S>,
) -> Result<LogLikDecomposition<S>> {
    check_aligned(cond, marginal)?;
    let linguistic = marginal.total();
    let association = compensated_sum(
        cond.values()
            .iter()
            .zip(marginal.values())
            .map(|(&c, &m)| c - m),
    );
    Ok(LogLikDecomposition {
        linguistic,
        association,
    })
}
