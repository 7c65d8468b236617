//! Estimators for the text-only token log-likelihood `log p(x_t | x_<t)`.
//!
//! The captioning model only exposes image-conditional likelihoods, so the
//! marginal has to be approximated. Three estimators are available:
//!
//! - **null-image**: the conditional under a black-filled image, stored in the
//!   table under the reserved id `null`.
//! - **mc-avg-log**: the position-wise average of conditional log-probs over
//!   randomly drawn images.
//! - **mc-log-mean-exp**: the log of the position-wise (weighted) average of
//!   conditional probabilities over randomly drawn images.
//!
//! By Jensen's inequality `mc-avg-log <= mc-log-mean-exp` at every position.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::ConditionalTable;
use crate::scalar::{compensated_mean, compensated_sum, log_weighted_mean_exp, Scalar};
use crate::similarity::{ItemId, TokenLogProbs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginalMethod {
    NullImage,
    McAvgLog,
    McLogMeanExp,
}

impl MarginalMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NullImage => "null-image",
            Self::McAvgLog => "mc-avg-log",
            Self::McLogMeanExp => "mc-log-mean-exp",
        }
    }

    pub fn is_monte_carlo(self) -> bool {
        !matches!(self, Self::NullImage)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEstimate<S: Scalar = f64> {
    pub logp: TokenLogProbs<S>,
    pub method: MarginalMethod,
    pub n_samples: usize,
    pub seed: u64,
}

impl<S: Scalar> MarginalEstimate<S> {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Reads the conditional under the reserved null image verbatim.
pub fn null_marginal<S: Scalar>(
    table: &ConditionalTable<S>,
    text: &ItemId,
) -> Result<MarginalEstimate<S>> {
    let logp = table
        .conditional(&ItemId::null(), text)
        .ok_or_else(|| Error::MissingEntry(format!("no null-image entry for text `{text}`")))?;
    Ok(MarginalEstimate {
        logp: logp.clone(),
        method: MarginalMethod::NullImage,
        n_samples: 1,
        seed: 0,
    })
}

fn check_samples<S: Scalar>(samples: &[TokenLogProbs<S>]) -> Result<usize> {
    let first = samples.first().ok_or(Error::EmptySample)?;
    let len = first.len();
    if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.len() != len) {
        return Err(Error::Alignment(format!(
            "sample {i} has {} tokens, expected {len}",
            s.len()
        )));
    }
    Ok(len)
}

fn column<S: Scalar>(samples: &[TokenLogProbs<S>], t: usize) -> Vec<S> {
    samples.iter().map(|s| s.values()[t]).collect()
}

/// Position-wise mean of conditional log-probs over the sampled images.
pub fn mc_marginal_avg_log<S: Scalar>(
    samples: &[TokenLogProbs<S>],
) -> Result<MarginalEstimate<S>> {
    let len = check_samples(samples)?;
    let logp = (0..len)
        .map(|t| compensated_mean(&column(samples, t)).ok_or(Error::EmptySample))
        .collect::<Result<Vec<_>>>()?;
    Ok(MarginalEstimate {
        logp: TokenLogProbs::new(logp)?,
        method: MarginalMethod::McAvgLog,
        n_samples: samples.len(),
        seed: 0,
    })
}

/// Position-wise `log Σ_i w_i p_i(x_t | x_<t)`; uniform weights when none given.
pub fn mc_marginal_log_mean_exp<S: Scalar>(
    samples: &[TokenLogProbs<S>],
    prior_weights: Option<&[S]>,
) -> Result<MarginalEstimate<S>> {
    let len = check_samples(samples)?;
    if let Some(w) = prior_weights {
        if w.len() != samples.len() {
            return Err(Error::Weight(format!(
                "{} weights for {} samples",
                w.len(),
                samples.len()
            )));
        }
        if w.iter().any(|&x| !(x.is_finite() && x > S::zero())) {
            return Err(Error::Weight("weights must be finite and positive".into()));
        }
        let total = compensated_sum(w.iter().copied());
        if (total - S::one()).abs() > S::of(1e-9) {
            return Err(Error::Weight(format!("weights sum to {total}, expected 1")));
        }
    }
    let logp = (0..len)
        .map(|t| log_weighted_mean_exp(&column(samples, t), prior_weights).ok_or(Error::EmptySample))
        .collect::<Result<Vec<_>>>()?;
    Ok(MarginalEstimate {
        logp: TokenLogProbs::new(logp)?,
        method: MarginalMethod::McLogMeanExp,
        n_samples: samples.len(),
        seed: 0,
    })
}

/// Stream id for a caption: the first 8 bytes of its SHA-256.
fn caption_stream(caption: &ItemId) -> u64 {
    let digest = Sha256::digest(caption.as_str().as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Random image indices for one caption.
///
/// Draws without replacement when `n <= pool_len`, with replacement otherwise.
/// The generator is keyed by the master seed and a stream derived from the
/// caption id, so the draw for a caption never depends on other captions or on
/// evaluation order.
pub fn sample_image_indices(pool_len: usize, n: usize, seed: u64, caption: &ItemId) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(caption_stream(caption));
    if pool_len == 0 {
        return Vec::new();
    }
    if n <= pool_len {
        index::sample(&mut rng, pool_len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..pool_len)).collect()
    }
}

/// Estimates the marginal for `text` from table rows.
///
/// Monte-Carlo methods draw `n_samples` images from the non-null images that
/// have a conditional row for `text`.
pub fn estimate_marginal<S: Scalar>(
    table: &ConditionalTable<S>,
    text: &ItemId,
    method: MarginalMethod,
    n_samples: usize,
    seed: u64,
) -> Result<MarginalEstimate<S>> {
    if method == MarginalMethod::NullImage {
        return null_marginal(table, text);
    }
    if n_samples == 0 {
        return Err(Error::EmptySample);
    }
    let pool: Vec<&ItemId> = table.images_for_text(text).collect();
    if pool.is_empty() {
        return Err(Error::MissingEntry(format!("no image rows for text `{text}`")));
    }
    let samples: Vec<TokenLogProbs<S>> = sample_image_indices(pool.len(), n_samples, seed, text)
        .into_iter()
        .map(|i| {
            table
                .conditional(pool[i], text)
                .cloned()
                .expect("pool built from present rows")
        })
        .collect();
    let est = match method {
        MarginalMethod::McAvgLog => mc_marginal_avg_log(&samples)?,
        MarginalMethod::McLogMeanExp => mc_marginal_log_mean_exp(&samples, None)?,
        MarginalMethod::NullImage => unreachable!(),
    };
    Ok(est.with_seed(seed))
}
