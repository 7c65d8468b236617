//! Image-text matching scores with language-prior correction, exact toy-model
//! oracles, two-stage retrieval and evaluation metrics.

pub mod adapter;
pub mod error;
pub mod io;
pub mod lexicon;
pub mod marginal;
pub mod metrics;
pub mod oracle;
pub mod retrieval;
pub mod scalar;
pub mod scoring;
pub mod similarity;

pub use error::{Error, Result, TableErrorKind};
pub use marginal::{MarginalEstimate, MarginalMethod};
pub use scalar::Scalar;
pub use similarity::{
    EmbeddingVector, ItemId, ItmLogit, ScoreScale, ScoreValue, TlMode, TokenLogProbs,
    TokenSequence, VqaYesNoLogProbs,
};

pub type EmbeddingVectorF32 = EmbeddingVector<f32>;
pub type EmbeddingVectorF64 = EmbeddingVector<f64>;
pub type TokenLogProbsF32 = TokenLogProbs<f32>;
pub type TokenLogProbsF64 = TokenLogProbs<f64>;
pub type ScoreMatrixF32 = retrieval::ScoreMatrix<f32>;
pub type ScoreMatrixF64 = retrieval::ScoreMatrix<f64>;
pub type ConditionalTableF32 = io::ConditionalTable<f32>;
pub type ConditionalTableF64 = io::ConditionalTable<f64>;
