//! Applies a configured similarity to (image, text) pairs of a table.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ConditionalTable, ItmEntry, PairScores};
use crate::marginal::{estimate_marginal, MarginalMethod};
use crate::similarity::{
    itc_score, itm_score, itm_score_vqa, mass_score, tl_score, ItemId, TlMode, TokenLogProbs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Itc,
    Itm,
    ItmVqa,
    Tl,
    Mass,
}

impl Similarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Itc => "itc",
            Self::Itm => "itm",
            Self::ItmVqa => "itm-vqa",
            Self::Tl => "tl",
            Self::Mass => "mass",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringConfig {
    pub similarity: Similarity,
    pub tl_mode: TlMode,
    pub marginal: MarginalMethod,
    pub mc_n: Option<usize>,
    pub seed: u64,
}

impl ScoringConfig {
    pub fn new(similarity: Similarity) -> Self {
        Self {
            similarity,
            tl_mode: TlMode::ProbMean,
            marginal: MarginalMethod::NullImage,
            mc_n: None,
            seed: 0,
        }
    }

    /// `mc_n` is required exactly when the marginal method samples images.
    pub fn validate(&self) -> Result<()> {
        match (self.marginal.is_monte_carlo(), self.mc_n) {
            (true, None) => Err(Error::InvalidInput(format!(
                "marginal {} needs a sample count",
                self.marginal.as_str()
            ))),
            (true, Some(0)) => Err(Error::InvalidInput("sample count must be positive".into())),
            (false, Some(_)) => Err(Error::InvalidInput(
                "a sample count only applies to Monte-Carlo marginals".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Every pair the table can score under `similarity`, sorted.
pub fn default_pairs(table: &ConditionalTable, similarity: Similarity) -> Vec<(ItemId, ItemId)> {
    match similarity {
        Similarity::Itc => {
            let texts: Vec<&ItemId> = table.text_embedding_ids().collect();
            table
                .image_embedding_ids()
                .flat_map(|i| texts.iter().map(move |t| (i.clone(), (*t).clone())))
                .collect()
        }
        Similarity::Itm | Similarity::ItmVqa => table
            .itm_pairs()
            .filter(|(i, _)| !i.is_null())
            .map(|(i, t)| (i.clone(), t.clone()))
            .collect(),
        Similarity::Tl | Similarity::Mass => table
            .entries()
            .filter(|(i, _, _)| !i.is_null())
            .map(|(i, t, _)| (i.clone(), t.clone()))
            .collect(),
    }
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Per-text marginals for MASS, computed in parallel; the first failure in
/// `texts` order is reported.
pub fn marginals_for(
    table: &ConditionalTable,
    texts: &[ItemId],
    config: &ScoringConfig,
) -> Result<BTreeMap<ItemId, TokenLogProbs>> {
    let n = config.mc_n.unwrap_or(1);
    let results: Vec<Result<(ItemId, TokenLogProbs)>> = texts
        .par_iter()
        .map(|t| {
            estimate_marginal(table, t, config.marginal, n, config.seed).map(|m| (t.clone(), m.logp))
        })
        .collect();
    Ok(first_error(results)?.into_iter().collect())
}

fn missing(what: &str, image: &ItemId, text: &ItemId) -> Error {
    Error::MissingEntry(format!("no {what} for ({image}, {text})"))
}

/// Scores `pairs` with the configured similarity.
pub fn score_pairs(
    table: &ConditionalTable,
    pairs: &[(ItemId, ItemId)],
    config: &ScoringConfig,
) -> Result<PairScores> {
    config.validate()?;
    let marginals = if config.similarity == Similarity::Mass {
        let mut texts: Vec<ItemId> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (_, t) in pairs {
            if seen.insert(t) {
                texts.push(t.clone());
            }
        }
        marginals_for(table, &texts, config)?
    } else {
        BTreeMap::new()
    };

    let results: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|(image, text)| {
            let value = match config.similarity {
                Similarity::Itc => {
                    let u = table
                        .image_embedding(image)
                        .ok_or_else(|| missing("image embedding", image, text))?;
                    let v = table
                        .text_embedding(text)
                        .ok_or_else(|| missing("text embedding", image, text))?;
                    itc_score(u, v)?
                }
                Similarity::Itm => match table.itm(image, text) {
                    Some(ItmEntry::Logit(l)) => itm_score(*l)?,
                    Some(ItmEntry::Vqa(_)) => {
                        return Err(Error::InvalidInput(format!(
                            "({image}, {text}) has yes/no log-probs, not an ITM logit"
                        )))
                    }
                    None => return Err(missing("ITM logit", image, text)),
                },
                Similarity::ItmVqa => match table.itm(image, text) {
                    Some(ItmEntry::Vqa(v)) => itm_score_vqa(*v)?,
                    Some(ItmEntry::Logit(_)) => {
                        return Err(Error::InvalidInput(format!(
                            "({image}, {text}) has an ITM logit, not yes/no log-probs"
                        )))
                    }
                    None => return Err(missing("yes/no log-probs", image, text)),
                },
                Similarity::Tl => {
                    let cond = table
                        .conditional(image, text)
                        .ok_or_else(|| missing("conditional row", image, text))?;
                    tl_score(cond, config.tl_mode)?
                }
                Similarity::Mass => {
                    let cond = table
                        .conditional(image, text)
                        .ok_or_else(|| missing("conditional row", image, text))?;
                    mass_score(cond, &marginals[text])?
                }
            };
            Ok(value.value)
        })
        .collect();

    let mut out = PairScores::new();
    for ((image, text), v) in pairs.iter().zip(first_error(results)?) {
        out.insert(image.clone(), text.clone(), v)?;
    }
    Ok(out)
}
