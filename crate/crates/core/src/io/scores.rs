use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{fmt_f64, json_str, read_lines, write_with_digest};
use crate::error::{Error, Result};
use crate::retrieval::PairLookup;
use crate::scalar::Scalar;
use crate::similarity::ItemId;

/// Sparse similarity values keyed by `(image, text)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores<S: Scalar = f64> {
    values: BTreeMap<(ItemId, ItemId), S>,
}

impl<S: Scalar> Default for PairScores<S> {
    fn default() -> Self {
        Self {
            values: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> PairScores<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a finite score; rejects NaN/inf and duplicate pairs.
    pub fn insert(&mut self, image: ItemId, text: ItemId, score: S) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::InvalidInput(format!(
                "score for ({image}, {text}) is not finite"
            )));
        }
        if self.values.contains_key(&(image.clone(), text.clone())) {
            return Err(Error::InvalidInput(format!("duplicate score for ({image}, {text})")));
        }
        self.values.insert((image, text), score);
        Ok(())
    }

    pub fn get(&self, image: &ItemId, text: &ItemId) -> Option<S> {
        self.values.get(&(image.clone(), text.clone())).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ItemId, &ItemId, S)> {
        self.values.iter().map(|((i, t), &s)| (i, t, s))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Applies `f` to every score.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            values: self.values.iter().map(|(k, &v)| (k.clone(), f(v))).collect(),
        }
    }
}

impl<S: Scalar> FromIterator<((ItemId, ItemId), S)> for PairScores<S> {
    fn from_iter<I: IntoIterator<Item = ((ItemId, ItemId), S)>>(iter: I) -> Self {
        Self {
            values: iter.into_iter().collect(),
        }
    }
}

impl<S: Scalar> PairLookup<S> for PairScores<S> {
    fn pair_score(&self, image: &ItemId, text: &ItemId) -> Option<S> {
        self.get(image, text)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRecord {
    image: ItemId,
    text: ItemId,
    score: f64,
}

/// Loads `{image, text, score}` lines. Non-finite scores and duplicates are
/// rejected here so ranking never sees them.
pub fn load_scores(path: impl AsRef<Path>) -> Result<PairScores> {
    let path = path.as_ref();
    let mut scores = PairScores::new();
    for (line, body) in read_lines(path)? {
        let manifest_err = |detail: String| Error::Manifest {
            path: path.display().to_string(),
            line,
            detail,
        };
        let rec: ScoreRecord = serde_json::from_str(&body).map_err(|e| manifest_err(e.to_string()))?;
        scores
            .insert(rec.image, rec.text, rec.score)
            .map_err(|e| manifest_err(e.to_string()))?;
    }
    Ok(scores)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    image: ItemId,
    text: ItemId,
}

/// Loads the `{image, text}` pair list for scoring; repeated pairs are rejected.
pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<(ItemId, ItemId)>> {
    let path = path.as_ref();
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (line, body) in read_lines(path)? {
        let manifest_err = |detail: String| Error::Manifest {
            path: path.display().to_string(),
            line,
            detail,
        };
        let rec: PairRecord = serde_json::from_str(&body).map_err(|e| manifest_err(e.to_string()))?;
        if rec.text.is_null() {
            return Err(manifest_err("`null` is reserved for images".into()));
        }
        if !seen.insert((rec.image.clone(), rec.text.clone())) {
            return Err(manifest_err(format!("duplicate pair ({}, {})", rec.image, rec.text)));
        }
        out.push((rec.image, rec.text));
    }
    Ok(out)
}

pub fn render_scores(scores: &PairScores) -> String {
    let mut out = String::new();
    for (image, text, score) in scores.iter() {
        out.push_str(&format!(
            "{{\"image\":{},\"text\":{},\"score\":{}}}\n",
            json_str(image.as_str()),
            json_str(text.as_str()),
            fmt_f64(score)
        ));
    }
    out
}

pub fn save_scores(scores: &PairScores, path: impl AsRef<Path>) -> Result<()> {
    write_with_digest(path.as_ref(), render_scores(scores).as_bytes())
}
