//! Per-query ranking over a score matrix and two-stage re-ranking.
//!
//! Ordering is always by score descending, ties broken by ascending candidate
//! id, so rankings are deterministic and depend only on score comparisons.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::PairScores;
use crate::scalar::Scalar;
use crate::similarity::ItemId;

/// Shortlist size of the first retrieval stage unless configured otherwise.
pub const DEFAULT_SHORTLIST: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Queries are captions, candidates are images.
    TextToImage,
    /// Queries are images, candidates are captions.
    ImageToText,
}

/// Score lookup by `(image, text)` regardless of storage orientation.
pub trait PairLookup<S: Scalar> {
    fn pair_score(&self, image: &ItemId, text: &ItemId) -> Option<S>;
}

/// Query x candidate similarity values.
///
/// Entries are optional so that a second-stage matrix only needs the pairs
/// that survive the first-stage shortlist; any entry a computation actually
/// needs must be present or the computation fails with `MissingEntry`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<S: Scalar = f64> {
    direction: Direction,
    queries: Vec<ItemId>,
    candidates: Vec<ItemId>,
    query_index: HashMap<ItemId, usize>,
    candidate_index: HashMap<ItemId, usize>,
    values: Vec<Option<S>>,
}

fn index_of(ids: &[ItemId], what: &str) -> Result<HashMap<ItemId, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::InvalidInput(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(map)
}

impl<S: Scalar> ScoreMatrix<S> {
    /// Empty matrix over the declared query and candidate lists.
    pub fn new(direction: Direction, queries: Vec<ItemId>, candidates: Vec<ItemId>) -> Result<Self> {
        let query_index = index_of(&queries, "query")?;
        let candidate_index = index_of(&candidates, "candidate")?;
        let values = vec![None; queries.len() * candidates.len()];
        Ok(Self {
            direction,
            queries,
            candidates,
            query_index,
            candidate_index,
            values,
        })
    }

    /// Dense matrix from row-major values.
    pub fn from_rows(
        direction: Direction,
        queries: Vec<ItemId>,
        candidates: Vec<ItemId>,
        rows: &[Vec<S>],
    ) -> Result<Self> {
        let mut m = Self::new(direction, queries, candidates)?;
        if rows.len() != m.queries.len() || rows.iter().any(|r| r.len() != m.candidates.len()) {
            return Err(Error::Alignment("row shape does not match declared ids".into()));
        }
        for (qi, row) in rows.iter().enumerate() {
            for (ci, &v) in row.iter().enumerate() {
                m.set_index(qi, ci, v)?;
            }
        }
        Ok(m)
    }

    /// Orients pair scores as a matrix. Query and candidate lists are the sorted
    /// distinct ids on each side; absent pairs stay empty.
    pub fn from_pairs(pairs: &PairScores<S>, direction: Direction) -> Self {
        let mut images: Vec<ItemId> = pairs.iter().map(|(i, _, _)| i.clone()).collect();
        let mut texts: Vec<ItemId> = pairs.iter().map(|(_, t, _)| t.clone()).collect();
        images.sort();
        images.dedup();
        texts.sort();
        texts.dedup();
        let (queries, candidates) = match direction {
            Direction::TextToImage => (texts, images),
            Direction::ImageToText => (images, texts),
        };
        let mut m = Self::new(direction, queries, candidates).expect("deduplicated ids");
        for (image, text, s) in pairs.iter() {
            let (q, c) = m.orient(image, text);
            let (qi, ci) = (m.query_index[q], m.candidate_index[c]);
            m.values[qi * m.candidates.len() + ci] = Some(s);
        }
        m
    }

    fn orient<'a>(&self, image: &'a ItemId, text: &'a ItemId) -> (&'a ItemId, &'a ItemId) {
        match self.direction {
            Direction::TextToImage => (text, image),
            Direction::ImageToText => (image, text),
        }
    }

    fn set_index(&mut self, qi: usize, ci: usize, v: S) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite score for ({}, {})",
                self.queries[qi], self.candidates[ci]
            )));
        }
        let n = self.candidates.len();
        self.values[qi * n + ci] = Some(v);
        Ok(())
    }

    pub fn set(&mut self, query: &ItemId, candidate: &ItemId, v: S) -> Result<()> {
        let qi = *self
            .query_index
            .get(query)
            .ok_or_else(|| Error::MissingEntry(format!("unknown query `{query}`")))?;
        let ci = *self
            .candidate_index
            .get(candidate)
            .ok_or_else(|| Error::MissingEntry(format!("unknown candidate `{candidate}`")))?;
        self.set_index(qi, ci, v)
    }

    pub fn get(&self, query: &ItemId, candidate: &ItemId) -> Option<S> {
        let qi = *self.query_index.get(query)?;
        let ci = *self.candidate_index.get(candidate)?;
        self.values[qi * self.candidates.len() + ci]
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn queries(&self) -> &[ItemId] {
        &self.queries
    }

    pub fn candidates(&self) -> &[ItemId] {
        &self.candidates
    }

    pub fn has_query(&self, query: &ItemId) -> bool {
        self.query_index.contains_key(query)
    }

    pub fn is_dense(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// Applies `f` to every present entry.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            values: self.values.iter().map(|v| v.map(&f)).collect(),
            ..self.clone()
        }
    }

    fn row(&self, query: &ItemId) -> Result<&[Option<S>]> {
        let qi = *self
            .query_index
            .get(query)
            .ok_or_else(|| Error::MissingEntry(format!("unknown query `{query}`")))?;
        let n = self.candidates.len();
        Ok(&self.values[qi * n..(qi + 1) * n])
    }
}

impl<S: Scalar> PairLookup<S> for ScoreMatrix<S> {
    fn pair_score(&self, image: &ItemId, text: &ItemId) -> Option<S> {
        let (q, c) = self.orient(image, text);
        self.get(q, c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking<S: Scalar = f64> {
    pub query: ItemId,
    /// `(candidate, score)` sorted by score descending, then id ascending.
    pub ordered: Vec<(ItemId, S)>,
}

impl<S: Scalar> Ranking<S> {
    pub fn ids(&self) -> impl Iterator<Item = &ItemId> {
        self.ordered.iter().map(|(id, _)| id)
    }
}

fn rank_order<S: Scalar>(a: &(ItemId, S), b: &(ItemId, S)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

fn top_k<S: Scalar>(mut scored: Vec<(ItemId, S)>, k: usize) -> Vec<(ItemId, S)> {
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    Ok(())
}

/// Top-`k` candidates for `query`; all candidates when `k` exceeds their count.
pub fn rank<S: Scalar>(scores: &ScoreMatrix<S>, query: &ItemId, k: usize) -> Result<Ranking<S>> {
    check_k(k)?;
    let row = scores.row(query)?;
    let scored = scores
        .candidates
        .iter()
        .zip(row)
        .map(|(c, v)| {
            v.map(|v| (c.clone(), v))
                .ok_or_else(|| Error::MissingEntry(format!("no score for ({query}, {c})")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking {
        query: query.clone(),
        ordered: top_k(scored, k),
    })
}

/// Shortlists by `first`, then orders the shortlist by `second`.
///
/// Candidates outside the first-stage top-`shortlist` never appear in the
/// output; a shortlisted candidate without a second-stage score is an error.
pub fn two_stage_rerank<S: Scalar>(
    first: &ScoreMatrix<S>,
    second: &ScoreMatrix<S>,
    query: &ItemId,
    shortlist: usize,
    k: usize,
) -> Result<Ranking<S>> {
    check_k(k)?;
    if shortlist < k {
        return Err(Error::InvalidInput(format!(
            "shortlist ({shortlist}) must be >= k ({k})"
        )));
    }
    let short = rank(first, query, shortlist)?;
    if !second.has_query(query) {
        return Err(Error::MissingEntry(format!(
            "second stage has no scores for query `{query}`"
        )));
    }
    let scored = short
        .ids()
        .map(|c| {
            second
                .get(query, c)
                .map(|v| (c.clone(), v))
                .ok_or_else(|| Error::MissingEntry(format!("no second-stage score for ({query}, {c})")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking {
        query: query.clone(),
        ordered: top_k(scored, k),
    })
}

/// How candidates are retrieved for a query.
#[derive(Debug, Clone, Copy)]
pub enum Retriever<'a, S: Scalar = f64> {
    Single(&'a ScoreMatrix<S>),
    TwoStage {
        first: &'a ScoreMatrix<S>,
        second: &'a ScoreMatrix<S>,
        shortlist: usize,
    },
}

impl<'a, S: Scalar> Retriever<'a, S> {
    pub fn retrieve(&self, query: &ItemId, k: usize) -> Result<Ranking<S>> {
        match *self {
            Self::Single(m) => rank(m, query, k),
            Self::TwoStage {
                first,
                second,
                shortlist,
            } => two_stage_rerank(first, second, query, shortlist, k),
        }
    }

    /// Rankings for every listed query, computed in parallel, returned in input order.
    pub fn retrieve_all(&self, queries: &[ItemId], k: usize) -> Result<Vec<Ranking<S>>> {
        queries.par_iter().map(|q| self.retrieve(q, k)).collect()
    }
}
