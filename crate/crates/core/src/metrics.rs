//! Evaluation metrics: Recall@K, Bias@K, Winoground text/image/group scores,
//! pairwise ranking accuracy on foils, color-bias statistics and the
//! recall-bias Pareto frontier.
//!
//! Apart from the per-type means in [`color_bias_stats`], every metric only
//! compares scores, so it is unchanged by any strictly increasing transform of
//! the scores.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{Direction, PairLookup, Ranking, Retriever, ScoreMatrix};
use crate::scalar::Scalar;
use crate::similarity::ItemId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gender {
    Masculine,
    Feminine,
    /// Both masculine and feminine words present.
    Both,
    Neutral,
    #[default]
    Unknown,
}

/// How an item labelled [`Gender::Both`] counts toward `N_m` and `N_f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixedPolicy {
    /// Increment both counts.
    #[default]
    Both,
    /// Increment neither.
    Neither,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalQuery {
    pub id: ItemId,
    pub gold: BTreeSet<ItemId>,
    #[serde(default)]
    pub gender: Gender,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalCandidate {
    pub id: ItemId,
    #[serde(default)]
    pub gender: Gender,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalDataset {
    pub direction: Direction,
    pub queries: Vec<RetrievalQuery>,
    pub candidates: Vec<RetrievalCandidate>,
}

impl RetrievalDataset {
    /// Checks id uniqueness and that gold sets are non-empty known candidates.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.candidates {
            if !seen.insert(&c.id) {
                return Err(Error::InvalidInput(format!("duplicate candidate `{}`", c.id)));
            }
        }
        let mut qseen = HashSet::new();
        for q in &self.queries {
            if !qseen.insert(&q.id) {
                return Err(Error::InvalidInput(format!("duplicate query `{}`", q.id)));
            }
            if q.gold.is_empty() {
                return Err(Error::InvalidInput(format!("query `{}` has no gold items", q.id)));
            }
            if let Some(g) = q.gold.iter().find(|g| !seen.contains(g)) {
                return Err(Error::InvalidInput(format!(
                    "gold `{g}` of query `{}` is not a candidate",
                    q.id
                )));
            }
        }
        Ok(())
    }

    pub fn query_ids(&self) -> Vec<ItemId> {
        self.queries.iter().map(|q| q.id.clone()).collect()
    }
}

/// Two images and two captions; the gold pairing is `(i0, c0)` and `(i1, c1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinogroundSample {
    pub id: Option<String>,
    pub i0: ItemId,
    pub i1: ItemId,
    pub c0: ItemId,
    pub c1: ItemId,
    pub tags: BTreeSet<String>,
}

impl WinogroundSample {
    pub fn new(
        id: Option<String>,
        i0: ItemId,
        i1: ItemId,
        c0: ItemId,
        c1: ItemId,
        tags: BTreeSet<String>,
    ) -> Result<Self> {
        if i0 == i1 || c0 == c1 {
            return Err(Error::InvalidInput(
                "winoground sample needs two distinct images and two distinct captions".into(),
            ));
        }
        Ok(Self {
            id,
            i0,
            i1,
            c0,
            c1,
            tags,
        })
    }
}

/// An image with its true caption and a minimally altered wrong one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoilSample {
    pub image: ItemId,
    pub caption_true: ItemId,
    pub caption_foil: ItemId,
    pub category: String,
}

impl FoilSample {
    pub fn new(
        image: ItemId,
        caption_true: ItemId,
        caption_foil: ItemId,
        category: impl Into<String>,
    ) -> Result<Self> {
        if caption_true == caption_foil {
            return Err(Error::InvalidInput("foil caption equals true caption".into()));
        }
        Ok(Self {
            image,
            caption_true,
            caption_foil,
            category: category.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorSample<S: Scalar = f64> {
    pub image: ItemId,
    pub fruit_type: String,
    pub score_true: S,
    pub score_adv: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub recall: f64,
    pub bias: f64,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, recall: f64, bias: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&recall) || !(-1.0..=1.0).contains(&bias) {
            return Err(Error::InvalidInput(format!(
                "pareto point out of range: recall {recall}, bias {bias}"
            )));
        }
        Ok(Self {
            label: label.into(),
            recall,
            bias,
        })
    }
}

/// First-stage scores and shortlist size for two-stage retrieval.
#[derive(Debug, Clone, Copy)]
pub struct TwoStage<'a, S: Scalar = f64> {
    pub first: &'a ScoreMatrix<S>,
    pub shortlist: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BiasOptions {
    /// Average `|f|` instead of `f`.
    pub absolute: bool,
    pub mixed_policy: MixedPolicy,
}

fn check_coverage<S: Scalar>(m: &ScoreMatrix<S>, ds: &RetrievalDataset) -> Result<()> {
    if m.direction() != ds.direction {
        return Err(Error::InvalidInput(format!(
            "score matrix direction {:?} does not match dataset direction {:?}",
            m.direction(),
            ds.direction
        )));
    }
    let known: HashSet<&ItemId> = m.candidates().iter().collect();
    if let Some(c) = ds.candidates.iter().find(|c| !known.contains(&c.id)) {
        return Err(Error::MissingEntry(format!("candidate `{}` has no scores", c.id)));
    }
    let listed: HashSet<&ItemId> = ds.candidates.iter().map(|c| &c.id).collect();
    if let Some(c) = m.candidates().iter().find(|c| !listed.contains(c)) {
        return Err(Error::MissingEntry(format!(
            "scored candidate `{c}` is not in the dataset"
        )));
    }
    Ok(())
}

fn retriever<'a, S: Scalar>(
    scores: &'a ScoreMatrix<S>,
    ds: &RetrievalDataset,
    two_stage: Option<TwoStage<'a, S>>,
) -> Result<Retriever<'a, S>> {
    match two_stage {
        None => {
            check_coverage(scores, ds)?;
            Ok(Retriever::Single(scores))
        }
        Some(ts) => {
            check_coverage(ts.first, ds)?;
            if scores.direction() != ds.direction {
                return Err(Error::InvalidInput("second-stage direction mismatch".into()));
            }
            Ok(Retriever::TwoStage {
                first: ts.first,
                second: scores,
                shortlist: ts.shortlist,
            })
        }
    }
}

/// Recall and Bias@K values at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalAtK {
    pub k: usize,
    pub recall: f64,
    pub bias: f64,
    pub abs_bias: f64,
}

fn recall_of<S: Scalar>(rankings: &[Ranking<S>], ds: &RetrievalDataset, k: usize) -> f64 {
    let hits = ds
        .queries
        .iter()
        .zip(rankings)
        .filter(|(q, r)| r.ids().take(k).any(|c| q.gold.contains(c)))
        .count();
    hits as f64 / ds.queries.len() as f64
}

fn bias_terms<S: Scalar>(
    rankings: &[Ranking<S>],
    ds: &RetrievalDataset,
    k: usize,
    policy: MixedPolicy,
) -> Vec<f64> {
    let gender: BTreeMap<&ItemId, Gender> = ds.candidates.iter().map(|c| (&c.id, c.gender)).collect();
    rankings
        .iter()
        .map(|r| {
            let (mut nm, mut nf) = (0usize, 0usize);
            for c in r.ids().take(k) {
                match gender[c] {
                    Gender::Masculine => nm += 1,
                    Gender::Feminine => nf += 1,
                    Gender::Both if policy == MixedPolicy::Both => {
                        nm += 1;
                        nf += 1;
                    }
                    _ => {}
                }
            }
            if nm + nf == 0 {
                0.0
            } else {
                (nm as f64 - nf as f64) / (nm + nf) as f64
            }
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Recall@K and Bias@K (signed and absolute) at every cutoff in `ks`, ranking
/// each query once at the largest cutoff.
pub fn retrieval_metrics<S: Scalar>(
    scores: &ScoreMatrix<S>,
    ds: &RetrievalDataset,
    ks: &[usize],
    mixed_policy: MixedPolicy,
    two_stage: Option<TwoStage<'_, S>>,
) -> Result<Vec<RetrievalAtK>> {
    if ds.queries.is_empty() {
        return Err(Error::EmptyDataset("retrieval dataset has no queries".into()));
    }
    let kmax = ks.iter().copied().max().ok_or_else(|| Error::InvalidInput("no k given".into()))?;
    let r = retriever(scores, ds, two_stage)?;
    let rankings = r.retrieve_all(&ds.query_ids(), kmax)?;
    let n = ds.queries.len();
    Ok(ks
        .iter()
        .map(|&k| {
            let terms = bias_terms(&rankings, ds, k, mixed_policy);
            RetrievalAtK {
                k,
                recall: recall_of(&rankings, ds, k),
                bias: mean(terms.iter().copied(), n),
                abs_bias: mean(terms.iter().map(|f| f.abs()), n),
            }
        })
        .collect())
}

/// Fraction of queries with at least one gold item in the top `k`.
pub fn recall_at_k<S: Scalar>(
    scores: &ScoreMatrix<S>,
    ds: &RetrievalDataset,
    k: usize,
    two_stage: Option<TwoStage<'_, S>>,
) -> Result<f64> {
    Ok(retrieval_metrics(scores, ds, &[k], MixedPolicy::Both, two_stage)?[0].recall)
}

/// Mean over queries of `(N_m - N_f) / (N_m + N_f)` among the top `k`
/// (0 when no gendered item is retrieved). `unknown` counts as neutral.
pub fn bias_at_k<S: Scalar>(
    scores: &ScoreMatrix<S>,
    ds: &RetrievalDataset,
    k: usize,
    opts: BiasOptions,
    two_stage: Option<TwoStage<'_, S>>,
) -> Result<f64> {
    let m = retrieval_metrics(scores, ds, &[k], opts.mixed_policy, two_stage)?[0];
    Ok(if opts.absolute { m.abs_bias } else { m.bias })
}

/// Selects Winoground samples by tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TagFilter {
    All,
    /// Samples with an empty tag set.
    NoTag,
    /// Samples with at least one tag.
    Rest,
    /// Samples carrying any of the given tags.
    AnyOf(BTreeSet<String>),
}

impl TagFilter {
    pub fn accepts(&self, tags: &BTreeSet<String>) -> bool {
        match self {
            Self::All => true,
            Self::NoTag => tags.is_empty(),
            Self::Rest => !tags.is_empty(),
            Self::AnyOf(set) => !set.is_disjoint(tags),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinogroundScores {
    pub text: f64,
    pub image: f64,
    pub group: f64,
    pub n: usize,
}

fn lookup<S: Scalar>(scores: &impl PairLookup<S>, image: &ItemId, text: &ItemId) -> Result<S> {
    scores
        .pair_score(image, text)
        .ok_or_else(|| Error::MissingEntry(format!("no score for ({image}, {text})")))
}

/// Text, image and group scores. Comparisons are strict: ties count as wrong.
pub fn winoground_scores<S: Scalar>(
    scores: &impl PairLookup<S>,
    samples: &[WinogroundSample],
    filter: &TagFilter,
) -> Result<WinogroundScores> {
    let (mut text, mut image, mut group, mut n) = (0usize, 0usize, 0usize, 0usize);
    for s in samples.iter().filter(|s| filter.accepts(&s.tags)) {
        let s00 = lookup(scores, &s.i0, &s.c0)?;
        let s01 = lookup(scores, &s.i0, &s.c1)?;
        let s10 = lookup(scores, &s.i1, &s.c0)?;
        let s11 = lookup(scores, &s.i1, &s.c1)?;
        let t = s00 > s01 && s11 > s10;
        let i = s00 > s10 && s11 > s01;
        text += usize::from(t);
        image += usize::from(i);
        group += usize::from(t && i);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset("no winoground samples pass the filter".into()));
    }
    let nf = n as f64;
    Ok(WinogroundScores {
        text: text as f64 / nf,
        image: image as f64 / nf,
        group: group as f64 / nf,
        n,
    })
}

/// Scores for all samples, `No-Tag`, `Rest`, and each individual tag.
/// Breakdowns without samples are omitted.
pub fn winoground_breakdown<S: Scalar>(
    scores: &impl PairLookup<S>,
    samples: &[WinogroundSample],
) -> Result<BTreeMap<String, WinogroundScores>> {
    let mut out = BTreeMap::new();
    out.insert("all".to_owned(), winoground_scores(scores, samples, &TagFilter::All)?);
    let tags: BTreeSet<&String> = samples.iter().flat_map(|s| &s.tags).collect();
    let mut filters = vec![
        ("No-Tag".to_owned(), TagFilter::NoTag),
        ("Rest".to_owned(), TagFilter::Rest),
    ];
    filters.extend(
        tags.into_iter()
            .map(|t| (t.clone(), TagFilter::AnyOf(BTreeSet::from([t.clone()])))),
    );
    for (name, f) in filters {
        match winoground_scores(scores, samples, &f) {
            Ok(s) => {
                out.insert(name, s);
            }
            Err(Error::EmptyDataset(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Fraction of foils where the true caption strictly outscores the foil.
pub fn pairwise_ranking_accuracy<S: Scalar>(
    scores: &impl PairLookup<S>,
    foils: &[FoilSample],
    category: Option<&str>,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut n = 0usize;
    for f in foils
        .iter()
        .filter(|f| category.is_none_or(|c| f.category == c))
    {
        let t = lookup(scores, &f.image, &f.caption_true)?;
        let x = lookup(scores, &f.image, &f.caption_foil)?;
        correct += usize::from(t > x);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset("no foil samples pass the filter".into()));
    }
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorBiasStats {
    /// Fraction of samples whose true caption scores below the adversarial one.
    pub biased_sample_ratio: f64,
    /// Fraction of fruit types whose mean score difference is negative.
    pub biased_type_ratio: f64,
    pub per_type_mean: BTreeMap<String, f64>,
}

pub fn color_bias_stats<S: Scalar>(samples: &[ColorSample<S>]) -> Result<ColorBiasStats> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no color samples".into()));
    }
    let mut by_type: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut biased = 0usize;
    for s in samples {
        let diff = (s.score_true - s.score_adv).as_f64();
        biased += usize::from(diff < 0.0);
        by_type.entry(&s.fruit_type).or_default().push(diff);
    }
    let per_type_mean: BTreeMap<String, f64> = by_type
        .into_iter()
        .map(|(t, d)| (t.to_owned(), crate::scalar::compensated_mean(&d).unwrap_or(0.0)))
        .collect();
    let biased_types = per_type_mean.values().filter(|&&m| m < 0.0).count();
    Ok(ColorBiasStats {
        biased_sample_ratio: biased as f64 / samples.len() as f64,
        biased_type_ratio: biased_types as f64 / per_type_mean.len() as f64,
        per_type_mean,
    })
}

fn dominates(p: &ParetoPoint, q: &ParetoPoint) -> bool {
    let (pb, qb) = (p.bias.abs(), q.bias.abs());
    p.recall >= q.recall && pb <= qb && (p.recall > q.recall || pb < qb)
}

/// Points not dominated in (higher recall, lower |bias|), sorted by recall
/// descending. Later points repeating an earlier label are dropped.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    if points.is_empty() {
        return Err(Error::EmptyDataset("no pareto points".into()));
    }
    let mut labels = HashSet::new();
    let unique: Vec<&ParetoPoint> = points.iter().filter(|p| labels.insert(&p.label)).collect();
    let mut front: Vec<ParetoPoint> = unique
        .iter()
        .filter(|q| !unique.iter().any(|p| dominates(p, q)))
        .map(|p| (*p).clone())
        .collect();
    front.sort_by(|a, b| {
        b.recall
            .total_cmp(&a.recall)
            .then(a.bias.abs().total_cmp(&b.bias.abs()))
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(front)
}
