//! Straightforward reference implementations used to cross-check the library.

use std::collections::{BTreeMap, BTreeSet};

use massrank_core::metrics::{ColorSample, FoilSample, Gender, MixedPolicy, ParetoPoint, RetrievalDataset, WinogroundSample};
use massrank_core::ItemId;

/// Score lookup keyed by (image, text).
pub type Scores = BTreeMap<(ItemId, ItemId), f64>;

pub fn get(s: &Scores, image: &ItemId, text: &ItemId) -> f64 {
    s[&(image.clone(), text.clone())]
}

fn key(ds: &RetrievalDataset, q: &ItemId, c: &ItemId) -> (ItemId, ItemId) {
    match ds.direction {
        massrank_core::retrieval::Direction::TextToImage => (c.clone(), q.clone()),
        massrank_core::retrieval::Direction::ImageToText => (q.clone(), c.clone()),
    }
}

/// Candidates of `q` by descending score, ties by ascending id, via a full sort.
pub fn full_ranking(s: &Scores, ds: &RetrievalDataset, q: &ItemId, pool: &[ItemId]) -> Vec<ItemId> {
    let mut v: Vec<(f64, ItemId)> = pool.iter().map(|c| (s[&key(ds, q, c)], c.clone())).collect();
    v.sort_by(|a, b| {
        if a.0 > b.0 {
            std::cmp::Ordering::Less
        } else if a.0 < b.0 {
            std::cmp::Ordering::Greater
        } else {
            a.1.cmp(&b.1)
        }
    });
    v.into_iter().map(|(_, c)| c).collect()
}

pub fn rankings(s: &Scores, ds: &RetrievalDataset, first: Option<(&Scores, usize)>) -> Vec<Vec<ItemId>> {
    let all: Vec<ItemId> = ds.candidates.iter().map(|c| c.id.clone()).collect();
    ds.queries
        .iter()
        .map(|q| match first {
            None => full_ranking(s, ds, &q.id, &all),
            Some((f, shortlist)) => {
                let short: Vec<ItemId> = full_ranking(f, ds, &q.id, &all).into_iter().take(shortlist).collect();
                full_ranking(s, ds, &q.id, &short)
            }
        })
        .collect()
}

pub fn recall(ds: &RetrievalDataset, ranked: &[Vec<ItemId>], k: usize) -> f64 {
    let mut hits = 0;
    for (q, r) in ds.queries.iter().zip(ranked) {
        if r.iter().take(k).any(|c| q.gold.contains(c)) {
            hits += 1;
        }
    }
    hits as f64 / ds.queries.len() as f64
}

pub fn bias(ds: &RetrievalDataset, ranked: &[Vec<ItemId>], k: usize, policy: MixedPolicy, absolute: bool) -> f64 {
    let mut total = 0.0;
    for r in ranked {
        let (mut m, mut f) = (0, 0);
        for c in r.iter().take(k) {
            let g = ds.candidates.iter().find(|x| &x.id == c).unwrap().gender;
            if g == Gender::Masculine || (g == Gender::Both && policy == MixedPolicy::Both) {
                m += 1;
            }
            if g == Gender::Feminine || (g == Gender::Both && policy == MixedPolicy::Both) {
                f += 1;
            }
        }
        let term = if m + f == 0 { 0.0 } else { (m as f64 - f as f64) / (m + f) as f64 };
        total += if absolute { term.abs() } else { term };
    }
    total / ds.queries.len() as f64
}

/// (text, image, group, n) per breakdown key.
pub fn winoground(s: &Scores, samples: &[WinogroundSample]) -> BTreeMap<String, (f64, f64, f64, usize)> {
    let mut groups: BTreeMap<String, Vec<&WinogroundSample>> = BTreeMap::new();
    for w in samples {
        groups.entry("all".into()).or_default().push(w);
        groups.entry(if w.tags.is_empty() { "No-Tag".into() } else { "Rest".into() }).or_default().push(w);
        for t in &w.tags {
            groups.entry(t.clone()).or_default().push(w);
        }
    }
    groups
        .into_iter()
        .map(|(name, ws)| {
            let (mut t, mut i, mut g) = (0, 0, 0);
            for w in &ws {
                let text_ok = get(s, &w.i0, &w.c0) > get(s, &w.i0, &w.c1) && get(s, &w.i1, &w.c1) > get(s, &w.i1, &w.c0);
                let image_ok = get(s, &w.i0, &w.c0) > get(s, &w.i1, &w.c0) && get(s, &w.i1, &w.c1) > get(s, &w.i0, &w.c1);
                t += text_ok as usize;
                i += image_ok as usize;
                g += (text_ok && image_ok) as usize;
            }
            let n = ws.len();
            (name, (t as f64 / n as f64, i as f64 / n as f64, g as f64 / n as f64, n))
        })
        .collect()
}

pub fn pairwise(s: &Scores, foils: &[FoilSample], category: Option<&str>) -> Option<f64> {
    let chosen: Vec<&FoilSample> = foils.iter().filter(|f| category.map_or(true, |c| f.category == c)).collect();
    if chosen.is_empty() {
        return None;
    }
    let correct = chosen
        .iter()
        .filter(|f| get(s, &f.image, &f.caption_true) > get(s, &f.image, &f.caption_foil))
        .count();
    Some(correct as f64 / chosen.len() as f64)
}

/// (biased sample ratio, biased type ratio, per-type mean difference).
pub fn color(samples: &[ColorSample]) -> (f64, f64, BTreeMap<String, f64>) {
    let biased = samples.iter().filter(|s| s.score_true < s.score_adv).count();
    let types: BTreeSet<&String> = samples.iter().map(|s| &s.fruit_type).collect();
    let mut means = BTreeMap::new();
    for t in types {
        let d: Vec<f64> = samples.iter().filter(|s| &s.fruit_type == t).map(|s| s.score_true - s.score_adv).collect();
        means.insert(t.clone(), d.iter().sum::<f64>() / d.len() as f64);
    }
    let biased_types = means.values().filter(|m| **m < 0.0).count();
    (
        biased as f64 / samples.len() as f64,
        biased_types as f64 / means.len() as f64,
        means,
    )
}

/// Non-dominated points (first occurrence of each label), sorted by label.
pub fn pareto(points: &[ParetoPoint]) -> Vec<(String, f64, f64)> {
    let mut seen = BTreeSet::new();
    let unique: Vec<&ParetoPoint> = points.iter().filter(|p| seen.insert(p.label.clone())).collect();
    let mut out = Vec::new();
    for q in &unique {
        let dominated = unique.iter().any(|p| {
            let better_or_equal = p.recall >= q.recall && p.bias.abs() <= q.bias.abs();
            let strictly = p.recall > q.recall || p.bias.abs() < q.bias.abs();
            better_or_equal && strictly
        });
        if !dominated {
            out.push((q.label.clone(), q.recall, q.bias));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
