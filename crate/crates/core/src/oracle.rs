//! Exactly enumerable conditional language models.
//!
//! A [`ToyModel`] holds, for every image, a next-token distribution for every
//! reachable prefix. Prefixes are full token strings (no Markov truncation), and
//! the end token is absorbing: once emitted, the sequence stops. Everything the
//! scoring code estimates (conditionals, marginals, pointwise mutual
//! information) is available here in closed form, so the toy model is the
//! reference the rest of the crate is tested against.
//!
//! The exact marginal of token `x_t` weights each image by its posterior given
//! the prefix:
//!
//! ```text
//! p(x_t | x_<t) = Σ_c p(c | x_<t) p(x_t | x_<t, c),   p(c | x_<t) ∝ prior(c) p(x_<t | c)
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ConditionalTable, ItmEntry, Modality};
use crate::metrics::FoilSample;
use crate::scalar::{compensated_sum, log_add_exp};
use crate::similarity::{
    tl_score, EmbeddingVector, ItemId, ItmLogit, TlMode, TokenLogProbs, TokenSequence,
};

pub const MAX_VOCAB: usize = 32;
pub const MAX_IMAGES: usize = 16;
pub const MAX_LEN: usize = 8;
pub const DEFAULT_END_TOKEN: &str = "</s>";

const ROW_TOLERANCE: f64 = 1e-12;

/// Finite-vocabulary conditional language model with exhaustive transition tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab: Vec<String>,
    end: usize,
    images: Vec<ItemId>,
    prior: Vec<f64>,
    max_len: usize,
    prefixes: Vec<Vec<u16>>,
    prefix_index: HashMap<Vec<u16>, usize>,
    /// Per image, row-major `[prefix][token]`.
    rows: Vec<Vec<f64>>,
}

fn domain(msg: impl Into<String>) -> Error {
    Error::ModelDomain(msg.into())
}

/// All prefixes over the non-end tokens with length `< max_len`, shortest first.
fn reachable_prefixes(vocab_len: usize, end: usize, max_len: usize) -> Vec<Vec<u16>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 1..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for tok in (0..vocab_len).filter(|&t| t != end) {
                let mut q: Vec<u16> = p.clone();
                q.push(tok as u16);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// One transition row as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RowRecord {
    prefix: Vec<String>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageRecord {
    id: ItemId,
    rows: Vec<RowRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    vocab: Vec<String>,
    end_token: String,
    max_len: usize,
    prior: Vec<f64>,
    images: Vec<ImageRecord>,
}

/// Shape and seed of a randomly generated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomModelSpec {
    pub images: usize,
    /// Vocabulary size including the end token.
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ToyModel {
    /// Builds a model from explicit rows.
    ///
    /// `rows[c]` maps a prefix (as token strings) to its next-token distribution
    /// for image `c`. Every reachable prefix must be present.
    pub fn new(
        vocab: Vec<String>,
        end_token: &str,
        images: Vec<ItemId>,
        prior: Option<Vec<f64>>,
        max_len: usize,
        rows: Vec<Vec<(Vec<String>, Vec<f64>)>>,
    ) -> Result<Self> {
        if vocab.is_empty() || vocab.len() > MAX_VOCAB {
            return Err(domain(format!("vocabulary size must be in 1..={MAX_VOCAB}")));
        }
        if images.is_empty() || images.len() > MAX_IMAGES {
            return Err(domain(format!("image count must be in 1..={MAX_IMAGES}")));
        }
        if max_len == 0 || max_len > MAX_LEN {
            return Err(domain(format!("max_len must be in 1..={MAX_LEN}")));
        }
        let mut tok_index = HashMap::new();
        for (i, t) in vocab.iter().enumerate() {
            if t.is_empty() || tok_index.insert(t.as_str(), i).is_some() {
                return Err(domain(format!("vocabulary entry `{t}` is empty or repeated")));
            }
        }
        let end = *tok_index
            .get(end_token)
            .ok_or_else(|| domain(format!("end token `{end_token}` not in vocabulary")))?;
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = images.iter().find(|i| !seen.insert(*i)) {
            return Err(domain(format!("image `{dup}` repeated")));
        }
        let prior = prior.unwrap_or_else(|| vec![1.0 / images.len() as f64; images.len()]);
        if prior.len() != images.len()
            || prior.iter().any(|&p| !(p.is_finite() && p >= 0.0))
            || (compensated_sum(prior.iter().copied()) - 1.0).abs() > ROW_TOLERANCE
        {
            return Err(domain("prior must be a probability vector over the images"));
        }
        if rows.len() != images.len() {
            return Err(domain("one row table per image required"));
        }

        let prefixes = reachable_prefixes(vocab.len(), end, max_len);
        let prefix_index: HashMap<Vec<u16>, usize> =
            prefixes.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        let v = vocab.len();
        let mut flat = Vec::with_capacity(images.len());
        for (c, table) in rows.into_iter().enumerate() {
            let mut dense = vec![f64::NAN; prefixes.len() * v];
            for (prefix, probs) in table {
                let key = prefix
                    .iter()
                    .map(|t| tok_index.get(t.as_str()).map(|&i| i as u16))
                    .collect::<Option<Vec<u16>>>()
                    .ok_or_else(|| domain(format!("unknown token in prefix {prefix:?}")))?;
                let pi = *prefix_index
                    .get(&key)
                    .ok_or_else(|| domain(format!("prefix {prefix:?} is not reachable")))?;
                if !dense[pi * v].is_nan() {
                    return Err(domain(format!("prefix {prefix:?} given twice for `{}`", images[c])));
                }
                check_row(&probs, v).map_err(|m| {
                    domain(format!("row for `{}` prefix {prefix:?}: {m}", images[c]))
                })?;
                dense[pi * v..(pi + 1) * v].copy_from_slice(&probs);
            }
            if let Some(pi) = (0..prefixes.len()).find(|&pi| dense[pi * v].is_nan()) {
                let names: Vec<&str> = prefixes[pi].iter().map(|&t| vocab[t as usize].as_str()).collect();
                return Err(domain(format!("image `{}` has no row for prefix {names:?}", images[c])));
            }
            flat.push(dense);
        }
        Ok(Self {
            vocab,
            end,
            images,
            prior,
            max_len,
            prefixes,
            prefix_index,
            rows: flat,
        })
    }

    /// Random model with Dirichlet(1) rows and a uniform prior.
    pub fn random(spec: RandomModelSpec) -> Result<Self> {
        if spec.vocab < 2 {
            return Err(domain("random models need at least one token besides the end token"));
        }
        let vocab: Vec<String> = (0..spec.vocab - 1)
            .map(|i| format!("w{i}"))
            .chain(std::iter::once(DEFAULT_END_TOKEN.to_owned()))
            .collect();
        let images: Vec<ItemId> = (0..spec.images)
            .map(|i| ItemId::new(format!("img{i}")))
            .collect::<Result<_>>()?;
        let end = spec.vocab - 1;
        if spec.max_len == 0 || spec.max_len > MAX_LEN {
            return Err(domain(format!("max_len must be in 1..={MAX_LEN}")));
        }
        let prefixes = reachable_prefixes(spec.vocab, end, spec.max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let rows = (0..spec.images)
            .map(|_| {
                prefixes
                    .iter()
                    .map(|p| {
                        let names = p.iter().map(|&t| vocab[t as usize].clone()).collect();
                        (names, dirichlet_row(&mut rng, spec.vocab))
                    })
                    .collect()
            })
            .collect();
        Self::new(vocab, DEFAULT_END_TOKEN, images, None, spec.max_len, rows)
    }

    /// Every image uses the same row for every prefix.
    pub fn shared(
        vocab: Vec<String>,
        end_token: &str,
        images: Vec<ItemId>,
        max_len: usize,
        row: &[f64],
    ) -> Result<Self> {
        let end = vocab
            .iter()
            .position(|t| t == end_token)
            .ok_or_else(|| domain("end token not in vocabulary"))?;
        let prefixes = reachable_prefixes(vocab.len(), end, max_len);
        let table: Vec<(Vec<String>, Vec<f64>)> = prefixes
            .iter()
            .map(|p| (p.iter().map(|&t| vocab[t as usize].clone()).collect(), row.to_vec()))
            .collect();
        let rows = vec![table; images.len()];
        Self::new(vocab, end_token, images, None, max_len, rows)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn end_token(&self) -> &str {
        &self.vocab[self.end]
    }

    pub fn images(&self) -> &[ItemId] {
        &self.images
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn reachable_prefix_count(&self) -> usize {
        self.prefixes.len()
    }

    fn image_index(&self, image: &ItemId) -> Result<usize> {
        self.images
            .iter()
            .position(|i| i == image)
            .ok_or_else(|| domain(format!("unknown image `{image}`")))
    }

    /// Token indices of a caption, checking vocabulary, length and end placement.
    pub fn encode(&self, text: &TokenSequence) -> Result<Vec<u16>> {
        if text.len() > self.max_len {
            return Err(domain(format!(
                "caption has {} tokens, model max_len is {}",
                text.len(),
                self.max_len
            )));
        }
        let idx = text
            .tokens()
            .iter()
            .map(|t| {
                self.vocab
                    .iter()
                    .position(|v| v == t)
                    .map(|i| i as u16)
                    .ok_or_else(|| domain(format!("unknown token `{t}`")))
            })
            .collect::<Result<Vec<u16>>>()?;
        if idx[..idx.len() - 1].iter().any(|&t| t as usize == self.end) {
            return Err(domain("end token before the last position: prefix unreachable"));
        }
        Ok(idx)
    }

    pub fn decode(&self, tokens: &[u16]) -> Result<TokenSequence> {
        TokenSequence::new(tokens.iter().map(|&t| self.vocab[t as usize].clone()).collect())
    }

    fn row(&self, image: usize, prefix: &[u16]) -> &[f64] {
        let pi = self.prefix_index[prefix];
        let v = self.vocab.len();
        &self.rows[image][pi * v..(pi + 1) * v]
    }

    /// Next-token distribution for `image` after `prefix`.
    pub fn next_token_probs(&self, image: &ItemId, prefix: &[String]) -> Result<Vec<f64>> {
        let c = self.image_index(image)?;
        let key = prefix
            .iter()
            .map(|t| self.vocab.iter().position(|v| v == t).map(|i| i as u16))
            .collect::<Option<Vec<u16>>>()
            .ok_or_else(|| domain("unknown token in prefix"))?;
        if !self.prefix_index.contains_key(&key) {
            return Err(domain(format!("prefix {prefix:?} is not reachable")));
        }
        Ok(self.row(c, &key).to_vec())
    }

    /// Per-token natural-log probabilities, `-inf` where a token has probability 0.
    fn raw_conditional(&self, image: usize, tokens: &[u16]) -> Vec<f64> {
        (0..tokens.len())
            .map(|t| self.row(image, &tokens[..t])[tokens[t] as usize].ln())
            .collect()
    }

    fn raw_marginal(&self, tokens: &[u16]) -> Vec<f64> {
        let conds: Vec<Vec<f64>> = (0..self.images.len())
            .map(|c| self.raw_conditional(c, tokens))
            .collect();
        let mut log_weight: Vec<f64> = self.prior.iter().map(|p| p.ln()).collect();
        let mut out = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            let norm = log_weight.iter().copied().fold(f64::NEG_INFINITY, log_add_exp);
            let joint = log_weight
                .iter()
                .zip(&conds)
                .map(|(w, cond)| w + cond[t])
                .fold(f64::NEG_INFINITY, log_add_exp);
            out.push(joint - norm);
            for (w, cond) in log_weight.iter_mut().zip(&conds) {
                *w += cond[t];
            }
        }
        out
    }

    fn finite(logp: Vec<f64>, what: &str) -> Result<TokenLogProbs> {
        if logp.iter().any(|v| !v.is_finite()) {
            return Err(domain(format!("{what} has a zero-probability token")));
        }
        TokenLogProbs::new(logp)
    }

    /// `log p(x_t | x_<t, image)` read from the transition rows.
    pub fn exact_conditional(&self, image: &ItemId, text: &TokenSequence) -> Result<TokenLogProbs> {
        let c = self.image_index(image)?;
        let tokens = self.encode(text)?;
        Self::finite(self.raw_conditional(c, &tokens), "conditional")
    }

    /// `log p(x_t | x_<t)` with images weighted by their prefix posterior.
    pub fn exact_marginal(&self, text: &TokenSequence) -> Result<TokenLogProbs> {
        let tokens = self.encode(text)?;
        Self::finite(self.raw_marginal(&tokens), "marginal")
    }

    /// `log Σ_c prior(c) p(x_t | x_<t, c)`: the mixture that ignores the prefix
    /// posterior. This is what prior-weighted Monte-Carlo averaging of
    /// probabilities converges to; it equals [`Self::exact_marginal`] only when
    /// the posterior does not move along the caption.
    pub fn prior_mixture_marginal(&self, text: &TokenSequence) -> Result<TokenLogProbs> {
        let tokens = self.encode(text)?;
        let conds: Vec<Vec<f64>> = (0..self.images.len())
            .map(|c| self.raw_conditional(c, &tokens))
            .collect();
        let logp = (0..tokens.len())
            .map(|t| {
                self.prior
                    .iter()
                    .zip(&conds)
                    .map(|(p, cond)| p.ln() + cond[t])
                    .fold(f64::NEG_INFINITY, log_add_exp)
            })
            .collect();
        Self::finite(logp, "prior mixture")
    }

    /// Mean per-token pointwise mutual information between `image` and `text`.
    pub fn exact_pmi(&self, image: &ItemId, text: &TokenSequence) -> Result<f64> {
        let cond = self.exact_conditional(image, text)?;
        let marg = self.exact_marginal(text)?;
        let diffs: Vec<f64> = cond
            .values()
            .iter()
            .zip(marg.values())
            .map(|(c, m)| c - m)
            .collect();
        Ok(compensated_sum(diffs.iter().copied()) / diffs.len() as f64)
    }

    /// Sequence log-likelihood `log p(x | image)`.
    pub fn sequence_logprob(&self, image: &ItemId, text: &TokenSequence) -> Result<f64> {
        let c = self.image_index(image)?;
        let tokens = self.encode(text)?;
        Ok(compensated_sum(self.raw_conditional(c, &tokens)))
    }

    /// Every terminal sequence of length at most `k`: sequences ending in the
    /// end token, plus length-`k` sequences without it. Their probabilities
    /// sum to one under every image.
    pub fn terminal_sequences(&self, k: usize) -> Vec<Vec<u16>> {
        let k = k.min(self.max_len);
        let mut out = Vec::new();
        for p in self.prefixes.iter().filter(|p| p.len() < k) {
            for tok in 0..self.vocab.len() {
                if tok == self.end || p.len() + 1 == k {
                    let mut s = p.clone();
                    s.push(tok as u16);
                    out.push(s);
                }
            }
        }
        out
    }

    /// Mutual information between image and full caption, by enumeration over
    /// all terminal sequences of length `max_len`.
    pub fn mutual_information(&self) -> f64 {
        let seqs = self.terminal_sequences(self.max_len);
        let mut terms = Vec::new();
        for s in &seqs {
            let per_image: Vec<f64> = (0..self.images.len())
                .map(|c| compensated_sum(self.raw_conditional(c, s)))
                .collect();
            let log_px = self
                .prior
                .iter()
                .zip(&per_image)
                .map(|(p, l)| p.ln() + l)
                .fold(f64::NEG_INFINITY, log_add_exp);
            for (p, l) in self.prior.iter().zip(&per_image) {
                if *p > 0.0 && l.is_finite() {
                    terms.push(p * l.exp() * (l - log_px));
                }
            }
        }
        compensated_sum(terms)
    }

    /// Draws a terminal caption from `p(x | image)`.
    pub fn sample_text<R: Rng>(&self, image: &ItemId, rng: &mut R) -> Result<TokenSequence> {
        let c = self.image_index(image)?;
        let mut tokens: Vec<u16> = Vec::new();
        loop {
            let row = self.row(c, &tokens);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = row.len() - 1;
            for (t, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = t;
                    break;
                }
            }
            // never sample a zero-probability token through rounding
            if row[pick] == 0.0 {
                pick = row.iter().rposition(|&p| p > 0.0).unwrap_or(pick);
            }
            tokens.push(pick as u16);
            if pick == self.end || tokens.len() == self.max_len {
                break;
            }
        }
        self.decode(&tokens)
    }

    /// Adds an image named `null` whose rows are the exact marginal rows of the
    /// current model; its conditional therefore equals the exact marginal, and
    /// adding it to the mixture leaves the marginal unchanged.
    pub fn with_marginal_null_image(&self) -> Result<Self> {
        if self.images.iter().any(ItemId::is_null) {
            return Err(domain("model already has a `null` image"));
        }
        if self.images.len() + 1 > MAX_IMAGES {
            return Err(domain("no room for a null image"));
        }
        let v = self.vocab.len();
        let mut null_rows = vec![0.0; self.prefixes.len() * v];
        for (pi, prefix) in self.prefixes.iter().enumerate() {
            let log_w: Vec<f64> = (0..self.images.len())
                .map(|c| self.prior[c].ln() + compensated_sum(self.raw_conditional(c, prefix)))
                .collect();
            let norm = log_w.iter().copied().fold(f64::NEG_INFINITY, log_add_exp);
            let weights: Vec<f64> = if norm.is_finite() {
                log_w.iter().map(|w| (w - norm).exp()).collect()
            } else {
                self.prior.clone()
            };
            for tok in 0..v {
                null_rows[pi * v + tok] = compensated_sum(
                    weights
                        .iter()
                        .enumerate()
                        .map(|(c, w)| w * self.rows[c][pi * v + tok]),
                );
            }
            let s = compensated_sum(null_rows[pi * v..(pi + 1) * v].iter().copied());
            for x in &mut null_rows[pi * v..(pi + 1) * v] {
                *x /= s;
            }
        }
        let n = self.images.len() as f64;
        let mut next = self.clone();
        next.images.push(ItemId::null());
        next.prior = self.prior.iter().map(|p| p * n / (n + 1.0)).collect();
        next.prior.push(1.0 / (n + 1.0));
        next.rows.push(null_rows);
        Ok(next)
    }

    /// Probability row of the first token: the synthesized image embedding.
    pub fn image_embedding(&self, image: &ItemId) -> Result<EmbeddingVector> {
        let c = self.image_index(image)?;
        EmbeddingVector::new(self.row(c, &[]).to_vec())
    }

    /// Token-frequency vector of the caption over the vocabulary.
    pub fn text_embedding(&self, text: &TokenSequence) -> Result<EmbeddingVector> {
        let tokens = self.encode(text)?;
        let mut v = vec![0.0; self.vocab.len()];
        for &t in &tokens {
            v[t as usize] += 1.0 / tokens.len() as f64;
        }
        EmbeddingVector::new(v)
    }

    /// Conditional table for `captions` under every image, with:
    ///
    /// - a `null` row per caption holding the exact marginal,
    /// - image embeddings = first-token probability rows,
    /// - text embeddings = token-frequency vectors,
    /// - ITM logits = `log p(x|c) - log p(x)`, the sequence-level PMI.
    ///
    /// A model image named `null` is not exported separately.
    pub fn export_tables(&self, captions: &[(ItemId, TokenSequence)]) -> Result<ConditionalTable> {
        let mut table = ConditionalTable::new();
        for (text_id, text) in captions {
            let marginal = self.exact_marginal(text)?;
            for image in self.images.iter().filter(|i| !i.is_null()) {
                let cond = self.exact_conditional(image, text)?;
                let logit: f64 = compensated_sum(
                    cond.values()
                        .iter()
                        .zip(marginal.values())
                        .map(|(c, m)| c - m),
                );
                table.insert(image.clone(), text_id.clone(), text.clone(), cond)?;
                table.insert_itm(image.clone(), text_id.clone(), ItmEntry::Logit(ItmLogit(logit)))?;
            }
            table.insert(ItemId::null(), text_id.clone(), text.clone(), marginal)?;
            table.insert_embedding(text_id.clone(), Modality::Text, self.text_embedding(text)?)?;
        }
        for image in self.images.iter().filter(|i| !i.is_null()) {
            table.insert_embedding(image.clone(), Modality::Image, self.image_embedding(image)?)?;
        }
        Ok(table)
    }

    /// All terminal captions up to `max_len`, with ids `cap{n}`.
    pub fn all_captions(&self) -> Result<Vec<(ItemId, TokenSequence)>> {
        self.terminal_sequences(self.max_len)
            .iter()
            .enumerate()
            .map(|(i, s)| Ok((ItemId::new(format!("cap{i}"))?, self.decode(s)?)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            vocab: self.vocab.clone(),
            end_token: self.vocab[self.end].clone(),
            max_len: self.max_len,
            prior: self.prior.clone(),
            images: self
                .images
                .iter()
                .enumerate()
                .map(|(c, id)| ImageRecord {
                    id: id.clone(),
                    rows: self
                        .prefixes
                        .iter()
                        .map(|p| RowRecord {
                            prefix: p.iter().map(|&t| self.vocab[t as usize].clone()).collect(),
                            probs: self.row(c, p).to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(body: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(body).map_err(|e| domain(format!("model file: {e}")))?;
        let (ids, rows): (Vec<ItemId>, Vec<_>) = file
            .images
            .into_iter()
            .map(|r| (r.id, r.rows.into_iter().map(|x| (x.prefix, x.probs)).collect()))
            .unzip();
        Self::new(file.vocab, &file.end_token, ids, Some(file.prior), file.max_len, rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&body)
    }
}

fn check_row(probs: &[f64], v: usize) -> std::result::Result<(), String> {
    if probs.len() != v {
        return Err(format!("{} entries, vocabulary has {v}", probs.len()));
    }
    if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
        return Err("entries must be finite and non-negative".into());
    }
    let s = compensated_sum(probs.iter().copied());
    if (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

fn dirichlet_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = Exp1.sample(rng);
            x.max(1e-12)
        })
        .collect();
    let total = compensated_sum(draws.iter().copied());
    draws.iter().map(|d| d / total).collect()
}

/// Parameters of a family of language-prior-biased foil instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasedFamilySpec {
    /// Scales how likely the prior-favored caption is under both images.
    pub prior_strength: f64,
    pub n_instances: usize,
    pub seed: u64,
}

/// Smallest accepted `prior_strength`; below it the favored caption is not a
/// reliable majority continuation and no instance is built.
pub const MIN_PRIOR_STRENGTH: f64 = 0.5;

/// One two-image, two-caption model whose token likelihood prefers the
/// language-prior caption A for image B, while pointwise mutual information
/// prefers the correct caption B.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasedInstance {
    pub model: ToyModel,
    pub captions: Vec<(ItemId, TokenSequence)>,
    pub foil: FoilSample,
}

/// Generates `n_instances` biased instances.
///
/// Each model has vocabulary `{a, b, o, </s>}`, captions `A = [a, </s>]` and
/// `B = [b, </s>]`, and images `img_a`, `img_b` with a uniform prior:
///
/// - under `img_a`: `p(a) = s`, `p(b) = ε` (small),
/// - under `img_b`: `p(a) = q > p(b) = r`, with `q` proportional to `s`,
/// - after `a` or `b` both images share one row, so the second token carries no
///   image information and equal probability for both captions.
///
/// Then token likelihood ranks A above B for `img_b` because `q > r`, and PMI
/// ranks B above A because `r·s > q·ε`. Both orderings are re-checked by exact
/// evaluation before an instance is returned.
pub fn make_biased_family(spec: BiasedFamilySpec) -> Result<Vec<BiasedInstance>> {
    let s = spec.prior_strength;
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Construction(format!(
            "prior_strength must lie strictly between 0 and 1, got {s}"
        )));
    }
    if s < MIN_PRIOR_STRENGTH {
        return Err(Error::Construction(format!(
            "prior_strength {s} is below the cutoff {MIN_PRIOR_STRENGTH}"
        )));
    }
    let vocab: Vec<String> = ["a", "b", "o", DEFAULT_END_TOKEN].map(String::from).to_vec();
    let cap_a = TokenSequence::from_strs(&["a", DEFAULT_END_TOKEN])?;
    let cap_b = TokenSequence::from_strs(&["b", DEFAULT_END_TOKEN])?;

    (0..spec.n_instances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);

            let q = s * rng.random_range(0.35..0.6);
            let r = q * rng.random_range(0.3..0.8);
            let rest_b = 1.0 - q - r;
            let o_b = rest_b * rng.random_range(0.2..0.8);
            let eps = (r * s / q).min(1.0 - s) * rng.random_range(0.05..0.5);
            let rest_a = 1.0 - s - eps;
            let o_a = rest_a * rng.random_range(0.2..0.8);
            let first_a = vec![s, eps, o_a, rest_a - o_a];
            let first_b = vec![q, r, o_b, rest_b - o_b];
            let second = dirichlet_row(&mut rng, 4);

            let after = |first: Vec<f64>| {
                let mut rows = vec![(vec![], first)];
                for t in ["a", "b", "o"] {
                    rows.push((vec![t.to_owned()], second.clone()));
                }
                rows
            };
            let img_a = ItemId::new(format!("fam{i}_img_a"))?;
            let img_b = ItemId::new(format!("fam{i}_img_b"))?;
            let model = ToyModel::new(
                vocab.clone(),
                DEFAULT_END_TOKEN,
                vec![img_a, img_b.clone()],
                None,
                2,
                vec![after(normalize(first_a)), after(normalize(first_b))],
            )
            .map_err(|e| Error::Construction(e.to_string()))?;

            let id_a = ItemId::new(format!("fam{i}_cap_a"))?;
            let id_b = ItemId::new(format!("fam{i}_cap_b"))?;
            let tl_a = tl_score(&model.exact_conditional(&img_b, &cap_a)?, TlMode::ProbMean)?.value;
            let tl_b = tl_score(&model.exact_conditional(&img_b, &cap_b)?, TlMode::ProbMean)?.value;
            let pmi_a = model.exact_pmi(&img_b, &cap_a)?;
            let pmi_b = model.exact_pmi(&img_b, &cap_b)?;
            if !(tl_a > tl_b && pmi_b > pmi_a) {
                return Err(Error::Construction(format!(
                    "instance {i} violates the bias guarantee (tl {tl_a} vs {tl_b}, pmi {pmi_a} vs {pmi_b})"
                )));
            }
            Ok(BiasedInstance {
                model,
                captions: vec![(id_a.clone(), cap_a.clone()), (id_b.clone(), cap_b.clone())],
                foil: FoilSample::new(img_b, id_b, id_a, "language-prior")?,
            })
        })
        .collect()
}

/// Renormalizes with compensated summation so rows sum to 1 within rounding.
fn normalize(mut row: Vec<f64>) -> Vec<f64> {
    let s = compensated_sum(row.iter().copied());
    for x in &mut row {
        *x /= s;
    }
    row
}
