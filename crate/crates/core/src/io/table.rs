use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{atomic_write, fmt_f64, json_str, read_lines, write_digest};
use crate::error::{Error, Result, TableErrorKind};
use crate::scalar::Scalar;
use crate::similarity::{
    EmbeddingVector, ItemId, ItmLogit, TokenLogProbs, TokenSequence, VqaYesNoLogProbs,
    LOGP_TOLERANCE,
};

/// Which encoder an embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    fn as_str(self) -> &'static str {
        match self {
            Self::Image => "image",
            Self::Text => "text",
        }
    }
}

/// Image-text matching head output stored for a pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ItmEntry<S: Scalar = f64> {
    Logit(ItmLogit<S>),
    Vqa(VqaYesNoLogProbs<S>),
}

/// A table invariant broken by an insertion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableViolation {
    pub kind: TableErrorKind,
    pub detail: String,
}

impl TableViolation {
    fn new(kind: TableErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }

    fn at(self, path: &Path, line: usize) -> Error {
        Error::Table {
            path: path.display().to_string(),
            line,
            kind: self.kind,
            detail: self.detail,
        }
    }
}

impl From<TableViolation> for Error {
    fn from(v: TableViolation) -> Self {
        Error::Table {
            path: "<memory>".into(),
            line: 0,
            kind: v.kind,
            detail: v.detail,
        }
    }
}

/// Model outputs keyed by `(image, text)`: token log-probs for every pair,
/// plus optional embeddings and ITM head outputs.
///
/// The image id `null` is reserved for the black-filled null image and may
/// never be used as a text id.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTable<S: Scalar = f64> {
    entries: BTreeMap<(ItemId, ItemId), TokenLogProbs<S>>,
    texts: BTreeMap<ItemId, TokenSequence>,
    image_embeddings: BTreeMap<ItemId, EmbeddingVector<S>>,
    text_embeddings: BTreeMap<ItemId, EmbeddingVector<S>>,
    itm: BTreeMap<(ItemId, ItemId), ItmEntry<S>>,
}

impl<S: Scalar> Default for ConditionalTable<S> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            texts: BTreeMap::new(),
            image_embeddings: BTreeMap::new(),
            text_embeddings: BTreeMap::new(),
            itm: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> ConditionalTable<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        image: ItemId,
        text: ItemId,
        tokens: TokenSequence,
        logp: TokenLogProbs<S>,
    ) -> Result<(), TableViolation> {
        if text.is_null() {
            return Err(TableViolation::new(
                TableErrorKind::ReservedId,
                "reserved id `null` used as a text id",
            ));
        }
        if tokens.len() != logp.len() {
            return Err(TableViolation::new(
                TableErrorKind::LengthMismatch,
                format!("{} tokens but {} log-probs", tokens.len(), logp.len()),
            ));
        }
        if let Some(known) = self.texts.get(&text) {
            if known != &tokens {
                return Err(TableViolation::new(
                    TableErrorKind::TokenMismatch,
                    format!("text `{text}` has tokens that differ from an earlier record"),
                ));
            }
        }
        match self.entries.entry((image, text.clone())) {
            Entry::Occupied(e) => Err(TableViolation::new(
                TableErrorKind::DuplicateKey,
                format!("duplicate key ({}, {})", e.key().0, e.key().1),
            )),
            Entry::Vacant(e) => {
                e.insert(logp);
                self.texts.entry(text).or_insert(tokens);
                Ok(())
            }
        }
    }

    pub fn insert_embedding(
        &mut self,
        id: ItemId,
        modality: Modality,
        vec: EmbeddingVector<S>,
    ) -> Result<(), TableViolation> {
        let map = match modality {
            Modality::Image => &mut self.image_embeddings,
            Modality::Text => &mut self.text_embeddings,
        };
        if let Some(existing) = map.values().next() {
            if existing.dim() != vec.dim() {
                return Err(TableViolation::new(
                    TableErrorKind::Embedding,
                    format!(
                        "{} embedding `{id}` has dim {}, expected {}",
                        modality.as_str(),
                        vec.dim(),
                        existing.dim()
                    ),
                ));
            }
        }
        if map.contains_key(&id) {
            return Err(TableViolation::new(
                TableErrorKind::DuplicateKey,
                format!("duplicate {} embedding `{id}`", modality.as_str()),
            ));
        }
        map.insert(id, vec);
        Ok(())
    }

    pub fn insert_itm(
        &mut self,
        image: ItemId,
        text: ItemId,
        value: ItmEntry<S>,
    ) -> Result<(), TableViolation> {
        if text.is_null() {
            return Err(TableViolation::new(
                TableErrorKind::ReservedId,
                "reserved id `null` used as a text id",
            ));
        }
        match self.itm.entry((image, text)) {
            Entry::Occupied(e) => Err(TableViolation::new(
                TableErrorKind::DuplicateKey,
                format!("duplicate ITM key ({}, {})", e.key().0, e.key().1),
            )),
            Entry::Vacant(e) => {
                e.insert(value);
                Ok(())
            }
        }
    }

    /// Adds every record of `other`; any clash is reported as for single inserts.
    pub fn merge(&mut self, other: &Self) -> Result<(), TableViolation> {
        for ((image, text), logp) in &other.entries {
            let tokens = other.texts[text].clone();
            self.insert(image.clone(), text.clone(), tokens, logp.clone())?;
        }
        for (id, v) in &other.image_embeddings {
            self.insert_embedding(id.clone(), Modality::Image, v.clone())?;
        }
        for (id, v) in &other.text_embeddings {
            self.insert_embedding(id.clone(), Modality::Text, v.clone())?;
        }
        for ((image, text), v) in &other.itm {
            self.insert_itm(image.clone(), text.clone(), *v)?;
        }
        Ok(())
    }

    pub fn conditional(&self, image: &ItemId, text: &ItemId) -> Option<&TokenLogProbs<S>> {
        self.entries.get(&(image.clone(), text.clone()))
    }

    pub fn tokens(&self, text: &ItemId) -> Option<&TokenSequence> {
        self.texts.get(text)
    }

    pub fn image_embedding(&self, id: &ItemId) -> Option<&EmbeddingVector<S>> {
        self.image_embeddings.get(id)
    }

    pub fn text_embedding(&self, id: &ItemId) -> Option<&EmbeddingVector<S>> {
        self.text_embeddings.get(id)
    }

    pub fn itm(&self, image: &ItemId, text: &ItemId) -> Option<&ItmEntry<S>> {
        self.itm.get(&(image.clone(), text.clone()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ItemId, &ItemId, &TokenLogProbs<S>)> {
        self.entries.iter().map(|((i, t), v)| (i, t, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Text ids, sorted.
    pub fn texts(&self) -> impl Iterator<Item = &ItemId> {
        self.texts.keys()
    }

    /// Distinct non-null image ids with at least one row, sorted.
    pub fn images(&self) -> Vec<&ItemId> {
        let set: BTreeSet<&ItemId> = self
            .entries
            .keys()
            .map(|(i, _)| i)
            .filter(|i| !i.is_null())
            .collect();
        set.into_iter().collect()
    }

    /// Non-null images with a row for `text`, sorted.
    pub fn images_for_text<'a>(&'a self, text: &'a ItemId) -> impl Iterator<Item = &'a ItemId> {
        self.entries
            .keys()
            .filter(move |(i, t)| t == text && !i.is_null())
            .map(|(i, _)| i)
    }

    pub fn image_embedding_ids(&self) -> impl Iterator<Item = &ItemId> {
        self.image_embeddings.keys()
    }

    pub fn text_embedding_ids(&self) -> impl Iterator<Item = &ItemId> {
        self.text_embeddings.keys()
    }

    pub fn itm_pairs(&self) -> impl Iterator<Item = (&ItemId, &ItemId)> {
        self.itm.keys().map(|(i, t)| (i, t))
    }

    pub fn has_embeddings(&self) -> bool {
        !self.image_embeddings.is_empty() || !self.text_embeddings.is_empty()
    }

    pub fn has_itm(&self) -> bool {
        !self.itm.is_empty()
    }
}

/// Sidecar file paths derived from the main table path `<base>.jsonl`.
#[derive(Debug, Clone)]
pub struct TablePaths {
    pub main: PathBuf,
    pub embeddings: PathBuf,
    pub itm: PathBuf,
}

impl TablePaths {
    pub fn new(main: &Path) -> Self {
        let name = main
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let base = name.strip_suffix(".jsonl").unwrap_or(&name).to_owned();
        Self {
            main: main.to_path_buf(),
            embeddings: main.with_file_name(format!("{base}.emb.jsonl")),
            itm: main.with_file_name(format!("{base}.itm.jsonl")),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    image: String,
    text: String,
    tokens: Vec<String>,
    logp: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRecord {
    id: String,
    vec: Vec<f64>,
    #[serde(default)]
    modality: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ItmRecord {
    image: String,
    text: String,
    #[serde(default)]
    logit: Option<f64>,
    #[serde(default)]
    lp_yes: Option<f64>,
    #[serde(default)]
    lp_no: Option<f64>,
}

fn parse_id(raw: String, field: &str) -> Result<ItemId, TableViolation> {
    ItemId::new(raw)
        .map_err(|_| TableViolation::new(TableErrorKind::ReservedId, format!("`{field}` is empty")))
}

fn parse_record<'de, T: Deserialize<'de>>(line: &'de str) -> Result<T, TableViolation> {
    serde_json::from_str(line).map_err(|e| TableViolation::new(TableErrorKind::Parse, e.to_string()))
}

fn entry_from_record(rec: EntryRecord) -> Result<(ItemId, ItemId, TokenSequence, TokenLogProbs), TableViolation> {
    let image = parse_id(rec.image, "image")?;
    let text = parse_id(rec.text, "text")?;
    if rec.tokens.is_empty() || rec.tokens.len() != rec.logp.len() {
        return Err(TableViolation::new(
            TableErrorKind::LengthMismatch,
            format!("{} tokens but {} log-probs", rec.tokens.len(), rec.logp.len()),
        ));
    }
    for (t, &v) in rec.logp.iter().enumerate() {
        if !v.is_finite() {
            return Err(TableViolation::new(
                TableErrorKind::NonFinite,
                format!("logp[{t}] is not finite"),
            ));
        }
        if v > LOGP_TOLERANCE {
            return Err(TableViolation::new(
                TableErrorKind::PositiveLogProb,
                format!("logp[{t}] = {v} exceeds 0"),
            ));
        }
    }
    let tokens = TokenSequence::new(rec.tokens)
        .map_err(|e| TableViolation::new(TableErrorKind::Parse, e.to_string()))?;
    let logp = TokenLogProbs::new(rec.logp)
        .map_err(|e| TableViolation::new(TableErrorKind::Parse, e.to_string()))?;
    Ok((image, text, tokens, logp))
}

/// Loads and validates a table together with any `.emb.jsonl` / `.itm.jsonl`
/// sidecars next to it. Every violation names the file and 1-based line.
pub fn load_table(path: impl AsRef<Path>) -> Result<ConditionalTable> {
    let paths = TablePaths::new(path.as_ref());
    let mut table = ConditionalTable::new();

    for (line_no, line) in read_lines(&paths.main)? {
        let rec: EntryRecord = parse_record(&line).map_err(|v| v.at(&paths.main, line_no))?;
        let (image, text, tokens, logp) =
            entry_from_record(rec).map_err(|v| v.at(&paths.main, line_no))?;
        table
            .insert(image, text, tokens, logp)
            .map_err(|v| v.at(&paths.main, line_no))?;
    }

    if paths.embeddings.exists() {
        for (line_no, line) in read_lines(&paths.embeddings)? {
            let at = |v: TableViolation| v.at(&paths.embeddings, line_no);
            let rec: EmbeddingRecord = parse_record(&line).map_err(at)?;
            let id = parse_id(rec.id, "id").map_err(at)?;
            let modality = match rec.modality.as_deref() {
                Some("image") => Modality::Image,
                Some("text") => Modality::Text,
                Some(other) => {
                    return Err(at(TableViolation::new(
                        TableErrorKind::Parse,
                        format!("unknown modality `{other}`"),
                    )))
                }
                None if table.tokens(&id).is_some() => Modality::Text,
                None if table.images().contains(&&id) => Modality::Image,
                None => {
                    return Err(at(TableViolation::new(
                        TableErrorKind::Embedding,
                        format!("cannot infer modality of `{id}`"),
                    )))
                }
            };
            if modality == Modality::Image && id.is_null() {
                return Err(at(TableViolation::new(
                    TableErrorKind::ReservedId,
                    "embedding for reserved id `null`",
                )));
            }
            let vec = EmbeddingVector::new(rec.vec)
                .map_err(|e| at(TableViolation::new(TableErrorKind::Embedding, e.to_string())))?;
            table.insert_embedding(id, modality, vec).map_err(at)?;
        }
    }

    if paths.itm.exists() {
        for (line_no, line) in read_lines(&paths.itm)? {
            let at = |v: TableViolation| v.at(&paths.itm, line_no);
            let rec: ItmRecord = parse_record(&line).map_err(at)?;
            let image = parse_id(rec.image, "image").map_err(at)?;
            let text = parse_id(rec.text, "text").map_err(at)?;
            let value = match (rec.logit, rec.lp_yes, rec.lp_no) {
                (Some(z), None, None) if z.is_finite() => ItmEntry::Logit(ItmLogit(z)),
                (None, Some(y), Some(n)) => {
                    if !(y.is_finite() && n.is_finite()) {
                        return Err(at(TableViolation::new(
                            TableErrorKind::NonFinite,
                            "yes/no log-probs must be finite",
                        )));
                    }
                    if y > LOGP_TOLERANCE || n > LOGP_TOLERANCE {
                        return Err(at(TableViolation::new(
                            TableErrorKind::PositiveLogProb,
                            "yes/no log-probs must be <= 0",
                        )));
                    }
                    ItmEntry::Vqa(VqaYesNoLogProbs {
                        logp_yes: y,
                        logp_no: n,
                    })
                }
                _ => {
                    return Err(at(TableViolation::new(
                        TableErrorKind::Parse,
                        "expected either `logit` or both `lp_yes` and `lp_no`",
                    )))
                }
            };
            table.insert_itm(image, text, value).map_err(at)?;
        }
    }
    Ok(table)
}

/// Canonical serialization of the main table: records sorted by key, floats
/// printed with 17 significant digits.
pub fn render_table(table: &ConditionalTable) -> String {
    let mut out = String::new();
    for ((image, text), logp) in &table.entries {
        let tokens = table.texts[text].tokens();
        let toks: Vec<String> = tokens.iter().map(|t| json_str(t)).collect();
        let vals: Vec<String> = logp.values().iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&format!(
            "{{\"image\":{},\"text\":{},\"tokens\":[{}],\"logp\":[{}]}}\n",
            json_str(image.as_str()),
            json_str(text.as_str()),
            toks.join(","),
            vals.join(",")
        ));
    }
    out
}

fn render_embeddings(table: &ConditionalTable) -> String {
    let mut out = String::new();
    for (modality, map) in [
        (Modality::Image, &table.image_embeddings),
        (Modality::Text, &table.text_embeddings),
    ] {
        for (id, vec) in map {
            let vals: Vec<String> = vec.values().iter().map(|&v| fmt_f64(v)).collect();
            out.push_str(&format!(
                "{{\"id\":{},\"modality\":\"{}\",\"vec\":[{}]}}\n",
                json_str(id.as_str()),
                modality.as_str(),
                vals.join(",")
            ));
        }
    }
    out
}

fn render_itm(table: &ConditionalTable) -> String {
    let mut out = String::new();
    for ((image, text), value) in &table.itm {
        let body = match value {
            ItmEntry::Logit(z) => format!("\"logit\":{}", fmt_f64(z.0)),
            ItmEntry::Vqa(v) => format!(
                "\"lp_yes\":{},\"lp_no\":{}",
                fmt_f64(v.logp_yes),
                fmt_f64(v.logp_no)
            ),
        };
        out.push_str(&format!(
            "{{\"image\":{},\"text\":{},{body}}}\n",
            json_str(image.as_str()),
            json_str(text.as_str())
        ));
    }
    out
}

/// Writes the table and its non-empty sidecars atomically, each followed by a
/// `.digest` file.
pub fn save_table(table: &ConditionalTable, path: impl AsRef<Path>) -> Result<()> {
    let paths = TablePaths::new(path.as_ref());
    let main = render_table(table);
    atomic_write(&paths.main, main.as_bytes())?;
    write_digest(&paths.main, main.as_bytes())?;
    if table.has_embeddings() {
        let body = render_embeddings(table);
        atomic_write(&paths.embeddings, body.as_bytes())?;
        write_digest(&paths.embeddings, body.as_bytes())?;
    }
    if table.has_itm() {
        let body = render_itm(table);
        atomic_write(&paths.itm, body.as_bytes())?;
        write_digest(&paths.itm, body.as_bytes())?;
    }
    Ok(())
}
