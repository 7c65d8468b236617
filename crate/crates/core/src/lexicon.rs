//! Gendered word lists, caption classification and caption neutralization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};
use crate::metrics::Gender;

const DEFAULT_LEXICON: &str = include_str!("../data/gender_lexicon.tsv");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenderLexicon {
    masculine: BTreeSet<String>,
    feminine: BTreeSet<String>,
    neutral_map: BTreeMap<String, String>,
}

fn lex_err(source: &str, line: usize, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: source.to_owned(),
        line,
        detail: detail.into(),
    }
}

/// Word segments of `s` with their byte offsets.
fn words(s: &str) -> impl Iterator<Item = (usize, &str)> {
    s.split_word_bound_indices()
        .filter(|(_, w)| w.chars().any(char::is_alphanumeric))
}

/// Splits a trailing possessive `'s` so "man's" matches "man".
fn split_possessive(word: &str) -> (&str, &str) {
    for suffix in ["'s", "\u{2019}s", "'S", "\u{2019}S"] {
        if let Some(stem) = word.strip_suffix(suffix) {
            if !stem.is_empty() {
                return (stem, &word[stem.len()..]);
            }
        }
    }
    (word, "")
}

impl GenderLexicon {
    /// Builds a lexicon from `(word, class, replacement)` triples, class `m` or `f`.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, char, &'a str)>) -> Result<Self> {
        let mut lex = Self {
            masculine: BTreeSet::new(),
            feminine: BTreeSet::new(),
            neutral_map: BTreeMap::new(),
        };
        for (word, class, replacement) in entries {
            lex.add(word, class, replacement)?;
        }
        lex.check()?;
        Ok(lex)
    }

    fn add(&mut self, word: &str, class: char, replacement: &str) -> Result<()> {
        let word = word.trim().to_lowercase();
        let replacement = replacement.trim();
        if word.is_empty() || words(&word).count() != 1 || words(&word).next().map(|(_, w)| w) != Some(word.as_str()) {
            return Err(Error::InvalidInput(format!("`{word}` is not a single word")));
        }
        if replacement.is_empty() {
            return Err(Error::InvalidInput(format!("`{word}` has an empty replacement")));
        }
        if self.neutral_map.contains_key(&word) {
            return Err(Error::InvalidInput(format!("duplicate word `{word}`")));
        }
        match class {
            'm' => self.masculine.insert(word.clone()),
            'f' => self.feminine.insert(word.clone()),
            other => return Err(Error::InvalidInput(format!("unknown class `{other}` for `{word}`"))),
        };
        self.neutral_map.insert(word, replacement.to_owned());
        Ok(())
    }

    fn check(&self) -> Result<()> {
        for (word, replacement) in &self.neutral_map {
            if let Some((_, w)) = words(replacement).find(|(_, w)| self.gender_of(w).is_some()) {
                return Err(Error::InvalidInput(format!(
                    "replacement `{replacement}` for `{word}` contains gendered word `{w}`"
                )));
            }
        }
        Ok(())
    }

    /// Parses the tab-separated format `word<TAB>m|f<TAB>replacement`; `#` starts a comment.
    pub fn parse(body: &str, source: &str) -> Result<Self> {
        let mut lex = Self {
            masculine: BTreeSet::new(),
            feminine: BTreeSet::new(),
            neutral_map: BTreeMap::new(),
        };
        for (i, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim_end();
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [word, class, replacement] = fields[..] else {
                return Err(lex_err(source, i + 1, format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let class = match class.trim() {
                "m" => 'm',
                "f" => 'f',
                other => return Err(lex_err(source, i + 1, format!("class must be m or f, got `{other}`"))),
            };
            lex.add(word, class, replacement)
                .map_err(|e| lex_err(source, i + 1, e.to_string()))?;
        }
        lex.check().map_err(|e| lex_err(source, 0, e.to_string()))?;
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&body, &path.display().to_string())
    }

    /// The bundled default list.
    pub fn default_reconstruction() -> Self {
        Self::parse(DEFAULT_LEXICON, "gender_lexicon.tsv").expect("bundled lexicon is valid")
    }

    pub fn masculine(&self) -> &BTreeSet<String> {
        &self.masculine
    }

    pub fn feminine(&self) -> &BTreeSet<String> {
        &self.feminine
    }

    pub fn replacement(&self, word: &str) -> Option<&str> {
        self.neutral_map.get(&word.to_lowercase()).map(String::as_str)
    }

    fn gender_of(&self, word: &str) -> Option<Gender> {
        let (stem, _) = split_possessive(word);
        let w = stem.to_lowercase();
        if self.masculine.contains(&w) {
            Some(Gender::Masculine)
        } else if self.feminine.contains(&w) {
            Some(Gender::Feminine)
        } else {
            None
        }
    }
}

/// Whole-word, case-insensitive gender classification of a caption.
pub fn classify_caption(caption: &str, lex: &GenderLexicon) -> Gender {
    let (mut m, mut f) = (false, false);
    for (_, w) in words(caption) {
        match lex.gender_of(w) {
            Some(Gender::Masculine) => m = true,
            Some(Gender::Feminine) => f = true,
            _ => {}
        }
    }
    match (m, f) {
        (true, true) => Gender::Both,
        (true, false) => Gender::Masculine,
        (false, true) => Gender::Feminine,
        (false, false) => Gender::Neutral,
    }
}

fn match_case(original: &str, replacement: &str) -> String {
    let letters: Vec<char> = original.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        return replacement.to_uppercase();
    }
    match original.chars().next() {
        Some(c) if c.is_uppercase() => {
            let mut chars = replacement.chars();
            chars
                .next()
                .map(|first| first.to_uppercase().chain(chars).collect())
                .unwrap_or_default()
        }
        _ => replacement.to_owned(),
    }
}

/// Replaces every gendered word by its neutral counterpart, keeping
/// punctuation, spacing and capitalization.
pub fn neutralize_caption(caption: &str, lex: &GenderLexicon) -> String {
    let mut out = String::with_capacity(caption.len());
    for seg in caption.split_word_bounds() {
        let (stem, suffix) = split_possessive(seg);
        match lex.neutral_map.get(&stem.to_lowercase()) {
            Some(rep) if seg.chars().any(char::is_alphanumeric) => {
                out.push_str(&match_case(stem, rep));
                out.push_str(suffix);
            }
            _ => out.push_str(seg),
        }
    }
    out
}
