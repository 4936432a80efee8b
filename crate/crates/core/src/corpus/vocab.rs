// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed word-level vocabulary and the synthetic lexicon.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed scaffold words, in id order.
pub const SCAFFOLD: &[&str] = &[
    ":",
    "-",
    "?",
    "FROM",
    "TO",
    "PROVIDE",
    "TRANSLATION",
    "OF",
    "Q",
    "HOW",
    "SAY",
    "IN",
    "A",
    "WHAT",
    "IS",
    "TRANSLATE",
    "INTO",
    "COLOR",
    "EAT",
    "FLAVOR",
    "ROCK",
    "DISABLED",
    "NOANS",
];

/// Placeholder language that names no language.
pub const NULL_LANGUAGE: &str = "Nowhere";

/// Punctuation tokens; labelled IND alongside language names.
pub const PUNCTUATION: &[&str] = &[":", "-", "?"];

/// Maximum number of languages a vocabulary can host.
pub const MAX_LANGUAGES: usize = 3;

const LANGUAGE_NAMES: [&str; MAX_LANGUAGES] = ["LangA", "LangB", "LangC"];
const WORD_PREFIX: [&str; MAX_LANGUAGES] = ["a", "b", "c"];

/// Token ids: scaffold, language names, the null language, then one equal
/// word range per language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    n_languages: usize,
}

impl Vocabulary {
    pub fn new(n_languages: usize, size: usize) -> Result<Self> {
        if !(2..=MAX_LANGUAGES).contains(&n_languages) {
            return Err(Error::Config(format!(
                "n_languages must be 2..={MAX_LANGUAGES}, got {n_languages}"
            )));
        }
        let v = Self { size, n_languages };
        if size <= v.reserved() + n_languages {
            return Err(Error::Config(format!(
                "vocabulary of {size} tokens leaves no room for words"
            )));
        }
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_languages(&self) -> usize {
        self.n_languages
    }

    fn reserved(&self) -> usize {
        SCAFFOLD.len() + self.n_languages + 1
    }

    /// Id of a scaffold word; panics on an unknown name (programming error).
    pub fn scaffold(&self, word: &str) -> u32 {
        SCAFFOLD
            .iter()
            .position(|w| *w == word)
            .unwrap_or_else(|| panic!("unknown scaffold word {word}")) as u32
    }

    pub fn language_token(&self, language: usize) -> u32 {
        assert!(language < self.n_languages);
        (SCAFFOLD.len() + language) as u32
    }

    pub fn null_language(&self) -> u32 {
        (SCAFFOLD.len() + self.n_languages) as u32
    }

    pub fn no_answer(&self) -> u32 {
        self.scaffold("NOANS")
    }

    pub fn language_name(&self, language: usize) -> &'static str {
        LANGUAGE_NAMES[language]
    }

    pub fn is_language_token(&self, t: u32) -> bool {
        let t = t as usize;
        (SCAFFOLD.len()..=SCAFFOLD.len() + self.n_languages).contains(&t)
    }

    pub fn is_punctuation(&self, t: u32) -> bool {
        (t as usize) < SCAFFOLD.len() && PUNCTUATION.contains(&SCAFFOLD[t as usize])
    }

    /// Ids reserved for words of `language`.
    pub fn word_range(&self, language: usize) -> Range<u32> {
        let per = (self.size - self.reserved()) / self.n_languages;
        let start = self.reserved() + language * per;
        start as u32..(start + per) as u32
    }

    /// Language owning word token `t`, if any.
    pub fn word_language(&self, t: u32) -> Option<usize> {
        (0..self.n_languages).find(|&l| self.word_range(l).contains(&t))
    }

    pub fn name(&self, t: u32) -> String {
        let i = t as usize;
        if i < SCAFFOLD.len() {
            SCAFFOLD[i].to_string()
        } else if i < SCAFFOLD.len() + self.n_languages {
            LANGUAGE_NAMES[i - SCAFFOLD.len()].to_string()
        } else if t == self.null_language() {
            NULL_LANGUAGE.to_string()
        } else if let Some(l) = self.word_language(t) {
            format!("{}{}", WORD_PREFIX[l], t - self.word_range(l).start)
        } else {
            format!("<unused{i}>")
        }
    }

    /// Inverse of [`Vocabulary::name`].
    pub fn lookup(&self) -> HashMap<String, u32> {
        (0..self.size as u32).map(|t| (self.name(t), t)).collect()
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }
}

/// Translation-equivalent words, one per language, for each entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub n_languages: usize,
    /// `entries[i][language]`.
    pub entries: Vec<Vec<u32>>,
}

impl Lexicon {
    /// Draws `size` distinct words per language and pairs them by a seeded
    /// shuffle, so each entry is a bijection across languages.
    pub fn build(seed: u64, size: usize, vocab: &Vocabulary) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = vocab.n_languages();
        let mut columns = Vec::with_capacity(n);
        for l in 0..n {
            let range = vocab.word_range(l);
            if size > range.len() {
                return Err(Error::Config(format!(
                    "lexicon of {size} words exceeds the {} word ids available per language \
                     (vocabulary {})",
                    range.len(),
                    vocab.size()
                )));
            }
            let mut ids: Vec<u32> = range.collect();
            ids.shuffle(&mut rng);
            ids.truncate(size);
            columns.push(ids);
        }
        let entries = (0..size).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
        Ok(Self {
            n_languages: n,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Splits off entries `at..` as a second, disjoint lexicon.
    pub fn split(mut self, at: usize) -> (Lexicon, Lexicon) {
        let rest = self.entries.split_off(at.min(self.entries.len()));
        let n = self.n_languages;
        (
            self,
            Lexicon {
                n_languages: n,
                entries: rest,
            },
        )
    }

    pub fn word(&self, entry: usize, language: usize) -> Result<u32> {
        self.entries
            .get(entry)
            .and_then(|e| e.get(language))
            .copied()
            .ok_or_else(|| Error::invalid(format!("no lexicon word for entry {entry}, language {language}")))
    }
}
