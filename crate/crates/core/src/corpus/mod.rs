// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic bilingual (or trilingual) word-translation corpus: lexicon,
//! templated positive/counterfactual prompt pairs and token-type labels.

mod template;
mod vocab;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use template::{standard_templates, Perturbation, Slot, Template};
pub use vocab::{Lexicon, Vocabulary, MAX_LANGUAGES, NULL_LANGUAGE, PUNCTUATION, SCAFFOLD};

use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenType {
    #[serde(rename = "IND")]
    Ind,
    #[serde(rename = "SRC")]
    Src,
    #[serde(rename = "TGT")]
    Tgt,
    #[serde(rename = "OTHER")]
    Other,
}

impl TokenType {
    pub fn label(self) -> &'static str {
        match self {
            TokenType::Ind => "IND",
            TokenType::Src => "SRC",
            TokenType::Tgt => "TGT",
            TokenType::Other => "OTHER",
        }
    }
}

/// Source and target language indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Direction {
    pub source: usize,
    pub target: usize,
}

impl Direction {
    pub fn new(source: usize, target: usize) -> Self {
        Self { source, target }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
    pub target: u32,
    pub token_types: Vec<TokenType>,
    pub direction: Direction,
    pub template_id: usize,
    pub entry: usize,
    #[serde(default)]
    pub held_out: bool,
}

impl PromptPair {
    /// Index of the single SRC position.
    pub fn src_position(&self) -> usize {
        self.token_types
            .iter()
            .position(|t| *t == TokenType::Src)
            .expect("validated pair has a SRC position")
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive.is_empty() || self.positive.len() != self.negative.len() {
            return Err(Error::invalid(format!(
                "pair lengths differ: {} vs {}",
                self.positive.len(),
                self.negative.len()
            )));
        }
        if self.token_types.len() != self.positive.len() {
            return Err(Error::mismatch(
                "token_types",
                self.positive.len(),
                self.token_types.len(),
            ));
        }
        let n_src = self.token_types.iter().filter(|t| **t == TokenType::Src).count();
        if n_src != 1 {
            return Err(Error::invalid(format!(
                "expected exactly one SRC position, found {n_src}"
            )));
        }
        if self.positive.contains(&self.target) {
            return Err(Error::invalid("target token appears in the prompt"));
        }
        Ok(())
    }
}

/// Labels each prompt position: lexicon word → SRC, language names and
/// punctuation → IND, anything else → OTHER.
pub fn annotate_token_types(tokens: &[u32], vocab: &Vocabulary) -> Result<Vec<TokenType>> {
    let types: Vec<TokenType> = tokens
        .iter()
        .map(|&t| {
            if vocab.word_language(t).is_some() {
                TokenType::Src
            } else if vocab.is_language_token(t) || vocab.is_punctuation(t) {
                TokenType::Ind
            } else {
                TokenType::Other
            }
        })
        .collect();
    match types.iter().filter(|t| **t == TokenType::Src).count() {
        1 => Ok(types),
        0 => Err(Error::invalid("prompt has no SRC token")),
        n => Err(Error::invalid(format!("prompt has {n} SRC tokens"))),
    }
}

pub fn render_pair(
    template: &Template,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    entry: usize,
    direction: Direction,
) -> Result<PromptPair> {
    if direction.source == direction.target {
        return Err(Error::invalid("source and target language are the same"));
    }
    let src = lexicon.word(entry, direction.source)?;
    let target = lexicon.word(entry, direction.target)?;
    let positive = Template::instantiate(&template.pattern, vocab, direction.source, direction.target, src);
    let negative = Template::instantiate(&template.counterfactual, vocab, direction.source, direction.target, src);
    let token_types = annotate_token_types(&positive, vocab)?;
    let pair = PromptPair {
        positive,
        negative,
        target,
        token_types,
        direction,
        template_id: template.id,
        entry,
        held_out: false,
    };
    pair.validate()?;
    Ok(pair)
}

/// Corpus generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub n_languages: usize,
    pub lexicon_size: usize,
    /// Extra entries reserved for the distribution-shift fine-tuning set.
    pub shift_size: usize,
    pub directions: Vec<Direction>,
    /// Hold out one template per (entry, direction) for evaluation.
    pub hold_out: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vocab_size: 320,
            n_languages: 2,
            lexicon_size: 100,
            shift_size: 40,
            directions: vec![Direction::new(0, 1), Direction::new(1, 0)],
            hold_out: true,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lexicon_size == 0 {
            return Err(Error::Config("lexicon_size must be at least 1".into()));
        }
        if self.directions.is_empty() {
            return Err(Error::Config("at least one direction is required".into()));
        }
        for d in &self.directions {
            if d.source >= self.n_languages || d.target >= self.n_languages || d.source == d.target {
                return Err(Error::Config(format!(
                    "invalid direction {} -> {} for {} languages",
                    d.source, d.target, self.n_languages
                )));
            }
        }
        Ok(())
    }
}

/// Everything generated from one [`CorpusConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub lexicon: Lexicon,
    pub shift_lexicon: Lexicon,
    pub templates: Vec<Template>,
    pub pairs: Vec<PromptPair>,
    pub shift_pairs: Vec<PromptPair>,
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(config.n_languages, config.vocab_size)?;
        let full = Lexicon::build(config.seed, config.lexicon_size + config.shift_size, &vocab)?;
        let (lexicon, shift_lexicon) = full.split(config.lexicon_size);
        let templates = standard_templates();
        let max_len = templates.iter().map(Template::len).max().unwrap_or(0);
        if max_len > 0 && vocab.size() < max_len {
            return Err(Error::Config("vocabulary smaller than a prompt".into()));
        }
        let pairs = render_all(
            &templates,
            &vocab,
            &lexicon,
            &config.directions,
            config.hold_out,
            config.seed,
        )?;
        let shift_pairs = render_all(
            &templates,
            &vocab,
            &shift_lexicon,
            &config.directions,
            config.hold_out,
            config.seed ^ 0x5348_4946_5400,
        )?;
        Ok(Self {
            vocab,
            lexicon,
            shift_lexicon,
            templates,
            pairs,
            shift_pairs,
        })
    }

    pub fn train_pairs(&self) -> Vec<&PromptPair> {
        self.pairs.iter().filter(|p| !p.held_out).collect()
    }

    pub fn held_out_pairs(&self) -> Vec<&PromptPair> {
        self.pairs.iter().filter(|p| p.held_out).collect()
    }
}

/// Renders every (entry, direction, template) combination in that order.
/// With `hold_out`, one template per (entry, direction), drawn from a
/// per-index random stream, is marked held out.
pub fn render_all(
    templates: &[Template],
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    directions: &[Direction],
    hold_out: bool,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    let mut out = Vec::with_capacity(lexicon.len() * directions.len() * templates.len());
    for entry in 0..lexicon.len() {
        for (di, &dir) in directions.iter().enumerate() {
            let held = if hold_out && templates.len() > 1 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((entry * directions.len() + di) as u64);
                Some(rng.gen_range(0..templates.len()))
            } else {
                None
            };
            for (ti, t) in templates.iter().enumerate() {
                let mut pair = render_pair(t, vocab, lexicon, entry, dir)?;
                pair.held_out = held == Some(ti);
                out.push(pair);
            }
        }
    }
    Ok(out)
}

/// Keeps pairs whose greedy END prediction on the positive prompt equals
/// the target; returns them with the retention rate.
pub fn filter_positive(model: &Model, pairs: &[PromptPair]) -> Result<(Vec<PromptPair>, f64)> {
    if pairs.is_empty() {
        return Ok((Vec::new(), 0.0));
    }
    let seqs: Vec<&[u32]> = pairs.iter().map(|p| p.positive.as_slice()).collect();
    let preds = model.predict(&seqs, &[])?;
    let kept: Vec<PromptPair> = pairs
        .iter()
        .zip(preds)
        .filter(|(p, pred)| *pred == p.target)
        .map(|(p, _)| p.clone())
        .collect();
    let rate = kept.len() as f64 / pairs.len() as f64;
    Ok((kept, rate))
}

pub fn write_jsonl(path: impl AsRef<Path>, pairs: &[PromptPair]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<PromptPair>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PromptPair =
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("dataset line {}: {e}", i + 1)))?;
        pair.validate()
            .map_err(|e| Error::invalid(format!("dataset line {}: {e}", i + 1)))?;
        out.push(pair);
    }
    Ok(out)
}
