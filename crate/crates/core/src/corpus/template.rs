// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt templates and their counterfactual twins.

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Perturbation {
    TargetNullification,
    ActionDistortion,
    SemanticObfuscation,
    ParadoxInsertion,
}

/// One position of a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Slot {
    Word(&'static str),
    SrcLang,
    TgtLang,
    SrcWord,
    NullLang,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Template {
    pub id: usize,
    pub pattern: Vec<Slot>,
    pub counterfactual: Vec<Slot>,
    pub perturbation: Perturbation,
}

fn parse(spec: &'static str) -> Vec<Slot> {
    spec.split_whitespace()
        .map(|w| match w {
            "{sl}" => Slot::SrcLang,
            "{tl}" => Slot::TgtLang,
            "{src}" => Slot::SrcWord,
            "{null}" => Slot::NullLang,
            other => Slot::Word(other),
        })
        .collect()
}

impl Template {
    pub fn new(
        id: usize,
        pattern: &'static str,
        counterfactual: &'static str,
        perturbation: Perturbation,
    ) -> Result<Self> {
        let t = Self {
            id,
            pattern: parse(pattern),
            counterfactual: parse(counterfactual),
            perturbation,
        };
        t.validate()?;
        Ok(t)
    }

    /// Equal length, one source slot each, 1 to 3 differing slots.
    pub fn validate(&self) -> Result<()> {
        if self.pattern.len() != self.counterfactual.len() {
            return Err(Error::invalid(format!(
                "template {}: pattern and counterfactual lengths differ ({} vs {})",
                self.id,
                self.pattern.len(),
                self.counterfactual.len()
            )));
        }
        for p in [&self.pattern, &self.counterfactual] {
            if p.iter().filter(|s| **s == Slot::SrcWord).count() != 1 {
                return Err(Error::invalid(format!(
                    "template {}: needs exactly one {{src}} slot",
                    self.id
                )));
            }
        }
        let diff = self
            .pattern
            .iter()
            .zip(&self.counterfactual)
            .filter(|(a, b)| a != b)
            .count();
        if !(1..=3).contains(&diff) {
            return Err(Error::invalid(format!(
                "template {}: counterfactual differs in {diff} slots, expected 1..=3",
                self.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pattern.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pattern.is_empty()
    }

    pub fn instantiate(
        slots: &[Slot],
        vocab: &Vocabulary,
        src_lang: usize,
        tgt_lang: usize,
        src_word: u32,
    ) -> Vec<u32> {
        slots
            .iter()
            .map(|s| match *s {
                Slot::Word(w) => vocab.scaffold(w),
                Slot::SrcLang => vocab.language_token(src_lang),
                Slot::TgtLang => vocab.language_token(tgt_lang),
                Slot::SrcWord => src_word,
                Slot::NullLang => vocab.null_language(),
            })
            .collect()
    }
}

/// The registered templates.
pub fn standard_templates() -> Vec<Template> {
    use Perturbation::*;
    let specs: [(&str, &str, Perturbation); 6] = [
        (
            "FROM {sl} : {src} TO {tl} :",
            "FROM {sl} : {src} TO {null} :",
            TargetNullification,
        ),
        (
            "PROVIDE TRANSLATION OF {src} FROM {sl} TO {tl} :",
            "PROVIDE COLOR OF {src} FROM {sl} TO {tl} :",
            ActionDistortion,
        ),
        (
            "Q HOW SAY {src} IN {tl} ? A :",
            "Q HOW EAT {src} IN {tl} ? A :",
            ActionDistortion,
        ),
        (
            "Q WHAT IS {tl} TRANSLATION {src} ? A :",
            "Q WHAT IS {tl} FLAVOR {src} ? A :",
            SemanticObfuscation,
        ),
        (
            "TRANSLATE {src} INTO {tl} :",
            "TRANSLATE {src} INTO ROCK :",
            ParadoxInsertion,
        ),
        ("{sl} : {src} - {tl} :", "{sl} : {src} - DISABLED :", ActionDistortion),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (p, c, k))| Template::new(i, p, c, k).expect("built-in template is valid"))
        .collect()
}
