// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use transcirc::corpus::{Corpus, CorpusConfig, PromptPair};
use transcirc::model::{Model, ModelConfig};
use transcirc::training::{examples_from_pairs, train, TrainConfig};

pub fn small_corpus() -> Corpus {
    Corpus::generate(&CorpusConfig {
        lexicon_size: 10,
        shift_size: 4,
        ..CorpusConfig::default()
    })
    .unwrap()
}

pub fn small_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_ff: 32,
        vocab_size,
        max_seq: 12,
        seed,
    }
}

/// A two-layer model trained briefly on the small corpus.
pub fn trained() -> (Corpus, Model) {
    let corpus = small_corpus();
    let mut model = Model::new(small_config(corpus.vocab.size(), 2)).unwrap();
    let train_pairs: Vec<&PromptPair> = corpus.train_pairs();
    let examples = examples_from_pairs(&train_pairs, Some(corpus.vocab.no_answer()));
    let config = TrainConfig {
        epochs: 30,
        batch_size: 16,
        ..TrainConfig::default()
    };
    train(&mut model, &examples, &config).unwrap();
    (corpus, model)
}
