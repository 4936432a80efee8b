// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small pre-norm decoder-only transformer with component-addressable
//! activation recording, intervention hooks and an analytic backward pass.

mod backward;
mod component;
mod config;
mod forward;
mod weights;

use std::path::Path;

pub use backward::{Example, Gradients};
pub use component::{ComponentId, ParamGroup};
pub use config::ModelConfig;
pub use forward::{subspace_mix, ActivationCache, Hook, HookAction, Position};
pub use weights::{LayerWeights, TensorSpec, Weights};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::tensorfile::{DType, TensorFile, TensorRecord};
use forward::{run, LogitRows};

/// Model weights plus their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            weights: Weights::init(&config),
            config,
        })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let specs = Weights::specs(&config);
        for (spec, t) in specs.iter().zip(weights.tensors()) {
            if spec.len() != t.len() {
                return Err(Error::mismatch(format!("tensor {}", spec.name), spec.len(), t.len()));
            }
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn checksum(&self) -> u32 {
        self.weights.checksum()
    }

    /// Full forward pass: logits at every position (`T × vocab`) and the
    /// activation cache.
    pub fn forward(&self, tokens: &[u32], hooks: &[Hook]) -> Result<(Matrix, ActivationCache)> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        let trace = run(self, &[tokens], &[tokens.len() - 1], hooks, LogitRows::All)?;
        let logits = Matrix::from_vec_unchecked(tokens.len(), self.config.vocab_size, trace.logits.clone());
        Ok((logits, trace.cache(self, 0)))
    }

    /// Caches for many sequences at once (no hooks).
    pub fn caches(&self, seqs: &[&[u32]]) -> Result<Vec<ActivationCache>> {
        let positions: Vec<usize> = seqs.iter().map(|s| s.len().saturating_sub(1)).collect();
        let trace = run(self, seqs, &positions, &[], LogitRows::Selected)?;
        Ok((0..seqs.len()).map(|b| trace.cache(self, b)).collect())
    }

    /// END-position logits for each sequence; hooks apply to every sequence.
    pub fn end_logits(&self, seqs: &[&[u32]], hooks: &[Hook]) -> Result<Vec<Vec<f64>>> {
        let positions: Vec<usize> = seqs.iter().map(|s| s.len().saturating_sub(1)).collect();
        let trace = run(self, seqs, &positions, hooks, LogitRows::Selected)?;
        let v = self.config.vocab_size;
        Ok((0..seqs.len()).map(|b| trace.selected_logits(b, v).to_vec()).collect())
    }

    /// Greedy END prediction for each sequence.
    pub fn predict(&self, seqs: &[&[u32]], hooks: &[Hook]) -> Result<Vec<u32>> {
        Ok(self.end_logits(seqs, hooks)?.iter().map(|row| argmax(row)).collect())
    }

    /// Sender → logits path patching at END.
    ///
    /// `sender` emits `patched` while every other head is frozen to its
    /// `clean_cache` value at END; MLPs and the residual stream recompute.
    pub fn path_patch_forward(
        &self,
        clean_tokens: &[u32],
        clean_cache: &ActivationCache,
        sender: ComponentId,
        patched: &Vector,
    ) -> Result<Vector> {
        Ok(self
            .path_patch_forward_with_cache(clean_tokens, clean_cache, sender, patched)?
            .0)
    }

    /// As [`Model::path_patch_forward`], also returning the patched run's cache.
    pub fn path_patch_forward_with_cache(
        &self,
        clean_tokens: &[u32],
        clean_cache: &ActivationCache,
        sender: ComponentId,
        patched: &Vector,
    ) -> Result<(Vector, ActivationCache)> {
        if !(sender.is_head() || sender.is_mlp()) {
            return Err(Error::invalid(format!("sender {sender} must be a head or an MLP")));
        }
        sender.validate(&self.config)?;
        if clean_cache.tokens != clean_tokens {
            return Err(Error::invalid("clean cache was not recorded from clean_tokens"));
        }
        let mut hooks = Vec::with_capacity(self.config.total_heads() + 1);
        for head in ComponentId::all_heads(&self.config) {
            if head != sender {
                hooks.push(Hook::new(
                    head,
                    Position::End,
                    HookAction::FreezeTo(clean_cache.activation(head, Position::End)?),
                ));
            }
        }
        hooks.push(Hook::new(sender, Position::End, HookAction::Replace(patched.clone())));
        let (logits, cache) = self.forward(clean_tokens, &hooks)?;
        let end = Vector::from_vec_unchecked(logits.row(clean_tokens.len() - 1).to_vec());
        Ok((end, cache))
    }

    /// Cross-entropy at `position` and its gradient with respect to every weight.
    pub fn backward(&self, tokens: &[u32], target: u32, position: usize) -> Result<(f64, Gradients)> {
        backward::loss_and_gradients(
            self,
            &[Example {
                tokens: tokens.to_vec(),
                position,
                target,
            }],
        )
    }

    /// Mean cross-entropy over a batch and its gradient.
    pub fn batch_backward(&self, examples: &[Example]) -> Result<(f64, Gradients)> {
        backward::loss_and_gradients(self, examples)
    }

    pub fn loss(&self, examples: &[Example]) -> Result<f64> {
        backward::loss_only(self, examples)
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let tensors = Weights::specs(&self.config)
            .into_iter()
            .zip(self.weights.tensors())
            .map(|(spec, data)| TensorRecord {
                name: spec.name,
                shape: spec.shape,
                dtype: DType::F32,
                data: data.to_vec(),
            })
            .collect();
        Ok(TensorFile {
            config: serde_json::to_value(self.config)?,
            tensors,
        })
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(file.config.clone())
            .map_err(|e| Error::Config(format!("weight header config: {e}")))?;
        config.validate()?;
        let specs = Weights::specs(&config);
        if specs.len() != file.tensors.len() {
            return Err(Error::mismatch("tensor count", specs.len(), file.tensors.len()));
        }
        let mut weights = Weights::zeros(&config);
        for ((spec, rec), slot) in specs.iter().zip(&file.tensors).zip(weights.tensors_mut()) {
            if spec.name != rec.name {
                return Err(Error::invalid(format!(
                    "tensor order: expected {}, found {}",
                    spec.name, rec.name
                )));
            }
            if spec.shape != rec.shape {
                return Err(Error::invalid(format!(
                    "tensor {} has shape {:?}, config implies {:?}",
                    rec.name, rec.shape, spec.shape
                )));
            }
            slot.copy_from_slice(&rec.data);
        }
        if !weights.all_finite() {
            return Err(Error::invalid("weight file contains non-finite values"));
        }
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

/// Index of the maximum entry; the first wins ties.
pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}
