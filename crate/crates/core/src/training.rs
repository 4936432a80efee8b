// SPDX-License-Identifier: MIT OR Apache-2.0

//! SGD training, head-targeted fine-tuning with per-layer `H/h` gradient
//! rescaling, accuracy evaluation and finite-difference gradient checks.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PromptPair;
use crate::error::{Error, Result};
use crate::model::{ComponentId, Example, Gradients, Model, ModelConfig, ParamGroup, Weights};
use crate::patching::ImportanceMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Hard cap on optimizer steps (0 = no cap).
    pub max_steps: usize,
    /// Rescale the (masked) gradient to this global norm when it is larger.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 15,
            seed: 1,
            momentum: 0.9,
            max_steps: 10_000,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Parameter groups allowed to change, and the gradient factor of each
/// layer's trainable heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableMask {
    pub groups: BTreeSet<ParamGroup>,
    /// `H / h_ℓ` for every layer with `h_ℓ > 0` trainable heads.
    pub per_layer_scale: BTreeMap<usize, f64>,
}

impl TrainableMask {
    /// Every parameter; head scale `H/H = 1`.
    pub fn full(c: &ModelConfig) -> Self {
        let groups: BTreeSet<ParamGroup> = ParamGroup::all(c).into_iter().collect();
        Self::with_groups(c, groups)
    }

    /// Only the given heads.
    pub fn heads(c: &ModelConfig, heads: &[ComponentId]) -> Result<Self> {
        let mut groups = BTreeSet::new();
        for &h in heads {
            if !h.is_head() {
                return Err(Error::invalid(format!("{h} is not an attention head")));
            }
            h.validate(c)?;
            groups.insert(ParamGroup::from(h));
        }
        if groups.is_empty() {
            return Err(Error::invalid("empty trainable mask"));
        }
        Ok(Self::with_groups(c, groups))
    }

    /// Every block at or above `from_layer`, its norms, plus the unembedding.
    pub fn upper_layers(c: &ModelConfig, from_layer: usize) -> Result<Self> {
        if from_layer >= c.n_layers {
            return Err(Error::invalid(format!(
                "from_layer {from_layer} must be below n_layers {}",
                c.n_layers
            )));
        }
        let mut groups = BTreeSet::from([ParamGroup::Unembedding]);
        for layer in from_layer..c.n_layers {
            groups.insert(ParamGroup::AttnNorm { layer });
            groups.insert(ParamGroup::Mlp { layer });
            for head in 0..c.n_heads {
                groups.insert(ParamGroup::Head { layer, head });
            }
        }
        Ok(Self::with_groups(c, groups))
    }

    fn with_groups(c: &ModelConfig, groups: BTreeSet<ParamGroup>) -> Self {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for g in &groups {
            if let ParamGroup::Head { layer, .. } = g {
                *counts.entry(*layer).or_default() += 1;
            }
        }
        let per_layer_scale = counts
            .into_iter()
            .map(|(l, h)| (l, c.n_heads as f64 / h as f64))
            .collect();
        Self {
            groups,
            per_layer_scale,
        }
    }

    pub fn heads_in_mask(&self) -> Vec<ComponentId> {
        self.groups
            .iter()
            .filter_map(|g| match *g {
                ParamGroup::Head { layer, head } => Some(ComponentId::head(layer, head)),
                _ => None,
            })
            .collect()
    }

    /// Gradient factor of a group (1 for anything but a head).
    pub fn scale_of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Head { layer, .. } => self.per_layer_scale.get(&layer).copied().unwrap_or(1.0),
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Targeted,
    Random,
    Full,
}

/// Targeted: the `k` heads with largest `|δ|`. Random: `k` heads drawn
/// uniformly from the heads outside the targeted set. Full: everything.
pub fn build_mask(
    importance: &ImportanceMap,
    k: usize,
    mode: MaskMode,
    seed: u64,
    c: &ModelConfig,
) -> Result<TrainableMask> {
    let total = c.total_heads();
    if mode == MaskMode::Full {
        return Ok(TrainableMask::full(c));
    }
    if k == 0 || k > total {
        return Err(Error::invalid(format!("k = {k} must be in 1..={total}")));
    }
    let ranked = importance.ranked_heads();
    if ranked.len() < k {
        return Err(Error::invalid(format!(
            "importance map scores {} heads, {k} requested",
            ranked.len()
        )));
    }
    let targeted: Vec<ComponentId> = ranked[..k].to_vec();
    match mode {
        MaskMode::Targeted => TrainableMask::heads(c, &targeted),
        MaskMode::Random => {
            let pool: Vec<ComponentId> = ComponentId::all_heads(c)
                .into_iter()
                .filter(|h| !targeted.contains(h))
                .collect();
            if pool.len() < k {
                return Err(Error::invalid(format!(
                    "only {} heads remain outside the targeted set, {k} requested",
                    pool.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chosen: Vec<ComponentId> = pool.choose_multiple(&mut rng, k).copied().collect();
            TrainableMask::heads(c, &chosen)
        }
        MaskMode::Full => unreachable!(),
    }
}

/// Gradient after masking: groups outside the mask zeroed, trainable heads
/// multiplied by their layer's scale (one multiplication per element).
pub fn masked_gradient(c: &ModelConfig, grads: &Gradients, mask: &TrainableMask) -> Gradients {
    let mut out = Gradients::zeros(c);
    let src = grads.weights().tensors();
    let mut dst = out.0.tensors_mut();
    for &g in &mask.groups {
        let s = mask.scale_of(g);
        for (t, range) in Weights::group_spans(c, g) {
            for i in range {
                dst[t][i] = if s == 1.0 { src[t][i] } else { src[t][i] * s };
            }
        }
    }
    out
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub log: Vec<StepRecord>,
    pub final_loss: f64,
}

/// Supervision from prompt pairs: each positive prompt predicts its target;
/// with `counterfactual_label`, each negative prompt predicts that token.
pub fn examples_from_pairs(pairs: &[&PromptPair], counterfactual_label: Option<u32>) -> Vec<Example> {
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        out.push(Example::at_end(p.positive.clone(), p.target));
        if let Some(label) = counterfactual_label {
            out.push(Example::at_end(p.negative.clone(), label));
        }
    }
    out
}

/// Trains every parameter.
pub fn train(model: &mut Model, examples: &[Example], config: &TrainConfig) -> Result<TrainReport> {
    let mask = TrainableMask::full(model.config());
    run_sgd(model, examples, config, &mask)
}

/// Trains only the parameters in `mask`, with `H/h` head rescaling.
pub fn targeted_finetune(
    model: &mut Model,
    examples: &[Example],
    mask: &TrainableMask,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if mask.groups.is_empty() {
        return Err(Error::invalid("empty trainable mask"));
    }
    run_sgd(model, examples, config, mask)
}

/// Two-stage curriculum for a pivot-centric model: every parameter on the
/// pivot directions first, then only the layers from `from_layer` up (and
/// the unembedding) on the full direction set.
pub fn pivot_curriculum(
    model: &mut Model,
    pivot_examples: &[Example],
    all_examples: &[Example],
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    from_layer: usize,
) -> Result<(TrainReport, TrainReport)> {
    let mask = TrainableMask::upper_layers(model.config(), from_layer)?;
    let first = train(model, pivot_examples, stage1)?;
    let second = run_sgd(model, all_examples, stage2, &mask)?;
    Ok((first, second))
}

fn run_sgd(model: &mut Model, examples: &[Example], config: &TrainConfig, mask: &TrainableMask) -> Result<TrainReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let c = *model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = Gradients::zeros(&c);
    let spans: Vec<_> = mask.groups.iter().flat_map(|&g| Weights::group_spans(&c, g)).collect();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut last = f64::NAN;
    'outer: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(config.batch_size) {
            if config.max_steps > 0 && step >= config.max_steps {
                break 'outer;
            }
            let batch: Vec<Example> = batch_idx.iter().map(|&i| examples[i].clone()).collect();
            let (loss, raw) = model.batch_backward(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let g = masked_gradient(&c, &raw, mask);
            let lr = match config.grad_clip {
                Some(max) if g.norm() > max => config.learning_rate * max / g.norm(),
                _ => config.learning_rate,
            };
            let mu = config.momentum;
            let gt = g.weights().tensors();
            let mut vt = velocity.0.tensors_mut();
            let mut wt = model.weights_mut().tensors_mut();
            for (t, range) in &spans {
                for i in range.clone() {
                    let v = if mu == 0.0 {
                        gt[*t][i]
                    } else {
                        mu * vt[*t][i] + gt[*t][i]
                    };
                    vt[*t][i] = v;
                    wt[*t][i] -= lr * v;
                }
            }
            log.push(StepRecord {
                step,
                loss,
                accuracy: None,
            });
            last = loss;
            step += 1;
        }
    }
    // Trained values are stored at f32 precision; frozen spans are untouched.
    {
        let mut wt = model.weights_mut().tensors_mut();
        for (t, range) in &spans {
            for x in &mut wt[*t][range.clone()] {
                *x = *x as f32 as f64;
            }
        }
    }
    if !model.weights().all_finite() {
        return Err(Error::Diverged { step, loss: f64::NAN });
    }
    Ok(TrainReport {
        steps: step,
        log,
        final_loss: last,
    })
}

/// Fraction of pairs whose greedy END prediction on the positive prompt is
/// the target.
pub fn evaluate_translation_accuracy(model: &Model, pairs: &[&PromptPair]) -> Result<f64> {
    accuracy_on(model, pairs, |p| &p.positive)
}

/// Fraction of counterfactual prompts that still yield the translation.
pub fn counterfactual_accuracy(model: &Model, pairs: &[&PromptPair]) -> Result<f64> {
    accuracy_on(model, pairs, |p| &p.negative)
}

fn accuracy_on(model: &Model, pairs: &[&PromptPair], prompt: impl Fn(&PromptPair) -> &Vec<u32>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let mut correct = 0usize;
    for chunk in pairs.chunks(128) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|p| prompt(p).as_slice()).collect();
        let preds = model.predict(&seqs, &[])?;
        correct += chunk.iter().zip(preds).filter(|(p, t)| p.target == *t).count();
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Gradient magnitude below which finite differences cannot resolve a
/// relative error in `f64`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub samples: Vec<GradCheckSample>,
}

/// Compares the model's analytic gradient against finite differences on
/// `n_samples` parameters drawn with `seed`.
pub fn grad_check(model: &Model, example: &Example, n_samples: usize, seed: u64) -> Result<GradCheckReport> {
    let (_, grads) = model.batch_backward(std::slice::from_ref(example))?;
    grad_check_against(model, example, &grads, n_samples, seed)
}

/// As [`grad_check`], against a caller-supplied gradient.
///
/// The numeric derivative is the fourth-order central difference with step
/// `h = 1e-3·max(1, |w|)`. The relative error is
/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`: gradients below the floor are
/// under the finite-difference noise level and are compared absolutely.
pub fn grad_check_against(
    model: &Model,
    example: &Example,
    analytic: &Gradients,
    n_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let n = model.weights().param_count();
    if analytic.weights().param_count() != n {
        return Err(Error::mismatch("gradient size", n, analytic.weights().param_count()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = std::slice::from_ref(example);
    let mut probe = model.clone();
    let mut samples = Vec::with_capacity(n_samples);
    let mut worst: f64 = 0.0;
    for _ in 0..n_samples {
        let index = rng.gen_range(0..n);
        let w0 = model.weights().get_flat(index);
        let h = 1e-3 * w0.abs().max(1.0);
        let mut at = |dw: f64| -> Result<f64> {
            probe.weights_mut().set_flat(index, w0 + dw);
            probe.loss(ex)
        };
        let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
        probe.weights_mut().set_flat(index, w0);
        let a = analytic.get_flat(index);
        let relative_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(relative_error);
        samples.push(GradCheckSample {
            index,
            analytic: a,
            numeric,
            relative_error,
        });
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        samples,
    })
}
