// SPDX-License-Identifier: MIT OR Apache-2.0

//! Path patching (full and subspace-restricted), crucial-component
//! detection and mean-ablation knockouts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PromptPair;
use crate::error::{Error, Result};
use crate::model::{subspace_mix, ActivationCache, ComponentId, Hook, HookAction, Model, Position};
use crate::numerics::{Matrix, Vector};
use crate::subspace::SubspaceStore;

/// How a logit change is turned into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `(y_new − y_orig) / (y_orig + ε)`.
    #[default]
    Relative,
    /// `y_new − y_orig`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchingConfig {
    pub epsilon: f64,
    pub head_threshold: f64,
    pub mlp_threshold: f64,
    pub metric: Metric,
    /// Average flagged (`y_orig ≤ ε`) pairs too.
    pub include_flagged: bool,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            head_threshold: 0.01,
            mlp_threshold: 0.05,
            metric: Metric::Relative,
            include_flagged: false,
        }
    }
}

impl PatchingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("head_threshold", self.head_threshold),
            ("mlp_threshold", self.mlp_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Score of one (pair, component) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub delta: f64,
    /// `y_orig ≤ ε`: the relative change used `|y_orig| + ε`.
    pub flagged: bool,
    pub y_orig: f64,
    pub y_new: f64,
}

pub fn relative_change(y_orig: f64, y_new: f64, config: &PatchingConfig) -> PairScore {
    let flagged = y_orig <= config.epsilon;
    let delta = match config.metric {
        Metric::Absolute => y_new - y_orig,
        Metric::Relative if flagged => (y_new - y_orig) / (y_orig.abs() + config.epsilon),
        Metric::Relative => (y_new - y_orig) / (y_orig + config.epsilon),
    };
    PairScore {
        delta,
        flagged: flagged && config.metric == Metric::Relative,
        y_orig,
        y_new,
    }
}

/// Clean-run state shared by every component of one pair.
pub struct PairContext<'a> {
    pub pair: &'a PromptPair,
    pub clean: ActivationCache,
    pub counterfactual: ActivationCache,
    pub y_orig: f64,
}

impl<'a> PairContext<'a> {
    pub fn new(model: &Model, pair: &'a PromptPair) -> Result<Self> {
        let (logits, clean) = model.forward(&pair.positive, &[])?;
        let (_, counterfactual) = model.forward(&pair.negative, &[])?;
        let y_orig = logits[(clean.end(), pair.target as usize)];
        Ok(Self {
            pair,
            clean,
            counterfactual,
            y_orig,
        })
    }

    fn score_with(
        &self,
        model: &Model,
        component: ComponentId,
        patched: &Vector,
        config: &PatchingConfig,
    ) -> Result<PairScore> {
        let logits = model.path_patch_forward(&self.pair.positive, &self.clean, component, patched)?;
        Ok(relative_change(self.y_orig, logits[self.pair.target as usize], config))
    }

    /// Subspace-restricted patch: `W Wᵀ a(X₋) + (I − W Wᵀ) a(X₊)`.
    pub fn subspace_score(
        &self,
        model: &Model,
        component: ComponentId,
        basis: &Matrix,
        config: &PatchingConfig,
    ) -> Result<PairScore> {
        let current = self.clean.activation(component, Position::End)?;
        let cf = self.counterfactual.activation(component, Position::End)?;
        if basis.rows() != current.dim() {
            return Err(Error::mismatch("patch basis rows", current.dim(), basis.rows()));
        }
        self.score_with(model, component, &subspace_mix(basis, &cf, &current), config)
    }

    /// Full replacement by `a(X₋)`.
    pub fn standard_score(&self, model: &Model, component: ComponentId, config: &PatchingConfig) -> Result<PairScore> {
        let cf = self.counterfactual.activation(component, Position::End)?;
        self.score_with(model, component, &cf, config)
    }
}

pub fn subspace_patch_score(
    model: &Model,
    pair: &PromptPair,
    component: ComponentId,
    basis: &Matrix,
    config: &PatchingConfig,
) -> Result<PairScore> {
    PairContext::new(model, pair)?.subspace_score(model, component, basis, config)
}

pub fn standard_patch_score(
    model: &Model,
    pair: &PromptPair,
    component: ComponentId,
    config: &PatchingConfig,
) -> Result<PairScore> {
    PairContext::new(model, pair)?.standard_score(model, component, config)
}

/// Which activation replaces the sender.
#[derive(Debug, Clone, Copy)]
pub enum PatchMode<'a> {
    Standard,
    Subspace(&'a SubspaceStore),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub component: ComponentId,
    pub delta: f64,
    /// Per-pair scores that entered the mean, in ascending pair order.
    pub per_pair: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub scores: Vec<ComponentScore>,
    pub n_pairs: usize,
    /// Indices of pairs with `y_orig ≤ ε`.
    pub flagged_pairs: Vec<usize>,
}

impl ImportanceMap {
    pub fn get(&self, c: ComponentId) -> Option<f64> {
        self.scores.iter().find(|s| s.component == c).map(|s| s.delta)
    }

    /// Pairs that entered each mean.
    pub fn n_used(&self) -> usize {
        self.scores.first().map_or(0, |s| s.per_pair.len())
    }

    /// Every scored head ordered by `|δ|` descending, ties in component order.
    pub fn ranked_heads(&self) -> Vec<ComponentId> {
        let mut heads: Vec<&ComponentScore> = self.scores.iter().filter(|s| s.component.is_head()).collect();
        heads.sort_by(|a, b| {
            b.delta
                .abs()
                .total_cmp(&a.delta.abs())
                .then(a.component.cmp(&b.component))
        });
        heads.into_iter().map(|s| s.component).collect()
    }

    /// CSV with columns `layer,head,kind,delta,n_pairs`; `-1` marks a
    /// missing layer or head index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,kind,delta,n_pairs\n");
        for s in &self.scores {
            let (layer, head) = match s.component {
                ComponentId::Head { layer, head } => (layer as i64, head as i64),
                ComponentId::Mlp { layer } => (layer as i64, -1),
                _ => (-1, -1),
            };
            out.push_str(&format!(
                "{layer},{head},{},{},{}\n",
                s.component.kind_name(),
                s.delta,
                s.per_pair.len()
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Scores every component on every pair and averages per component.
///
/// Pairs are processed in parallel on the current rayon pool; the reduction
/// runs in ascending pair order, so the result does not depend on the
/// number of threads.
pub fn run_patching(
    model: &Model,
    pairs: &[PromptPair],
    components: &[ComponentId],
    mode: PatchMode<'_>,
    config: &PatchingConfig,
) -> Result<ImportanceMap> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to patch"));
    }
    let mut seen = BTreeSet::new();
    for &c in components {
        if !(c.is_head() || c.is_mlp()) {
            return Err(Error::invalid(format!("{c} cannot be a path-patching sender")));
        }
        c.validate(model.config())?;
        if !seen.insert(c) {
            return Err(Error::invalid(format!("component {c} listed twice")));
        }
    }
    let bases: Vec<Option<Matrix>> = match mode {
        PatchMode::Standard => vec![None; components.len()],
        PatchMode::Subspace(store) => components
            .iter()
            .map(|&c| {
                store
                    .get(c)
                    .map(|s| Some(s.w.clone()))
                    .ok_or_else(|| Error::Missing(format!("no subspace record for {c}")))
            })
            .collect::<Result<_>>()?,
    };

    let grid: Vec<Result<Vec<PairScore>>> = pairs
        .par_iter()
        .map(|pair| {
            let ctx = PairContext::new(model, pair)?;
            components
                .iter()
                .zip(&bases)
                .map(|(&c, basis)| match basis {
                    Some(w) => ctx.subspace_score(model, c, w, config),
                    None => ctx.standard_score(model, c, config),
                })
                .collect()
        })
        .collect();
    let grid: Vec<Vec<PairScore>> = grid.into_iter().collect::<Result<_>>()?;

    let flagged_pairs: Vec<usize> = grid
        .iter()
        .enumerate()
        .filter(|(_, row)| row.first().is_some_and(|s| s.flagged))
        .map(|(i, _)| i)
        .collect();
    let used: Vec<usize> = (0..pairs.len())
        .filter(|i| config.include_flagged || flagged_pairs.binary_search(i).is_err())
        .collect();
    if used.is_empty() {
        return Err(Error::Degenerate("every pair was flagged (target logit ≤ ε)".into()));
    }
    let scores = components
        .iter()
        .enumerate()
        .map(|(ci, &component)| {
            let per_pair: Vec<f64> = used.iter().map(|&i| grid[i][ci].delta).collect();
            let delta = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
            ComponentScore {
                component,
                delta,
                per_pair,
            }
        })
        .collect();
    Ok(ImportanceMap {
        scores,
        n_pairs: pairs.len(),
        flagged_pairs,
    })
}

/// Heads over `head_threshold` and MLPs over `mlp_threshold` in `|δ|`,
/// strongest first, ties in (layer, index) order.
pub fn detect_crucial(importance: &ImportanceMap, config: &PatchingConfig) -> Vec<ComponentId> {
    let mut out: Vec<(ComponentId, f64)> = importance
        .scores
        .iter()
        .filter(|s| match s.component {
            ComponentId::Head { .. } => s.delta.abs() > config.head_threshold,
            ComponentId::Mlp { .. } => s.delta.abs() > config.mlp_threshold,
            _ => false,
        })
        .map(|s| (s.component, s.delta.abs()))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out.into_iter().map(|(c, _)| c).collect()
}

/// END-position mean activation of each component over the counterfactual
/// prompts.
pub fn counterfactual_means(
    model: &Model,
    pairs: &[PromptPair],
    components: &[ComponentId],
) -> Result<BTreeMap<ComponentId, Vector>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs for mean activations"));
    }
    let d = model.config().d_model;
    let mut sums: Vec<Vector> = components.iter().map(|_| Vector::zeros(d)).collect();
    for chunk in pairs.chunks(64) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|p| p.negative.as_slice()).collect();
        for cache in model.caches(&seqs)? {
            for (sum, &c) in sums.iter_mut().zip(components) {
                let a = cache.activation(c, Position::End)?;
                for i in 0..d {
                    sum[i] += a[i];
                }
            }
        }
    }
    let n = pairs.len() as f64;
    Ok(components
        .iter()
        .zip(sums)
        .map(|(&c, s)| (c, s.scaled(1.0 / n)))
        .collect())
}

/// Fraction of pairs whose positive-prompt END prediction equals the
/// target while every knocked-out component is replaced by its mean.
pub fn mean_ablate(
    model: &Model,
    eval_pairs: &[PromptPair],
    knockout: &[ComponentId],
    means: &BTreeMap<ComponentId, Vector>,
) -> Result<f64> {
    if eval_pairs.is_empty() {
        return Err(Error::invalid("no evaluation pairs"));
    }
    let hooks = knockout
        .iter()
        .map(|&c| {
            means
                .get(&c)
                .map(|m| Hook::new(c, Position::End, HookAction::MeanAblate(m.clone())))
                .ok_or_else(|| Error::Missing(format!("no mean activation for {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut correct = 0usize;
    for chunk in eval_pairs.chunks(64) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|p| p.positive.as_slice()).collect();
        let preds = model.predict(&seqs, &hooks)?;
        correct += chunk.iter().zip(preds).filter(|(p, t)| p.target == *t).count();
    }
    Ok(correct as f64 / eval_pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutPoint {
    pub k: usize,
    pub crucial_accuracy: f64,
    pub random_mean: f64,
    pub random_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutCurve {
    pub ranked: Vec<ComponentId>,
    pub points: Vec<KnockoutPoint>,
    /// Random head sets used at each k, per trial.
    pub random_sets: Vec<Vec<Vec<ComponentId>>>,
}

impl KnockoutCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,crucial_accuracy,random_mean,random_std\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.k, p.crucial_accuracy, p.random_mean, p.random_std
            ));
        }
        out
    }
}

/// Accuracy after knocking out the top-`k` ranked heads for `k = 0..=k_max`,
/// against random same-size head sets drawn from heads outside the top
/// `k_max`.
pub fn knockout_curve(
    model: &Model,
    eval_pairs: &[PromptPair],
    ranked: &[ComponentId],
    k_max: usize,
    n_random_trials: usize,
    seed: u64,
    means: &BTreeMap<ComponentId, Vector>,
) -> Result<KnockoutCurve> {
    if k_max > ranked.len() {
        return Err(Error::invalid(format!(
            "k = {k_max} exceeds the {} ranked components",
            ranked.len()
        )));
    }
    let excluded: BTreeSet<ComponentId> = ranked[..k_max].iter().copied().collect();
    let pool: Vec<ComponentId> = ComponentId::all_heads(model.config())
        .into_iter()
        .filter(|h| !excluded.contains(h))
        .collect();
    if k_max > pool.len() && n_random_trials > 0 {
        return Err(Error::invalid(format!(
            "k = {k_max} exceeds the {} heads available for random sets",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(k_max + 1);
    let mut random_sets = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let crucial_accuracy = mean_ablate(model, eval_pairs, &ranked[..k], means)?;
        let mut accs = Vec::with_capacity(n_random_trials);
        let mut sets = Vec::with_capacity(n_random_trials);
        for _ in 0..n_random_trials {
            let mut set: Vec<ComponentId> = pool.choose_multiple(&mut rng, k).copied().collect();
            set.sort();
            accs.push(mean_ablate(model, eval_pairs, &set, means)?);
            sets.push(set);
        }
        let (random_mean, random_std) = mean_std(&accs);
        points.push(KnockoutPoint {
            k,
            crucial_accuracy,
            random_mean,
            random_std,
        });
        random_sets.push(sets);
    }
    Ok(KnockoutCurve {
        ranked: ranked.to_vec(),
        points,
        random_sets,
    })
}

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
