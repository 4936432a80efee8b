// SPDX-License-Identifier: MIT OR Apache-2.0

//! Behavioural characterization: value-weighted attention profiles and head
//! roles, MLP / unembedding probes, latent-language profiles, and the
//! statistics used to compare importance maps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PromptPair, TokenType};
use crate::error::{Error, Result};
use crate::model::{ActivationCache, ComponentId, Model, Position};
use crate::numerics::{cosine, Vector};

/// Default minimum winning mass for a role.
pub const ROLE_THRESHOLD: f64 = 0.4;

/// Axes along which a profile's mass is summarised. `Adjacent` (the last two
/// key positions) overlaps the token-type axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MassAxis {
    Src,
    Ind,
    Other,
    Adjacent,
}

impl MassAxis {
    pub const ALL: [MassAxis; 4] = [MassAxis::Src, MassAxis::Ind, MassAxis::Other, MassAxis::Adjacent];

    pub fn label(self) -> &'static str {
        match self {
            MassAxis::Src => "SRC",
            MassAxis::Ind => "IND",
            MassAxis::Other => "OTHER",
            MassAxis::Adjacent => "ADJ",
        }
    }
}

/// END-row value-weighted attention of one head on one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProfile {
    pub head: ComponentId,
    /// `row[k] = A[END, k] · ‖v_k‖₂`.
    pub row: Vector,
    /// Fraction of row mass per token type; sums to one.
    pub class_mass: BTreeMap<TokenType, f64>,
    /// Fraction of row mass on END and END − 1.
    pub adjacency: f64,
}

impl HeadProfile {
    pub fn total_mass(&self) -> f64 {
        self.row.as_slice().iter().sum()
    }

    pub fn mass(&self, axis: MassAxis) -> f64 {
        let get = |t| self.class_mass.get(&t).copied().unwrap_or(0.0);
        match axis {
            MassAxis::Src => get(TokenType::Src),
            MassAxis::Ind => get(TokenType::Ind),
            MassAxis::Other => get(TokenType::Other),
            MassAxis::Adjacent => self.adjacency,
        }
    }
}

pub fn head_value_profile(
    cache: &ActivationCache,
    head: ComponentId,
    token_types: &[TokenType],
) -> Result<HeadProfile> {
    let ComponentId::Head { layer, head: h } = head else {
        return Err(Error::invalid(format!("{head} is not an attention head")));
    };
    if layer * cache.n_heads + h >= cache.attention.len() || h >= cache.n_heads {
        return Err(Error::invalid(format!("{head} not in cache")));
    }
    let t = cache.seq_len();
    if token_types.len() != t {
        return Err(Error::mismatch("token_types", t, token_types.len()));
    }
    let attn = cache.attention(layer, h);
    if attn.rows() != t {
        return Err(Error::Missing(format!("END attention row of {head}")));
    }
    let values = cache.values(layer, h);
    let end = cache.end();
    let a = attn.row(end);
    let row: Vec<f64> = (0..t)
        .map(|k| {
            let v = values.row(k);
            a[k] * v.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .collect();
    let total: f64 = row.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Degenerate(format!("{head} has zero value-weighted mass at END")));
    }
    let mut class_mass = BTreeMap::new();
    for (m, ty) in row.iter().zip(token_types) {
        *class_mass.entry(*ty).or_insert(0.0) += m / total;
    }
    let adjacency = row[end.saturating_sub(1)..].iter().sum::<f64>() / total;
    Ok(HeadProfile {
        head,
        row: Vector::from_vec_unchecked(row),
        class_mass,
        adjacency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Source,
    Indicator,
    Positional,
    Unclassified,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Source => "source",
            Role::Indicator => "indicator",
            Role::Positional => "positional",
            Role::Unclassified => "unclassified",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadRole {
    pub role: Role,
    /// Mass of the winning axis.
    pub confidence: f64,
}

/// Mean mass per axis over a set of profiles.
pub fn mean_mass(profiles: &[HeadProfile]) -> BTreeMap<MassAxis, f64> {
    let n = profiles.len().max(1) as f64;
    MassAxis::ALL
        .iter()
        .map(|&ax| (ax, profiles.iter().map(|p| p.mass(ax)).sum::<f64>() / n))
        .collect()
}

/// Averages mass over the profiles and picks the dominant axis.
/// Ties resolve Positional, then Source, then Indicator.
pub fn classify_head(profiles: &[HeadProfile], threshold: f64) -> Result<HeadRole> {
    if profiles.is_empty() {
        return Err(Error::invalid("classify_head needs at least one profile"));
    }
    let mean = mean_mass(profiles);
    let candidates = [
        (Role::Positional, mean[&MassAxis::Adjacent]),
        (Role::Source, mean[&MassAxis::Src]),
        (Role::Indicator, mean[&MassAxis::Ind]),
        (Role::Unclassified, mean[&MassAxis::Other]),
    ];
    let mut best = candidates[0];
    for c in &candidates[1..] {
        if c.1 > best.1 {
            best = *c;
        }
    }
    let role = if best.0 != Role::Unclassified && best.1 >= threshold {
        best.0
    } else {
        Role::Unclassified
    };
    Ok(HeadRole {
        role,
        confidence: best.1,
    })
}

/// Streaming mean and population standard deviation (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    n: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).max(0.0).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Role × axis table of mass statistics over every (head, sample) profile.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistributionStats {
    pub entries: BTreeMap<(Role, MassAxis), MeanStd>,
}

pub fn attention_distribution_stats(classified: &[(HeadRole, &[HeadProfile])]) -> DistributionStats {
    let mut acc: BTreeMap<(Role, MassAxis), RunningStats> = BTreeMap::new();
    for (role, profiles) in classified {
        for p in profiles.iter() {
            for ax in MassAxis::ALL {
                acc.entry((role.role, ax)).or_default().push(p.mass(ax));
            }
        }
    }
    DistributionStats {
        entries: acc
            .into_iter()
            .map(|(k, s)| {
                (
                    k,
                    MeanStd {
                        mean: s.mean(),
                        std: s.std(),
                        n: s.count(),
                    },
                )
            })
            .collect(),
    }
}

impl DistributionStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("role,axis,mean,std,n\n");
        for ((role, ax), m) in &self.entries {
            s.push_str(&format!("{role},{},{},{},{}\n", ax.label(), m.mean, m.std, m.n));
        }
        s
    }
}

/// Aggregated characterization of one head over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCharacterization {
    pub head: ComponentId,
    pub role: HeadRole,
    pub mean_mass: BTreeMap<MassAxis, f64>,
    pub profiles: Vec<HeadProfile>,
}

/// Profiles every head on every positive prompt and classifies it.
pub fn characterize_heads(
    model: &Model,
    pairs: &[PromptPair],
    heads: &[ComponentId],
    threshold: f64,
) -> Result<Vec<HeadCharacterization>> {
    if pairs.is_empty() {
        return Err(Error::invalid("characterize_heads needs at least one pair"));
    }
    for h in heads {
        h.validate(model.config())?;
        if !h.is_head() {
            return Err(Error::invalid(format!("{h} is not an attention head")));
        }
    }
    let mut per_head: Vec<Vec<HeadProfile>> = vec![Vec::with_capacity(pairs.len()); heads.len()];
    for chunk in pairs.chunks(64) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|p| p.positive.as_slice()).collect();
        let caches = model.caches(&seqs)?;
        for (pair, cache) in chunk.iter().zip(&caches) {
            for (i, &h) in heads.iter().enumerate() {
                per_head[i].push(head_value_profile(cache, h, &pair.token_types)?);
            }
        }
    }
    heads
        .iter()
        .zip(per_head)
        .map(|(&head, profiles)| {
            Ok(HeadCharacterization {
                head,
                role: classify_head(&profiles, threshold)?,
                mean_mass: mean_mass(&profiles),
                profiles,
            })
        })
        .collect()
}

pub fn characterization_csv(rows: &[HeadCharacterization]) -> String {
    let mut s = String::from("layer,head,role,confidence,src,ind,other,adj\n");
    for r in rows {
        let (layer, head) = match r.head {
            ComponentId::Head { layer, head } => (layer as i64, head as i64),
            _ => (-1, -1),
        };
        s.push_str(&format!("{layer},{head},{},{}", r.role.role, r.role.confidence));
        for ax in MassAxis::ALL {
            s.push_str(&format!(",{}", r.mean_mass[&ax]));
        }
        s.push('\n');
    }
    s
}

/// Unembedding column of `token` (its `d_model`-wide readout direction).
pub fn unembedding_column(model: &Model, token: u32) -> Result<Vector> {
    let c = model.config();
    let t = token as usize;
    if t >= c.vocab_size {
        return Err(Error::invalid(format!(
            "token {token} outside vocabulary of {}",
            c.vocab_size
        )));
    }
    let w = &model.weights().w_u;
    Ok(Vector::from_vec_unchecked(
        (0..c.d_model).map(|i| w[i * c.vocab_size + t]).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpSimilarity {
    pub token: u32,
    /// Cosine of `MLP_in` with the token's unembedding column.
    pub sim_in: f64,
    /// Cosine of `MLP_out − MLP_in` with the same column.
    pub sim_delta: f64,
}

pub fn mlp_similarity(cache: &ActivationCache, layer: usize, probe_token: u32, model: &Model) -> Result<MlpSimilarity> {
    if layer >= cache.mlps.len() {
        return Err(Error::invalid(format!("layer {layer} not in cache")));
    }
    let col = unembedding_column(model, probe_token)?;
    let input = cache.mlp_in(layer, Position::End)?;
    let delta = cache.mlp_out(layer, Position::End)?.sub(&input);
    if delta.is_zero() {
        return Err(Error::ZeroVector(format!("MLP {layer} delta at END")));
    }
    Ok(MlpSimilarity {
        token: probe_token,
        sim_in: cosine(&input, &col)?,
        sim_delta: cosine(&delta, &col)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpTrace {
    pub layer: usize,
    pub sim_in: BTreeMap<u32, f64>,
    pub sim_delta: BTreeMap<u32, f64>,
}

pub fn mlp_trace(cache: &ActivationCache, layer: usize, probes: &[u32], model: &Model) -> Result<MlpTrace> {
    let mut t = MlpTrace {
        layer,
        sim_in: BTreeMap::new(),
        sim_delta: BTreeMap::new(),
    };
    for &tok in probes {
        let s = mlp_similarity(cache, layer, tok, model)?;
        t.sim_in.insert(tok, s.sim_in);
        t.sim_delta.insert(tok, s.sim_delta);
    }
    Ok(t)
}

/// What a latent-language profile compares against the unembedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// The layer's MLP write `MLP_out − MLP_in`.
    #[default]
    MlpDelta,
    /// The residual stream after the layer.
    Residual,
}

/// `layers[l][language]` = cosine of layer `l`'s state with that language's
/// equivalent token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProfile {
    pub mode: LatentMode,
    pub layers: Vec<BTreeMap<usize, f64>>,
}

pub fn latent_language_profile(
    model: &Model,
    cache: &ActivationCache,
    equivalents: &BTreeMap<usize, u32>,
    mode: LatentMode,
) -> Result<LatentProfile> {
    if equivalents.len() < 2 {
        return Err(Error::invalid("latent profile needs tokens for at least two languages"));
    }
    let cols: Vec<(usize, Vector)> = equivalents
        .iter()
        .map(|(&l, &t)| Ok((l, unembedding_column(model, t)?)))
        .collect::<Result<_>>()?;
    let layers = (0..model.config().n_layers)
        .map(|layer| {
            let state = match mode {
                LatentMode::MlpDelta => cache.activation(ComponentId::mlp(layer), Position::End)?,
                LatentMode::Residual => cache.resid_post(layer, Position::End)?,
            };
            cols.iter()
                .map(|(l, col)| Ok((*l, cosine(&state, col)?)))
                .collect::<Result<BTreeMap<_, _>>>()
        })
        .collect::<Result<_>>()?;
    Ok(LatentProfile { mode, layers })
}

/// Layers in `[L/4, 3L/4)`.
pub fn middle_layers(n_layers: usize) -> std::ops::Range<usize> {
    let lo = n_layers / 4;
    lo..((3 * n_layers) / 4).max(lo + 1).min(n_layers)
}

/// Layers `>= 3L/4`.
pub fn final_quarter(n_layers: usize) -> std::ops::Range<usize> {
    ((3 * n_layers) / 4).min(n_layers.saturating_sub(1))..n_layers
}

/// Pivot-vs-target comparison over a set of direct (non-pivot) prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotSummary {
    pub n_pairs: usize,
    /// Fraction of pairs whose middle-layer mean pivot similarity beats the
    /// target-language similarity.
    pub pivot_wins: f64,
    /// Mean pivot similarity per layer.
    pub pivot_by_layer: Vec<f64>,
    pub target_by_layer: Vec<f64>,
    pub middle_pivot: f64,
    pub final_pivot: f64,
}

/// `equivalents(pair)` yields each language's token for the pair's entry.
pub fn pivot_summary(
    model: &Model,
    pairs: &[PromptPair],
    pivot: usize,
    mode: LatentMode,
    equivalents: impl Fn(&PromptPair) -> Result<BTreeMap<usize, u32>>,
) -> Result<PivotSummary> {
    if pairs.is_empty() {
        return Err(Error::invalid("pivot summary needs at least one pair"));
    }
    let nl = model.config().n_layers;
    let mid = middle_layers(nl);
    let fin = final_quarter(nl);
    let mut wins = 0usize;
    let mut piv = vec![0.0; nl];
    let mut tgt = vec![0.0; nl];
    for p in pairs {
        if p.direction.target == pivot || p.direction.source == pivot {
            return Err(Error::invalid("pivot summary expects direct (non-pivot) pairs"));
        }
        let eq = equivalents(p)?;
        if !eq.contains_key(&pivot) || !eq.contains_key(&p.direction.target) {
            return Err(Error::Missing(format!("equivalent tokens for entry {}", p.entry)));
        }
        let (_, cache) = model.forward(&p.positive, &[])?;
        let prof = latent_language_profile(model, &cache, &eq, mode)?;
        let (mut mp, mut mt) = (0.0, 0.0);
        for (l, row) in prof.layers.iter().enumerate() {
            piv[l] += row[&pivot];
            tgt[l] += row[&p.direction.target];
            if mid.contains(&l) {
                mp += row[&pivot];
                mt += row[&p.direction.target];
            }
        }
        if mp > mt {
            wins += 1;
        }
    }
    let n = pairs.len() as f64;
    piv.iter_mut().for_each(|x| *x /= n);
    tgt.iter_mut().for_each(|x| *x /= n);
    let mean_over = |r: std::ops::Range<usize>| r.clone().map(|l| piv[l]).sum::<f64>() / r.len() as f64;
    Ok(PivotSummary {
        n_pairs: pairs.len(),
        pivot_wins: wins as f64 / n,
        middle_pivot: mean_over(mid),
        final_pivot: mean_over(fin),
        pivot_by_layer: piv,
        target_by_layer: tgt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn check_sample(name: &str, x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::invalid(format!("sample {name} is empty")));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("sample {name}"),
            index: i,
        });
    }
    Ok(())
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Supremum distance between the two empirical CDFs of sorted samples.
fn ks_statistic_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Survival function of the Kolmogorov distribution, `P(K > λ)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Theta-function form converges quickly for small λ.
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let mut s = 0.0;
        let mut k = 1u32;
        loop {
            let term = y.powi((k * k) as i32);
            s += term;
            if term < 1e-17 * s || k > 50 {
                break;
            }
            k += 2;
        }
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let mut s = 0.0;
        for j in 1..=100u32 {
            let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
            s += if j % 2 == 1 { term } else { -term };
            if term < 1e-300 || term < 1e-17 * s.abs() {
                break;
            }
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value at
/// effective size `n_e = n·m/(n+m)`, `λ = (√n_e + 0.12 + 0.11/√n_e)·D`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    check_sample("a", a)?;
    check_sample("b", b)?;
    let d = ks_statistic_sorted(&sorted(a), &sorted(b));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let en = (n * m / (n + m)).sqrt();
    let p = kolmogorov_survival((en + 0.12 + 0.11 / en) * d);
    Ok(KsResult {
        statistic: d,
        p_value: p,
    })
}

/// Permutation p-value for the KS statistic: `(1 + #{D* ≥ D}) / (1 + R)`.
pub fn ks_permutation_test(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    check_sample("a", a)?;
    check_sample("b", b)?;
    let observed = ks_statistic_sorted(&sorted(a), &sorted(b));
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&x| (x, true))
        .chain(b.iter().map(|&x| (x, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let values: Vec<f64> = pooled.iter().map(|p| p.0).collect();
    let mut labels: Vec<bool> = pooled.iter().map(|p| p.1).collect();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..resamples {
        labels.shuffle(&mut rng);
        let (mut ca, mut cb) = (0usize, 0usize);
        let mut d: f64 = 0.0;
        let mut i = 0;
        while i < values.len() {
            let x = values[i];
            while i < values.len() && values[i] == x {
                if labels[i] {
                    ca += 1;
                } else {
                    cb += 1;
                }
                i += 1;
            }
            d = d.max((ca as f64 / na - cb as f64 / nb).abs());
        }
        // Tolerance guards against rounding in the CDF differences.
        if d >= observed - 1e-12 {
            exceed += 1;
        }
    }
    Ok((exceed + 1) as f64 / (resamples + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub fraction: f64,
    /// Number of heads actually compared.
    pub k_used: usize,
    /// True when either list had fewer than `k` entries.
    pub truncated: bool,
}

/// Overlap of the top-`k` prefixes of two ranked component lists.
pub fn head_overlap(a: &[ComponentId], b: &[ComponentId], k: usize) -> Overlap {
    let k_used = k.min(a.len()).min(b.len());
    let sa: BTreeSet<_> = a.iter().take(k_used).collect();
    let inter = b.iter().take(k_used).filter(|c| sa.contains(c)).count();
    Overlap {
        fraction: if k_used == 0 { 0.0 } else { inter as f64 / k_used as f64 },
        k_used,
        truncated: k_used < k,
    }
}

/// Expected overlap of two independent uniformly random `k`-subsets of
/// `total` items, divided by `k` (hypergeometric mean).
pub fn overlap_baseline(k: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        k as f64 / total as f64
    }
}

/// Per-layer MLP traces at END averaged over prompts. `probes(pair)` gives
/// the tokens to compare against; traces are keyed by probe slot index.
pub fn mean_mlp_traces(
    model: &Model,
    pairs: &[PromptPair],
    probes: impl Fn(&PromptPair) -> Vec<u32> + Sync,
) -> Result<Vec<MlpTrace>> {
    let nl = model.config().n_layers;
    let traces: Vec<Vec<(u32, usize, f64, f64)>> = pairs
        .par_iter()
        .map(|p| {
            let (_, cache) = model.forward(&p.positive, &[])?;
            let toks = probes(p);
            let mut out = Vec::new();
            for l in 0..nl {
                let t = mlp_trace(&cache, l, &toks, model)?;
                for (i, tok) in toks.iter().enumerate() {
                    out.push((i as u32, l, t.sim_in[tok], t.sim_delta[tok]));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n = pairs.len().max(1) as f64;
    let mut layers: Vec<MlpTrace> = (0..nl)
        .map(|layer| MlpTrace {
            layer,
            sim_in: BTreeMap::new(),
            sim_delta: BTreeMap::new(),
        })
        .collect();
    for t in &traces {
        for &(slot, l, si, sd) in t {
            *layers[l].sim_in.entry(slot).or_insert(0.0) += si / n;
            *layers[l].sim_delta.entry(slot).or_insert(0.0) += sd / n;
        }
    }
    Ok(layers)
}

/// Writes `layer,probe,sim_in,sim_delta` rows.
pub fn traces_csv(traces: &[MlpTrace], probe_names: &[&str]) -> String {
    let mut s = String::from("layer,probe,sim_in,sim_delta\n");
    for t in traces {
        for (slot, si) in &t.sim_in {
            let name = probe_names
                .get(*slot as usize)
                .copied()
                .map(str::to_string)
                .unwrap_or_else(|| slot.to_string());
            s.push_str(&format!("{},{name},{si},{}\n", t.layer, t.sim_delta[slot]));
        }
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
