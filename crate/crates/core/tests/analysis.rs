// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use transcirc::analysis::*;
use transcirc::corpus::TokenType;
use transcirc::model::{ActivationCache, ComponentId, Model};
use transcirc::numerics::{Matrix, Vector};
use transcirc::Error;

const T: usize = 5;

/// One-layer, one-head cache carrying only attention and values.
fn synthetic(end_row: &[f64], values: Matrix) -> ActivationCache {
    let mut attn = Matrix::zeros(T, T);
    for (k, a) in end_row.iter().enumerate() {
        attn[(T - 1, k)] = *a;
    }
    let z = || Matrix::zeros(T, 4);
    ActivationCache {
        tokens: vec![0; T],
        n_heads: 1,
        embedding: z(),
        heads: vec![z()],
        mlps: vec![z()],
        attention: vec![attn],
        values: vec![values],
        resid_pre: vec![z()],
        resid_mid: vec![z()],
        resid_final: z(),
        final_normed: z(),
    }
}

fn unit_values() -> Matrix {
    let mut v = Matrix::zeros(T, 3);
    for k in 0..T {
        v[(k, k % 3)] = 1.0;
    }
    v
}

fn types() -> Vec<TokenType> {
    use TokenType::*;
    vec![Ind, Src, Other, Ind, Other]
}

const H: ComponentId = ComponentId::Head { layer: 0, head: 0 };

fn profile(end_row: &[f64]) -> HeadProfile {
    head_value_profile(&synthetic(end_row, unit_values()), H, &types()).unwrap()
}

#[test]
fn one_hot_and_uniform_rows() {
    for j in 0..T {
        let mut a = vec![0.0; T];
        a[j] = 1.0;
        let p = profile(&a);
        for k in 0..T {
            assert_eq!(p.row[k], if k == j { 1.0 } else { 0.0 });
        }
        assert_eq!(p.class_mass[&types()[j]], 1.0);
    }
    let p = profile(&[0.2; T]);
    for k in 0..T {
        assert!((p.row[k] - 0.2).abs() < 1e-15);
    }
    let total: f64 = p.class_mass.values().sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!((p.mass(MassAxis::Adjacent) - 0.4).abs() < 1e-12);
}

#[test]
fn profile_errors() {
    let cache = synthetic(&[0.2; T], unit_values());
    assert!(matches!(
        head_value_profile(&cache, H, &types()[..3]),
        Err(Error::DimensionMismatch { .. })
    ));
    assert!(head_value_profile(&cache, ComponentId::mlp(0), &types()).is_err());
    assert!(head_value_profile(&cache, ComponentId::head(0, 1), &types()).is_err());
    let zero = synthetic(&[0.2; T], Matrix::zeros(T, 3));
    assert!(matches!(
        head_value_profile(&zero, H, &types()),
        Err(Error::Degenerate(_))
    ));
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, g)| g * v / s).collect()
}

#[test]
fn profiles_match_brute_force_on_real_caches() {
    let (corpus, model) = common::trained();
    let c = *model.config();
    let w = model.weights();
    for p in corpus.pairs.iter().step_by(7).take(12) {
        let (_, cache) = model.forward(&p.positive, &[]).unwrap();
        for layer in 0..c.n_layers {
            for h in 0..c.n_heads {
                let got = head_value_profile(&cache, ComponentId::head(layer, h), &p.token_types).unwrap();
                let a = cache.attention(layer, h);
                let end = p.positive.len() - 1;
                let lw = &w.layers[layer];
                for k in 0..p.positive.len() {
                    let x = rms(cache.resid_pre[layer].row(k), &lw.attn_norm);
                    // x_k W_V restricted to this head's columns.
                    let v: Vec<f64> = (h * c.d_head..(h + 1) * c.d_head)
                        .map(|col| (0..c.d_model).map(|i| x[i] * lw.w_v[i * c.d_model + col]).sum())
                        .collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((got.row[k] - a[(end, k)] * norm).abs() <= 1e-10);
                }
                let total: f64 = got.class_mass.values().sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert!(got.row.as_slice().iter().all(|&x| x >= 0.0));
            }
        }
    }
}

#[test]
fn classification_examples() {
    let src = profile(&[0.0, 1.0, 0.0, 0.0, 0.0]);
    let r = classify_head(&[src.clone(), src], ROLE_THRESHOLD).unwrap();
    assert_eq!(r.role, Role::Source);
    assert_eq!(r.confidence, 1.0);

    let ind = profile(&[1.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(classify_head(&[ind], ROLE_THRESHOLD).unwrap().role, Role::Indicator);

    let pos = profile(&[0.0, 0.0, 0.1, 0.45, 0.45]);
    let r = classify_head(&[pos], ROLE_THRESHOLD).unwrap();
    assert_eq!(r.role, Role::Positional);
    assert!((r.confidence - 0.9).abs() < 1e-12);

    let other = profile(&[0.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(
        classify_head(&[other], ROLE_THRESHOLD).unwrap().role,
        Role::Unclassified
    );
    let spread = profile(&[0.3, 0.35, 0.35, 0.0, 0.0]);
    assert_eq!(
        classify_head(&[spread], ROLE_THRESHOLD).unwrap().role,
        Role::Unclassified
    );
    assert!(classify_head(&[], ROLE_THRESHOLD).is_err());
}

#[test]
fn classification_ignores_positive_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let raw: Vec<f64> = (0..T).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let a: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let base = head_value_profile(&synthetic(&a, unit_values()), H, &types()).unwrap();
        let scale = rng.gen_range(0.01..100.0);
        let scaled = head_value_profile(&synthetic(&a, unit_values().scaled(scale)), H, &types()).unwrap();
        assert_eq!(
            classify_head(&[base], ROLE_THRESHOLD).unwrap().role,
            classify_head(&[scaled], ROLE_THRESHOLD).unwrap().role
        );
    }
}

#[test]
fn welford_matches_two_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<f64> = (0..500).map(|_| 1e3 + rng.sample::<f64, _>(StandardNormal)).collect();
    let mut s = RunningStats::default();
    xs.iter().for_each(|&x| s.push(x));
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    assert!((s.mean() - mean).abs() < 1e-10);
    assert!((s.std() - var.sqrt()).abs() < 1e-10);
    let mut one = RunningStats::default();
    one.push(3.5);
    assert_eq!(one.std(), 0.0);
}

#[test]
fn distribution_stats_by_role() {
    let src: Vec<HeadProfile> = (0..4).map(|_| profile(&[0.0, 1.0, 0.0, 0.0, 0.0])).collect();
    let single = vec![profile(&[0.5, 0.0, 0.5, 0.0, 0.0])];
    let role_src = classify_head(&src, ROLE_THRESHOLD).unwrap();
    let role_ind = classify_head(&single, ROLE_THRESHOLD).unwrap();
    let stats = attention_distribution_stats(&[(role_src, &src), (role_ind, &single)]);
    let e = stats.entries[&(Role::Source, MassAxis::Src)];
    assert_eq!((e.mean, e.std, e.n), (1.0, 0.0, 4));
    assert_eq!(stats.entries[&(Role::Source, MassAxis::Ind)].mean, 0.0);
    assert_eq!(stats.entries[&(Role::Indicator, MassAxis::Ind)].std, 0.0);
    assert_eq!(stats.to_csv().lines().count(), 1 + 2 * MassAxis::ALL.len());
}

fn with_mlp_delta(model: &Model, layer: usize, delta: &Vector) -> ActivationCache {
    let corpus = common::small_corpus();
    let (_, mut cache) = model.forward(&corpus.pairs[0].positive, &[]).unwrap();
    let end = cache.end();
    for i in 0..delta.dim() {
        cache.mlps[layer][(end, i)] = delta[i];
    }
    cache
}

#[test]
fn mlp_similarity_constructed_cases() {
    let (_, model) = common::trained();
    let tok = 20;
    let col = unembedding_column(&model, tok).unwrap();
    let par = with_mlp_delta(&model, 1, &col.scaled(2.5));
    assert!((mlp_similarity(&par, 1, tok, &model).unwrap().sim_delta - 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = Vector::new((0..col.dim()).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let orth = r.sub(&col.scaled(r.dot(&col) / col.dot(&col)));
    let cache = with_mlp_delta(&model, 0, &orth);
    assert!(mlp_similarity(&cache, 0, tok, &model).unwrap().sim_delta.abs() < 1e-10);

    let zero = with_mlp_delta(&model, 0, &Vector::zeros(col.dim()));
    assert!(matches!(
        mlp_similarity(&zero, 0, tok, &model),
        Err(Error::ZeroVector(_))
    ));
    assert!(mlp_similarity(&par, 5, tok, &model).is_err());
    assert!(unembedding_column(&model, 100_000).is_err());
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn mlp_similarity_matches_direct_formula() {
    let (corpus, model) = common::trained();
    let c = *model.config();
    for p in corpus.pairs.iter().take(10) {
        let (_, cache) = model.forward(&p.positive, &[]).unwrap();
        let end = p.positive.len() - 1;
        for layer in 0..c.n_layers {
            let input = cache.resid_mid[layer].row(end).to_vec();
            let output = if layer + 1 < c.n_layers {
                cache.resid_pre[layer + 1].row(end).to_vec()
            } else {
                cache.resid_final.row(end).to_vec()
            };
            let delta: Vec<f64> = output.iter().zip(&input).map(|(o, i)| o - i).collect();
            for tok in [p.target, p.positive[p.src_position()]] {
                let u: Vec<f64> = (0..c.d_model)
                    .map(|i| model.weights().w_u[i * c.vocab_size + tok as usize])
                    .collect();
                let s = mlp_similarity(&cache, layer, tok, &model).unwrap();
                assert!((s.sim_delta - cos(&delta, &u)).abs() < 1e-12);
                assert!((s.sim_in - cos(&input, &u)).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&s.sim_delta));
            }
        }
    }
}

#[test]
fn latent_profile_picks_out_the_written_token() {
    let (_, model) = common::trained();
    let (pivot_tok, other_tok) = (30u32, 31u32);
    let col = unembedding_column(&model, pivot_tok).unwrap();
    let cache = with_mlp_delta(&model, 1, &col);
    let eq = BTreeMap::from([(0usize, other_tok), (2usize, pivot_tok)]);
    let prof = latent_language_profile(&model, &cache, &eq, LatentMode::MlpDelta).unwrap();
    assert!((prof.layers[1][&2] - 1.0).abs() < 1e-12);
    let other = unembedding_column(&model, other_tok).unwrap();
    assert!((prof.layers[1][&0] - cos(col.as_slice(), other.as_slice())).abs() < 1e-12);
    let res = latent_language_profile(&model, &cache, &eq, LatentMode::Residual).unwrap();
    assert!(res
        .layers
        .iter()
        .flat_map(|l| l.values())
        .all(|v| (-1.0..=1.0).contains(v)));
    assert!(latent_language_profile(&model, &cache, &BTreeMap::from([(0, 1)]), LatentMode::MlpDelta).is_err());
}

#[test]
fn layer_bands() {
    assert_eq!(middle_layers(4), 1..3);
    assert_eq!(final_quarter(4), 3..4);
    assert_eq!(middle_layers(8), 2..6);
    assert_eq!(final_quarter(8), 6..8);
    assert_eq!(middle_layers(2), 0..1);
    assert_eq!(final_quarter(2), 1..2);
}

/// sup |F_a − F_b| evaluated at every pooled point.
fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
        .fold(0.0, f64::max)
}

fn normals(n: usize, shift: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()
}

#[test]
fn ks_trivial_cases() {
    let a = normals(200, 0.0, 1);
    let r = ks_two_sample(&a, &a).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert!(r.p_value > 0.999);
    let b: Vec<f64> = a.iter().map(|x| x + 100.0).collect();
    assert_eq!(ks_two_sample(&a, &b).unwrap().statistic, 1.0);
    assert!(ks_two_sample(&[], &a).is_err());
    assert!(matches!(ks_two_sample(&[f64::NAN], &a), Err(Error::NonFinite { .. })));
}

#[test]
fn ks_statistic_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..30 {
        let n = rng.gen_range(1..60);
        let m = rng.gen_range(1..60);
        // Coarse values force ties.
        let a: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 2.0).collect();
        let b: Vec<f64> = (0..m).map(|_| (rng.gen_range(0..12) as f64) / 2.0).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert!((r.statistic - brute_ks(&a, &b)).abs() < 1e-12, "case {i}");
        assert!((0.0..=1.0).contains(&r.p_value));
    }
}

#[test]
fn kolmogorov_survival_matches_alternating_series() {
    for lambda in [0.3, 0.5, 0.8, 1.0, 1.17, 1.19, 1.5, 2.0, 3.0] {
        let mut s = 0.0;
        for j in 1..=5000 {
            let t = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
            s += if j % 2 == 1 { t } else { -t };
        }
        let want: f64 = (2.0 * s).clamp(0.0, 1.0);
        assert!((kolmogorov_survival(lambda) - want).abs() < 1e-12, "λ = {lambda}");
    }
    assert_eq!(kolmogorov_survival(0.0), 1.0);
}

#[test]
fn ks_detects_a_unit_shift() {
    let a = normals(1000, 0.0, 10);
    let b = normals(1000, 1.0, 11);
    let r = ks_two_sample(&a, &b).unwrap();
    assert!(r.p_value < 1e-6, "{}", r.p_value);
    let resamples = 999;
    let perm = ks_permutation_test(&a, &b, resamples, 3).unwrap();
    assert_eq!(perm, 1.0 / (resamples + 1) as f64);
}

#[test]
fn asymptotic_p_agrees_with_permutation_on_a_moderate_shift() {
    let a = normals(300, 0.0, 20);
    let b = normals(300, 0.25, 21);
    let asym = ks_two_sample(&a, &b).unwrap().p_value;
    let perm = ks_permutation_test(&a, &b, 4000, 9).unwrap();
    assert!(asym > 1e-3 && asym < 0.3, "{asym}");
    let ratio = asym / perm;
    assert!((0.1..=10.0).contains(&ratio), "asymptotic {asym} vs permutation {perm}");
}

#[test]
fn overlap_and_baseline() {
    let h = |l, i| ComponentId::head(l, i);
    let a = [h(0, 1), h(0, 2), h(1, 0), h(1, 1)];
    let b = [h(1, 1), h(0, 2), h(0, 1), h(1, 0)];
    assert_eq!(head_overlap(&a, &a, 3).fraction, 1.0);
    assert_eq!(head_overlap(&a, &b, 3).fraction, 2.0 / 3.0);
    let disjoint = [h(2, 0), h(2, 1)];
    assert_eq!(head_overlap(&a, &disjoint, 2).fraction, 0.0);
    let o = head_overlap(&a, &disjoint, 3);
    assert!(o.truncated);
    assert_eq!(o.k_used, 2);
    assert_eq!(overlap_baseline(4, 16), 0.25);
    assert_eq!(overlap_baseline(1, 0), 0.0);
}

#[test]
fn characterization_covers_every_head() {
    let (corpus, model) = common::trained();
    let heads = ComponentId::all_heads(model.config());
    let rows = characterize_heads(&model, &corpus.pairs[..20], &heads, ROLE_THRESHOLD).unwrap();
    assert_eq!(rows.len(), heads.len());
    for r in &rows {
        assert_eq!(r.profiles.len(), 20);
        let (_, cache) = model.forward(&corpus.pairs[5].positive, &[]).unwrap();
        let direct = head_value_profile(&cache, r.head, &corpus.pairs[5].token_types).unwrap();
        assert_eq!(r.profiles[5], direct);
    }
    let csv = characterization_csv(&rows);
    assert_eq!(csv.lines().count(), 1 + heads.len());
    assert!(characterize_heads(&model, &[], &heads, ROLE_THRESHOLD).is_err());
    assert!(characterize_heads(&model, &corpus.pairs[..2], &[ComponentId::mlp(0)], ROLE_THRESHOLD).is_err());
}

#[test]
fn mean_traces_average_per_pair_traces() {
    let (corpus, model) = common::trained();
    let pairs = &corpus.pairs[..8];
    let probes = |p: &transcirc::corpus::PromptPair| vec![p.positive[p.src_position()], p.target];
    let traces = mean_mlp_traces(&model, pairs, probes).unwrap();
    assert_eq!(traces.len(), model.config().n_layers);
    for (layer, trace) in traces.iter().enumerate() {
        let mut want = 0.0;
        for p in pairs {
            let (_, cache) = model.forward(&p.positive, &[]).unwrap();
            want += mlp_similarity(&cache, layer, p.target, &model).unwrap().sim_delta / pairs.len() as f64;
        }
        assert!((trace.sim_delta[&1] - want).abs() < 1e-12);
    }
    let csv = traces_csv(&traces, &["src", "tgt"]);
    assert_eq!(csv.lines().count(), 1 + 2 * model.config().n_layers);
    assert!(csv.contains(",tgt,"));
}
