// SPDX-License-Identifier: MIT OR Apache-2.0

use transcirc::model::{ComponentId, Hook, HookAction, Model, ModelConfig, ParamGroup, Position, Weights};
use transcirc::numerics::{Matrix, Vector};
use transcirc::Error;

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 16,
        vocab_size: 11,
        max_seq: 6,
        seed,
    }
}

fn tokens() -> Vec<u32> {
    vec![3, 1, 4, 1, 5]
}

#[test]
fn init_is_deterministic_in_seed() {
    let a = Model::new(small_config(7)).unwrap();
    let b = Model::new(small_config(7)).unwrap();
    let c = Model::new(small_config(8)).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.weights(), b.weights());
    assert_ne!(a.checksum(), c.checksum());

    let mut bad = small_config(1);
    bad.d_model = 9;
    assert!(matches!(Model::new(bad), Err(Error::Config(_))));
}

#[test]
fn hook_free_runs_are_bit_identical() {
    let m = Model::new(small_config(1)).unwrap();
    let (a, ca) = m.forward(&tokens(), &[]).unwrap();
    let (b, cb) = m.forward(&tokens(), &[]).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn identity_patch_leaves_logits_unchanged() {
    let m = Model::new(small_config(2)).unwrap();
    let (base, cache) = m.forward(&tokens(), &[]).unwrap();
    for c in ComponentId::heads_and_mlps(m.config())
        .into_iter()
        .chain([ComponentId::Embedding, ComponentId::Unembedding])
    {
        let own = cache.activation(c, Position::End).unwrap();
        let hook = Hook::new(c, Position::End, HookAction::Replace(own));
        let (patched, _) = m.forward(&tokens(), &[hook]).unwrap();
        assert!(patched.max_abs_diff(&base) <= 1e-12, "{c}");
    }
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, g)| g * v / s).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn vecmat(v: &[f64], m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, vi) in v.iter().enumerate() {
        for j in 0..cols {
            out[j] += vi * m[i * cols + j];
        }
    }
    out
}

fn mlp(w: &Weights, c: &ModelConfig, layer: usize, x: &[f64]) -> Vec<f64> {
    let lw = &w.layers[layer];
    let n = rms(x, &lw.mlp_norm);
    let h: Vec<f64> = vecmat(&n, &lw.w_in, c.d_ff)
        .iter()
        .zip(&lw.b_in)
        .map(|(a, b)| gelu(a + b))
        .collect();
    vecmat(&h, &lw.w_out, c.d_model)
        .iter()
        .zip(&lw.b_out)
        .map(|(a, b)| a + b)
        .collect()
}

#[test]
fn zeroing_every_head_matches_attention_free_oracle() {
    let m = Model::new(small_config(3)).unwrap();
    let c = *m.config();
    let toks = tokens();
    let mut hooks = Vec::new();
    for head in ComponentId::all_heads(&c) {
        for p in 0..toks.len() {
            hooks.push(Hook::new(
                head,
                Position::Index(p),
                HookAction::Replace(Vector::zeros(c.d_model)),
            ));
        }
    }
    let (logits, _) = m.forward(&toks, &hooks).unwrap();

    let w = m.weights();
    let d = c.d_model;
    for (p, &t) in toks.iter().enumerate() {
        let mut x: Vec<f64> = (0..d)
            .map(|i| w.tok_emb[t as usize * d + i] + w.pos_emb[p * d + i])
            .collect();
        for l in 0..c.n_layers {
            let m_out = mlp(w, &c, l, &x);
            x.iter_mut().zip(&m_out).for_each(|(a, b)| *a += b);
        }
        let nf = rms(&x, &w.final_norm);
        let expect = vecmat(&nf, &w.w_u, c.vocab_size);
        for (v, e) in expect.iter().enumerate() {
            assert!((logits[(p, v)] - e).abs() < 1e-10, "pos {p} token {v}");
        }
    }
}

#[test]
fn residual_stream_is_sum_of_contributions() {
    let m = Model::new(small_config(4)).unwrap();
    let c = *m.config();
    let (_, cache) = m.forward(&tokens(), &[]).unwrap();
    for p in 0..tokens().len() {
        let mut sum = cache.activation(ComponentId::Embedding, Position::Index(p)).unwrap();
        for comp in ComponentId::heads_and_mlps(&c) {
            sum = sum.add(&cache.activation(comp, Position::Index(p)).unwrap());
        }
        let fin = cache.resid_final.row(p);
        for i in 0..c.d_model {
            assert!((sum[i] - fin[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn attention_is_causal_and_normalized() {
    let m = Model::new(small_config(5)).unwrap();
    let (_, cache) = m.forward(&tokens(), &[]).unwrap();
    for a in &cache.attention {
        for i in 0..a.rows() {
            let s: f64 = a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for j in i + 1..a.cols() {
                assert_eq!(a[(i, j)], 0.0);
            }
        }
    }
}

#[test]
fn logits_are_causal() {
    let m = Model::new(small_config(6)).unwrap();
    let a = vec![1, 2, 3, 4, 5];
    let b = vec![1, 2, 3, 9, 0];
    let (la, _) = m.forward(&a, &[]).unwrap();
    let (lb, _) = m.forward(&b, &[]).unwrap();
    for p in 0..3 {
        assert_eq!(la.row(p), lb.row(p));
    }
    assert_ne!(la.row(3), lb.row(3));
}

#[test]
fn disjoint_hooks_commute() {
    let m = Model::new(small_config(7)).unwrap();
    let d = m.config().d_model;
    let h1 = Hook::new(
        ComponentId::head(0, 1),
        Position::End,
        HookAction::Replace(Vector::ones(d)),
    );
    let h2 = Hook::new(
        ComponentId::mlp(1),
        Position::Index(2),
        HookAction::MeanAblate(Vector::basis(d, 3)),
    );
    let (a, _) = m.forward(&tokens(), &[h1.clone(), h2.clone()]).unwrap();
    let (b, _) = m.forward(&tokens(), &[h2, h1]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn hook_and_token_validation() {
    let m = Model::new(small_config(8)).unwrap();
    let bad_dim = Hook::new(
        ComponentId::mlp(0),
        Position::End,
        HookAction::Replace(Vector::zeros(3)),
    );
    assert!(matches!(
        m.forward(&tokens(), &[bad_dim]),
        Err(Error::DimensionMismatch { .. })
    ));
    let bad_target = Hook::new(
        ComponentId::head(5, 0),
        Position::End,
        HookAction::Replace(Vector::zeros(8)),
    );
    assert!(m.forward(&tokens(), &[bad_target]).is_err());
    assert!(m.forward(&[1, 2, 99], &[]).is_err());
    assert!(m.forward(&[1; 7], &[]).is_err());
}

#[test]
fn subspace_hook_with_full_basis_is_replacement() {
    let m = Model::new(small_config(9)).unwrap();
    let d = m.config().d_model;
    let cf = Vector::new((0..d).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
    let a = Hook::new(
        ComponentId::head(1, 0),
        Position::End,
        HookAction::SubspacePatch {
            basis: Matrix::identity(d),
            counterfactual: cf.clone(),
        },
    );
    let b = Hook::new(ComponentId::head(1, 0), Position::End, HookAction::Replace(cf));
    let (la, _) = m.forward(&tokens(), &[a]).unwrap();
    let (lb, _) = m.forward(&tokens(), &[b]).unwrap();
    assert!(la.max_abs_diff(&lb) < 1e-12);
}

#[test]
fn path_patch_with_clean_activation_is_identity() {
    let m = Model::new(small_config(10)).unwrap();
    let toks = tokens();
    let (clean, cache) = m.forward(&toks, &[]).unwrap();
    let end = toks.len() - 1;
    for sender in ComponentId::heads_and_mlps(m.config()) {
        let own = cache.activation(sender, Position::End).unwrap();
        let out = m.path_patch_forward(&toks, &cache, sender, &own).unwrap();
        for v in 0..m.config().vocab_size {
            assert!((out[v] - clean[(end, v)]).abs() <= 1e-12);
        }
    }
    assert!(m
        .path_patch_forward(&toks, &cache, ComponentId::Embedding, &Vector::zeros(8))
        .is_err());
}

#[test]
fn path_patch_final_mlp_matches_hand_recompute() {
    let m = Model::new(small_config(11)).unwrap();
    let c = *m.config();
    let toks = tokens();
    let (_, cache) = m.forward(&toks, &[]).unwrap();
    let last = ComponentId::mlp(c.n_layers - 1);
    let out = m
        .path_patch_forward(&toks, &cache, last, &Vector::zeros(c.d_model))
        .unwrap();

    let end = toks.len() - 1;
    let mlp_contrib = cache.activation(last, Position::End).unwrap();
    let x: Vec<f64> = cache
        .resid_final
        .row(end)
        .iter()
        .zip(mlp_contrib.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let expect = vecmat(&rms(&x, &m.weights().final_norm), &m.weights().w_u, c.vocab_size);
    for v in 0..c.vocab_size {
        assert!((out[v] - expect[v]).abs() < 1e-10);
    }
}

#[test]
fn path_patch_freezes_non_sender_heads() {
    let m = Model::new(small_config(12)).unwrap();
    let toks = tokens();
    let (_, clean) = m.forward(&toks, &[]).unwrap();
    let sender = ComponentId::head(0, 0);
    let patched = Vector::ones(m.config().d_model).scaled(3.0);
    let (_, cache) = m
        .path_patch_forward_with_cache(&toks, &clean, sender, &patched)
        .unwrap();
    // Layer-1 heads see a perturbed residual stream at END yet emit their clean output.
    assert_ne!(cache.resid_pre[1].row(4), clean.resid_pre[1].row(4));
    for h in 0..2 {
        let comp = ComponentId::head(1, h);
        assert_eq!(
            cache.activation(comp, Position::End).unwrap(),
            clean.activation(comp, Position::End).unwrap()
        );
    }
    // MLPs recompute freely.
    assert_ne!(
        cache.activation(ComponentId::mlp(0), Position::End).unwrap(),
        clean.activation(ComponentId::mlp(0), Position::End).unwrap()
    );
}

#[test]
fn analytic_gradients_match_central_differences() {
    let m = Model::new(small_config(13)).unwrap();
    let toks = tokens();
    let (target, position) = (7, 3);
    let (_, grads) = m.backward(&toks, target, position).unwrap();
    let ex = [transcirc::model::Example {
        tokens: toks.clone(),
        position,
        target,
    }];
    let n = m.weights().param_count();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let w0 = m.weights().get_flat(i);
        let h = 1e-4 * w0.abs().max(1.0);
        let at = |dw: f64| {
            let mut p = m.clone();
            p.weights_mut().set_flat(i, w0 + dw);
            p.loss(&ex).unwrap()
        };
        // Fourth-order central stencil.
        let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        let analytic = grads.get_flat(i);
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-9 {
            worst = worst.max((analytic - numeric).abs() / scale);
        } else {
            assert!((analytic - numeric).abs() < 1e-9);
        }
    }
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn gradient_vanishes_when_target_is_certain() {
    let mut m = Model::new(small_config(14)).unwrap();
    let d = m.config().d_model;
    let vocab = m.config().vocab_size;
    // A huge constant residual direction read out only by token 2.
    let w = m.weights_mut();
    w.final_norm.fill(1.0);
    w.w_u.fill(0.0);
    for i in 0..d {
        w.w_u[i * vocab + 2] = 1e3;
    }
    w.layers[1].b_out.fill(1e3);
    let (loss, grads) = m.backward(&tokens(), 2, 4).unwrap();
    assert!(loss < 1e-12);
    assert!(grads.norm() < 1e-9, "norm {}", grads.norm());
}

#[test]
fn group_masking_zeroes_exactly() {
    let m = Model::new(small_config(15)).unwrap();
    let c = *m.config();
    let (_, mut g) = m.backward(&tokens(), 1, 4).unwrap();
    let group = ParamGroup::Head { layer: 1, head: 0 };
    assert!(g.group_norm(&c, group) > 0.0);
    g.zero_group(&c, group);
    assert!(g.group_values(&c, group).iter().all(|&x| x == 0.0));
}

#[test]
fn weights_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ttw");
    let m = Model::new(small_config(16)).unwrap();
    m.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(
        loaded.forward(&tokens(), &[]).unwrap().0,
        m.forward(&tokens(), &[]).unwrap().0
    );

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    match Model::load(&path) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, (bytes.len() / 2) as u64),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn header_shape_mismatch_is_rejected() {
    let m = Model::new(small_config(17)).unwrap();
    let mut file = m.to_tensor_file().unwrap();
    file.config["d_model"] = serde_json::json!(12);
    file.config["d_head"] = serde_json::json!(6);
    let bytes = file.encode().unwrap();
    let decoded = transcirc::tensorfile::TensorFile::decode(&bytes).unwrap();
    assert!(Model::from_tensor_file(&decoded).is_err());
}
