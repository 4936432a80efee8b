// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use transcirc::corpus::{Corpus, CorpusConfig};
use transcirc::model::{ComponentId, Model, ModelConfig, Position};
use transcirc::numerics::{orthonormalize, Matrix, Vector};
use transcirc::subspace::*;
use transcirc::Error;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

struct Planted {
    m: Matrix,
    s: Vector,
    e: Matrix,
}

/// `M = c·s 𝟙ᵀ + E Γᵀ + noise·G` with `s ⟂ span(E)`.
fn planted(d: usize, n: usize, r: usize, noise: f64, seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = orthonormalize(&gaussian(d, r + 1, &mut rng)).unwrap().basis;
    let s = q.column(0);
    let e = q.column_slice(1, r + 1);
    let gamma = gaussian(n, r, &mut rng).scaled(3.0);
    let mut m = e.matmul(&gamma.transpose()).unwrap();
    let g = gaussian(d, n, &mut rng);
    for i in 0..d {
        for j in 0..n {
            m[(i, j)] += 2.0 * s[i] + noise * g[(i, j)];
        }
    }
    Planted { m, s, e }
}

fn cm(m: Matrix) -> ContrastiveMatrix {
    ContrastiveMatrix {
        component: ComponentId::head(0, 0),
        m,
    }
}

#[test]
fn recovers_planted_direction_over_seeds() {
    for seed in 0..20 {
        let p = planted(32, 200, 3, 0.01, seed);
        let sub = identify(&cm(p.m), 3).unwrap();
        let cos = sub.s.dot(&p.s).abs() / (sub.s.norm() * p.s.norm());
        assert!(cos >= 0.99, "seed {seed}: |cos| = {cos}");
        assert!((sub.s.norm() - 1.0).abs() < 1e-12);
        for j in 0..sub.e.cols() {
            assert!(sub.s.dot(&sub.e.column(j)).abs() <= 1e-8);
        }
        // The recovered specific subspace spans the planted one.
        for j in 0..3 {
            let pe = p.e.column(j);
            let coords = sub.e.t_matvec(&pe).unwrap();
            assert!(coords.norm() > 0.99);
        }
    }
}

#[test]
fn pseudoinverse_variant_is_orthogonal_and_close() {
    for seed in 0..5 {
        let p = planted(16, 60, 2, 0.01, 100 + seed);
        let opts = IdentifyOptions {
            r: 2,
            orthogonalization: Orthogonalization::Pseudoinverse,
            ..IdentifyOptions::default()
        };
        let sub = identify_with(&cm(p.m), &opts).unwrap();
        for j in 0..2 {
            assert!(sub.s.dot(&sub.e.column(j)).abs() <= 1e-8);
        }
        assert!(sub.s.dot(&p.s).abs() > 0.95);
    }
}

#[test]
fn mean_scale_variants_agree_when_square() {
    let dim = |p: &Planted| {
        identify_with(
            &cm(p.m.clone()),
            &IdentifyOptions {
                r: 2,
                mean_scale: MeanScale::Dimension,
                ..IdentifyOptions::default()
            },
        )
        .unwrap()
    };
    let p = planted(16, 16, 2, 0.05, 3);
    let a = identify(&cm(p.m.clone()), 2).unwrap();
    assert!(a.s.sub(&dim(&p).s).norm() < 1e-12);

    let p = planted(16, 40, 2, 0.05, 3);
    let b = dim(&p);
    assert!((b.s.norm() - 1.0).abs() < 1e-12);
    for j in 0..2 {
        assert!(b.s.dot(&b.e.column(j)).abs() <= 1e-8);
    }
}

#[test]
fn sign_points_along_the_mean() {
    let p = planted(8, 30, 1, 0.0, 5);
    let sub = identify(&cm(p.m.clone()), 1).unwrap();
    let mut mean = Vector::zeros(8);
    for j in 0..30 {
        mean = mean.add(&p.m.column(j));
    }
    assert!(sub.s.dot(&mean) >= 0.0);
    assert!(sub.scale > 0.0);
}

#[test]
fn coordinates_and_objective_match_direct_formulas() {
    let p = planted(10, 25, 2, 0.1, 6);
    let sub = identify(&cm(p.m.clone()), 2).unwrap();
    // Γ = Mᵀ E, entry by entry.
    for j in 0..25 {
        for k in 0..2 {
            let direct: f64 = (0..10).map(|i| p.m[(i, j)] * sub.e[(i, k)]).sum();
            assert!((sub.gamma[(j, k)] - direct).abs() < 1e-12);
        }
    }
    let obj = residual_objective(&p.m, &sub.shared(), &sub.e, &sub.gamma).unwrap();
    let mut direct = 0.0;
    for i in 0..10 {
        for j in 0..25 {
            let low: f64 = (0..2).map(|k| sub.e[(i, k)] * sub.gamma[(j, k)]).sum();
            direct += (p.m[(i, j)] - sub.shared()[i] - low).powi(2);
        }
    }
    assert!((obj - direct.sqrt()).abs() < 1e-10);
    assert!(residual_objective(&p.m, &sub.shared(), &sub.e, &Matrix::zeros(3, 2)).is_err());
}

#[test]
fn rejects_bad_rank_and_degenerate_input() {
    let p = planted(6, 5, 2, 0.1, 1);
    assert!(matches!(identify(&cm(p.m.clone()), 5), Err(Error::InvalidArgument(_))));
    assert!(matches!(identify(&cm(p.m), 6), Err(Error::InvalidArgument(_))));
    assert!(matches!(
        identify(&cm(Matrix::zeros(6, 10)), 2),
        Err(Error::Degenerate(_))
    ));
    // All columns inside span(E): nothing left once E is removed.
    let col = Vector::basis(6, 0);
    let cols: Vec<Vector> = (0..10).map(|j| col.scaled(1.0 + j as f64)).collect();
    let m = Matrix::from_columns(6, &cols).unwrap();
    assert!(matches!(identify(&cm(m), 1), Err(Error::Degenerate(_))));
}

#[test]
fn rank_zero_keeps_the_normalized_mean() {
    let p = planted(8, 20, 1, 0.1, 2);
    let sub = identify(&cm(p.m.clone()), 0).unwrap();
    let mut mean = Vector::zeros(8);
    for j in 0..20 {
        mean = mean.add(&p.m.column(j));
    }
    let want = mean.scaled(1.0 / mean.norm());
    assert!(sub.s.sub(&want).norm() < 1e-12);
    assert_eq!(sub.r(), 0);
}

#[test]
fn basis_rank_truncates() {
    let p = planted(8, 20, 2, 0.1, 2);
    let sub = identify(&cm(p.m), 2).unwrap();
    assert_eq!(sub.with_basis_rank(0).unwrap().w.cols(), 0);
    assert_eq!(sub.with_basis_rank(1).unwrap().w.cols(), 1);
    assert!(sub.with_basis_rank(2).is_err());
}

#[test]
fn store_round_trips_bit_exactly() {
    let mut store = SubspaceStore::new();
    for (i, c) in [ComponentId::mlp(1), ComponentId::head(0, 2), ComponentId::head(1, 0)]
        .into_iter()
        .enumerate()
    {
        let p = planted(8, 20, 2, 0.1, i as u64);
        let mut sub = identify(&cm(p.m), 2).unwrap();
        sub.component = c;
        store.insert(sub);
    }
    let comps: Vec<_> = store.entries().iter().map(|s| s.component).collect();
    let mut sorted = comps.clone();
    sorted.sort();
    assert_eq!(comps, sorted);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.tsf");
    store.save(&path).unwrap();
    let back = SubspaceStore::load(&path).unwrap();
    assert_eq!(back, store);
    assert!(back.get(ComponentId::head(3, 3)).is_none());
}

#[test]
fn contrastive_columns_are_activation_differences() {
    let corpus = Corpus::generate(&CorpusConfig {
        lexicon_size: 4,
        shift_size: 0,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_ff: 32,
        vocab_size: corpus.vocab.size(),
        max_seq: 12,
        seed: 4,
    };
    let model = Model::new(cfg).unwrap();
    let pairs = &corpus.pairs[..6];
    let comps = [ComponentId::head(1, 1), ComponentId::mlp(0)];
    let cms = contrastive_matrices(&model, pairs, &comps).unwrap();
    for (c, m) in comps.iter().zip(&cms) {
        assert_eq!(m.m.shape(), (16, 6));
        for (j, p) in pairs.iter().enumerate() {
            let (_, pos) = model.forward(&p.positive, &[]).unwrap();
            let (_, neg) = model.forward(&p.negative, &[]).unwrap();
            let want = pos
                .activation(*c, Position::End)
                .unwrap()
                .sub(&neg.activation(*c, Position::End).unwrap());
            assert!(m.m.column(j).sub(&want).norm() == 0.0);
        }
    }
}
