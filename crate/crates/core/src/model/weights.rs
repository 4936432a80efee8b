// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ParamGroup};

/// Parameters of one transformer block.
///
/// Projection matrices are row-major `in × out`; head `h` owns output
/// columns `h·d_head..(h+1)·d_head` of `w_q`, `w_k`, `w_v` and the matching
/// rows of `w_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub mlp_norm: Vec<f64>,
    pub w_in: Vec<f64>,
    pub b_in: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

/// All model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `vocab × d_model`.
    pub tok_emb: Vec<f64>,
    /// `max_seq × d_model`.
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `d_model × vocab`.
    pub w_u: Vec<f64>,
}

/// Name and shape of a stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Weights {
    pub fn zeros(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let layer = LayerWeights {
            attn_norm: vec![0.0; d],
            w_q: vec![0.0; d * d],
            w_k: vec![0.0; d * d],
            w_v: vec![0.0; d * d],
            w_o: vec![0.0; d * d],
            mlp_norm: vec![0.0; d],
            w_in: vec![0.0; d * c.d_ff],
            b_in: vec![0.0; c.d_ff],
            w_out: vec![0.0; c.d_ff * d],
            b_out: vec![0.0; d],
        };
        Self {
            tok_emb: vec![0.0; c.vocab_size * d],
            pos_emb: vec![0.0; c.max_seq * d],
            layers: vec![layer; c.n_layers],
            final_norm: vec![0.0; d],
            w_u: vec![0.0; d * c.vocab_size],
        }
    }

    /// Scaled-normal initialization, deterministic in `config.seed`, rounded
    /// to `f32` precision so checkpoints round-trip exactly.
    pub fn init(c: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let d = c.d_model as f64;
        let depth = (2.0 * c.n_layers as f64).sqrt();
        let mut fill = |buf: &mut Vec<f64>, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in buf.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        };
        let mut w = Self::zeros(c);
        fill(&mut w.tok_emb, 1.0);
        fill(&mut w.pos_emb, 0.5);
        for layer in &mut w.layers {
            layer.attn_norm.fill(1.0);
            fill(&mut layer.w_q, 1.0 / d.sqrt());
            fill(&mut layer.w_k, 1.0 / d.sqrt());
            fill(&mut layer.w_v, 1.0 / d.sqrt());
            fill(&mut layer.w_o, 1.0 / d.sqrt() / depth);
            layer.mlp_norm.fill(1.0);
            fill(&mut layer.w_in, 1.0 / d.sqrt());
            fill(&mut layer.w_out, 1.0 / (c.d_ff as f64).sqrt() / depth);
        }
        w.final_norm.fill(1.0);
        fill(&mut w.w_u, 1.0 / d.sqrt());
        w.round_to_f32();
        w
    }

    /// Ordered manifest of every tensor.
    pub fn specs(c: &ModelConfig) -> Vec<TensorSpec> {
        let d = c.d_model;
        let mut out = vec![
            TensorSpec::new("tok_emb", &[c.vocab_size, d]),
            TensorSpec::new("pos_emb", &[c.max_seq, d]),
        ];
        for l in 0..c.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push(TensorSpec::new(p("attn_norm"), &[d]));
            out.push(TensorSpec::new(p("w_q"), &[d, d]));
            out.push(TensorSpec::new(p("w_k"), &[d, d]));
            out.push(TensorSpec::new(p("w_v"), &[d, d]));
            out.push(TensorSpec::new(p("w_o"), &[d, d]));
            out.push(TensorSpec::new(p("mlp_norm"), &[d]));
            out.push(TensorSpec::new(p("w_in"), &[d, c.d_ff]));
            out.push(TensorSpec::new(p("b_in"), &[c.d_ff]));
            out.push(TensorSpec::new(p("w_out"), &[c.d_ff, d]));
            out.push(TensorSpec::new(p("b_out"), &[d]));
        }
        out.push(TensorSpec::new("final_norm", &[d]));
        out.push(TensorSpec::new("w_u", &[d, c.vocab_size]));
        out
    }

    /// Tensors in manifest order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.attn_norm[..],
                &l.w_q,
                &l.w_k,
                &l.w_v,
                &l.w_o,
                &l.mlp_norm,
                &l.w_in,
                &l.b_in,
                &l.w_out,
                &l.b_out,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.w_u);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.mlp_norm,
                &mut l.w_in,
                &mut l.b_in,
                &mut l.w_out,
                &mut l.b_out,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.w_u);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Locates flat parameter `index` as (tensor, offset).
    pub fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (t, tensor) in self.tensors().iter().enumerate() {
            if index < tensor.len() {
                return Some((t, index));
            }
            index -= tensor.len();
        }
        None
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let (t, i) = self.locate(index).expect("parameter index in range");
        self.tensors()[t][i]
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let (t, i) = self.locate(index).expect("parameter index in range");
        self.tensors_mut()[t][i] = value;
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// CRC32 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in self.tensors() {
            for x in t {
                h.update(&x.to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Contiguous `(tensor index, element range)` runs making up a group, in
    /// a fixed order. Tensor indices follow [`Weights::tensors`].
    pub fn group_spans(c: &ModelConfig, group: ParamGroup) -> Vec<(usize, Range<usize>)> {
        let d = c.d_model;
        let base = |layer: usize| 2 + 10 * layer;
        let whole = |t: usize, len: usize| (t, 0..len);
        match group {
            ParamGroup::Embedding => vec![whole(0, c.vocab_size * d), whole(1, c.max_seq * d)],
            ParamGroup::Unembedding => {
                let t = base(c.n_layers);
                vec![whole(t, d), whole(t + 1, d * c.vocab_size)]
            }
            ParamGroup::AttnNorm { layer } => vec![whole(base(layer), d)],
            ParamGroup::Mlp { layer } => {
                let b = base(layer);
                vec![
                    whole(b + 5, d),
                    whole(b + 6, d * c.d_ff),
                    whole(b + 7, c.d_ff),
                    whole(b + 8, c.d_ff * d),
                    whole(b + 9, d),
                ]
            }
            ParamGroup::Head { layer, head } => {
                let b = base(layer);
                let cols = head * c.d_head..(head + 1) * c.d_head;
                let mut out = Vec::with_capacity(3 * d + 1);
                for t in 1..=3 {
                    for row in 0..d {
                        out.push((b + t, row * d + cols.start..row * d + cols.end));
                    }
                }
                out.push((b + 4, cols.start * d..cols.end * d));
                out
            }
        }
    }

    /// Visits every element of a parameter group, in a fixed order.
    pub fn for_each_in_group(&mut self, c: &ModelConfig, group: ParamGroup, mut f: impl FnMut(&mut f64)) {
        let spans = Self::group_spans(c, group);
        let mut tensors = self.tensors_mut();
        for (t, range) in spans {
            tensors[t][range].iter_mut().for_each(&mut f);
        }
    }

    /// Copies the elements of a group into a flat vector.
    pub fn group_values(&self, c: &ModelConfig, group: ParamGroup) -> Vec<f64> {
        let tensors = self.tensors();
        Self::group_spans(c, group)
            .into_iter()
            .flat_map(|(t, range)| tensors[t][range].iter().copied())
            .collect()
    }
}
