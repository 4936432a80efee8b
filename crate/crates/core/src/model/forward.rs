// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm forward pass over a packed batch of sequences.
//!
//! Every head writes its own residual-stream contribution (post output
//! projection), so hooks on heads, MLPs, the embedding and the final normed
//! state all act on `d_model`-sized vectors.

use super::{ComponentId, Model};
use crate::error::{Error, Result};
use crate::numerics::{gemm, Layout, Matrix, Vector};

pub(crate) const NORM_EPS: f64 = 1e-6;

/// Token position a hook acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    /// The final prompt token, whose next-token logits are scored.
    End,
    Index(usize),
}

/// What a hook does to the targeted contribution.
#[derive(Debug, Clone, PartialEq)]
pub enum HookAction {
    Replace(Vector),
    /// `W Wᵀ counterfactual + (I − W Wᵀ) current` for orthonormal `basis` W.
    SubspacePatch {
        basis: Matrix,
        counterfactual: Vector,
    },
    MeanAblate(Vector),
    FreezeTo(Vector),
}

/// Intervention on one component's residual-stream contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Hook {
    pub target: ComponentId,
    pub position: Position,
    pub action: HookAction,
}

impl Hook {
    pub fn new(target: ComponentId, position: Position, action: HookAction) -> Self {
        Self {
            target,
            position,
            action,
        }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        let c = model.config();
        self.target.validate(c)?;
        let d = c.d_model;
        let check = |v: &Vector| {
            if v.dim() == d {
                Ok(())
            } else {
                Err(Error::mismatch(format!("hook on {}", self.target), d, v.dim()))
            }
        };
        match &self.action {
            HookAction::Replace(v) | HookAction::MeanAblate(v) | HookAction::FreezeTo(v) => check(v),
            HookAction::SubspacePatch { basis, counterfactual } => {
                check(counterfactual)?;
                if basis.rows() != d {
                    return Err(Error::mismatch("hook basis rows", d, basis.rows()));
                }
                Ok(())
            }
        }
    }

    fn apply(&self, row: &mut [f64]) {
        match &self.action {
            HookAction::Replace(v) | HookAction::MeanAblate(v) | HookAction::FreezeTo(v) => {
                row.copy_from_slice(v.as_slice())
            }
            HookAction::SubspacePatch { basis, counterfactual } => {
                let current = Vector::from_vec_unchecked(row.to_vec());
                let patched = subspace_mix(basis, counterfactual, &current);
                row.copy_from_slice(patched.as_slice());
            }
        }
    }
}

/// `W Wᵀ cf + (I − W Wᵀ) current`, evaluated as `current − W Wᵀ current + W Wᵀ cf`.
///
/// With an empty basis the result is `current`, bit for bit.
pub fn subspace_mix(basis: &Matrix, counterfactual: &Vector, current: &Vector) -> Vector {
    let d = current.dim();
    let k = basis.cols();
    let mut out = current.clone();
    for j in 0..k {
        let mut c_cur = 0.0;
        let mut c_cf = 0.0;
        for i in 0..d {
            c_cur += basis[(i, j)] * current[i];
            c_cf += basis[(i, j)] * counterfactual[i];
        }
        let diff = c_cf - c_cur;
        for i in 0..d {
            out[i] += basis[(i, j)] * diff;
        }
    }
    out
}

/// Which rows of logits to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LogitRows {
    All,
    /// One row per sequence, at the given position per sequence.
    Selected,
}

/// Intermediate tensors of one block, packed over all rows of the batch.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub x_in: Vec<f64>,
    pub rms1: Vec<f64>,
    pub n1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Per (sequence, head): `T × T` attention weights, causal.
    pub attn: Vec<Vec<f64>>,
    /// Concatenated head outputs before projection, `R × d_model`.
    pub z: Vec<f64>,
    /// Per head: its residual contribution, `R × d_model`.
    pub head_out: Vec<Vec<f64>>,
    pub x_mid: Vec<f64>,
    pub rms2: Vec<f64>,
    pub n2: Vec<f64>,
    pub hid: Vec<f64>,
    pub act: Vec<f64>,
    pub mlp_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
    pub tokens: Vec<u32>,
    pub embed: Vec<f64>,
    pub layers: Vec<LayerTrace>,
    pub x_final: Vec<f64>,
    pub rms_f: Vec<f64>,
    pub nf: Vec<f64>,
    /// Either all rows (`R × V`) or one row per sequence (`B × V`).
    pub logits: Vec<f64>,
    /// Row scored per sequence (absolute packed row index).
    pub scored_rows: Vec<usize>,
}

impl Trace {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

pub(crate) fn rms_norm(x: &[f64], gain: &[f64], d: usize, out: &mut [f64], rms: &mut [f64]) {
    for ((row, o), r) in x.chunks(d).zip(out.chunks_mut(d)).zip(rms.iter_mut()) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = (ms + NORM_EPS).sqrt();
        *r = s;
        for ((o, &v), &g) in o.iter_mut().zip(row).zip(gain) {
            *o = g * v / s;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Hooks bucketed by target slot.
struct HookTable<'h> {
    embed: Vec<&'h Hook>,
    heads: Vec<Vec<&'h Hook>>,
    mlps: Vec<Vec<&'h Hook>>,
    unembed: Vec<&'h Hook>,
}

impl<'h> HookTable<'h> {
    fn build(model: &Model, hooks: &'h [Hook]) -> Result<Self> {
        let c = model.config();
        let mut t = HookTable {
            embed: Vec::new(),
            heads: vec![Vec::new(); c.n_layers * c.n_heads],
            mlps: vec![Vec::new(); c.n_layers],
            unembed: Vec::new(),
        };
        for h in hooks {
            h.validate(model)?;
            match h.target {
                ComponentId::Embedding => t.embed.push(h),
                ComponentId::Head { layer, head } => t.heads[layer * c.n_heads + head].push(h),
                ComponentId::Mlp { layer } => t.mlps[layer].push(h),
                ComponentId::Unembedding => t.unembed.push(h),
            }
        }
        Ok(t)
    }
}

fn apply_hooks(hooks: &[&Hook], buf: &mut [f64], d: usize, offsets: &[usize], lens: &[usize]) {
    for hook in hooks {
        for (&off, &len) in offsets.iter().zip(lens) {
            let pos = match hook.position {
                Position::End => len - 1,
                Position::Index(i) if i < len => i,
                Position::Index(_) => continue,
            };
            let row = off + pos;
            hook.apply(&mut buf[row * d..(row + 1) * d]);
        }
    }
}

/// Runs the model over `seqs`, scoring `positions[b]` of sequence `b`
/// (or every row when `rows == All`).
pub(crate) fn run(
    model: &Model,
    seqs: &[&[u32]],
    positions: &[usize],
    hooks: &[Hook],
    rows: LogitRows,
) -> Result<Trace> {
    let c = model.config();
    let w = model.weights();
    let (d, dh, nh, ff, vocab) = (c.d_model, c.d_head, c.n_heads, c.d_ff, c.vocab_size);
    if seqs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut offsets = Vec::with_capacity(seqs.len());
    let mut lens = Vec::with_capacity(seqs.len());
    let mut tokens = Vec::new();
    for (s, &p) in seqs.iter().zip(positions) {
        if s.is_empty() || s.len() > c.max_seq {
            return Err(Error::invalid(format!(
                "sequence length {} outside 1..={}",
                s.len(),
                c.max_seq
            )));
        }
        if p >= s.len() {
            return Err(Error::invalid(format!(
                "position {p} beyond sequence length {}",
                s.len()
            )));
        }
        if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::invalid(format!("token id {t} out of range (vocab {vocab})")));
        }
        offsets.push(tokens.len());
        lens.push(s.len());
        tokens.extend_from_slice(s);
    }
    let table = HookTable::build(model, hooks)?;
    let r = tokens.len();

    let mut x = vec![0.0; r * d];
    for (&off, &len) in offsets.iter().zip(&lens) {
        for p in 0..len {
            let t = tokens[off + p] as usize;
            let row = &mut x[(off + p) * d..(off + p + 1) * d];
            let te = &w.tok_emb[t * d..(t + 1) * d];
            let pe = &w.pos_emb[p * d..(p + 1) * d];
            for ((o, a), b) in row.iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
    }
    apply_hooks(&table.embed, &mut x, d, &offsets, &lens);
    let embed = x.clone();

    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(c.n_layers);
    for (li, lw) in w.layers.iter().enumerate() {
        let x_in = x;
        let mut rms1 = vec![0.0; r];
        let mut n1 = vec![0.0; r * d];
        rms_norm(&x_in, &lw.attn_norm, d, &mut n1, &mut rms1);
        let mut q = vec![0.0; r * d];
        let mut k = vec![0.0; r * d];
        let mut v = vec![0.0; r * d];
        gemm(r, d, d, &n1, Layout::RowMajor, &lw.w_q, Layout::RowMajor, &mut q, 0.0);
        gemm(r, d, d, &n1, Layout::RowMajor, &lw.w_k, Layout::RowMajor, &mut k, 0.0);
        gemm(r, d, d, &n1, Layout::RowMajor, &lw.w_v, Layout::RowMajor, &mut v, 0.0);

        let mut attn = Vec::with_capacity(seqs.len() * nh);
        let mut z = vec![0.0; r * d];
        for (&off, &len) in offsets.iter().zip(&lens) {
            for h in 0..nh {
                let col = h * dh;
                let mut a = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &q[(off + i) * d + col..(off + i) * d + col + dh];
                    let row = &mut a[i * len..(i + 1) * len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &k[(off + j) * d + col..(off + j) * d + col + dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for e in row[..=i].iter_mut() {
                        *e = (*e - max).exp();
                        sum += *e;
                    }
                    for e in row[..=i].iter_mut() {
                        *e /= sum;
                    }
                    let zi = &mut z[(off + i) * d + col..(off + i) * d + col + dh];
                    for j in 0..=i {
                        let aij = row[j];
                        let vj = &v[(off + j) * d + col..(off + j) * d + col + dh];
                        for (o, &vv) in zi.iter_mut().zip(vj) {
                            *o += aij * vv;
                        }
                    }
                }
                attn.push(a);
            }
        }

        let mut head_out = Vec::with_capacity(nh);
        let mut zh = vec![0.0; r * dh];
        for h in 0..nh {
            for row in 0..r {
                zh[row * dh..(row + 1) * dh].copy_from_slice(&z[row * d + h * dh..row * d + (h + 1) * dh]);
            }
            let mut out = vec![0.0; r * d];
            let wo = &lw.w_o[h * dh * d..(h + 1) * dh * d];
            gemm(r, dh, d, &zh, Layout::RowMajor, wo, Layout::RowMajor, &mut out, 0.0);
            apply_hooks(&table.heads[li * nh + h], &mut out, d, &offsets, &lens);
            head_out.push(out);
        }
        let mut x_mid = x_in.clone();
        for out in &head_out {
            for (m, o) in x_mid.iter_mut().zip(out) {
                *m += o;
            }
        }

        let mut rms2 = vec![0.0; r];
        let mut n2 = vec![0.0; r * d];
        rms_norm(&x_mid, &lw.mlp_norm, d, &mut n2, &mut rms2);
        let mut hid = vec![0.0; r * ff];
        for row in hid.chunks_mut(ff) {
            row.copy_from_slice(&lw.b_in);
        }
        gemm(
            r,
            d,
            ff,
            &n2,
            Layout::RowMajor,
            &lw.w_in,
            Layout::RowMajor,
            &mut hid,
            1.0,
        );
        let act: Vec<f64> = hid.iter().map(|&h| gelu(h)).collect();
        let mut mlp_out = vec![0.0; r * d];
        for row in mlp_out.chunks_mut(d) {
            row.copy_from_slice(&lw.b_out);
        }
        gemm(
            r,
            ff,
            d,
            &act,
            Layout::RowMajor,
            &lw.w_out,
            Layout::RowMajor,
            &mut mlp_out,
            1.0,
        );
        apply_hooks(&table.mlps[li], &mut mlp_out, d, &offsets, &lens);

        x = x_mid.clone();
        for (o, m) in x.iter_mut().zip(&mlp_out) {
            *o += m;
        }
        layers.push(LayerTrace {
            x_in,
            rms1,
            n1,
            q,
            k,
            v,
            attn,
            z,
            head_out,
            x_mid,
            rms2,
            n2,
            hid,
            act,
            mlp_out,
        });
    }

    let mut rms_f = vec![0.0; r];
    let mut nf = vec![0.0; r * d];
    rms_norm(&x, &w.final_norm, d, &mut nf, &mut rms_f);
    apply_hooks(&table.unembed, &mut nf, d, &offsets, &lens);

    let scored_rows: Vec<usize> = offsets.iter().zip(positions).map(|(o, p)| o + p).collect();
    let logits = match rows {
        LogitRows::All => {
            let mut out = vec![0.0; r * vocab];
            gemm(
                r,
                d,
                vocab,
                &nf,
                Layout::RowMajor,
                &w.w_u,
                Layout::RowMajor,
                &mut out,
                0.0,
            );
            out
        }
        LogitRows::Selected => {
            let b = scored_rows.len();
            let mut sel = vec![0.0; b * d];
            for (i, &row) in scored_rows.iter().enumerate() {
                sel[i * d..(i + 1) * d].copy_from_slice(&nf[row * d..(row + 1) * d]);
            }
            let mut out = vec![0.0; b * vocab];
            gemm(
                b,
                d,
                vocab,
                &sel,
                Layout::RowMajor,
                &w.w_u,
                Layout::RowMajor,
                &mut out,
                0.0,
            );
            out
        }
    };

    Ok(Trace {
        offsets,
        lens,
        tokens,
        embed,
        layers,
        x_final: x,
        rms_f,
        nf,
        logits,
        scored_rows,
    })
}

/// Recorded activations of a single sequence.
///
/// Every component entry is that component's contribution to the residual
/// stream (`d_model` wide) at each position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub tokens: Vec<u32>,
    pub n_heads: usize,
    /// `T × d`.
    pub embedding: Matrix,
    /// Indexed `layer · n_heads + head`, each `T × d`.
    pub heads: Vec<Matrix>,
    /// Per layer, `T × d`.
    pub mlps: Vec<Matrix>,
    /// Indexed like `heads`, each `T × T`, rows sum to one.
    pub attention: Vec<Matrix>,
    /// Indexed like `heads`, each `T × d_head`: per-position value vectors.
    pub values: Vec<Matrix>,
    /// Residual stream entering each layer.
    pub resid_pre: Vec<Matrix>,
    /// Residual stream entering each MLP (its `MLP_in`).
    pub resid_mid: Vec<Matrix>,
    /// Residual stream after the last layer, before the final norm.
    pub resid_final: Matrix,
    /// Final normed state fed to the unembedding.
    pub final_normed: Matrix,
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn end(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn resolve(&self, position: Position) -> Result<usize> {
        match position {
            Position::End => Ok(self.end()),
            Position::Index(i) if i < self.seq_len() => Ok(i),
            Position::Index(i) => Err(Error::invalid(format!("position {i} beyond sequence"))),
        }
    }

    /// Contribution of `component` at `position`.
    pub fn activation(&self, component: ComponentId, position: Position) -> Result<Vector> {
        let p = self.resolve(position)?;
        let m = match component {
            ComponentId::Embedding => &self.embedding,
            ComponentId::Head { layer, head } => self
                .heads
                .get(layer * self.n_heads + head)
                .filter(|_| head < self.n_heads)
                .ok_or_else(|| Error::invalid(format!("{component} not in cache")))?,
            ComponentId::Mlp { layer } => self
                .mlps
                .get(layer)
                .ok_or_else(|| Error::invalid(format!("{component} not in cache")))?,
            ComponentId::Unembedding => &self.final_normed,
        };
        Ok(Vector::from_vec_unchecked(m.row(p).to_vec()))
    }

    pub fn attention(&self, layer: usize, head: usize) -> &Matrix {
        &self.attention[layer * self.n_heads + head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &Matrix {
        &self.values[layer * self.n_heads + head]
    }

    /// `MLP_in` at `position`: the residual stream entering the MLP.
    pub fn mlp_in(&self, layer: usize, position: Position) -> Result<Vector> {
        let p = self.resolve(position)?;
        Ok(Vector::from_vec_unchecked(self.resid_mid[layer].row(p).to_vec()))
    }

    /// `MLP_out` at `position`: the residual stream after the MLP's add.
    pub fn mlp_out(&self, layer: usize, position: Position) -> Result<Vector> {
        let input = self.mlp_in(layer, position)?;
        let delta = self.activation(ComponentId::mlp(layer), position)?;
        Ok(input.add(&delta))
    }

    /// Residual stream after block `layer` (input of `layer + 1`).
    pub fn resid_post(&self, layer: usize, position: Position) -> Result<Vector> {
        let p = self.resolve(position)?;
        let m = if layer + 1 < self.resid_pre.len() {
            &self.resid_pre[layer + 1]
        } else {
            &self.resid_final
        };
        Ok(Vector::from_vec_unchecked(m.row(p).to_vec()))
    }
}

fn rows_of(buf: &[f64], off: usize, len: usize, width: usize) -> Matrix {
    Matrix::from_vec_unchecked(len, width, buf[off * width..(off + len) * width].to_vec())
}

impl Trace {
    /// Splits sequence `b` out of the packed trace.
    pub(crate) fn cache(&self, model: &Model, b: usize) -> ActivationCache {
        let c = model.config();
        let (d, dh, nh) = (c.d_model, c.d_head, c.n_heads);
        let off = self.offsets[b];
        let len = self.lens[b];
        let mut heads = Vec::new();
        let mut attention = Vec::new();
        let mut values = Vec::new();
        let mut mlps = Vec::new();
        let mut resid_pre = Vec::new();
        let mut resid_mid = Vec::new();
        for layer in &self.layers {
            for h in 0..nh {
                heads.push(rows_of(&layer.head_out[h], off, len, d));
                attention.push(Matrix::from_vec_unchecked(len, len, layer.attn[b * nh + h].clone()));
                let mut vals = Matrix::zeros(len, dh);
                for p in 0..len {
                    for i in 0..dh {
                        vals[(p, i)] = layer.v[(off + p) * d + h * dh + i];
                    }
                }
                values.push(vals);
            }
            mlps.push(rows_of(&layer.mlp_out, off, len, d));
            resid_pre.push(rows_of(&layer.x_in, off, len, d));
            resid_mid.push(rows_of(&layer.x_mid, off, len, d));
        }
        ActivationCache {
            tokens: self.tokens[off..off + len].to_vec(),
            n_heads: nh,
            embedding: rows_of(&self.embed, off, len, d),
            heads,
            mlps,
            attention,
            values,
            resid_pre,
            resid_mid,
            resid_final: rows_of(&self.x_final, off, len, d),
            final_normed: rows_of(&self.nf, off, len, d),
        }
    }

    /// Logit row scored for sequence `b` (requires `LogitRows::Selected`).
    pub(crate) fn selected_logits(&self, b: usize, vocab: usize) -> &[f64] {
        &self.logits[b * vocab..(b + 1) * vocab]
    }
}
