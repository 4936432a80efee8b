// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients of the next-token cross-entropy, written out by hand
//! for every operation of the forward pass.

use super::forward::{gelu_grad, run, LogitRows, Trace};
use super::{Model, ModelConfig, ParamGroup, Weights};
use crate::error::{Error, Result};
use crate::numerics::{gemm, Layout};

/// One supervised position: predict `target` after `tokens[..=position]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub position: usize,
    pub target: u32,
}

impl Example {
    /// Supervises the final token.
    pub fn at_end(tokens: Vec<u32>, target: u32) -> Self {
        let position = tokens.len().saturating_sub(1);
        Self {
            tokens,
            position,
            target,
        }
    }
}

/// Parameter gradients, shaped like [`Weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Weights);

impl Gradients {
    pub fn zeros(c: &ModelConfig) -> Self {
        Gradients(Weights::zeros(c))
    }

    pub fn weights(&self) -> &Weights {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn group_values(&self, c: &ModelConfig, group: ParamGroup) -> Vec<f64> {
        self.0.group_values(c, group)
    }

    pub fn group_norm(&self, c: &ModelConfig, group: ParamGroup) -> f64 {
        self.group_values(c, group).iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn zero_group(&mut self, c: &ModelConfig, group: ParamGroup) {
        self.0.for_each_in_group(c, group, |g| *g = 0.0);
    }

    pub fn scale_group(&mut self, c: &ModelConfig, group: ParamGroup, s: f64) {
        self.0.for_each_in_group(c, group, |g| *g *= s);
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        self.0.get_flat(index)
    }
}

fn rms_norm_backward(x: &[f64], gain: &[f64], rms: &[f64], dy: &[f64], d: usize, dgain: &mut [f64], dx: &mut [f64]) {
    for (((xr, &r), dyr), dxr) in x.chunks(d).zip(rms).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let mut dot = 0.0;
        for i in 0..d {
            dgain[i] += dyr[i] * xr[i] / r;
            dot += dyr[i] * gain[i] * xr[i];
        }
        let k = dot / (d as f64 * r * r * r);
        for i in 0..d {
            dxr[i] += dyr[i] * gain[i] / r - xr[i] * k;
        }
    }
}

fn column_sums_into(buf: &[f64], width: usize, out: &mut [f64]) {
    for row in buf.chunks(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Mean cross-entropy over `examples` and its exact gradient.
pub(crate) fn loss_and_gradients(model: &Model, examples: &[Example]) -> Result<(f64, Gradients)> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples"));
    }
    let c = *model.config();
    if let Some(e) = examples.iter().find(|e| e.target as usize >= c.vocab_size) {
        return Err(Error::invalid(format!("target token {} out of range", e.target)));
    }
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let positions: Vec<usize> = examples.iter().map(|e| e.position).collect();
    let trace = run(model, &seqs, &positions, &[], LogitRows::Selected)?;
    Ok(backprop(model, &trace, examples))
}

fn backprop(model: &Model, trace: &Trace, examples: &[Example]) -> (f64, Gradients) {
    let c = *model.config();
    let w = model.weights();
    let (d, dh, nh, ff, vocab) = (c.d_model, c.d_head, c.n_heads, c.d_ff, c.vocab_size);
    let r = trace.rows();
    let b = examples.len();
    let inv_b = 1.0 / b as f64;
    let mut g = Weights::zeros(&c);

    // Softmax cross-entropy at the scored rows.
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; b * vocab];
    for (i, ex) in examples.iter().enumerate() {
        let row = trace.selected_logits(i, vocab);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[ex.target as usize];
        let dl = &mut dlogits[i * vocab..(i + 1) * vocab];
        for (o, z) in dl.iter_mut().zip(row) {
            *o = (z - lse).exp() * inv_b;
        }
        dl[ex.target as usize] -= inv_b;
    }
    loss *= inv_b;

    // Unembedding.
    let mut nf_sel = vec![0.0; b * d];
    for (i, &row) in trace.scored_rows.iter().enumerate() {
        nf_sel[i * d..(i + 1) * d].copy_from_slice(&trace.nf[row * d..(row + 1) * d]);
    }
    gemm(
        d,
        b,
        vocab,
        &nf_sel,
        Layout::Transposed,
        &dlogits,
        Layout::RowMajor,
        &mut g.w_u,
        1.0,
    );
    let mut dnf_sel = vec![0.0; b * d];
    gemm(
        b,
        vocab,
        d,
        &dlogits,
        Layout::RowMajor,
        &w.w_u,
        Layout::Transposed,
        &mut dnf_sel,
        0.0,
    );
    let mut dnf = vec![0.0; r * d];
    for (i, &row) in trace.scored_rows.iter().enumerate() {
        for (o, v) in dnf[row * d..(row + 1) * d].iter_mut().zip(&dnf_sel[i * d..(i + 1) * d]) {
            *o += v;
        }
    }
    let mut dx = vec![0.0; r * d];
    rms_norm_backward(
        &trace.x_final,
        &w.final_norm,
        &trace.rms_f,
        &dnf,
        d,
        &mut g.final_norm,
        &mut dx,
    );

    let scale = 1.0 / (dh as f64).sqrt();
    for (li, lt) in trace.layers.iter().enumerate().rev() {
        let lw = &w.layers[li];
        let lg = &mut g.layers[li];

        // MLP: x = x_mid + W_out·gelu(W_in·norm(x_mid) + b_in) + b_out.
        column_sums_into(&dx, d, &mut lg.b_out);
        gemm(
            ff,
            r,
            d,
            &lt.act,
            Layout::Transposed,
            &dx,
            Layout::RowMajor,
            &mut lg.w_out,
            1.0,
        );
        let mut dhid = vec![0.0; r * ff];
        gemm(
            r,
            d,
            ff,
            &dx,
            Layout::RowMajor,
            &lw.w_out,
            Layout::Transposed,
            &mut dhid,
            0.0,
        );
        for (dh_, &h) in dhid.iter_mut().zip(&lt.hid) {
            *dh_ *= gelu_grad(h);
        }
        column_sums_into(&dhid, ff, &mut lg.b_in);
        gemm(
            d,
            r,
            ff,
            &lt.n2,
            Layout::Transposed,
            &dhid,
            Layout::RowMajor,
            &mut lg.w_in,
            1.0,
        );
        let mut dn2 = vec![0.0; r * d];
        gemm(
            r,
            ff,
            d,
            &dhid,
            Layout::RowMajor,
            &lw.w_in,
            Layout::Transposed,
            &mut dn2,
            0.0,
        );
        let mut dx_mid = dx;
        rms_norm_backward(
            &lt.x_mid,
            &lw.mlp_norm,
            &lt.rms2,
            &dn2,
            d,
            &mut lg.mlp_norm,
            &mut dx_mid,
        );

        // Attention output projection: Σ_h z_h·W_o[h] = z·W_o.
        gemm(
            d,
            r,
            d,
            &lt.z,
            Layout::Transposed,
            &dx_mid,
            Layout::RowMajor,
            &mut lg.w_o,
            1.0,
        );
        let mut dz = vec![0.0; r * d];
        gemm(
            r,
            d,
            d,
            &dx_mid,
            Layout::RowMajor,
            &lw.w_o,
            Layout::Transposed,
            &mut dz,
            0.0,
        );

        let mut dq = vec![0.0; r * d];
        let mut dk = vec![0.0; r * d];
        let mut dv = vec![0.0; r * d];
        for (bi, (&off, &len)) in trace.offsets.iter().zip(&trace.lens).enumerate() {
            for h in 0..nh {
                let col = h * dh;
                let a = &lt.attn[bi * nh + h];
                let at = |i: usize, j: usize| (off + i) * d + col + j;
                for i in 0..len {
                    let arow = &a[i * len..(i + 1) * len];
                    // dA_ij = dz_i · v_j ; dv_j += A_ij dz_i
                    let mut da = vec![0.0; i + 1];
                    for j in 0..=i {
                        let mut s = 0.0;
                        for t in 0..dh {
                            s += dz[at(i, t)] * lt.v[at(j, t)];
                            dv[at(j, t)] += arow[j] * dz[at(i, t)];
                        }
                        da[j] = s;
                    }
                    let inner: f64 = (0..=i).map(|j| arow[j] * da[j]).sum();
                    for j in 0..=i {
                        let ds = arow[j] * (da[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq[at(i, t)] += ds * lt.k[at(j, t)];
                            dk[at(j, t)] += ds * lt.q[at(i, t)];
                        }
                    }
                }
            }
        }
        gemm(
            d,
            r,
            d,
            &lt.n1,
            Layout::Transposed,
            &dq,
            Layout::RowMajor,
            &mut lg.w_q,
            1.0,
        );
        gemm(
            d,
            r,
            d,
            &lt.n1,
            Layout::Transposed,
            &dk,
            Layout::RowMajor,
            &mut lg.w_k,
            1.0,
        );
        gemm(
            d,
            r,
            d,
            &lt.n1,
            Layout::Transposed,
            &dv,
            Layout::RowMajor,
            &mut lg.w_v,
            1.0,
        );
        let mut dn1 = vec![0.0; r * d];
        gemm(
            r,
            d,
            d,
            &dq,
            Layout::RowMajor,
            &lw.w_q,
            Layout::Transposed,
            &mut dn1,
            1.0,
        );
        gemm(
            r,
            d,
            d,
            &dk,
            Layout::RowMajor,
            &lw.w_k,
            Layout::Transposed,
            &mut dn1,
            1.0,
        );
        gemm(
            r,
            d,
            d,
            &dv,
            Layout::RowMajor,
            &lw.w_v,
            Layout::Transposed,
            &mut dn1,
            1.0,
        );
        let mut dx_in = dx_mid;
        rms_norm_backward(
            &lt.x_in,
            &lw.attn_norm,
            &lt.rms1,
            &dn1,
            d,
            &mut lg.attn_norm,
            &mut dx_in,
        );
        dx = dx_in;
    }

    for (&off, &len) in trace.offsets.iter().zip(&trace.lens) {
        for p in 0..len {
            let t = trace.tokens[off + p] as usize;
            let row = &dx[(off + p) * d..(off + p + 1) * d];
            for (o, v) in g.tok_emb[t * d..(t + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
            for (o, v) in g.pos_emb[p * d..(p + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    (loss, Gradients(g))
}

/// Mean cross-entropy without gradients.
pub(crate) fn loss_only(model: &Model, examples: &[Example]) -> Result<f64> {
    let c = model.config();
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let positions: Vec<usize> = examples.iter().map(|e| e.position).collect();
    let trace = run(model, &seqs, &positions, &[], LogitRows::Selected)?;
    let mut loss = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let row = trace.selected_logits(i, c.vocab_size);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[ex.target as usize];
    }
    Ok(loss / examples.len() as f64)
}
