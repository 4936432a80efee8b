// SPDX-License-Identifier: MIT OR Apache-2.0

//! Translation-steering subspace identification from contrastive activations.
//!
//! The contrastive matrix `M` (`d × N`) is decomposed as
//! `M ≈ c·s·𝟙ᵀ + E·Γᵀ` with `s ⊥ span(E)`: a shared unit direction `s` with a
//! fitted scale `c`, plus a rank-`r` dataset-specific part.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::PromptPair;
use crate::error::{Error, Result};
use crate::model::{ComponentId, Model, Position};
use crate::numerics::{pseudoinverse, top_r_svd, Matrix, Vector};
use crate::tensorfile::{DType, TensorFile, TensorRecord};

/// Column `i` is `a_c(X₊⁽ⁱ⁾) − a_c(X₋⁽ⁱ⁾)` at END.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveMatrix {
    pub component: ComponentId,
    pub m: Matrix,
}

pub fn contrastive_matrix(model: &Model, pairs: &[PromptPair], component: ComponentId) -> Result<ContrastiveMatrix> {
    Ok(contrastive_matrices(model, pairs, &[component])?.remove(0))
}

/// Contrastive matrices for several components from one set of forwards.
pub fn contrastive_matrices(
    model: &Model,
    pairs: &[PromptPair],
    components: &[ComponentId],
) -> Result<Vec<ContrastiveMatrix>> {
    if pairs.is_empty() {
        return Err(Error::invalid("contrastive matrix needs at least one pair"));
    }
    for c in components {
        c.validate(model.config())?;
    }
    let d = model.config().d_model;
    let n = pairs.len();
    let mut out: Vec<Matrix> = components.iter().map(|_| Matrix::zeros(d, n)).collect();
    for chunk_start in (0..n).step_by(64) {
        let chunk = &pairs[chunk_start..(chunk_start + 64).min(n)];
        let pos: Vec<&[u32]> = chunk.iter().map(|p| p.positive.as_slice()).collect();
        let neg: Vec<&[u32]> = chunk.iter().map(|p| p.negative.as_slice()).collect();
        let cp = model.caches(&pos)?;
        let cn = model.caches(&neg)?;
        for (i, (a, b)) in cp.iter().zip(&cn).enumerate() {
            for (ci, &c) in components.iter().enumerate() {
                let diff = a.activation(c, Position::End)?.sub(&b.activation(c, Position::End)?);
                for r in 0..d {
                    out[ci][(r, chunk_start + i)] = diff[r];
                }
            }
        }
    }
    Ok(components
        .iter()
        .zip(out)
        .map(|(&component, m)| ContrastiveMatrix { component, m })
        .collect())
}

/// Normalizer of the shared component: `(1/N)·M𝟙` or the printed `(1/d)·M𝟙`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanScale {
    #[default]
    Columns,
    Dimension,
}

/// How the final direction is forced orthogonal to `span(E)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orthogonalization {
    /// Project the shared component onto the complement of `span(E)`.
    #[default]
    Projection,
    /// Minimum-norm solution `x` of `M′ᵀx = 𝟙` for the rank-`(r+1)`
    /// reconstruction `M′`, normalized.
    Pseudoinverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentifyOptions {
    pub r: usize,
    pub mean_scale: MeanScale,
    pub orthogonalization: Orthogonalization,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self {
            r: 4,
            mean_scale: MeanScale::Columns,
            orthogonalization: Orthogonalization::Projection,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringSubspace {
    pub component: ComponentId,
    /// Unit steering direction.
    pub s: Vector,
    /// Orthonormal patching basis (`d × k`); `[s]` unless truncated.
    pub w: Matrix,
    /// Specific subspace, `d × r`, orthonormal columns.
    pub e: Matrix,
    /// Coordinates, `N × r`.
    pub gamma: Matrix,
    /// Least-squares scale of `s` in the decomposition.
    pub scale: f64,
}

impl SteeringSubspace {
    pub fn r(&self) -> usize {
        self.e.cols()
    }

    /// `c·s`: the unnormalized shared component.
    pub fn shared(&self) -> Vector {
        self.s.scaled(self.scale)
    }

    /// Copy whose patching basis keeps only the first `k` columns.
    pub fn with_basis_rank(&self, k: usize) -> Result<Self> {
        if k > self.w.cols() {
            return Err(Error::invalid(format!(
                "basis rank {k} exceeds the {} stored columns",
                self.w.cols()
            )));
        }
        let mut out = self.clone();
        out.w = self.w.column_slice(0, k);
        Ok(out)
    }
}

fn column_sum(m: &Matrix) -> Vector {
    let mut sum = Vector::zeros(m.rows());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            sum[i] += m[(i, j)];
        }
    }
    sum
}

/// `v − E Eᵀ v`.
fn remove_span(v: &Vector, e: &Matrix) -> Vector {
    let coeff = e.t_matvec(v).expect("shapes agree");
    v.sub(&e.matvec(&coeff).expect("shapes agree"))
}

pub fn identify(m: &ContrastiveMatrix, r: usize) -> Result<SteeringSubspace> {
    identify_with(
        m,
        &IdentifyOptions {
            r,
            ..IdentifyOptions::default()
        },
    )
}

pub fn identify_with(cm: &ContrastiveMatrix, opts: &IdentifyOptions) -> Result<SteeringSubspace> {
    let m = &cm.m;
    let (d, n) = m.shape();
    let r = opts.r;
    if n == 0 || d == 0 {
        return Err(Error::invalid("empty contrastive matrix"));
    }
    if r > 0 && (r >= d.min(n) || n < r + 1) {
        return Err(Error::invalid(format!(
            "r = {r} requires r < min(d, N) = {} and N ≥ r + 1",
            d.min(n)
        )));
    }
    if m.is_zero() {
        return Err(Error::Degenerate(format!(
            "contrastive matrix of {} is all zero",
            cm.component
        )));
    }

    let sum = column_sum(m);
    let norm = match opts.mean_scale {
        MeanScale::Columns => n as f64,
        MeanScale::Dimension => d as f64,
    };
    let shared = sum.scaled(1.0 / norm);
    let mut centered = m.clone();
    for j in 0..n {
        for i in 0..d {
            centered[(i, j)] -= shared[i];
        }
    }
    let svd = top_r_svd(&centered, r)?;
    let e = svd.u.clone();

    let raw = match opts.orthogonalization {
        Orthogonalization::Projection => remove_span(&shared, &e),
        Orthogonalization::Pseudoinverse => {
            // M′ = S′𝟙ᵀ + E′Σ′V′ᵀ, the rank-(r+1) reconstruction.
            let mut m_prime = svd.reconstruct();
            for j in 0..n {
                for i in 0..d {
                    m_prime[(i, j)] += shared[i];
                }
            }
            let x = pseudoinverse(&m_prime.transpose())?.matvec(&Vector::ones(n))?;
            remove_span(&x, &e)
        }
    };
    let reference = raw.norm().max(shared.norm());
    let mut s = unit(&raw, reference, cm.component)?;
    // A second pass removes rounding drift back into span(E).
    s = unit(&remove_span(&s, &e), 1.0, cm.component)?;
    if s.dot(&shared) < 0.0 {
        s = s.scaled(-1.0);
    }

    let gamma = m.transpose().matmul(&e)?;
    let scale = s.dot(&sum) / n as f64;
    let w = Matrix::from_columns(d, std::slice::from_ref(&s))?;
    Ok(SteeringSubspace {
        component: cm.component,
        s,
        w,
        e,
        gamma,
        scale,
    })
}

/// Normalizes `v`, treating it as zero when it is negligible next to `reference`.
fn unit(v: &Vector, reference: f64, c: ComponentId) -> Result<Vector> {
    let n = v.norm();
    if n == 0.0 || n <= 1e-12 * reference {
        return Err(Error::Degenerate(format!(
            "shared component of {c} vanishes outside the specific subspace"
        )));
    }
    Ok(v.scaled(1.0 / n))
}

/// `‖M − shared·𝟙ᵀ − E Γᵀ‖_F`.
pub fn residual_objective(m: &Matrix, shared: &Vector, e: &Matrix, gamma: &Matrix) -> Result<f64> {
    let (d, n) = m.shape();
    if shared.dim() != d {
        return Err(Error::mismatch("shared component", d, shared.dim()));
    }
    if e.rows() != d {
        return Err(Error::mismatch("E rows", d, e.rows()));
    }
    if gamma.rows() != n {
        return Err(Error::mismatch("Γ rows", n, gamma.rows()));
    }
    if gamma.cols() != e.cols() {
        return Err(Error::mismatch("Γ columns", e.cols(), gamma.cols()));
    }
    let low_rank = e.matmul(&gamma.transpose())?;
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..n {
            let v = m[(i, j)] - shared[i] - low_rank[(i, j)];
            total += v * v;
        }
    }
    Ok(total.sqrt())
}

/// Identified subspaces keyed by component, stored in the tensor container.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubspaceStore {
    entries: Vec<SteeringSubspace>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    components: Vec<String>,
}

impl SubspaceStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the record for `sub.component`; entries stay in
    /// component order.
    pub fn insert(&mut self, sub: SteeringSubspace) {
        match self.entries.binary_search_by(|e| e.component.cmp(&sub.component)) {
            Ok(i) => self.entries[i] = sub,
            Err(i) => self.entries.insert(i, sub),
        }
    }

    pub fn get(&self, c: ComponentId) -> Option<&SteeringSubspace> {
        self.entries
            .binary_search_by(|e| e.component.cmp(&c))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn entries(&self) -> &[SteeringSubspace] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let header = StoreHeader {
            components: self.entries.iter().map(|e| e.component.to_string()).collect(),
        };
        let mut tensors = Vec::new();
        let rec = |name: String, shape: Vec<usize>, data: Vec<f64>| TensorRecord {
            name,
            shape,
            dtype: DType::F64,
            data,
        };
        for e in &self.entries {
            let c = e.component;
            tensors.push(rec(format!("{c}.s"), vec![e.s.dim()], e.s.as_slice().to_vec()));
            tensors.push(rec(
                format!("{c}.w"),
                vec![e.w.rows(), e.w.cols()],
                e.w.as_slice().to_vec(),
            ));
            tensors.push(rec(
                format!("{c}.e"),
                vec![e.e.rows(), e.e.cols()],
                e.e.as_slice().to_vec(),
            ));
            tensors.push(rec(
                format!("{c}.gamma"),
                vec![e.gamma.rows(), e.gamma.cols()],
                e.gamma.as_slice().to_vec(),
            ));
            tensors.push(rec(format!("{c}.scale"), vec![1], vec![e.scale]));
        }
        Ok(TensorFile {
            config: serde_json::to_value(header)?,
            tensors,
        })
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let header: StoreHeader = serde_json::from_value(file.config.clone())
            .map_err(|e| Error::invalid(format!("subspace store header: {e}")))?;
        let mut store = Self::new();
        for name in header.components {
            let component: ComponentId = name.parse()?;
            let get = |field: &str| {
                file.get(&format!("{name}.{field}"))
                    .ok_or_else(|| Error::Missing(format!("subspace tensor {name}.{field}")))
            };
            let matrix = |field: &str| -> Result<Matrix> {
                let t = get(field)?;
                if t.shape.len() != 2 {
                    return Err(Error::invalid(format!("{name}.{field} must be 2-d")));
                }
                Matrix::new(t.shape[0], t.shape[1], t.data.clone())
            };
            let s = Vector::new(get("s")?.data.clone())?;
            let scale = *get("scale")?
                .data
                .first()
                .ok_or_else(|| Error::invalid(format!("{name}.scale is empty")))?;
            store.insert(SteeringSubspace {
                component,
                s,
                w: matrix("w")?,
                e: matrix("e")?,
                gamma: matrix("gamma")?,
                scale,
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}
