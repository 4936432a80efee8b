// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decompositions and projections: one-sided Jacobi SVD, pseudoinverse,
//! Gram–Schmidt orthonormalization and orthogonal projection.

use super::matrix::{dot, Matrix, Vector};
use crate::error::{Error, Result};

/// Relative cutoff below which a singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Truncated singular value decomposition `m ≈ u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows × r`, orthonormal columns.
    pub u: Matrix,
    /// Length `r`, non-negative and non-increasing.
    pub sigma: Vector,
    /// `cols × r`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.dim()
    }

    /// `u · diag(sigma) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (rows, r) = self.u.shape();
        let cols = self.v.rows();
        let mut out = Matrix::zeros(rows, cols);
        for k in 0..r {
            let s = self.sigma[k];
            for i in 0..rows {
                let us = self.u[(i, k)] * s;
                if us == 0.0 {
                    continue;
                }
                for j in 0..cols {
                    out[(i, j)] += us * self.v[(j, k)];
                }
            }
        }
        out
    }
}

/// Full thin SVD of a matrix with `rows ≥ cols` by one-sided Jacobi rotations.
///
/// Returns `(u, sigma, v)` with `u: rows × cols`, `v: cols × cols`, sorted by
/// descending singular value.
fn jacobi_tall(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, cols) = m.shape();
    debug_assert!(rows >= cols);
    // Column-major working copies.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j).into_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols).map(|j| Vector::basis(cols, j).into_vec()).collect();

    let eps = f64::EPSILON * rows.max(1) as f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = a.iter().enumerate().map(|(j, col)| (j, dot(col, col).sqrt())).collect();
    // Stable sort keeps ties in column order, which keeps results deterministic.
    order.sort_by(|x, y| y.1.total_cmp(&x.1));

    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let cutoff = sigma_max * 1e-12;
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(cols);
    let mut sigma = Vec::with_capacity(cols);
    let mut v_cols = Vec::with_capacity(cols);
    for &(j, s) in &order {
        if s > cutoff && s > 0.0 {
            u_cols.push(Some(a[j].iter().map(|x| x / s).collect()));
        } else {
            u_cols.push(None);
        }
        sigma.push(s);
        v_cols.push(v[j].clone());
    }
    let u_cols = complete_orthonormal(rows, u_cols);

    // Sign convention: the largest-magnitude entry of each left vector is positive.
    let mut u = Matrix::zeros(rows, cols);
    let mut vm = Matrix::zeros(cols, cols);
    for k in 0..cols {
        let col = &u_cols[k];
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let flip = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            u[(i, k)] = flip * col[i];
        }
        for i in 0..cols {
            vm[(i, k)] = flip * v_cols[k][i];
        }
    }
    (u, sigma, vm)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let ap = &mut left[p];
    let aq = &mut right[0];
    for (x, y) in ap.iter_mut().zip(aq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column,
/// drawn from the standard basis by Gram–Schmidt.
fn complete_orthonormal(dim: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0;
    cols.into_iter()
        .map(|c| match c {
            Some(c) => c,
            None => loop {
                assert!(candidate < dim, "cannot complete orthonormal basis");
                let mut e = Vector::basis(dim, candidate).into_vec();
                candidate += 1;
                for _ in 0..2 {
                    for d in &done {
                        let proj = dot(&e, d);
                        for (x, y) in e.iter_mut().zip(d) {
                            *x -= proj * y;
                        }
                    }
                }
                let n = dot(&e, &e).sqrt();
                if n > 1e-6 {
                    e.iter_mut().for_each(|x| *x /= n);
                    done.push(e.clone());
                    break e;
                }
            },
        })
        .collect()
}

fn full_svd(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let (u, s, v) = jacobi_tall(&m.transpose());
        (v, s, u)
    }
}

/// Best rank-`r` approximation factors of `m`.
pub fn top_r_svd(m: &Matrix, r: usize) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    if let Some(index) = m.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "top_r_svd input".into(),
            index,
        });
    }
    if r > rows.min(cols) {
        return Err(Error::invalid(format!("rank {r} exceeds min({rows}, {cols})")));
    }
    if r == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(rows, 0),
            sigma: Vector::zeros(0),
            v: Matrix::zeros(cols, 0),
        });
    }
    let (u, s, v) = full_svd(m);
    Ok(SvdResult {
        u: u.column_slice(0, r),
        sigma: Vector::from_vec_unchecked(s[..r].to_vec()),
        v: v.column_slice(0, r),
    })
}

/// Moore–Penrose pseudoinverse; singular values below
/// `RANK_TOLERANCE · σ_max` are treated as zero.
pub fn pseudoinverse(m: &Matrix) -> Result<Matrix> {
    let (rows, cols) = m.shape();
    if let Some(index) = m.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "pseudoinverse input".into(),
            index,
        });
    }
    let mut out = Matrix::zeros(cols, rows);
    if rows == 0 || cols == 0 {
        return Ok(out);
    }
    let (u, s, v) = full_svd(m);
    let cutoff = RANK_TOLERANCE * s[0];
    for (k, &sk) in s.iter().enumerate() {
        if sk <= cutoff || sk == 0.0 {
            break;
        }
        let inv = 1.0 / sk;
        for i in 0..cols {
            let vi = v[(i, k)] * inv;
            for j in 0..rows {
                out[(i, j)] += vi * u[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Numerical rank under the standard relative cutoff.
pub fn numerical_rank(m: &Matrix) -> usize {
    if m.rows() == 0 || m.cols() == 0 {
        return 0;
    }
    let (_, s, _) = full_svd(m);
    let cutoff = RANK_TOLERANCE * s[0];
    s.iter().take_while(|&&x| x > cutoff && x > 0.0).count()
}

/// Output of [`orthonormalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Orthonormalized {
    pub basis: Matrix,
    /// Number of input columns dropped as linearly dependent.
    pub dropped: usize,
}

/// Orthonormal basis for the column span of `w` (modified Gram–Schmidt,
/// two passes). Columns that collapse below tolerance are dropped.
pub fn orthonormalize(w: &Matrix) -> Result<Orthonormalized> {
    let dim = w.rows();
    let mut kept: Vec<Vector> = Vec::new();
    let mut dropped = 0;
    for col in w.columns() {
        let original = col.norm();
        if !original.is_finite() {
            return Err(Error::NonFinite {
                context: "orthonormalize input".into(),
                index: 0,
            });
        }
        let mut c = col.into_vec();
        for _ in 0..2 {
            for k in &kept {
                let p = dot(&c, k.as_slice());
                for (x, y) in c.iter_mut().zip(k.as_slice()) {
                    *x -= p * y;
                }
            }
        }
        let n = dot(&c, &c).sqrt();
        if original == 0.0 || n <= RANK_TOLERANCE * original {
            dropped += 1;
            continue;
        }
        c.iter_mut().for_each(|x| *x /= n);
        kept.push(Vector::from_vec_unchecked(c));
    }
    Ok(Orthonormalized {
        basis: Matrix::from_columns(dim, &kept)?,
        dropped,
    })
}

/// Orthogonal projection `w · wᵀ · v` onto the span of `w`'s orthonormal columns.
pub fn project(v: &Vector, w: &Matrix) -> Result<Vector> {
    if v.dim() != w.rows() {
        return Err(Error::mismatch("project", w.rows(), v.dim()));
    }
    let coords = w.t_matvec(v)?;
    w.matvec(&coords)
}

/// Projector matrix `w · wᵀ`.
pub fn projector(w: &Matrix) -> Matrix {
    w.matmul(&w.transpose()).expect("w·wᵀ is always conformable")
}

/// Cosine similarity, clamped to `[-1, 1]`. Zero vectors are an error, not 0.
pub fn cosine(u: &Vector, v: &Vector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::mismatch("cosine", u.dim(), v.dim()));
    }
    cosine_slices(u.as_slice(), v.as_slice())
}

pub(crate) fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector("cosine".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal_error(m: &Matrix) -> f64 {
        m.transpose()
            .matmul(m)
            .unwrap()
            .max_abs_diff(&Matrix::identity(m.cols()))
    }

    #[test]
    fn diagonal_svd_drops_smallest() {
        let m = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let svd = top_r_svd(&m, 2).unwrap();
        assert_eq!(svd.sigma.as_slice(), &[3.0, 2.0]);
        let err = m.sub(&svd.reconstruct()).unwrap().frobenius_norm();
        assert!((err - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_svd_has_orthonormal_factors() {
        let m = Matrix::zeros(4, 5);
        let svd = top_r_svd(&m, 3).unwrap();
        assert_eq!(svd.sigma.as_slice(), &[0.0, 0.0, 0.0]);
        assert!(orthonormal_error(&svd.u) < 1e-12);
        assert!(orthonormal_error(&svd.v) < 1e-12);
        assert_eq!(svd.reconstruct().frobenius_norm(), 0.0);
    }

    #[test]
    fn rank_zero_and_too_large() {
        let m = Matrix::identity(3);
        let svd = top_r_svd(&m, 0).unwrap();
        assert_eq!(svd.u.shape(), (3, 0));
        assert!(top_r_svd(&m, 4).is_err());
    }

    #[test]
    fn wide_matrix_svd() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 0.0, 1.0, -1.0]]).unwrap();
        let svd = top_r_svd(&m, 2).unwrap();
        assert!(m.max_abs_diff(&svd.reconstruct()) < 1e-12);
        assert!(orthonormal_error(&svd.u) < 1e-12);
        assert!(orthonormal_error(&svd.v) < 1e-12);
    }

    #[test]
    fn pseudoinverse_of_diagonal_and_zero() {
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let p = pseudoinverse(&m).unwrap();
        assert!(p.max_abs_diff(&Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.25]]).unwrap()) < 1e-15);

        let z = pseudoinverse(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!(z.shape(), (3, 2));
        assert!(z.is_zero());
    }

    #[test]
    fn pseudoinverse_of_rank_one() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let p = pseudoinverse(&m).unwrap();
        assert!(p.max_abs_diff(&Matrix::from_rows(&[vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap()) < 1e-14);
        let mpm = m.matmul(&p).unwrap().matmul(&m).unwrap();
        assert!(mpm.max_abs_diff(&m) < 1e-14);
        let pmp = p.matmul(&m).unwrap().matmul(&p).unwrap();
        assert!(pmp.max_abs_diff(&p) < 1e-14);
        let mp = m.matmul(&p).unwrap();
        assert!(mp.max_abs_diff(&mp.transpose()) < 1e-14);
    }

    #[test]
    fn projection_examples() {
        let w = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let v = Vector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(project(&v, &w).unwrap().as_slice(), &[3.0, 0.0]);
        assert_eq!(project(&v, &Matrix::identity(2)).unwrap(), v);
        assert!(project(&Vector::zeros(3), &w).is_err());
    }

    #[test]
    fn orthonormalize_examples() {
        let w = Matrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap();
        assert_eq!(orthonormalize(&w).unwrap().basis.as_slice(), &[1.0, 0.0]);

        let w = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let o = orthonormalize(&w).unwrap();
        assert!(o.basis.max_abs_diff(&Matrix::identity(2)) < 1e-15);
        assert_eq!(o.dropped, 0);

        let w = Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0]]).unwrap();
        let o = orthonormalize(&w).unwrap();
        assert_eq!(o.basis.cols(), 1);
        assert_eq!(o.dropped, 2);
    }

    #[test]
    fn cosine_examples() {
        let e1 = Vector::basis(2, 0);
        let e2 = Vector::basis(2, 1);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert_eq!(cosine(&e1, &e1).unwrap(), 1.0);
        let c = cosine(&Vector::ones(2), &e1).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(matches!(cosine(&Vector::zeros(2), &e1), Err(Error::ZeroVector(_))));
    }
}
