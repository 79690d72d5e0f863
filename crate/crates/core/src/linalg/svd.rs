//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of a working copy of the input are rotated pairwise until every
//! pair is orthogonal to a relative tolerance. The column norms are then the
//! singular values, the normalized columns the left vectors, and the
//! accumulated rotations the right vectors.

use crate::error::{LabError, Result};

use super::Matrix;

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Thin SVD `m = U · diag(σ) · Vᵀ` with `k = min(rows, cols)` components.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// `rows × k`, orthonormal columns.
    pub left_vectors: Matrix,
    /// `cols × k`, orthonormal columns.
    pub right_vectors: Matrix,
}

impl SvdResult {
    /// `U · diag(σ) · Vᵀ`, optionally truncated to the leading `rank` terms.
    pub fn reconstruct(&self, rank: Option<usize>) -> Matrix {
        let k = rank
            .unwrap_or(self.singular_values.len())
            .min(self.singular_values.len());
        let (m, n) = (self.left_vectors.rows(), self.right_vectors.rows());
        let mut out = Matrix::zeros(m, n);
        for t in 0..k {
            let s = self.singular_values[t];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let u = self.left_vectors[(i, t)] * s;
                for j in 0..n {
                    out[(i, j)] += u * self.right_vectors[(j, t)];
                }
            }
        }
        out
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(LabError::Input("svd input has non-finite entries".into()));
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(SvdResult {
            singular_values: t.singular_values,
            left_vectors: t.right_vectors,
            right_vectors: t.left_vectors,
        });
    }
    let (rows, n) = m.shape();
    // column-major working copies
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0_f64;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta, gamma) = dots(&u[p], &u[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(rel);
                if rel <= OFF_DIAGONAL_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LabError::Numeric(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps (max relative off-diagonal {residual:.3e})"
        )));
    }

    let norms: Vec<f64> = u.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut right = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > 0.0 {
            left.push(u[j].iter().map(|x| x / s).collect());
        } else {
            left.push(complete_basis(&left, rows));
        }
        for i in 0..n {
            right[(i, k)] = v[j][i];
        }
    }
    let left_vectors = Matrix::from_fn(rows, n, |i, k| left[k][i]);
    Ok(SvdResult {
        singular_values: sigma,
        left_vectors,
        right_vectors: right,
    })
}

fn dots(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut aa = 0.0;
    let mut bb = 0.0;
    let mut ab = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        aa += x * x;
        bb += y * y;
        ab += x * y;
    }
    (aa, bb, ab)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Unit vector orthogonal to every vector in `basis` (Gram-Schmidt over the
/// standard basis, two passes).
fn complete_basis(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..dim {
        let mut w = vec![0.0; dim];
        w[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in w.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = Some(w);
        }
        if norm > 0.5 {
            break;
        }
    }
    let w = best.unwrap_or_else(|| vec![0.0; dim]);
    w.iter().map(|x| x / best_norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_rows(&[[3.0, 0.0], [0.0, 4.0]]).unwrap();
        let s = svd(&m).unwrap();
        assert_eq!(s.singular_values, vec![4.0, 3.0]);
    }

    #[test]
    fn zero_matrix_has_zero_spectrum_and_orthonormal_factors() {
        let s = svd(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(s.singular_values, vec![0.0; 3]);
        let utu = s.left_vectors.t_matmul(&s.left_vectors).unwrap();
        assert!(utu.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn wide_matrix_goes_through_transpose() {
        let m = Rng::new(5).normal_matrix(3, 7);
        let s = svd(&m).unwrap();
        assert_eq!(s.left_vectors.shape(), (3, 3));
        assert_eq!(s.right_vectors.shape(), (7, 3));
        let err = s.reconstruct(None).sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
        assert!(err < 1e-12);
    }

    #[test]
    fn rejects_nan() {
        let m = Matrix::from_rows(&[[f64::NAN]]).unwrap();
        assert!(matches!(svd(&m), Err(LabError::Input(_))));
    }
}
