//! Truncated SVD of small dense matrices through the Gram matrix `SᵀS` and a
//! cyclic Jacobi eigensolver.

use ndarray::{Array1, Array2, Axis};

use crate::error::{QkdError, Result};

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;
/// Gram matrices larger than this are refused.
pub const MAX_GRAM_DIM: usize = 512;

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Array1<f64>,
    /// Eigenvectors as columns, matched to `values`.
    pub vectors: Array2<f64>,
}

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[[i, j]] * a[[i, j]];
            }
        }
    }
    sum.sqrt()
}

/// Cyclic Jacobi eigendecomposition. Stops once the off-diagonal Frobenius
/// mass falls below `1e-12` relative to the whole matrix.
pub fn symmetric_eigen(matrix: &Array2<f64>) -> Result<SymmetricEigen> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(QkdError::Argument(format!(
            "eigendecomposition of a non-square {}x{} matrix",
            n,
            matrix.ncols()
        )));
    }
    let mut a = matrix.clone();
    let mut v = Array2::<f64>::eye(n);
    let total = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_TOL * total.max(f64::MIN_POSITIVE);

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = v.select(Axis(1), &order);
    Ok(SymmetricEigen { values, vectors })
}

/// Rank-`r` factors `U Σ Vᵀ` of a `d × k` matrix.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    /// `d × r`, orthonormal columns.
    pub u: Array2<f64>,
    /// Descending singular values.
    pub sigma: Array1<f64>,
    /// `k × r`, orthonormal columns.
    pub v: Array2<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U Σ Vᵀ`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.u * &self.sigma.view().insert_axis(Axis(0));
        scaled.dot(&self.v.t())
    }
}

/// Modified Gram-Schmidt on the columns of `m`. Columns whose residual
/// vanishes are replaced by the first standard basis vector that survives
/// orthogonalization.
fn orthonormalize_columns(m: &mut Array2<f64>, scale_hint: f64) {
    let (rows, cols) = m.dim();
    for j in 0..cols {
        for i in 0..j {
            let proj = m.column(i).dot(&m.column(j));
            let ci = m.column(i).to_owned();
            m.column_mut(j).scaled_add(-proj, &ci);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        if norm > 1e-10 * scale_hint.max(1.0) {
            m.column_mut(j).mapv_inplace(|x| x / norm);
            continue;
        }
        for e in 0..rows {
            let mut candidate = Array1::<f64>::zeros(rows);
            candidate[e] = 1.0;
            for i in 0..j {
                let proj = m.column(i).dot(&candidate);
                candidate.scaled_add(-proj, &m.column(i));
            }
            let n = candidate.dot(&candidate).sqrt();
            if n > 1e-6 {
                m.column_mut(j).assign(&(candidate / n));
                break;
            }
        }
    }
}

/// Top-`rank` singular triplets of `s`.
pub fn truncated_svd(s: &Array2<f64>, rank: usize) -> Result<TruncatedSvd> {
    let (d, k) = s.dim();
    let max_rank = d.min(k);
    if rank == 0 || rank > max_rank {
        return Err(QkdError::Argument(format!(
            "SVD rank {rank} outside 1..={max_rank} for a {d}x{k} matrix"
        )));
    }
    if k > MAX_GRAM_DIM {
        return Err(QkdError::Size(format!(
            "Gram matrix of width {k} exceeds {MAX_GRAM_DIM}"
        )));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(QkdError::Argument("non-finite matrix entry".into()));
    }

    let gram = s.t().dot(s);
    let eig = symmetric_eigen(&gram)?;
    let sigma: Array1<f64> = eig.values.iter().take(rank).map(|&l| l.max(0.0).sqrt()).collect();
    let v = eig.vectors.slice(ndarray::s![.., ..rank]).to_owned();

    let top = sigma.first().copied().unwrap_or(0.0);
    let mut u = Array2::<f64>::zeros((d, rank));
    for j in 0..rank {
        if sigma[j] > 1e-12 * top.max(f64::MIN_POSITIVE) {
            let col = s.dot(&v.column(j)) / sigma[j];
            u.column_mut(j).assign(&col);
        }
    }
    orthonormalize_columns(&mut u, 1.0);
    Ok(TruncatedSvd { u, sigma, v })
}
