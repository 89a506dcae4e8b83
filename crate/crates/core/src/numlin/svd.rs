use super::matrix::{dot, Matrix};
use super::qr::qr_thin;
use crate::error::{Error, Result};

/// Rank-`r` singular triplets: `m ≈ u · diag(s) · vᵀ`.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl TruncatedSvd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }

    pub fn s_matrix(&self) -> Matrix {
        Matrix::diag(&self.s)
    }
}

const MAX_SWEEPS: usize = 80;

/// Best rank-`r` approximation via one-sided Jacobi. Singular values come
/// back non-negative and non-increasing; factors have orthonormal columns.
pub fn svd_trunc(m: &Matrix, r: usize) -> Result<TruncatedSvd> {
    let p = m.rows().min(m.cols());
    if r == 0 || r > p {
        return Err(Error::Dimension(format!(
            "svd_trunc rank {r} outside 1..={p} for {}x{} input",
            m.rows(),
            m.cols()
        )));
    }
    let full = svd_full(m);
    Ok(TruncatedSvd {
        u: full.u.leading_cols(r),
        s: full.s[..r].to_vec(),
        v: full.v.leading_cols(r),
    })
}

pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let cols = if m.rows() >= m.cols() {
        jacobi_columns(m).0
    } else {
        jacobi_columns(&m.transpose()).0
    };
    let mut s: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn svd_full(m: &Matrix) -> TruncatedSvd {
    if m.rows() < m.cols() {
        let t = svd_full(&m.transpose());
        return TruncatedSvd {
            u: t.v,
            s: t.s,
            v: t.u,
        };
    }
    let (n, k) = m.shape();
    let (cols, vrows) = jacobi_columns(m);

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut w = Matrix::zeros(n, k);
    let mut v = Matrix::zeros(k, k);
    for (dst, &src) in order.iter().enumerate() {
        w.set_col(dst, &cols[src]);
        v.set_col(dst, &vrows[src]);
    }
    // Orthogonal columns in, so Q_j = w_j/σ_j where σ_j > 0 and a fixed
    // completion elsewhere.
    let (u, _) = qr_thin(&w);
    let s = order.iter().map(|&j| norms[j]).collect();
    TruncatedSvd { u, s, v }
}

/// Orthogonalizes the columns of `m` (`n ≥ k`) by plane rotations.
/// Returns the rotated columns and the accumulated right rotation, both
/// stored column-as-row.
fn jacobi_columns(m: &Matrix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let k = m.cols();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| m.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    (cols, vcols)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (a, b) = (&mut head[p], &mut tail[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}
