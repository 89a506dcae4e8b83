use super::matrix::{dot, Matrix};

/// Thin Householder QR of an `n×k` matrix with `n ≥ k`.
///
/// Returns `Q` (`n×k`, orthonormal columns) and upper-triangular `R` (`k×k`)
/// with a non-negative diagonal. A column that is already zero below the
/// diagonal gets no reflector, so rank-deficient inputs are completed by the
/// images of the corresponding unit vectors and the result is bit-reproducible.
pub fn qr_thin(m: &Matrix) -> (Matrix, Matrix) {
    let (n, k) = m.shape();
    assert!(n >= k, "qr_thin needs rows >= cols, got {n}x{k}");

    let mut work = m.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);

    for j in 0..k {
        let x: Vec<f64> = (j..n).map(|i| work[(i, j)]).collect();
        let norm = dot(&x, &x).sqrt();
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vv = dot(&v, &v);
        if vv == 0.0 {
            reflectors.push(None);
            continue;
        }
        // Apply H = I - 2 v vᵀ / (vᵀv) to the trailing block.
        for c in j..k {
            let s: f64 = (j..n).map(|i| v[i - j] * work[(i, c)]).sum();
            let f = 2.0 * s / vv;
            for i in j..n {
                work[(i, c)] -= f * v[i - j];
            }
        }
        work[(j, j)] = alpha;
        for i in j + 1..n {
            work[(i, j)] = 0.0;
        }
        reflectors.push(Some(v));
    }

    let mut q = Matrix::zeros(n, k);
    for j in 0..k {
        q[(j, j)] = 1.0;
    }
    for (j, refl) in reflectors.iter().enumerate().rev() {
        let Some(v) = refl else { continue };
        let vv = dot(v, v);
        for c in 0..k {
            let s: f64 = (j..n).map(|i| v[i - j] * q[(i, c)]).sum();
            if s == 0.0 {
                continue;
            }
            let f = 2.0 * s / vv;
            for i in j..n {
                q[(i, c)] -= f * v[i - j];
            }
        }
    }

    let mut r = Matrix::from_fn(k, k, |i, c| if c >= i { work[(i, c)] } else { 0.0 });
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for c in j..k {
                r[(j, c)] = -r[(j, c)];
            }
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    (q, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numlin::RngStream;
    use proptest::prelude::*;

    fn random(n: usize, k: usize, seed: u64) -> Matrix {
        let mut s = RngStream::new(seed, "qr-test");
        Matrix::from_vec(n, k, s.normal_vec(n * k))
    }

    #[test]
    fn identity_is_fixed_point() {
        let (q, r) = qr_thin(&Matrix::identity(3));
        assert_eq!(q, Matrix::identity(3));
        assert_eq!(r, Matrix::identity(3));
    }

    #[test]
    fn rank_deficient_two_by_two() {
        let m = Matrix::from_rows(&[[3.0, 0.0], [4.0, 0.0]]);
        let (q, r) = qr_thin(&m);
        assert!((r[(0, 0)] - 5.0).abs() < 1e-15);
        assert_eq!(r[(1, 1)], 0.0);
        assert!((q[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((q[(1, 0)] - 0.8).abs() < 1e-15);
        assert!(q.orthonormality_defect() < 1e-15);
    }

    #[test]
    fn random_tall_reconstructs() {
        let m = random(50, 10, 7);
        let (q, r) = qr_thin(&m);
        assert!(q.matmul(&r).sub(&m).frobenius_norm() <= 1e-12 * m.frobenius_norm());
        assert!(q.orthonormality_defect() <= 1e-12);
        for i in 0..10 {
            assert!(r[(i, i)] >= 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn zero_matrix_gives_unit_columns() {
        let (q, r) = qr_thin(&Matrix::zeros(4, 2));
        assert_eq!(r, Matrix::zeros(2, 2));
        assert!(q.orthonormality_defect() < 1e-15);
    }

    #[test]
    fn deterministic() {
        let m = random(20, 6, 3);
        assert_eq!(qr_thin(&m), qr_thin(&m));
    }

    proptest! {
        #[test]
        fn reconstruction_and_orthogonality(
            n in 1usize..24, extra in 0usize..8, seed in any::<u64>(), scale in -3.0f64..3.0
        ) {
            let k = n;
            let rows = n + extra;
            let m = random(rows, k, seed).scaled(10f64.powf(scale));
            let (q, r) = qr_thin(&m);
            let err = q.matmul(&r).sub(&m).frobenius_norm();
            prop_assert!(err <= 1e-12 * m.frobenius_norm().max(1.0));
            prop_assert!(q.orthonormality_defect() <= 1e-12);
        }
    }
}
