//! Dense helpers used by the exact oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const BASE_BLOCK: usize = 64;

/// Inverse of a nonsingular lower-triangular matrix.
///
/// Recursive 2x2 blocking keeps almost all of the work in matrix products,
/// which is much faster than column-by-column triangular solves for large n.
pub(crate) fn lower_triangular_inverse(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    if l.ncols() != n {
        return Err(Error::dims("triangular inverse", n, l.ncols()));
    }
    if let Some(i) = (0..n).find(|&i| l[(i, i)] == 0.0 || !l[(i, i)].is_finite()) {
        return Err(Error::Numerical(format!("singular triangular factor at pivot {i}")));
    }
    Ok(tri_inv_rec(l))
}

fn tri_inv_rec(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= BASE_BLOCK {
        let mut x = DMatrix::identity(n, n);
        // pivots were checked by the caller
        l.solve_lower_triangular_mut(&mut x);
        return x;
    }
    let h = n / 2;
    let l11 = l.view((0, 0), (h, h)).into_owned();
    let l21 = l.view((h, 0), (n - h, h)).into_owned();
    let l22 = l.view((h, h), (n - h, n - h)).into_owned();
    let x11 = tri_inv_rec(&l11);
    let x22 = tri_inv_rec(&l22);
    let x21 = -(&x22 * (&l21 * &x11));
    let mut x = DMatrix::zeros(n, n);
    x.view_mut((0, 0), (h, h)).copy_from(&x11);
    x.view_mut((h, 0), (n - h, h)).copy_from(&x21);
    x.view_mut((h, h), (n - h, n - h)).copy_from(&x22);
    x
}

/// Cholesky-based inverse and log-determinant of a symmetric positive definite matrix.
pub(crate) struct SpdInverse {
    pub inverse: DMatrix<f64>,
    pub logdet: f64,
    pub factor: DMatrix<f64>,
}

impl SpdInverse {
    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.factor.solve_lower_triangular_mut(&mut x);
        self.factor.tr_solve_lower_triangular_mut(&mut x);
        x
    }
}

pub(crate) fn spd_inverse(mut z: DMatrix<f64>, context: &str) -> Result<SpdInverse> {
    symmetrize(&mut z);
    let chol = z
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(context.to_string()))?;
    let factor = chol.unpack();
    let logdet = 2.0 * factor.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let linv = lower_triangular_inverse(&factor)?;
    // explicit transpose: tr_mul does not use the blocked product kernel
    let inverse = linv.transpose() * &linv;
    Ok(SpdInverse {
        inverse,
        logdet,
        factor,
    })
}

pub(crate) fn symmetrize(z: &mut DMatrix<f64>) {
    let n = z.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (z[(i, j)] + z[(j, i)]);
            z[(i, j)] = avg;
            z[(j, i)] = avg;
        }
    }
}

/// Frobenius inner product `<X, Y>_F`.
pub(crate) fn frobenius_dot(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| a * b).sum()
}

/// Symmetric square root of a positive semidefinite matrix, negative eigenvalues clipped.
pub(crate) fn psd_sqrt(q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = q.clone();
    symmetrize(&mut q);
    let eig = q.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    scaled * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(n, n) * n as f64
    }

    #[test]
    fn triangular_inverse_matches_identity() {
        for n in [1, 5, 64, 65, 150] {
            let z = random_spd(n, n as u64);
            let l = z.cholesky().unwrap().unpack();
            let x = lower_triangular_inverse(&l).unwrap();
            let err = (&l * &x - DMatrix::identity(n, n)).amax();
            assert!(err < 1e-12, "n={n} err={err}");
            // strictly lower triangular inverse
            for i in 0..n {
                for j in (i + 1)..n {
                    assert_eq!(x[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn spd_inverse_and_logdet() {
        let z = random_spd(90, 3);
        let inv = spd_inverse(z.clone(), "test").unwrap();
        assert!((&z * &inv.inverse - DMatrix::identity(90, 90)).amax() < 1e-12);
        let direct: f64 = z.clone().symmetric_eigen().eigenvalues.iter().map(|v| v.ln()).sum();
        assert!((inv.logdet - direct).abs() < 1e-9 * direct.abs());
        let b = DVector::from_fn(90, |i, _| i as f64);
        assert!((&z * inv.solve(&b) - &b).amax() < 1e-9);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            spd_inverse(z, "z"),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let q = random_spd(12, 8);
        let s = psd_sqrt(&q);
        assert!((&s * &s - &q).amax() < 1e-10);
    }
}
