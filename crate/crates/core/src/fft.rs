//! Circulant matrix-vector products on one- and two-dimensional index sets.
//!
//! A (block-)Toeplitz operator of block shape `(b0, b1)` is embedded in the
//! leading block of a (block-)circulant matrix of shape `(n0, n1)`. The
//! circulant is diagonalized by the 2D DFT, so a product costs two FFTs plus a
//! pointwise multiply by the spectrum. Arrays are row-major with axis 1
//! contiguous.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub(crate) struct Circulant {
    shape: (usize, usize),
    block: (usize, usize),
    spectrum: Vec<Complex64>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Circulant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Circulant")
            .field("shape", &self.shape)
            .field("block", &self.block)
            .finish()
    }
}

impl Circulant {
    /// Builds the circulant whose first column (as an `n0 x n1` array) is `first_column`.
    pub(crate) fn new(first_column: &[f64], shape: (usize, usize), block: (usize, usize)) -> Self {
        assert_eq!(first_column.len(), shape.0 * shape.1);
        assert!(block.0 <= shape.0 && block.1 <= shape.1);
        let mut planner = FftPlanner::<f64>::new();
        let row_fwd = planner.plan_fft_forward(shape.1);
        let row_inv = planner.plan_fft_inverse(shape.1);
        let col_fwd = planner.plan_fft_forward(shape.0);
        let col_inv = planner.plan_fft_inverse(shape.0);
        let mut circ = Circulant {
            shape,
            block,
            spectrum: Vec::new(),
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
        };
        let mut buf: Vec<Complex64> = first_column
            .iter()
            .map(|&c| Complex64::new(c, 0.0))
            .collect();
        circ.transform(&mut buf, false);
        circ.spectrum = buf;
        circ
    }

    pub(crate) fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let (n0, n1) = self.shape;
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        if n1 > 1 {
            row.process(buf);
        }
        if n0 > 1 {
            let mut column = vec![Complex64::new(0.0, 0.0); n0];
            for j in 0..n1 {
                for i in 0..n0 {
                    column[i] = buf[i * n1 + j];
                }
                col.process(&mut column);
                for i in 0..n0 {
                    buf[i * n1 + j] = column[i];
                }
            }
        }
    }

    /// Applies the leading `block` of the circulant (or its transpose) to `x`.
    pub(crate) fn apply_block(&self, x: &[f64], y: &mut [f64], transpose: bool) {
        let (n0, n1) = self.shape;
        let (b0, b1) = self.block;
        debug_assert_eq!(x.len(), b0 * b1);
        debug_assert_eq!(y.len(), b0 * b1);
        let mut buf = vec![Complex64::new(0.0, 0.0); n0 * n1];
        for i in 0..b0 {
            for j in 0..b1 {
                buf[i * n1 + j] = Complex64::new(x[i * b1 + j], 0.0);
            }
        }
        self.transform(&mut buf, false);
        for (b, s) in buf.iter_mut().zip(&self.spectrum) {
            *b *= if transpose { s.conj() } else { *s };
        }
        self.transform(&mut buf, true);
        let scale = 1.0 / (n0 * n1) as f64;
        for i in 0..b0 {
            for j in 0..b1 {
                y[i * b1 + j] = buf[i * n1 + j].re * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_toeplitz_matches_direct_product() {
        // lower triangular Toeplitz with symbol a[l]
        let n = 7;
        let a: Vec<f64> = (0..n).map(|l| 1.0 / (1.0 + l as f64)).collect();
        let mut col = vec![0.0; 2 * n];
        col[..n].copy_from_slice(&a);
        let circ = Circulant::new(&col, (1, 2 * n), (1, n));
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut y = vec![0.0; n];
        circ.apply_block(&x, &mut y, false);
        for i in 0..n {
            let direct: f64 = (0..=i).map(|j| a[i - j] * x[j]).sum();
            assert!((y[i] - direct).abs() < 1e-13);
        }
        circ.apply_block(&x, &mut y, true);
        for j in 0..n {
            let direct: f64 = (j..n).map(|i| a[i - j] * x[i]).sum();
            assert!((y[j] - direct).abs() < 1e-13);
        }
    }
}
