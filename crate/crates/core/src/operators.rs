//! Matrix-free linear operators with forward/adjoint application and exact
//! matvec accounting.
//!
//! Every downstream algorithm sees the forward map only through
//! [`LinearOperator::apply`] and [`LinearOperator::apply_adjoint`]; no entry
//! access is assumed. Each handle owns a shared [`MatvecCounter`] that is
//! bumped once per application, so cost claims can be checked by tests.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fft::Circulant;

/// A linear map `R^ncols -> R^nrows` known only through its action.
pub trait LinearMap: Send + Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `y = A x`, with `x.len() == ncols` and `y.len() == nrows`.
    fn forward(&self, x: &[f64], y: &mut [f64]);
    /// `x = A^T y`.
    fn adjoint(&self, y: &[f64], x: &mut [f64]);
}

/// Forward/adjoint application counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatvecCount {
    pub forward: u64,
    pub adjoint: u64,
}

impl MatvecCount {
    pub fn total(&self) -> u64 {
        self.forward + self.adjoint
    }
}

impl std::ops::Sub for MatvecCount {
    type Output = MatvecCount;
    fn sub(self, rhs: MatvecCount) -> MatvecCount {
        MatvecCount {
            forward: self.forward - rhs.forward,
            adjoint: self.adjoint - rhs.adjoint,
        }
    }
}

/// Thread-safe pair of application counters.
#[derive(Debug, Default)]
pub struct MatvecCounter {
    forward: AtomicU64,
    adjoint: AtomicU64,
}

impl MatvecCounter {
    pub fn snapshot(&self) -> MatvecCount {
        MatvecCount {
            forward: self.forward.load(Ordering::Relaxed),
            adjoint: self.adjoint.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.adjoint.store(0, Ordering::Relaxed);
    }

    pub(crate) fn bump_forward(&self) {
        self.forward.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn bump_adjoint(&self) {
        self.adjoint.fetch_add(1, Ordering::Relaxed);
    }
}

/// Cloneable handle to a matrix-free operator. Clones share the map and the counter.
#[derive(Clone)]
pub struct LinearOperator {
    map: Arc<dyn LinearMap>,
    counter: Arc<MatvecCounter>,
}

impl fmt::Debug for LinearOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearOperator")
            .field("nrows", &self.nrows())
            .field("ncols", &self.ncols())
            .field("counts", &self.counts())
            .finish()
    }
}

impl LinearOperator {
    pub fn new<M: LinearMap + 'static>(map: M) -> Self {
        LinearOperator {
            map: Arc::new(map),
            counter: Arc::new(MatvecCounter::default()),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(IdentityMap { n })
    }

    pub fn zero(nrows: usize, ncols: usize) -> Self {
        Self::new(ZeroMap { nrows, ncols })
    }

    pub fn dense(matrix: DMatrix<f64>) -> Self {
        Self::new(DenseMap { matrix })
    }

    pub fn nrows(&self) -> usize {
        self.map.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.map.ncols()
    }

    pub fn counts(&self) -> MatvecCount {
        self.counter.snapshot()
    }

    pub fn reset_counts(&self) {
        self.counter.reset()
    }

    /// Applies the operator, `A x`.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut y = DVector::zeros(self.nrows());
        self.apply_slice(x.as_slice(), y.as_mut_slice())?;
        Ok(y)
    }

    /// Applies the adjoint, `A^T y`.
    pub fn apply_adjoint(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let mut x = DVector::zeros(self.ncols());
        self.apply_adjoint_slice(y.as_slice(), x.as_mut_slice())?;
        Ok(x)
    }

    pub fn apply_slice(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        check_input("forward apply", self.ncols(), x)?;
        if y.len() != self.nrows() {
            return Err(Error::dims("forward apply output", self.nrows(), y.len()));
        }
        self.counter.bump_forward();
        self.map.forward(x, y);
        Ok(())
    }

    pub fn apply_adjoint_slice(&self, y: &[f64], x: &mut [f64]) -> Result<()> {
        check_input("adjoint apply", self.nrows(), y)?;
        if x.len() != self.ncols() {
            return Err(Error::dims("adjoint apply output", self.ncols(), x.len()));
        }
        self.counter.bump_adjoint();
        self.map.adjoint(y, x);
        Ok(())
    }

    /// `A X`, one forward application per column of `X`.
    pub fn apply_columns(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.ncols() {
            return Err(Error::dims("forward apply", self.ncols(), x.nrows()));
        }
        let mut out = DMatrix::zeros(self.nrows(), x.ncols());
        for j in 0..x.ncols() {
            let (src, mut dst) = (x.column(j), out.column_mut(j));
            let src = src.as_slice();
            check_input("forward apply", self.ncols(), src)?;
            self.counter.bump_forward();
            self.map.forward(src, dst.as_mut_slice());
        }
        Ok(out)
    }

    /// Assembles the dense matrix by applying the operator to every unit vector.
    /// Costs `ncols` forward applications.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let (m, n) = (self.nrows(), self.ncols());
        let mut out = DMatrix::zeros(m, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; m];
        for j in 0..n {
            e[j] = 1.0;
            self.apply_slice(&e, &mut col)?;
            out.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        Ok(out)
    }

    /// Dense `A^T`, assembled column by column with `nrows` adjoint applications.
    pub fn adjoint_to_dense(&self) -> Result<DMatrix<f64>> {
        let (m, n) = (self.nrows(), self.ncols());
        let mut out = DMatrix::zeros(n, m);
        let mut e = vec![0.0; m];
        let mut col = vec![0.0; n];
        for j in 0..m {
            e[j] = 1.0;
            self.apply_adjoint_slice(&e, &mut col)?;
            out.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        Ok(out)
    }
}

fn check_input(context: &'static str, expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::dims(context, expected, x.len()));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{context} input entry {i}")));
    }
    Ok(())
}

/// Relative adjoint-consistency defect `|<Ax, y> - <x, A^T y>| / (|Ax||y| + |x||A^T y|)`.
pub fn adjoint_defect(op: &LinearOperator, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let ax = op.apply(x)?;
    let aty = op.apply_adjoint(y)?;
    let lhs = ax.dot(y);
    let rhs = x.dot(&aty);
    let scale = ax.norm() * y.norm() + x.norm() * aty.norm();
    Ok(if scale == 0.0 {
        (lhs - rhs).abs()
    } else {
        (lhs - rhs).abs() / scale
    })
}

#[derive(Debug, Clone)]
pub struct IdentityMap {
    pub n: usize,
}

impl LinearMap for IdentityMap {
    fn nrows(&self) -> usize {
        self.n
    }
    fn ncols(&self) -> usize {
        self.n
    }
    fn forward(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        x.copy_from_slice(y);
    }
}

#[derive(Debug, Clone)]
pub struct ZeroMap {
    pub nrows: usize,
    pub ncols: usize,
}

impl LinearMap for ZeroMap {
    fn nrows(&self) -> usize {
        self.nrows
    }
    fn ncols(&self) -> usize {
        self.ncols
    }
    fn forward(&self, _x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
    }
    fn adjoint(&self, _y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub struct DenseMap {
    pub matrix: DMatrix<f64>,
}

impl LinearMap for DenseMap {
    fn nrows(&self) -> usize {
        self.matrix.nrows()
    }
    fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
    fn forward(&self, x: &[f64], y: &mut [f64]) {
        let xv = DVector::from_column_slice(x);
        y.copy_from_slice((&self.matrix * xv).as_slice());
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        let yv = DVector::from_column_slice(y);
        x.copy_from_slice(self.matrix.tr_mul(&yv).as_slice());
    }
}

/// Sparse operator stored row-wise as `(column, weight)` lists.
#[derive(Debug, Clone)]
pub struct SparseRowsMap {
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRowsMap {
    pub fn new(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for row in &rows {
            if let Some(&(j, _)) = row.iter().find(|(j, _)| *j >= ncols) {
                return Err(Error::dims("sparse row column index", ncols, j));
            }
        }
        Ok(SparseRowsMap { ncols, rows })
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }
}

impl LinearMap for SparseRowsMap {
    fn nrows(&self) -> usize {
        self.rows.len()
    }
    fn ncols(&self) -> usize {
        self.ncols
    }
    fn forward(&self, x: &[f64], y: &mut [f64]) {
        for (yi, row) in y.iter_mut().zip(&self.rows) {
            *yi = row.iter().map(|&(j, w)| w * x[j]).sum();
        }
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        for (yi, row) in y.iter().zip(&self.rows) {
            for &(j, w) in row {
                x[j] += w * yi;
            }
        }
    }
}

/// Sizes up to which the Toeplitz product is summed directly (exact zeros above
/// the diagonal, and cheaper than the FFT).
const DIRECT_TOEPLITZ_MAX: usize = 128;

/// Lower-triangular (causal) Toeplitz operator `y_i = sum_{j<=i} a_{i-j} x_j`,
/// applied with zero-padded FFTs.
#[derive(Debug)]
pub struct CausalToeplitzMap {
    symbol: Vec<f64>,
    circulant: Circulant,
}

impl CausalToeplitzMap {
    pub fn new(symbol: Vec<f64>) -> Result<Self> {
        let n = symbol.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty Toeplitz symbol".into()));
        }
        let len = (2 * n).next_power_of_two();
        let mut col = vec![0.0; len];
        col[..n].copy_from_slice(&symbol);
        let circulant = Circulant::new(&col, (1, len), (1, n));
        Ok(CausalToeplitzMap { symbol, circulant })
    }

    /// First column of the matrix.
    pub fn symbol(&self) -> &[f64] {
        &self.symbol
    }
}

impl LinearMap for CausalToeplitzMap {
    fn nrows(&self) -> usize {
        self.symbol.len()
    }
    fn ncols(&self) -> usize {
        self.symbol.len()
    }
    fn forward(&self, x: &[f64], y: &mut [f64]) {
        if self.symbol.len() <= DIRECT_TOEPLITZ_MAX {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = (0..=i).map(|j| self.symbol[i - j] * x[j]).sum();
            }
        } else {
            self.circulant.apply_block(x, y, false);
        }
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        let n = self.symbol.len();
        if n <= DIRECT_TOEPLITZ_MAX {
            for (j, xj) in x.iter_mut().enumerate() {
                *xj = (j..n).map(|i| self.symbol[i - j] * y[i]).sum();
            }
        } else {
            self.circulant.apply_block(y, x, true);
        }
    }
}

/// `A P` where `P = diag(keep)` zeroes the columns outside a retained index set.
///
/// The unknowns stay on the full index range so structured priors (FFT grids)
/// remain usable; the adjoint zero-fills the discarded positions.
#[derive(Debug, Clone)]
pub struct MaskedMap {
    inner: LinearOperator,
    keep: Vec<bool>,
}

impl MaskedMap {
    pub fn new(inner: LinearOperator, retained: &[usize]) -> Result<Self> {
        let n = inner.ncols();
        let mut keep = vec![false; n];
        for &j in retained {
            if j >= n {
                return Err(Error::dims("mask index", n, j));
            }
            keep[j] = true;
        }
        Ok(MaskedMap { inner, keep })
    }

    pub fn retained(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&j| self.keep[j]).collect()
    }

    pub fn inner(&self) -> &LinearOperator {
        &self.inner
    }
}

impl LinearMap for MaskedMap {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }
    fn ncols(&self) -> usize {
        self.inner.ncols()
    }
    fn forward(&self, x: &[f64], y: &mut [f64]) {
        let masked: Vec<f64> = x
            .iter()
            .zip(&self.keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        // inputs were validated by the outer handle
        self.inner
            .apply_slice(&masked, y)
            .expect("masked forward: inner operator rejected validated input");
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        self.inner
            .apply_adjoint_slice(y, x)
            .expect("masked adjoint: inner operator rejected validated input");
        for (v, &k) in x.iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

/// Noise covariance `R(theta) = theta_1 I_m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseCovariance {
    theta1: f64,
    m: usize,
}

impl NoiseCovariance {
    pub fn new(theta1: f64, m: usize) -> Result<Self> {
        if !(theta1 > 0.0) || !theta1.is_finite() {
            return Err(Error::Domain(format!(
                "noise variance must be positive and finite, got {theta1}"
            )));
        }
        Ok(NoiseCovariance { theta1, m })
    }

    pub fn variance(&self) -> f64 {
        self.theta1
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        x * self.theta1
    }

    pub fn apply_inv(&self, x: &DVector<f64>) -> DVector<f64> {
        x / self.theta1
    }

    pub fn sqrt_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        x * self.theta1.sqrt()
    }

    /// Diagonal of `R^{-1}` (constant).
    pub fn inv_diag(&self) -> f64 {
        1.0 / self.theta1
    }

    pub fn logdet(&self) -> f64 {
        self.m as f64 * self.theta1.ln()
    }

    /// Scalar `c` with `dR/dtheta_i = c I`; only `theta_1` (index 0) enters `R`.
    pub fn derivative_scale(&self, index: usize) -> f64 {
        if index == 0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn apply_derivative(&self, index: usize, x: &DVector<f64>) -> DVector<f64> {
        x * self.derivative_scale(index)
    }

    /// `<dR/dtheta_i, R^{-1}>_F`.
    pub fn derivative_trace(&self, index: usize) -> f64 {
        self.derivative_scale(index) * self.m as f64 / self.theta1
    }

    /// `||x||^2_{R^{-1}}`.
    pub fn inv_norm_sq(&self, x: &DVector<f64>) -> f64 {
        x.norm_squared() / self.theta1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_zero_apply() {
        let id = LinearOperator::identity(3);
        let y = id.apply(&DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 2.0, 3.0]);
        let id2 = LinearOperator::identity(2);
        let x = id2.apply_adjoint(&DVector::from_vec(vec![4.0, 5.0])).unwrap();
        assert_eq!(x.as_slice(), &[4.0, 5.0]);

        let zero = LinearOperator::zero(2, 3);
        let y = zero.apply(&DVector::from_vec(vec![1.0, -2.0, 7.0])).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn apply_rejects_bad_input() {
        let id = LinearOperator::identity(3);
        let err = id.apply(&DVector::from_vec(vec![1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        let err = id
            .apply(&DVector::from_vec(vec![1.0, f64::NAN, 0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        // rejected calls are not counted
        assert_eq!(id.counts(), MatvecCount::default());
    }

    #[test]
    fn counters_increment_once_per_application() {
        let op = LinearOperator::dense(DMatrix::from_element(2, 3, 1.0));
        let x = DVector::from_element(3, 1.0);
        let y = DVector::from_element(2, 1.0);
        for _ in 0..4 {
            op.apply(&x).unwrap();
        }
        op.apply_adjoint(&y).unwrap();
        let copy = op.clone();
        copy.apply_adjoint(&y).unwrap();
        assert_eq!(
            op.counts(),
            MatvecCount {
                forward: 4,
                adjoint: 2
            }
        );
        op.reset_counts();
        assert_eq!(copy.counts().total(), 0);
    }

    #[test]
    fn dense_random_adjoint_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(8, 5, |_, _| rng.random_range(-1.0..1.0));
        let op = LinearOperator::dense(a);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 5);
            let y = random_vec(&mut rng, 8);
            assert!(adjoint_defect(&op, &x, &y).unwrap() < 1e-12);
        }
    }

    #[test]
    fn masked_operator_matches_dense_mask_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let inner = LinearOperator::dense(a.clone());
        // retain positions 1 and 3 (one-based), i.e. indices 0 and 2
        let masked = LinearOperator::new(MaskedMap::new(inner.clone(), &[0, 2]).unwrap());
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]));
        let dense = &a * &p;

        let y = random_vec(&mut rng, 3);
        let at_y = masked.apply_adjoint(&y).unwrap();
        assert_eq!(at_y[1], 0.0);
        assert_eq!(at_y[3], 0.0);
        assert!((at_y - dense.transpose() * &y).amax() < 1e-14);

        let x = random_vec(&mut rng, 4);
        let ax = masked.apply(&x).unwrap();
        assert!((ax - &dense * &x).amax() < 1e-14);

        // composite counts equal the constituent counts
        assert_eq!(masked.counts(), inner.counts());
        for _ in 0..20 {
            let x = random_vec(&mut rng, 4);
            let y = random_vec(&mut rng, 3);
            assert!(adjoint_defect(&masked, &x, &y).unwrap() < 1e-12);
        }
    }

    #[test]
    fn sparse_rows_adjoint_consistency() {
        let rows = vec![vec![(0, 0.5), (2, 1.5)], vec![(1, -2.0)], vec![]];
        let op = LinearOperator::new(SparseRowsMap::new(3, rows).unwrap());
        let dense = op.to_dense().unwrap();
        assert_eq!(dense[(0, 2)], 1.5);
        assert_eq!(dense[(1, 1)], -2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 3);
            let y = random_vec(&mut rng, 3);
            assert!(adjoint_defect(&op, &x, &y).unwrap() < 1e-12);
        }
        assert!(SparseRowsMap::new(2, vec![vec![(2, 1.0)]]).is_err());
    }

    #[test]
    fn toeplitz_matches_dense_assembly() {
        let symbol: Vec<f64> = (0..9).map(|l| (-(l as f64) * 0.3).exp()).collect();
        let op = LinearOperator::new(CausalToeplitzMap::new(symbol.clone()).unwrap());
        let dense = op.to_dense().unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let expected = if j <= i { symbol[i - j] } else { 0.0 };
                assert!((dense[(i, j)] - expected).abs() < 1e-14);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 9);
            let y = random_vec(&mut rng, 9);
            assert!(adjoint_defect(&op, &x, &y).unwrap() < 1e-12);
        }
    }

    #[test]
    fn toeplitz_fft_path_matches_direct_sum() {
        let n = DIRECT_TOEPLITZ_MAX + 37;
        let symbol: Vec<f64> = (0..n).map(|l| 1.0 / (1.0 + l as f64)).collect();
        let op = LinearOperator::new(CausalToeplitzMap::new(symbol.clone()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_vec(&mut rng, n);
        let y = op.apply(&x).unwrap();
        let yt = op.apply_adjoint(&x).unwrap();
        for i in 0..n {
            let direct: f64 = (0..=i).map(|j| symbol[i - j] * x[j]).sum();
            let direct_t: f64 = (i..n).map(|j| symbol[j - i] * x[j]).sum();
            assert!((y[i] - direct).abs() < 1e-12);
            assert!((yt[i] - direct_t).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_covariance_closed_forms() {
        let r = NoiseCovariance::new(1.0, 5).unwrap();
        assert_eq!(r.logdet(), 0.0);
        let r = NoiseCovariance::new(0.25, 4).unwrap();
        assert_eq!(r.logdet(), 4.0 * 0.25f64.ln());
        let r = NoiseCovariance::new(2.0, 6).unwrap();
        assert_eq!(r.derivative_trace(0), 3.0);
        assert_eq!(r.derivative_trace(1), 0.0);
        assert_eq!(r.derivative_trace(2), 0.0);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(r.apply_inv(&x), &x / 2.0);
        assert_eq!(r.apply_derivative(0, &x), x);
        assert_eq!(r.apply_derivative(2, &x).amax(), 0.0);
        assert!(NoiseCovariance::new(0.0, 3).is_err());
        assert!(NoiseCovariance::new(-1.0, 3).is_err());
    }
}
