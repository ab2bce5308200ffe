//! Matérn prior covariances as matrix-free operators.
//!
//! Two backends: a dense matrix over an arbitrary point set, and a circulant
//! embedding of the (block-)Toeplitz covariance of a regular grid applied with
//! FFTs in `O(n log n)`.

use std::fmt;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::fft::Circulant;
use crate::operators::{MatvecCount, MatvecCounter};

/// Largest point count for which the dense backend will assemble a matrix.
pub const DENSE_COVARIANCE_CAP: usize = 8192;

const HALF_INTEGER_TOL: f64 = 1e-12;

/// Isotropic Matérn covariance function with smoothness `nu`, variance `sigma2`
/// and correlation length `ell`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternKernel {
    nu: f64,
    sigma2: f64,
    ell: f64,
}

/// Hyperparameter a kernel derivative is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelParam {
    /// The prior standard deviation `sqrt(sigma2)`.
    SigmaStd,
    /// The correlation length.
    Length,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelDerivative {
    pub value: f64,
    /// Set when the value comes from finite differences.
    pub approximate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Smoothness {
    Half,
    ThreeHalves,
    FiveHalves,
    General,
}

impl MaternKernel {
    pub fn new(nu: f64, sigma2: f64, ell: f64) -> Result<Self> {
        for (name, v) in [("nu", nu), ("sigma2", sigma2), ("ell", ell)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "Matérn {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(MaternKernel { nu, sigma2, ell })
    }

    /// Kernel with `sigma2 = sigma_std^2`.
    pub fn from_std(nu: f64, sigma_std: f64, ell: f64) -> Result<Self> {
        if !(sigma_std > 0.0) {
            return Err(Error::Domain(format!(
                "prior standard deviation must be positive, got {sigma_std}"
            )));
        }
        Self::new(nu, sigma_std * sigma_std, ell)
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    pub fn with_ell(&self, ell: f64) -> Result<Self> {
        Self::new(self.nu, self.sigma2, ell)
    }

    fn smoothness(&self) -> Smoothness {
        if (self.nu - 0.5).abs() < HALF_INTEGER_TOL {
            Smoothness::Half
        } else if (self.nu - 1.5).abs() < HALF_INTEGER_TOL {
            Smoothness::ThreeHalves
        } else if (self.nu - 2.5).abs() < HALF_INTEGER_TOL {
            Smoothness::FiveHalves
        } else {
            Smoothness::General
        }
    }

    /// Whether the length derivative is available in closed form.
    pub fn has_analytic_length_derivative(&self) -> bool {
        self.smoothness() != Smoothness::General
    }

    /// `M(r)`.
    pub fn eval(&self, r: f64) -> Result<f64> {
        check_distance(r)?;
        Ok(self.eval_unchecked(r))
    }

    fn eval_unchecked(&self, r: f64) -> f64 {
        if r == 0.0 {
            return self.sigma2;
        }
        let s = self.sigma2;
        match self.smoothness() {
            Smoothness::Half => s * (-r / self.ell).exp(),
            Smoothness::ThreeHalves => {
                let a = 3f64.sqrt() * r / self.ell;
                s * (1.0 + a) * (-a).exp()
            }
            Smoothness::FiveHalves => {
                let a = 5f64.sqrt() * r / self.ell;
                s * (1.0 + a + a * a / 3.0) * (-a).exp()
            }
            Smoothness::General => s * matern_bessel_form(self.nu, r / self.ell),
        }
    }

    /// Evaluates through the modified Bessel function for any `nu`, bypassing
    /// the closed forms.
    pub fn eval_bessel(&self, r: f64) -> Result<f64> {
        check_distance(r)?;
        if r == 0.0 {
            return Ok(self.sigma2);
        }
        Ok(self.sigma2 * matern_bessel_form(self.nu, r / self.ell))
    }

    /// `dM/dtheta` at distance `r`.
    pub fn deriv(&self, r: f64, wrt: KernelParam) -> Result<KernelDerivative> {
        check_distance(r)?;
        Ok(self.deriv_unchecked(r, wrt))
    }

    fn deriv_unchecked(&self, r: f64, wrt: KernelParam) -> KernelDerivative {
        let exact = |value| KernelDerivative {
            value,
            approximate: false,
        };
        match wrt {
            KernelParam::SigmaStd => exact(2.0 / self.sigma2.sqrt() * self.eval_unchecked(r)),
            KernelParam::Length => {
                if r == 0.0 {
                    return exact(0.0);
                }
                let (s, l) = (self.sigma2, self.ell);
                match self.smoothness() {
                    Smoothness::Half => exact(s * r / (l * l) * (-r / l).exp()),
                    Smoothness::ThreeHalves => {
                        let a = 3f64.sqrt() * r / l;
                        exact(s * a * a * (-a).exp() / l)
                    }
                    Smoothness::FiveHalves => {
                        let a = 5f64.sqrt() * r / l;
                        exact(s * a * a * (1.0 + a) * (-a).exp() / (3.0 * l))
                    }
                    Smoothness::General => {
                        let h = 1e-6 * l;
                        let up = s * matern_bessel_form(self.nu, r / (l + h));
                        let down = s * matern_bessel_form(self.nu, r / (l - h));
                        KernelDerivative {
                            value: (up - down) / (2.0 * h),
                            approximate: true,
                        }
                    }
                }
            }
        }
    }
}

fn check_distance(r: f64) -> Result<()> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::Domain(format!(
            "distance must be nonnegative and finite, got {r}"
        )));
    }
    Ok(())
}

/// `2^{1-nu}/Gamma(nu) x^nu K_nu(x)` with `x = sqrt(2 nu) rho`; equals 1 at `rho = 0`.
fn matern_bessel_form(nu: f64, rho: f64) -> f64 {
    let x = (2.0 * nu).sqrt() * rho;
    if x == 0.0 {
        return 1.0;
    }
    let log_prefactor = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln() - x;
    if log_prefactor < -745.0 {
        return 0.0;
    }
    log_prefactor.exp() * bessel_k_scaled(nu, x)
}

/// `exp(x) K_nu(x)` for `x > 0`, from the integral representation
/// `K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt`.
///
/// The integrand decays doubly exponentially and is analytic in a strip, so the
/// trapezoidal rule converges geometrically in the step size.
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k_scaled needs x > 0");
    let h: f64 = 0.02;
    let mut sum: f64 = 0.5;
    let mut t = h;
    loop {
        let log_term = -x * (t.cosh() - 1.0) + log_cosh(nu * t);
        if log_term < -60.0 && x * t.sinh() > nu.abs() * 2.0 {
            break;
        }
        sum += log_term.exp();
        t += h;
    }
    sum * h
}

fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (0.5 * (1.0 + (-2.0 * a).exp())).ln()
}

/// A regular rectangular grid of `nx * ny` cell centers with spacings `hx`, `hy`.
/// Point `(ix, iy)` has linear index `iy * nx + ix`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, hx: f64, hy: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidArgument("grid must have at least one point".into()));
        }
        if !(hx > 0.0) || !(hy > 0.0) {
            return Err(Error::Domain("grid spacings must be positive".into()));
        }
        Ok(Grid { nx, ny, hx, hy })
    }

    /// Uniform cell-centered grid on `[0,1]`.
    pub fn unit_1d(n: usize) -> Result<Self> {
        Self::new(n, 1, 1.0 / n as f64, 1.0)
    }

    /// Uniform cell-centered `g x g` grid on `[0,1]^2`.
    pub fn unit_2d(g: usize) -> Result<Self> {
        Self::new(g, g, 1.0 / g as f64, 1.0 / g as f64)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, index: usize) -> [f64; 2] {
        let (ix, iy) = (index % self.nx, index / self.nx);
        [(ix as f64 + 0.5) * self.hx, (iy as f64 + 0.5) * self.hy]
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Distance between two grid indices, computed from index offsets.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let dx = (i % self.nx).abs_diff(j % self.nx) as f64 * self.hx;
        let dy = (i / self.nx).abs_diff(j / self.nx) as f64 * self.hy;
        dx.hypot(dy)
    }

    /// Recovers the grid from a point list ordered as `iy * nx + ix`.
    /// Fails if the points are not an equispaced rectangular lattice.
    pub fn from_points(points: &[[f64; 2]]) -> Result<Self> {
        let not_grid = || Error::InvalidArgument("points do not form an equispaced grid".into());
        let n = points.len();
        if n == 0 {
            return Err(not_grid());
        }
        let y0 = points[0][1];
        let nx = points.iter().take_while(|p| p[1] == y0).count();
        if !n.is_multiple_of(nx) {
            return Err(not_grid());
        }
        let ny = n / nx;
        let hx = if nx > 1 { points[1][0] - points[0][0] } else { 1.0 };
        let hy = if ny > 1 { points[nx][1] - points[0][1] } else { 1.0 };
        if !(hx > 0.0) || !(hy > 0.0) {
            return Err(not_grid());
        }
        let (x0, scale) = (points[0][0], hx.max(hy));
        for (idx, p) in points.iter().enumerate() {
            let (ix, iy) = (idx % nx, idx / nx);
            let ex = x0 + ix as f64 * hx;
            let ey = y0 + iy as f64 * hy;
            if (p[0] - ex).abs() > 1e-9 * scale || (p[1] - ey).abs() > 1e-9 * scale {
                return Err(not_grid());
            }
        }
        Grid::new(nx, ny, hx, hy)
    }
}

/// Where the covariance lives.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Points(Vec<[f64; 2]>),
    Grid(Grid),
}

impl Geometry {
    pub fn len(&self) -> usize {
        match self {
            Geometry::Points(p) => p.len(),
            Geometry::Grid(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        match self {
            Geometry::Points(p) => {
                let (a, b) = (p[i], p[j]);
                (a[0] - b[0]).hypot(a[1] - b[1])
            }
            Geometry::Grid(g) => g.distance(i, j),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CovBackend {
    Dense,
    #[default]
    Fft,
}

/// Which operator to build: the covariance itself or one of its derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovDerivative {
    None,
    Param(KernelParam),
}

enum CovKind {
    Dense(DMatrix<f64>),
    Circulant(Circulant),
    Identity(usize),
}

/// Symmetric matrix-free covariance (or covariance-derivative) operator.
///
/// Clones and rescaled copies share the underlying storage and the matvec counter.
#[derive(Clone)]
pub struct CovarianceOperator {
    kind: Arc<CovKind>,
    n: usize,
    scale: f64,
    approximate: bool,
    counter: Arc<MatvecCounter>,
}

impl fmt::Debug for CovarianceOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let backend = match *self.kind {
            CovKind::Dense(_) => "dense",
            CovKind::Circulant(_) => "fft",
            CovKind::Identity(_) => "identity",
        };
        f.debug_struct("CovarianceOperator")
            .field("n", &self.n)
            .field("backend", &backend)
            .field("scale", &self.scale)
            .field("approximate", &self.approximate)
            .finish()
    }
}

impl CovarianceOperator {
    fn from_kind(kind: CovKind, n: usize, approximate: bool) -> Self {
        CovarianceOperator {
            kind: Arc::new(kind),
            n,
            scale: 1.0,
            approximate,
            counter: Arc::new(MatvecCounter::default()),
        }
    }

    /// Wraps an explicit symmetric matrix.
    pub fn from_dense(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::dims("covariance matrix columns", n, matrix.ncols()));
        }
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * matrix.amax().max(1e-300) {
            return Err(Error::InvalidArgument("covariance matrix is not symmetric".into()));
        }
        Ok(Self::from_kind(CovKind::Dense(matrix), n, false))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_kind(CovKind::Identity(n), n, false)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// True when entries come from a finite-difference kernel derivative.
    pub fn is_approximate(&self) -> bool {
        self.approximate
    }

    /// `c * self`, sharing storage and counter.
    pub fn scaled(&self, c: f64) -> Self {
        CovarianceOperator {
            scale: self.scale * c,
            ..self.clone()
        }
    }

    /// Number of applications (counted as forward).
    pub fn count(&self) -> u64 {
        self.counter.snapshot().forward
    }

    pub fn counts(&self) -> MatvecCount {
        self.counter.snapshot()
    }

    pub fn reset_count(&self) {
        self.counter.reset()
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n {
            return Err(Error::dims("covariance apply", self.n, x.len()));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("covariance apply input entry {i}")));
        }
        self.counter.bump_forward();
        Ok(self.apply_raw(x))
    }

    fn apply_raw(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = match &*self.kind {
            CovKind::Dense(m) => m * x,
            CovKind::Identity(_) => x.clone(),
            CovKind::Circulant(c) => {
                let mut y = DVector::zeros(self.n);
                c.apply_block(x.as_slice(), y.as_mut_slice(), false);
                y
            }
        };
        if self.scale != 1.0 {
            y *= self.scale;
        }
        y
    }

    /// Applies the operator to each column of `x`; counts one application per column.
    pub fn apply_columns(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.n {
            return Err(Error::dims("covariance apply", self.n, x.nrows()));
        }
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for j in 0..x.ncols() {
            let col = self.apply(&x.column(j).into_owned())?;
            out.set_column(j, &col);
        }
        Ok(out)
    }

    /// Dense matrix of the operator. Does not touch the counter.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match &*self.kind {
            CovKind::Dense(m) => m * self.scale,
            CovKind::Identity(n) => DMatrix::identity(*n, *n) * self.scale,
            CovKind::Circulant(_) => {
                let mut out = DMatrix::zeros(self.n, self.n);
                let mut e = DVector::zeros(self.n);
                for j in 0..self.n {
                    e[j] = 1.0;
                    out.set_column(j, &self.apply_raw(&e));
                    e[j] = 0.0;
                }
                out
            }
        }
    }

    /// Smallest real part of the circulant embedding spectrum (FFT backend only).
    pub fn embedding_min_eigenvalue(&self) -> Option<f64> {
        match &*self.kind {
            CovKind::Circulant(c) => Some(
                self.scale
                    * c.spectrum()
                        .iter()
                        .map(|z| z.re)
                        .fold(f64::INFINITY, f64::min),
            ),
            _ => None,
        }
    }
}

/// Builds the covariance operator (or a derivative) of `kernel` over `geometry`.
pub fn build_cov_operator(
    geometry: &Geometry,
    kernel: &MaternKernel,
    deriv: CovDerivative,
    backend: CovBackend,
) -> Result<CovarianceOperator> {
    let n = geometry.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty geometry".into()));
    }
    if deriv == CovDerivative::Param(KernelParam::SigmaStd) {
        // dQ/dsigma = (2/sigma) Q: reuse the covariance itself
        let base = build_cov_operator(geometry, kernel, CovDerivative::None, backend)?;
        return Ok(base.scaled(2.0 / kernel.sigma2().sqrt()));
    }
    let entry = |r: f64| -> (f64, bool) {
        match deriv {
            CovDerivative::None => (kernel.eval_unchecked(r), false),
            CovDerivative::Param(p) => {
                let d = kernel.deriv_unchecked(r, p);
                (d.value, d.approximate)
            }
        }
    };
    let approximate = matches!(deriv, CovDerivative::Param(KernelParam::Length))
        && !kernel.has_analytic_length_derivative();

    match backend {
        CovBackend::Dense => {
            if n > DENSE_COVARIANCE_CAP {
                return Err(Error::DenseCapExceeded {
                    size: n,
                    cap: DENSE_COVARIANCE_CAP,
                });
            }
            let mut m = DMatrix::zeros(n, n);
            for j in 0..n {
                m[(j, j)] = entry(0.0).0;
                for i in (j + 1)..n {
                    let v = entry(geometry.distance(i, j)).0;
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            Ok(CovarianceOperator::from_kind(CovKind::Dense(m), n, approximate))
        }
        CovBackend::Fft => {
            let grid = match geometry {
                Geometry::Grid(g) => *g,
                Geometry::Points(p) => Grid::from_points(p)?,
            };
            let n0 = if grid.ny > 1 { 2 * grid.ny } else { 1 };
            let n1 = if grid.nx > 1 { 2 * grid.nx } else { 1 };
            let mut col = vec![0.0; n0 * n1];
            for a in 0..n0 {
                let dy = a.min(n0 - a) as f64 * grid.hy;
                for b in 0..n1 {
                    let dx = b.min(n1 - b) as f64 * grid.hx;
                    col[a * n1 + b] = entry(dx.hypot(dy)).0;
                }
            }
            let circ = Circulant::new(&col, (n0, n1), (grid.ny, grid.nx));
            if deriv == CovDerivative::None {
                let spec = circ.spectrum();
                let max = spec.iter().map(|z| z.re).fold(0.0, f64::max);
                let min = spec.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
                if min < -1e-10 * max {
                    warn!(
                        "circulant embedding is indefinite (min eigenvalue {min:.3e}, max {max:.3e}); \
                         matvecs remain exact for the embedded Toeplitz block"
                    );
                }
            }
            Ok(CovarianceOperator::from_kind(
                CovKind::Circulant(circ),
                n,
                approximate,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn kernel_value_at_origin_is_variance() {
        for nu in [0.5, 1.5, 2.5, 0.8, 3.3] {
            let k = MaternKernel::new(nu, 2.7, 0.3).unwrap();
            assert_eq!(k.eval(0.0).unwrap(), 2.7);
        }
    }

    #[test]
    fn exponential_special_case() {
        let k = MaternKernel::new(0.5, 1.0, 1.0).unwrap();
        assert!(rel(k.eval(2.0).unwrap(), (-2.0f64).exp()) < 1e-15);
    }

    #[test]
    fn closed_forms_match_bessel_integral() {
        let k = MaternKernel::new(1.5, 1.0, 0.5).unwrap();
        let a = 3f64.sqrt();
        let expected = (1.0 + a) * (-a).exp();
        assert!(rel(k.eval(0.5).unwrap(), expected) < 1e-14);
        assert!(rel(k.eval_bessel(0.5).unwrap(), expected) < 1e-10);
        for nu in [0.5, 1.5, 2.5] {
            let k = MaternKernel::new(nu, 1.3, 0.2).unwrap();
            for r in [1e-4, 0.01, 0.1, 0.3, 1.0, 2.0] {
                let (c, b) = (k.eval(r).unwrap(), k.eval_bessel(r).unwrap());
                assert!(rel(b, c) < 1e-10, "nu={nu} r={r} closed={c} bessel={b}");
            }
        }
    }

    #[test]
    fn negative_distance_is_a_domain_error() {
        let k = MaternKernel::new(1.5, 1.0, 1.0).unwrap();
        assert!(matches!(k.eval(-1.0), Err(Error::Domain(_))));
        assert!(MaternKernel::new(1.5, -1.0, 1.0).is_err());
    }

    #[test]
    fn derivative_trivial_values() {
        let k = MaternKernel::from_std(1.5, 2.0, 0.7).unwrap();
        let d = k.deriv(0.0, KernelParam::SigmaStd).unwrap();
        assert_eq!(d.value, 4.0);
        for nu in [0.5, 1.5, 2.5, 0.9] {
            let k = MaternKernel::new(nu, 1.0, 0.4).unwrap();
            assert_eq!(k.deriv(0.0, KernelParam::Length).unwrap().value, 0.0);
        }
    }

    #[test]
    fn length_derivative_matches_finite_difference() {
        let k = MaternKernel::new(1.5, 1.0, 0.5).unwrap();
        let d = k.deriv(0.5, KernelParam::Length).unwrap();
        assert!(!d.approximate);
        let h = 1e-6 * 0.5;
        let fd = (k.with_ell(0.5 + h).unwrap().eval(0.5).unwrap()
            - k.with_ell(0.5 - h).unwrap().eval(0.5).unwrap())
            / (2.0 * h);
        assert!(rel(d.value, fd) < 1e-6);
    }

    #[test]
    fn general_smoothness_is_flagged_approximate() {
        let k = MaternKernel::new(1.2, 1.0, 0.5).unwrap();
        let d = k.deriv(0.3, KernelParam::Length).unwrap();
        assert!(d.approximate);
        let h = 1e-4;
        let fd = (k.with_ell(0.5 + h).unwrap().eval(0.3).unwrap()
            - k.with_ell(0.5 - h).unwrap().eval(0.3).unwrap())
            / (2.0 * h);
        assert!(rel(d.value, fd) < 1e-6);
    }

    proptest! {
        #[test]
        fn analytic_derivatives_match_finite_differences(
            r in 0.01f64..2.0, ell in 0.05f64..2.0, which in 0usize..3
        ) {
            let nu = [0.5, 1.5, 2.5][which];
            let k = MaternKernel::new(nu, 1.7, ell).unwrap();
            let h = 1e-6 * ell;
            let fd = (k.with_ell(ell + h).unwrap().eval(r).unwrap()
                - k.with_ell(ell - h).unwrap().eval(r).unwrap()) / (2.0 * h);
            let d = k.deriv(r, KernelParam::Length).unwrap().value;
            // skip values lost to underflow
            prop_assume!(d.abs() > 1e-200);
            prop_assert!(rel(d, fd) < 1e-5, "d={} fd={}", d, fd);
        }

        #[test]
        fn kernel_is_positive_and_nonincreasing(
            r in 0.0f64..3.0, dr in 0.0f64..1.0, which in 0usize..4
        ) {
            let nu = [0.5, 1.5, 2.5, 1.1][which];
            let k = MaternKernel::new(nu, 1.0, 0.7).unwrap();
            let (a, b) = (k.eval(r).unwrap(), k.eval(r + dr).unwrap());
            prop_assert!(a > 0.0);
            prop_assert!(b <= a * (1.0 + 1e-12));
        }
    }

    #[test]
    fn single_point_grid() {
        let g = Geometry::Grid(Grid::new(1, 1, 1.0, 1.0).unwrap());
        let k = MaternKernel::new(1.5, 3.0, 0.4).unwrap();
        for backend in [CovBackend::Dense, CovBackend::Fft] {
            let q = build_cov_operator(&g, &k, CovDerivative::None, backend).unwrap();
            let y = q.apply(&DVector::from_element(1, 2.0)).unwrap();
            assert_eq!(y[0], 6.0);
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn compare_backends(grid: Grid, kernel: MaternKernel, deriv: CovDerivative) -> f64 {
        let geo = Geometry::Grid(grid);
        let dense = build_cov_operator(&geo, &kernel, deriv, CovBackend::Dense).unwrap();
        let fft = build_cov_operator(&geo, &kernel, deriv, CovBackend::Fft).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(grid.len() as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let x = random_vec(&mut rng, grid.len());
            let a = dense.apply(&x).unwrap();
            let b = fft.apply(&x).unwrap();
            worst = worst.max((a - &b).amax() / b.amax());
        }
        worst
    }

    #[test]
    fn fft_matches_dense_on_1d_grid() {
        let k = MaternKernel::new(1.5, 1.0, 0.2).unwrap();
        let err = compare_backends(Grid::unit_1d(16).unwrap(), k, CovDerivative::None);
        assert!(err < 1e-10, "err={err}");
    }

    #[test]
    fn fft_matches_dense_on_2d_grids() {
        for (nx, ny) in [(32, 32), (7, 5), (1, 9)] {
            for nu in [0.5, 1.5, 2.5] {
                let grid = Grid::new(nx, ny, 1.0 / nx as f64, 0.8 / ny as f64).unwrap();
                let k = MaternKernel::new(nu, 0.7, 0.15).unwrap();
                for deriv in [
                    CovDerivative::None,
                    CovDerivative::Param(KernelParam::Length),
                    CovDerivative::Param(KernelParam::SigmaStd),
                ] {
                    let err = compare_backends(grid, k, deriv);
                    assert!(err < 1e-10, "grid {nx}x{ny} nu={nu} {deriv:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn sigma_derivative_is_scaled_covariance() {
        let geo = Geometry::Grid(Grid::unit_2d(6).unwrap());
        let k = MaternKernel::from_std(2.5, 1.7, 0.3).unwrap();
        for backend in [CovBackend::Dense, CovBackend::Fft] {
            let q = build_cov_operator(&geo, &k, CovDerivative::None, backend).unwrap();
            let dq = build_cov_operator(
                &geo,
                &k,
                CovDerivative::Param(KernelParam::SigmaStd),
                backend,
            )
            .unwrap();
            let x = DVector::from_fn(36, |i, _| (i as f64).sin());
            let expected = q.apply(&x).unwrap() * (2.0 / 1.7);
            assert_eq!(dq.apply(&x).unwrap(), expected);
        }
    }

    #[test]
    fn covariance_is_symmetric_and_psd() {
        let geo = Geometry::Grid(Grid::unit_2d(8).unwrap());
        let k = MaternKernel::new(1.5, 1.0, 0.2).unwrap();
        let q = build_cov_operator(&geo, &k, CovDerivative::None, CovBackend::Fft).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let norm_est = q.to_dense().amax() * 64.0;
        for _ in 0..20 {
            let x = random_vec(&mut rng, 64);
            let y = random_vec(&mut rng, 64);
            let (qx, qy) = (q.apply(&x).unwrap(), q.apply(&y).unwrap());
            let scale = qx.norm() * y.norm() + x.norm() * qy.norm();
            assert!((qx.dot(&y) - x.dot(&qy)).abs() < 1e-12 * scale);
            assert!(qx.dot(&x) >= -1e-10 * norm_est);
        }
    }

    #[test]
    fn fft_backend_rejects_scattered_points() {
        let pts = vec![[0.0, 0.0], [0.1, 0.0], [0.35, 0.0]];
        let k = MaternKernel::new(1.5, 1.0, 0.2).unwrap();
        let err = build_cov_operator(
            &Geometry::Points(pts.clone()),
            &k,
            CovDerivative::None,
            CovBackend::Fft,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        // the dense backend accepts them
        assert!(build_cov_operator(
            &Geometry::Points(pts),
            &k,
            CovDerivative::None,
            CovBackend::Dense
        )
        .is_ok());
    }

    #[test]
    fn grid_round_trips_through_points() {
        let g = Grid::new(5, 3, 0.2, 0.3).unwrap();
        let back = Grid::from_points(&g.points()).unwrap();
        assert_eq!(back.nx, 5);
        assert_eq!(back.ny, 3);
        assert!((back.hx - 0.2).abs() < 1e-12 && (back.hy - 0.3).abs() < 1e-12);
    }

    #[test]
    fn counter_tracks_applications() {
        let q = CovarianceOperator::identity(3);
        let x = DVector::from_element(3, 1.0);
        q.apply(&x).unwrap();
        q.scaled(2.0).apply(&x).unwrap();
        assert_eq!(q.count(), 2);
        let _ = q.to_dense();
        assert_eq!(q.count(), 2);
    }
}
