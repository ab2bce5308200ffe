//! Generalized Golub-Kahan bidiagonalization.
//!
//! Given `A`, `R`, `Q`, `mu`, `d` at fixed hyperparameters, builds
//!
//! ```text
//! beta_1 u_1 = d - A mu,                 alpha_1 v_1 = A^T R^-1 u_1
//! beta_{j+1} u_{j+1} = A Q v_j - alpha_j u_j
//! alpha_{j+1} v_{j+1} = A^T R^-1 u_{j+1} - beta_{j+1} v_j
//! ```
//!
//! with `U^T R^-1 U = I` and `V^T Q V = I`. The products `Q v_j` are kept, so
//! each step costs one `A`, one `A^T` and one `Q` application.

use nalgebra::{DMatrix, DVector};

use crate::covariance::CovarianceOperator;
use crate::error::{Error, Result};
use crate::operators::{LinearOperator, NoiseCovariance};

/// Relative threshold below which a normalization coefficient counts as zero.
pub const BREAKDOWN_TOL: f64 = 1e-14;

/// Output of the bidiagonalization.
///
/// `alphas[j]` and `betas[j]` hold `alpha_{j+1}` and `beta_{j+1}`; `betas[0]` is
/// `beta_1`, the `R^-1`-norm of the initial residual.
#[derive(Debug, Clone)]
pub struct GenGk {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    qv: DMatrix<f64>,
    alphas: Vec<f64>,
    betas: Vec<f64>,
    k: usize,
    requested: usize,
    breakdown_at: Option<usize>,
    noise_variance: f64,
}

/// Largest deviations from the identity of `U^T R^-1 U` and `V^T Q V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthogonalityDefect {
    pub u: f64,
    pub v: f64,
}

impl OrthogonalityDefect {
    pub fn max(&self) -> f64 {
        self.u.max(self.v)
    }
}

fn gram_schmidt_pass(
    x: &mut DVector<f64>,
    basis: &DMatrix<f64>,
    weighted: &DMatrix<f64>,
    cols: usize,
    companion: Option<(&mut DVector<f64>, &DMatrix<f64>)>,
) {
    if cols == 0 {
        return;
    }
    // coefficients c = weighted^T x, then x -= basis c
    let w = weighted.columns(0, cols);
    let c = w.tr_mul(x);
    x.gemv(-1.0, &basis.columns(0, cols), &c, 1.0);
    if let Some((y, ybasis)) = companion {
        y.gemv(-1.0, &ybasis.columns(0, cols), &c, 1.0);
    }
}

/// Runs `k` steps of the generalized Golub-Kahan process.
///
/// With `reorth`, every new `u` (resp. `v`) is reorthogonalized twice against
/// all previous ones in the `R^-1` (resp. `Q`) inner product. Iteration stops
/// early when a normalization coefficient drops below
/// `BREAKDOWN_TOL * max(beta_1, largest coefficient so far)`; the index is kept
/// in [`GenGk::breakdown_at`].
pub fn gengk(
    a: &LinearOperator,
    noise: &NoiseCovariance,
    q: &CovarianceOperator,
    mu: &DVector<f64>,
    d: &DVector<f64>,
    k: usize,
    reorth: bool,
) -> Result<GenGk> {
    let (m, n) = (a.nrows(), a.ncols());
    if d.len() != m {
        return Err(Error::dims("data vector", m, d.len()));
    }
    if mu.len() != n {
        return Err(Error::dims("prior mean", n, mu.len()));
    }
    if noise.dim() != m {
        return Err(Error::dims("noise covariance", m, noise.dim()));
    }
    if q.dim() != n {
        return Err(Error::dims("prior covariance", n, q.dim()));
    }
    if k > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "bidiagonalization depth {k} exceeds min(m, n) = {}",
            m.min(n)
        )));
    }
    let rinv = noise.inv_diag();
    let nonfinite = |iteration: usize| Error::NonFiniteIteration { iteration };

    let mut u = DMatrix::zeros(m, k + 1);
    let mut v = DMatrix::zeros(n, k + 1);
    let mut qv = DMatrix::zeros(n, k + 1);
    let mut alphas = vec![0.0; k + 1];
    let mut betas = vec![0.0; k + 1];
    let mut breakdown_at = None;
    let mut k_eff = k;

    let r0 = d - a.apply(mu)?;
    let beta1 = (r0.norm_squared() * rinv).sqrt();
    if !beta1.is_finite() {
        return Err(nonfinite(0));
    }
    if beta1 == 0.0 {
        breakdown_at = Some(0);
        k_eff = 0;
    } else {
        betas[0] = beta1;
        u.set_column(0, &(&r0 / beta1));
        let mut scale = beta1;

        // alpha_1 v_1 = A^T R^-1 u_1
        let w = a.apply_adjoint(&(u.column(0) * rinv))?;
        match normalize_v(q, w, 0, &mut v, &mut qv, reorth, BREAKDOWN_TOL * scale)? {
            Some(alpha) => {
                alphas[0] = alpha;
                scale = scale.max(alpha);
            }
            None => {
                breakdown_at = Some(0);
                k_eff = 0;
            }
        }

        if breakdown_at.is_none() {
            for j in 1..=k {
                // beta_{j+1} u_{j+1} = A Q v_j - alpha_j u_j
                let mut p = a.apply(&qv.column(j - 1).into_owned())?;
                p.axpy(-alphas[j - 1], &u.column(j - 1), 1.0);
                if reorth {
                    let weighted = u.columns(0, j) * rinv;
                    for _ in 0..2 {
                        gram_schmidt_pass(&mut p, &u, &weighted, j, None);
                    }
                }
                let beta = (p.norm_squared() * rinv).sqrt();
                if !beta.is_finite() {
                    return Err(nonfinite(j));
                }
                if beta <= BREAKDOWN_TOL * scale {
                    breakdown_at = Some(j);
                    k_eff = j;
                    break;
                }
                betas[j] = beta;
                scale = scale.max(beta);
                u.set_column(j, &(p / beta));

                // alpha_{j+1} v_{j+1} = A^T R^-1 u_{j+1} - beta_{j+1} v_j
                let mut w = a.apply_adjoint(&(u.column(j) * rinv))?;
                w.axpy(-beta, &v.column(j - 1), 1.0);
                match normalize_v(q, w, j, &mut v, &mut qv, reorth, BREAKDOWN_TOL * scale)? {
                    Some(alpha) => {
                        alphas[j] = alpha;
                        scale = scale.max(alpha);
                    }
                    None => {
                        breakdown_at = Some(j);
                        k_eff = j;
                        break;
                    }
                }
            }
        }
    }

    let mut out = GenGk {
        u,
        v,
        qv,
        alphas,
        betas,
        k: k_eff,
        requested: k,
        breakdown_at,
        noise_variance: noise.variance(),
    };
    out.truncate_storage(k_eff);
    Ok(out)
}

/// Orthogonalizes `w` against `v_1..v_j` (optional), normalizes it in the
/// `Q`-norm and stores it as column `j`. Returns `None` below `threshold`.
fn normalize_v(
    q: &CovarianceOperator,
    mut w: DVector<f64>,
    j: usize,
    v: &mut DMatrix<f64>,
    qv: &mut DMatrix<f64>,
    reorth: bool,
    threshold: f64,
) -> Result<Option<f64>> {
    let mut qw = q.apply(&w)?;
    if reorth {
        for _ in 0..2 {
            gram_schmidt_pass(&mut w, &*v, &*qv, j, Some((&mut qw, &*qv)));
        }
    }
    let alpha2 = w.dot(&qw);
    if !alpha2.is_finite() {
        return Err(Error::NonFiniteIteration { iteration: j });
    }
    let alpha = alpha2.max(0.0).sqrt();
    if alpha <= threshold {
        return Ok(None);
    }
    v.set_column(j, &(w / alpha));
    qv.set_column(j, &(qw / alpha));
    Ok(Some(alpha))
}

impl GenGk {
    fn truncate_storage(&mut self, k: usize) {
        let cols = k + 1;
        if self.u.ncols() > cols {
            self.u = self.u.columns(0, cols).into_owned();
            self.v = self.v.columns(0, cols).into_owned();
            self.qv = self.qv.columns(0, cols).into_owned();
            self.alphas.truncate(cols);
            self.betas.truncate(cols);
        }
    }

    /// Number of completed steps (the `k` of `B_k`).
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn requested_k(&self) -> usize {
        self.requested
    }

    pub fn breakdown_at(&self) -> Option<usize> {
        self.breakdown_at
    }

    pub fn beta1(&self) -> f64 {
        self.betas[0]
    }

    /// `alpha_1 .. alpha_{k+1}`.
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `beta_1 .. beta_{k+1}`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `U_{k+1}`, `m x (k+1)`.
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// `V_{k+1}`, `n x (k+1)`.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// `Q V_{k+1}` as accumulated during the iteration.
    pub fn qv(&self) -> &DMatrix<f64> {
        &self.qv
    }

    /// `V_k`, the first `k` columns of `V`.
    pub fn v_k(&self) -> DMatrix<f64> {
        self.v.columns(0, self.k).into_owned()
    }

    pub fn qv_k(&self) -> DMatrix<f64> {
        self.qv.columns(0, self.k).into_owned()
    }

    /// Noise variance of the `R = theta_1 I` the factorization was computed with.
    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Lower bidiagonal `B_k`, `(k+1) x k`.
    pub fn bidiagonal(&self) -> DMatrix<f64> {
        let k = self.k;
        let mut b = DMatrix::zeros(k + 1, k);
        for j in 0..k {
            b[(j, j)] = self.alphas[j];
            b[(j + 1, j)] = self.betas[j + 1];
        }
        b
    }

    /// The factorization after `k' <= k` steps.
    pub fn truncated(&self, k: usize) -> Result<GenGk> {
        if k > self.k {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate a depth-{} factorization to {k}",
                self.k
            )));
        }
        let mut out = self.clone();
        out.k = k;
        out.requested = k;
        if k < self.k {
            out.breakdown_at = None;
        }
        out.truncate_storage(k);
        Ok(out)
    }

    /// Change of variables for scaled covariances.
    ///
    /// If this factorization was computed with `R = r I` and `Q`, the result is
    /// the factorization for `R = theta1 r I` and `Q = theta2^2 Q`, obtained
    /// without touching any operator: `U -> sqrt(theta1) U`, `V -> V / theta2`,
    /// `B -> (theta2 / sqrt(theta1)) B`, `beta_1 -> beta_1 / sqrt(theta1)`.
    pub fn rescale(&self, theta1: f64, theta2: f64) -> Result<GenGk> {
        if !(theta1 > 0.0 && theta1.is_finite() && theta2 > 0.0 && theta2.is_finite()) {
            return Err(Error::Domain(format!(
                "rescaling factors must be positive, got ({theta1}, {theta2})"
            )));
        }
        let s1 = theta1.sqrt();
        let ratio = theta2 / s1;
        let mut out = self.clone();
        out.u *= s1;
        out.v /= theta2;
        out.qv *= theta2;
        out.alphas.iter_mut().for_each(|a| *a *= ratio);
        out.betas[0] /= s1;
        out.betas[1..].iter_mut().for_each(|b| *b *= ratio);
        out.noise_variance *= theta1;
        Ok(out)
    }

    /// Deviations of `U^T R^-1 U` and `V^T Q V` from the identity over the
    /// nonzero columns, using the stored `Q V`.
    pub fn orthogonality_defect(&self) -> OrthogonalityDefect {
        let ucols = (0..self.u.ncols())
            .take_while(|&j| self.u.column(j).amax() > 0.0)
            .count();
        let vcols = (0..self.v.ncols())
            .take_while(|&j| self.v.column(j).amax() > 0.0)
            .count();
        let u = self.u.columns(0, ucols);
        let gu = u.tr_mul(&u) / self.noise_variance;
        let v = self.v.columns(0, vcols);
        let gv = v.tr_mul(&self.qv.columns(0, vcols));
        let dev = |g: DMatrix<f64>| {
            let n = g.nrows();
            (g - DMatrix::identity(n, n)).amax()
        };
        OrthogonalityDefect {
            u: if ucols == 0 { 0.0 } else { dev(gu) },
            v: if vcols == 0 { 0.0 } else { dev(gv) },
        }
    }
}

fn relative(residual: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        residual / reference
    } else {
        residual
    }
}

/// Relative residuals of the three bidiagonalization relations
///
/// ```text
/// U beta_1 e_1 = d - A mu
/// A Q V_k = U B_k
/// A^T R^-1 U = V_k B_k^T + alpha_{k+1} v_{k+1} e_{k+1}^T
/// ```
///
/// recomputed from the operators (`Q V_k` is formed afresh).
pub fn verify_relations(
    fact: &GenGk,
    a: &LinearOperator,
    noise: &NoiseCovariance,
    q: &CovarianceOperator,
    mu: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<[f64; 3]> {
    let (m, n) = (a.nrows(), a.ncols());
    if fact.u.nrows() != m || d.len() != m || noise.dim() != m {
        return Err(Error::dims("relation check rows", m, fact.u.nrows()));
    }
    if fact.v.nrows() != n || mu.len() != n || q.dim() != n {
        return Err(Error::dims("relation check columns", n, fact.v.nrows()));
    }
    let k = fact.k;
    let r0 = d - a.apply(mu)?;
    let first = fact.u.column(0) * fact.beta1() - &r0;
    let res1 = relative(first.norm(), r0.norm());

    let b = fact.bidiagonal();
    let mut aqv = DMatrix::zeros(m, k);
    for j in 0..k {
        let qvj = q.apply(&fact.v.column(j).into_owned())?;
        aqv.set_column(j, &a.apply(&qvj)?);
    }
    let res2 = if k == 0 {
        0.0
    } else {
        relative((&aqv - &fact.u * &b).norm(), aqv.norm())
    };

    let cols = fact.u.ncols();
    let mut atu = DMatrix::zeros(n, cols);
    for j in 0..cols {
        let col = noise.apply_inv(&fact.u.column(j).into_owned());
        atu.set_column(j, &a.apply_adjoint(&col)?);
    }
    let mut rhs = DMatrix::zeros(n, cols);
    if k > 0 {
        rhs.columns_mut(0, k + 1)
            .copy_from(&(fact.v.columns(0, k) * b.transpose()));
    }
    let tail = fact.v.column(k) * fact.alphas[k];
    let mut last = rhs.column_mut(k);
    last += tail;
    let res3 = relative((&atu - &rhs).norm(), atu.norm());
    Ok([res1, res2, res3])
}
