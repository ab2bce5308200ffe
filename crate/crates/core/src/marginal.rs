//! The empirical Bayes objective and its gradient.
//!
//! ```text
//! F(theta) = -log pi(theta) + 1/2 logdet Z(theta) + 1/2 ||A mu - d||^2_{Z^-1}
//! dF/dtheta_i = -d log pi/dtheta_i + 1/2 <Z^-1, dZ_i>_F - 1/2 w^T dZ_i w,   w = Z^-1 (A mu - d)
//! ```
//!
//! Three evaluators are provided: a dense exact oracle, a truncated-SVD
//! variant used for bound checks, and the matrix-free approximation built from
//! a generalized Golub-Kahan factorization.

use nalgebra::{DMatrix, DVector, SVD};

use crate::covariance::{
    build_cov_operator, CovBackend, CovDerivative, CovarianceOperator, Geometry, KernelParam,
    MaternKernel,
};
use crate::error::{Error, Result};
use crate::gengk::{gengk, GenGk};
use crate::linalg::{frobenius_dot, psd_sqrt, spd_inverse};
use crate::operators::{LinearOperator, MatvecCount, NoiseCovariance};

/// Default largest data dimension for which dense evaluation is attempted.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Strictly positive hyperparameter vector.
///
/// With the Matérn prior family, `theta = (noise variance, prior std, correlation length)`;
/// with a fixed prior shape, `theta = (noise variance, prior std)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams(Vec<f64>);

impl HyperParams {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidArgument("empty hyperparameter vector".into()));
        }
        if let Some(v) = theta.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "hyperparameters must be positive and finite, got {v}"
            )));
        }
        Ok(HyperParams(theta))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn noise_variance(&self) -> f64 {
        self.0[0]
    }

    pub fn prior_std(&self) -> f64 {
        self.0[1]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.clone()
    }
}

impl std::ops::Index<usize> for HyperParams {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Hyperprior on `theta`, up to additive constants in `-log pi`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Hyperprior {
    /// Improper flat prior, `pi = 1`.
    #[default]
    Flat,
    /// Independent exponential (Gamma shape 1) prior, `pi ~ exp(-gamma sum theta_i)`.
    Gamma { gamma: f64 },
}

impl Hyperprior {
    /// `(-log pi(theta), -grad log pi(theta))`.
    pub fn neglog(&self, theta: &HyperParams) -> (f64, DVector<f64>) {
        let k = theta.len();
        match *self {
            Hyperprior::Flat => (0.0, DVector::zeros(k)),
            Hyperprior::Gamma { gamma } => (
                gamma * theta.as_slice().iter().sum::<f64>(),
                DVector::from_element(k, gamma),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Hyperprior::Gamma { gamma } if !(gamma > 0.0) || !gamma.is_finite() => Err(
                Error::Domain(format!("Gamma hyperprior rate must be positive, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
enum PriorKind {
    Matern {
        geometry: Geometry,
        nu: f64,
        backend: CovBackend,
    },
    Scaled {
        q0: CovarianceOperator,
    },
}

/// Maps hyperparameters to the prior covariance `Q(theta)`.
#[derive(Debug, Clone)]
pub struct PriorFamily {
    kind: PriorKind,
}

/// `dQ/dtheta_i` in the form cheapest to use.
#[derive(Debug, Clone)]
pub enum PriorDerivative {
    /// `Q` does not depend on `theta_i`.
    Zero,
    /// `dQ/dtheta_i = c Q`.
    ScaledPrior(f64),
    /// A separate operator.
    Operator(CovarianceOperator),
}

impl PriorFamily {
    /// Matérn prior with `theta = (theta_1, sigma, ell)`: `Q = M_{nu, sigma^2, ell}`.
    pub fn matern(geometry: Geometry, nu: f64, backend: CovBackend) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::Domain(format!("Matérn smoothness must be positive, got {nu}")));
        }
        if geometry.is_empty() {
            return Err(Error::InvalidArgument("empty prior geometry".into()));
        }
        Ok(PriorFamily {
            kind: PriorKind::Matern {
                geometry,
                nu,
                backend,
            },
        })
    }

    /// Fixed prior shape with `theta = (theta_1, theta_2)`: `Q = theta_2^2 Q0`.
    pub fn scaled(q0: CovarianceOperator) -> Self {
        PriorFamily {
            kind: PriorKind::Scaled { q0 },
        }
    }

    /// Number of hyperparameters, including the noise variance.
    pub fn num_params(&self) -> usize {
        match self.kind {
            PriorKind::Matern { .. } => 3,
            PriorKind::Scaled { .. } => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            PriorKind::Matern { geometry, .. } => geometry.len(),
            PriorKind::Scaled { q0 } => q0.dim(),
        }
    }

    /// The unscaled shape `Q0` of a fixed-shape family.
    pub fn base_covariance(&self) -> Option<&CovarianceOperator> {
        match &self.kind {
            PriorKind::Scaled { q0 } => Some(q0),
            PriorKind::Matern { .. } => None,
        }
    }

    fn check(&self, theta: &HyperParams) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::dims(
                "hyperparameter vector",
                self.num_params(),
                theta.len(),
            ));
        }
        Ok(())
    }

    fn kernel(nu: f64, theta: &HyperParams) -> Result<MaternKernel> {
        MaternKernel::from_std(nu, theta[1], theta[2])
    }

    pub fn covariance(&self, theta: &HyperParams) -> Result<CovarianceOperator> {
        self.check(theta)?;
        match &self.kind {
            PriorKind::Matern {
                geometry,
                nu,
                backend,
            } => build_cov_operator(
                geometry,
                &Self::kernel(*nu, theta)?,
                CovDerivative::None,
                *backend,
            ),
            PriorKind::Scaled { q0 } => Ok(q0.scaled(theta[1] * theta[1])),
        }
    }

    pub fn derivative(&self, theta: &HyperParams, i: usize) -> Result<PriorDerivative> {
        self.check(theta)?;
        match (i, &self.kind) {
            (0, _) => Ok(PriorDerivative::Zero),
            (1, _) => Ok(PriorDerivative::ScaledPrior(2.0 / theta[1])),
            (
                2,
                PriorKind::Matern {
                    geometry,
                    nu,
                    backend,
                },
            ) => Ok(PriorDerivative::Operator(build_cov_operator(
                geometry,
                &Self::kernel(*nu, theta)?,
                CovDerivative::Param(KernelParam::Length),
                *backend,
            )?)),
            _ => Err(Error::InvalidArgument(format!(
                "no hyperparameter with index {i}"
            ))),
        }
    }
}

/// Everything needed to evaluate the objective at any `theta`.
#[derive(Debug, Clone)]
pub struct MarginalModel {
    pub forward: LinearOperator,
    pub data: DVector<f64>,
    pub prior_mean: DVector<f64>,
    pub prior: PriorFamily,
    pub hyperprior: Hyperprior,
    pub dense_cap: usize,
}

impl MarginalModel {
    /// Model with zero prior mean and the default dense cap.
    pub fn new(
        forward: LinearOperator,
        data: DVector<f64>,
        prior: PriorFamily,
        hyperprior: Hyperprior,
    ) -> Result<Self> {
        let n = forward.ncols();
        let model = MarginalModel {
            forward,
            data,
            prior_mean: DVector::zeros(n),
            prior,
            hyperprior,
            dense_cap: DEFAULT_DENSE_CAP,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_prior_mean(mut self, mu: DVector<f64>) -> Result<Self> {
        self.prior_mean = mu;
        self.validate()?;
        Ok(self)
    }

    pub fn with_dense_cap(mut self, cap: usize) -> Self {
        self.dense_cap = cap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.forward.nrows(), self.forward.ncols());
        if self.data.len() != m {
            return Err(Error::dims("data vector", m, self.data.len()));
        }
        if self.prior_mean.len() != n {
            return Err(Error::dims("prior mean", n, self.prior_mean.len()));
        }
        if self.prior.dim() != n {
            return Err(Error::dims("prior dimension", n, self.prior.dim()));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("data entry {i}")));
        }
        self.hyperprior.validate()
    }

    pub fn m(&self) -> usize {
        self.forward.nrows()
    }

    pub fn n(&self) -> usize {
        self.forward.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.prior.num_params()
    }

    pub fn noise(&self, theta: &HyperParams) -> Result<NoiseCovariance> {
        NoiseCovariance::new(theta.noise_variance(), self.m())
    }

    /// Runs the bidiagonalization at `theta` with complete reorthogonalization.
    pub fn factorize(&self, theta: &HyperParams, k: usize) -> Result<GenGk> {
        let q = self.prior.covariance(theta)?;
        let noise = self.noise(theta)?;
        gengk(
            &self.forward,
            &noise,
            &q,
            &self.prior_mean,
            &self.data,
            k,
            true,
        )
    }
}

/// Objective value split into its terms, with the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEvaluation {
    pub value: f64,
    pub neglogprior_term: f64,
    /// `1/2 logdet Z`.
    pub logdet_term: f64,
    /// `1/2 ||A mu - d||^2_{Z^-1}`.
    pub quad_term: f64,
    pub gradient: DVector<f64>,
    /// Bidiagonalization depth used (0 for the exact oracle).
    pub k_used: usize,
    pub breakdown_at: Option<usize>,
    /// Forward-operator applications spent in this evaluation.
    pub matvecs: MatvecCount,
}

impl ObjectiveEvaluation {
    fn assemble(
        neglogprior_term: f64,
        logdet_term: f64,
        quad_term: f64,
        gradient: DVector<f64>,
    ) -> Result<Self> {
        let value = neglogprior_term + logdet_term + quad_term;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective (prior {neglogprior_term}, logdet {logdet_term}, quad {quad_term})"
            )));
        }
        if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {i}")));
        }
        Ok(ObjectiveEvaluation {
            value,
            neglogprior_term,
            logdet_term,
            quad_term,
            gradient,
            k_used: 0,
            breakdown_at: None,
            matvecs: MatvecCount::default(),
        })
    }

    /// `logdet Z` (or its approximation).
    pub fn logdet(&self) -> f64 {
        2.0 * self.logdet_term
    }

    /// `||A mu - d||^2_{Z^-1}` (or its approximation).
    pub fn quadratic(&self) -> f64 {
        2.0 * self.quad_term
    }
}

fn check_theta(model: &MarginalModel, theta: &HyperParams) -> Result<()> {
    if theta.len() != model.num_params() {
        return Err(Error::dims(
            "hyperparameter vector",
            model.num_params(),
            theta.len(),
        ));
    }
    Ok(())
}

/// Dense pieces of the exact objective.
struct DenseSystem {
    /// `A Q A^T`.
    aqa: DMatrix<f64>,
    /// `A^T`.
    at: DMatrix<f64>,
}

fn assemble_dense(model: &MarginalModel, q: &CovarianceOperator) -> Result<DenseSystem> {
    let m = model.m();
    if m > model.dense_cap {
        return Err(Error::DenseCapExceeded {
            size: m,
            cap: model.dense_cap,
        });
    }
    let at = model.forward.adjoint_to_dense()?;
    let qat = q.apply_columns(&at)?;
    let mut aqa = model.forward.apply_columns(&qat)?;
    crate::linalg::symmetrize(&mut aqa);
    Ok(DenseSystem { aqa, at })
}

/// Exact objective and gradient by dense assembly of `Z = A Q A^T + R`.
///
/// Costs `m` adjoint and `m` (plus `m` per length derivative) forward
/// applications and `O(m^3)` flops. Refused when `m` exceeds the model's dense cap.
pub fn objective_exact(model: &MarginalModel, theta: &HyperParams) -> Result<ObjectiveEvaluation> {
    check_theta(model, theta)?;
    let start = model.forward.counts();
    let q = model.prior.covariance(theta)?;
    let noise = model.noise(theta)?;
    let sys = assemble_dense(model, &q)?;
    let m = model.m();

    let mut z = sys.aqa.clone();
    for i in 0..m {
        z[(i, i)] += noise.variance();
    }
    let zinv = spd_inverse(z, "Z = A Q A^T + R")?;
    let resid = model.forward.apply(&model.prior_mean)? - &model.data;
    let w = zinv.solve(&resid);
    let quad = resid.dot(&w);

    let (neglogprior, prior_grad) = model.hyperprior.neglog(theta);
    let mut gradient = prior_grad;
    for i in 0..theta.len() {
        let rscale = noise.derivative_scale(i);
        let (mut trace, mut wdw) = (0.0, 0.0);
        if rscale != 0.0 {
            trace += rscale * zinv.inverse.trace();
            wdw += rscale * w.norm_squared();
        }
        match model.prior.derivative(theta, i)? {
            PriorDerivative::Zero => {}
            PriorDerivative::ScaledPrior(c) => {
                trace += c * frobenius_dot(&zinv.inverse, &sys.aqa);
                wdw += c * w.dot(&(&sys.aqa * &w));
            }
            PriorDerivative::Operator(dq) => {
                let dqat = dq.apply_columns(&sys.at)?;
                let dz = model.forward.apply_columns(&dqat)?;
                trace += frobenius_dot(&zinv.inverse, &dz);
                wdw += w.dot(&(&dz * &w));
            }
        }
        gradient[i] += 0.5 * trace - 0.5 * wdw;
    }
    let mut eval = ObjectiveEvaluation::assemble(neglogprior, 0.5 * zinv.logdet, 0.5 * quad, gradient)?;
    eval.matvecs = model.forward.counts() - start;
    Ok(eval)
}

/// Approximate objective and gradient from a bidiagonalization of depth `k`.
///
/// With `fact = None` the factorization is computed at `theta`; a supplied
/// factorization must have been built at the same `theta` (for instance by
/// [`GenGk::rescale`]) and is truncated to `k` if deeper. If the process broke
/// down before `k` steps the achieved depth is used and recorded.
pub fn objective_gengk(
    model: &MarginalModel,
    theta: &HyperParams,
    k: usize,
    fact: Option<&GenGk>,
) -> Result<ObjectiveEvaluation> {
    check_theta(model, theta)?;
    let start = model.forward.counts();
    let owned;
    let fact = match fact {
        Some(f) => {
            let rel = (f.noise_variance() - theta.noise_variance()).abs() / theta.noise_variance();
            if rel > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "factorization built for noise variance {} used at {}",
                    f.noise_variance(),
                    theta.noise_variance()
                )));
            }
            if f.u().nrows() != model.m() || f.v().nrows() != model.n() {
                return Err(Error::dims("factorization rows", model.m(), f.u().nrows()));
            }
            if f.k() > k {
                owned = f.truncated(k)?;
                &owned
            } else {
                f
            }
        }
        None => {
            owned = model.factorize(theta, k)?;
            &owned
        }
    };
    let mut eval = approximate_from_factorization(model, theta, fact)?;
    eval.matvecs = model.forward.counts() - start;
    Ok(eval)
}

fn approximate_from_factorization(
    model: &MarginalModel,
    theta: &HyperParams,
    fact: &GenGk,
) -> Result<ObjectiveEvaluation> {
    let m = model.m();
    let k = fact.k();
    let noise = model.noise(theta)?;
    let theta1 = noise.variance();
    let beta1 = fact.beta1();
    let b = fact.bidiagonal();

    // logdet and quadratic terms from the SVD of [B_k 0]
    let mut square = DMatrix::zeros(k + 1, k + 1);
    square.columns_mut(0, k).copy_from(&b);
    let svd_sq = SVD::new(square, true, false);
    let p = svd_sq
        .u
        .as_ref()
        .ok_or_else(|| Error::Numerical("SVD of the bidiagonal matrix failed".into()))?;
    let sv = &svd_sq.singular_values;
    let logdet_theta: f64 = sv.iter().map(|s| (s * s).ln_1p()).sum();
    // e_1^T (I + B B^T)^-1 e_1
    let e1_theta_e1: f64 = (0..=k)
        .map(|j| p[(0, j)] * p[(0, j)] / (1.0 + sv[j] * sv[j]))
        .sum();
    let logdet_term = 0.5 * (noise.logdet() + logdet_theta);
    let quad_term = 0.5 * beta1 * beta1 * e1_theta_e1;

    // (I + T)^-1 and T (I + T)^-1 with T = B^T B
    let (inv_it, t_inv_it) = if k > 0 {
        let svd = SVD::new(b.clone(), false, true);
        let wt = svd
            .v_t
            .ok_or_else(|| Error::Numerical("SVD of the bidiagonal matrix failed".into()))?;
        let s2 = svd.singular_values.map(|s| s * s);
        let d1 = s2.map(|x| 1.0 / (1.0 + x));
        let d2 = s2.map(|x| x / (1.0 + x));
        let w = wt.transpose();
        (
            &w * DMatrix::from_diagonal(&d1) * &wt,
            &w * DMatrix::from_diagonal(&d2) * &wt,
        )
    } else {
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
    };

    // r = Z~^-1 (A mu - d) = U g with g = -(beta_1 / theta_1) (I + B B^T)^-1 e_1
    let mut theta_inv_e1 = DVector::zeros(k + 1);
    for j in 0..=k {
        let coef = p[(0, j)] / (1.0 + sv[j] * sv[j]);
        theta_inv_e1.axpy(coef, &p.column(j), 1.0);
    }
    let g = theta_inv_e1 * (-beta1 / theta1);
    let u = fact.u();
    let gram = u.tr_mul(u);
    // U^T r
    let utr = &gram * &g;
    let bt_utr = b.tr_mul(&utr);
    let r_norm2 = g.dot(&utr);

    let vk = fact.v_k();
    let (neglogprior, prior_grad) = model.hyperprior.neglog(theta);
    let mut gradient = prior_grad;
    for i in 0..theta.len() {
        let psi_q = match model.prior.derivative(theta, i)? {
            PriorDerivative::Zero => None,
            PriorDerivative::ScaledPrior(c) => Some(vk.tr_mul(&fact.qv_k()) * c),
            PriorDerivative::Operator(dq) => {
                if k == 0 {
                    None
                } else {
                    let dqv = dq.apply_columns(&vk)?;
                    Some(vk.tr_mul(&dqv))
                }
            }
        };
        let rscale = noise.derivative_scale(i);
        let mut trace = noise.derivative_trace(i);
        let mut quad = rscale * r_norm2;
        if k > 0 && rscale != 0.0 {
            // Psi^R = U^T R^-1 dR R^-1 U
            let psi_r = &gram * (rscale / (theta1 * theta1));
            let btpb = b.tr_mul(&(psi_r * &b));
            trace -= frobenius_dot(&btpb, &inv_it);
        }
        if let Some(psi) = psi_q.filter(|_| k > 0) {
            trace += frobenius_dot(&psi, &t_inv_it);
            quad += bt_utr.dot(&(&psi * &bt_utr));
        }
        if !trace.is_finite() || !quad.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient component {i} (trace {trace}, quadratic {quad})"
            )));
        }
        gradient[i] += 0.5 * trace - 0.5 * quad;
    }
    debug_assert_eq!(u.nrows(), m);
    let mut eval = ObjectiveEvaluation::assemble(neglogprior, logdet_term, quad_term, gradient)?;
    eval.k_used = k;
    eval.breakdown_at = fact.breakdown_at();
    Ok(eval)
}

/// Objective from the rank-`k` truncated SVD of `R^{-1/2} A Q^{1/2}` (dense).
#[derive(Debug, Clone, PartialEq)]
pub struct SvdObjective {
    pub value: f64,
    pub neglogprior_term: f64,
    pub logdet_term: f64,
    pub quad_term: f64,
    pub k: usize,
    /// All singular values of `R^{-1/2} A Q^{1/2}`, descending.
    pub singular_values: Vec<f64>,
    /// `||A mu - d||_{R^-1}`.
    pub beta1: f64,
}

impl SvdObjective {
    /// `1/2 sum_{i>k} log(1 + s_i^2) + 1/2 beta_1^2 s_{k+1}^2 / (1 + s_{k+1}^2)`.
    pub fn bound(&self) -> f64 {
        let tail: f64 = self
            .singular_values
            .iter()
            .skip(self.k)
            .map(|s| (s * s).ln_1p())
            .sum();
        let next = self.singular_values.get(self.k).copied().unwrap_or(0.0);
        let s2 = next * next;
        0.5 * tail + 0.5 * self.beta1 * self.beta1 * s2 / (1.0 + s2)
    }
}

/// Dense truncated-SVD objective. Intended for small problems and bound checks.
pub fn objective_svd(model: &MarginalModel, theta: &HyperParams, k: usize) -> Result<SvdObjective> {
    check_theta(model, theta)?;
    let (m, n) = (model.m(), model.n());
    if m.max(n) > model.dense_cap {
        return Err(Error::DenseCapExceeded {
            size: m.max(n),
            cap: model.dense_cap,
        });
    }
    let noise = model.noise(theta)?;
    let q = model.prior.covariance(theta)?.to_dense();
    let qhalf = psd_sqrt(&q);
    let a = model.forward.to_dense()?;
    let ahat = (a * qhalf) / noise.variance().sqrt();
    let svd = SVD::new(ahat, true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD of the whitened operator failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let k = k.min(sv.len());

    let resid = model.forward.apply(&model.prior_mean)? - &model.data;
    let beta1 = (noise.inv_norm_sq(&resid)).sqrt();
    let logdet = noise.logdet() + sv[..k].iter().map(|s| (s * s).ln_1p()).sum::<f64>();
    // ||r||^2_{Z_k^-1} = (1/theta_1)[sum_{i<=k} c_i^2/(1+s_i^2) + ||r - U_k U_k^T r||^2]
    let mut remainder = resid.clone();
    let mut captured = 0.0;
    for (&idx, s) in order.iter().zip(&sv).take(k) {
        let col = u.column(idx);
        let c = col.dot(&resid);
        captured += c * c / (1.0 + s * s);
        remainder.axpy(-c, &col, 1.0);
    }
    let quad = (captured + remainder.norm_squared()) / noise.variance();
    let (neglogprior, _) = model.hyperprior.neglog(theta);
    let (logdet_term, quad_term) = (0.5 * logdet, 0.5 * quad);
    Ok(SvdObjective {
        value: neglogprior + logdet_term + quad_term,
        neglogprior_term: neglogprior,
        logdet_term,
        quad_term,
        k,
        singular_values: sv,
        beta1,
    })
}
