//! Convergence monitoring for the bidiagonalization.
//!
//! The trace gap `xi_k = tr(H Q) - tr(V_k T_k V_k^T Q)` with `H = A^T R^-1 A`
//! controls the objective error through
//! `|F - F~_k| <= 1/2 [xi_k + beta_1^2 xi_k / (1 + xi_k)]`.
//! `xi_k` follows a cheap recurrence in the bidiagonal coefficients once
//! `xi_0 = tr(H Q)` is known, and can be estimated with random probes.

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::covariance::CovarianceOperator;
use crate::error::{Error, Result};
use crate::gengk::GenGk;
use crate::linalg::frobenius_dot;
use crate::operators::{LinearOperator, NoiseCovariance};

/// `xi_1 .. xi_{k_max}` from `xi_0` and the bidiagonal coefficients.
///
/// `xi_{k+1} = xi_k - (alpha_{k+1}^2 + beta_{k+2}^2)`.
pub fn xi_recurrence(alphas: &[f64], betas: &[f64], xi0: f64, k_max: usize) -> Result<Vec<f64>> {
    if alphas.len() < k_max || betas.len() < k_max + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} alphas and {} betas cannot give {k_max} recurrence steps",
            alphas.len(),
            betas.len()
        )));
    }
    let mut xi = xi0;
    Ok((0..k_max)
        .map(|j| {
            xi -= alphas[j] * alphas[j] + betas[j + 1] * betas[j + 1];
            xi
        })
        .collect())
}

/// Probe distribution for the trace estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbeKind {
    #[default]
    Gaussian,
    Rademacher,
    /// The `n` standard basis vectors; gives the exact trace.
    Exhaustive,
}

impl ProbeKind {
    fn draw(self, n: usize, n_mc: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            ProbeKind::Gaussian => DMatrix::from_fn(n, n_mc, |_, _| rng.sample(StandardNormal)),
            ProbeKind::Rademacher => DMatrix::from_fn(n, n_mc, |_, _| {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }),
            ProbeKind::Exhaustive => DMatrix::identity(n, n),
        }
    }
}

/// Estimates of `xi_0 .. xi_k` from one set of probes.
#[derive(Debug, Clone, PartialEq)]
pub struct XiEstimate {
    /// `xi_hat[j]` estimates `xi_j`, `j = 0..=k`.
    pub xi_hat: Vec<f64>,
    pub n_mc: usize,
    pub probe: ProbeKind,
}

/// `H x = A^T R^-1 A x` applied to each column.
fn apply_h(a: &LinearOperator, noise: &NoiseCovariance, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ax = a.apply_columns(x)? * noise.inv_diag();
    let mut out = DMatrix::zeros(a.ncols(), x.ncols());
    for (j, col) in ax.column_iter().enumerate() {
        let aty = a.apply_adjoint(&col.into_owned())?;
        out.set_column(j, &aty);
    }
    Ok(out)
}

/// Randomized estimate of the trace gap for every depth of `fact`.
///
/// `Y = H Q Omega` is formed once (`n_mc` forward and `n_mc` adjoint
/// applications of `A`); the per-depth corrections only use the stored
/// factorization and `Q Omega`.
pub fn mc_xi_estimate(
    a: &LinearOperator,
    noise: &NoiseCovariance,
    q: &CovarianceOperator,
    fact: &GenGk,
    n_mc: usize,
    probe: ProbeKind,
    seed: u64,
) -> Result<XiEstimate> {
    let n = a.ncols();
    if probe != ProbeKind::Exhaustive && n_mc < 1 {
        return Err(Error::InvalidArgument("at least one probe is required".into()));
    }
    if q.dim() != n || fact.v().nrows() != n {
        return Err(Error::dims("probe dimension", n, q.dim()));
    }
    let omega = probe.draw(n, n_mc, seed);
    let n_probes = omega.ncols();
    // the exhaustive basis sums each diagonal entry once
    let scale = match probe {
        ProbeKind::Exhaustive => 1.0,
        _ => 1.0 / n_probes as f64,
    };
    let q_omega = q.apply_columns(&omega)?;
    let y = apply_h(a, noise, &q_omega)?;
    let base = frobenius_dot(&omega, &y);

    let k = fact.k();
    let v = fact.v().columns(0, k);
    // V^T Q Omega and V^T Omega
    let p = v.tr_mul(&q_omega);
    let s = v.tr_mul(&omega);
    let b = fact.bidiagonal();
    let t = b.tr_mul(&b);
    let mut xi_hat = Vec::with_capacity(k + 1);
    xi_hat.push(base * scale);
    for j in 1..=k {
        // tr(Omega^T V_j T_j V_j^T Q Omega) = <S_j, T_j P_j>
        let tp = t.view((0, 0), (j, j)) * p.rows(0, j);
        let corr: f64 = s.rows(0, j).iter().zip(tp.iter()).map(|(x, y)| x * y).sum();
        xi_hat.push((base - corr) * scale);
    }
    Ok(XiEstimate {
        xi_hat,
        n_mc: n_probes,
        probe,
    })
}

/// `1/2 [xi + beta_1^2 xi / (1 + xi)]` with a noisy estimate, clamped at zero.
pub fn err_indicator(xi_hat: f64, beta1: f64) -> f64 {
    if xi_hat < -1e-8 * beta1 * beta1 {
        warn!("negative trace-gap estimate {xi_hat:.3e} clamped to zero");
    }
    let xi = xi_hat.max(0.0);
    0.5 * (xi + beta1 * beta1 * xi / (1.0 + xi))
}

/// Guaranteed bound on `|F - F~_k|` given the exact trace gap.
pub fn prop2_bound(xi_k: f64, beta1: f64) -> Result<f64> {
    if !(xi_k >= 0.0) {
        return Err(Error::Domain(format!("trace gap must be nonnegative, got {xi_k}")));
    }
    Ok(0.5 * (xi_k + beta1 * beta1 * xi_k / (1.0 + xi_k)))
}

/// The two summands inside the sample-size bound, before the common prefactor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSizeTerms {
    pub prefactor: f64,
    pub frobenius: f64,
    pub spectral: f64,
}

impl SampleSizeTerms {
    pub fn total(&self) -> f64 {
        self.prefactor * (self.frobenius + self.spectral)
    }
}

/// Terms of the probe-count bound for relative accuracy `epsilon` with
/// failure probability `delta`.
pub fn sample_size_terms(
    epsilon: f64,
    delta: f64,
    k_psi: f64,
    fro_norm: f64,
    spec_norm: f64,
    trace_val: f64,
    c_hw: f64,
) -> Result<SampleSizeTerms> {
    let positive = [epsilon, k_psi, fro_norm, spec_norm, trace_val, c_hw];
    if positive.iter().any(|v| !(*v > 0.0) || v.is_nan()) {
        return Err(Error::Domain(format!(
            "sample size inputs must be positive, got {positive:?}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("failure probability must be in (0, 1), got {delta}")));
    }
    let k2 = k_psi * k_psi;
    Ok(SampleSizeTerms {
        prefactor: k2 * (2.0 / delta).ln() / (c_hw * epsilon * epsilon),
        frobenius: k2 * fro_norm * fro_norm / (trace_val * trace_val),
        spectral: epsilon * spec_norm / trace_val,
    })
}

/// Smallest probe count guaranteed by the Hanson-Wright argument, at least 1.
pub fn sample_size_bound(
    epsilon: f64,
    delta: f64,
    k_psi: f64,
    fro_norm: f64,
    spec_norm: f64,
    trace_val: f64,
    c_hw: f64,
) -> Result<u64> {
    let total =
        sample_size_terms(epsilon, delta, k_psi, fro_norm, spec_norm, trace_val, c_hw)?.total();
    Ok(if total.is_finite() {
        total.ceil().max(1.0) as u64
    } else {
        u64::MAX
    })
}

/// Dense `H Q = A^T R^-1 A Q` for small problems.
pub fn dense_hq(
    a: &LinearOperator,
    noise: &NoiseCovariance,
    q: &CovarianceOperator,
    cap: usize,
) -> Result<DMatrix<f64>> {
    let n = a.ncols();
    if n > cap {
        return Err(Error::DenseCapExceeded { size: n, cap });
    }
    let qd = q.to_dense();
    let ad = a.to_dense()?;
    Ok(ad.transpose() * &ad * qd * noise.inv_diag())
}

/// Exact trace gaps `xi_0 .. xi_k` computed directly from dense matrices,
/// `tr(H Q) - tr(V_j T_j V_j^T Q)`.
pub fn dense_xi(hq: &DMatrix<f64>, q: &CovarianceOperator, fact: &GenGk) -> Vec<f64> {
    let qd = q.to_dense();
    let b = fact.bidiagonal();
    let t = b.tr_mul(&b);
    let base = hq.trace();
    (0..=fact.k())
        .map(|j| {
            let v = fact.v().columns(0, j);
            let proj = v * t.view((0, 0), (j, j)) * v.transpose() * &qd;
            base - proj.trace()
        })
        .collect()
}

/// Per-depth monitoring output.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorReport {
    /// `xi_hat_1 .. xi_hat_{k_max}` (raw, possibly negative).
    pub xi_hat: Vec<f64>,
    pub err_mc: Vec<f64>,
    pub beta1: f64,
    pub n_mc: usize,
    pub probe: ProbeKind,
}

/// Estimates the trace gap by probing and turns it into error indicators.
pub fn monitor(
    a: &LinearOperator,
    noise: &NoiseCovariance,
    q: &CovarianceOperator,
    fact: &GenGk,
    n_mc: usize,
    probe: ProbeKind,
    seed: u64,
) -> Result<MonitorReport> {
    let est = mc_xi_estimate(a, noise, q, fact, n_mc, probe, seed)?;
    let beta1 = fact.beta1();
    let xi_hat: Vec<f64> = est.xi_hat[1..].to_vec();
    let err_mc = xi_hat.iter().map(|&x| err_indicator(x, beta1)).collect();
    Ok(MonitorReport {
        xi_hat,
        err_mc,
        beta1,
        n_mc: est.n_mc,
        probe,
    })
}
