//! Hyperparameter estimation, MAP reconstruction and the oracle
//! regularization-parameter sweep.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gengk::{gengk, GenGk};
use crate::linalg::spd_inverse;
use crate::marginal::{objective_exact, objective_gengk, HyperParams, MarginalModel, ObjectiveEvaluation};
use crate::operators::{MatvecCount, NoiseCovariance};
use crate::problems::relative_error;

/// Coordinates the optimizer works in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parameterization {
    /// `x = log theta`; positivity is structural.
    #[default]
    Log,
    /// `x = theta`, kept positive by the bounds.
    Linear,
}

/// Which objective the optimizer minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Evaluator {
    /// Fresh bidiagonalization of depth `k` at every iterate.
    #[default]
    GenGk,
    /// Dense exact objective (small problems only).
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOptions {
    pub k: usize,
    pub max_iters: usize,
    /// Tolerance on the infinity norm of the projected gradient in the
    /// optimization coordinates.
    pub grad_tol: f64,
    /// Stop when an accepted step lowers the objective by less than
    /// `ftol * max(|F|, 1)`.
    pub ftol: f64,
    /// Per-component `(lower, upper)` bounds on `theta`; `None` uses
    /// `[1e-12, 1e8]` for every component.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub parameterization: Parameterization,
    pub evaluator: Evaluator,
    /// L-BFGS memory.
    pub memory: usize,
    pub seed: u64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            k: 20,
            max_iters: 200,
            grad_tol: 1e-6,
            ftol: 1e-12,
            bounds: None,
            parameterization: Parameterization::Log,
            evaluator: Evaluator::GenGk,
            memory: 10,
            seed: 0,
        }
    }
}

const DEFAULT_BOUNDS: (f64, f64) = (1e-12, 1e8);
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

impl OptimizeOptions {
    fn validate(&self, dim: usize) -> Result<Vec<(f64, f64)>> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("bidiagonalization depth must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0) || !(self.ftol >= 0.0) {
            return Err(Error::Domain("tolerances must be nonnegative".into()));
        }
        if self.memory < 1 {
            return Err(Error::InvalidArgument("L-BFGS memory must be at least 1".into()));
        }
        let bounds = self.bounds.clone().unwrap_or_else(|| vec![DEFAULT_BOUNDS; dim]);
        if bounds.len() != dim {
            return Err(Error::dims("bounds", dim, bounds.len()));
        }
        for &(lo, hi) in &bounds {
            if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
                return Err(Error::Domain(format!("invalid bound interval [{lo}, {hi}]")));
            }
        }
        Ok(bounds)
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    FunctionTolerance,
    StepTolerance,
    MaxIterations,
    LineSearchFailure,
}

impl StopReason {
    pub fn is_converged(self) -> bool {
        matches!(
            self,
            StopReason::GradientTolerance | StopReason::FunctionTolerance | StopReason::StepTolerance
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateRecord {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub value: f64,
    /// Infinity norm of the projected gradient in optimization coordinates.
    pub grad_norm: f64,
    /// Objective evaluations so far.
    pub func_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeTrace {
    pub iterates: Vec<IterateRecord>,
    pub func_count: usize,
    pub converged: bool,
    pub reason: StopReason,
}

impl OptimizeTrace {
    pub fn iterations(&self) -> usize {
        self.iterates.last().map_or(0, |r| r.iteration)
    }
}

struct Box_ {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Box_ {
    fn project(&self, x: &mut [f64]) {
        for ((v, l), h) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }

    fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&xi, &gi))| {
                let at_lo = xi <= self.lo[i] && gi > 0.0;
                let at_hi = xi >= self.hi[i] && gi < 0.0;
                if at_lo || at_hi {
                    0.0
                } else {
                    gi
                }
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// L-BFGS two-loop recursion `H g`.
fn lbfgs_direction(g: &[f64], mem: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y) in mem.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push((a, rho));
    }
    if let Some((s, y)) = mem.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y), (a, rho)) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q
}

/// Box-constrained L-BFGS with a projected backtracking line search.
///
/// `f` returns the value and gradient at `x`. Evaluation errors at trial
/// points shrink the step; an error at `x0` is returned.
fn minimize_box<F>(
    mut f: F,
    x0: Vec<f64>,
    bx: &Box_,
    opts: &OptimizeOptions,
    to_theta: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<(Vec<f64>, OptimizeTrace)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    bx.project(&mut x);
    let (mut fx, mut g) = f(&x)?;
    let mut evals = 1;
    let mut mem: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut pg = bx.projected_gradient(&x, &g);
    let mut iterates = vec![IterateRecord {
        iteration: 0,
        theta: to_theta(&x),
        value: fx,
        grad_norm: inf_norm(&pg),
        func_count: evals,
    }];
    let mut reason = StopReason::MaxIterations;
    for iter in 1..=opts.max_iters {
        if inf_norm(&pg) <= opts.grad_tol {
            reason = StopReason::GradientTolerance;
            break;
        }
        let mut accepted = None;
        // one retry with steepest descent after a failed quasi-Newton step
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !mem.is_empty();
            let mut d: Vec<f64> = if use_memory {
                lbfgs_direction(&pg, &mem).into_iter().map(|v| -v).collect()
            } else {
                pg.iter().map(|v| -v).collect()
            };
            // freeze variables held at an active bound
            for i in 0..d.len() {
                if pg[i] == 0.0 {
                    d[i] = 0.0;
                }
            }
            if dot(&d, &pg) >= 0.0 {
                d = pg.iter().map(|v| -v).collect();
            }
            let mut alpha = 1.0;
            if !use_memory {
                // first steps move at most one unit in any coordinate
                let scale = match opts.parameterization {
                    Parameterization::Log => 1.0,
                    Parameterization::Linear => 0.1 * inf_norm(&x).max(f64::MIN_POSITIVE),
                };
                alpha = (scale / inf_norm(&d)).min(1.0);
            }
            for _ in 0..MAX_BACKTRACKS {
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                bx.project(&mut xn);
                let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                if inf_norm(&step) == 0.0 {
                    break;
                }
                evals += 1;
                match f(&xn) {
                    Ok((fnew, gnew)) if fnew <= fx + ARMIJO_C1 * dot(&g, &step) => {
                        accepted = Some((xn, fnew, gnew, step));
                        break;
                    }
                    Ok(_) => {}
                    Err(e) => debug!("trial point rejected: {e}"),
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            mem.clear();
            if !use_memory {
                break;
            }
        }
        let Some((xn, fnew, gnew, step)) = accepted else {
            reason = StopReason::LineSearchFailure;
            break;
        };
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&step, &y);
        if sy > 1e-12 * dot(&step, &step).sqrt() * dot(&y, &y).sqrt() {
            mem.push((step.clone(), y));
            if mem.len() > opts.memory {
                mem.remove(0);
            }
        }
        let decrease = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        pg = bx.projected_gradient(&x, &g);
        iterates.push(IterateRecord {
            iteration: iter,
            theta: to_theta(&x),
            value: fx,
            grad_norm: inf_norm(&pg),
            func_count: evals,
        });
        debug!("iter {iter}: F = {fx:.10e}, |pg| = {:.3e}", inf_norm(&pg));
        if inf_norm(&pg) <= opts.grad_tol {
            reason = StopReason::GradientTolerance;
            break;
        }
        if decrease <= opts.ftol * fx.abs().max(1.0) {
            reason = StopReason::FunctionTolerance;
            break;
        }
        if inf_norm(&step) <= 1e-14 * inf_norm(&x).max(1.0) {
            reason = StopReason::StepTolerance;
            break;
        }
    }
    let trace = OptimizeTrace {
        iterates,
        func_count: evals,
        converged: reason.is_converged(),
        reason,
    };
    Ok((x, trace))
}

/// Runs the optimizer over `theta` given an objective in `theta`.
fn optimize_with<F>(
    mut objective: F,
    theta0: &HyperParams,
    opts: &OptimizeOptions,
) -> Result<(HyperParams, OptimizeTrace)>
where
    F: FnMut(&HyperParams) -> Result<ObjectiveEvaluation>,
{
    let bounds = opts.validate(theta0.len())?;
    for (i, (&t, &(lo, hi))) in theta0.as_slice().iter().zip(&bounds).enumerate() {
        if t < lo || t > hi {
            return Err(Error::Domain(format!(
                "initial theta[{i}] = {t:e} outside [{lo:e}, {hi:e}]"
            )));
        }
    }
    let param = opts.parameterization;
    let to_theta = move |x: &[f64]| -> Vec<f64> {
        match param {
            Parameterization::Log => x.iter().map(|v| v.exp()).collect(),
            Parameterization::Linear => x.to_vec(),
        }
    };
    let bx = match param {
        Parameterization::Log => Box_ {
            lo: bounds.iter().map(|b| b.0.ln()).collect(),
            hi: bounds.iter().map(|b| b.1.ln()).collect(),
        },
        Parameterization::Linear => Box_ {
            lo: bounds.iter().map(|b| b.0).collect(),
            hi: bounds.iter().map(|b| b.1).collect(),
        },
    };
    let x0 = match param {
        Parameterization::Log => theta0.as_slice().iter().map(|v| v.ln()).collect(),
        Parameterization::Linear => theta0.to_vec(),
    };
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let theta = to_theta(x);
        let eval = objective(&HyperParams::new(theta.clone())?)?;
        let grad = match param {
            // d/dx F(exp x) = theta * dF/dtheta
            Parameterization::Log => eval.gradient.iter().zip(&theta).map(|(g, t)| g * t).collect(),
            Parameterization::Linear => eval.gradient.iter().copied().collect(),
        };
        Ok((eval.value, grad))
    };
    let (x, trace) = minimize_box(f, x0, &bx, opts, &to_theta)?;
    info!(
        "optimizer stopped after {} iterations, {} evaluations: {:?}",
        trace.iterations(),
        trace.func_count,
        trace.reason
    );
    Ok((HyperParams::new(to_theta(&x))?, trace))
}

/// Minimizes the objective over `theta`, re-running the bidiagonalization at
/// every evaluated point (or the dense objective, per `opts.evaluator`).
pub fn optimize_hyperparams(
    model: &MarginalModel,
    theta0: &HyperParams,
    opts: &OptimizeOptions,
) -> Result<(HyperParams, OptimizeTrace)> {
    if theta0.len() != model.num_params() {
        return Err(Error::dims("initial hyperparameters", model.num_params(), theta0.len()));
    }
    let k = opts.k;
    match opts.evaluator {
        Evaluator::GenGk => optimize_with(|t| objective_gengk(model, t, k, None), theta0, opts),
        Evaluator::Exact => optimize_with(|t| objective_exact(model, t), theta0, opts),
    }
}

/// Factorization for `R = I`, `Q = Q0`, reusable at any `(theta_1, theta_2)`.
pub fn precompute_two_param(model: &MarginalModel, k: usize) -> Result<GenGk> {
    let q0 = model.prior.base_covariance().ok_or_else(|| {
        Error::InvalidArgument("the fast path needs a prior of the form theta_2^2 Q0".into())
    })?;
    let noise = NoiseCovariance::new(1.0, model.m())?;
    gengk(&model.forward, &noise, q0, &model.prior_mean, &model.data, k, true)
}

/// Result of the two-parameter fast path.
#[derive(Debug, Clone)]
pub struct TwoParamResult {
    pub theta: HyperParams,
    pub trace: OptimizeTrace,
    pub precompute_matvecs: MatvecCount,
    /// Forward-operator applications after the precompute (zero by construction).
    pub optimization_matvecs: MatvecCount,
}

/// Estimates `(theta_1, theta_2)` for `R = theta_1 I`, `Q = theta_2^2 Q0` from
/// a single bidiagonalization, rescaled at every iterate.
pub fn optimize_two_param(
    model: &MarginalModel,
    theta0: &HyperParams,
    opts: &OptimizeOptions,
) -> Result<TwoParamResult> {
    if model.num_params() != 2 || theta0.len() != 2 {
        return Err(Error::InvalidArgument(
            "the fast path estimates exactly (theta_1, theta_2)".into(),
        ));
    }
    let start = model.forward.counts();
    let base = precompute_two_param(model, opts.k)?;
    let mid = model.forward.counts();
    let k = opts.k;
    let (theta, trace) = optimize_with(
        |t| {
            let fact = base.rescale(t[0], t[1])?;
            objective_gengk(model, t, k, Some(&fact))
        },
        theta0,
        opts,
    )?;
    let end = model.forward.counts();
    Ok(TwoParamResult {
        theta,
        trace,
        precompute_matvecs: mid - start,
        optimization_matvecs: end - mid,
    })
}

/// Projected MAP estimate `mu + Q V_k (I + T_k)^-1 B_k^T beta_1 e_1` from a
/// factorization at `theta`.
pub fn map_from_factorization(mu: &DVector<f64>, fact: &GenGk) -> Result<DVector<f64>> {
    let k = fact.k();
    if k == 0 {
        return Ok(mu.clone());
    }
    let b = fact.bidiagonal();
    let mut rhs = DVector::zeros(k + 1);
    rhs[0] = fact.beta1();
    let btb = b.tr_mul(&b) + DMatrix::identity(k, k);
    let z = btb
        .cholesky()
        .ok_or_else(|| Error::Numerical("I + T_k is not positive definite".into()))?
        .solve(&b.tr_mul(&rhs));
    Ok(mu + fact.qv_k() * z)
}

/// MAP estimate through a depth-`k` bidiagonalization at `theta`.
pub fn map_reconstruct(
    model: &MarginalModel,
    theta: &HyperParams,
    k: usize,
    fact: Option<&GenGk>,
) -> Result<DVector<f64>> {
    let owned;
    let fact = match fact {
        Some(f) => f,
        None => {
            owned = model.factorize(theta, k)?;
            &owned
        }
    };
    map_from_factorization(&model.prior_mean, fact)
}

/// Dense closed-form MAP estimate `mu + Q A^T Z^-1 (d - A mu)`.
pub fn map_exact(model: &MarginalModel, theta: &HyperParams) -> Result<DVector<f64>> {
    let m = model.m();
    if m > model.dense_cap {
        return Err(Error::DenseCapExceeded {
            size: m,
            cap: model.dense_cap,
        });
    }
    let q = model.prior.covariance(theta)?;
    let noise = model.noise(theta)?;
    let at = model.forward.adjoint_to_dense()?;
    let qat = q.apply_columns(&at)?;
    let mut z = model.forward.apply_columns(&qat)?;
    for i in 0..m {
        z[(i, i)] += noise.variance();
    }
    let zinv = spd_inverse(z, "Z = A Q A^T + R")?;
    let resid = &model.data - model.forward.apply(&model.prior_mean)?;
    Ok(&model.prior_mean + qat * zinv.solve(&resid))
}

/// Relative errors of MAP reconstructions over a grid of regularization
/// parameters `lambda = 1 / theta_2` at fixed `theta_1`, in ascending `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSweep {
    pub lambdas: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub best_index: usize,
}

impl LambdaSweep {
    pub fn best_lambda(&self) -> f64 {
        self.lambdas[self.best_index]
    }

    pub fn best_error(&self) -> f64 {
        self.relative_errors[self.best_index]
    }

    /// The interval of `lambda` around the best grid point on which the
    /// error stays within `factor` times the best, with the end points
    /// located by interpolating the error curve linearly in `log lambda`.
    pub fn bracket(&self, factor: f64) -> (f64, f64) {
        let limit = factor * self.best_error();
        let re = &self.relative_errors;
        let ll: Vec<f64> = self.lambdas.iter().map(|l| l.ln()).collect();
        // crossing of the limit between an inside point `i` and an outside point `o`
        let cross = |i: usize, o: usize| {
            let t = (limit - re[i]) / (re[o] - re[i]);
            (ll[i] + t * (ll[o] - ll[i])).exp()
        };
        let mut lo = self.best_index;
        while lo > 0 && re[lo - 1] <= limit {
            lo -= 1;
        }
        let lower = if lo > 0 { cross(lo, lo - 1) } else { self.lambdas[0] };
        let mut hi = self.best_index;
        let last = self.lambdas.len() - 1;
        while hi < last && re[hi + 1] <= limit {
            hi += 1;
        }
        let upper = if hi < last { cross(hi, hi + 1) } else { self.lambdas[last] };
        (lower, upper)
    }
}

/// Oracle sweep over `lambda_grid` for a fixed-shape prior `theta_2^2 Q0`,
/// reusing one factorization of depth `k`.
pub fn optimal_lambda_sweep(
    model: &MarginalModel,
    theta1: f64,
    s_true: &DVector<f64>,
    lambda_grid: &[f64],
    k: usize,
) -> Result<LambdaSweep> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("empty regularization-parameter grid".into()));
    }
    if let Some(l) = lambda_grid.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::Domain(format!("regularization parameters must be positive, got {l}")));
    }
    let mut lambdas = lambda_grid.to_vec();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let base = precompute_two_param(model, k)?;
    let relative_errors = lambdas
        .iter()
        .map(|&lambda| {
            let fact = base.rescale(theta1, 1.0 / lambda)?;
            let s = map_from_factorization(&model.prior_mean, &fact)?;
            relative_error(s_true, &s)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best_index = relative_errors
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(LambdaSweep {
        lambdas,
        relative_errors,
        best_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{CovBackend, CovarianceOperator, Geometry, Grid};
    use crate::marginal::{Hyperprior, PriorFamily};
    use crate::operators::LinearOperator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_model(m: usize, n: usize) -> (MarginalModel, f64) {
        let d = DVector::from_fn(m, |i, _| ((i * 7 + 3) % 5) as f64 - 1.7);
        let prior = PriorFamily::matern(
            Geometry::Grid(Grid::unit_1d(n).unwrap()),
            1.5,
            CovBackend::Dense,
        )
        .unwrap();
        let target = d.norm_squared() / m as f64;
        let model =
            MarginalModel::new(LinearOperator::zero(m, n), d, prior, Hyperprior::Flat).unwrap();
        (model, target)
    }

    #[test]
    fn zero_operator_closed_form_minimizer() {
        let (model, target) = zero_model(10, 6);
        let theta0 = HyperParams::new(vec![0.3, 1.0, 0.2]).unwrap();
        let mut sols = Vec::new();
        for param in [Parameterization::Log, Parameterization::Linear] {
            let opts = OptimizeOptions {
                k: 3,
                grad_tol: 1e-9,
                parameterization: param,
                ..Default::default()
            };
            let (theta, trace) = optimize_hyperparams(&model, &theta0, &opts).unwrap();
            assert!(trace.converged, "{param:?}: {:?}", trace.reason);
            assert!(
                (theta[0] - target).abs() < 1e-6 * target,
                "{param:?}: {} vs {target}",
                theta[0]
            );
            sols.push(theta[0]);
        }
        assert!((sols[0] - sols[1]).abs() < 1e-4 * sols[0]);
    }

    #[test]
    fn start_at_minimizer_stops_immediately() {
        let (model, target) = zero_model(8, 4);
        let theta0 = HyperParams::new(vec![target, 1.0, 0.3]).unwrap();
        let opts = OptimizeOptions {
            k: 3,
            ..Default::default()
        };
        let (theta, trace) = optimize_hyperparams(&model, &theta0, &opts).unwrap();
        assert_eq!(trace.reason, StopReason::GradientTolerance);
        assert_eq!(trace.func_count, 1);
        assert!((theta[0] - target).abs() < 1e-12 * target);
    }

    #[test]
    fn func_count_matches_objective_calls() {
        let (model, _) = zero_model(8, 4);
        let theta0 = HyperParams::new(vec![5.0, 1.0, 0.3]).unwrap();
        let mut calls = 0;
        let opts = OptimizeOptions::default();
        let (_, trace) = optimize_with(
            |t| {
                calls += 1;
                objective_gengk(&model, t, 2, None)
            },
            &theta0,
            &opts,
        )
        .unwrap();
        assert_eq!(trace.func_count, calls);
        assert!(trace.iterates.last().unwrap().func_count <= calls);
    }

    #[test]
    fn invalid_options_are_rejected() {
        let (model, _) = zero_model(8, 4);
        let theta0 = HyperParams::new(vec![1.0, 1.0, 0.3]).unwrap();
        let bad = OptimizeOptions {
            bounds: Some(vec![(2.0, 3.0); 3]),
            ..Default::default()
        };
        assert!(optimize_hyperparams(&model, &theta0, &bad).is_err());
        let bad = OptimizeOptions {
            k: 0,
            ..Default::default()
        };
        assert!(optimize_hyperparams(&model, &theta0, &bad).is_err());
    }

    fn scaled_model(m: usize, n: usize, seed: u64) -> MarginalModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q0 = &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.05;
        let d = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let prior = PriorFamily::scaled(CovarianceOperator::from_dense(q0).unwrap());
        MarginalModel::new(LinearOperator::dense(a), d, prior, Hyperprior::Flat).unwrap()
    }

    #[test]
    fn map_at_full_rank_matches_closed_form() {
        let model = scaled_model(16, 16, 3);
        let theta = HyperParams::new(vec![0.05, 1.5]).unwrap();
        let exact = map_exact(&model, &theta).unwrap();
        let proj = map_reconstruct(&model, &theta, 16, None).unwrap();
        assert!((&exact - &proj).norm() < 1e-8 * exact.norm());
        // closed form through the posterior covariance
        let a = model.forward.to_dense().unwrap();
        let q = model.prior.covariance(&theta).unwrap().to_dense();
        let prec = a.tr_mul(&a) / 0.05 + q.try_inverse().unwrap();
        let direct = prec.try_inverse().unwrap() * (a.tr_mul(&model.data) / 0.05);
        assert!((&direct - &exact).norm() < 1e-8 * direct.norm());
    }

    #[test]
    fn zero_residual_gives_prior_mean() {
        let model = scaled_model(6, 5, 4);
        let mu = DVector::from_fn(5, |i, _| i as f64 * 0.1);
        let data = model.forward.apply(&mu).unwrap();
        let model = MarginalModel {
            data,
            ..model
        }
        .with_prior_mean(mu.clone())
        .unwrap();
        let s = map_reconstruct(&model, &HyperParams::new(vec![1.0, 1.0]).unwrap(), 3, None).unwrap();
        assert_eq!(s, mu);
    }

    #[test]
    fn two_param_matches_fresh_factorization_and_skips_operator() {
        let model = scaled_model(40, 30, 5);
        let opts = OptimizeOptions {
            k: 12,
            ..Default::default()
        };
        let base = precompute_two_param(&model, 12).unwrap();
        for (t1, t2) in [(0.1, 2.0), (4.0, 2.0), (1e-3, 0.3)] {
            let theta = HyperParams::new(vec![t1, t2]).unwrap();
            let fresh = objective_gengk(&model, &theta, 12, None).unwrap();
            let fact = base.rescale(t1, t2).unwrap();
            let fast = objective_gengk(&model, &theta, 12, Some(&fact)).unwrap();
            assert!((fresh.value - fast.value).abs() < 1e-8 * fresh.value.abs());
            assert_eq!(fast.matvecs.total(), 0);
        }
        let res =
            optimize_two_param(&model, &HyperParams::new(vec![0.5, 1.0]).unwrap(), &opts).unwrap();
        assert_eq!(res.optimization_matvecs.total(), 0);
        assert_eq!(res.precompute_matvecs.forward, 13);
    }

    #[test]
    fn sweep_edge_cases() {
        let model = scaled_model(12, 10, 6);
        let s_true = DVector::from_element(10, 1.0);
        let sweep = optimal_lambda_sweep(&model, 0.1, &s_true, &[2.0], 5).unwrap();
        assert_eq!(sweep.best_lambda(), 2.0);
        assert_eq!(sweep.bracket(1.05), (2.0, 2.0));
        assert!(optimal_lambda_sweep(&model, 0.1, &s_true, &[], 5).is_err());
        let grid: Vec<f64> = (0..9).map(|i| 10f64.powf(i as f64 / 2.0 - 2.0)).collect();
        let sweep = optimal_lambda_sweep(&model, 0.1, &s_true, &grid, 5).unwrap();
        assert!(sweep.relative_errors.iter().all(|e| e.is_finite() && *e > 0.0));
        let (lo, hi) = sweep.bracket(1.05);
        assert!(lo <= sweep.best_lambda() && sweep.best_lambda() <= hi);
    }

    #[test]
    fn bracket_interpolates_in_log_lambda() {
        let sweep = LambdaSweep {
            lambdas: vec![0.1, 1.0, 10.0, 100.0],
            relative_errors: vec![0.3, 0.1, 0.2, 0.5],
            best_index: 1,
        };
        // limit 0.15: halfway from 1 to 10 in log scale on the right,
        // a quarter of the way from 1 to 0.1 on the left
        let (lo, hi) = sweep.bracket(1.5);
        assert!((hi - 10f64.sqrt()).abs() < 1e-12);
        assert!((lo - 10f64.powf(-0.25)).abs() < 1e-12);
        let sweep = LambdaSweep {
            lambdas: vec![1.0, 2.0],
            relative_errors: vec![0.1, 0.1],
            best_index: 0,
        };
        assert_eq!(sweep.bracket(1.05), (1.0, 2.0));
    }
}
