//! The four subcommands. Each one computes everything in memory first and
//! only then writes its files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use krylov_eb::covariance::{build_cov_operator, CovDerivative, Grid, MaternKernel};
use krylov_eb::estimate::{
    map_exact, map_reconstruct, optimize_hyperparams, optimize_two_param, OptimizeTrace,
};
use krylov_eb::marginal::{
    objective_exact, objective_gengk, HyperParams, Hyperprior, MarginalModel, PriorFamily,
};
use krylov_eb::monitor::{dense_hq, dense_xi, monitor, prop2_bound};
use krylov_eb::operators::{LinearOperator, MatvecCount};
use krylov_eb::problems::{relative_error, ProblemInstance};
use log::info;
use nalgebra::DVector;

use crate::config::{ProblemSpec, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{
    write_csv, write_json, ErrorRow, IterateRow, MatvecSummary, ReconstructionRow, ThetaStar,
    TimingRow, ERROR_FILE, ITERATES_FILE, RECONSTRUCTION_FILE, THETA_FILE, TIMING_FILE,
};

/// A built problem with its statistical model.
pub struct Setup {
    pub instance: ProblemInstance,
    pub model: MarginalModel,
}

pub fn build_instance(cfg: &RunConfig) -> CliResult<ProblemInstance> {
    let inst = match &cfg.problem {
        ProblemSpec::Heat { n, kappa, noise } => ProblemInstance::heat(*n, *kappa, *noise, cfg.seed)?,
        ProblemSpec::Tomography {
            grid,
            rays,
            noise,
            phantom,
            truncation,
            mask_radius,
        } => {
            let kernel = MaternKernel::from_std(phantom[0], phantom[1], phantom[2])?;
            let trunc = truncation.unwrap_or_else(|| (grid * grid).min(1024));
            ProblemInstance::tomography(*grid, *rays, &kernel, trunc, *mask_radius, *noise, cfg.seed)?
        }
        ProblemSpec::Zero { m, n, value, noise } => ProblemInstance::new(
            "zero",
            LinearOperator::zero(*m, *n),
            DVector::from_element(*n, *value),
            Grid::unit_1d(*n)?,
            *noise,
            cfg.seed,
        )?,
    };
    Ok(inst)
}

pub fn build(cfg: &RunConfig) -> CliResult<Setup> {
    let instance = build_instance(cfg)?;
    let geometry = instance.geometry();
    let backend = cfg.prior.backend.into();
    let prior = match cfg.prior.ell {
        Some(ell) => {
            let kernel = MaternKernel::from_std(cfg.prior.nu, 1.0, ell)?;
            PriorFamily::scaled(build_cov_operator(&geometry, &kernel, CovDerivative::None, backend)?)
        }
        None => PriorFamily::matern(geometry, cfg.prior.nu, backend)?,
    };
    let mut model = MarginalModel::new(
        instance.forward.clone(),
        instance.d.clone(),
        prior,
        Hyperprior::from(&cfg.hyperprior),
    )?;
    if matches!(cfg.problem, ProblemSpec::Zero { .. }) {
        // nothing is observed: the truth is the prior mean
        model = model.with_prior_mean(instance.s_true.clone())?;
    }
    Ok(Setup { instance, model })
}

fn summary(c: MatvecCount) -> MatvecSummary {
    MatvecSummary {
        forward: c.forward,
        adjoint: c.adjoint,
    }
}

fn reconstruction_rows(s_hat: &DVector<f64>, s_true: &DVector<f64>) -> CliResult<Vec<ReconstructionRow>> {
    let re = relative_error(s_true, s_hat)?;
    Ok(s_hat
        .iter()
        .zip(s_true.iter())
        .enumerate()
        .map(|(index, (&s_hat, &s_true))| ReconstructionRow {
            index,
            s_hat,
            s_true,
            relative_error: re,
        })
        .collect())
}

fn iterate_rows(trace: &OptimizeTrace) -> Vec<IterateRow> {
    trace
        .iterates
        .iter()
        .map(|r| IterateRow {
            iteration: r.iteration,
            objective: r.value,
            grad_norm: r.grad_norm,
            func_count: r.func_count,
            theta_1: r.theta[0],
            theta_2: r.theta[1],
            theta_3: r.theta.get(2).copied(),
        })
        .collect()
}

/// Results of `estimate`, before they are written.
#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub theta: ThetaStar,
    pub reconstruction: Vec<ReconstructionRow>,
    pub iterates: Vec<IterateRow>,
}

pub fn run_estimate(cfg: &RunConfig) -> CliResult<EstimateOutput> {
    let Setup { instance, model } = build(cfg)?;
    let opts = cfg.optimize_options();
    let theta0 = HyperParams::new(cfg.prior.theta0.clone())?;
    let start = model.forward.counts();
    let (theta, trace, after_precompute) = if cfg.optimizer.two_param {
        let res = optimize_two_param(&model, &theta0, &opts)?;
        (res.theta, res.trace, Some(summary(res.optimization_matvecs)))
    } else {
        let (theta, trace) = optimize_hyperparams(&model, &theta0, &opts)?;
        (theta, trace, None)
    };
    info!("estimated hyperparameters {:?} ({:?})", theta.as_slice(), trace.reason);
    let s_hat = if cfg.optimizer.exact {
        map_exact(&model, &theta)?
    } else {
        map_reconstruct(&model, &theta, cfg.k, None)?
    };
    let reconstruction = reconstruction_rows(&s_hat, &instance.s_true)?;
    let matvecs = summary(model.forward.counts() - start);
    let last = trace.iterates.last().expect("optimizer records the starting point");
    let theta_star = ThetaStar {
        problem: instance.name.clone(),
        theta: theta.to_vec(),
        objective: last.value,
        converged: trace.converged,
        stop_reason: format!("{:?}", trace.reason),
        iterations: trace.iterations(),
        func_count: trace.func_count,
        k: cfg.k,
        evaluator: if cfg.optimizer.exact { "exact" } else { "gengk" }.into(),
        relative_error: reconstruction.first().map_or(0.0, |r| r.relative_error),
        matvecs,
        matvecs_after_precompute: after_precompute,
        seed: cfg.seed,
    };
    Ok(EstimateOutput {
        theta: theta_star,
        iterates: iterate_rows(&trace),
        reconstruction,
    })
}

fn relative_gap(reference: f64, approx: f64) -> f64 {
    (reference - approx).abs() / reference.abs().max(f64::MIN_POSITIVE)
}

pub fn run_monitor(cfg: &RunConfig) -> CliResult<Vec<ErrorRow>> {
    let Setup { model, .. } = build(cfg)?;
    let theta = HyperParams::new(cfg.prior.theta_eval().to_vec())?;
    let spec = &cfg.monitor;
    let fact = model.factorize(&theta, cfg.monitor_depth())?;
    let noise = model.noise(&theta)?;
    let q = model.prior.covariance(&theta)?;
    let report = monitor(&model.forward, &noise, &q, &fact, spec.n_mc, spec.probe.into(), cfg.seed)?;
    let dense = if model.n() <= spec.dense_cap && model.m() <= spec.dense_cap {
        let exact = objective_exact(&model, &theta)?;
        let hq = dense_hq(&model.forward, &noise, &q, spec.dense_cap)?;
        Some((exact, dense_xi(&hq, &q, &fact)))
    } else {
        None
    };
    (1..=fact.k())
        .map(|k| {
            let approx = objective_gengk(&model, &theta, k, Some(&fact))?;
            let (exact_re, re_logdet, re_quad, abs_error, xi, bound) = match &dense {
                Some((exact, xi)) => {
                    // rounding can push the gap slightly below zero at breakdown
                    let xi_k = xi[k].max(0.0);
                    (
                        Some(relative_gap(exact.value, approx.value)),
                        Some(relative_gap(exact.logdet(), approx.logdet())),
                        Some(relative_gap(exact.quadratic(), approx.quadratic())),
                        Some((exact.value - approx.value).abs()),
                        Some(xi[k]),
                        Some(prop2_bound(xi_k, fact.beta1())?),
                    )
                }
                None => (None, None, None, None, None, None),
            };
            Ok(ErrorRow {
                k,
                exact_re,
                re_logdet,
                re_quad,
                abs_error,
                xi_hat: report.xi_hat[k - 1],
                err_mc: report.err_mc[k - 1],
                xi,
                bound,
            })
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_median<F>(repeats: usize, mut f: F) -> CliResult<f64>
where
    F: FnMut() -> CliResult<()>,
{
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

pub fn run_benchmark(cfg: &RunConfig) -> CliResult<Vec<TimingRow>> {
    let ProblemSpec::Heat { kappa, noise, .. } = cfg.problem else {
        return Err(CliError::Config("benchmark runs on the heat problem".into()));
    };
    let spec = &cfg.benchmark;
    let theta = HyperParams::new(cfg.prior.theta_eval().to_vec())?;
    let mut rows = Vec::with_capacity(spec.sizes.len());
    for &n in &spec.sizes {
        let mut sized = cfg.clone();
        sized.problem = ProblemSpec::Heat { n, kappa, noise };
        let Setup { model, .. } = build(&sized)?;
        let model = model.with_dense_cap(spec.dense_cap);
        let mut counts = MatvecCount::default();
        let gengk_seconds = time_median(spec.repeats, || {
            counts = objective_gengk(&model, &theta, cfg.k, None)?.matvecs;
            Ok(())
        })?;
        let exact_seconds = if n <= spec.dense_cap {
            Some(time_median(spec.exact_repeats, || {
                objective_exact(&model, &theta)?;
                Ok(())
            })?)
        } else {
            None
        };
        info!("n = {n}: gengk {gengk_seconds:.3e} s, exact {exact_seconds:?} s");
        rows.push(TimingRow {
            n,
            exact_seconds,
            gengk_seconds,
            speedup: exact_seconds.map(|e| e / gengk_seconds),
            forward_matvecs: counts.forward,
            adjoint_matvecs: counts.adjoint,
        });
    }
    Ok(rows)
}

pub fn run_reconstruct(cfg: &RunConfig) -> CliResult<Vec<ReconstructionRow>> {
    let Setup { instance, model } = build(cfg)?;
    let theta = HyperParams::new(cfg.prior.theta_eval().to_vec())?;
    let s_hat = if cfg.optimizer.exact {
        map_exact(&model, &theta)?
    } else {
        map_reconstruct(&model, &theta, cfg.k, None)?
    };
    reconstruction_rows(&s_hat, &instance.s_true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Estimate,
    Monitor,
    Benchmark,
    Reconstruct,
}

/// Runs `command` and writes its files into `out`; returns the written paths.
pub fn execute(command: Command, cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let write_dir = || -> CliResult<()> { Ok(std::fs::create_dir_all(out)?) };
    let mut written = Vec::new();
    match command {
        Command::Estimate => {
            let res = run_estimate(cfg)?;
            write_dir()?;
            written.push(out.join(THETA_FILE));
            write_json(&written[0], &res.theta)?;
            written.push(out.join(RECONSTRUCTION_FILE));
            write_csv(&written[1], &res.reconstruction)?;
            written.push(out.join(ITERATES_FILE));
            write_csv(&written[2], &res.iterates)?;
        }
        Command::Monitor => {
            let rows = run_monitor(cfg)?;
            write_dir()?;
            written.push(out.join(ERROR_FILE));
            write_csv(&written[0], &rows)?;
        }
        Command::Benchmark => {
            let rows = run_benchmark(cfg)?;
            write_dir()?;
            written.push(out.join(TIMING_FILE));
            write_csv(&written[0], &rows)?;
        }
        Command::Reconstruct => {
            let rows = run_reconstruct(cfg)?;
            write_dir()?;
            written.push(out.join(RECONSTRUCTION_FILE));
            write_csv(&written[0], &rows)?;
        }
    }
    Ok(written)
}
