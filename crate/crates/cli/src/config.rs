//! Run configuration, read from TOML and validated before any computation.

use std::path::Path;

use krylov_eb::covariance::{CovBackend, MaternKernel};
use krylov_eb::estimate::{Evaluator, OptimizeOptions, Parameterization};
use krylov_eb::marginal::{HyperParams, Hyperprior};
use krylov_eb::monitor::ProbeKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub hyperprior: HyperpriorSpec,
    /// Bidiagonalization depth.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub monitor: MonitorSpec,
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    #[serde(default = "default_out")]
    pub output_dir: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    20
}

fn default_out() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemSpec {
    Heat {
        n: usize,
        #[serde(default = "one")]
        kappa: f64,
        #[serde(default = "two_percent")]
        noise: f64,
    },
    Tomography {
        /// Grid side.
        grid: usize,
        rays: usize,
        #[serde(default = "two_percent")]
        noise: f64,
        /// Matérn smoothness, standard deviation and length of the phantom.
        #[serde(default = "phantom_default")]
        phantom: [f64; 3],
        #[serde(default)]
        truncation: Option<usize>,
        #[serde(default)]
        mask_radius: Option<f64>,
    },
    /// `A = 0` with a constant truth equal to the prior mean.
    Zero {
        m: usize,
        n: usize,
        #[serde(default = "one")]
        value: f64,
        #[serde(default)]
        noise: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn two_percent() -> f64 {
    0.02
}

fn phantom_default() -> [f64; 3] {
    [1.5, 1.0, 0.5]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendSpec {
    Dense,
    #[default]
    Fft,
}

impl From<BackendSpec> for CovBackend {
    fn from(b: BackendSpec) -> Self {
        match b {
            BackendSpec::Dense => CovBackend::Dense,
            BackendSpec::Fft => CovBackend::Fft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default)]
    pub backend: BackendSpec,
    /// Fixes the correlation length; the hyperparameters become
    /// `(noise variance, prior std)`.
    #[serde(default)]
    pub ell: Option<f64>,
    /// Starting point of the optimizer.
    pub theta0: Vec<f64>,
    /// Hyperparameters for `monitor` and `reconstruct`; defaults to `theta0`.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
}

fn default_nu() -> f64 {
    1.5
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            nu: default_nu(),
            backend: BackendSpec::Fft,
            ell: None,
            theta0: vec![1e-4, 1.0, 0.1],
            theta: None,
        }
    }
}

impl PriorSpec {
    pub fn num_params(&self) -> usize {
        if self.ell.is_some() {
            2
        } else {
            3
        }
    }

    pub fn theta_eval(&self) -> &[f64] {
        self.theta.as_deref().unwrap_or(&self.theta0)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HyperpriorSpec {
    #[default]
    Flat,
    Gamma { gamma: f64 },
}

impl From<&HyperpriorSpec> for Hyperprior {
    fn from(h: &HyperpriorSpec) -> Self {
        match *h {
            HyperpriorSpec::Flat => Hyperprior::Flat,
            HyperpriorSpec::Gamma { gamma } => Hyperprior::Gamma { gamma },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub ftol: f64,
    pub log_parameterization: bool,
    /// Use the dense objective instead of the bidiagonalization.
    pub exact: bool,
    /// Precompute one factorization and rescale it (requires `prior.ell`).
    pub two_param: bool,
    pub memory: usize,
    pub bounds: Option<Vec<[f64; 2]>>,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let o = OptimizeOptions::default();
        OptimizerSpec {
            max_iters: o.max_iters,
            grad_tol: o.grad_tol,
            ftol: o.ftol,
            log_parameterization: true,
            exact: false,
            two_param: false,
            memory: o.memory,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbeSpec {
    #[default]
    Gaussian,
    Rademacher,
    Exhaustive,
}

impl From<ProbeSpec> for ProbeKind {
    fn from(p: ProbeSpec) -> Self {
        match p {
            ProbeSpec::Gaussian => ProbeKind::Gaussian,
            ProbeSpec::Rademacher => ProbeKind::Rademacher,
            ProbeSpec::Exhaustive => ProbeKind::Exhaustive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorSpec {
    /// Deepest factorization examined; defaults to `k`.
    pub k_max: Option<usize>,
    pub n_mc: usize,
    pub probe: ProbeSpec,
    /// Largest problem for which the dense reference columns are filled in.
    pub dense_cap: usize,
}

impl Default for MonitorSpec {
    fn default() -> Self {
        MonitorSpec {
            k_max: None,
            n_mc: 10,
            probe: ProbeSpec::Gaussian,
            dense_cap: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    /// Problem sizes; the problem kind must be `heat`.
    pub sizes: Vec<usize>,
    /// Timed repetitions per path; the median is reported.
    pub repeats: usize,
    /// Repetitions of the dense path, which dominates the run time.
    pub exact_repeats: usize,
    /// Largest size at which the dense path is timed.
    pub dense_cap: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            sizes: vec![256, 512, 1024],
            repeats: 5,
            exact_repeats: 1,
            dense_cap: 4096,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Number of unknowns of the configured problem.
    pub fn unknowns(&self) -> usize {
        match self.problem {
            ProblemSpec::Heat { n, .. } => n,
            ProblemSpec::Tomography { grid, .. } => grid * grid,
            ProblemSpec::Zero { n, .. } => n,
        }
    }

    /// Number of data.
    pub fn data_len(&self) -> usize {
        match self.problem {
            ProblemSpec::Heat { n, .. } => n,
            ProblemSpec::Tomography { rays, .. } => rays,
            ProblemSpec::Zero { m, .. } => m,
        }
    }

    /// Checks every field that can be checked without building the problem.
    pub fn validate(&self) -> CliResult<()> {
        match &self.problem {
            ProblemSpec::Heat { n, kappa, noise } => {
                if *n < 2 {
                    return Err(invalid("heat problem needs n >= 2"));
                }
                positive("kappa", *kappa)?;
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(invalid(format!("noise level must be nonnegative, got {noise}")));
                }
            }
            ProblemSpec::Tomography {
                grid,
                rays,
                noise,
                phantom,
                truncation,
                mask_radius,
            } => {
                if *grid < 4 || *rays < 1 {
                    return Err(invalid("tomography needs grid >= 4 and at least one ray"));
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(invalid(format!("noise level must be nonnegative, got {noise}")));
                }
                MaternKernel::from_std(phantom[0], phantom[1], phantom[2])
                    .map_err(|e| invalid(format!("phantom kernel: {e}")))?;
                if let Some(t) = truncation {
                    if *t < 1 || *t > grid * grid {
                        return Err(invalid(format!("phantom truncation {t} out of range")));
                    }
                }
                if let Some(r) = mask_radius {
                    positive("mask radius", *r)?;
                }
            }
            ProblemSpec::Zero { m, n, value, noise } => {
                if *m < 1 || *n < 1 {
                    return Err(invalid("zero problem needs positive dimensions"));
                }
                if !value.is_finite() {
                    return Err(invalid("zero problem value must be finite"));
                }
                if *noise != 0.0 {
                    return Err(invalid("the zero problem has no signal to scale noise by"));
                }
            }
        }
        positive("Matérn smoothness", self.prior.nu)?;
        if let Some(ell) = self.prior.ell {
            positive("prior.ell", ell)?;
        }
        let p = self.prior.num_params();
        for (name, theta) in [("theta0", Some(&self.prior.theta0)), ("theta", self.prior.theta.as_ref())] {
            if let Some(theta) = theta {
                if theta.len() != p {
                    return Err(invalid(format!(
                        "prior.{name} needs {p} entries, got {}",
                        theta.len()
                    )));
                }
                HyperParams::new(theta.clone()).map_err(|e| invalid(format!("prior.{name}: {e}")))?;
            }
        }
        Hyperprior::from(&self.hyperprior)
            .validate()
            .map_err(|e| invalid(format!("hyperprior: {e}")))?;
        let depth_cap = self.unknowns().min(self.data_len());
        if self.k < 1 || self.k > depth_cap {
            return Err(invalid(format!("k must lie in 1..={depth_cap}, got {}", self.k)));
        }
        let o = &self.optimizer;
        if !(o.grad_tol >= 0.0) || !(o.ftol >= 0.0) || o.memory < 1 {
            return Err(invalid("optimizer tolerances must be nonnegative and memory positive"));
        }
        if let Some(b) = &o.bounds {
            if b.len() != p {
                return Err(invalid(format!("optimizer.bounds needs {p} pairs, got {}", b.len())));
            }
            if b.iter().any(|[lo, hi]| !(*lo > 0.0) || !(hi >= lo) || !hi.is_finite()) {
                return Err(invalid("optimizer bounds must satisfy 0 < lo <= hi < inf"));
            }
        }
        if o.two_param && self.prior.ell.is_none() {
            return Err(invalid("optimizer.two_param requires prior.ell"));
        }
        if o.two_param && o.exact {
            return Err(invalid("optimizer.two_param and optimizer.exact are exclusive"));
        }
        let mo = &self.monitor;
        let k_max = self.monitor_depth();
        if k_max < 1 || k_max > depth_cap {
            return Err(invalid(format!("monitor.k_max must lie in 1..={depth_cap}")));
        }
        if mo.n_mc < 1 && mo.probe != ProbeSpec::Exhaustive {
            return Err(invalid("monitor.n_mc must be positive"));
        }
        let b = &self.benchmark;
        if b.sizes.is_empty() || b.sizes.iter().any(|&n| n < 2 || n < self.k) || b.repeats < 1 || b.exact_repeats < 1 {
            return Err(invalid("benchmark sizes must be at least max(2, k) and repeats positive"));
        }
        Ok(())
    }

    pub fn monitor_depth(&self) -> usize {
        self.monitor.k_max.unwrap_or(self.k)
    }

    pub fn optimize_options(&self) -> OptimizeOptions {
        let o = &self.optimizer;
        OptimizeOptions {
            k: self.k,
            max_iters: o.max_iters,
            grad_tol: o.grad_tol,
            ftol: o.ftol,
            bounds: o.bounds.as_ref().map(|b| b.iter().map(|[lo, hi]| (*lo, *hi)).collect()),
            parameterization: if o.log_parameterization {
                Parameterization::Log
            } else {
                Parameterization::Linear
            },
            evaluator: if o.exact { Evaluator::Exact } else { Evaluator::GenGk },
            memory: o.memory,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAT: &str = r#"
k = 22
seed = 3
[problem]
kind = "heat"
n = 64
[prior]
theta0 = [1e-4, 1.0, 0.1]
"#;

    #[test]
    fn parses_minimal_heat() {
        let cfg = RunConfig::from_toml_str(HEAT).unwrap();
        assert_eq!(cfg.k, 22);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.problem, ProblemSpec::Heat { n: 64, kappa: 1.0, noise: 0.02 });
        assert_eq!(cfg.hyperprior, HyperpriorSpec::Flat);
        assert_eq!(cfg.optimize_options().k, 22);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = HEAT.replace("n = 64", "n = 64\nsize = 3");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(CliError::Config(_))));
        let text = format!("{HEAT}\n[optimizer]\nmaxiter = 3\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text = format!("bogus = 1\n{HEAT}");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn semantic_errors_rejected() {
        for bad in [
            HEAT.replace("k = 22", "k = 65"),
            HEAT.replace("[1e-4, 1.0, 0.1]", "[1e-4, 1.0]"),
            HEAT.replace("[1e-4, 1.0, 0.1]", "[-1e-4, 1.0, 0.1]"),
            HEAT.replace("n = 64", "n = 64\nkappa = 0.0"),
            format!("{HEAT}\n[hyperprior]\nkind = \"gamma\"\ngamma = -1.0\n"),
            format!("{HEAT}\n[optimizer]\ntwo_param = true\n"),
        ] {
            assert!(RunConfig::from_toml_str(&bad).is_err(), "accepted:\n{bad}");
        }
    }
}
