//! Built-in test problems: the 1D inverse heat equation, random-ray
//! tomography, smooth random phantoms and the relative-norm noise model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::covariance::{Geometry, Grid, MaternKernel};
use crate::error::{Error, Result};
use crate::operators::{CausalToeplitzMap, LinearOperator, MaskedMap, SparseRowsMap};

/// Largest grid for which the dense Karhunen-Loeve phantom is built.
pub const PHANTOM_GRID_CAP: usize = 4096;

const MAX_RAY_ATTEMPTS: usize = 1000;

/// First column of the discretized heat kernel.
///
/// Entry `g` is `h K((g + 1/2) h)` with
/// `K(t) = t^{-3/2} exp(-1/(4 kappa^2 t)) / (2 kappa sqrt(pi))`.
pub fn heat_symbol(n: usize, kappa: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("heat problem needs n >= 2, got {n}")));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::Domain(format!("kappa must be positive, got {kappa}")));
    }
    let h = 1.0 / n as f64;
    Ok((0..n)
        .map(|g| {
            let t = (g as f64 + 0.5) * h;
            h * heat_kernel(t, kappa)
        })
        .collect())
}

/// The continuous kernel as a function of the time gap `t > 0`.
pub fn heat_kernel(t: f64, kappa: f64) -> f64 {
    let c = 1.0 / (2.0 * kappa * std::f64::consts::PI.sqrt());
    c * t.powf(-1.5) * (-1.0 / (4.0 * kappa * kappa * t)).exp()
}

/// Midpoint discretization of the Volterra heat operator on `[0, 1]`.
pub fn heat_1d(n: usize, kappa: f64) -> Result<LinearOperator> {
    Ok(LinearOperator::new(CausalToeplitzMap::new(heat_symbol(n, kappa)?)?))
}

/// The standard smooth-bump solution of the heat test problem, supported on
/// the first half of the interval.
pub fn heat_solution(n: usize) -> DVector<f64> {
    let half = n / 2;
    DVector::from_fn(n, |i, _| {
        if i >= half {
            return 0.0;
        }
        let ti = 20.0 * (i + 1) as f64 / n as f64;
        if ti < 2.0 {
            0.75 * ti * ti / 4.0
        } else if ti < 3.0 {
            0.75 + (ti - 2.0) * (3.0 - ti)
        } else {
            0.75 * (-(ti - 3.0) * 2.0).exp()
        }
    })
}

/// Cell-intersection weights of the line `origin + t * direction` with a
/// `g x g` grid on the unit square, as `(iy * g + ix, length)` pairs.
pub fn ray_weights(g: usize, origin: [f64; 2], direction: [f64; 2]) -> Vec<(usize, f64)> {
    let norm = direction[0].hypot(direction[1]);
    if g == 0 || !(norm > 0.0) {
        return Vec::new();
    }
    let dir = [direction[0] / norm, direction[1] / norm];
    // clip the line to the square
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for ax in 0..2 {
        if dir[ax].abs() < 1e-15 {
            if origin[ax] < 0.0 || origin[ax] > 1.0 {
                return Vec::new();
            }
        } else {
            let a = (0.0 - origin[ax]) / dir[ax];
            let b = (1.0 - origin[ax]) / dir[ax];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    if !(t1 > t0) {
        return Vec::new();
    }
    let mut ts = vec![t0, t1];
    for ax in 0..2 {
        if dir[ax].abs() < 1e-15 {
            continue;
        }
        for k in 0..=g {
            let t = (k as f64 / g as f64 - origin[ax]) / dir[ax];
            if t > t0 && t < t1 {
                ts.push(t);
            }
        }
    }
    ts.sort_by(f64::total_cmp);
    let mut out: Vec<(usize, f64)> = Vec::new();
    for w in ts.windows(2) {
        let len = w[1] - w[0];
        if len <= 1e-14 {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let cell = |ax: usize| {
            let x = origin[ax] + tm * dir[ax];
            ((x * g as f64).floor().max(0.0) as usize).min(g - 1)
        };
        let idx = cell(1) * g + cell(0);
        match out.last_mut() {
            Some((j, l)) if *j == idx => *l += len,
            _ => out.push((idx, len)),
        }
    }
    out
}

/// `n_rays` random straight rays through the unit square discretized on a
/// `g x g` grid. Rays missing the square are redrawn.
pub fn ray_tomo_rows(g: usize, n_rays: usize, seed: u64) -> Result<Vec<Vec<(usize, f64)>>> {
    if g < 4 {
        return Err(Error::InvalidArgument(format!("ray tomography needs g >= 4, got {g}")));
    }
    if n_rays < 1 {
        return Err(Error::InvalidArgument("at least one ray is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_diag = std::f64::consts::FRAC_1_SQRT_2;
    (0..n_rays)
        .map(|_| {
            for _ in 0..MAX_RAY_ATTEMPTS {
                let phi = rng.random_range(0.0..std::f64::consts::PI);
                let p = rng.random_range(-half_diag..half_diag);
                let dir = [phi.cos(), phi.sin()];
                let origin = [0.5 - p * dir[1], 0.5 + p * dir[0]];
                let row = ray_weights(g, origin, dir);
                if !row.is_empty() {
                    return Ok(row);
                }
            }
            Err(Error::Numerical("could not draw a ray through the domain".into()))
        })
        .collect()
}

/// Sparse random-ray tomography operator, `n_rays x g^2`.
pub fn ray_tomo_2d(g: usize, n_rays: usize, seed: u64) -> Result<LinearOperator> {
    let rows = ray_tomo_rows(g, n_rays, seed)?;
    Ok(LinearOperator::new(SparseRowsMap::new(g * g, rows)?))
}

/// Cells of `grid` whose centers lie within `radius` of the domain center.
pub fn disk_mask(grid: &Grid, radius: f64) -> Vec<bool> {
    let cx = 0.5 * grid.nx as f64 * grid.hx;
    let cy = 0.5 * grid.ny as f64 * grid.hy;
    grid.points()
        .iter()
        .map(|p| (p[0] - cx).hypot(p[1] - cy) <= radius)
        .collect()
}

/// Random field from the `truncation` leading Karhunen-Loeve modes of the
/// Matérn covariance on `grid`, zeroed outside `mask`.
pub fn smooth_phantom(
    grid: &Grid,
    kernel: &MaternKernel,
    truncation: usize,
    seed: u64,
    mask: Option<&[bool]>,
) -> Result<DVector<f64>> {
    let n = grid.len();
    if truncation > n {
        return Err(Error::InvalidArgument(format!(
            "truncation {truncation} exceeds the {n} grid points"
        )));
    }
    if n > PHANTOM_GRID_CAP {
        return Err(Error::DenseCapExceeded {
            size: n,
            cap: PHANTOM_GRID_CAP,
        });
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::dims("phantom mask", n, m.len()));
        }
    }
    let mut field = DVector::zeros(n);
    if truncation > 0 {
        let mut cov = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = kernel.eval(grid.distance(i, j))?;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &idx in order.iter().take(truncation) {
            let xi: f64 = rng.sample(StandardNormal);
            let lambda = eig.eigenvalues[idx].max(0.0);
            field.axpy(xi * lambda.sqrt(), &eig.eigenvectors.column(idx), 1.0);
        }
    }
    if let Some(m) = mask {
        for (v, &keep) in field.iter_mut().zip(m) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(field)
}

/// Adds `eta = lambda ||d|| eps / ||eps||` with `eps` standard normal.
/// Returns `(d_clean + eta, eta)`.
pub fn add_noise(
    d_clean: &DVector<f64>,
    lambda_noise: f64,
    seed: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(lambda_noise >= 0.0) || !lambda_noise.is_finite() {
        return Err(Error::Domain(format!("noise level must be nonnegative, got {lambda_noise}")));
    }
    let m = d_clean.len();
    if lambda_noise == 0.0 {
        return Ok((d_clean.clone(), DVector::zeros(m)));
    }
    let dn = d_clean.norm();
    if !(dn > 0.0) {
        return Err(Error::Domain("relative noise is undefined for zero data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eta = &eps * (lambda_noise * dn / eps.norm());
    Ok((d_clean + &eta, eta))
}

/// `||s - s_hat|| / ||s||`.
pub fn relative_error(s_true: &DVector<f64>, s_hat: &DVector<f64>) -> Result<f64> {
    if s_true.len() != s_hat.len() {
        return Err(Error::dims("reconstruction", s_true.len(), s_hat.len()));
    }
    let n = s_true.norm();
    if !(n > 0.0) {
        return Err(Error::Domain("relative error against a zero truth".into()));
    }
    Ok((s_true - s_hat).norm() / n)
}

/// A forward operator together with a ground truth and noisy data.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub forward: LinearOperator,
    pub s_true: DVector<f64>,
    pub d_clean: DVector<f64>,
    pub d: DVector<f64>,
    pub noise_level: f64,
    pub grid: Grid,
    pub seed: u64,
}

impl ProblemInstance {
    pub fn new(
        name: impl Into<String>,
        forward: LinearOperator,
        s_true: DVector<f64>,
        grid: Grid,
        noise_level: f64,
        seed: u64,
    ) -> Result<Self> {
        if grid.len() != forward.ncols() {
            return Err(Error::dims("problem grid", forward.ncols(), grid.len()));
        }
        let d_clean = forward.apply(&s_true)?;
        let (d, _) = add_noise(&d_clean, noise_level, seed)?;
        let inst = ProblemInstance {
            name: name.into(),
            forward,
            s_true,
            d_clean,
            d,
            noise_level,
            grid,
            seed,
        };
        inst.check()?;
        Ok(inst)
    }

    /// Re-verifies the data invariants.
    pub fn check(&self) -> Result<()> {
        let recomputed = self.forward.apply(&self.s_true)?;
        let scale = self.d_clean.norm().max(f64::MIN_POSITIVE);
        if (&recomputed - &self.d_clean).norm() > 1e-12 * scale {
            return Err(Error::Numerical("clean data do not match A s_true".into()));
        }
        let ratio = (&self.d - &self.d_clean).norm() / scale;
        if (ratio - self.noise_level).abs() > 1e-12 * self.noise_level.max(1.0) {
            return Err(Error::Numerical(format!(
                "noise ratio {ratio} differs from level {}",
                self.noise_level
            )));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::Grid(self.grid)
    }

    /// The 1D heat problem with the standard smooth solution.
    pub fn heat(n: usize, kappa: f64, noise_level: f64, seed: u64) -> Result<Self> {
        let a = heat_1d(n, kappa)?;
        Self::new("heat", a, heat_solution(n), Grid::unit_1d(n)?, noise_level, seed)
    }

    /// Random-ray tomography on a `g x g` grid with a Matérn KL phantom.
    /// With `mask_radius`, the operator only sees cells inside the disk and
    /// the phantom vanishes outside it.
    #[allow(clippy::too_many_arguments)]
    pub fn tomography(
        g: usize,
        n_rays: usize,
        phantom_kernel: &MaternKernel,
        truncation: usize,
        mask_radius: Option<f64>,
        noise_level: f64,
        seed: u64,
    ) -> Result<Self> {
        let grid = Grid::unit_2d(g)?;
        let base = ray_tomo_2d(g, n_rays, seed)?;
        let mask = mask_radius.map(|r| disk_mask(&grid, r));
        let phantom = smooth_phantom(
            &grid,
            phantom_kernel,
            truncation,
            seed.wrapping_add(1),
            mask.as_deref(),
        )?;
        let forward = match &mask {
            Some(m) => {
                let kept: Vec<usize> = (0..m.len()).filter(|&i| m[i]).collect();
                LinearOperator::new(MaskedMap::new(base, &kept)?)
            }
            None => base,
        };
        Self::new("tomography", forward, phantom, grid, noise_level, seed.wrapping_add(2))
    }
}
