//! Grid evaluation of `Λ_β(f) = (1/β) log E[exp ∫_0^β f(B_s) ds]` and of the
//! tilted occupation density `ρ_f`, its functional gradient.
//!
//! The forward equation `∂_s u = Δu + f u` is advanced with the Strang
//! step `P = D H D`, where `D = diag(e^{dt f/2})` and `H` is a Crank–Nicolson
//! heat step applied axis by axis. Unknowns are the interior nodes; the
//! boundary carries Dirichlet zero data.
//!
//! `ρ_f` is the exact gradient of the discrete `Λ`: with backward iterates
//! `b_K = 1`, `b_k = P b_{k+1}` and `p_k = b_k u_k / ⟨b_k, u_k⟩`,
//! `∂Λ/∂f(x) = (dt / 2β) Σ_k (p_k(x) + p_{k+1}(x))`. Finite differences of
//! [`cgf`] therefore match `⟨g, ρ_f⟩` to `O(t²)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DensityField, GridFunction, GridSpec};
use crate::paths::{sample_paths, InitialDistribution};
use crate::potentials::WALL_FLOOR;

/// Precomputed LU sweep for the constant tridiagonal system
/// `(1 + 2a) x_i - a (x_{i-1} + x_{i+1}) = r_i`.
#[derive(Clone, Debug)]
struct Thomas {
    a: f64,
    /// `c'_i` of the forward sweep.
    upper: Vec<f64>,
    /// Reciprocal pivots.
    inv_pivot: Vec<f64>,
}

impl Thomas {
    fn new(m: usize, a: f64) -> Self {
        let b = 1.0 + 2.0 * a;
        let mut upper = vec![0.0; m];
        let mut inv_pivot = vec![0.0; m];
        let mut prev = 0.0;
        for i in 0..m {
            let pivot = b + a * prev;
            inv_pivot[i] = 1.0 / pivot;
            upper[i] = -a / pivot;
            prev = upper[i];
        }
        Self { a, upper, inv_pivot }
    }

    /// One Crank–Nicolson step on a line, in place.
    fn step(&self, line: &mut [f64], rhs: &mut [f64]) {
        let m = line.len();
        let a = self.a;
        for i in 0..m {
            let left = if i > 0 { line[i - 1] } else { 0.0 };
            let right = if i + 1 < m { line[i + 1] } else { 0.0 };
            rhs[i] = (1.0 - 2.0 * a) * line[i] + a * (left + right);
        }
        let mut prev = 0.0;
        for i in 0..m {
            prev = (rhs[i] + a * prev) * self.inv_pivot[i];
            rhs[i] = prev;
        }
        line[m - 1] = rhs[m - 1];
        for i in (0..m - 1).rev() {
            line[i] = rhs[i] - self.upper[i] * line[i + 1];
        }
    }
}

/// A prepared Feynman–Kac problem: grid, horizon, step and initial law.
/// Reused across many tilts `f`.
#[derive(Clone, Debug)]
pub struct FkSolver {
    grid: GridSpec,
    beta: f64,
    steps: usize,
    dt: f64,
    /// Interior points per axis.
    m: usize,
    init: Vec<f64>,
    init_log_mass: f64,
    thomas: Thomas,
}

/// Largest admissible PDE step on `grid`.
pub fn max_stable_step(grid: &GridSpec) -> f64 {
    grid.spacing().powi(2) / (4.0 * grid.dim() as f64)
}

impl FkSolver {
    pub fn new(grid: GridSpec, beta: f64, init: &InitialDistribution, dt_pde: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidTimeStep(format!("beta must be positive, got {beta}")));
        }
        if !(dt_pde.is_finite() && dt_pde > 0.0) {
            return Err(Error::InvalidTimeStep(format!("dt_pde must be positive, got {dt_pde}")));
        }
        let max = max_stable_step(&grid);
        if dt_pde > max * (1.0 + 1e-12) {
            return Err(Error::UnstableStep { dt: dt_pde, max });
        }
        let steps = (beta / dt_pde).ceil() as usize;
        let dt = beta / steps as f64;
        let m = grid.points_per_axis() - 2;
        let density = init.density_on_grid(grid)?;
        let solver_grid = Self::interior_map(&grid);
        let cell = grid.cell_volume();
        let init_vec: Vec<f64> = solver_grid.iter().map(|&i| density.values()[i]).collect();
        let mass: f64 = init_vec.iter().sum::<f64>() * cell;
        if !(mass > 0.0) {
            return Err(Error::NonPositiveMass(mass));
        }
        Ok(Self {
            grid,
            beta,
            steps,
            dt,
            m,
            init: init_vec.iter().map(|v| v / mass).collect(),
            init_log_mass: mass.ln(),
            thomas: Thomas::new(m, dt / (2.0 * grid.spacing().powi(2))),
        })
    }

    /// Full-grid flat index of each interior unknown, in row-major order.
    fn interior_map(grid: &GridSpec) -> Vec<usize> {
        (0..grid.len()).filter(|&i| !grid.is_boundary(i)).collect()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn interior_len(&self) -> usize {
        self.m.pow(self.grid.dim() as u32)
    }

    /// `e^{dt f / 2}` at the interior nodes, with `f` floored at `-WALL_FLOOR`.
    fn half_factors(&self, f: &GridFunction) -> Result<Vec<f64>> {
        if !f.grid().same_lattice(&self.grid) || f.grid().len() != self.grid.len() {
            return Err(Error::GridMismatch("tilt grid differs from solver grid".into()));
        }
        let values = f.values();
        Self::interior_map(&self.grid)
            .into_iter()
            .map(|i| {
                let v = values[i];
                if v.is_nan() || v == f64::INFINITY {
                    return Err(Error::NonFiniteValue { node: i });
                }
                Ok((0.5 * self.dt * v.max(-WALL_FLOOR)).exp())
            })
            .collect()
    }

    fn heat(&self, u: &mut [f64], line: &mut [f64], rhs: &mut [f64]) {
        let m = self.m;
        let dim = self.grid.dim();
        let total = u.len();
        for axis in 0..dim {
            let stride = m.pow((dim - 1 - axis) as u32);
            let block = stride * m;
            for start_block in (0..total).step_by(block) {
                for offset in 0..stride {
                    let base = start_block + offset;
                    for (i, l) in line.iter_mut().enumerate() {
                        *l = u[base + i * stride];
                    }
                    self.thomas.step(line, rhs);
                    for (i, l) in line.iter().enumerate() {
                        u[base + i * stride] = *l;
                    }
                }
            }
        }
    }

    /// `u ← D H D u`.
    fn step(&self, u: &mut [f64], d: &[f64], line: &mut [f64], rhs: &mut [f64]) {
        for (x, di) in u.iter_mut().zip(d) {
            *x *= di;
        }
        self.heat(u, line, rhs);
        for (x, di) in u.iter_mut().zip(d) {
            *x *= di;
        }
    }

    /// Rescales `u` to unit quadrature mass and returns the log of the old mass.
    fn renormalize(&self, u: &mut [f64]) -> Result<f64> {
        let mass = u.iter().sum::<f64>() * self.grid.cell_volume();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::NonPositiveMass(mass));
        }
        let inv = 1.0 / mass;
        for x in u.iter_mut() {
            *x *= inv;
        }
        Ok(mass.ln())
    }

    /// Forward solve; returns `log Z` and the normalised terminal field.
    fn forward(&self, d: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut u = self.init.clone();
        let mut log_z = self.init_log_mass;
        let mut line = vec![0.0; self.m];
        let mut rhs = vec![0.0; self.m];
        for _ in 0..self.steps {
            self.step(&mut u, d, &mut line, &mut rhs);
            log_z += self.renormalize(&mut u)?;
        }
        Ok((log_z, u))
    }

    /// `Λ_β(f)`.
    pub fn cgf(&self, f: &GridFunction) -> Result<f64> {
        let d = self.half_factors(f)?;
        Ok(self.forward(&d)?.0 / self.beta)
    }

    /// Forward solution with the terminal field kept.
    pub fn solve(&self, f: &GridFunction) -> Result<FkSolution> {
        let d = self.half_factors(f)?;
        let (log_z, u) = self.forward(&d)?;
        Ok(FkSolution {
            grid: self.grid,
            dt_pde: self.dt,
            steps: self.steps,
            log_z,
            lambda: log_z / self.beta,
            terminal: self.embed(&u)?,
        })
    }

    fn embed(&self, interior: &[f64]) -> Result<DensityField> {
        let mut full = vec![0.0; self.grid.len()];
        for (k, i) in Self::interior_map(&self.grid).into_iter().enumerate() {
            full[i] = interior[k].max(0.0);
        }
        DensityField::new(self.grid, full)
    }

    /// `(Λ_β(f), ρ_f)`, the value and the exact gradient of the discrete
    /// functional, as a density.
    pub fn tilted(&self, f: &GridFunction) -> Result<(f64, DensityField)> {
        let d = self.half_factors(f)?;
        let k_total = self.steps;
        let len = self.interior_len();
        let block = ((k_total + 1) as f64).sqrt().ceil() as usize;
        let mut line = vec![0.0; self.m];
        let mut rhs = vec![0.0; self.m];

        // Forward pass, keeping normalised checkpoints at multiples of `block`.
        let mut checkpoints = Vec::with_capacity(k_total / block + 1);
        let mut u = self.init.clone();
        let mut log_z = self.init_log_mass;
        for k in 0..k_total {
            if k % block == 0 {
                checkpoints.push(u.clone());
            }
            self.step(&mut u, &d, &mut line, &mut rhs);
            log_z += self.renormalize(&mut u)?;
        }
        if k_total % block == 0 {
            checkpoints.push(u.clone());
        }
        let lambda = log_z / self.beta;

        // Backward pass, recomputing each block of forward states on demand.
        let mut grad = vec![0.0; len];
        let mut b = vec![1.0; len];
        let mut cache: Vec<Vec<f64>> = Vec::new();
        let mut cache_start = usize::MAX;
        let half = self.dt / (2.0 * self.beta);
        for k in (0..=k_total).rev() {
            let start = (k / block) * block;
            if start != cache_start {
                cache.clear();
                let mut v = checkpoints[k / block].clone();
                cache.push(v.clone());
                let end = (start + block - 1).min(k_total);
                for _ in start..end {
                    self.step(&mut v, &d, &mut line, &mut rhs);
                    self.renormalize(&mut v)?;
                    cache.push(v.clone());
                }
                cache_start = start;
            }
            let uk = &cache[k - start];
            let pairing: f64 = b.iter().zip(uk).map(|(x, y)| x * y).sum();
            if !(pairing > 0.0 && pairing.is_finite()) {
                return Err(Error::NonPositiveMass(pairing));
            }
            let coef = if k == 0 || k == k_total { half } else { 2.0 * half } / pairing;
            for ((g, bi), ui) in grad.iter_mut().zip(&b).zip(uk) {
                *g += coef * bi * ui;
            }
            if k > 0 {
                self.step(&mut b, &d, &mut line, &mut rhs);
                self.renormalize(&mut b)?;
            }
        }
        let cell = self.grid.cell_volume();
        for g in grad.iter_mut() {
            *g /= cell;
        }
        Ok((lambda, self.embed(&grad)?))
    }
}

/// Forward solution summary.
#[derive(Clone, Debug, PartialEq)]
pub struct FkSolution {
    pub grid: GridSpec,
    pub dt_pde: f64,
    pub steps: usize,
    /// `log Z`, `Z = ∫ u(β, x) dx`.
    pub log_z: f64,
    pub lambda: f64,
    /// `u(β, ·) / Z`.
    pub terminal: DensityField,
}

/// `Λ_β(f) = (1/β) log ∫ u(β, x) dx`.
pub fn cgf(f: &GridFunction, beta: f64, init: &InitialDistribution, grid: &GridSpec, dt_pde: f64) -> Result<f64> {
    FkSolver::new(*grid, beta, init, dt_pde)?.cgf(f)
}

/// The tilted occupation density `ρ_f`.
pub fn tilted_occupation(
    f: &GridFunction,
    beta: f64,
    init: &InitialDistribution,
    grid: &GridSpec,
    dt_pde: f64,
) -> Result<DensityField> {
    Ok(FkSolver::new(*grid, beta, init, dt_pde)?.tilted(f)?.1)
}

/// Monte Carlo `Λ_β(f)` from `m` free paths, with a delta-method standard
/// error. `f` is interpolated multilinearly between nodes.
pub fn cgf_mc(
    f: &GridFunction,
    beta: f64,
    init: &InitialDistribution,
    m: usize,
    dt: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    cgf_mc_with(|x| f.interpolate(x), f.grid().dim(), beta, init, m, dt, seed)
}

/// [`cgf_mc`] for a tilt given pointwise.
pub fn cgf_mc_with<F>(f: F, dim: usize, beta: f64, init: &InitialDistribution, m: usize, dt: f64, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if m < 100 {
        return Err(Error::InvalidParameter(format!("need at least 100 paths, got {m}")));
    }
    let ensemble = sample_paths(m, beta, dt, init, dim, seed, 0)?;
    let w = ensemble.time_weights();
    let actions: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            w.iter()
                .enumerate()
                .map(|(k, wk)| wk * f(ensemble.position(i, k)))
                .sum::<f64>()
        })
        .collect();
    Ok(log_mean_exp(&actions, beta))
}

/// `(1/β) log mean e^{s_i}` and its delta-method standard error.
pub(crate) fn log_mean_exp(actions: &[f64], beta: f64) -> (f64, f64) {
    let m = actions.len() as f64;
    let top = actions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = actions.iter().map(|s| (s - top).exp()).collect();
    let mean = shifted.iter().sum::<f64>() / m;
    let var = shifted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let value = (top + mean.ln()) / beta;
    let se = (var / m).sqrt() / mean / beta;
    (value, se)
}
