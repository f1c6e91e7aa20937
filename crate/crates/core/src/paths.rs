//! Sampling of independent Brownian motions and their normalised occupation
//! measures.
//!
//! Paths use the generator `Δ` convention of the Feynman–Kac pairing with
//! `-Δ + W`: increments over a step `dt` have variance `2·dt` per
//! coordinate, so `X_t` has covariance `2t·I` for a point start.
//!
//! Time integrals along a path use trapezoid weights `w_k` (`dt`, halved at
//! both endpoints, summing to `β`). Occupation measures deposit the same
//! weights, so `β⟨W, μ⟩` and the discrete `∫ W(X_s) ds` agree identically.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, GridSpec};
use crate::potentials::TrapSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDistribution {
    Point { x0: Vec<f64> },
    /// Independent normal coordinates with mean `x0` and standard deviation `s`.
    Gaussian { x0: Vec<f64>, s: f64 },
    /// Uniform on the cube `[-r0, r0]^d`.
    UniformBox { r0: f64 },
}

impl InitialDistribution {
    pub fn origin(dim: usize) -> Self {
        InitialDistribution::Point { x0: vec![0.0; dim] }
    }

    /// Checks parameters against the dimension and, if given, that the
    /// support lies strictly inside `{W < ∞}`.
    pub fn validate(&self, dim: usize, trap: Option<&TrapSpec>) -> Result<()> {
        match self {
            InitialDistribution::Point { x0 } | InitialDistribution::Gaussian { x0, .. } => {
                if x0.len() != dim {
                    return Err(Error::InvalidParameter(format!(
                        "initial point has {} coordinates, expected {dim}",
                        x0.len()
                    )));
                }
                if x0.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidParameter("initial point is not finite".into()));
                }
            }
            InitialDistribution::UniformBox { r0 } => {
                if !(r0.is_finite() && *r0 > 0.0) {
                    return Err(Error::InvalidParameter(format!("uniform box half-width {r0}")));
                }
            }
        }
        if let InitialDistribution::Gaussian { s, .. } = self {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::InvalidParameter(format!("gaussian width {s}")));
            }
        }
        if let Some(TrapSpec::Box { r_box }) = trap {
            let inside = match self {
                InitialDistribution::Point { x0 } => x0.iter().all(|c| c.abs() < *r_box),
                InitialDistribution::Gaussian { .. } => false,
                InitialDistribution::UniformBox { r0 } => r0 < r_box,
            };
            if !inside {
                return Err(Error::InfeasibleTrap);
            }
        } else if let Some(trap) = trap {
            if let InitialDistribution::Point { x0 } = self {
                if !trap.admits(x0) {
                    return Err(Error::InfeasibleTrap);
                }
            }
        }
        Ok(())
    }

    fn sample_into<R: rand::Rng>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            InitialDistribution::Point { x0 } => out.copy_from_slice(x0),
            InitialDistribution::Gaussian { x0, s } => {
                for (o, c) in out.iter_mut().zip(x0) {
                    let z: f64 = StandardNormal.sample(rng);
                    *o = c + s * z;
                }
            }
            InitialDistribution::UniformBox { r0 } => {
                let u = Uniform::new_inclusive(-r0, *r0).expect("validated width");
                for o in out.iter_mut() {
                    *o = u.sample(rng);
                }
            }
        }
    }

    /// The initial law as a node density: a point becomes a one-cell mass,
    /// the others are sampled at nodes and normalized. Boundary nodes are
    /// left empty so the density is compatible with Dirichlet conditions.
    pub fn density_on_grid(&self, grid: GridSpec) -> Result<DensityField> {
        let dim = grid.dim();
        self.validate(dim, None)?;
        match self {
            InitialDistribution::Point { x0 } => {
                let (node, clipped) = grid.nearest_node(x0);
                if clipped || grid.is_boundary(node) {
                    return Err(Error::InvalidParameter(
                        "initial point is outside the grid interior".into(),
                    ));
                }
                DensityField::point_mass(grid, x0)
            }
            InitialDistribution::Gaussian { x0, s } => {
                let values = (0..grid.len())
                    .map(|i| {
                        if grid.is_boundary(i) {
                            return 0.0;
                        }
                        let x = grid.point(i);
                        let r2: f64 = (0..dim).map(|a| (x[a] - x0[a]).powi(2)).sum();
                        (-0.5 * r2 / (s * s)).exp()
                    })
                    .collect();
                DensityField::normalized(grid, values)
            }
            InitialDistribution::UniformBox { r0 } => {
                let values = (0..grid.len())
                    .map(|i| {
                        let x = grid.point(i);
                        let inside = !grid.is_boundary(i) && x[..dim].iter().all(|c| c.abs() <= *r0);
                        inside as u8 as f64
                    })
                    .collect();
                DensityField::normalized(grid, values)
            }
        }
    }
}

/// Trapezoid weights on `steps + 1` equally spaced times: `dt`, halved at
/// the two endpoints.
pub fn time_weights(steps: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![dt; steps + 1];
    w[0] = 0.5 * dt;
    w[steps] = 0.5 * dt;
    w
}

/// `N` discretised paths on `[0, β]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    n_paths: usize,
    beta: f64,
    dt: f64,
    steps: usize,
    dim: usize,
    seed: u64,
    replica_id: u64,
    /// `[path][step][axis]`, flattened.
    positions: Vec<f64>,
}

/// Deterministic key for the stream of one path.
fn path_rng(seed: u64, replica_id: u64, path: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replica_id.to_le_bytes());
    key[16..24].copy_from_slice(&path.to_le_bytes());
    key[24..].copy_from_slice(b"brownian");
    ChaCha8Rng::from_seed(key)
}

/// Number of steps for horizon `beta` and requested step `dt`.
pub fn step_count(beta: f64, dt: f64) -> Result<usize> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidTimeStep(format!("beta must be positive, got {beta}")));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidTimeStep(format!("dt must be positive, got {dt}")));
    }
    if dt > beta / 16.0 * (1.0 + 1e-12) {
        return Err(Error::InvalidTimeStep(format!(
            "dt = {dt} exceeds beta/16 = {}",
            beta / 16.0
        )));
    }
    Ok(((beta / dt).round() as usize).max(16))
}

/// Samples `n` independent paths with Euler increments
/// `X_{k+1} = X_k + sqrt(2 dt) ξ_k`. The step is adjusted to `β / round(β/dt)`.
pub fn sample_paths(
    n: usize,
    beta: f64,
    dt: f64,
    init: &InitialDistribution,
    dim: usize,
    seed: u64,
    replica_id: u64,
) -> Result<PathEnsemble> {
    if n == 0 {
        return Err(Error::InvalidParameter("ensemble needs at least one path".into()));
    }
    if !(1..=3).contains(&dim) {
        return Err(Error::InvalidDimension(dim));
    }
    init.validate(dim, None)?;
    let steps = step_count(beta, dt)?;
    let dt = beta / steps as f64;
    let scale = (2.0 * dt).sqrt();
    let stride = (steps + 1) * dim;
    let mut positions = vec![0.0; n * stride];
    for (i, path) in positions.chunks_exact_mut(stride).enumerate() {
        let mut rng = path_rng(seed, replica_id, i as u64);
        init.sample_into(&mut rng, &mut path[..dim]);
        for k in 0..steps {
            let (done, rest) = path.split_at_mut((k + 1) * dim);
            let prev = &done[k * dim..];
            for a in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                rest[a] = prev[a] + scale * z;
            }
        }
    }
    Ok(PathEnsemble {
        n_paths: n,
        beta,
        dt,
        steps,
        dim,
        seed,
        replica_id,
        positions,
    })
}

impl PathEnsemble {
    /// An ensemble from explicit positions `[path][step][axis]`, for frozen
    /// or hand-built paths.
    pub fn from_positions(n: usize, beta: f64, steps: usize, dim: usize, positions: Vec<f64>) -> Result<Self> {
        if n == 0 || steps == 0 {
            return Err(Error::InvalidParameter("need at least one path and one step".into()));
        }
        if positions.len() != n * (steps + 1) * dim {
            return Err(Error::InvalidParameter(format!(
                "expected {} coordinates, got {}",
                n * (steps + 1) * dim,
                positions.len()
            )));
        }
        Ok(Self {
            n_paths: n,
            beta,
            dt: beta / steps as f64,
            steps,
            dim,
            seed: 0,
            replica_id: 0,
            positions,
        })
    }

    /// Paths that sit still at the given points for the whole horizon.
    pub fn frozen(points: &[Vec<f64>], beta: f64, steps: usize) -> Result<Self> {
        let dim = points.first().map_or(0, |p| p.len());
        let mut positions = Vec::with_capacity(points.len() * (steps + 1) * dim);
        for p in points {
            for _ in 0..=steps {
                positions.extend_from_slice(p);
            }
        }
        Self::from_positions(points.len(), beta, steps, dim, positions)
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replica_id(&self) -> u64 {
        self.replica_id
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn time_weights(&self) -> Vec<f64> {
        time_weights(self.steps, self.dt)
    }

    /// All positions of path `i`, `[step][axis]`.
    #[inline]
    pub fn path(&self, i: usize) -> &[f64] {
        let stride = (self.steps + 1) * self.dim;
        &self.positions[i * stride..(i + 1) * stride]
    }

    #[inline]
    pub fn position(&self, i: usize, k: usize) -> &[f64] {
        let p = self.path(i);
        &p[k * self.dim..(k + 1) * self.dim]
    }

    /// The same ensemble with paths reordered: new path `j` is old `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_paths {
            return Err(Error::InvalidParameter("permutation length".into()));
        }
        let mut positions = Vec::with_capacity(self.positions.len());
        for &p in perm {
            if p >= self.n_paths {
                return Err(Error::IndexOutOfRange { index: p, len: self.n_paths });
            }
            positions.extend_from_slice(self.path(p));
        }
        Ok(Self { positions, ..self.clone() })
    }

    /// Per-path, per-axis nearest-node indices on `grid`, and the number of
    /// positions that fell outside the box.
    pub(crate) fn node_indices(&self, i: usize, grid: &GridSpec) -> (Vec<[usize; 3]>, usize) {
        let mut clipped = 0;
        let nodes = (0..=self.steps)
            .map(|k| {
                let x = self.position(i, k);
                let mut idx = [0usize; 3];
                let mut c = false;
                for a in 0..self.dim {
                    let (j, out) = grid.nearest_axis_index(x[a]);
                    idx[a] = j;
                    c |= out;
                }
                clipped += c as usize;
                idx
            })
            .collect();
        (nodes, clipped)
    }

    /// Adds `scale · w_k / β` at the node of each `X_k` of path `i` (masses,
    /// not densities). Returns the number of clipped positions.
    pub(crate) fn deposit_masses(&self, i: usize, grid: &GridSpec, scale: f64, out: &mut [f64]) -> usize {
        let w = self.time_weights();
        let mut clipped = 0;
        for (k, wk) in w.iter().enumerate() {
            let (node, c) = grid.nearest_node(self.position(i, k));
            clipped += c as usize;
            out[node] += scale * wk / self.beta;
        }
        clipped
    }

    /// CSV rows `replica,path,step,x0[,x1[,x2]]`.
    pub fn write_csv<W: Write>(&self, out: W, with_header: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if with_header {
            let mut header = vec!["replica".to_string(), "path".into(), "step".into()];
            header.extend((0..self.dim).map(|a| format!("x{a}")));
            w.write_record(&header)?;
        }
        for i in 0..self.n_paths {
            for k in 0..=self.steps {
                let mut row = vec![self.replica_id.to_string(), i.to_string(), k.to_string()];
                row.extend(self.position(i, k).iter().map(|c| c.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// The normalised occupation measure of one path as a node density.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupationMeasure {
    pub density: DensityField,
    pub path_index: usize,
    pub seed: u64,
    pub replica_id: u64,
    /// Positions that fell outside the grid box and were deposited on the
    /// nearest boundary node.
    pub clipped: usize,
}

fn masses_to_density(grid: GridSpec, mut masses: Vec<f64>) -> Result<DensityField> {
    for (i, m) in masses.iter_mut().enumerate() {
        *m /= grid.node_weight(i);
    }
    DensityField::new(grid, masses)
}

/// Time-trapezoid deposition of path `i` onto `grid`: node masses `w_k / β`
/// divided by the node's quadrature weight.
pub fn occupation_measure(ensemble: &PathEnsemble, path_index: usize, grid: &GridSpec) -> Result<OccupationMeasure> {
    if path_index >= ensemble.n_paths {
        return Err(Error::IndexOutOfRange {
            index: path_index,
            len: ensemble.n_paths,
        });
    }
    if grid.dim() != ensemble.dim {
        return Err(Error::GridMismatch(format!(
            "grid dim {} vs ensemble dim {}",
            grid.dim(),
            ensemble.dim
        )));
    }
    let mut masses = vec![0.0; grid.len()];
    let clipped = ensemble.deposit_masses(path_index, grid, 1.0, &mut masses);
    Ok(OccupationMeasure {
        density: masses_to_density(*grid, masses)?,
        path_index,
        seed: ensemble.seed,
        replica_id: ensemble.replica_id,
        clipped,
    })
}

/// `μ̄ = (1/N) Σ_i μ^{(i)}` on `grid`.
pub fn mean_occupation(ensemble: &PathEnsemble, grid: &GridSpec) -> Result<DensityField> {
    if grid.dim() != ensemble.dim {
        return Err(Error::GridMismatch(format!(
            "grid dim {} vs ensemble dim {}",
            grid.dim(),
            ensemble.dim
        )));
    }
    let mut masses = vec![0.0; grid.len()];
    let scale = 1.0 / ensemble.n_paths as f64;
    for i in 0..ensemble.n_paths {
        ensemble.deposit_masses(i, grid, scale, &mut masses);
    }
    masses_to_density(*grid, masses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_start_is_exact() {
        let e = sample_paths(1, 1.0, 1.0 / 64.0, &InitialDistribution::origin(2), 2, 3, 0).unwrap();
        assert_eq!(e.position(0, 0), &[0.0, 0.0]);
        assert_eq!(e.steps(), 64);
    }

    #[test]
    fn invalid_steps_rejected() {
        let init = InitialDistribution::origin(1);
        assert!(matches!(sample_paths(1, 1.0, 0.0, &init, 1, 0, 0), Err(Error::InvalidTimeStep(_))));
        assert!(matches!(sample_paths(1, 1.0, 0.1, &init, 1, 0, 0), Err(Error::InvalidTimeStep(_))));
        assert!(sample_paths(1, 1.0, 1.0 / 16.0, &init, 1, 0, 0).is_ok());
    }

    #[test]
    fn same_seed_same_bytes() {
        let init = InitialDistribution::Gaussian { x0: vec![0.5, -0.5], s: 0.3 };
        let a = sample_paths(4, 0.5, 0.01, &init, 2, 99, 7).unwrap();
        let b = sample_paths(4, 0.5, 0.01, &init, 2, 99, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_paths(4, 0.5, 0.01, &init, 2, 99, 8).unwrap();
        assert_ne!(a.positions(), c.positions());
        // Path streams do not depend on how many paths are drawn.
        let d = sample_paths(2, 0.5, 0.01, &init, 2, 99, 7).unwrap();
        assert_eq!(d.path(1), a.path(1));
    }

    #[test]
    fn endpoint_variance_is_two_beta() {
        let m = 100_000;
        let e = sample_paths(m, 1.0, 1.0 / 16.0, &InitialDistribution::origin(1), 1, 2024, 0).unwrap();
        let ends: Vec<f64> = (0..m).map(|i| e.position(i, e.steps())[0]).collect();
        let mean = ends.iter().sum::<f64>() / m as f64;
        let var = ends.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let se = 2.0 * (2.0 / (m - 1) as f64).sqrt();
        assert!((var - 2.0).abs() < 3.0 * se, "variance {var}, se {se}");
    }

    #[test]
    fn endpoint_characteristic_function() {
        // X_β ~ N(0, 2β): E cos(θX) = exp(-θ^2 β).
        let m = 100_000;
        let beta = 1.0;
        let e = sample_paths(m, beta, beta / 16.0, &InitialDistribution::origin(1), 1, 77, 0).unwrap();
        for theta in [0.2, 0.5, 0.8, 1.1, 1.5] {
            let vals: Vec<f64> = (0..m).map(|i| (theta * e.position(i, e.steps())[0]).cos()).collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            let se = (var / m as f64).sqrt();
            let exact = (-theta * theta * beta).exp();
            assert!((mean - exact).abs() < 4.0 * se, "theta {theta}: {mean} vs {exact}");
        }
    }

    #[test]
    fn frozen_path_is_a_unit_point_mass() {
        let grid = GridSpec::new(2, 2.0, 21).unwrap();
        let e = PathEnsemble::frozen(&[vec![0.4, -0.2]], 1.0, 32).unwrap();
        let occ = occupation_measure(&e, 0, &grid).unwrap();
        let nonzero: Vec<usize> = (0..grid.len()).filter(|&i| occ.density.values()[i] > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!((occ.density.values()[nonzero[0]] - 1.0 / grid.cell_volume()).abs() < 1e-10);
        assert!((occ.density.mass() - 1.0).abs() < 1e-12);
        assert_eq!(occ.clipped, 0);
    }

    #[test]
    fn occupation_errors_and_mass() {
        let grid = GridSpec::new(1, 1.0, 11).unwrap();
        let e = sample_paths(3, 1.0, 1.0 / 64.0, &InitialDistribution::origin(1), 1, 5, 0).unwrap();
        assert!(matches!(occupation_measure(&e, 3, &grid), Err(Error::IndexOutOfRange { .. })));
        for i in 0..3 {
            let occ = occupation_measure(&e, i, &grid).unwrap();
            // Paths leave this narrow box; clipped mass still counts.
            assert!((occ.density.mass() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_occupation_examples() {
        let grid = GridSpec::new(2, 3.0, 31).unwrap();
        let e = sample_paths(1, 0.5, 0.01, &InitialDistribution::origin(2), 2, 1, 0).unwrap();
        let mean = mean_occupation(&e, &grid).unwrap();
        let one = occupation_measure(&e, 0, &grid).unwrap();
        assert_eq!(mean.values(), one.density.values());

        let twice = PathEnsemble::from_positions(2, 0.5, e.steps(), 2, [e.path(0), e.path(0)].concat()).unwrap();
        let m2 = mean_occupation(&twice, &grid).unwrap();
        for (a, b) in m2.values().iter().zip(one.density.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let e = sample_paths(8, 0.5, 0.01, &InitialDistribution::origin(2), 2, 9, 0).unwrap();
        assert!((mean_occupation(&e, &grid).unwrap().mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn occupation_is_permutation_equivariant() {
        let grid = GridSpec::new(1, 4.0, 41).unwrap();
        let e = sample_paths(4, 1.0, 1.0 / 32.0, &InitialDistribution::origin(1), 1, 11, 0).unwrap();
        let perm = [2, 0, 3, 1];
        let p = e.permuted(&perm).unwrap();
        for (j, &old) in perm.iter().enumerate() {
            assert_eq!(
                occupation_measure(&p, j, &grid).unwrap().density,
                occupation_measure(&e, old, &grid).unwrap().density
            );
        }
        assert_eq!(mean_occupation(&p, &grid).unwrap().mass(), mean_occupation(&e, &grid).unwrap().mass());
    }

    #[test]
    fn origin_occupation_matches_heat_kernel() {
        // E[occupation density at 0] ≈ (1/β)∫_0^β (4πs)^{-1/2} ds = 1/sqrt(πβ).
        let beta = 0.25;
        let grid = GridSpec::new(1, 5.0, 201).unwrap();
        let m = 20_000;
        let e = sample_paths(m, beta, beta / 256.0, &InitialDistribution::origin(1), 1, 4242, 0).unwrap();
        let mean = mean_occupation(&e, &grid).unwrap();
        let at_origin = mean.values()[100];
        let oracle = heat_kernel_time_average(beta);
        assert!(((at_origin - oracle) / oracle).abs() < 0.05, "{at_origin} vs {oracle}");
    }

    /// Midpoint quadrature of `(1/β)∫_0^β (4πs)^{-1/2} ds` after the
    /// substitution `s = u^2`, which removes the endpoint singularity.
    fn heat_kernel_time_average(beta: f64) -> f64 {
        let n = 10_000;
        let top = beta.sqrt();
        let du = top / n as f64;
        let integral: f64 = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) * du;
                2.0 * u / (4.0 * std::f64::consts::PI * u * u).sqrt() * du
            })
            .sum();
        integral / beta
    }

    #[test]
    fn clip_rate_small_for_wide_boxes() {
        let beta: f64 = 1.0;
        let grid = GridSpec::new(2, 6.0 * beta.sqrt(), 61).unwrap();
        let m = 10_000;
        let e = sample_paths(m, beta, beta / 32.0, &InitialDistribution::origin(2), 2, 31, 0).unwrap();
        let clipped_paths = (0..m)
            .filter(|&i| occupation_measure(&e, i, &grid).unwrap().clipped > 0)
            .count();
        assert!((clipped_paths as f64) / (m as f64) < 1e-3, "{clipped_paths} clipped");
    }

    #[test]
    fn init_validation_against_box() {
        let b = TrapSpec::Box { r_box: 1.0 };
        assert!(InitialDistribution::Point { x0: vec![0.5] }.validate(1, Some(&b)).is_ok());
        assert_eq!(
            InitialDistribution::Point { x0: vec![1.5] }.validate(1, Some(&b)),
            Err(Error::InfeasibleTrap)
        );
        assert_eq!(
            InitialDistribution::UniformBox { r0: 1.0 }.validate(1, Some(&b)),
            Err(Error::InfeasibleTrap)
        );
        assert!(InitialDistribution::UniformBox { r0: 0.9 }.validate(2, Some(&b)).is_ok());
    }

    #[test]
    fn path_dump_has_one_row_per_node() {
        let e = sample_paths(2, 1.0, 1.0 / 16.0, &InitialDistribution::origin(2), 2, 0, 3).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 17);
        assert!(text.starts_with("replica,path,step,x0,x1"));
    }
}
