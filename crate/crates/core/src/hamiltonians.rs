//! Trap and pair Hamiltonians of a path ensemble, and intersection local
//! times of path pairs with their mollified versions.
//!
//! All time integrals use the trapezoid weights of the ensemble. Pair sums
//! run in fixed `(i, j)` order so results are bit-stable under threading.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{convolve, inner_product, DensityField, GridFunction, GridSpec};
use crate::paths::{occupation_measure, time_weights, PathEnsemble};
use crate::potentials::{eval_trap, PairSpec, RadialPotential, RescaledPair, TrapSpec};

/// `Σ_i Σ_k w_k W(X^{(i)}_k)`; `+∞` once any position hits a hard wall.
pub fn trap_energy(ensemble: &PathEnsemble, trap: &TrapSpec) -> f64 {
    let w = ensemble.time_weights();
    let mut total = 0.0;
    for i in 0..ensemble.n_paths() {
        for (k, wk) in w.iter().enumerate() {
            let value = eval_trap(trap, ensemble.position(i, k));
            if value.is_infinite() {
                return f64::INFINITY;
            }
            total += wk * value;
        }
    }
    total
}

/// `∫_0^β W(X^{(i)}_s) ds` for one path.
pub fn path_trap_integral(ensemble: &PathEnsemble, i: usize, trap: &TrapSpec) -> f64 {
    let w = ensemble.time_weights();
    let mut total = 0.0;
    for (k, wk) in w.iter().enumerate() {
        let value = eval_trap(trap, ensemble.position(i, k));
        if value.is_infinite() {
            return f64::INFINITY;
        }
        total += wk * value;
    }
    total
}

fn check_stride(ensemble: &PathEnsemble, stride: usize) -> Result<()> {
    if stride == 0 || ensemble.steps() % stride != 0 {
        return Err(Error::InvalidParameter(format!(
            "stride {stride} must divide the {} time steps",
            ensemble.steps()
        )));
    }
    Ok(())
}

/// `Σ_{k,l} w_k w_l g(|X^{(i)}_k - X^{(j)}_l|)` on every `stride`-th time node.
fn pair_double_sum(ensemble: &PathEnsemble, i: usize, j: usize, stride: usize, g: &(dyn Fn(f64) -> f64 + Sync)) -> f64 {
    let dim = ensemble.dim();
    let coarse = ensemble.steps() / stride;
    let w = time_weights(coarse, ensemble.dt() * stride as f64);
    let mut total = 0.0;
    for (k, wk) in w.iter().enumerate() {
        let x = ensemble.position(i, k * stride);
        let mut row = 0.0;
        for (l, wl) in w.iter().enumerate() {
            let y = ensemble.position(j, l * stride);
            let r2: f64 = (0..dim).map(|a| (x[a] - y[a]).powi(2)).sum();
            row += wl * g(r2.sqrt());
        }
        total += wk * row;
    }
    total
}

/// `Σ_{i<j} (1/β) Σ_{k,l} w_k w_l g(|X^{(i)}_k - X^{(j)}_l|)`.
fn pair_sum(ensemble: &PathEnsemble, stride: usize, g: &(dyn Fn(f64) -> f64 + Sync)) -> Result<f64> {
    let n = ensemble.n_paths();
    if n < 2 {
        return Err(Error::InvalidParameter("pair energies need N >= 2".into()));
    }
    check_stride(ensemble, stride)?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let terms: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| pair_double_sum(ensemble, i, j, stride, g))
        .collect();
    Ok(terms.iter().sum::<f64>() / ensemble.beta())
}

/// `K = Σ_{i<j} (1/β) ∫∫ v(|X^{(i)}_s - X^{(j)}_t|) ds dt`.
pub fn pair_energy(ensemble: &PathEnsemble, v: &PairSpec) -> Result<f64> {
    pair_energy_strided(ensemble, v, 1)
}

/// [`pair_energy`] with both time axes subsampled by `stride`.
pub fn pair_energy_strided(ensemble: &PathEnsemble, v: &PairSpec, stride: usize) -> Result<f64> {
    check_dims(ensemble, v.dim)?;
    pair_sum(ensemble, stride, &|r| v.radial(r))
}

/// Pair energy for any radial potential, e.g. a [`RescaledPair`].
pub fn pair_energy_with<P: RadialPotential + ?Sized>(ensemble: &PathEnsemble, v: &P) -> Result<f64> {
    check_dims(ensemble, v.dim())?;
    pair_sum(ensemble, 1, &|r| v.radial(r))
}

/// `K^(N) = (1/N) Σ_{i<j} (1/β) ∫∫ N^d v(N|X^{(i)}_s - X^{(j)}_t|) ds dt`.
pub fn scaled_pair_energy(ensemble: &PathEnsemble, v: &PairSpec) -> Result<f64> {
    scaled_pair_energy_strided(ensemble, v, 1)
}

pub fn scaled_pair_energy_strided(ensemble: &PathEnsemble, v: &PairSpec, stride: usize) -> Result<f64> {
    check_dims(ensemble, v.dim)?;
    if ensemble.dim() == 1 {
        return Err(Error::UnsupportedDimension(1));
    }
    let n = ensemble.n_paths();
    let scaled = RescaledPair { base: *v, n };
    Ok(pair_sum(ensemble, stride, &|r| scaled.eval_dirac_scaled(r))? / n as f64)
}

fn check_dims(ensemble: &PathEnsemble, dim: usize) -> Result<()> {
    if ensemble.dim() != dim {
        return Err(Error::GridMismatch(format!(
            "potential dim {dim} vs ensemble dim {}",
            ensemble.dim()
        )));
    }
    Ok(())
}

/// Smooth bump `κ_ε(x) ∝ exp(-1/(1 - |x/ε|²))` on a centred grid, with
/// quadrature mass 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Mollifier {
    epsilon: f64,
    kernel: GridFunction,
}

impl Mollifier {
    /// Needs `ε ≥ 2h`.
    pub fn new(dim: usize, epsilon: f64, spacing: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 2.0 * spacing * (1.0 - 1e-12)) {
            return Err(Error::MollifierUnderResolved {
                epsilon,
                min: 2.0 * spacing,
            });
        }
        let radius = (epsilon / spacing).ceil() as usize;
        let grid = GridSpec::centered(dim, spacing, radius)?;
        let raw: Vec<f64> = (0..grid.len())
            .map(|i| {
                let x = grid.point(i);
                let s2: f64 = x[..dim].iter().map(|c| (c / epsilon).powi(2)).sum();
                if s2 < 1.0 {
                    (-1.0 / (1.0 - s2)).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let density = DensityField::normalized(grid, raw)?;
        Ok(Self {
            epsilon,
            kernel: density.as_function(),
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn kernel(&self) -> &GridFunction {
        &self.kernel
    }

    pub fn max_value(&self) -> f64 {
        self.kernel.max_abs()
    }

    /// `(κ ∗ κ)(u)` for a node offset `u` (in lattice units), as the
    /// discrete self-correlation `h^d Σ_v κ(v) κ(v + u)`.
    fn self_correlation(&self) -> (Vec<f64>, usize) {
        let grid = self.kernel.grid();
        let dim = grid.dim();
        let m = (grid.points_per_axis() - 1) / 2;
        let out_grid = GridSpec::centered(dim, grid.spacing(), 2 * m).expect("valid lattice");
        let mut out = vec![0.0; out_grid.len()];
        let vals = self.kernel.values();
        let cell = grid.cell_volume();
        for (a, &ka) in vals.iter().enumerate() {
            if ka == 0.0 {
                continue;
            }
            let ia = grid.multi_index(a);
            for (b, &kb) in vals.iter().enumerate() {
                if kb == 0.0 {
                    continue;
                }
                let ib = grid.multi_index(b);
                let mut t = [0usize; 3];
                for ax in 0..dim {
                    t[ax] = (ib[ax] + 2 * m) - ia[ax];
                }
                out[out_grid.flat_index(&t)] += cell * ka * kb;
            }
        }
        (out, 2 * m)
    }

    /// `Σ_x w_x κ(x)²`, the value of `κ ∗ κ` at the origin.
    pub fn square_mass(&self) -> f64 {
        let cell = self.kernel.grid().cell_volume();
        self.kernel.values().iter().map(|k| cell * k * k).sum()
    }
}

/// Histogram density of the difference process `X^{(i)} - X^{(j)}` for one
/// pair of paths.
#[derive(Clone, Debug, PartialEq)]
pub struct IltField {
    pub density: DensityField,
    pub i: usize,
    pub j: usize,
    pub seed: u64,
    pub replica_id: u64,
}

/// Lattice on which [`ilt_grid`] deposits: centred, same spacing as the
/// occupation grid, wide enough for every node difference.
pub fn ilt_lattice(grid: &GridSpec) -> Result<GridSpec> {
    GridSpec::centered(grid.dim(), grid.spacing(), grid.points_per_axis() - 1)
}

fn check_pair(ensemble: &PathEnsemble, i: usize, j: usize) -> Result<()> {
    let n = ensemble.n_paths();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, len: n });
        }
    }
    Ok(())
}

/// Node masses of the difference histogram: `w_k w_l / β²` at the lattice
/// offset between the occupation nodes of `X^{(i)}_k` and `X^{(j)}_l`.
fn ilt_masses(ensemble: &PathEnsemble, i: usize, j: usize, grid: &GridSpec, lattice: &GridSpec) -> Vec<f64> {
    let dim = grid.dim();
    let shift = grid.points_per_axis() - 1;
    let beta2 = ensemble.beta() * ensemble.beta();
    let w = ensemble.time_weights();
    let (ni, _) = ensemble.node_indices(i, grid);
    let (nj, _) = ensemble.node_indices(j, grid);
    let mut masses = vec![0.0; lattice.len()];
    for (k, a) in ni.iter().enumerate() {
        for (l, b) in nj.iter().enumerate() {
            let mut t = [0usize; 3];
            for ax in 0..dim {
                t[ax] = a[ax] + shift - b[ax];
            }
            masses[lattice.flat_index(&t)] += w[k] * w[l] / beta2;
        }
    }
    masses
}

/// Intersection local time histogram of the pair `(i, j)`: total mass 1.
/// Positions are first snapped to the nodes of `grid`, so the histogram is
/// the exact correlation of the two discrete occupation measures.
pub fn ilt_grid(ensemble: &PathEnsemble, i: usize, j: usize, grid: &GridSpec) -> Result<IltField> {
    check_pair(ensemble, i, j)?;
    if i == j {
        return Err(Error::InvalidParameter("intersection local time needs i != j".into()));
    }
    check_ilt_dims(ensemble, grid)?;
    let lattice = ilt_lattice(grid)?;
    let mut masses = ilt_masses(ensemble, i, j, grid, &lattice);
    for (u, m) in masses.iter_mut().enumerate() {
        *m /= lattice.node_weight(u);
    }
    Ok(IltField {
        density: DensityField::new(lattice, masses)?,
        i,
        j,
        seed: ensemble.seed(),
        replica_id: ensemble.replica_id(),
    })
}

fn check_ilt_dims(ensemble: &PathEnsemble, grid: &GridSpec) -> Result<()> {
    if !(2..=3).contains(&ensemble.dim()) {
        return Err(Error::UnsupportedDimension(ensemble.dim()));
    }
    if grid.dim() != ensemble.dim() {
        return Err(Error::GridMismatch(format!(
            "grid dim {} vs ensemble dim {}",
            grid.dim(),
            ensemble.dim()
        )));
    }
    Ok(())
}

/// `⟨μ^{(i)} ∗ κ_ε, μ^{(j)} ∗ κ_ε⟩` on `grid`.
pub fn mollified_ilt_zero(ensemble: &PathEnsemble, i: usize, j: usize, epsilon: f64, grid: &GridSpec) -> Result<f64> {
    check_pair(ensemble, i, j)?;
    if i == j {
        return Err(Error::InvalidParameter(
            "use mollified_ilt_diagonal for the self-pairing".into(),
        ));
    }
    mollified_pairing(ensemble, i, j, epsilon, grid)
}

/// The self-pairing `⟨μ^{(i)} ∗ κ_ε, μ^{(i)} ∗ κ_ε⟩`, bounded by `max κ_ε`.
pub fn mollified_ilt_diagonal(ensemble: &PathEnsemble, i: usize, epsilon: f64, grid: &GridSpec) -> Result<f64> {
    check_pair(ensemble, i, i)?;
    mollified_pairing(ensemble, i, i, epsilon, grid)
}

fn mollified_pairing(ensemble: &PathEnsemble, i: usize, j: usize, epsilon: f64, grid: &GridSpec) -> Result<f64> {
    check_ilt_dims(ensemble, grid)?;
    let kappa = Mollifier::new(grid.dim(), epsilon, grid.spacing())?;
    let smooth = |idx: usize| -> Result<GridFunction> {
        let occ = occupation_measure(ensemble, idx, grid)?;
        convolve(&occ.density.as_function(), kappa.kernel())
    };
    let a = smooth(i)?;
    if i == j {
        return inner_product(&a, &a);
    }
    let b = smooth(j)?;
    inner_product(&a, &b)
}

/// `⟨L^{(i,j)}, (κ_ε ∗ κ_ε)(-·)⟩`: the same quantity as
/// [`mollified_ilt_zero`], with the histogram formed first.
pub fn ilt_against_mollifier(ilt: &IltField, mollifier: &Mollifier) -> Result<f64> {
    let lattice = *ilt.density.grid();
    let kgrid = *mollifier.kernel().grid();
    if !lattice.same_lattice(&kgrid) {
        return Err(Error::GridMismatch("mollifier and histogram spacing differ".into()));
    }
    let dim = lattice.dim();
    let (corr, radius) = mollifier.self_correlation();
    let cgrid = GridSpec::centered(dim, kgrid.spacing(), radius)?;
    let centre = (lattice.points_per_axis() - 1) / 2;
    let mut total = 0.0;
    for (u, &l) in ilt.density.values().iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let idx = lattice.multi_index(u);
        let mut t = [0usize; 3];
        let mut inside = true;
        for ax in 0..dim {
            // Offset -u on the correlation grid.
            let off = centre as isize - idx[ax] as isize;
            if off.unsigned_abs() > radius {
                inside = false;
                break;
            }
            t[ax] = (off + radius as isize) as usize;
        }
        if inside {
            total += lattice.node_weight(u) * l * corr[cgrid.flat_index(&t)];
        }
    }
    Ok(total)
}

/// The rescaled pair energy recomputed from pair histograms at scale `1/N`,
/// `Nβ ∫ v(x) (1/N²) Σ_{i<j} L^{(i,j)}(x/N) dx`, next to the direct value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeuristicBridge {
    pub direct: f64,
    pub via_histogram: f64,
    pub relative_gap: f64,
}

/// Diagnostic only: at scale `1/N` the histogram is coarse, so the gap
/// measures discretisation rather than a model error.
pub fn heuristic_bridge(ensemble: &PathEnsemble, v: &PairSpec, grid: &GridSpec) -> Result<HeuristicBridge> {
    let direct = scaled_pair_energy(ensemble, v)?;
    check_ilt_dims(ensemble, grid)?;
    let n = ensemble.n_paths();
    let scaled = RescaledPair { base: *v, n };
    let lattice = ilt_lattice(grid)?;
    let kernel: Vec<f64> = (0..lattice.len())
        .map(|u| {
            let x = lattice.point(u);
            let r = x[..lattice.dim()].iter().map(|c| c * c).sum::<f64>().sqrt();
            scaled.eval_dirac_scaled(r)
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let terms: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let masses = ilt_masses(ensemble, i, j, grid, &lattice);
            masses.iter().zip(&kernel).map(|(m, k)| m * k).sum::<f64>()
        })
        .collect();
    let via_histogram = ensemble.beta() / n as f64 * terms.iter().sum::<f64>();
    let relative_gap = if direct != 0.0 {
        (via_histogram - direct) / direct
    } else {
        via_histogram
    };
    Ok(HeuristicBridge {
        direct,
        via_histogram,
        relative_gap,
    })
}
