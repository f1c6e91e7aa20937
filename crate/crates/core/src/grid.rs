//! Cubic spatial grids on `[-R, R]^d`, node-valued grid functions,
//! trapezoid quadrature and discrete convolution.
//!
//! Node storage is row-major over the axes: axis 0 varies slowest, and
//! along every axis coordinates increase with the index.

use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used to decide that two spacings are the same lattice.
const SPACING_RTOL: f64 = 1e-12;

/// A cubic grid with `points_per_axis^dim` nodes and uniform spacing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    half_width: f64,
    points_per_axis: usize,
    spacing: f64,
}

impl GridSpec {
    /// Builds the grid `[-half_width, half_width]^dim` with `points_per_axis`
    /// nodes per axis.
    pub fn new(dim: usize, half_width: f64, points_per_axis: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidDimension(dim));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidResolution(format!(
                "half_width must be positive and finite, got {half_width}"
            )));
        }
        if points_per_axis < 8 {
            return Err(Error::InvalidResolution(format!(
                "points_per_axis must be at least 8, got {points_per_axis}"
            )));
        }
        Ok(Self {
            dim,
            half_width,
            points_per_axis,
            spacing: 2.0 * half_width / (points_per_axis - 1) as f64,
        })
    }

    /// A small grid with `2 * radius_nodes + 1` nodes per axis centred on the
    /// origin, used for convolution kernels. Not subject to the minimum
    /// resolution of [`GridSpec::new`].
    pub fn centered(dim: usize, spacing: f64, radius_nodes: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidDimension(dim));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidResolution(format!("spacing must be positive, got {spacing}")));
        }
        Ok(Self {
            dim,
            half_width: spacing * radius_nodes as f64,
            points_per_axis: 2 * radius_nodes + 1,
            spacing,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Total node count, `n^dim`.
    pub fn len(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `h^dim`, the volume of an interior cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    /// Whether the origin is a node (odd number of points per axis).
    pub fn has_center_node(&self) -> bool {
        self.points_per_axis % 2 == 1
    }

    /// Coordinate of index `i` along any axis. Symmetric about the origin
    /// bit-for-bit.
    #[inline]
    pub fn axis_coord(&self, i: usize) -> f64 {
        let twice = 2 * i as i64 - (self.points_per_axis as i64 - 1);
        twice as f64 * (0.5 * self.spacing)
    }

    pub fn axis_coords(&self) -> Vec<f64> {
        (0..self.points_per_axis).map(|i| self.axis_coord(i)).collect()
    }

    /// Strides of the flat layout, axis 0 slowest.
    pub fn strides(&self) -> [usize; 3] {
        let n = self.points_per_axis;
        let mut s = [0; 3];
        for a in 0..self.dim {
            s[a] = n.pow((self.dim - 1 - a) as u32);
        }
        s
    }

    #[inline]
    pub fn multi_index(&self, flat: usize) -> [usize; 3] {
        let n = self.points_per_axis;
        let mut idx = [0; 3];
        let mut rest = flat;
        for a in (0..self.dim).rev() {
            idx[a] = rest % n;
            rest /= n;
        }
        idx
    }

    #[inline]
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let n = self.points_per_axis;
        idx[..self.dim].iter().fold(0, |acc, &i| acc * n + i)
    }

    /// Coordinates of node `flat`; entries beyond `dim` are zero.
    #[inline]
    pub fn point(&self, flat: usize) -> [f64; 3] {
        let idx = self.multi_index(flat);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.axis_coord(idx[a]);
        }
        x
    }

    /// Trapezoid weight of node `flat`: `h^d` halved once per boundary axis.
    #[inline]
    pub fn node_weight(&self, flat: usize) -> f64 {
        let idx = self.multi_index(flat);
        let last = self.points_per_axis - 1;
        let mut w = self.cell_volume();
        for &i in &idx[..self.dim] {
            if i == 0 || i == last {
                w *= 0.5;
            }
        }
        w
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.node_weight(i)).collect()
    }

    /// Whether node `flat` lies on a face of the box.
    pub fn is_boundary(&self, flat: usize) -> bool {
        let last = self.points_per_axis - 1;
        self.multi_index(flat)[..self.dim]
            .iter()
            .any(|&i| i == 0 || i == last)
    }

    /// Index of the node nearest to `x` along one axis, clamped into range.
    /// The flag is set when `x` lies outside the boundary cells.
    #[inline]
    pub fn nearest_axis_index(&self, x: f64) -> (usize, bool) {
        let t = (x / self.spacing + 0.5 * (self.points_per_axis - 1) as f64).round();
        if t < 0.0 {
            (0, true)
        } else if t > (self.points_per_axis - 1) as f64 {
            (self.points_per_axis - 1, true)
        } else {
            (t as usize, false)
        }
    }

    /// Nearest node of a point, with a clip flag when the point is outside
    /// the box.
    pub fn nearest_node(&self, x: &[f64]) -> (usize, bool) {
        let mut idx = [0; 3];
        let mut clipped = false;
        for a in 0..self.dim {
            let (i, c) = self.nearest_axis_index(x[a]);
            idx[a] = i;
            clipped |= c;
        }
        (self.flat_index(&idx), clipped)
    }

    /// Same dimension and spacing, so node offsets are commensurate.
    pub fn same_lattice(&self, other: &GridSpec) -> bool {
        self.dim == other.dim
            && (self.spacing - other.spacing).abs() <= SPACING_RTOL * self.spacing.max(other.spacing)
    }

    fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self.dim != other.dim
            || self.points_per_axis != other.points_per_axis
            || !self.same_lattice(other)
        {
            return Err(Error::GridMismatch(format!(
                "dim {} n {} h {} vs dim {} n {} h {}",
                self.dim, self.points_per_axis, self.spacing, other.dim, other.points_per_axis, other.spacing
            )));
        }
        Ok(())
    }

    /// Multilinear interpolation of node values at `x`. Points outside the
    /// box are clamped onto it.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let n = self.points_per_axis;
        let offset = 0.5 * (n - 1) as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..self.dim {
            let t = (x[a] / self.spacing + offset).clamp(0.0, (n - 1) as f64);
            let i = (t.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = t - i as f64;
        }
        let strides = self.strides();
        let origin = self.flat_index(&base);
        let mut acc = 0.0;
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut flat = origin;
            for a in 0..self.dim {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    flat += strides[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * values[flat];
            }
        }
        acc
    }
}

/// What a grid function stands for; densities and tilts must be finite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Density,
    Potential,
    Tilt,
    Field,
}

/// Node values on a grid. Potentials may hold `+inf` (hard walls).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    grid: GridSpec,
    role: Role,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: GridSpec, values: Vec<f64>, role: Role) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if matches!(role, Role::Density | Role::Tilt) {
            if let Some(node) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { node });
            }
        } else if let Some(node) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::NonFiniteValue { node });
        }
        Ok(Self { grid, role, values })
    }

    pub fn from_fn(grid: GridSpec, role: Role, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len())
            .map(|i| {
                let x = grid.point(i);
                f(&x[..grid.dim()])
            })
            .collect();
        Self::new(grid, values, role)
    }

    pub fn constant(grid: GridSpec, role: Role, c: f64) -> Result<Self> {
        Self::new(grid, vec![c; grid.len()], role)
    }

    pub fn zeros(grid: GridSpec, role: Role) -> Self {
        Self {
            grid,
            role,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn with_role(mut self, role: Role) -> Result<Self> {
        self.role = role;
        Self::new(self.grid, self.values, role)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `a * self + b * other` on a common grid.
    pub fn axpby(&self, a: f64, other: &GridFunction, b: f64) -> Result<GridFunction> {
        self.grid.check_same(&other.grid)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        GridFunction::new(self.grid, values, self.role)
    }

    pub fn add_constant(&self, c: f64) -> GridFunction {
        GridFunction {
            grid: self.grid,
            role: self.role,
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }

    /// Multilinear interpolation at an arbitrary point.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(&self.values, x)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_nodes_csv(&self.grid, &self.values, out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("grid function serializes")
    }
}

/// A nonnegative node density on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { node });
        }
        if let Some(node) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "density is negative at node {node}: {}",
                values[node]
            )));
        }
        Ok(Self { grid, values })
    }

    /// Builds and normalizes in one step.
    pub fn normalized(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, values)?.normalize()
    }

    /// Unit point mass at the node nearest to `x`, stored as `1 / w` on that
    /// node where `w` is its quadrature weight.
    pub fn point_mass(grid: GridSpec, x: &[f64]) -> Result<Self> {
        let (node, _) = grid.nearest_node(x);
        let mut values = vec![0.0; grid.len()];
        values[node] = 1.0 / grid.node_weight(node);
        Self::new(grid, values)
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let g = GridFunction::from_fn(grid, Role::Density, f)?;
        Self::normalized(grid, g.into_values())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        weighted_sum(&self.grid, &self.values)
    }

    /// Rescales to unit mass. Already-normalized input is returned unchanged,
    /// so normalization is idempotent bit-for-bit.
    pub fn normalize(&self) -> Result<Self> {
        let m = self.mass();
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::NonPositiveMass(m));
        }
        if (m - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(self.clone());
        }
        Ok(Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v / m).collect(),
        })
    }

    pub fn as_function(&self) -> GridFunction {
        GridFunction {
            grid: self.grid,
            role: Role::Density,
            values: self.values.clone(),
        }
    }

    /// Quadrature L1 distance `∫|ρ - σ|`.
    pub fn l1_distance(&self, other: &DensityField) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        let diff: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .collect();
        Ok(weighted_sum(&self.grid, &diff))
    }

    /// Index of the largest node value.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_nodes_csv(&self.grid, &self.values, out)
    }
}

/// Anything living on a grid as node values.
pub trait NodeValues {
    fn grid(&self) -> &GridSpec;
    fn node_values(&self) -> &[f64];
}

impl NodeValues for GridFunction {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }
    fn node_values(&self) -> &[f64] {
        &self.values
    }
}

impl NodeValues for DensityField {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }
    fn node_values(&self) -> &[f64] {
        &self.values
    }
}

#[inline]
fn weighted_sum(grid: &GridSpec, values: &[f64]) -> f64 {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| grid.node_weight(i) * v)
        .sum()
}

/// Trapezoid-rule integral over the grid box.
pub fn quadrature<F: NodeValues + ?Sized>(f: &F) -> Result<f64> {
    let values = f.node_values();
    if let Some(node) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { node });
    }
    Ok(weighted_sum(f.grid(), values))
}

/// `⟨f, g⟩ = ∫ f g dx` by trapezoid quadrature.
pub fn inner_product<F, G>(f: &F, g: &G) -> Result<f64>
where
    F: NodeValues + ?Sized,
    G: NodeValues + ?Sized,
{
    f.grid().check_same(g.grid())?;
    let grid = f.grid();
    let mut acc = 0.0;
    for (i, (a, b)) in f.node_values().iter().zip(g.node_values()).enumerate() {
        let p = a * b;
        if !p.is_finite() {
            return Err(Error::NonFiniteValue { node: i });
        }
        acc += grid.node_weight(i) * p;
    }
    Ok(acc)
}

fn check_kernel(f: &GridSpec, kernel: &GridSpec) -> Result<usize> {
    if !f.same_lattice(kernel) {
        return Err(Error::GridMismatch(format!(
            "kernel lattice (dim {}, h {}) differs from grid (dim {}, h {})",
            kernel.dim(),
            kernel.spacing(),
            f.dim(),
            f.spacing()
        )));
    }
    if !kernel.has_center_node() {
        return Err(Error::GridMismatch(
            "kernel grid must have an odd number of points (node at the origin)".into(),
        ));
    }
    if kernel.half_width() > f.half_width() * (1.0 + SPACING_RTOL) {
        return Err(Error::KernelTooWide {
            kernel: kernel.half_width(),
            grid: f.half_width(),
        });
    }
    Ok((kernel.points_per_axis() - 1) / 2)
}

/// Discrete convolution `(f ∗ κ)(x_i) = Σ_j w_j f(x_j) κ(x_i - x_j)` with
/// trapezoid weights `w_j`, evaluated on the grid of `f`.
///
/// The kernel lives on its own centred grid with the same spacing (see
/// [`GridSpec::centered`]); offsets outside the kernel grid count as zero.
pub fn convolve(f: &GridFunction, kernel: &GridFunction) -> Result<GridFunction> {
    let m = check_kernel(f.grid(), kernel.grid())?;
    let grid = *f.grid();
    let kgrid = *kernel.grid();
    let dim = grid.dim();
    let n = grid.points_per_axis() as isize;

    let taps: Vec<([isize; 3], f64)> = kernel
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(k, &v)| {
            let idx = kgrid.multi_index(k);
            let mut off = [0isize; 3];
            for a in 0..dim {
                off[a] = idx[a] as isize - m as isize;
            }
            (off, v)
        })
        .collect();

    let mut out = vec![0.0; grid.len()];
    for (j, &fj) in f.values().iter().enumerate() {
        if fj == 0.0 {
            continue;
        }
        let src = grid.node_weight(j) * fj;
        let jdx = grid.multi_index(j);
        'tap: for (off, kv) in &taps {
            let mut t = [0usize; 3];
            for a in 0..dim {
                let i = jdx[a] as isize + off[a];
                if i < 0 || i >= n {
                    continue 'tap;
                }
                t[a] = i as usize;
            }
            out[grid.flat_index(&t)] += src * kv;
        }
    }
    GridFunction::new(grid, out, Role::Field)
}

/// Same result as [`convolve`], computed by zero-padded FFT. Agrees with
/// the direct sum up to transform round-off.
pub fn convolve_spectral(f: &GridFunction, kernel: &GridFunction) -> Result<GridFunction> {
    let m = check_kernel(f.grid(), kernel.grid())?;
    let grid = *f.grid();
    let kgrid = *kernel.grid();
    let dim = grid.dim();
    let n = grid.points_per_axis();
    let len = n + m;
    let total = len.pow(dim as u32);
    let pstride = |a: usize| len.pow((dim - 1 - a) as u32);

    let mut a_buf = vec![Complex::new(0.0, 0.0); total];
    for (j, &fj) in f.values().iter().enumerate() {
        let idx = grid.multi_index(j);
        let p: usize = (0..dim).map(|ax| idx[ax] * pstride(ax)).sum();
        a_buf[p] = Complex::new(grid.node_weight(j) * fj, 0.0);
    }
    let mut b_buf = vec![Complex::new(0.0, 0.0); total];
    for (k, &kv) in kernel.values().iter().enumerate() {
        let idx = kgrid.multi_index(k);
        let p: usize = (0..dim)
            .map(|ax| {
                let off = idx[ax] as isize - m as isize;
                (off.rem_euclid(len as isize) as usize) * pstride(ax)
            })
            .sum();
        b_buf[p] = Complex::new(kv, 0.0);
    }

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    fft_nd(&mut a_buf, len, dim, fwd.as_ref());
    fft_nd(&mut b_buf, len, dim, fwd.as_ref());
    for (x, y) in a_buf.iter_mut().zip(&b_buf) {
        *x *= y;
    }
    fft_nd(&mut a_buf, len, dim, inv.as_ref());
    let scale = 1.0 / total as f64;

    let out: Vec<f64> = (0..grid.len())
        .map(|i| {
            let idx = grid.multi_index(i);
            let p: usize = (0..dim).map(|ax| idx[ax] * pstride(ax)).sum();
            a_buf[p].re * scale
        })
        .collect();
    GridFunction::new(grid, out, Role::Field)
}

fn fft_nd(buf: &mut [Complex<f64>], len: usize, dim: usize, fft: &dyn rustfft::Fft<f64>) {
    let mut line = vec![Complex::new(0.0, 0.0); len];
    for axis in 0..dim {
        let stride = len.pow((dim - 1 - axis) as u32);
        let total = buf.len();
        for start in 0..total {
            // Line starts are the indices whose coordinate along `axis` is 0.
            if (start / stride) % len != 0 {
                continue;
            }
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = buf[start + k * stride];
            }
            fft.process(&mut line);
            for (k, v) in line.iter().enumerate() {
                buf[start + k * stride] = *v;
            }
        }
    }
}

fn write_nodes_csv<W: Write>(grid: &GridSpec, values: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..grid.dim()).map(|a| format!("x{a}")).collect();
    header.push("value".into());
    w.write_record(&header)?;
    for (i, v) in values.iter().enumerate() {
        let x = grid.point(i);
        let mut row: Vec<String> = x[..grid.dim()].iter().map(|c| c.to_string()).collect();
        row.push(v.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
