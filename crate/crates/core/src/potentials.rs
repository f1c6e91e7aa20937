//! Trap potentials `W`, pair interactions `v`, their integrals and the
//! `N`-dependent rescaling `v_N(r) = N^{d-1} v(N r)`.
//!
//! Hard walls are `f64::INFINITY`, never a large finite number.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, GridSpec, Role};

/// Finite stand-in for `+inf` when a wall enters an exponent or a tilt.
pub const WALL_FLOOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TrapSpec {
    /// `W(x) = w |x|^2`
    Harmonic { w: f64 },
    /// `W(x) = w |x|^4`
    Quartic { w: f64 },
    /// `W = 0` in the open cube of half-width `r_box`, `+inf` elsewhere.
    Box { r_box: f64 },
}

impl TrapSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TrapSpec::Harmonic { w } | TrapSpec::Quartic { w } => w.is_finite() && w >= 0.0,
            TrapSpec::Box { r_box } => r_box.is_finite() && r_box > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad trap parameters {self:?}")))
        }
    }

    pub fn has_wall(&self) -> bool {
        matches!(self, TrapSpec::Box { .. })
    }

    /// Whether `x` lies in `{W < ∞}`.
    pub fn admits(&self, x: &[f64]) -> bool {
        eval_trap(self, x).is_finite()
    }
}

/// `W(x)`; `+inf` only for the box family outside the box.
#[inline]
pub fn eval_trap(spec: &TrapSpec, x: &[f64]) -> f64 {
    match *spec {
        TrapSpec::Harmonic { w } => w * x.iter().map(|c| c * c).sum::<f64>(),
        TrapSpec::Quartic { w } => {
            let r2: f64 = x.iter().map(|c| c * c).sum();
            w * r2 * r2
        }
        TrapSpec::Box { r_box } => {
            if x.iter().all(|c| c.abs() < r_box) {
                0.0
            } else {
                f64::INFINITY
            }
        }
    }
}

/// The trap sampled on a grid (role `Potential`, may hold `+inf`).
pub fn trap_on_grid(spec: &TrapSpec, grid: GridSpec) -> GridFunction {
    GridFunction::from_fn(grid, Role::Potential, |x| eval_trap(spec, x))
        .expect("trap values are never NaN")
}

/// The trap sampled on a grid with walls replaced by [`WALL_FLOOR`].
pub fn trap_on_grid_floored(spec: &TrapSpec, grid: GridSpec) -> GridFunction {
    GridFunction::from_fn(grid, Role::Potential, |x| eval_trap(spec, x).min(WALL_FLOOR))
        .expect("floored trap values are finite")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PairFamily {
    /// `v(r) = c exp(-r^2 / sigma^2)`
    Gaussian { c: f64, sigma: f64 },
    /// `v(r) = c` for `r <= r0`, zero beyond.
    Ball { c: f64, r0: f64 },
}

/// A pair interaction together with the space dimension its integrals
/// refer to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub family: PairFamily,
    pub dim: usize,
}

impl PairSpec {
    pub fn gaussian(c: f64, sigma: f64, dim: usize) -> Result<Self> {
        Self::new(PairFamily::Gaussian { c, sigma }, dim)
    }

    pub fn ball(c: f64, r0: f64, dim: usize) -> Result<Self> {
        Self::new(PairFamily::Ball { c, r0 }, dim)
    }

    /// `c = 0` is accepted; it switches the interaction off.
    pub fn new(family: PairFamily, dim: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidDimension(dim));
        }
        let ok = match family {
            PairFamily::Gaussian { c, sigma } => c.is_finite() && c >= 0.0 && sigma.is_finite() && sigma > 0.0,
            PairFamily::Ball { c, r0 } => c.is_finite() && c >= 0.0 && r0.is_finite() && r0 > 0.0,
        };
        if !ok {
            return Err(Error::InvalidParameter(format!("bad pair parameters {family:?}")));
        }
        Ok(Self { family, dim })
    }

    pub fn strength(&self) -> f64 {
        match self.family {
            PairFamily::Gaussian { c, .. } | PairFamily::Ball { c, .. } => c,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.strength() == 0.0
    }

    /// Radius beyond which `v` is zero (ball) or below `c·e^{-36}` (Gaussian).
    pub fn range(&self) -> f64 {
        match self.family {
            PairFamily::Gaussian { sigma, .. } => 6.0 * sigma,
            PairFamily::Ball { r0, .. } => r0,
        }
    }

    #[inline]
    pub(crate) fn value(&self, r: f64) -> f64 {
        match self.family {
            PairFamily::Gaussian { c, sigma } => c * (-(r * r) / (sigma * sigma)).exp(),
            PairFamily::Ball { c, r0 } => {
                if r <= r0 {
                    c
                } else {
                    0.0
                }
            }
        }
    }

    /// `∫_{R^d} v(|x|) dx` in closed form.
    pub fn full_integral(&self) -> f64 {
        let d = self.dim as i32;
        match self.family {
            PairFamily::Gaussian { c, sigma } => c * (PI * sigma * sigma).powf(d as f64 / 2.0),
            PairFamily::Ball { c, r0 } => c * unit_ball_volume(self.dim) * r0.powi(d),
        }
    }

    /// `∫_{R^d} v(|x|) dx` by composite Simpson quadrature in the radius.
    pub fn full_integral_quadrature(&self) -> f64 {
        let d = self.dim;
        let upper = match self.family {
            PairFamily::Gaussian { sigma, .. } => 12.0 * sigma,
            PairFamily::Ball { r0, .. } => r0,
        };
        let surface = unit_sphere_area(d);
        surface * simpson(|r| self.value(r) * r.powi(d as i32 - 1), 0.0, upper, 20_000)
    }
}

fn unit_ball_volume(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => PI,
        3 => 4.0 * PI / 3.0,
        _ => unreachable!("dimension validated at construction"),
    }
}

fn unit_sphere_area(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!("dimension validated at construction"),
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// `v(r)`.
pub fn eval_pair(spec: &PairSpec, r: f64) -> Result<f64> {
    if r < 0.0 || r.is_nan() {
        return Err(Error::NegativeRadius(r));
    }
    Ok(spec.value(r))
}

/// `α(v) = (1/8π) ∫ v(|y|) dy`, closed form. Defined for `d ∈ {2, 3}`.
pub fn alpha_of_v(spec: &PairSpec) -> Result<f64> {
    if !(2..=3).contains(&spec.dim) {
        return Err(Error::UnsupportedDimension(spec.dim));
    }
    Ok(spec.full_integral() / (8.0 * PI))
}

/// Radial-quadrature counterpart of [`alpha_of_v`].
pub fn alpha_of_v_quadrature(spec: &PairSpec) -> Result<f64> {
    if !(2..=3).contains(&spec.dim) {
        return Err(Error::UnsupportedDimension(spec.dim));
    }
    Ok(spec.full_integral_quadrature() / (8.0 * PI))
}

/// `v_N(r) = N^{d-1} v(N r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescaledPair {
    pub base: PairSpec,
    pub n: usize,
}

impl RescaledPair {
    pub fn dim(&self) -> usize {
        self.base.dim
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        let n = self.n as f64;
        n.powi(self.base.dim as i32 - 1) * self.base.value(n * r)
    }

    /// `N^d v(N r)`, the kernel whose integral equals `∫ v`.
    #[inline]
    pub fn eval_dirac_scaled(&self, r: f64) -> f64 {
        let n = self.n as f64;
        n.powi(self.base.dim as i32) * self.base.value(n * r)
    }

    pub fn range(&self) -> f64 {
        self.base.range() / self.n as f64
    }

    /// `∫ N^d v(N|x|) dx` by radial Simpson quadrature on the rescaled
    /// support.
    pub fn dirac_scaled_integral_quadrature(&self) -> f64 {
        let d = self.base.dim;
        let upper = match self.base.family {
            PairFamily::Gaussian { sigma, .. } => 12.0 * sigma,
            PairFamily::Ball { r0, .. } => r0,
        } / self.n as f64;
        unit_sphere_area(d) * simpson(|r| self.eval_dirac_scaled(r) * r.powi(d as i32 - 1), 0.0, upper, 20_000)
    }
}

pub fn rescale_pair(spec: &PairSpec, n: usize) -> Result<RescaledPair> {
    if n == 0 {
        return Err(Error::InvalidParameter("rescaling needs N >= 1".into()));
    }
    Ok(RescaledPair { base: *spec, n })
}

/// Something that evaluates a radial interaction `v(r)`.
pub trait RadialPotential: Sync {
    fn radial(&self, r: f64) -> f64;
    fn dim(&self) -> usize;
    /// Support radius (or effective range).
    fn support(&self) -> f64;
}

impl RadialPotential for PairSpec {
    fn radial(&self, r: f64) -> f64 {
        self.value(r)
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn support(&self) -> f64 {
        self.range()
    }
}

impl RadialPotential for RescaledPair {
    fn radial(&self, r: f64) -> f64 {
        self.eval(r)
    }
    fn dim(&self) -> usize {
        self.base.dim
    }
    fn support(&self) -> f64 {
        self.range()
    }
}

/// Cell-averaged kernel `v(|x|)` on a centred grid with the given spacing,
/// each node carrying the mean of `v` over its cell (`sub^d` samples).
/// Cell averaging keeps the kernel mass close to `∫ v` for discontinuous
/// profiles.
pub fn radial_kernel<P: RadialPotential + ?Sized>(v: &P, spacing: f64, sub: usize) -> Result<GridFunction> {
    let dim = v.dim();
    let radius_nodes = (v.support() / spacing).ceil() as usize + 1;
    let grid = GridSpec::centered(dim, spacing, radius_nodes)?;
    let offsets: Vec<f64> = (0..sub)
        .map(|k| ((k as f64 + 0.5) / sub as f64 - 0.5) * spacing)
        .collect();
    let per_cell = sub.pow(dim as u32);
    let values = (0..grid.len())
        .map(|i| {
            let x = grid.point(i);
            let mut acc = 0.0;
            for s in 0..per_cell {
                let mut r2 = 0.0;
                let mut rest = s;
                for xa in x.iter().take(dim) {
                    let o = offsets[rest % sub];
                    rest /= sub;
                    r2 += (xa + o).powi(2);
                }
                acc += v.radial(r2.sqrt());
            }
            acc / per_cell as f64
        })
        .collect();
    GridFunction::new(grid, values, Role::Field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trap_examples() {
        let h = TrapSpec::Harmonic { w: 1.0 };
        assert_eq!(eval_trap(&h, &[0.0]), 0.0);
        assert_eq!(eval_trap(&h, &[1.0, 1.0]), 2.0);
        let b = TrapSpec::Box { r_box: 2.0 };
        assert_eq!(eval_trap(&b, &[3.0, 0.0]), f64::INFINITY);
        assert_eq!(eval_trap(&b, &[1.9, -1.9]), 0.0);
        assert_eq!(eval_trap(&b, &[2.0, 0.0]), f64::INFINITY);
        let q = TrapSpec::Quartic { w: 0.5 };
        assert_eq!(eval_trap(&q, &[1.0, 1.0]), 2.0);
    }

    #[test]
    fn pair_examples() {
        let ball = PairSpec::ball(1.0, 1.0, 3).unwrap();
        assert_eq!(eval_pair(&ball, 0.5).unwrap(), 1.0);
        assert_eq!(eval_pair(&ball, 2.0).unwrap(), 0.0);
        let g = PairSpec::gaussian(2.0, 1.0, 3).unwrap();
        assert_eq!(eval_pair(&g, 0.0).unwrap(), 2.0);
        assert_eq!(eval_pair(&g, -0.1), Err(Error::NegativeRadius(-0.1)));
    }

    #[test]
    fn alpha_examples() {
        let ball3 = PairSpec::ball(1.0, 1.0, 3).unwrap();
        assert!((alpha_of_v(&ball3).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        let ball2 = PairSpec::ball(1.0, 1.0, 2).unwrap();
        assert!((alpha_of_v(&ball2).unwrap() - 1.0 / 8.0).abs() < 1e-15);
        let g3 = PairSpec::gaussian(1.0, 1.0, 3).unwrap();
        let expected = PI.sqrt() / 8.0;
        assert!((alpha_of_v(&g3).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.2216).abs() < 1e-4);
        let g1 = PairSpec::gaussian(1.0, 1.0, 1).unwrap();
        assert_eq!(alpha_of_v(&g1), Err(Error::UnsupportedDimension(1)));
    }

    #[test]
    fn alpha_analytic_matches_quadrature() {
        for dim in 2..=3 {
            for spec in [
                PairSpec::ball(1.0, 1.0, dim).unwrap(),
                PairSpec::ball(2.5, 0.3, dim).unwrap(),
                PairSpec::gaussian(1.0, 1.0, dim).unwrap(),
                PairSpec::gaussian(0.7, 2.2, dim).unwrap(),
            ] {
                let a = alpha_of_v(&spec).unwrap();
                let q = alpha_of_v_quadrature(&spec).unwrap();
                assert!(((a - q) / a).abs() < 1e-6, "{spec:?}: {a} vs {q}");
            }
        }
    }

    #[test]
    fn rescale_examples() {
        let ball = PairSpec::ball(1.0, 1.0, 3).unwrap();
        let one = rescale_pair(&ball, 1).unwrap();
        for r in [0.0, 0.3, 0.99, 1.0, 1.5] {
            assert_eq!(one.eval(r), ball.value(r));
        }
        let two = rescale_pair(&ball, 2).unwrap();
        assert_eq!(two.eval(0.4), 4.0);
        assert_eq!(two.eval(0.6), 0.0);
        assert!(rescale_pair(&ball, 0).is_err());
    }

    #[test]
    fn rescaling_preserves_born_integral() {
        for dim in 2..=3 {
            for spec in [PairSpec::ball(1.0, 1.0, dim).unwrap(), PairSpec::gaussian(1.5, 0.8, dim).unwrap()] {
                let target = 8.0 * PI * alpha_of_v(&spec).unwrap();
                for n in [1, 2, 5, 16] {
                    let q = rescale_pair(&spec, n).unwrap().dirac_scaled_integral_quadrature();
                    assert!(((q - target) / target).abs() < 1e-4, "{spec:?} N={n}: {q} vs {target}");
                }
            }
        }
    }

    #[test]
    fn pair_is_nonnegative_at_random_radii() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for spec in [PairSpec::ball(1.0, 1.0, 3).unwrap(), PairSpec::gaussian(2.0, 0.5, 2).unwrap()] {
            for _ in 0..10_000 {
                let r: f64 = rng.random_range(0.0..10.0);
                assert!(eval_pair(&spec, r).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn cell_averaged_kernel_mass() {
        let spec = PairSpec::ball(1.0, 1.0, 2).unwrap();
        let v2 = rescale_pair(&spec, 2).unwrap();
        let k = radial_kernel(&v2, 0.125, 8).unwrap();
        let mass = crate::grid::quadrature(&k).unwrap();
        let exact = spec.full_integral() / 2.0; // ∫ v_N = N^{-1} ∫ v
        assert!(((mass - exact) / exact).abs() < 2e-2, "{mass} vs {exact}");
    }
}
