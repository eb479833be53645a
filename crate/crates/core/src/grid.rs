//! Discretization of the square cell `K_R = (-R/2, R/2)^2` with magnetic-periodic
//! identification and the link variables of the background potential
//! `A0(x) = (-x2, x1) / 2`.
//!
//! Sites sit at `x(i, j) = (-R/2 + i h, -R/2 + j h)` for `0 <= i, j < n`, with
//! `h = R / n`. Field samples are stored row-major with `i` fastest, so site
//! `(i, j)` has flat index `j * n + i`.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::energy::DiscreteField;
use crate::error::{GlError, Result};
use crate::sum::compensated;

/// Physical and numerical parameters of one cell computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    /// Field-strength parameter, `0 < b < 1`.
    pub b: f64,
    /// Number of flux quanta (vortices) in the cell.
    #[serde(rename = "N")]
    pub n_vortices: usize,
    /// Side length `R = sqrt(2 pi N)`.
    #[serde(rename = "R")]
    pub side: f64,
    /// Samples per side.
    pub n: usize,
    pub seed: u64,
    /// Relative gradient-norm stopping tolerance.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl CellConfig {
    pub fn new(b: f64, n_vortices: usize, n: usize) -> Self {
        Self {
            b,
            n_vortices,
            side: quantized_side(n_vortices),
            n,
            seed: 0,
            grad_tol: 1e-8,
            max_iter: 20_000,
        }
    }

    /// Config with the smallest resolution satisfying `h <= sqrt(b) / 8`,
    /// rounded up to a multiple of `multiple`.
    pub fn resolved(b: f64, n_vortices: usize, multiple: usize) -> Self {
        let n = min_resolution(b, n_vortices).max(16);
        let m = multiple.max(1);
        Self::new(b, n_vortices, n.div_ceil(m) * m)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn spacing(&self) -> f64 {
        self.side / self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0 && self.b < 1.0) {
            return Err(GlError::BOutOfRange(self.b));
        }
        if self.n_vortices == 0 {
            return Err(GlError::NoVortices);
        }
        if self.n < 16 {
            return Err(GlError::ResolutionTooSmall(self.n));
        }
        let quanta = self.side * self.side / TAU;
        if (quanta - self.n_vortices as f64).abs() > 1e-12 * quanta.max(1.0) {
            return Err(GlError::Quantization(quanta));
        }
        let limit = self.b.sqrt() / 8.0;
        let h = self.spacing();
        if h > limit {
            return Err(GlError::GridTooCoarse {
                h,
                limit,
                min_n: min_resolution(self.b, self.n_vortices),
            });
        }
        Ok(())
    }
}

/// `R = sqrt(2 pi N)`.
pub fn quantized_side(n_vortices: usize) -> f64 {
    (TAU * n_vortices as f64).sqrt()
}

/// Smallest `n` with `R / n <= sqrt(b) / 8`.
pub fn min_resolution(b: f64, n_vortices: usize) -> usize {
    (quantized_side(n_vortices) / (b.sqrt() / 8.0)).ceil() as usize
}

/// Uniform periodic grid on `K_R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub h: f64,
    pub side: f64,
    pub n_vortices: usize,
}

pub fn build_grid(config: &CellConfig) -> Result<Grid> {
    config.validate()?;
    Ok(Grid {
        n: config.n,
        h: config.spacing(),
        side: config.side,
        n_vortices: config.n_vortices,
    })
}

impl Grid {
    /// Grid without the resolution rule; used for coarse diagnostics and tests.
    pub fn unchecked(n_vortices: usize, n: usize) -> Self {
        let side = quantized_side(n_vortices);
        Self {
            n,
            h: side / n as f64,
            side,
            n_vortices,
        }
    }

    pub fn sites(&self) -> usize {
        self.n * self.n
    }

    pub fn links(&self) -> usize {
        2 * self.n * self.n
    }

    pub fn plaquettes(&self) -> usize {
        self.n * self.n
    }

    pub fn area(&self) -> f64 {
        self.side * self.side
    }

    /// Coordinate of (possibly out-of-range) index `i`.
    #[inline]
    pub fn coord(&self, i: i64) -> f64 {
        -0.5 * self.side + i as f64 * self.h
    }

    #[inline]
    pub fn point(&self, i: i64, j: i64) -> [f64; 2] {
        [self.coord(i), self.coord(j)]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    /// Reduce an unwrapped index pair to the fundamental cell, returning the
    /// in-range pair and the number of periods crossed in each direction.
    #[inline]
    pub fn reduce(&self, i: i64, j: i64) -> (usize, usize, i64, i64) {
        let n = self.n as i64;
        let (a, c) = (i.div_euclid(n), j.div_euclid(n));
        (i.rem_euclid(n) as usize, j.rem_euclid(n) as usize, a, c)
    }

    /// Center of the dual site (plaquette) with lower-left site `(i, j)`.
    pub fn plaquette_center(&self, i: i64, j: i64) -> [f64; 2] {
        [self.coord(i) + 0.5 * self.h, self.coord(j) + 0.5 * self.h]
    }
}

/// Line integrals of `A0` along the grid links (midpoint rule, exact for affine `A0`).
///
/// `A0 . e1 = -x2 / 2` depends only on the row, `A0 . e2 = x1 / 2` only on the column.
#[derive(Debug, Clone)]
pub struct LinkPhases {
    pub grid: Grid,
    /// Phase of the `+x` link leaving row `j`.
    pub theta_x: Vec<f64>,
    /// Phase of the `+y` link leaving column `i`.
    pub theta_y: Vec<f64>,
}

pub fn link_phases(grid: &Grid) -> LinkPhases {
    let theta_x = (0..grid.n as i64)
        .map(|j| theta_x_at(grid, grid.coord(j)))
        .collect();
    let theta_y = (0..grid.n as i64)
        .map(|i| theta_y_at(grid, grid.coord(i)))
        .collect();
    LinkPhases {
        grid: *grid,
        theta_x,
        theta_y,
    }
}

#[inline]
fn theta_x_at(grid: &Grid, x2: f64) -> f64 {
    -0.5 * x2 * grid.h
}

#[inline]
fn theta_y_at(grid: &Grid, x1: f64) -> f64 {
    0.5 * x1 * grid.h
}

impl LinkPhases {
    /// Oriented phase sum around the plaquette with lower-left site `(i, j)`,
    /// computed from unwrapped coordinates.
    pub fn plaquette_flux(&self, i: i64, j: i64) -> f64 {
        let g = &self.grid;
        theta_x_at(g, g.coord(j)) + theta_y_at(g, g.coord(i + 1))
            - theta_x_at(g, g.coord(j + 1))
            - theta_y_at(g, g.coord(i))
    }

    /// Sum of all plaquette fluxes of the cell; equals `R^2 = 2 pi N`.
    pub fn total_flux(&self) -> f64 {
        let n = self.grid.n as i64;
        compensated((0..n).flat_map(|j| (0..n).map(move |i| (i, j))).map(|(i, j)| self.plaquette_flux(i, j)))
    }
}

/// Magnetic-periodic identification of the cell, optionally twisted by
/// constant phases `(alpha, beta)`:
///
/// `u(x1 + R, x2) = e^{i alpha} e^{i R x2 / 2} u(x1, x2)`,
/// `u(x1, x2 + R) = e^{i beta} e^{-i R x1 / 2} u(x1, x2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WrapRule {
    pub side: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `e^{-i R^2 / 2} = (-1)^N`, stored so that shifting by `(a R, c R)`
    /// carries the sign `(-1)^{N a c}` without evaluating `a c R^2 / 2` in floating point.
    pub odd_cocycle: bool,
}

impl WrapRule {
    pub fn magnetic(grid: &Grid) -> Self {
        Self::twisted(grid, 0.0, 0.0)
    }

    pub fn twisted(grid: &Grid, alpha: f64, beta: f64) -> Self {
        Self {
            side: grid.side,
            alpha,
            beta,
            odd_cocycle: grid.n_vortices % 2 == 1,
        }
    }

    /// Factor relating `u(x + a R e1 + c R e2)` to `u(x)` for in-cell `x`.
    #[inline]
    pub fn factor(&self, a: i64, c: i64, x: [f64; 2]) -> Complex64 {
        if a == 0 && c == 0 {
            return Complex64::new(1.0, 0.0);
        }
        let r = self.side;
        let phase = self.alpha * a as f64 + self.beta * c as f64 + 0.5 * r * (a as f64 * x[1] - c as f64 * x[0]);
        let z = Complex64::from_polar(1.0, phase);
        if self.odd_cocycle && (a * c).rem_euclid(2) == 1 {
            -z
        } else {
            z
        }
    }

    /// Single right crossing evaluated at the (unwrapped) point `x`.
    pub fn step_right(&self, x: [f64; 2]) -> Complex64 {
        Complex64::from_polar(1.0, self.alpha + 0.5 * self.side * x[1])
    }

    /// Single upward crossing evaluated at the (unwrapped) point `x`.
    pub fn step_up(&self, x: [f64; 2]) -> Complex64 {
        Complex64::from_polar(1.0, self.beta - 0.5 * self.side * x[0])
    }
}

/// Value of the field at an arbitrary index, extended by its wrap rule.
pub fn wrap_value(field: &DiscreteField, i: i64, j: i64) -> Complex64 {
    let g = &field.grid;
    let (ii, jj, a, c) = g.reduce(i, j);
    let v = field.values[g.index(ii, jj)];
    if a == 0 && c == 0 {
        v
    } else {
        field.wrap.factor(a, c, g.point(ii as i64, jj as i64)) * v
    }
}

/// Treatment of the links that cross the cell boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Boundary {
    /// Boundary links close through the wrap rule (the space of magnetic-periodic fields).
    #[default]
    MagneticPeriodic,
    /// Boundary links are dropped (the free functional on the sampled square).
    Open,
}

/// Per-link parallel transports: the covariant difference along link `s -> t` is
/// `u[t] * U - u[s]`, with `t` the wrapped target and `U` including the wrap factor.
#[derive(Debug, Clone)]
pub struct Connection {
    pub grid: Grid,
    pub boundary: Boundary,
    pub ux: Vec<Complex64>,
    pub uy: Vec<Complex64>,
}

impl Connection {
    pub fn new(grid: &Grid, wrap: &WrapRule, boundary: Boundary) -> Self {
        let n = grid.n;
        let phases = link_phases(grid);
        let mut ux = vec![Complex64::new(0.0, 0.0); n * n];
        let mut uy = vec![Complex64::new(0.0, 0.0); n * n];
        for j in 0..n {
            let ex = Complex64::from_polar(1.0, -phases.theta_x[j]);
            let seam_x = ex * wrap.factor(1, 0, grid.point(0, j as i64));
            for i in 0..n {
                let s = grid.index(i, j);
                ux[s] = if i + 1 == n { seam_x } else { ex };
                let ey = Complex64::from_polar(1.0, -phases.theta_y[i]);
                uy[s] = if j + 1 == n {
                    ey * wrap.factor(0, 1, grid.point(i as i64, 0))
                } else {
                    ey
                };
            }
        }
        Self {
            grid: *grid,
            boundary,
            ux,
            uy,
        }
    }

    #[inline]
    pub fn x_active(&self, i: usize) -> bool {
        self.boundary == Boundary::MagneticPeriodic || i + 1 < self.grid.n
    }

    #[inline]
    pub fn y_active(&self, j: usize) -> bool {
        self.boundary == Boundary::MagneticPeriodic || j + 1 < self.grid.n
    }

    /// Connection seen by `e^{i chi} u` for a single-valued site function `chi`.
    pub fn gauge_transform(&self, chi: &[f64]) -> Self {
        let n = self.grid.n;
        let mut out = self.clone();
        for j in 0..n {
            for i in 0..n {
                let s = self.grid.index(i, j);
                let tx = self.grid.index((i + 1) % n, j);
                let ty = self.grid.index(i, (j + 1) % n);
                out.ux[s] *= Complex64::from_polar(1.0, chi[s] - chi[tx]);
                out.uy[s] *= Complex64::from_polar(1.0, chi[s] - chi[ty]);
            }
        }
        out
    }

    /// Oriented plaquette flux of the transports, reduced to `(-pi, pi]`.
    pub fn plaquette_flux_mod(&self, i: usize, j: usize) -> f64 {
        let n = self.grid.n;
        let g = &self.grid;
        let (ip, jp) = ((i + 1) % n, (j + 1) % n);
        // Transport around the loop; covariant differences use u[t] U, so the
        // holonomy of the A0 connection is the conjugate product.
        let hol = self.ux[g.index(i, j)] * self.uy[g.index(ip, j)]
            / (self.ux[g.index(i, jp)] * self.uy[g.index(i, j)]);
        -hol.arg()
    }
}

/// Reduce an angle to `(-pi, pi]`.
#[inline]
pub fn principal(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn side_and_spacing_for_single_vortex() {
        let cfg = CellConfig::new(0.5, 1, 32);
        assert!((cfg.side - 2.5066282746310002).abs() < 1e-12);
        assert!((cfg.spacing() - 0.0783321).abs() < 1e-6);
        build_grid(&cfg).unwrap();
    }

    #[test]
    fn minimum_resolution_for_sixteen_vortices() {
        assert_eq!(min_resolution(0.02, 16), 568);
        let cfg = CellConfig::new(0.02, 16, 567);
        assert!(matches!(build_grid(&cfg), Err(GlError::GridTooCoarse { min_n: 568, .. })));
        build_grid(&CellConfig::new(0.02, 16, 568)).unwrap();
    }

    #[test]
    fn rejects_b_out_of_range() {
        for b in [0.0, 1.0, 1.5, -0.1, f64::NAN] {
            let err = build_grid(&CellConfig::new(b, 4, 64)).unwrap_err();
            assert!(err.to_string().contains("b out of range"), "{err}");
        }
    }

    #[test]
    fn rejects_unquantized_side() {
        let mut cfg = CellConfig::new(0.5, 4, 64);
        cfg.side *= 1.0 + 1e-9;
        assert!(matches!(build_grid(&cfg), Err(GlError::Quantization(_))));
    }

    #[test]
    fn counts() {
        let g = Grid::unchecked(4, 20);
        assert_eq!((g.sites(), g.links(), g.plaquettes()), (400, 800, 400));
        assert!((g.n as f64 * g.h - g.side).abs() < 1e-12);
    }

    #[test]
    fn link_phase_examples() {
        let g = Grid::unchecked(1, 32);
        // x-link on the x1-axis carries no phase.
        assert_eq!(theta_x_at(&g, 0.0), 0.0);
        // y-link at x1 = 1 carries h / 2.
        assert!((theta_y_at(&g, 1.0) - 0.5 * g.h).abs() < 1e-15);
    }

    #[test]
    fn plaquette_fluxes_equal_area() {
        let g = Grid::unchecked(9, 96);
        let p = link_phases(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h2 = g.h * g.h;
        for _ in 0..100 {
            let (i, j) = (rng.gen_range(0..96), rng.gen_range(0..96));
            assert!((p.plaquette_flux(i, j) - h2).abs() <= 1e-12 * h2);
        }
        assert!((p.total_flux() - TAU * 9.0).abs() < 1e-10);
    }

    #[test]
    fn transport_fluxes_agree_with_area_mod_two_pi() {
        for nv in [1, 2, 3, 4] {
            let g = Grid::unchecked(nv, 24);
            let c = Connection::new(&g, &WrapRule::magnetic(&g), Boundary::MagneticPeriodic);
            let h2 = g.h * g.h;
            for j in 0..g.n {
                for i in 0..g.n {
                    let f = c.plaquette_flux_mod(i, j);
                    assert!(principal(f - h2).abs() < 1e-10, "N={nv} ({i},{j}) {f}");
                }
            }
        }
    }

    #[test]
    fn wrap_orders_agree_on_corners() {
        for nv in [1, 2, 3, 5, 16] {
            let g = Grid::unchecked(nv, 16);
            for (alpha, beta) in [(0.0, 0.0), (0.3, -1.2)] {
                let w = WrapRule::twisted(&g, alpha, beta);
                for &(i, j) in &[(0i64, 0i64), (3, 15), (15, 15), (7, 2)] {
                    let x = g.point(i, j);
                    let right_up = w.step_up([x[0] + g.side, x[1]]) * w.step_right(x);
                    let up_right = w.step_right([x[0], x[1] + g.side]) * w.step_up(x);
                    let direct = w.factor(1, 1, x);
                    assert!((right_up - direct).norm() < 1e-10, "N={nv}");
                    assert!((up_right - direct).norm() < 1e-10, "N={nv}");
                    // Negative corner.
                    let back = w.factor(-1, -1, x);
                    let down_left = w.step_right([x[0] - g.side, x[1] - g.side]).conj()
                        * w.step_up([x[0], x[1] - g.side]).conj();
                    assert!((back - down_left).norm() < 1e-10, "N={nv}");
                }
            }
        }
    }

    #[test]
    fn wrap_value_rules() {
        let g = Grid::unchecked(4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<Complex64> = (0..g.sites())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let f = DiscreteField::new(g, WrapRule::magnetic(&g), values);
        let n = g.n as i64;
        for (i, j) in [(0i64, 0i64), (5, 9), (15, 3)] {
            let v = f.values[g.index(i as usize, j as usize)];
            assert_eq!(wrap_value(&f, i, j), v);
            let x = g.point(i, j);
            let right = Complex64::from_polar(1.0, 0.5 * g.side * x[1]) * v;
            let up = Complex64::from_polar(1.0, -0.5 * g.side * x[0]) * v;
            assert!((wrap_value(&f, i + n, j) - right).norm() < 1e-12);
            assert!((wrap_value(&f, i, j + n) - up).norm() < 1e-12);
        }
    }

    #[test]
    fn gauge_transform_preserves_fluxes() {
        let g = Grid::unchecked(3, 24);
        let c = Connection::new(&g, &WrapRule::magnetic(&g), Boundary::MagneticPeriodic);
        let chi: Vec<f64> = (0..g.sites())
            .map(|s| {
                let (i, j) = (s % g.n, s / g.n);
                let t = TAU / g.n as f64;
                (t * i as f64).sin() * 1.7 + (2.0 * t * j as f64).cos() * 0.4
            })
            .collect();
        let ct = c.gauge_transform(&chi);
        for j in 0..g.n {
            for i in 0..g.n {
                let d = principal(c.plaquette_flux_mod(i, j) - ct.plaquette_flux_mod(i, j));
                assert!(d.abs() < 1e-12);
            }
        }
    }
}
