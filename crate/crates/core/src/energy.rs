//! Discrete cell functional
//!
//! `G(u) = sum_links b |u(t) U - u(s)|^2 + sum_sites h^2 (1 - |u|^2)^2 / 2 - |K_R| / 2`,
//!
//! the link-variable discretization of `b |(grad - i A0) u|^2 + (1 - |u|^2)^2 / 2 - 1/2`.
//! The kinetic term is exactly invariant under discrete gauge transformations.
//! All reductions run row by row with compensated summation and are combined in
//! row order, so results do not depend on scheduling.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{GlError, Result};
use crate::grid::{Boundary, Connection, Grid, WrapRule};
use crate::sum::{compensated, CompensatedSum};

/// Complex samples of the order parameter on the fundamental cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteField {
    pub grid: Grid,
    pub wrap: WrapRule,
    pub values: Vec<Complex64>,
}

impl DiscreteField {
    pub fn new(grid: Grid, wrap: WrapRule, values: Vec<Complex64>) -> Self {
        assert_eq!(values.len(), grid.sites(), "field length must be n^2");
        Self { grid, wrap, values }
    }

    pub fn constant(grid: Grid, value: Complex64) -> Self {
        Self::new(grid, WrapRule::magnetic(&grid), vec![value; grid.sites()])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            grid: self.grid,
            wrap: self.wrap,
            values: vec![Complex64::new(0.0, 0.0); self.values.len()],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            Some(s) => Err(GlError::NonFinite(s)),
            None => Ok(()),
        }
    }

    pub fn max_modulus(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn min_modulus(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min)
    }

    /// Real inner product `Re sum conj(a) b`.
    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

pub(crate) fn dot(a: &[Complex64], b: &[Complex64]) -> f64 {
    compensated(a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im))
}

/// Terms of the cell functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// `b * sum |covariant difference|^2`.
    pub kinetic: f64,
    /// `sum h^2 (1 - |u|^2)^2 / 2`.
    pub potential: f64,
    /// `-|K_R| / 2`, as `-n^2 h^2 / 2` in one rounding.
    pub offset: f64,
    /// `kinetic + potential + offset`.
    pub total: f64,
    /// Same functional evaluated in the `-|u|^2 + |u|^4 / 2` form.
    pub quartic_form: f64,
    pub area: f64,
    #[serde(rename = "N")]
    pub n_vortices: usize,
}

impl EnergyBreakdown {
    pub fn per_area(&self) -> f64 {
        self.total / self.area
    }

    /// Energy per unit cell of area `2 pi`.
    pub fn per_cell(&self) -> f64 {
        self.total / self.n_vortices as f64
    }

    /// Relative disagreement of the two algebraic forms.
    pub fn form_mismatch(&self) -> f64 {
        let scale = self.kinetic + self.potential + self.offset.abs();
        (self.total - self.quartic_form).abs() / scale.max(f64::MIN_POSITIVE)
    }
}

/// Coefficients of `E(u + t d)` as a quartic in `t`, lowest order first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinePolynomial(pub [f64; 5]);

impl LinePolynomial {
    pub fn eval(&self, t: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn slope(&self, t: f64) -> f64 {
        let c = &self.0;
        c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * 4.0 * c[4]))
    }

    /// Global minimizer over `t > 0`, if the polynomial decreases initially.
    pub fn argmin_positive(&self) -> Option<f64> {
        if self.0[1] >= 0.0 {
            return None;
        }
        let c = &self.0;
        let roots = cubic_roots(4.0 * c[4], 3.0 * c[3], 2.0 * c[2], c[1]);
        roots
            .into_iter()
            .filter(|t| *t > 0.0 && t.is_finite())
            .min_by(|a, b| self.eval(*a).total_cmp(&self.eval(*b)))
    }
}

/// Real roots of `a t^3 + b t^2 + c t + d`.
fn cubic_roots(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs()).max(d.abs());
    if a.abs() <= 1e-14 * scale {
        if b.abs() <= 1e-14 * scale {
            return if c != 0.0 { vec![-d / c] } else { vec![] };
        }
        let disc = c * c - 4.0 * b * d;
        if disc < 0.0 {
            return vec![];
        }
        let q = -0.5 * (c + c.signum() * disc.sqrt());
        let mut r = vec![];
        if q != 0.0 {
            r.push(d / q);
        }
        r.push(q / b);
        return r;
    }
    let (b, c, d) = (b / a, c / a, d / a);
    let q = (b * b - 3.0 * c) / 9.0;
    let r = (2.0 * b * b * b - 9.0 * b * c + 27.0 * d) / 54.0;
    let mut roots = if r * r < q * q * q {
        let theta = (r / q.powf(1.5)).clamp(-1.0, 1.0).acos();
        let s = -2.0 * q.sqrt();
        (0..3)
            .map(|k| s * ((theta + std::f64::consts::TAU * k as f64) / 3.0).cos() - b / 3.0)
            .collect::<Vec<_>>()
    } else {
        let aa = -r.signum() * (r.abs() + (r * r - q * q * q).sqrt()).cbrt();
        let bb = if aa != 0.0 { q / aa } else { 0.0 };
        vec![aa + bb - b / 3.0]
    };
    // One Newton polish per root.
    for t in roots.iter_mut() {
        let f = ((*t + b) * *t + c) * *t + d;
        let df = (3.0 * *t + 2.0 * b) * *t + c;
        if df != 0.0 {
            *t -= f / df;
        }
    }
    roots
}

/// The cell functional at fixed `b` on a fixed connection.
#[derive(Debug, Clone)]
pub struct Functional {
    pub b: f64,
    pub conn: Connection,
}

impl Functional {
    pub fn new(b: f64, grid: &Grid, wrap: &WrapRule, boundary: Boundary) -> Result<Self> {
        if !(b > 0.0 && b < 1.0) {
            return Err(GlError::BOutOfRange(b));
        }
        Ok(Self {
            b,
            conn: Connection::new(grid, wrap, boundary),
        })
    }

    pub fn for_field(field: &DiscreteField, b: f64) -> Result<Self> {
        Self::new(b, &field.grid, &field.wrap, Boundary::MagneticPeriodic)
    }

    pub fn grid(&self) -> &Grid {
        &self.conn.grid
    }

    fn check(&self, u: &[Complex64]) -> Result<()> {
        let expected = self.grid().sites();
        if u.len() != expected {
            return Err(GlError::ShapeMismatch {
                expected,
                got: u.len(),
            });
        }
        match u.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            Some(s) => Err(GlError::NonFinite(s)),
            None => Ok(()),
        }
    }

    /// Per-row sums of (squared covariant differences, potential, -|u|^2 + |u|^4/2).
    fn row_sums(&self, u: &[Complex64], j: usize) -> [f64; 3] {
        let g = self.grid();
        let n = g.n;
        let h2 = g.h * g.h;
        let jp = (j + 1) % n;
        let (mut kin, mut pot, mut quart) = (CompensatedSum::new(), CompensatedSum::new(), CompensatedSum::new());
        for i in 0..n {
            let s = j * n + i;
            let us = u[s];
            if self.conn.x_active(i) {
                let t = j * n + (i + 1) % n;
                kin.add((u[t] * self.conn.ux[s] - us).norm_sqr());
            }
            if self.conn.y_active(j) {
                let t = jp * n + i;
                kin.add((u[t] * self.conn.uy[s] - us).norm_sqr());
            }
            let m = us.norm_sqr();
            pot.add(0.5 * h2 * (1.0 - m) * (1.0 - m));
            quart.add(h2 * (-m + 0.5 * m * m));
        }
        [kin.value(), pot.value(), quart.value()]
    }

    pub fn energy(&self, u: &[Complex64]) -> Result<EnergyBreakdown> {
        self.check(u)?;
        let n = self.grid().n;
        let rows: Vec<[f64; 3]> = (0..n).map(|j| self.row_sums(u, j)).collect();
        Ok(self.assemble(&rows))
    }

    /// Total energy and its gradient with respect to `(Re u, Im u)`, packed as
    /// `dG/dRe + i dG/dIm`, in a single sweep.
    pub fn energy_and_gradient(&self, u: &[Complex64], grad: &mut [Complex64]) -> Result<EnergyBreakdown> {
        self.check(u)?;
        let g = self.grid();
        let n = g.n;
        let h2 = g.h * g.h;
        let two_b = 2.0 * self.b;
        grad.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        let mut rows = Vec::with_capacity(n);
        for j in 0..n {
            let jp = (j + 1) % n;
            let (mut kin, mut pot, mut quart) = (CompensatedSum::new(), CompensatedSum::new(), CompensatedSum::new());
            for i in 0..n {
                let s = j * n + i;
                let us = u[s];
                let m = us.norm_sqr();
                pot.add(0.5 * h2 * (1.0 - m) * (1.0 - m));
                quart.add(h2 * (-m + 0.5 * m * m));
                grad[s] -= us * (2.0 * h2 * (1.0 - m));
                if self.conn.x_active(i) {
                    let t = j * n + (i + 1) % n;
                    let w = self.conn.ux[s];
                    let d = u[t] * w - us;
                    kin.add(d.norm_sqr());
                    let d = d * two_b;
                    grad[t] += w.conj() * d;
                    grad[s] -= d;
                }
                if self.conn.y_active(j) {
                    let t = jp * n + i;
                    let w = self.conn.uy[s];
                    let d = u[t] * w - us;
                    kin.add(d.norm_sqr());
                    let d = d * two_b;
                    grad[t] += w.conj() * d;
                    grad[s] -= d;
                }
            }
            rows.push([kin.value(), pot.value(), quart.value()]);
        }
        Ok(self.assemble(&rows))
    }

    fn assemble(&self, rows: &[[f64; 3]]) -> EnergyBreakdown {
        let kin = self.b * compensated(rows.iter().map(|r| r[0]));
        let pot = compensated(rows.iter().map(|r| r[1]));
        let quart = compensated(rows.iter().map(|r| r[2]));
        let g = self.grid();
        let area = g.area();
        // Rounds exactly like the potential sum of the normal state, so G(0) = 0.
        let offset = -(g.sites() as f64) * (0.5 * g.h * g.h);
        EnergyBreakdown {
            kinetic: kin,
            potential: pot,
            offset,
            total: kin + pot + offset,
            quartic_form: kin + quart,
            area,
            n_vortices: self.grid().n_vortices,
        }
    }

    pub fn gradient(&self, u: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut grad = vec![Complex64::new(0.0, 0.0); u.len()];
        self.energy_and_gradient(u, &mut grad)?;
        Ok(grad)
    }

    /// Exact quartic `t -> E(u + t d)`.
    pub fn line_polynomial(&self, u: &[Complex64], d: &[Complex64]) -> LinePolynomial {
        let g = self.grid();
        let n = g.n;
        let h2 = g.h * g.h;
        let mut c = [CompensatedSum::new(); 5];
        let mut kin = [CompensatedSum::new(); 3];
        for j in 0..n {
            let jp = (j + 1) % n;
            for i in 0..n {
                let s = j * n + i;
                let mut link = |t: usize, w: Complex64| {
                    let a = u[t] * w - u[s];
                    let e = d[t] * w - d[s];
                    kin[0].add(a.norm_sqr());
                    kin[1].add(2.0 * (a.re * e.re + a.im * e.im));
                    kin[2].add(e.norm_sqr());
                };
                if self.conn.x_active(i) {
                    link(j * n + (i + 1) % n, self.conn.ux[s]);
                }
                if self.conn.y_active(j) {
                    link(jp * n + i, self.conn.uy[s]);
                }
                // (1 - |u + t d|^2)^2 / 2 with |u + t d|^2 = m0 + m1 t + m2 t^2.
                let (us, ds) = (u[s], d[s]);
                let p0 = 1.0 - us.norm_sqr();
                let p1 = -2.0 * (us.re * ds.re + us.im * ds.im);
                let p2 = -ds.norm_sqr();
                let k = 0.5 * h2;
                c[0].add(k * p0 * p0);
                c[1].add(k * 2.0 * p0 * p1);
                c[2].add(k * (p1 * p1 + 2.0 * p0 * p2));
                c[3].add(k * 2.0 * p1 * p2);
                c[4].add(k * p2 * p2);
            }
        }
        let offset = -(g.sites() as f64) * (0.5 * h2);
        LinePolynomial([
            c[0].value() + self.b * kin[0].value() + offset,
            c[1].value() + self.b * kin[1].value(),
            c[2].value() + self.b * kin[2].value(),
            c[3].value(),
            c[4].value(),
        ])
    }

    /// Kinetic and potential energy restricted to sites whose label is `k`,
    /// links attributed to their start site. Returns `(kinetic, potential)` per label.
    pub fn partitioned(&self, u: &[Complex64], labels: &[usize], count: usize) -> Result<Vec<(f64, f64)>> {
        self.check(u)?;
        let g = self.grid();
        let n = g.n;
        let h2 = g.h * g.h;
        let mut acc = vec![(CompensatedSum::new(), CompensatedSum::new()); count];
        for j in 0..n {
            let jp = (j + 1) % n;
            for i in 0..n {
                let s = j * n + i;
                let us = u[s];
                let (kin, pot) = &mut acc[labels[s]];
                if self.conn.x_active(i) {
                    kin.add(self.b * (u[j * n + (i + 1) % n] * self.conn.ux[s] - us).norm_sqr());
                }
                if self.conn.y_active(j) {
                    kin.add(self.b * (u[jp * n + i] * self.conn.uy[s] - us).norm_sqr());
                }
                let m = us.norm_sqr();
                pot.add(0.5 * h2 * (1.0 - m) * (1.0 - m));
            }
        }
        Ok(acc.into_iter().map(|(k, p)| (k.value(), p.value())).collect())
    }
}

/// Cell energy of a magnetic-periodic field.
pub fn energy(field: &DiscreteField, b: f64) -> Result<EnergyBreakdown> {
    Functional::for_field(field, b)?.energy(&field.values)
}

/// Gradient of the cell energy with respect to the real and imaginary parts.
pub fn gradient(field: &DiscreteField, b: f64) -> Result<DiscreteField> {
    let values = Functional::for_field(field, b)?.gradient(&field.values)?;
    Ok(DiscreteField {
        grid: field.grid,
        wrap: field.wrap,
        values,
    })
}

/// Area-normalized moments `(|u|^2, |u|^4, (1 - |u|^2)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityMoments {
    pub m2: f64,
    pub m4: f64,
    pub potential: f64,
}

pub fn density_moments(field: &DiscreteField) -> DensityMoments {
    let g = &field.grid;
    let scale = g.h * g.h / g.area();
    let m2 = scale * compensated(field.values.iter().map(|z| z.norm_sqr()));
    let m4 = scale * compensated(field.values.iter().map(|z| z.norm_sqr().powi(2)));
    let potential = scale * compensated(field.values.iter().map(|z| (1.0 - z.norm_sqr()).powi(2)));
    DensityMoments { m2, m4, potential }
}
