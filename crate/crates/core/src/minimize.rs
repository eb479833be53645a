//! Minimization of the cell functional and estimation of the energy density `g(b)`.
//!
//! Polak-Ribiere+ nonlinear conjugate gradient on `(Re u, Im u)`. Along a search
//! direction the functional is an exact quartic, so the step starts at its global
//! minimizer and is then checked with an Armijo test.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{density_moments, dot, DiscreteField, EnergyBreakdown, Functional};
use crate::error::{GlError, Result};
use crate::grid::{build_grid, Boundary, CellConfig, WrapRule};
use crate::trial::{build_trial, trial_resolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Uniform,
    Random,
    Trial,
    /// The normal state `u = 0`.
    Zero,
}

impl InitKind {
    pub fn label(&self) -> &'static str {
        match self {
            InitKind::Uniform => "uniform",
            InitKind::Random => "random",
            InitKind::Trial => "trial",
            InitKind::Zero => "zero",
        }
    }
}

impl std::str::FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(InitKind::Uniform),
            "random" => Ok(InitKind::Random),
            "trial" => Ok(InitKind::Trial),
            "zero" => Ok(InitKind::Zero),
            other => Err(format!("unknown init kind {other:?} (expected uniform, random, trial or zero)")),
        }
    }
}

/// Initial field for a minimization.
pub fn init_state(kind: InitKind, config: &CellConfig, seed: u64) -> Result<DiscreteField> {
    let grid = build_grid(config)?;
    let wrap = WrapRule::magnetic(&grid);
    Ok(match kind {
        InitKind::Uniform => DiscreteField::constant(grid, Complex64::new(1.0, 0.0)),
        InitKind::Zero => DiscreteField::constant(grid, Complex64::new(0.0, 0.0)),
        InitKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = (0..grid.sites())
                .map(|_| {
                    let r: f64 = rng.gen();
                    Complex64::from_polar(r, rng.gen_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            DiscreteField::new(grid, wrap, values)
        }
        InitKind::Trial => build_trial(config.b, config.n_vortices, &grid)?.u,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    ConjugateGradient,
    /// Steepest descent with the same exact line search.
    GradientFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeSettings {
    pub max_iter: usize,
    /// Stop when `|grad| h / max(|G|, 1)` falls below this.
    pub grad_tol: f64,
    pub method: Method,
    /// Reset the conjugate direction every this many iterations.
    pub restart_every: usize,
    pub armijo: f64,
    pub max_backtrack: usize,
    /// Perturb a starting field with vanishing gradient (such as `u = 0`).
    pub escape_zero: bool,
    pub perturbation: f64,
    pub seed: u64,
    /// Iterations without relative energy progress above `1e-15` before giving up.
    pub stall_window: usize,
    pub boundary: Boundary,
}

impl Default for MinimizeSettings {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            grad_tol: 1e-8,
            method: Method::ConjugateGradient,
            restart_every: 200,
            armijo: 1e-4,
            max_backtrack: 40,
            escape_zero: true,
            perturbation: 1e-3,
            seed: 0,
            stall_window: 200,
            boundary: Boundary::MagneticPeriodic,
        }
    }
}

impl MinimizeSettings {
    pub fn from_config(config: &CellConfig) -> Self {
        Self {
            max_iter: config.max_iter,
            grad_tol: config.grad_tol,
            seed: config.seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    MaxIterations,
    /// No further decrease possible at working precision before reaching the tolerance.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct MinimizationResult {
    pub field: DiscreteField,
    pub energy: EnergyBreakdown,
    pub initial_energy: f64,
    pub iterations: usize,
    /// Euclidean norm of the discrete gradient.
    pub grad_norm: f64,
    /// `grad_norm * h / max(|G|, 1)`.
    pub relative_grad: f64,
    pub status: Status,
    pub init: String,
    pub restarts: usize,
    pub wall_time: f64,
}

impl MinimizationResult {
    pub fn g(&self) -> f64 {
        self.energy.per_area()
    }

    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }
}

fn relative(grad_norm: f64, h: f64, energy: f64) -> f64 {
    grad_norm * h / energy.abs().max(1.0)
}

pub fn minimize(init: &DiscreteField, b: f64, settings: &MinimizeSettings) -> Result<MinimizationResult> {
    minimize_labelled(init, b, settings, "custom")
}

pub fn minimize_labelled(init: &DiscreteField, b: f64, settings: &MinimizeSettings, label: &str) -> Result<MinimizationResult> {
    let started = Instant::now();
    init.check_finite()?;
    let fun = Functional::new(b, &init.grid, &init.wrap, settings.boundary)?;
    let h = init.grid.h;
    let len = init.values.len();
    let zero = Complex64::new(0.0, 0.0);

    let mut u = init.values.clone();
    let mut g = vec![zero; len];
    let mut e = fun.energy_and_gradient(&u, &mut g)?;
    let initial_energy = e.total;
    let mut gnorm2 = dot(&g, &g);

    if gnorm2 == 0.0 && settings.escape_zero {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x9e37_79b9_7f4a_7c15);
        for z in u.iter_mut() {
            *z += Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * settings.perturbation;
        }
        e = fun.energy_and_gradient(&u, &mut g)?;
        gnorm2 = dot(&g, &g);
        log::debug!("perturbed a critical starting point, G = {}", e.total);
    }

    let mut d: Vec<Complex64> = g.iter().map(|z| -z).collect();
    let mut u_new = vec![zero; len];
    let mut g_new = vec![zero; len];
    let mut status = Status::MaxIterations;
    let mut iterations = 0;
    let mut restarts = 0;
    let mut since_restart = 0;
    let mut best_recent = e.total;
    let mut stall_count = 0;

    loop {
        let rel = relative(gnorm2.sqrt(), h, e.total);
        if rel <= settings.grad_tol {
            status = Status::Converged;
            break;
        }
        if iterations >= settings.max_iter {
            break;
        }
        if gnorm2 == 0.0 {
            status = Status::Stalled;
            break;
        }
        let mut slope = dot(&g, &d);
        let mut steepest = since_restart == 0;
        if slope >= 0.0 {
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
            slope = -gnorm2;
            steepest = true;
            restarts += 1;
        }
        let poly = fun.line_polynomial(&u, &d);
        let mut t = poly.argmin_positive().unwrap_or(1.0);
        let scale = e.total.abs().max(1.0);
        let mut accepted = None;
        for _ in 0..=settings.max_backtrack {
            u_new.iter_mut().zip(u.iter().zip(&d)).for_each(|(w, (a, c))| *w = a + c * t);
            let e_new = fun.energy_and_gradient(&u_new, &mut g_new)?;
            let armijo = e_new.total <= e.total + settings.armijo * t * slope;
            // Below working precision the exact polynomial decides.
            let noise = e_new.total <= e.total + 1e-13 * scale && poly.eval(t) < poly.eval(0.0);
            if e_new.total.is_finite() && (armijo || noise) {
                accepted = Some(e_new);
                break;
            }
            t *= 0.5;
        }
        let Some(e_new) = accepted else {
            if steepest {
                status = Status::Stalled;
                break;
            }
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
            since_restart = 0;
            restarts += 1;
            continue;
        };
        if e_new.total > e.total + 1e-9 * scale {
            return Err(GlError::Divergence {
                before: e.total,
                after: e_new.total,
                iteration: iterations,
            });
        }
        iterations += 1;
        since_restart += 1;

        let gnew2 = dot(&g_new, &g_new);
        let beta = match settings.method {
            Method::GradientFlow => 0.0,
            Method::ConjugateGradient => {
                let cross = dot(&g_new, &g);
                ((gnew2 - cross) / gnorm2).max(0.0)
            }
        };
        let reset = settings.restart_every > 0 && since_restart >= settings.restart_every;
        let beta = if reset {
            since_restart = 0;
            restarts += 1;
            0.0
        } else {
            beta
        };
        d.iter_mut().zip(&g_new).for_each(|(di, gi)| *di = *di * beta - gi);
        std::mem::swap(&mut u, &mut u_new);
        std::mem::swap(&mut g, &mut g_new);
        gnorm2 = gnew2;
        e = e_new;

        if best_recent - e.total > 1e-15 * scale {
            best_recent = e.total;
            stall_count = 0;
        } else {
            stall_count += 1;
            if stall_count >= settings.stall_window {
                status = Status::Stalled;
                break;
            }
        }
        if iterations % 500 == 0 {
            log::debug!("iter {iterations}: G = {:.12}, rel grad = {:.3e}", e.total, relative(gnorm2.sqrt(), h, e.total));
        }
    }

    let grad_norm = gnorm2.sqrt();
    Ok(MinimizationResult {
        field: DiscreteField {
            grid: init.grid,
            wrap: init.wrap,
            values: u,
        },
        relative_grad: relative(grad_norm, h, e.total),
        energy: e,
        initial_energy,
        iterations,
        grad_norm,
        status,
        init: label.to_string(),
        restarts,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Energy density at one vortex count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerCount {
    #[serde(rename = "N")]
    pub n_vortices: usize,
    pub n: usize,
    pub g: f64,
    pub init: InitKind,
}

/// Per-`b` record of the energy density and its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GCurvePoint {
    pub b: f64,
    #[serde(rename = "N")]
    pub n_vortices: usize,
    #[serde(rename = "R")]
    pub side: f64,
    pub n: usize,
    pub g_est: f64,
    pub g_trial: Option<f64>,
    pub d_lower: Option<f64>,
    pub d_upper: Option<f64>,
    /// `int (1 - |u|^2)^2 / |K_R|`.
    pub potential: f64,
    pub m2: f64,
    pub m4: f64,
    /// `int |(grad - i A0) u|^2 / |K_R| - g'(b)`, once a derivative estimate exists.
    pub f1: Option<f64>,
    /// `int |u|^2 / |K_R| - (b g'(b) - 2 g)`, once a derivative estimate exists.
    pub f2: Option<f64>,
    /// `int |u|^4 / |K_R| + 2 g`.
    pub f3: f64,
    pub zeta: f64,
    pub per_count: Vec<PerCount>,
    pub best_init: InitKind,
    pub status: Status,
    pub iterations: usize,
    pub flags: Vec<String>,
}

/// `(g + 1/2 + (b/2) log b) / (b log b)`.
pub fn zeta(b: f64, g: f64) -> f64 {
    (g + 0.5 + 0.5 * b * b.ln()) / (b * b.ln())
}

pub const NOT_GROUND_STATE: &str = "likely not converged to ground state";

impl GCurvePoint {
    /// Fill the derivative-dependent diagnostics from a derivative estimate.
    pub fn set_derivative(&mut self, lower: Option<f64>, upper: Option<f64>, kinetic_density: f64) {
        self.d_lower = lower;
        self.d_upper = upper;
        if let (Some(l), Some(u)) = (lower, upper) {
            let gp = 0.5 * (l + u);
            self.f1 = Some(kinetic_density - gp);
            self.f2 = Some(self.m2 - (self.b * gp - 2.0 * self.g_est));
        }
    }
}

/// Minimize from every requested initialization at every vortex count and keep
/// the lowest energy density at the largest count. `template` supplies the seed,
/// tolerances and a resolution floor; each count gets the finest of the template
/// spacing and the resolution rule, adjusted so the trial tiling applies.
pub fn estimate_g(
    b: f64,
    counts: &[usize],
    kinds: &[InitKind],
    template: &CellConfig,
    settings: &MinimizeSettings,
) -> Result<(GCurvePoint, MinimizationResult)> {
    if counts.is_empty() || kinds.is_empty() {
        return Err(GlError::AllRunsFailed);
    }
    let mut per_count = Vec::new();
    let mut last: Option<(usize, MinimizationResult, InitKind, CellConfig)> = None;
    for &nv in counts {
        let config = config_for(b, nv, template);
        let mut best: Option<(MinimizationResult, InitKind)> = None;
        for (k, &kind) in kinds.iter().enumerate() {
            let seed = template.seed.wrapping_add(k as u64);
            let run = init_state(kind, &config, seed).and_then(|init| {
                let s = MinimizeSettings { seed, ..*settings };
                minimize_labelled(&init, b, &s, kind.label())
            });
            match run {
                Ok(r) => {
                    log::info!(
                        "b = {b}, N = {nv}, init {}: g = {:.10} ({:?}, {} iterations)",
                        kind.label(),
                        r.g(),
                        r.status,
                        r.iterations
                    );
                    if best.as_ref().is_none_or(|(cur, _)| r.energy.total < cur.energy.total) {
                        best = Some((r, kind));
                    }
                }
                Err(e) => log::warn!("b = {b}, N = {nv}, init {} dropped: {e}", kind.label()),
            }
        }
        if let Some((r, kind)) = best {
            per_count.push(PerCount {
                n_vortices: nv,
                n: config.n,
                g: r.g(),
                init: kind,
            });
            last = Some((nv, r, kind, config));
        }
    }
    let Some((nv, best, kind, config)) = last else {
        return Err(GlError::AllRunsFailed);
    };
    if nv != *counts.last().unwrap() {
        return Err(GlError::AllRunsFailed);
    }
    let g_est = best.g();
    let g_trial = init_state(InitKind::Trial, &config, 0)
        .and_then(|u| crate::energy::energy(&u, b))
        .map(|e| e.per_area())
        .ok();
    let moments = density_moments(&best.field);
    let mut flags = Vec::new();
    if g_est.abs() < 1e-14 || !best.converged() {
        flags.push(NOT_GROUND_STATE.to_string());
    }
    if let Some(gt) = g_trial {
        if g_est > gt + 1e-10 {
            flags.push("minimizer above trial state".to_string());
        }
    }
    let point = GCurvePoint {
        b,
        n_vortices: nv,
        side: config.side,
        n: config.n,
        g_est,
        g_trial,
        d_lower: None,
        d_upper: None,
        potential: moments.potential,
        m2: moments.m2,
        m4: moments.m4,
        f1: None,
        f2: None,
        f3: moments.m4 + 2.0 * g_est,
        zeta: zeta(b, g_est),
        per_count,
        best_init: kind,
        status: best.status,
        iterations: best.iterations,
        flags,
    };
    Ok((point, best))
}

/// Resolution for one vortex count: at least the template's sample density and the
/// resolution rule; for square counts, a multiple of `sqrt(N)` with an odd number of
/// samples per unit square.
pub fn config_for(b: f64, n_vortices: usize, template: &CellConfig) -> CellConfig {
    let side = crate::grid::quantized_side(n_vortices);
    let from_template = (side / template.spacing()).ceil() as usize;
    let floor = crate::grid::min_resolution(b, n_vortices).max(from_template).max(16);
    let n = trial_resolution(floor, n_vortices).unwrap_or(floor);
    CellConfig {
        b,
        n_vortices,
        side,
        n,
        seed: template.seed,
        grad_tol: template.grad_tol,
        max_iter: template.max_iter,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::energy;

    #[test]
    fn init_kinds() {
        let cfg = CellConfig::new(0.5, 1, 32);
        let u = init_state(InitKind::Uniform, &cfg, 0).unwrap();
        assert_eq!(u.max_modulus(), 1.0);
        let r1 = init_state(InitKind::Random, &cfg, 42).unwrap();
        let r2 = init_state(InitKind::Random, &cfg, 42).unwrap();
        assert_eq!(r1.values, r2.values);
        assert!(r1.max_modulus() <= 1.0);
        assert_ne!(r1.values, init_state(InitKind::Random, &cfg, 43).unwrap().values);
    }

    #[test]
    fn zero_start_escapes_to_negative_energy() {
        let cfg = CellConfig::new(0.5, 1, 32);
        let z = init_state(InitKind::Zero, &cfg, 0).unwrap();
        let r = minimize(&z, 0.5, &MinimizeSettings::default()).unwrap();
        assert!(r.energy.total < 0.0, "{}", r.energy.total);
        let stuck = minimize(&z, 0.5, &MinimizeSettings { escape_zero: false, ..Default::default() }).unwrap();
        assert_eq!(stuck.energy.total, 0.0);
        assert_eq!(stuck.iterations, 0);
    }

    #[test]
    fn descent_is_monotone_and_converges() {
        let cfg = CellConfig::new(0.5, 1, 32);
        let init = init_state(InitKind::Random, &cfg, 3).unwrap();
        let r = minimize(&init, 0.5, &MinimizeSettings::default()).unwrap();
        assert!(r.energy.total <= r.initial_energy);
        assert_eq!(r.status, Status::Converged, "{:?} after {}", r.status, r.iterations);
        let check = energy(&r.field, 0.5).unwrap();
        assert_eq!(check.total, r.energy.total);
        assert!(r.field.max_modulus() <= 1.0 + 10.0 * cfg.spacing());
    }

    #[test]
    fn gradient_flow_agrees_with_conjugate_gradient() {
        let cfg = CellConfig::new(0.5, 1, 32);
        let init = init_state(InitKind::Uniform, &cfg, 0).unwrap();
        let cg = minimize(&init, 0.5, &MinimizeSettings::default()).unwrap();
        let gf = minimize(
            &init,
            0.5,
            &MinimizeSettings {
                method: Method::GradientFlow,
                grad_tol: 1e-7,
                max_iter: 50_000,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((cg.g() - gf.g()).abs() < 1e-6, "{} {}", cg.g(), gf.g());
    }

    #[test]
    fn max_iterations_flagged() {
        let cfg = CellConfig::new(0.5, 1, 32);
        let init = init_state(InitKind::Random, &cfg, 1).unwrap();
        let r = minimize(&init, 0.5, &MinimizeSettings { max_iter: 3, ..Default::default() }).unwrap();
        assert_eq!(r.status, Status::MaxIterations);
        assert_eq!(r.iterations, 3);
    }

    #[test]
    fn degenerate_estimate_is_flagged() {
        let cfg = CellConfig::new(0.5, 1, 32);
        let settings = MinimizeSettings {
            escape_zero: false,
            ..Default::default()
        };
        let (p, _) = estimate_g(0.5, &[1], &[InitKind::Zero], &cfg, &settings).unwrap();
        assert_eq!(p.g_est, 0.0);
        assert!(p.flags.iter().any(|f| f == NOT_GROUND_STATE));
    }

    #[test]
    fn zeta_of_model_curve_vanishes() {
        let b: f64 = 0.03;
        assert!(zeta(b, -0.5 - 0.5 * b * b.ln()).abs() < 1e-12);
    }
}
