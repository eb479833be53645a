//! Post-processing of cell results: derivative brackets, the error functional
//! `r0(b)`, potential and density checks, parameter sweeps, and aggregation of a
//! cell into a tiled synthetic domain.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{density_moments, DiscreteField};
use crate::error::{GlError, Result};
use crate::grid::CellConfig;
use crate::minimize::{estimate_g, GCurvePoint, InitKind, MinimizationResult, MinimizeSettings};
use crate::vortices::{lipschitz_dual_distance, DiscreteMeasure, MeasureDistanceReport, SquareDomain, VortexBall};

/// One-sided difference quotients around `b`. For a concave curve `lower <= upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub b: f64,
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    /// `lower <= upper + 1e-3`.
    pub ordered: bool,
}

pub const BRACKET_SLACK: f64 = 1e-3;

impl Bracket {
    fn new(b: f64, lower: f64, upper: f64) -> Self {
        Self {
            b,
            lower,
            upper,
            midpoint: 0.5 * (lower + upper),
            ordered: lower <= upper + BRACKET_SLACK,
        }
    }
}

fn lookup(curve: &[(f64, f64)], b: f64) -> Result<f64> {
    curve
        .iter()
        .find(|(x, _)| (x - b).abs() <= 1e-9 * b.abs().max(1e-300))
        .map(|p| p.1)
        .ok_or(GlError::MissingSweepPoint(b))
}

/// `lower = (g(b + delta) - g(b)) / delta`, `upper = (g(b) - g(b - delta)) / delta`,
/// with `curve` a list of sampled `(b, g(b))` pairs.
pub fn derivative_bracket(curve: &[(f64, f64)], b: f64, delta: f64) -> Result<Bracket> {
    let g0 = lookup(curve, b)?;
    let gp = lookup(curve, b + delta)?;
    let gm = lookup(curve, b - delta)?;
    Ok(Bracket::new(b, (gp - g0) / delta, (g0 - gm) / delta))
}

/// Default bracket half-width, `b / 4`.
pub fn default_delta(b: f64) -> f64 {
    0.25 * b
}

/// Bracket at interior sample `k` of a curve sorted by `b`, from its two neighbours.
pub fn neighbour_bracket(curve: &[(f64, f64)], k: usize) -> Option<Bracket> {
    if k == 0 || k + 1 >= curve.len() {
        return None;
    }
    let (bm, gm) = curve[k - 1];
    let (b0, g0) = curve[k];
    let (bp, gp) = curve[k + 1];
    Some(Bracket::new(b0, (gp - g0) / (bp - b0), (g0 - gm) / (b0 - bm)))
}

/// The three terms of `r0(b)`:
/// `|log b|^-1/2`, `|(g + 1/2) / (b |log b|) - 1/2|`, `log|log b| / |log b|`.
pub fn r0_terms(b: f64, g: f64) -> Result<[f64; 3]> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(GlError::BOutOfRange(b));
    }
    let l = b.ln().abs();
    if b * l == 0.0 {
        return Err(GlError::R0Undefined(b));
    }
    Ok([l.powf(-0.5), ((g + 0.5) / (b * l) - 0.5).abs(), l.ln() / l])
}

pub fn r0(b: f64, g: f64) -> Result<f64> {
    Ok(r0_terms(b, g)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialCheck {
    /// `int (1 - |u|^2)^2 / |K_R|`.
    pub value: f64,
    /// `b |log b|`.
    pub budget: f64,
    pub ratio: f64,
    pub pass: bool,
}

pub fn potential_check(field: &DiscreteField, b: f64) -> PotentialCheck {
    let value = density_moments(field).potential;
    let budget = b * b.ln().abs();
    PotentialCheck {
        value,
        budget,
        ratio: value / budget,
        pass: value <= budget,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub min: f64,
    pub max: f64,
    pub variance: f64,
    /// `min <= 0.1` and `max >= 0.9`.
    pub non_constant: bool,
}

pub fn density_profile_check(field: &DiscreteField) -> DensityProfile {
    let k = field.values.len() as f64;
    let moduli: Vec<f64> = field.values.iter().map(|z| z.norm()).collect();
    let mean = crate::sum::compensated(moduli.iter().copied()) / k;
    let variance = crate::sum::compensated(moduli.iter().map(|m| (m - mean).powi(2))) / k;
    let min = field.min_modulus();
    let max = field.max_modulus();
    DensityProfile {
        min,
        max,
        variance,
        non_constant: min <= 0.1 && max >= 0.9,
    }
}

/// Length scales linking a cell to the tiles of the synthetic domain: a cell of side
/// `R` represents a tile of side `ell = R eps / sqrt(b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileScales {
    pub b: f64,
    pub epsilon: f64,
    pub ell: f64,
    /// `b ell^2 / (2 pi eps^2)`, the number of vortices per tile.
    pub quanta: f64,
}

impl TileScales {
    /// Checks `ell^2 in 2 pi b^-1 eps^2 N`.
    pub fn new(b: f64, epsilon: f64, ell: f64) -> Result<Self> {
        if !(b > 0.0 && b < 1.0) {
            return Err(GlError::BOutOfRange(b));
        }
        let quanta = b * ell * ell / (TAU * epsilon * epsilon);
        if quanta.round() < 1.0 || (quanta - quanta.round()).abs() > 1e-9 * quanta.max(1.0) {
            return Err(GlError::TileQuantization(quanta));
        }
        Ok(Self { b, epsilon, ell, quanta })
    }

    /// Scales for `N` vortices per tile, `ell = eps sqrt(2 pi N / b)`.
    pub fn for_count(b: f64, epsilon: f64, n_vortices: usize) -> Result<Self> {
        Self::new(b, epsilon, epsilon * (TAU * n_vortices as f64 / b).sqrt())
    }

    /// The `epsilon` for which `M` tiles span a unit domain.
    pub fn unit_domain_epsilon(b: f64, n_vortices: usize, tiles: usize) -> f64 {
        (b / (TAU * n_vortices as f64)).sqrt() / tiles as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileAggregate {
    pub scales: TileScales,
    pub tiles_per_side: usize,
    pub domain: SquareDomain,
    /// Sum of positive degrees per tile.
    pub tile_degree: Vec<i64>,
    /// `|D_j - b ell^2 / (2 pi eps^2)|` per tile.
    pub tile_deviation: Vec<f64>,
    pub distance: MeasureDistanceReport,
    /// Distance estimate divided by the domain measure.
    pub relative_distance: f64,
}

pub const TILE_DICTIONARY_DEPTH: usize = 6;

/// Copy one cell's vortex balls into an `M x M` tiling of `[0, M ell]^2` and compare
/// `b^-1 eps^2 sum 2 pi d_i delta_{a_i}` with the Lebesgue measure.
pub fn aggregate_tiles(
    balls: &[VortexBall],
    n_vortices: usize,
    tiles: usize,
    b: f64,
    epsilon: f64,
) -> Result<TileAggregate> {
    aggregate_tiles_at_depth(balls, n_vortices, tiles, b, epsilon, TILE_DICTIONARY_DEPTH)
}

pub fn aggregate_tiles_at_depth(
    balls: &[VortexBall],
    n_vortices: usize,
    tiles: usize,
    b: f64,
    epsilon: f64,
    depth: usize,
) -> Result<TileAggregate> {
    let scales = TileScales::for_count(b, epsilon, n_vortices)?;
    let ell = scales.ell;
    let stretch = epsilon / b.sqrt();
    let weight = TAU * epsilon * epsilon / b;
    let mut atoms = Vec::with_capacity(balls.len() * tiles * tiles);
    let mut tile_degree = Vec::with_capacity(tiles * tiles);
    for tj in 0..tiles {
        for ti in 0..tiles {
            let x = [(ti as f64 + 0.5) * ell, (tj as f64 + 0.5) * ell];
            let mut plus = 0;
            for ball in balls.iter().filter(|b| b.degree != 0) {
                atoms.push((
                    [x[0] + stretch * ball.center[0], x[1] + stretch * ball.center[1]],
                    weight * ball.degree as f64,
                ));
                plus += ball.degree.max(0);
            }
            tile_degree.push(plus);
        }
    }
    let tile_deviation = tile_degree.iter().map(|d| (*d as f64 - scales.quanta).abs()).collect();
    let domain = SquareDomain {
        lo: [0.0, 0.0],
        side: tiles as f64 * ell,
    };
    let distance = lipschitz_dual_distance(
        &DiscreteMeasure { atoms, density: 0.0 },
        &DiscreteMeasure::lebesgue(1.0),
        &domain,
        depth,
    )?;
    let relative_distance = distance.estimate / (domain.side * domain.side);
    Ok(TileAggregate {
        scales,
        tiles_per_side: tiles,
        domain,
        tile_degree,
        tile_deviation,
        distance,
        relative_distance,
    })
}

/// Sweep configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub bs: Vec<f64>,
    pub counts: Vec<usize>,
    pub kinds: Vec<InitKind>,
    /// Seed, tolerances and resolution floor. The resolution is raised to the rule
    /// for the smallest `b` and shared by every point.
    pub template: CellConfig,
    pub minimize: MinimizeSettings,
    pub jobs: usize,
}

/// Acceptance flags of one sweep row. `None` when the rule cannot be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowFlags {
    /// `g_est <= g_trial`.
    pub upper_bound: Option<bool>,
    /// `-1/2 <= g_est <= 0`.
    pub range: bool,
    /// `(g + 1/2) / ((b/2) |log b|)` in `[0.6, 1.4]`.
    pub asymptotic: bool,
    /// Potential density `<= b |log b|`.
    pub potential: bool,
    pub bracket_ordered: Option<bool>,
    /// Bracket midpoint within 30% of `-log(b) / 2`.
    pub derivative: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: GCurvePoint,
    pub bracket: Option<Bracket>,
    pub r0: f64,
    pub flags: RowFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// `g_est` non-decreasing in `b` (slack 1e-4).
    pub monotone: bool,
    /// Successive forward differences non-increasing (slack 1e-4); `None` below three points.
    pub concave: Option<bool>,
    /// `|zeta|` non-increasing towards small `b` (slack 0.1).
    pub zeta_trend: bool,
    pub notes: Vec<String>,
}

pub const INSUFFICIENT_POINTS: &str = "insufficient points";

/// Evaluate the rules on sorted points.
pub fn assemble_sweep(points: Vec<GCurvePoint>) -> Result<SweepReport> {
    let mut points = points;
    points.sort_by(|a, b| a.b.total_cmp(&b.b));
    if points.windows(2).any(|w| w[0].b >= w[1].b) {
        return Err(GlError::MissingSweepPoint(f64::NAN));
    }
    let curve: Vec<(f64, f64)> = points.iter().map(|p| (p.b, p.g_est)).collect();
    let mut notes = Vec::new();
    if points.len() < 3 {
        notes.push(INSUFFICIENT_POINTS.to_string());
    }
    let mut rows = Vec::with_capacity(points.len());
    for (k, mut point) in points.into_iter().enumerate() {
        let b = point.b;
        let bracket = neighbour_bracket(&curve, k);
        if let Some(br) = bracket {
            // Kinetic density from the energy identity g = b K - |u|^2 + |u|^4 / 2.
            let kin = (point.g_est + point.m2 - 0.5 * point.m4) / b;
            point.set_derivative(Some(br.lower), Some(br.upper), kin);
        } else {
            point.flags.push(INSUFFICIENT_POINTS.to_string());
        }
        let lb = b.ln().abs();
        let flags = RowFlags {
            upper_bound: point.g_trial.map(|t| point.g_est <= t + 1e-10),
            range: (-0.5..=0.0).contains(&point.g_est),
            asymptotic: {
                let q = (point.g_est + 0.5) / (0.5 * b * lb);
                (0.6..=1.4).contains(&q)
            },
            potential: point.potential <= b * lb,
            bracket_ordered: bracket.map(|br| br.ordered),
            derivative: bracket.map(|br| {
                let q = br.midpoint / (0.5 * lb);
                (0.7..=1.3).contains(&q)
            }),
        };
        rows.push(SweepRow {
            r0: r0(b, point.g_est)?,
            point,
            bracket,
            flags,
        });
    }
    let g: Vec<f64> = rows.iter().map(|r| r.point.g_est).collect();
    let bs: Vec<f64> = rows.iter().map(|r| r.point.b).collect();
    let monotone = g.windows(2).all(|w| w[0] <= w[1] + 1e-4);
    let concave = (g.len() >= 3).then(|| {
        let slopes: Vec<f64> = (0..g.len() - 1).map(|k| (g[k + 1] - g[k]) / (bs[k + 1] - bs[k])).collect();
        slopes.windows(2).all(|w| w[1] <= w[0] + 1e-4)
    });
    let zetas: Vec<f64> = rows.iter().map(|r| r.point.zeta.abs()).collect();
    let zeta_trend = zetas.windows(2).all(|w| w[0] <= w[1] + 0.1);
    Ok(SweepReport {
        rows,
        monotone,
        concave,
        zeta_trend,
        notes,
    })
}

/// Number of worker threads: `requested`, capped by `GLCELL_THREADS` when set.
pub fn worker_count(requested: usize) -> usize {
    let cap = std::env::var("GLCELL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&c| c > 0);
    let n = requested.max(1);
    cap.map_or(n, |c| n.min(c))
}

/// Shared resolution for every `b` of a sweep: the finest required by any of them.
pub fn sweep_template(settings: &SweepSettings) -> CellConfig {
    let b_min = settings.bs.iter().copied().fold(f64::INFINITY, f64::min);
    let largest = settings.counts.iter().copied().max().unwrap_or(1);
    let side = crate::grid::quantized_side(largest);
    let current = (side / settings.template.spacing()).ceil() as usize;
    CellConfig {
        n_vortices: largest,
        side,
        n: crate::grid::min_resolution(b_min, largest).max(current),
        ..settings.template
    }
}

/// Run `estimate_g` for every `b` (in parallel across `b`) and assemble the report.
pub fn run_sweep(settings: &SweepSettings) -> Result<SweepReport> {
    run_sweep_with_fields(settings).map(|(r, _)| r)
}

/// As [`run_sweep`], also returning the best minimizer for each `b`, sorted by `b`.
pub fn run_sweep_with_fields(settings: &SweepSettings) -> Result<(SweepReport, Vec<MinimizationResult>)> {
    if settings.bs.is_empty() {
        return Err(GlError::MissingSweepPoint(f64::NAN));
    }
    let template = sweep_template(settings);
    let workers = worker_count(settings.jobs);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| GlError::ThreadPool(e.to_string()))?;
    let results: Vec<Result<(GCurvePoint, MinimizationResult)>> = pool.install(|| {
        settings
            .bs
            .par_iter()
            .map(|&b| {
                let t = CellConfig { b, ..template };
                estimate_g(b, &settings.counts, &settings.kinds, &t, &settings.minimize)
            })
            .collect()
    });
    let mut runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    runs.sort_by(|x, y| x.0.b.total_cmp(&y.0.b));
    let (points, fields): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok((assemble_sweep(points)?, fields))
}

pub const CSV_COLUMNS: [&str; 17] = [
    "b",
    "N",
    "n",
    "g_est",
    "g_trial",
    "d_lower",
    "d_upper",
    "pot",
    "r0",
    "zeta",
    "pass_upper_bound",
    "pass_range",
    "pass_asymptotic",
    "pass_potential",
    "pass_bracket",
    "pass_derivative",
    "flags",
];

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn opt_flag(v: Option<bool>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepReport {
    /// CSV with the columns of [`CSV_COLUMNS`], one row per `b`.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let p = &r.point;
            let f = &r.flags;
            let fields = [
                format!("{:e}", p.b),
                p.n_vortices.to_string(),
                p.n.to_string(),
                format!("{:e}", p.g_est),
                opt_num(p.g_trial),
                opt_num(r.bracket.map(|b| b.lower)),
                opt_num(r.bracket.map(|b| b.upper)),
                format!("{:e}", p.potential),
                format!("{:e}", r.r0),
                format!("{:e}", p.zeta),
                opt_flag(f.upper_bound),
                f.range.to_string(),
                f.asymptotic.to_string(),
                f.potential.to_string(),
                opt_flag(f.bracket_ordered),
                opt_flag(f.derivative),
                p.flags.join(";"),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(b: f64) -> f64 {
        -0.5 - 0.5 * b * b.ln()
    }

    #[test]
    fn bracket_of_model_curve_contains_derivative() {
        let b = 0.02;
        let d = default_delta(b);
        let curve: Vec<(f64, f64)> = [b - d, b, b + d].iter().map(|&x| (x, model(x))).collect();
        let br = derivative_bracket(&curve, b, d).unwrap();
        let exact = -0.5 * b.ln() - 0.5;
        assert!(br.lower <= exact && exact <= br.upper, "{br:?} {exact}");
        assert!(br.ordered);
        let flat: Vec<(f64, f64)> = curve.iter().map(|&(x, _)| (x, -0.3)).collect();
        let br = derivative_bracket(&flat, b, d).unwrap();
        assert_eq!((br.lower, br.upper), (0.0, 0.0));
        assert!(matches!(derivative_bracket(&curve[..2], b, d), Err(GlError::MissingSweepPoint(_))));
    }

    #[test]
    fn r0_examples() {
        let t = r0_terms(0.1, 0.5 * 0.1 * 0.1f64.ln().abs() - 0.5).unwrap();
        assert!((t[0] - 0.659).abs() < 1e-3 && t[1].abs() < 1e-12 && (t[2] - 0.362).abs() < 1e-3);
        assert!((r0(0.1, 0.5 * 0.1 * 0.1f64.ln().abs() - 0.5).unwrap() - 0.659).abs() < 1e-3);
        let e = (-1.0f64).exp();
        let t = r0_terms(e, 0.0).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-12 && t[2].abs() < 1e-12);
        let t = r0_terms(0.1, -0.5).unwrap();
        assert_eq!(t[1], 0.5);
        assert!(matches!(r0(1.0, 0.0), Err(GlError::R0Undefined(_))));
    }

    #[test]
    fn r0_closed_terms_monotone() {
        let mut prev = [f64::INFINITY; 2];
        // log L / L decreases once L = |log b| exceeds e.
        let knee = (-(1f64).exp()).exp();
        for k in 1..40 {
            let b = (-(k as f64) * 0.25 - 1.0).exp();
            let t = r0_terms(b, -0.5).unwrap();
            assert!(t[0] <= prev[0]);
            if b < knee {
                assert!(t[2] <= prev[1] + 1e-15);
                prev[1] = t[2];
            }
            prev[0] = t[0];
        }
    }

    #[test]
    fn checks_on_uniform_state() {
        let g = crate::grid::Grid::unchecked(4, 32);
        let one = DiscreteField::constant(g, num_complex::Complex64::new(1.0, 0.0));
        let p = potential_check(&one, 0.1);
        assert!(p.pass && p.value == 0.0);
        let d = density_profile_check(&one);
        assert_eq!((d.min, d.max, d.variance), (1.0, 1.0, 0.0));
        assert!(!d.non_constant);
    }

    #[test]
    fn tile_quantization() {
        let b = 0.02;
        let s = TileScales::for_count(b, 0.01, 16).unwrap();
        assert!((s.quanta - 16.0).abs() < 1e-9);
        assert!(matches!(TileScales::new(b, 0.01, s.ell * 1.01), Err(GlError::TileQuantization(_))));
    }

    #[test]
    fn perfect_cell_tiles_approach_lebesgue() {
        let b = 0.02;
        let nv = 16;
        let r = crate::grid::quantized_side(nv);
        let s = r / 4.0;
        let balls: Vec<VortexBall> = (0..16)
            .map(|k| VortexBall {
                center: [-0.5 * r + ((k % 4) as f64 + 0.5) * s, -0.5 * r + ((k / 4) as f64 + 0.5) * s],
                radius: 0.1,
                degree: 1,
            })
            .collect();
        let eps = TileScales::unit_domain_epsilon(b, nv, 4);
        let agg = aggregate_tiles(&balls, nv, 4, b, eps).unwrap();
        assert!((agg.domain.side - 1.0).abs() < 1e-12);
        assert!(agg.tile_deviation.iter().all(|d| *d < 1e-9));
        // Transport to the Lebesgue measure costs at most the cell diameter per unit mass.
        let cell = 1.0 / 16.0;
        assert!(agg.relative_distance <= cell * 2f64.sqrt() / 2.0, "{}", agg.relative_distance);
        let coarse = aggregate_tiles_at_depth(&balls, nv, 4, b, eps, 2).unwrap();
        assert!(coarse.distance.estimate <= agg.distance.estimate);
    }

    #[test]
    fn sweep_rules_and_csv() {
        let mk = |b: f64, g: f64| GCurvePoint {
            b,
            n_vortices: 16,
            side: crate::grid::quantized_side(16),
            n: 600,
            g_est: g,
            g_trial: Some(g + 1e-3),
            d_lower: None,
            d_upper: None,
            potential: 0.5 * b,
            m2: 1.0 + 2.0 * g,
            m4: -2.0 * g,
            f1: None,
            f2: None,
            f3: 0.0,
            zeta: 0.0,
            per_count: Vec::new(),
            best_init: InitKind::Trial,
            status: crate::minimize::Status::Converged,
            iterations: 1,
            flags: Vec::new(),
        };
        let pts: Vec<GCurvePoint> = [0.025, 0.015, 0.02].iter().map(|&b| mk(b, model(b))).collect();
        let rep = assemble_sweep(pts).unwrap();
        assert!(rep.monotone && rep.concave == Some(true));
        assert!(rep.rows[1].bracket.is_some() && rep.rows[0].bracket.is_none());
        assert_eq!(rep.rows[1].flags.derivative, Some(true));
        let csv = rep.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(lines.count(), 3);
        let single = assemble_sweep(vec![mk(0.02, model(0.02))]).unwrap();
        assert!(single.notes.iter().any(|n| n == INSUFFICIENT_POINTS));
        assert_eq!(single.to_csv().lines().nth(1).unwrap().split(',').nth(5), Some(""));
    }

    #[test]
    fn thread_cap() {
        assert_eq!(worker_count(0), 1);
        assert!(worker_count(3) >= 1);
    }
}
