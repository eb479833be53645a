use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use glcell::analysis::{self, SweepReport, SweepSettings};
use glcell::grid::{min_resolution, quantized_side};
use glcell::minimize::{self, InitKind, Method, MinimizeSettings, Status};
use glcell::snapshot::{self, Snapshot};
use glcell::trial::{self, trial_resolution};
use glcell::vortices::{self, DEFAULT_C_STAR};
use glcell::{build_grid, CellConfig, DiscreteField, EnergyBreakdown};

#[derive(Parser, Debug)]
#[command(name = "glcell", version, about = "Ginzburg-Landau energy of a magnetic-periodic cell")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Minimize the cell energy from one initialization.
    Minimize(MinimizeArgs),
    /// Build the lattice trial state and compare its energy with the prediction.
    Trial(CommonArgs),
    /// Locate vortex balls and classify unit squares of a field snapshot.
    Vortices(VorticesArgs),
    /// Estimate g(b) over a list of b values.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Field strength, 0 < b < 1 (comma-separated list for sweep).
    #[arg(long)]
    b: Option<String>,
    /// Number of vortices in the cell.
    #[arg(long = "N")]
    n_vortices: Option<usize>,
    /// Samples per side; defaults to the finest spacing rule for b.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MinimizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// uniform, random, trial or zero.
    #[arg(long)]
    init: Option<InitKind>,
    /// conjugate-gradient or gradient-flow.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args, Debug)]
struct VorticesArgs {
    /// Field snapshot to analyse.
    snapshot: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
    /// Energy threshold for good squares.
    #[arg(long)]
    c_star: Option<f64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated initializations, minimum taken per b.
    #[arg(long)]
    init: Option<String>,
    /// Parallel workers across b values (capped by GLCELL_THREADS).
    #[arg(long)]
    jobs: Option<usize>,
    /// Extra report to print; only `acceptance` is known.
    #[arg(long)]
    report: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum BValue {
    One(f64),
    Many(Vec<f64>),
}

/// Run configuration file. Every key is optional; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    b: Option<BValue>,
    #[serde(rename = "N")]
    n_vortices: Option<usize>,
    n: Option<usize>,
    seed: Option<u64>,
    grad_tol: Option<f64>,
    max_iter: Option<usize>,
    init: Option<Vec<InitKind>>,
    method: Option<Method>,
    out: Option<PathBuf>,
    c_star: Option<f64>,
    jobs: Option<usize>,
}

struct Resolved {
    bs: Vec<f64>,
    n_vortices: usize,
    n: Option<usize>,
    seed: u64,
    grad_tol: f64,
    max_iter: usize,
    out: PathBuf,
    file: RunConfig,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|e| anyhow!("invalid {what} {t:?}: {e}")))
        .collect()
}

fn resolve(common: &CommonArgs, need_b: bool) -> Result<Resolved> {
    let file: RunConfig = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    let bs = match (&common.b, &file.b) {
        (Some(s), _) => parse_list::<f64>(s, "b")?,
        (None, Some(BValue::One(b))) => vec![*b],
        (None, Some(BValue::Many(v))) => v.clone(),
        (None, None) => Vec::new(),
    };
    if need_b && bs.is_empty() {
        return Err(UsageError("missing required value: --b".into()).into());
    }
    let defaults = CellConfig::new(0.5, 1, 16);
    Ok(Resolved {
        bs,
        n_vortices: common.n_vortices.or(file.n_vortices).unwrap_or(16),
        n: common.n.or(file.n),
        seed: common.seed.or(file.seed).unwrap_or(0),
        grad_tol: common.grad_tol.or(file.grad_tol).unwrap_or(defaults.grad_tol),
        max_iter: common.max_iter.or(file.max_iter).unwrap_or(defaults.max_iter),
        out: common.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from(".")),
        file,
    })
}

impl Resolved {
    fn single_b(&self) -> Result<f64> {
        match self.bs.as_slice() {
            [b] => Ok(*b),
            _ => bail!("expected a single b, got {}", self.bs.len()),
        }
    }

    /// Config at `b`; without `--n`, the coarsest resolution meeting the spacing rule
    /// that also suits the trial tiling.
    fn cell(&self, b: f64) -> CellConfig {
        let n = self.n.unwrap_or_else(|| {
            let floor = min_resolution(b, self.n_vortices).max(16);
            trial_resolution(floor, self.n_vortices).unwrap_or(floor)
        });
        CellConfig {
            b,
            n_vortices: self.n_vortices,
            side: quantized_side(self.n_vortices),
            n,
            seed: self.seed,
            grad_tol: self.grad_tol,
            max_iter: self.max_iter,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct MinimizeOutput<'a> {
    config: &'a CellConfig,
    init: InitKind,
    method: Method,
    status: Status,
    iterations: usize,
    restarts: usize,
    g: f64,
    initial_energy: f64,
    grad_norm: f64,
    relative_grad: f64,
    energy: &'a EnergyBreakdown,
}

fn cmd_minimize(args: &MinimizeArgs) -> Result<u8> {
    let r = resolve(&args.common, true)?;
    let b = r.single_b()?;
    let config = r.cell(b);
    let init = args
        .init
        .or_else(|| r.file.init.as_ref().and_then(|v| v.first().copied()))
        .unwrap_or(InitKind::Trial);
    let method = match &args.method {
        Some(m) => serde_json::from_value(serde_json::Value::String(m.clone()))
            .map_err(|_| anyhow!("unknown method {m:?} (expected conjugate-gradient or gradient-flow)"))?,
        None => r.file.method.unwrap_or_default(),
    };
    let start = minimize::init_state(init, &config, config.seed)?;
    let settings = MinimizeSettings {
        method,
        ..MinimizeSettings::from_config(&config)
    };
    let result = minimize::minimize_labelled(&start, b, &settings, init.label())?;
    fs::create_dir_all(&r.out)?;
    snapshot::write_field(&r.out.join("field.glc"), &result.field, b)?;
    write_json(
        &r.out.join("result.json"),
        &MinimizeOutput {
            config: &config,
            init,
            method,
            status: result.status,
            iterations: result.iterations,
            restarts: result.restarts,
            g: result.g(),
            initial_energy: result.initial_energy,
            grad_norm: result.grad_norm,
            relative_grad: result.relative_grad,
            energy: &result.energy,
        },
    )?;
    println!(
        "g = {:.10}  status = {:?}  iterations = {}",
        result.g(),
        result.status,
        result.iterations
    );
    Ok(if result.converged() { 0 } else { 2 })
}

#[derive(Serialize)]
struct TrialOutput {
    #[serde(flatten)]
    bound: trial::UpperBoundReport,
    boundary_winding: i64,
    rings: trial::RingEstimates,
}

fn cmd_trial(args: &CommonArgs) -> Result<u8> {
    let r = resolve(args, true)?;
    let b = r.single_b()?;
    let config = r.cell(b);
    let grid = build_grid(&config)?;
    let state = trial::build_trial(b, config.n_vortices, &grid)?;
    let bound = trial::upper_bound_report(&state)?;
    let out = TrialOutput {
        bound,
        boundary_winding: vortices::boundary_winding(&state.u)?,
        rings: trial::energy_ring_estimates(&state.green, b),
    };
    fs::create_dir_all(&r.out)?;
    snapshot::write_field(&r.out.join("trial.glc"), &state.u, b)?;
    write_json(&r.out.join("report.json"), &out)?;
    println!("g_trial = {:.5}", bound.g_trial);
    println!("predicted = {:.5}", bound.predicted);
    println!("gap = {:.5}", bound.gap);
    Ok(0)
}

fn cmd_vortices(args: &VorticesArgs) -> Result<u8> {
    let r = resolve(&args.common, false)?;
    let snap = Snapshot::read(&args.snapshot)?;
    let field: DiscreteField = snap.to_field()?;
    let b = match r.bs.as_slice() {
        [] => snap.header.b,
        [b] => *b,
        _ => bail!("expected a single b"),
    };
    let c_star = args.c_star.or(r.file.c_star).unwrap_or(DEFAULT_C_STAR);
    let balls = vortices::find_balls(&field, b)?;
    let squares = vortices::classify_squares(&field, b, c_star, &balls.balls)?;
    let vort = vortices::vorticity(&field);
    fs::create_dir_all(&r.out)?;
    write_json(&r.out.join("balls.json"), &balls.balls)?;
    let mut lines = fs::File::create(r.out.join("squares.jsonl"))?;
    for s in &squares.squares {
        serde_json::to_writer(&mut lines, s)?;
        lines.write_all(b"\n")?;
    }
    Snapshot::from_vorticity(&vort, b).write(&r.out.join("vorticity.glc"))?;
    println!(
        "balls = {}  positive degree = {}  negative degree = {}  good squares = {}/{}",
        balls.balls.len(),
        balls.positive_degree(),
        balls.negative_degree(),
        squares.n_good,
        squares.squares.len()
    );
    Ok(0)
}

fn mark(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "pass",
        Some(false) => "FAIL",
        None => "n/a",
    }
}

fn acceptance_table(report: &SweepReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:<12} {:<8} {:<11} {:<10} {:<8} {:<11}\n",
        "b", "upper-bound", "range", "asymptotic", "potential", "bracket", "derivative"
    ));
    for row in &report.rows {
        let f = &row.flags;
        out.push_str(&format!(
            "{:<10} {:<12} {:<8} {:<11} {:<10} {:<8} {:<11}\n",
            row.point.b,
            mark(f.upper_bound),
            mark(Some(f.range)),
            mark(Some(f.asymptotic)),
            mark(Some(f.potential)),
            mark(f.bracket_ordered),
            mark(f.derivative)
        ));
    }
    out.push_str(&format!("monotone in b: {}\n", mark(Some(report.monotone))));
    out.push_str(&format!("concave in b: {}\n", mark(report.concave)));
    out.push_str(&format!("zeta trend: {}\n", mark(Some(report.zeta_trend))));
    out
}

fn cmd_sweep(args: &SweepArgs) -> Result<u8> {
    let r = resolve(&args.common, true)?;
    if let Some(rep) = &args.report {
        if rep != "acceptance" {
            bail!("unknown report {rep:?} (expected acceptance)");
        }
    }
    let kinds = match &args.init {
        Some(s) => parse_list::<InitKind>(s, "init")?,
        None => r.file.init.clone().unwrap_or_else(|| vec![InitKind::Trial]),
    };
    let mut template = r.cell(r.bs.iter().copied().fold(f64::INFINITY, f64::min));
    template.seed = r.seed;
    let settings = SweepSettings {
        bs: r.bs.clone(),
        counts: vec![r.n_vortices],
        kinds,
        template,
        minimize: MinimizeSettings::from_config(&template),
        jobs: args.jobs.or(r.file.jobs).unwrap_or(1),
    };
    let (report, fields) = analysis::run_sweep_with_fields(&settings)?;
    fs::create_dir_all(&r.out)?;
    for (row, result) in report.rows.iter().zip(&fields) {
        let dir = r.out.join(format!("b_{}", row.point.b));
        fs::create_dir_all(&dir)?;
        snapshot::write_field(&dir.join("field.glc"), &result.field, row.point.b)?;
    }
    fs::write(r.out.join("sweep.csv"), report.to_csv())?;
    write_json(&r.out.join("sweep.json"), &report)?;
    print!("{}", report.to_csv());
    if args.report.is_some() {
        print!("{}", acceptance_table(&report));
    }
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Minimize(a) => cmd_minimize(a),
        Command::Trial(a) => cmd_trial(a),
        Command::Vortices(a) => cmd_vortices(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                let name = match &cli.command {
                    Command::Minimize(_) => "minimize",
                    Command::Trial(_) => "trial",
                    Command::Vortices(_) => "vortices",
                    Command::Sweep(_) => "sweep",
                };
                let mut cmd = Cli::command();
                if let Some(sub) = cmd.find_subcommand_mut(name) {
                    let mut sub = sub.clone().bin_name(format!("glcell {name}"));
                    eprintln!("\n{}", sub.render_usage());
                }
            }
            ExitCode::from(1)
        }
    }
}
