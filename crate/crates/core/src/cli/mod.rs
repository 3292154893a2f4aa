//! Command-line front end: dataset generation, fitting, evaluation, the `M`
//! sweep, the long-horizon study and a gradient check.
//!
//! Exit codes: 0 success, 1 invalid input or config, 2 numerical failure,
//! 3 I/O or file-format error. The optional `FILTEROP_THREADS` variable sets
//! the worker count.

pub mod config;
pub mod io;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adjoint;
use crate::dns::{generate_fine, DatasetKind, FilteredSnapshots, FineSnapshots};
use crate::eval::{
    convergence_sweep, error_curve, grid_search, search_candidates, ErrorCurve, FitContext, SweepConfig,
};
use crate::filterbank::{build_filter_matrix, FilterMatrix};
use crate::inference::{Hyperparams, InferredOperator, OptimizerConfig, RegularizationConfig, Route};
use crate::stencils::{convection_operator, make_grid, Grid};
use crate::{Error, Result};

use config::ExperimentConfig;
use io::{fmt_f64, read_matrix, render_svg, write_csv, write_matrix, Manifest, Series};

pub const THREADS_ENV: &str = "FILTEROP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "filterop", version, about = "Coarse-grid operators for filtered periodic convection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the fine solves and write U, U̇, Ū, Ū̇ for each dataset.
    Generate(GenerateArgs),
    /// Infer an operator with regularization search on the validation set.
    Fit(FitArgs),
    /// Error curve of an operator on a dataset.
    Eval(EvalArgs),
    /// Test error over a range of coarse grid sizes.
    Sweep(SweepArgs),
    /// Error curves on the long dataset.
    Long(LongArgs),
    /// Compare adjoint gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.n_ic=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::parse(&fs::read_to_string(path)?)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset to generate, or `all`.
    #[arg(long, default_value = "all")]
    pub dataset: String,
    /// Output directory (defaults to the config's `output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// `intrusive`, `df`, `embedded` or `baseline`.
    #[arg(long)]
    pub route: Route,
    /// Directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the config's fixed weights instead of searching the grid.
    #[arg(long)]
    pub no_search: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Operator file; the coarse baseline is used when omitted.
    #[arg(long)]
    pub operator: Option<PathBuf>,
    /// Label of the operator in outputs.
    #[arg(long, default_value = "baseline")]
    pub route: Route,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub dataset: DatasetKind,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write an SVG plot.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LongArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// `route=path` of an operator file; the baseline is always included.
    #[arg(long = "operator", value_name = "ROUTE=PATH")]
    pub operators: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 8)]
    pub max_m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative discrepancy.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Format { .. } => 3,
        e if e.is_numerical() => 2,
        _ => 1,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got '{value}'")))?;
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{THREADS_ENV} must be positive")));
    }
    #[cfg(feature = "parallel")]
    {
        // a pool that is already set up (e.g. in tests) is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Long(a) => cmd_long(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn output_dir(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| cfg.output.clone());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn coarse_filter(cfg: &ExperimentConfig, fine_grid: &Grid) -> Result<FilterMatrix> {
    build_filter_matrix(&cfg.filter_spec(cfg.filter), &make_grid(cfg.m)?, fine_grid)
}

fn dataset_manifest(cfg: &ExperimentConfig, kind: DatasetKind, fine: &FineSnapshots) -> Manifest {
    let mut m = Manifest::default();
    m.insert("dataset", kind);
    m.insert("n_ic", fine.n_ic);
    m.insert("n_t", fine.n_t);
    m.insert("horizon", fmt_f64(cfg.dataset(kind).horizon));
    m.insert("times", fine.times.iter().map(|t| fmt_f64(*t)).collect::<Vec<_>>().join(","));
    m.insert("seed", cfg.seed);
    m.insert("n_fine", cfg.n_fine);
    m.insert("m", cfg.m);
    m.insert("filter", cfg.filter);
    m.insert("h0", fmt_f64(cfg.h0));
    m.insert("radius_amplitude", fmt_f64(cfg.radius_amplitude));
    m.insert("z_max", cfg.z_max);
    m.insert("max_frequency", cfg.max_frequency);
    m.insert("noise_std", fmt_f64(cfg.noise_std));
    m.insert("abs_tol", fmt_f64(cfg.abs_tol));
    m.insert("rel_tol", fmt_f64(cfg.rel_tol));
    m.insert("U.shape", format!("{}x{}", fine.u.nrows(), fine.u.ncols()));
    m.insert("Ubar.shape", format!("{}x{}", cfg.m, fine.u.ncols()));
    m
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let kinds: Vec<DatasetKind> = if args.dataset == "all" {
        DatasetKind::ALL.to_vec()
    } else {
        vec![args.dataset.parse()?]
    };
    let dir = output_dir(&cfg, &args.out)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let fine_grid = make_grid(cfg.n_fine)?;
    let fine_op = convection_operator(&fine_grid);
    let w = coarse_filter(&cfg, &fine_grid)?;
    for kind in kinds {
        let params = cfg.dataset(kind);
        let ic = cfg.initial_conditions(params.n_ic);
        let fine = generate_fine(kind, &params, &fine_op, &fine_grid, &ic, &cfg.solver())?;
        let filtered = fine.filtered(&w)?;
        let sub = dir.join(kind.to_string());
        fs::create_dir_all(&sub)?;
        write_matrix(&sub.join("U.dfm"), &fine.u)?;
        write_matrix(&sub.join("Udot.dfm"), &fine.udot)?;
        write_matrix(&sub.join("Ubar.dfm"), &filtered.ubar)?;
        write_matrix(&sub.join("Ubar_dot.dfm"), &filtered.ubar_dot)?;
        dataset_manifest(&cfg, kind, &fine).write(&sub.join("manifest.txt"))?;
        println!(
            "{kind}: {} trajectories x {} times, U {}x{}, Ubar {}x{}",
            fine.n_ic,
            fine.n_t,
            fine.u.nrows(),
            fine.u.ncols(),
            filtered.ubar.nrows(),
            filtered.ubar.ncols()
        );
    }
    Ok(())
}

struct Layout {
    n_ic: usize,
    n_t: usize,
    times: Vec<f64>,
}

fn read_layout(dir: &Path) -> Result<Layout> {
    let path = dir.join("manifest.txt");
    let manifest = Manifest::read(&path)?;
    let n_ic = manifest.parse_value("n_ic", &path)?;
    let n_t = manifest.parse_value("n_t", &path)?;
    let times = manifest
        .get("times", &path)?
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Format {
            path: path.display().to_string(),
            message: "bad time list".into(),
        })?;
    Ok(Layout { n_ic, n_t, times })
}

fn load_filtered(data: &Path, kind: DatasetKind, m: usize) -> Result<FilteredSnapshots> {
    let dir = data.join(kind.to_string());
    let layout = read_layout(&dir)?;
    let ubar = read_matrix(&dir.join("Ubar.dfm"))?;
    let ubar_dot = read_matrix(&dir.join("Ubar_dot.dfm"))?;
    if ubar.nrows() != m {
        return Err(Error::InvalidArgument(format!(
            "{kind} data is filtered to M = {}, config says m = {m}",
            ubar.nrows()
        )));
    }
    let snaps = FilteredSnapshots {
        ubar,
        ubar_dot,
        times: layout.times,
        n_ic: layout.n_ic,
        n_t: layout.n_t,
    };
    snaps.check_trajectories()?;
    Ok(snaps)
}

fn load_fine(data: &Path, kind: DatasetKind, n: usize) -> Result<FineSnapshots> {
    let dir = data.join(kind.to_string());
    let layout = read_layout(&dir)?;
    let u = read_matrix(&dir.join("U.dfm"))?;
    let udot = read_matrix(&dir.join("Udot.dfm"))?;
    if u.nrows() != n || udot.dim() != u.dim() || u.ncols() != layout.n_ic * layout.n_t {
        return Err(Error::InvalidArgument(format!(
            "{kind} fine data has shape {}x{}, expected {n} rows and {} columns",
            u.nrows(),
            u.ncols(),
            layout.n_ic * layout.n_t
        )));
    }
    Ok(FineSnapshots {
        u,
        udot,
        times: layout.times,
        n_ic: layout.n_ic,
        n_t: layout.n_t,
    })
}

fn fixed_candidate(route: Route, reg: &RegularizationConfig) -> Hyperparams {
    match route {
        Route::Baseline => Hyperparams::default(),
        Route::Intrusive => Hyperparams {
            lambda: reg.lambda,
            ..Hyperparams::default()
        },
        Route::DerivativeFit | Route::Embedded => Hyperparams {
            lambda_prior: reg.lambda_prior,
            lambda_stab: reg.lambda_stab,
            ..Hyperparams::default()
        },
    }
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let dir = output_dir(&cfg, &args.out)?;
    let fine_grid = make_grid(cfg.n_fine)?;
    let fine_op = convection_operator(&fine_grid);
    let w = coarse_filter(&cfg, &fine_grid)?;
    let train = load_filtered(&args.data, DatasetKind::Train, cfg.m)?;
    let valid = load_filtered(&args.data, DatasetKind::Valid, cfg.m)?;
    let train_fine = match args.route {
        Route::Intrusive => Some(load_fine(&args.data, DatasetKind::Train, cfg.n_fine)?),
        _ => None,
    };
    let mut ctx = FitContext::new(&fine_op, &w, train_fine.as_ref(), &train);
    ctx.probe_factor = cfg.probe();
    let solver = cfg.solver();
    let result = if args.no_search {
        let candidate = fixed_candidate(args.route, &cfg.regularization);
        search_candidates(args.route, &ctx, &valid, &[candidate], &solver, &cfg.optimizer)?
    } else {
        grid_search(args.route, &ctx, &valid, &cfg.regularization, &cfg.embedded_grid, &solver, &cfg.optimizer)?
    };

    let op_path = dir.join(format!("operator_{}.dfm", args.route));
    write_matrix(&op_path, &result.best.matrix)?;
    let rows: Vec<Vec<String>> = result
        .table
        .iter()
        .map(|p| {
            vec![
                fmt_f64(p.hyperparams.lambda),
                fmt_f64(p.hyperparams.lambda_prior),
                fmt_f64(p.hyperparams.lambda_stab),
                fmt_f64(p.valid_error),
            ]
        })
        .collect();
    write_csv(
        &dir.join(format!("grid_{}.csv", args.route)),
        &["lambda", "lambda_prior", "lambda_stab", "valid_error"],
        &rows,
    )?;
    let h = result.best.hyperparams;
    println!(
        "{}: validation error {:.6e} at lambda = {:e}, lambda_prior = {:e}, lambda_stab = {:e}; wrote {}",
        args.route,
        result.best_error,
        h.lambda,
        h.lambda_prior,
        h.lambda_stab,
        op_path.display()
    );
    Ok(())
}

fn load_operator(path: &Path, route: Route, m: usize) -> Result<InferredOperator> {
    let matrix = read_matrix(path)?;
    if matrix.dim() != (m, m) {
        return Err(Error::InvalidArgument(format!(
            "operator {} is {}x{}, expected {m}x{m}",
            path.display(),
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("operator {} has non-finite entries", path.display())));
    }
    Ok(InferredOperator::new(matrix, route, Hyperparams::default()).with_provenance(path.display().to_string()))
}

fn baseline_operator(m: usize) -> Result<InferredOperator> {
    Ok(InferredOperator::baseline(&convection_operator(&make_grid(m)?)))
}

fn write_curve(path: &Path, curve: &ErrorCurve) -> Result<()> {
    let rows: Vec<Vec<String>> = curve
        .times
        .iter()
        .zip(&curve.errors)
        .map(|(t, e)| vec![fmt_f64(*t), fmt_f64(*e)])
        .collect();
    write_csv(path, &["time", "error"], &rows)
}

fn curve_series(curve: &ErrorCurve) -> Series {
    Series {
        label: curve.route.to_string(),
        points: curve.times.iter().copied().zip(curve.errors.iter().copied()).collect(),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let dir = output_dir(&cfg, &args.out)?;
    let data = load_filtered(&args.data, args.dataset, cfg.m)?;
    let op = match &args.operator {
        Some(path) => load_operator(path, args.route, cfg.m)?,
        None => baseline_operator(cfg.m)?,
    };
    let curve = error_curve(&op, &data, args.dataset, &cfg.solver())?;
    let stem = format!("curve_{}_{}", args.route, args.dataset);
    write_curve(&dir.join(format!("{stem}.csv")), &curve)?;
    if args.svg {
        let svg = render_svg(
            &format!("{} on {}", args.route, args.dataset),
            "t",
            "relative error",
            &[curve_series(&curve)],
            true,
        );
        fs::write(dir.join(format!("{stem}.svg")), svg)?;
    }
    println!("{curve}");
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.config.load()?;
    if let Some(&m) = cfg.m_values.last().filter(|&&m| m > cfg.n_fine) {
        return Err(Error::InvalidArgument(format!("sweep size M = {m} exceeds n_fine = {}", cfg.n_fine)));
    }
    let dir = output_dir(&cfg, &args.out)?;
    let fine_grid = make_grid(cfg.n_fine)?;
    let fine_op = convection_operator(&fine_grid);
    let train = load_fine(&args.data, DatasetKind::Train, cfg.n_fine)?;
    let valid = load_fine(&args.data, DatasetKind::Valid, cfg.n_fine)?;
    let test = load_fine(&args.data, DatasetKind::Test, cfg.n_fine)?;
    let sweep = SweepConfig {
        m_values: cfg.m_values.clone(),
        routes: cfg.sweep_routes.clone(),
        filters: cfg.filters.iter().map(|k| cfg.filter_spec(*k)).collect(),
        fine_op: &fine_op,
        train: &train,
        valid: &valid,
        test: &test,
        reg: cfg.regularization.clone(),
        embedded_grid: cfg.embedded_grid.clone(),
        solver: cfg.solver(),
        optimizer: OptimizerConfig {
            iterations: cfg.sweep_embedded_iterations,
            ..cfg.optimizer
        },
        probe_factor: cfg.probe(),
    };
    let result = convergence_sweep(&sweep)?;
    let rows: Vec<Vec<String>> = result
        .cells
        .iter()
        .map(|c| {
            vec![
                c.filter.to_string(),
                c.route.to_string(),
                c.m.to_string(),
                fmt_f64(c.hyperparams.lambda_prior),
                fmt_f64(c.hyperparams.lambda_stab),
                fmt_f64(c.test_error),
            ]
        })
        .collect();
    write_csv(
        &dir.join("sweep.csv"),
        &["filter", "route", "M", "lambda_prior", "lambda_stab", "avg_error"],
        &rows,
    )?;
    let mut series: Vec<Series> = Vec::new();
    for c in &result.cells {
        let label = format!("{} {}", c.filter, c.route);
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((c.m as f64, c.test_error)),
            None => series.push(Series {
                label,
                points: vec![(c.m as f64, c.test_error)],
            }),
        }
        if let Some(f) = &c.failure {
            eprintln!("warning: {} {} M = {}: {f}", c.filter, c.route, c.m);
        }
    }
    fs::write(
        dir.join("sweep.svg"),
        render_svg("time-averaged test error", "M", "error", &series, true),
    )?;
    println!("wrote {} sweep cells to {}", result.cells.len(), dir.join("sweep.csv").display());
    Ok(())
}

fn cmd_long(args: &LongArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let dir = output_dir(&cfg, &args.out)?;
    let data = load_filtered(&args.data, DatasetKind::Long, cfg.m)?;
    let mut ops = vec![baseline_operator(cfg.m)?];
    for spec in &args.operators {
        let (route, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected ROUTE=PATH, got '{spec}'")))?;
        ops.push(load_operator(Path::new(path), route.parse()?, cfg.m)?);
    }
    let curves = crate::eval::long_horizon_study(&ops, &data, &cfg.solver())?;
    for curve in &curves {
        write_curve(&dir.join(format!("long_{}.csv", curve.route)), curve)?;
        println!("{curve}");
    }
    if args.svg {
        let series: Vec<Series> = curves.iter().map(curve_series).collect();
        fs::write(dir.join("long.svg"), render_svg("long horizon", "t", "relative error", &series, true))?;
    }
    Ok(())
}

/// Worst discrepancies found by [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|fd - adjoint| / max|adjoint|` over all entries and instances.
    pub finite_difference: f64,
    /// Largest relative change of the gradient across checkpoint strides.
    pub stride: f64,
}

/// Random instances with `M ≤ max_m`, checked against central differences.
pub fn gradient_check(instances: usize, max_m: usize, seed: u64) -> Result<GradCheck> {
    if max_m == 0 {
        return Err(Error::InvalidArgument("max_m must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut report = GradCheck {
        finite_difference: 0.0,
        stride: 0.0,
    };
    let mut shape_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for _ in 0..instances {
        let m = shape_rng.random_range(1..=max_m);
        let t = shape_rng.random_range(0.1..1.0);
        let n_steps = shape_rng.random_range(5..40);
        let a = Array2::from_shape_vec((m, m), normal(m * m)).expect("shape");
        let u0 = Array1::from(normal(m));
        let target = Array1::from(normal(m));
        let (_, g) = adjoint::gradient(a.view(), u0.view(), t, n_steps, target.view())?;
        let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let loss = |b: &Array2<f64>| -> Result<f64> {
            let (u, _) = adjoint::forward(b.view(), u0.view(), t, n_steps)?;
            Ok((&u - &target).mapv(|v| v * v).sum())
        };
        let eps = 1e-6;
        for i in 0..m {
            for j in 0..m {
                let (mut p, mut q) = (a.clone(), a.clone());
                p[[i, j]] += eps;
                q[[i, j]] -= eps;
                let fd = (loss(&p)? - loss(&q)?) / (2.0 * eps);
                report.finite_difference = report.finite_difference.max((fd - g[[i, j]]).abs() / scale);
            }
        }
        for stride in [1, 10, n_steps] {
            let (_, gs) = adjoint::gradient_with_stride(a.view(), u0.view(), t, n_steps, target.view(), stride)?;
            let d = (&gs - &g).iter().map(|v| v.abs()).fold(0.0, f64::max);
            report.stride = report.stride.max(d / scale);
        }
    }
    Ok(report)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let r = gradient_check(args.instances, args.max_m, args.seed)?;
    println!("max relative finite-difference discrepancy: {:.3e}", r.finite_difference);
    println!("max relative checkpoint-stride discrepancy: {:.3e}", r.stride);
    if r.finite_difference > args.tolerance {
        return Err(Error::RouteFailure(format!(
            "gradient check discrepancy {:.3e} exceeds {:.1e}",
            r.finite_difference, args.tolerance
        )));
    }
    Ok(())
}
