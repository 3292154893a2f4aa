//! Error metrics, regularization search, the convergence sweep over `M` and
//! the long-horizon study.

use std::fmt;

use ndarray::{s, Array2, ArrayView2};

use crate::dns::{integrate, DatasetKind, FilteredSnapshots, FineSnapshots, SolverConfig};
use crate::filterbank::{build_filter_matrix, FilterKind, FilterMatrix, FilterSpec};
use crate::inference::{
    fit_embedded, intrusive_fit, DerivativeFitSystem, Hyperparams, InferredOperator,
    OptimizerConfig, ReconstructionSystem, RegularizationConfig, Route,
};
use crate::stencils::{convection_operator, diffusion_operator, make_grid, CirculantOperator};
use crate::{par, Error, Result};

/// Mean relative error of an operator's predictions over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub times: Vec<f64>,
    pub errors: Vec<f64>,
    pub dataset: DatasetKind,
    pub route: Route,
    pub m: usize,
}

impl ErrorCurve {
    pub fn time_averaged(&self) -> f64 {
        time_averaged_error(&self.errors)
    }
}

/// Relative L2 error `‖p - r‖ / ‖r‖`, `0` when both vanish.
pub fn relative_error(prediction: ndarray::ArrayView1<f64>, reference: ndarray::ArrayView1<f64>) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (p, r) in prediction.iter().zip(reference) {
        diff += (p - r) * (p - r);
        norm += r * r;
    }
    if diff == 0.0 {
        return 0.0;
    }
    if !diff.is_finite() {
        return f64::INFINITY;
    }
    (diff / norm).sqrt()
}

/// Error of `op` on every time stamp of `data`, starting from the `t = 0`
/// states. All trajectories are solved together as one block. If the solve
/// fails part way, that time and all later ones are `+∞`.
pub fn error_curve(
    op: &InferredOperator,
    data: &FilteredSnapshots,
    dataset: DatasetKind,
    cfg: &SolverConfig,
) -> Result<ErrorCurve> {
    data.check_trajectories()?;
    let m = data.dim();
    if op.matrix.dim() != (m, m) {
        return Err(Error::dim("evaluated operator", m, op.matrix.nrows()));
    }
    let errors = trajectory_errors(op.matrix.view(), data, cfg)?;
    Ok(ErrorCurve {
        times: data.times.clone(),
        errors,
        dataset,
        route: op.route,
        m,
    })
}

fn trajectory_errors(op: ArrayView2<f64>, data: &FilteredSnapshots, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let mut errors = vec![f64::INFINITY; data.n_t];
    let y0 = data.states_at(0);
    let outcome = integrate(&op, y0.view(), &data.times, cfg, |k, y| {
        let mut sum = 0.0;
        for i in 0..data.n_ic {
            sum += relative_error(y.column(i), data.state(i, k));
        }
        errors[k] = sum / data.n_ic as f64;
    });
    match outcome {
        Ok(_) => Ok(errors),
        Err(e) if e.is_numerical() => Ok(errors),
        Err(e) => Err(e),
    }
}

/// Arithmetic mean; `+∞` if any entry is infinite, `0` for an empty curve.
pub fn time_averaged_error(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().sum::<f64>() / errors.len() as f64
}

/// One evaluated regularization candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub hyperparams: Hyperparams,
    /// Time-averaged validation error, `+∞` on blow-up or failed fit.
    pub valid_error: f64,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: InferredOperator,
    pub best_error: f64,
    pub table: Vec<GridPoint>,
}

/// Everything the fits need for one `(filter, M)` combination.
pub struct FitContext<'a> {
    pub fine_op: &'a CirculantOperator,
    pub filter: &'a FilterMatrix,
    pub a_m: Array2<f64>,
    pub d_m: Array2<f64>,
    /// Fine training snapshots, needed only by the intrusive route.
    pub train_fine: Option<&'a FineSnapshots>,
    pub train: &'a FilteredSnapshots,
    /// Step budget of the stiffness probe as a multiple of the baseline's
    /// step count; `None` disables the probe.
    pub probe_factor: Option<f64>,
}

/// Default for [`FitContext::probe_factor`].
pub const DEFAULT_PROBE_FACTOR: f64 = 10.0;

impl<'a> FitContext<'a> {
    pub fn new(
        fine_op: &'a CirculantOperator,
        filter: &'a FilterMatrix,
        train_fine: Option<&'a FineSnapshots>,
        train: &'a FilteredSnapshots,
    ) -> Self {
        let coarse = filter.coarse_grid();
        FitContext {
            fine_op,
            filter,
            a_m: convection_operator(coarse).to_dense(),
            d_m: diffusion_operator(coarse).to_dense(),
            train_fine,
            train,
            probe_factor: Some(DEFAULT_PROBE_FACTOR),
        }
    }
}

/// Solves the first validation trajectory with `op` under a step budget.
fn probe(op: ArrayView2<f64>, valid: &FilteredSnapshots, solver: &SolverConfig, max_steps: usize) -> Result<usize> {
    let y0 = valid.states_at(0);
    let cfg = SolverConfig { max_steps, ..*solver };
    integrate(&op, y0.slice(s![.., 0..1]), &valid.times, &cfg, |_, _| {})
}

fn regularization_weight(h: &Hyperparams) -> f64 {
    h.lambda + h.lambda_prior + h.lambda_stab
}

/// Fits `route` once per regularization candidate, scores each on `valid`
/// and returns the lowest time-averaged error. Ties go to the larger total
/// regularization.
///
/// Candidates: intrusive searches `reg.grid` for `λ`; the derivative fit
/// searches every `(λ_prior, λ_stab)` pair of `reg.grid`; the embedded route
/// trains once per entry of `embedded_grid`; the baseline has no candidates.
pub fn grid_search(
    route: Route,
    ctx: &FitContext<'_>,
    valid: &FilteredSnapshots,
    reg: &RegularizationConfig,
    embedded_grid: &[(f64, f64)],
    solver: &SolverConfig,
    opt: &OptimizerConfig,
) -> Result<GridSearchResult> {
    reg.validate()?;
    valid.check_trajectories()?;
    if route != Route::Baseline && reg.grid.is_empty() {
        return Err(Error::InvalidArgument("regularization grid is empty".into()));
    }
    let candidates: Vec<Hyperparams> = match route {
        Route::Baseline => vec![Hyperparams::default()],
        Route::Intrusive => reg
            .grid
            .iter()
            .map(|&lambda| Hyperparams {
                lambda,
                ..Hyperparams::default()
            })
            .collect(),
        Route::DerivativeFit => reg
            .grid
            .iter()
            .flat_map(|&lambda_prior| {
                reg.grid.iter().map(move |&lambda_stab| Hyperparams {
                    lambda_prior,
                    lambda_stab,
                    ..Hyperparams::default()
                })
            })
            .collect(),
        Route::Embedded => {
            if embedded_grid.is_empty() {
                return Err(Error::InvalidArgument("embedded regularization grid is empty".into()));
            }
            embedded_grid
                .iter()
                .map(|&(lambda_prior, lambda_stab)| Hyperparams {
                    lambda_prior,
                    lambda_stab,
                    ..Hyperparams::default()
                })
                .collect()
        }
    };

    search_candidates(route, ctx, valid, &candidates, solver, opt)
}

/// Fits and scores an explicit list of candidates; see [`grid_search`].
pub fn search_candidates(
    route: Route,
    ctx: &FitContext<'_>,
    valid: &FilteredSnapshots,
    candidates: &[Hyperparams],
    solver: &SolverConfig,
    opt: &OptimizerConfig,
) -> Result<GridSearchResult> {
    valid.check_trajectories()?;
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no regularization candidates".into()));
    }
    if valid.dim() != ctx.a_m.nrows() {
        return Err(Error::dim("validation snapshots", ctx.a_m.nrows(), valid.dim()));
    }
    let fitter = Fitter::new(route, ctx)?;
    // Strongly damped candidates can need orders of magnitude more explicit
    // steps than the baseline. A cheap one-trajectory solve under a budget
    // screens them out as blow-ups before the full validation solve.
    let budget = match ctx.probe_factor {
        Some(f) if route != Route::Baseline => probe(ctx.a_m.view(), valid, solver, solver.max_steps)
            .ok()
            .map(|steps| ((f * steps.max(1) as f64).ceil() as usize).min(solver.max_steps)),
        _ => None,
    };
    let results: Vec<(GridPoint, Option<InferredOperator>)> = par::map_slice(candidates, |h| {
        match fitter.fit(h, opt) {
            Ok(op) => {
                let stiff = budget.is_some_and(|b| probe(op.matrix.view(), valid, solver, b).is_err());
                let err = if stiff {
                    f64::INFINITY
                } else {
                    trajectory_errors(op.matrix.view(), valid, solver)
                        .map(|e| time_averaged_error(&e))
                        .unwrap_or(f64::INFINITY)
                };
                (GridPoint { hyperparams: *h, valid_error: err }, Some(op))
            }
            Err(_) => (
                GridPoint {
                    hyperparams: *h,
                    valid_error: f64::INFINITY,
                },
                None,
            ),
        }
    });

    let mut best: Option<usize> = None;
    for (i, (point, op)) in results.iter().enumerate() {
        if op.is_none() || !point.valid_error.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let current = &results[b].0;
                let better = point.valid_error < current.valid_error
                    || (point.valid_error == current.valid_error
                        && regularization_weight(&point.hyperparams) > regularization_weight(&current.hyperparams));
                Some(if better { i } else { b })
            }
        };
    }
    let table: Vec<GridPoint> = results.iter().map(|(p, _)| *p).collect();
    let Some(b) = best else {
        return Err(Error::RouteFailure(format!(
            "every {route} candidate failed or blew up on the validation set"
        )));
    };
    let best_error = table[b].valid_error;
    let best = results.into_iter().nth(b).and_then(|(_, op)| op).expect("best candidate has an operator");
    Ok(GridSearchResult {
        best,
        best_error,
        table,
    })
}

/// Route-specific cached systems shared by all candidates.
enum Fitter<'a> {
    Baseline(&'a Array2<f64>),
    Intrusive {
        ctx: &'a FitContext<'a>,
        system: ReconstructionSystem,
    },
    DerivativeFit {
        ctx: &'a FitContext<'a>,
        system: DerivativeFitSystem,
    },
    Embedded(&'a FitContext<'a>),
}

impl<'a> Fitter<'a> {
    fn new(route: Route, ctx: &'a FitContext<'a>) -> Result<Self> {
        Ok(match route {
            Route::Baseline => Fitter::Baseline(&ctx.a_m),
            Route::Intrusive => {
                let fine = ctx.train_fine.ok_or_else(|| {
                    Error::InvalidArgument("the intrusive route needs fine training snapshots".into())
                })?;
                if fine.n_snapshots() != ctx.train.n_snapshots() {
                    return Err(Error::dim("fine/filtered training snapshots", fine.n_snapshots(), ctx.train.n_snapshots()));
                }
                Fitter::Intrusive {
                    ctx,
                    system: ReconstructionSystem::new(ctx.train.ubar.view(), fine.u.view())?,
                }
            }
            Route::DerivativeFit => Fitter::DerivativeFit {
                ctx,
                system: DerivativeFitSystem::new(ctx.train.ubar.view(), ctx.train.ubar_dot.view())?,
            },
            Route::Embedded => Fitter::Embedded(ctx),
        })
    }

    fn fit(&self, h: &Hyperparams, opt: &OptimizerConfig) -> Result<InferredOperator> {
        match self {
            Fitter::Baseline(a_m) => Ok(InferredOperator::new((*a_m).clone(), Route::Baseline, *h)),
            Fitter::Intrusive { ctx, system } => intrusive_fit(ctx.filter, ctx.fine_op, system, h.lambda),
            Fitter::DerivativeFit { ctx, system } => Ok(InferredOperator::new(
                system.solve(ctx.a_m.view(), ctx.d_m.view(), h.lambda_prior, h.lambda_stab)?,
                Route::DerivativeFit,
                *h,
            )),
            Fitter::Embedded(ctx) => Ok(fit_embedded(
                ctx.train,
                ctx.a_m.view(),
                ctx.d_m.view(),
                h.lambda_prior,
                h.lambda_stab,
                opt,
            )?
            .operator),
        }
    }
}

/// `{20, 40, 60, 80, 100, 150, 200}`.
pub const DEFAULT_SWEEP_M: [usize; 7] = [20, 40, 60, 80, 100, 150, 200];

/// Inputs of [`convergence_sweep`]. The fine datasets are generated once
/// and filtered for every `(filter, M)` cell.
pub struct SweepConfig<'a> {
    pub m_values: Vec<usize>,
    pub routes: Vec<Route>,
    pub filters: Vec<FilterSpec>,
    pub fine_op: &'a CirculantOperator,
    pub train: &'a FineSnapshots,
    pub valid: &'a FineSnapshots,
    pub test: &'a FineSnapshots,
    pub reg: RegularizationConfig,
    pub embedded_grid: Vec<(f64, f64)>,
    pub solver: SolverConfig,
    pub optimizer: OptimizerConfig,
    /// See [`FitContext::probe_factor`].
    pub probe_factor: Option<f64>,
}

/// Outcome of one `(filter, route, M)` cell.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub filter: FilterKind,
    pub route: Route,
    pub m: usize,
    pub hyperparams: Hyperparams,
    /// Time-averaged test error, `+∞` when the cell failed.
    pub test_error: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub m_values: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn error(&self, filter: FilterKind, route: Route, m: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.filter == filter && c.route == route && c.m == m)
            .map(|c| c.test_error)
    }
}

/// Builds `W`, filters the datasets, fits every route with grid search and
/// scores it on the test set, for each `(filter, M)`. Failing cells are
/// recorded with `+∞` and the sweep continues.
pub fn convergence_sweep(cfg: &SweepConfig<'_>) -> Result<SweepResult> {
    if cfg.m_values.is_empty() || cfg.m_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("M values must be non-empty and strictly ascending".into()));
    }
    let n = cfg.fine_op.size();
    if let Some(&m) = cfg.m_values.iter().find(|&&m| m > n) {
        return Err(Error::InvalidArgument(format!("M = {m} exceeds the fine grid size {n}")));
    }
    let mut routes = cfg.routes.clone();
    if !routes.contains(&Route::Baseline) {
        routes.insert(0, Route::Baseline);
    }
    cfg.reg.validate()?;
    cfg.solver.validate()?;
    let fine_grid = make_grid(n)?;
    let pairs: Vec<(FilterSpec, usize)> = cfg
        .filters
        .iter()
        .flat_map(|f| cfg.m_values.iter().map(move |&m| (f.clone(), m)))
        .collect();

    let nested = par::map_slice(&pairs, |(spec, m)| {
        sweep_cell(cfg, &routes, spec, *m, &fine_grid).unwrap_or_else(|e| {
            routes
                .iter()
                .map(|&route| SweepCell {
                    filter: spec.kind,
                    route,
                    m: *m,
                    hyperparams: Hyperparams::default(),
                    test_error: f64::INFINITY,
                    failure: Some(e.to_string()),
                })
                .collect()
        })
    });
    Ok(SweepResult {
        m_values: cfg.m_values.clone(),
        cells: nested.into_iter().flatten().collect(),
    })
}

fn sweep_cell(
    cfg: &SweepConfig<'_>,
    routes: &[Route],
    spec: &FilterSpec,
    m: usize,
    fine_grid: &crate::stencils::Grid,
) -> Result<Vec<SweepCell>> {
    let coarse = make_grid(m)?;
    let w = build_filter_matrix(spec, &coarse, fine_grid)?;
    let train = cfg.train.filtered(&w)?;
    let valid = cfg.valid.filtered(&w)?;
    let test = cfg.test.filtered(&w)?;
    let mut ctx = FitContext::new(cfg.fine_op, &w, Some(cfg.train), &train);
    ctx.probe_factor = cfg.probe_factor;
    let mut cells = Vec::with_capacity(routes.len());
    for &route in routes {
        let outcome = grid_search(route, &ctx, &valid, &cfg.reg, &cfg.embedded_grid, &cfg.solver, &cfg.optimizer)
            .and_then(|gs| {
                let curve = error_curve(&gs.best, &test, DatasetKind::Test, &cfg.solver)?;
                Ok((gs.best.hyperparams, curve.time_averaged()))
            });
        cells.push(match outcome {
            Ok((hyperparams, err)) => SweepCell {
                filter: spec.kind,
                route,
                m,
                hyperparams,
                test_error: err,
                failure: None,
            },
            Err(e) => SweepCell {
                filter: spec.kind,
                route,
                m,
                hyperparams: Hyperparams::default(),
                test_error: f64::INFINITY,
                failure: Some(e.to_string()),
            },
        });
    }
    Ok(cells)
}

/// Error curves of several operators on the long dataset.
pub fn long_horizon_study(
    ops: &[InferredOperator],
    long: &FilteredSnapshots,
    cfg: &SolverConfig,
) -> Result<Vec<ErrorCurve>> {
    par::map_slice(ops, |op| error_curve(op, long, DatasetKind::Long, cfg))
        .into_iter()
        .collect()
}

impl fmt::Display for ErrorCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} on {} (M = {}): mean error {:.3e}",
            self.route,
            self.dataset,
            self.m,
            self.time_averaged()
        )
    }
}
