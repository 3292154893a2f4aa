//! Data generation: random Fourier initial conditions, explicit Runge–Kutta
//! solves of `du/dt = L u`, and snapshot matrices with their filtered views.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::filterbank::FilterMatrix;
use crate::stencils::{CirculantOperator, Grid, LinearOperator};
use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Train,
    Valid,
    Test,
    Long,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Train,
        DatasetKind::Valid,
        DatasetKind::Test,
        DatasetKind::Long,
    ];

    /// Stream id used to key the random generator.
    pub fn id(self) -> u64 {
        match self {
            DatasetKind::Train => 0,
            DatasetKind::Valid => 1,
            DatasetKind::Test => 2,
            DatasetKind::Long => 3,
        }
    }

    /// Default (n_IC, n_t, T).
    pub fn default_params(self) -> DatasetParams {
        let (n_ic, n_t, horizon) = match self {
            DatasetKind::Train => (1000, 50, 0.1),
            DatasetKind::Valid => (20, 10, 1.0),
            DatasetKind::Test => (100, 20, 1.0),
            DatasetKind::Long => (50, 500, 100.0),
        };
        DatasetParams {
            n_ic,
            n_t,
            horizon,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Train => "train",
            DatasetKind::Valid => "valid",
            DatasetKind::Test => "test",
            DatasetKind::Long => "long",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DatasetKind::Train),
            "valid" => Ok(DatasetKind::Valid),
            "test" => Ok(DatasetKind::Test),
            "long" => Ok(DatasetKind::Long),
            other => Err(Error::InvalidArgument(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetParams {
    pub n_ic: usize,
    pub n_t: usize,
    pub horizon: f64,
}

impl DatasetParams {
    /// `n_t` uniformly spaced stamps on `[0, T]`, both ends included.
    pub fn times(&self) -> Vec<f64> {
        if self.n_t == 1 {
            return vec![0.0];
        }
        let last = (self.n_t - 1) as f64;
        (0..self.n_t)
            .map(|k| self.horizon * k as f64 / last)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ic == 0 || self.n_t == 0 {
            return Err(Error::InvalidArgument(
                "datasets need at least one initial condition and one time point".into(),
            ));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time horizon must be finite and non-negative, got {}",
                self.horizon
            )));
        }
        if self.n_t > 1 && self.horizon == 0.0 {
            return Err(Error::InvalidArgument(
                "several time points need a positive horizon".into(),
            ));
        }
        Ok(())
    }
}

/// Random initial conditions `u0(x) = Σ_{k=0}^{K} (1+ε)/(5+k)² cos(2πkx + θ)`
/// with `ε ~ N(0, noise_std²)` and `θ ~ U[0, 2π]` drawn once per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialConditionSpec {
    pub max_frequency: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub count: usize,
}

impl InitialConditionSpec {
    /// `N(0, 1/5)` read as a variance.
    pub const DEFAULT_NOISE_STD: f64 = 0.447_213_595_499_957_9;

    pub fn new(count: usize, seed: u64) -> Self {
        InitialConditionSpec {
            max_frequency: 250,
            noise_std: Self::DEFAULT_NOISE_STD,
            seed,
            count,
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if 2 * self.max_frequency >= grid.n_points() {
            return Err(Error::InvalidArgument(format!(
                "max frequency {} is not resolved on {} points",
                self.max_frequency,
                grid.n_points()
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidArgument("noise std must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Draws `(ε, θ)` for initial condition `index` of `dataset`. The stream
    /// is keyed by (seed, dataset, index) so draws do not depend on order.
    pub fn draw(&self, dataset: DatasetKind, index: usize) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((dataset.id() << 48) ^ index as u64);
        let eps = if self.noise_std > 0.0 {
            Normal::new(0.0, self.noise_std)
                .expect("validated std")
                .sample(&mut rng)
        } else {
            0.0
        };
        let theta = rng.random_range(0.0..2.0 * PI);
        (eps, theta)
    }
}

/// Evaluates the Fourier profile for given `(ε, θ)` on `grid`.
pub fn fourier_profile(max_frequency: usize, eps: f64, theta: f64, grid: &Grid) -> Array1<f64> {
    let coeffs: Vec<f64> = (0..=max_frequency)
        .map(|k| (1.0 + eps) / ((5 + k) as f64).powi(2))
        .collect();
    grid.sample(|x| {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| c * (2.0 * PI * k as f64 * x + theta).cos())
            .sum()
    })
}

pub fn sample_initial_condition(
    spec: &InitialConditionSpec,
    dataset: DatasetKind,
    index: usize,
    grid: &Grid,
) -> Array1<f64> {
    let (eps, theta) = spec.draw(dataset, index);
    fourier_profile(spec.max_frequency, eps, theta, grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Embedded explicit 5(4) pair with PI step-size control.
    Adaptive,
    /// Classical RK4 with a fixed number of steps per output interval.
    FixedRk4 { steps_per_interval: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_steps: usize,
    pub method: Method,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            abs_tol: 1e-10,
            rel_tol: 1e-8,
            max_steps: 10_000_000,
            method: Method::Adaptive,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument("solver tolerances must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be positive".into()));
        }
        if let Method::FixedRk4 { steps_per_interval } = self.method {
            if steps_per_interval == 0 {
                return Err(Error::InvalidArgument("steps_per_interval must be positive".into()));
            }
        }
        Ok(())
    }
}

// Dormand–Prince 5(4) tableau.
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B5: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
// b5 - b4 for the error estimate (seven stages, FSAL)
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - PI_BETA * 0.75;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

/// `out = y + h Σ a_j k_j`.
fn combine(out: &mut Array2<f64>, y: &Array2<f64>, h: f64, terms: &[(f64, &Array2<f64>)]) {
    let out_s = out.as_slice_mut().expect("standard layout");
    out_s.copy_from_slice(y.as_slice().expect("standard layout"));
    for &(a, k) in terms {
        if a == 0.0 {
            continue;
        }
        let ha = h * a;
        for (o, kv) in out_s.iter_mut().zip(k.as_slice().expect("standard layout")) {
            *o += ha * kv;
        }
    }
}

fn all_finite(y: &Array2<f64>) -> bool {
    y.iter().all(|v| v.is_finite())
}

/// Integrates `dY/dt = L Y` from `t = 0` and calls `sink(i, Y(t_out[i]))` at
/// each output time, in order. Returns the number of steps taken, rejected
/// ones included. On failure the outputs already delivered remain valid.
pub fn integrate<L, F>(
    op: &L,
    y0: ArrayView2<f64>,
    t_out: &[f64],
    cfg: &SolverConfig,
    mut sink: F,
) -> Result<usize>
where
    L: LinearOperator + ?Sized,
    F: FnMut(usize, &Array2<f64>),
{
    cfg.validate()?;
    if y0.nrows() != op.dim() {
        return Err(Error::dim("ode initial state", op.dim(), y0.nrows()));
    }
    if let Some(&first) = t_out.first() {
        if !(first >= 0.0) {
            return Err(Error::InvalidArgument("output times must start at t >= 0".into()));
        }
    }
    if t_out.windows(2).any(|w| !(w[1] >= w[0])) || t_out.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("output times must be finite and non-decreasing".into()));
    }
    let y = y0.as_standard_layout().into_owned();
    match cfg.method {
        Method::Adaptive => adaptive(op, y, t_out, cfg, &mut sink),
        Method::FixedRk4 { steps_per_interval } => {
            fixed_rk4(op, y, t_out, steps_per_interval, cfg.max_steps, &mut sink)
        }
    }
}

fn error_norm(err: &Array2<f64>, y: &Array2<f64>, y_new: &Array2<f64>, cfg: &SolverConfig) -> f64 {
    let mut acc = 0.0;
    Zip::from(err).and(y).and(y_new).for_each(|&e, &a, &b| {
        let sc = cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
        let r = e / sc;
        acc += r * r;
    });
    (acc / err.len().max(1) as f64).sqrt()
}

fn weighted_norm(v: &Array2<f64>, y: &Array2<f64>, cfg: &SolverConfig) -> f64 {
    let mut acc = 0.0;
    Zip::from(v).and(y).for_each(|&a, &b| {
        let r = a / (cfg.abs_tol + cfg.rel_tol * b.abs());
        acc += r * r;
    });
    (acc / v.len().max(1) as f64).sqrt()
}

fn initial_step<L: LinearOperator + ?Sized>(
    op: &L,
    y: &Array2<f64>,
    f0: &Array2<f64>,
    cfg: &SolverConfig,
    span: f64,
) -> f64 {
    let d0 = weighted_norm(y, y, cfg);
    let d1 = weighted_norm(f0, y, cfg);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let mut y1 = y.clone();
    combine(&mut y1, y, h0, &[(1.0, f0)]);
    let mut f1 = Array2::zeros(y.raw_dim());
    op.apply_block(y1.view(), f1.view_mut());
    let d2 = weighted_norm(&(&f1 - f0), y, cfg) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(span)
}

fn adaptive<L, F>(
    op: &L,
    mut y: Array2<f64>,
    t_out: &[f64],
    cfg: &SolverConfig,
    sink: &mut F,
) -> Result<usize>
where
    L: LinearOperator + ?Sized,
    F: FnMut(usize, &Array2<f64>),
{
    let shape = y.raw_dim();
    let mut k: Vec<Array2<f64>> = (0..7).map(|_| Array2::zeros(shape.clone())).collect();
    let mut stage = Array2::zeros(shape.clone());
    let mut y_new = Array2::zeros(shape.clone());
    let mut err = Array2::zeros(shape);

    let mut t = 0.0;
    let mut next = 0;
    while next < t_out.len() && t_out[next] <= t {
        sink(next, &y);
        next += 1;
    }
    if next == t_out.len() {
        return Ok(0);
    }
    let t_end = *t_out.last().expect("non-empty");

    op.apply_block(y.view(), k[0].view_mut());
    let mut h = initial_step(op, &y, &k[0], cfg, t_end);
    let mut fac_old: f64 = 1e-4;
    let mut steps = 0usize;
    let mut rejected_last = false;

    while next < t_out.len() {
        if steps >= cfg.max_steps {
            return Err(Error::MaxSteps {
                time: t,
                steps: cfg.max_steps,
            });
        }
        steps += 1;
        let target = t_out[next];
        let mut hit = false;
        if t + 1.01 * h >= target {
            h = target - t;
            hit = true;
        }

        {
            let (k0, rest) = k.split_at_mut(1);
            combine(&mut stage, &y, h, &[(A2[0], &k0[0])]);
            op.apply_block(stage.view(), rest[0].view_mut());
        }
        combine(&mut stage, &y, h, &[(A3[0], &k[0]), (A3[1], &k[1])]);
        op.apply_block(stage.view(), k[2].view_mut());
        combine(
            &mut stage,
            &y,
            h,
            &[(A4[0], &k[0]), (A4[1], &k[1]), (A4[2], &k[2])],
        );
        op.apply_block(stage.view(), k[3].view_mut());
        combine(
            &mut stage,
            &y,
            h,
            &[(A5[0], &k[0]), (A5[1], &k[1]), (A5[2], &k[2]), (A5[3], &k[3])],
        );
        op.apply_block(stage.view(), k[4].view_mut());
        combine(
            &mut stage,
            &y,
            h,
            &[
                (A6[0], &k[0]),
                (A6[1], &k[1]),
                (A6[2], &k[2]),
                (A6[3], &k[3]),
                (A6[4], &k[4]),
            ],
        );
        op.apply_block(stage.view(), k[5].view_mut());
        combine(
            &mut y_new,
            &y,
            h,
            &[
                (B5[0], &k[0]),
                (B5[2], &k[2]),
                (B5[3], &k[3]),
                (B5[4], &k[4]),
                (B5[5], &k[5]),
            ],
        );
        op.apply_block(y_new.view(), k[6].view_mut());

        err.fill(0.0);
        for (e, ki) in E.iter().zip(&k) {
            if *e != 0.0 {
                err.scaled_add(h * e, ki);
            }
        }
        let en = error_norm(&err, &y, &y_new, cfg);
        if !en.is_finite() {
            if !all_finite(&y_new) {
                return Err(Error::NonFinite { time: t + h });
            }
            // overflowed estimate on a finite state: shrink hard and retry
            h *= MIN_FACTOR;
            rejected_last = true;
            continue;
        }

        let fac11 = en.powf(PI_ALPHA);
        if en <= 1.0 {
            let mut fac = fac11 / fac_old.powf(PI_BETA);
            fac = (fac / SAFETY).clamp(1.0 / MAX_FACTOR, 1.0 / MIN_FACTOR);
            let mut h_new = h / fac;
            if rejected_last {
                h_new = h_new.min(h);
            }
            fac_old = en.max(1e-4);
            rejected_last = false;

            if hit {
                t = target;
            } else {
                t += h;
            }
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            if !all_finite(&y) {
                return Err(Error::NonFinite { time: t });
            }
            while next < t_out.len() && t_out[next] <= t {
                sink(next, &y);
                next += 1;
            }
            h = h_new;
        } else {
            h /= (fac11 / SAFETY).min(1.0 / MIN_FACTOR);
            rejected_last = true;
        }
        if h <= f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::MaxSteps {
                time: t,
                steps,
            });
        }
    }
    Ok(steps)
}

fn fixed_rk4<L, F>(
    op: &L,
    mut y: Array2<f64>,
    t_out: &[f64],
    steps_per_interval: usize,
    max_steps: usize,
    sink: &mut F,
) -> Result<usize>
where
    L: LinearOperator + ?Sized,
    F: FnMut(usize, &Array2<f64>),
{
    let shape = y.raw_dim();
    let mut k: Vec<Array2<f64>> = (0..4).map(|_| Array2::zeros(shape.clone())).collect();
    let mut stage = Array2::zeros(shape);
    let mut t = 0.0;
    let mut steps = 0;
    for (i, &target) in t_out.iter().enumerate() {
        let span = target - t;
        if span > 0.0 {
            let h = span / steps_per_interval as f64;
            for _ in 0..steps_per_interval {
                if steps >= max_steps {
                    return Err(Error::MaxSteps {
                        time: t,
                        steps: max_steps,
                    });
                }
                steps += 1;
                op.apply_block(y.view(), k[0].view_mut());
                combine(&mut stage, &y, h, &[(0.5, &k[0])]);
                op.apply_block(stage.view(), k[1].view_mut());
                combine(&mut stage, &y, h, &[(0.5, &k[1])]);
                op.apply_block(stage.view(), k[2].view_mut());
                combine(&mut stage, &y, h, &[(1.0, &k[2])]);
                op.apply_block(stage.view(), k[3].view_mut());
                let snapshot = y.clone();
                combine(
                    &mut y,
                    &snapshot,
                    h,
                    &[
                        (1.0 / 6.0, &k[0]),
                        (1.0 / 3.0, &k[1]),
                        (1.0 / 3.0, &k[2]),
                        (1.0 / 6.0, &k[3]),
                    ],
                );
                t += h;
                if !all_finite(&y) {
                    return Err(Error::NonFinite { time: t });
                }
            }
            t = target;
        }
        sink(i, &y);
    }
    Ok(steps)
}

/// Solves `du/dt = L u` for a single state; column `i` of the result is
/// `u(t_out[i])`.
pub fn solve_ode<L: LinearOperator + ?Sized>(
    op: &L,
    u0: ArrayView1<f64>,
    t_out: &[f64],
    cfg: &SolverConfig,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((u0.len(), t_out.len()));
    let y0 = u0.insert_axis(ndarray::Axis(1));
    integrate(op, y0, t_out, cfg, |i, y| out.column_mut(i).assign(&y.column(0)))?;
    Ok(out)
}

/// Solves a block of independent states at once; entry `i` of the result is
/// the `dim × k` block at `t_out[i]`.
pub fn solve_block<L: LinearOperator + ?Sized>(
    op: &L,
    y0: ArrayView2<f64>,
    t_out: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::with_capacity(t_out.len());
    integrate(op, y0, t_out, cfg, |_, y| out.push(y.clone()))?;
    Ok(out)
}

/// Fine-grid snapshots. Column `i * n_t + k` holds initial condition `i` at
/// `times[k]`.
#[derive(Debug, Clone)]
pub struct FineSnapshots {
    pub u: Array2<f64>,
    pub udot: Array2<f64>,
    pub times: Vec<f64>,
    pub n_ic: usize,
    pub n_t: usize,
}

/// Filtered snapshots on the coarse grid, same column layout as
/// [`FineSnapshots`].
#[derive(Debug, Clone)]
pub struct FilteredSnapshots {
    pub ubar: Array2<f64>,
    pub ubar_dot: Array2<f64>,
    pub times: Vec<f64>,
    pub n_ic: usize,
    pub n_t: usize,
}

/// Complete snapshot set `(U, U̇, Ū, Ū̇)`.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub fine: FineSnapshots,
    pub filtered: FilteredSnapshots,
}

impl FineSnapshots {
    pub fn n_snapshots(&self) -> usize {
        self.u.ncols()
    }

    pub fn filtered(&self, filter: &FilterMatrix) -> Result<FilteredSnapshots> {
        Ok(FilteredSnapshots {
            ubar: filter.filter_snapshots(self.u.view())?,
            ubar_dot: filter.filter_snapshots(self.udot.view())?,
            times: self.times.clone(),
            n_ic: self.n_ic,
            n_t: self.n_t,
        })
    }

    /// Keeps only the first `n_ic` trajectories.
    pub fn truncated(&self, n_ic: usize) -> FineSnapshots {
        let n_ic = n_ic.min(self.n_ic);
        let cols = n_ic * self.n_t;
        FineSnapshots {
            u: self.u.slice(s![.., ..cols]).to_owned(),
            udot: self.udot.slice(s![.., ..cols]).to_owned(),
            times: self.times.clone(),
            n_ic,
            n_t: self.n_t,
        }
    }
}

impl FilteredSnapshots {
    pub fn n_snapshots(&self) -> usize {
        self.ubar.ncols()
    }

    pub fn dim(&self) -> usize {
        self.ubar.nrows()
    }

    pub fn column_index(&self, trajectory: usize, time_index: usize) -> usize {
        trajectory * self.n_t + time_index
    }

    pub fn state(&self, trajectory: usize, time_index: usize) -> ArrayView1<'_, f64> {
        self.ubar.column(self.column_index(trajectory, time_index))
    }

    /// `dim × n_IC` block of the states at time index `k`.
    pub fn states_at(&self, time_index: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.dim(), self.n_ic));
        for i in 0..self.n_ic {
            out.column_mut(i).assign(&self.state(i, time_index));
        }
        out
    }

    /// Checks that the column layout is consistent and every trajectory starts at t = 0.
    pub fn check_trajectories(&self) -> Result<()> {
        if self.n_ic * self.n_t != self.ubar.ncols() || self.times.len() != self.n_t {
            return Err(Error::InvalidArgument(format!(
                "snapshot layout {} x {} does not match {} columns / {} times",
                self.n_ic,
                self.n_t,
                self.ubar.ncols(),
                self.times.len()
            )));
        }
        if self.ubar_dot.dim() != self.ubar.dim() {
            return Err(Error::dim("filtered derivative snapshots", self.ubar.ncols(), self.ubar_dot.ncols()));
        }
        if self.times.first() != Some(&0.0) {
            return Err(Error::InvalidArgument("trajectories must include t = 0".into()));
        }
        Ok(())
    }
}

/// Runs the fine-grid solves for `params.n_ic` initial conditions of `dataset`.
pub fn generate_fine(
    dataset: DatasetKind,
    params: &DatasetParams,
    fine_op: &CirculantOperator,
    fine_grid: &Grid,
    ic: &InitialConditionSpec,
    cfg: &SolverConfig,
) -> Result<FineSnapshots> {
    params.validate()?;
    ic.validate(fine_grid)?;
    if fine_op.size() != fine_grid.n_points() {
        return Err(Error::dim("fine operator", fine_grid.n_points(), fine_op.size()));
    }
    let times = params.times();
    let n = fine_grid.n_points();
    let trajectories = par::try_map_indexed(params.n_ic, |i| {
        let u0 = sample_initial_condition(ic, dataset, i, fine_grid);
        solve_ode(fine_op, u0.view(), &times, cfg).map_err(|e| Error::Trajectory {
            index: i,
            source: Box::new(e),
        })
    })?;

    let d = params.n_ic * params.n_t;
    let mut u = Array2::zeros((n, d));
    for (i, traj) in trajectories.into_iter().enumerate() {
        u.slice_mut(s![.., i * params.n_t..(i + 1) * params.n_t])
            .assign(&traj);
    }
    let mut udot = Array2::zeros((n, d));
    fine_op.apply_block(u.view(), udot.view_mut());
    Ok(FineSnapshots {
        u,
        udot,
        times,
        n_ic: params.n_ic,
        n_t: params.n_t,
    })
}

/// Fine solves plus filtering with `filter`.
pub fn generate_dataset(
    dataset: DatasetKind,
    params: &DatasetParams,
    fine_op: &CirculantOperator,
    fine_grid: &Grid,
    filter: &FilterMatrix,
    ic: &InitialConditionSpec,
    cfg: &SolverConfig,
) -> Result<SnapshotSet> {
    let fine = generate_fine(dataset, params, fine_op, fine_grid, ic, cfg)?;
    let filtered = fine.filtered(filter)?;
    Ok(SnapshotSet { fine, filtered })
}
