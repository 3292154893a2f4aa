//! The three inferred coarse operators.
//!
//! - Intrusive: `Ā = W A R` with `R = U Ūᵀ (Ū Ūᵀ + dλ I)⁻¹`.
//! - Derivative fit: `Ā = ((1/d) Ū̇ Ūᵀ + λp A_M + λs D_M) ((1/d) Ū Ūᵀ + (λp + λs) I)⁻¹`.
//! - Embedded: ADAM on `mean ‖S(Ā, ū(0), t) - ū(t)‖² + λp ‖Ā - A_M‖² + λs ‖Ā - D_M‖²`,
//!   starting from `A_M`, with gradients from [`crate::adjoint`].
//!
//! All closed forms go through a Cholesky solve, never an explicit inverse.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{self, Sample};
use crate::dns::FilteredSnapshots;
use crate::filterbank::FilterMatrix;
use crate::linalg::{add_diagonal, frobenius, mul_transpose, spd_right_divide};
use crate::stencils::{CirculantOperator, LinearOperator};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Route {
    /// The unfiltered coarse discretization `A_M`, used as reference.
    Baseline,
    Intrusive,
    DerivativeFit,
    Embedded,
}

impl Route {
    pub const ALL: [Route; 4] = [
        Route::Baseline,
        Route::Intrusive,
        Route::DerivativeFit,
        Route::Embedded,
    ];
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Baseline => "baseline",
            Route::Intrusive => "intrusive",
            Route::DerivativeFit => "df",
            Route::Embedded => "embedded",
        })
    }
}

impl FromStr for Route {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Route::Baseline),
            "intrusive" | "int" => Ok(Route::Intrusive),
            "df" | "derivative-fit" | "derivative_fit" => Ok(Route::DerivativeFit),
            "embedded" | "emb" => Ok(Route::Embedded),
            other => Err(Error::InvalidArgument(format!("unknown route '{other}'"))),
        }
    }
}

/// Regularization weights used for a fit. Unused weights stay at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Hyperparams {
    pub lambda: f64,
    pub lambda_prior: f64,
    pub lambda_stab: f64,
}

#[derive(Debug, Clone)]
pub struct InferredOperator {
    pub matrix: Array2<f64>,
    pub route: Route,
    pub hyperparams: Hyperparams,
    pub optimizer: Option<OptimizerConfig>,
    pub provenance: String,
}

impl InferredOperator {
    pub fn new(matrix: Array2<f64>, route: Route, hyperparams: Hyperparams) -> Self {
        InferredOperator {
            matrix,
            route,
            hyperparams,
            optimizer: None,
            provenance: String::new(),
        }
    }

    pub fn baseline(a_m: &CirculantOperator) -> Self {
        Self::new(a_m.to_dense(), Route::Baseline, Hyperparams::default())
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Candidate regularization weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationConfig {
    pub lambda: f64,
    pub lambda_prior: f64,
    pub lambda_stab: f64,
    pub grid: Vec<f64>,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            lambda: 0.0,
            lambda_prior: 0.0,
            lambda_stab: 0.0,
            grid: default_lambda_grid(),
        }
    }
}

impl RegularizationConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.lambda_prior, self.lambda_stab];
        if all.iter().chain(&self.grid).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "regularization weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `{1e-12, 1e-11, …, 1e0}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-12..=0).map(|e| 10f64.powi(e)).collect()
}

fn check_lambda(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
    }
    Ok(())
}

/// Normal equations of the reconstruction problem, reusable across `λ`.
#[derive(Debug, Clone)]
pub struct ReconstructionSystem {
    /// `U Ūᵀ`, `N × M`.
    cross: Array2<f64>,
    /// `Ū Ūᵀ`, `M × M`.
    gram: Array2<f64>,
    n_snapshots: usize,
}

impl ReconstructionSystem {
    pub fn new(ubar: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Self> {
        if ubar.ncols() != u.ncols() {
            return Err(Error::dim("reconstruction snapshots", u.ncols(), ubar.ncols()));
        }
        if ubar.ncols() == 0 {
            return Err(Error::InvalidArgument("need at least one snapshot".into()));
        }
        Ok(ReconstructionSystem {
            cross: mul_transpose(u, ubar),
            gram: mul_transpose(ubar, ubar),
            n_snapshots: ubar.ncols(),
        })
    }

    /// `R = U Ūᵀ (Ū Ūᵀ + dλ I)⁻¹`.
    pub fn solve(&self, lambda: f64) -> Result<Array2<f64>> {
        check_lambda("lambda", lambda)?;
        let mut lhs = self.gram.clone();
        add_diagonal(&mut lhs, self.n_snapshots as f64 * lambda);
        spd_right_divide(self.cross.view(), lhs.view())
    }
}

/// Ridge reconstruction `R ∈ ℝ^{N×M}` minimizing `(1/d)‖R Ū - U‖² + λ‖R‖²`.
pub fn fit_reconstruction(ubar: ArrayView2<f64>, u: ArrayView2<f64>, lambda: f64) -> Result<Array2<f64>> {
    ReconstructionSystem::new(ubar, u)?.solve(lambda)
}

/// `Ā = W A R`.
pub fn intrusive_operator(
    w: &FilterMatrix,
    a: &CirculantOperator,
    r: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if w.cols() != a.size() {
        return Err(Error::dim("intrusive W·A", w.cols(), a.size()));
    }
    if r.nrows() != a.size() {
        return Err(Error::dim("intrusive A·R", a.size(), r.nrows()));
    }
    if r.ncols() != w.rows() {
        return Err(Error::dim("intrusive R columns", w.rows(), r.ncols()));
    }
    let mut ar = Array2::zeros(r.raw_dim());
    a.apply_block(r, ar.view_mut());
    Ok(w.weights().dot(&ar))
}

/// Intrusive route as an [`InferredOperator`].
pub fn intrusive_fit(
    w: &FilterMatrix,
    a: &CirculantOperator,
    system: &ReconstructionSystem,
    lambda: f64,
) -> Result<InferredOperator> {
    let r = system.solve(lambda)?;
    Ok(InferredOperator::new(
        intrusive_operator(w, a, r.view())?,
        Route::Intrusive,
        Hyperparams {
            lambda,
            ..Hyperparams::default()
        },
    ))
}

/// Normal equations of the derivative fit, reusable across `(λp, λs)`.
#[derive(Debug, Clone)]
pub struct DerivativeFitSystem {
    /// `(1/d) Ū Ūᵀ`.
    gram: Array2<f64>,
    /// `(1/d) Ū̇ Ūᵀ`.
    cross: Array2<f64>,
}

impl DerivativeFitSystem {
    pub fn new(ubar: ArrayView2<f64>, ubar_dot: ArrayView2<f64>) -> Result<Self> {
        if ubar.dim() != ubar_dot.dim() {
            return Err(Error::dim("derivative-fit snapshots", ubar.ncols(), ubar_dot.ncols()));
        }
        let d = ubar.ncols();
        if d == 0 {
            return Err(Error::InvalidArgument("need at least one snapshot".into()));
        }
        let inv_d = 1.0 / d as f64;
        Ok(DerivativeFitSystem {
            gram: mul_transpose(ubar, ubar) * inv_d,
            cross: mul_transpose(ubar_dot, ubar) * inv_d,
        })
    }

    pub fn size(&self) -> usize {
        self.gram.nrows()
    }

    pub fn solve(
        &self,
        a_m: ArrayView2<f64>,
        d_m: ArrayView2<f64>,
        lambda_prior: f64,
        lambda_stab: f64,
    ) -> Result<Array2<f64>> {
        check_lambda("lambda_prior", lambda_prior)?;
        check_lambda("lambda_stab", lambda_stab)?;
        let m = self.size();
        if a_m.dim() != (m, m) {
            return Err(Error::dim("prior operator", m, a_m.nrows()));
        }
        if d_m.dim() != (m, m) {
            return Err(Error::dim("stabilizing operator", m, d_m.nrows()));
        }
        let mut rhs = self.cross.clone();
        if lambda_prior > 0.0 {
            rhs.scaled_add(lambda_prior, &a_m);
        }
        if lambda_stab > 0.0 {
            rhs.scaled_add(lambda_stab, &d_m);
        }
        let mut lhs = self.gram.clone();
        add_diagonal(&mut lhs, lambda_prior + lambda_stab);
        spd_right_divide(rhs.view(), lhs.view())
    }
}

/// Derivative-fit operator from filtered states and their time derivatives.
pub fn fit_derivative(
    ubar: ArrayView2<f64>,
    ubar_dot: ArrayView2<f64>,
    a_m: ArrayView2<f64>,
    d_m: ArrayView2<f64>,
    lambda_prior: f64,
    lambda_stab: f64,
) -> Result<InferredOperator> {
    let matrix = DerivativeFitSystem::new(ubar, ubar_dot)?.solve(a_m, d_m, lambda_prior, lambda_stab)?;
    Ok(InferredOperator::new(
        matrix,
        Route::DerivativeFit,
        Hyperparams {
            lambda_prior,
            lambda_stab,
            ..Hyperparams::default()
        },
    ))
}

/// `‖Ā - A_M‖_F / ‖A_M‖_F`.
pub fn commutator_error(op: &InferredOperator, a_m: ArrayView2<f64>) -> Result<f64> {
    if op.matrix.dim() != a_m.dim() {
        return Err(Error::dim("commutator error", a_m.nrows(), op.matrix.nrows()));
    }
    Ok(frobenius((&op.matrix - &a_m).view()) / frobenius(a_m))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// RK4 steps per unit time in the embedded solver; `None` means `4 M`.
    pub steps_per_unit_time: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            iterations: 10_000,
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            seed: 0,
            steps_per_unit_time: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument("step_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("ADAM betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("ADAM epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.steps_per_unit_time == Some(0) {
            return Err(Error::InvalidArgument("steps_per_unit_time must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, m: usize, t: f64) -> usize {
        let per_unit = self.steps_per_unit_time.unwrap_or(4 * m) as f64;
        ((per_unit * t).ceil() as usize).max(1)
    }
}

/// ADAM with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    step_size: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl Adam {
    pub fn new(shape: (usize, usize), cfg: &OptimizerConfig) -> Self {
        Adam {
            step_size: cfg.step_size,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        ndarray::Zip::from(params)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.step_size * m_hat / (v_hat.sqrt() + self.epsilon);
            });
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddedFit {
    pub operator: InferredOperator,
    /// Regularized minibatch loss before each update.
    pub loss_history: Vec<f64>,
}

/// Embedded fit starting from `A_M`.
pub fn fit_embedded(
    train: &FilteredSnapshots,
    a_m: ArrayView2<f64>,
    d_m: ArrayView2<f64>,
    lambda_prior: f64,
    lambda_stab: f64,
    opt: &OptimizerConfig,
) -> Result<EmbeddedFit> {
    fit_embedded_from(train, a_m, a_m, d_m, lambda_prior, lambda_stab, opt)
}

/// Embedded fit from an arbitrary initial guess.
pub fn fit_embedded_from(
    train: &FilteredSnapshots,
    initial: ArrayView2<f64>,
    a_m: ArrayView2<f64>,
    d_m: ArrayView2<f64>,
    lambda_prior: f64,
    lambda_stab: f64,
    opt: &OptimizerConfig,
) -> Result<EmbeddedFit> {
    opt.validate()?;
    check_lambda("lambda_prior", lambda_prior)?;
    check_lambda("lambda_stab", lambda_stab)?;
    train.check_trajectories()?;
    let m = train.dim();
    for (name, op) in [("initial guess", initial), ("prior operator", a_m), ("stabilizing operator", d_m)] {
        if op.dim() != (m, m) {
            return Err(Error::InvalidArgument(format!(
                "{name} is {}x{}, expected {m}x{m}",
                op.nrows(),
                op.ncols()
            )));
        }
    }
    if train.n_t < 2 || train.times[0] != 0.0 {
        return Err(Error::InvalidArgument(
            "embedded training needs t = 0 and at least one later time per trajectory".into(),
        ));
    }

    let n_pairs = train.n_ic * (train.n_t - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut params = initial.to_owned();
    let mut adam = Adam::new((m, m), opt);
    let mut history = Vec::with_capacity(opt.iterations);
    let inv_batch = 1.0 / opt.batch_size as f64;

    for iteration in 0..opt.iterations {
        let picks: Vec<(usize, usize)> = (0..opt.batch_size)
            .map(|_| {
                let p = rng.random_range(0..n_pairs);
                (p / (train.n_t - 1), p % (train.n_t - 1) + 1)
            })
            .collect();
        let samples: Vec<Sample> = picks
            .iter()
            .map(|&(traj, k)| Sample {
                u0: train.state(traj, 0),
                target: train.state(traj, k),
                t: train.times[k],
                n_steps: opt.steps_for(m, train.times[k]),
            })
            .collect();

        let (data_loss, mut grad) = match adjoint::batch_gradient(params.view(), &samples) {
            Ok(v) => v,
            Err(e) if e.is_numerical() => return Err(Error::Diverged { iteration }),
            Err(e) => return Err(e),
        };
        grad *= inv_batch;
        let mut loss = data_loss * inv_batch;
        if lambda_prior > 0.0 {
            let diff = &params - &a_m;
            loss += lambda_prior * diff.iter().map(|v| v * v).sum::<f64>();
            grad.scaled_add(2.0 * lambda_prior, &diff);
        }
        if lambda_stab > 0.0 {
            let diff = &params - &d_m;
            loss += lambda_stab * diff.iter().map(|v| v * v).sum::<f64>();
            grad.scaled_add(2.0 * lambda_stab, &diff);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration });
        }
        history.push(loss);
        adam.step(&mut params, &grad);
    }

    let mut operator = InferredOperator::new(
        params,
        Route::Embedded,
        Hyperparams {
            lambda_prior,
            lambda_stab,
            ..Hyperparams::default()
        },
    );
    operator.optimizer = Some(*opt);
    Ok(EmbeddedFit {
        operator,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::{build_filter_matrix, FilterKind, FilterSpec};
    use crate::stencils::{convection_operator, diffusion_operator, make_grid};
    use ndarray::{array, Array1};
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn max_abs(m: &Array2<f64>) -> f64 {
        m.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_filter_reconstructs_exactly() {
        let u = random(6, 20, 1);
        let r = fit_reconstruction(u.view(), u.view(), 0.0).unwrap();
        assert!(max_abs(&(r - Array2::<f64>::eye(6))) < 1e-8);
    }

    #[test]
    fn heavy_ridge_shrinks_to_zero() {
        let ubar = random(5, 30, 2);
        let u = random(9, 30, 3);
        let gram_norm = frobenius(ubar.dot(&ubar.t()).view());
        let lambda = 1e6 * gram_norm;
        let r = fit_reconstruction(ubar.view(), u.view(), lambda).unwrap();
        let bound = frobenius(u.dot(&ubar.t()).view()) / (30.0 * lambda);
        assert!(frobenius(r.view()) <= bound * 1.0000001);
        assert!(frobenius(r.view()) < 1e-6);
    }

    #[test]
    fn rank_deficient_unregularized_is_singular() {
        let mut ubar = random(4, 10, 4);
        let row = ubar.row(0).to_owned();
        ubar.row_mut(3).assign(&row);
        let u = random(8, 10, 5);
        assert!(matches!(
            fit_reconstruction(ubar.view(), u.view(), 0.0),
            Err(Error::Singular(_))
        ));
        assert!(fit_reconstruction(ubar.view(), u.view(), 1e-3).is_ok());
    }

    #[test]
    fn consistent_derivative_data_recovers_generator() {
        let m = 7;
        let a = random(m, m, 6);
        let ubar = random(m, 40, 7);
        let udot = a.dot(&ubar);
        let zero = Array2::zeros((m, m));
        let op = fit_derivative(ubar.view(), udot.view(), zero.view(), zero.view(), 0.0, 0.0).unwrap();
        assert!(max_abs(&(&op.matrix - &a)) < 1e-8);
        assert_eq!(op.route, Route::DerivativeFit);
    }

    #[test]
    fn strong_prior_pulls_toward_coarse_operator() {
        let g = make_grid(12).unwrap();
        let a_m = convection_operator(&g).to_dense();
        let d_m = diffusion_operator(&g).to_dense();
        let ubar = random(12, 50, 8);
        let udot = random(12, 50, 9);
        let mut last = f64::INFINITY;
        for lp in [1e0, 1e3, 1e6, 1e9] {
            let op = fit_derivative(ubar.view(), udot.view(), a_m.view(), d_m.view(), lp, 0.0).unwrap();
            let dist = frobenius((&op.matrix - &a_m).view());
            assert!(dist < last);
            last = dist;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn intrusive_with_identity_filter_is_fine_operator() {
        let g = make_grid(40).unwrap();
        let a = convection_operator(&g);
        let id = FilterMatrix::from_weights(Array2::eye(40), g.clone(), g.clone()).unwrap();
        let r = Array2::<f64>::eye(40);
        let op = intrusive_operator(&id, &a, r.view()).unwrap();
        assert!(max_abs(&(op - a.to_dense())) < 1e-12);
    }

    #[test]
    fn intrusive_uniform_filter_commutes() {
        // W circulant and invertible, R = Wᵀ (W Wᵀ)⁻¹ = W⁻¹, so W A R = A
        let g = make_grid(48).unwrap();
        let a = convection_operator(&g);
        let w = build_filter_matrix(&FilterSpec::uniform(FilterKind::Gaussian, 0.02), &g, &g).unwrap();
        let wt = w.weights().t().to_owned();
        let wwt = w.weights().dot(&wt);
        let r = spd_right_divide(wt.view(), wwt.view()).unwrap();
        let abar = intrusive_operator(&w, &a, r.view()).unwrap();
        let comm = abar.dot(&w.weights()) - w.weights().dot(&abar);
        assert!(max_abs(&comm) < 1e-8 * max_abs(&abar));
        let op = InferredOperator::new(abar, Route::Intrusive, Hyperparams::default());
        assert!(commutator_error(&op, a.to_dense().view()).unwrap() < 1e-8);
    }

    #[test]
    fn intrusive_rejects_mismatched_shapes() {
        let g = make_grid(20).unwrap();
        let a = convection_operator(&g);
        let id = FilterMatrix::from_weights(Array2::eye(20), g.clone(), g.clone()).unwrap();
        assert!(intrusive_operator(&id, &a, Array2::<f64>::zeros((19, 20)).view()).is_err());
    }

    #[test]
    fn commutator_error_of_baseline_is_zero() {
        let a = convection_operator(&make_grid(10).unwrap());
        let op = InferredOperator::baseline(&a);
        assert_eq!(commutator_error(&op, a.to_dense().view()).unwrap(), 0.0);
        assert!(commutator_error(&op, Array2::<f64>::eye(9).view()).is_err());
    }

    #[test]
    fn adam_first_step_has_step_size_magnitude() {
        let cfg = OptimizerConfig::default();
        let mut adam = Adam::new((2, 2), &cfg);
        let mut p = Array2::zeros((2, 2));
        let g = array![[0.5, -3.0], [1e-2, 7.0]];
        adam.step(&mut p, &g);
        for (pv, gv) in p.iter().zip(g.iter()) {
            assert!((pv.abs() - cfg.step_size).abs() < 1e-8 * cfg.step_size / gv.abs().min(1.0) + 1e-9);
            assert_eq!(pv.signum(), -gv.signum());
        }
        // constant gradients keep the step at the same size
        for _ in 0..10 {
            let before = p.clone();
            adam.step(&mut p, &g);
            let delta = &p - &before;
            assert!(delta.iter().all(|d| (d.abs() - cfg.step_size).abs() < 1e-9));
        }
    }

    /// Snapshots generated by the embedded solver itself for generator `b`.
    fn synthetic(b: &Array2<f64>, n_ic: usize, times: &[f64], opt: &OptimizerConfig, seed: u64) -> FilteredSnapshots {
        let m = b.nrows();
        let u0s = random(m, n_ic, seed);
        let n_t = times.len();
        let mut ubar = Array2::zeros((m, n_ic * n_t));
        for i in 0..n_ic {
            for (k, &t) in times.iter().enumerate() {
                let col = if t == 0.0 {
                    u0s.column(i).to_owned()
                } else {
                    adjoint::forward(b.view(), u0s.column(i), t, opt.steps_for(m, t)).unwrap().0
                };
                ubar.column_mut(i * n_t + k).assign(&col);
            }
        }
        let ubar_dot = b.dot(&ubar);
        FilteredSnapshots {
            ubar,
            ubar_dot,
            times: times.to_vec(),
            n_ic,
            n_t,
        }
    }

    #[test]
    fn embedded_stays_at_exact_generator() {
        let g = make_grid(8).unwrap();
        let a_m = convection_operator(&g).to_dense();
        let d_m = diffusion_operator(&g).to_dense();
        let b = &a_m + &(random(8, 8, 10) * 0.3);
        let opt = OptimizerConfig {
            iterations: 100,
            ..OptimizerConfig::default()
        };
        let data = synthetic(&b, 8, &[0.0, 0.1, 0.2, 0.3], &opt, 11);
        // gradient at the generator
        for i in 0..8 {
            for k in 1..4 {
                let (loss, grad) = adjoint::gradient(
                    b.view(),
                    data.state(i, 0),
                    data.times[k],
                    opt.steps_for(8, data.times[k]),
                    data.state(i, k),
                )
                .unwrap();
                assert!(loss < 1e-20);
                assert!(max_abs(&grad) < 1e-10);
            }
        }
        let fit = fit_embedded_from(&data, b.view(), a_m.view(), d_m.view(), 0.0, 0.0, &opt).unwrap();
        assert_eq!(fit.loss_history.len(), 100);
        assert!(max_abs(&(&fit.operator.matrix - &b)) < 1e-8);
    }

    #[test]
    fn embedded_training_reduces_loss() {
        let g = make_grid(8).unwrap();
        let a_m = convection_operator(&g).to_dense();
        let d_m = diffusion_operator(&g).to_dense();
        let b = &a_m + &(random(8, 8, 12) * 0.5);
        let opt = OptimizerConfig {
            iterations: 300,
            step_size: 1e-2,
            ..OptimizerConfig::default()
        };
        let data = synthetic(&b, 16, &[0.0, 0.1, 0.2, 0.3, 0.4], &opt, 13);
        let fit = fit_embedded(&data, a_m.view(), d_m.view(), 0.0, 0.0, &opt).unwrap();
        let head: f64 = fit.loss_history[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = fit.loss_history[280..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.1 * head, "{head} -> {tail}");
        let before = frobenius((&a_m - &b).view());
        let after = frobenius((&fit.operator.matrix - &b).view());
        assert!(after < 0.5 * before);
    }

    #[test]
    fn embedded_requires_initial_time() {
        let data = FilteredSnapshots {
            ubar: Array2::zeros((8, 4)),
            ubar_dot: Array2::zeros((8, 4)),
            times: vec![0.1, 0.2],
            n_ic: 2,
            n_t: 2,
        };
        let z = Array2::zeros((8, 8));
        assert!(fit_embedded(&data, z.view(), z.view(), 0.0, 0.0, &OptimizerConfig::default()).is_err());
    }

    #[test]
    fn embedded_reports_divergence() {
        let g = make_grid(8).unwrap();
        let a_m = convection_operator(&g).to_dense();
        let wild = Array2::<f64>::eye(8) * 1e4;
        let opt = OptimizerConfig {
            iterations: 5,
            steps_per_unit_time: Some(1),
            ..OptimizerConfig::default()
        };
        let data = synthetic(&a_m, 2, &[0.0, 100.0], &opt, 14);
        let err = fit_embedded_from(&data, wild.view(), a_m.view(), a_m.view(), 0.0, 0.0, &opt).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 0 }));
    }

    #[test]
    fn route_names_round_trip() {
        for r in Route::ALL {
            assert_eq!(r.to_string().parse::<Route>().unwrap(), r);
        }
    }

    #[test]
    fn reconstruction_cache_matches_direct_fit() {
        let ubar = random(5, 12, 15);
        let u = random(10, 12, 16);
        let sys = ReconstructionSystem::new(ubar.view(), u.view()).unwrap();
        let direct = fit_reconstruction(ubar.view(), u.view(), 1e-2).unwrap();
        assert_eq!(sys.solve(1e-2).unwrap(), direct);
    }

    /// Gaussian elimination with partial pivoting, one right-hand side.
    fn gauss_solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs())).unwrap();
            for k in 0..n {
                a.swap([c, k], [p, k]);
            }
            b.swap(c, p);
            for r in c + 1..n {
                let f = a[[r, c]] / a[[c, c]];
                for k in c..n {
                    a[[r, k]] -= f * a[[c, k]];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = Array1::zeros(n);
        for r in (0..n).rev() {
            let tail: f64 = (r + 1..n).map(|k| a[[r, k]] * x[k]).sum();
            x[r] = (b[r] - tail) / a[[r, r]];
        }
        x
    }

    /// Row n of R solves `(Ū Ūᵀ + dλ I) rᵀ = Ū uₙᵀ`.
    fn reconstruction_oracle(ubar: &Array2<f64>, u: &Array2<f64>, lambda: f64) -> Array2<f64> {
        let (m, d) = ubar.dim();
        let mut lhs = Array2::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                lhs[[i, j]] = (0..d).map(|c| ubar[[i, c]] * ubar[[j, c]]).sum::<f64>();
            }
            lhs[[i, i]] += d as f64 * lambda;
        }
        let mut r = Array2::zeros((u.nrows(), m));
        for n in 0..u.nrows() {
            let rhs = Array1::from_shape_fn(m, |i| (0..d).map(|c| ubar[[i, c]] * u[[n, c]]).sum::<f64>());
            r.row_mut(n).assign(&gauss_solve(lhs.clone(), rhs));
        }
        r
    }

    #[test]
    fn reconstruction_matches_row_oracle() {
        let ubar = random(20, 5, 17);
        let u = random(40, 5, 18);
        let r = fit_reconstruction(ubar.view(), u.view(), 1e-3).unwrap();
        let oracle = reconstruction_oracle(&ubar, &u, 1e-3);
        assert!(max_abs(&(&r - &oracle)) < 1e-10);
        // gradient of (1/d)‖RŪ - U‖² + λ‖R‖²
        let grad = (r.dot(&ubar) - &u).dot(&ubar.t()) * (2.0 / 5.0) + &r * 2e-3;
        assert!(frobenius(grad.view()) < 1e-8);
    }

    #[test]
    fn derivative_fit_is_stationary() {
        let ubar = random(10, 40, 19);
        let udot = random(10, 40, 20);
        let g = make_grid(10).unwrap();
        let a_m = convection_operator(&g).to_dense();
        let d_m = diffusion_operator(&g).to_dense();
        let (lp, ls) = (1e-2, 1e-2);
        let op = fit_derivative(ubar.view(), udot.view(), a_m.view(), d_m.view(), lp, ls).unwrap();
        let a = &op.matrix;
        let grad = (a.dot(&ubar) - &udot).dot(&ubar.t()) * (2.0 / 40.0)
            + (a - &a_m) * (2.0 * lp)
            + (a - &d_m) * (2.0 * ls);
        let scale = frobenius(udot.view()).powi(2) / 40.0;
        assert!(frobenius(grad.view()) < 1e-8 * scale.max(1.0));
    }

    #[test]
    fn derivative_fit_data_term_matches_oracle() {
        // same normal equations as the reconstruction with U ← Ū̇ and λ = 0
        let ubar = random(6, 30, 21);
        let udot = random(6, 30, 22);
        let z = Array2::zeros((6, 6));
        let op = fit_derivative(ubar.view(), udot.view(), z.view(), z.view(), 0.0, 0.0).unwrap();
        let oracle = reconstruction_oracle(&ubar, &udot, 0.0);
        assert!(max_abs(&(&op.matrix - &oracle)) < 1e-10);
    }
}
