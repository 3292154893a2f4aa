//! Flat `key = value` experiment configuration with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::dns::{DatasetKind, DatasetParams, InitialConditionSpec, Method, SolverConfig};
use crate::filterbank::{FilterKind, FilterSpec, RadiusProfile};
use crate::inference::{default_lambda_grid, OptimizerConfig, RegularizationConfig, Route};
use crate::eval::{DEFAULT_PROBE_FACTOR, DEFAULT_SWEEP_M};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_fine: usize,
    pub m: usize,
    pub m_values: Vec<usize>,
    pub filter: FilterKind,
    pub filters: Vec<FilterKind>,
    pub h0: f64,
    pub radius_amplitude: f64,
    pub z_max: usize,
    pub max_frequency: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub train: DatasetParams,
    pub valid: DatasetParams,
    pub test: DatasetParams,
    pub long: DatasetParams,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_steps: usize,
    pub regularization: RegularizationConfig,
    pub embedded_grid: Vec<(f64, f64)>,
    pub optimizer: OptimizerConfig,
    pub sweep_routes: Vec<Route>,
    pub sweep_embedded_iterations: usize,
    /// Stiffness probe budget relative to the baseline; 0 disables it.
    pub probe_factor: f64,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_fine: 1000,
            m: 100,
            m_values: DEFAULT_SWEEP_M.to_vec(),
            filter: FilterKind::TopHat,
            filters: vec![FilterKind::TopHat, FilterKind::Gaussian],
            h0: 1.0 / 50.0,
            radius_amplitude: 1.0 / 3.0,
            z_max: 1,
            max_frequency: 250,
            noise_std: InitialConditionSpec::DEFAULT_NOISE_STD,
            seed: 0,
            train: DatasetKind::Train.default_params(),
            valid: DatasetKind::Valid.default_params(),
            test: DatasetKind::Test.default_params(),
            long: DatasetKind::Long.default_params(),
            abs_tol: 1e-10,
            rel_tol: 1e-8,
            max_steps: SolverConfig::default().max_steps,
            regularization: RegularizationConfig {
                grid: default_lambda_grid(),
                ..RegularizationConfig::default()
            },
            embedded_grid: vec![(0.0, 0.0)],
            optimizer: OptimizerConfig::default(),
            sweep_routes: vec![Route::Baseline, Route::Intrusive, Route::DerivativeFit],
            sweep_embedded_iterations: 2000,
            probe_factor: DEFAULT_PROBE_FACTOR,
            output: PathBuf::from("out"),
        }
    }
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_num<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("cannot parse '{value}' for {key}"),
    })
}

fn parse_list<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<Vec<T>> {
    split_list(value).map(|v| parse_num(v, line, key)).collect()
}

impl ExperimentConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim(), i + 1)?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment; `line` is used in diagnostics.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let err = |message: String| Error::Config { line, message };
        match key {
            "n_fine" => self.n_fine = parse_num(value, line, key)?,
            "m" => self.m = parse_num(value, line, key)?,
            "m_values" => self.m_values = parse_list(value, line, key)?,
            "filter" => self.filter = value.parse().map_err(|_| err(format!("unknown filter '{value}'")))?,
            "filters" => {
                self.filters = split_list(value)
                    .map(|v| v.parse().map_err(|_| err(format!("unknown filter '{v}'"))))
                    .collect::<Result<_>>()?
            }
            "h0" => self.h0 = parse_num(value, line, key)?,
            "radius_amplitude" => self.radius_amplitude = parse_num(value, line, key)?,
            "z_max" => self.z_max = parse_num(value, line, key)?,
            "max_frequency" => self.max_frequency = parse_num(value, line, key)?,
            "noise_std" => self.noise_std = parse_num(value, line, key)?,
            "seed" => self.seed = parse_num(value, line, key)?,
            "abs_tol" => self.abs_tol = parse_num(value, line, key)?,
            "rel_tol" => self.rel_tol = parse_num(value, line, key)?,
            "max_steps" => self.max_steps = parse_num(value, line, key)?,
            "lambda" => self.regularization.lambda = parse_num(value, line, key)?,
            "lambda_prior" => self.regularization.lambda_prior = parse_num(value, line, key)?,
            "lambda_stab" => self.regularization.lambda_stab = parse_num(value, line, key)?,
            "grid" => self.regularization.grid = parse_list(value, line, key)?,
            "embedded_grid" => {
                self.embedded_grid = split_list(value)
                    .map(|pair| {
                        let (p, s) = pair
                            .split_once(':')
                            .ok_or_else(|| err(format!("expected 'lambda_prior:lambda_stab', got '{pair}'")))?;
                        Ok((parse_num(p.trim(), line, key)?, parse_num(s.trim(), line, key)?))
                    })
                    .collect::<Result<_>>()?
            }
            "iterations" => self.optimizer.iterations = parse_num(value, line, key)?,
            "step_size" => self.optimizer.step_size = parse_num(value, line, key)?,
            "beta1" => self.optimizer.beta1 = parse_num(value, line, key)?,
            "beta2" => self.optimizer.beta2 = parse_num(value, line, key)?,
            "epsilon" => self.optimizer.epsilon = parse_num(value, line, key)?,
            "batch_size" => self.optimizer.batch_size = parse_num(value, line, key)?,
            "optimizer_seed" => self.optimizer.seed = parse_num(value, line, key)?,
            "steps_per_unit_time" => {
                let v: usize = parse_num(value, line, key)?;
                self.optimizer.steps_per_unit_time = (v > 0).then_some(v);
            }
            "sweep_routes" => {
                self.sweep_routes = split_list(value)
                    .map(|v| v.parse::<Route>().map_err(|_| err(format!("unknown route '{v}'"))))
                    .collect::<Result<_>>()?
            }
            "sweep_embedded_iterations" => self.sweep_embedded_iterations = parse_num(value, line, key)?,
            "probe_factor" => self.probe_factor = parse_num(value, line, key)?,
            "output" => self.output = PathBuf::from(value),
            _ => {
                let Some((set, field)) = key.split_once('.') else {
                    return Err(err(format!("unknown key '{key}'")));
                };
                let kind: DatasetKind = set.parse().map_err(|_| err(format!("unknown key '{key}'")))?;
                let params = self.dataset_mut(kind);
                match field {
                    "n_ic" => params.n_ic = parse_num(value, line, key)?,
                    "n_t" => params.n_t = parse_num(value, line, key)?,
                    "horizon" => params.horizon = parse_num(value, line, key)?,
                    _ => return Err(err(format!("unknown key '{key}'"))),
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                message: format!("override '{o}' is not of the form key=value"),
            })?;
            self.set(k.trim(), v.trim(), 0)?;
        }
        Ok(())
    }

    pub fn dataset(&self, kind: DatasetKind) -> DatasetParams {
        match kind {
            DatasetKind::Train => self.train,
            DatasetKind::Valid => self.valid,
            DatasetKind::Test => self.test,
            DatasetKind::Long => self.long,
        }
    }

    fn dataset_mut(&mut self, kind: DatasetKind) -> &mut DatasetParams {
        match kind {
            DatasetKind::Train => &mut self.train,
            DatasetKind::Valid => &mut self.valid,
            DatasetKind::Test => &mut self.test,
            DatasetKind::Long => &mut self.long,
        }
    }

    pub fn filter_spec(&self, kind: FilterKind) -> FilterSpec {
        FilterSpec {
            kind,
            h0: self.h0,
            profile: if self.radius_amplitude == 0.0 {
                RadiusProfile::Uniform
            } else {
                RadiusProfile::Sinusoidal {
                    amplitude: self.radius_amplitude,
                }
            },
            z_max: self.z_max,
        }
    }

    pub fn probe(&self) -> Option<f64> {
        (self.probe_factor > 0.0).then_some(self.probe_factor)
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            abs_tol: self.abs_tol,
            rel_tol: self.rel_tol,
            max_steps: self.max_steps,
            method: Method::Adaptive,
        }
    }

    pub fn initial_conditions(&self, count: usize) -> InitialConditionSpec {
        InitialConditionSpec {
            max_frequency: self.max_frequency,
            noise_std: self.noise_std,
            seed: self.seed,
            count,
        }
    }

    /// Checks every field before any compute.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_fine < 7 {
            return bad(format!("n_fine must be at least 7, got {}", self.n_fine));
        }
        if self.m < 7 || self.m > self.n_fine {
            return bad(format!("m must lie in [7, n_fine], got {}", self.m));
        }
        if self.m_values.is_empty()
            || self.m_values.windows(2).any(|w| w[0] >= w[1])
            || self.m_values[0] < 7
        {
            return bad("m_values must be strictly ascending and at least 7".into());
        }
        if self.filters.is_empty() {
            return bad("filters must not be empty".into());
        }
        for kind in &self.filters {
            self.filter_spec(*kind).validate()?;
        }
        self.filter_spec(self.filter).validate()?;
        for kind in DatasetKind::ALL {
            self.dataset(kind).validate()?;
        }
        self.initial_conditions(0).validate(&crate::stencils::make_grid(self.n_fine)?)?;
        self.solver().validate()?;
        self.regularization.validate()?;
        if self.embedded_grid.iter().any(|(p, s)| !(*p >= 0.0) || !(*s >= 0.0)) {
            return bad("embedded_grid weights must be non-negative".into());
        }
        self.optimizer.validate()?;
        if !(self.probe_factor == 0.0 || self.probe_factor >= 1.0) || !self.probe_factor.is_finite() {
            return bad("probe_factor must be 0 (off) or at least 1".into());
        }
        if self.sweep_embedded_iterations == 0 {
            return bad("sweep_embedded_iterations must be positive".into());
        }
        Ok(())
    }

    /// Serializes every field; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_fine", self.n_fine.to_string());
        kv("m", self.m.to_string());
        kv("m_values", join(&self.m_values, |m| m.to_string()));
        kv("filter", self.filter.to_string());
        kv("filters", join(&self.filters, |f| f.to_string()));
        kv("h0", format!("{:?}", self.h0));
        kv("radius_amplitude", format!("{:?}", self.radius_amplitude));
        kv("z_max", self.z_max.to_string());
        kv("max_frequency", self.max_frequency.to_string());
        kv("noise_std", format!("{:?}", self.noise_std));
        kv("seed", self.seed.to_string());
        for kind in DatasetKind::ALL {
            let p = self.dataset(kind);
            kv(&format!("{kind}.n_ic"), p.n_ic.to_string());
            kv(&format!("{kind}.n_t"), p.n_t.to_string());
            kv(&format!("{kind}.horizon"), format!("{:?}", p.horizon));
        }
        kv("abs_tol", format!("{:?}", self.abs_tol));
        kv("rel_tol", format!("{:?}", self.rel_tol));
        kv("max_steps", self.max_steps.to_string());
        kv("lambda", format!("{:?}", self.regularization.lambda));
        kv("lambda_prior", format!("{:?}", self.regularization.lambda_prior));
        kv("lambda_stab", format!("{:?}", self.regularization.lambda_stab));
        kv("grid", join(&self.regularization.grid, |g| format!("{g:?}")));
        kv("embedded_grid", join(&self.embedded_grid, |(p, q)| format!("{p:?}:{q:?}")));
        let o = &self.optimizer;
        kv("iterations", o.iterations.to_string());
        kv("step_size", format!("{:?}", o.step_size));
        kv("beta1", format!("{:?}", o.beta1));
        kv("beta2", format!("{:?}", o.beta2));
        kv("epsilon", format!("{:?}", o.epsilon));
        kv("batch_size", o.batch_size.to_string());
        kv("optimizer_seed", o.seed.to_string());
        kv("steps_per_unit_time", o.steps_per_unit_time.unwrap_or(0).to_string());
        kv("sweep_routes", join(&self.sweep_routes, |r| r.to_string()));
        kv("sweep_embedded_iterations", self.sweep_embedded_iterations.to_string());
        kv("probe_factor", format!("{:?}", self.probe_factor));
        kv("output", self.output.display().to_string());
        s
    }
}
