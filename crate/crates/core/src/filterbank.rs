//! Non-uniform kernel filters and their midpoint-rule discretization `W`.
//!
//! A filter is `ū(x) = ∫ G(x, ξ) u(ξ) dξ` with `u` extended periodically. The
//! discrete filter maps fine-grid values to coarse-grid values with
//!
//! ```text
//! W_mn = G̃(x_m, ξ_n) / Σ_i G̃(x_m, ξ_i),    G̃(x, ξ) = Σ_{|z| ≤ z_max} G(x, ξ + z)
//! ```
//!
//! so that every row sums to one and constants pass through unchanged.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::stencils::Grid;
use crate::{par, Error, Result};

/// Entries of the Gaussian kernel below this are treated as zero.
const GAUSSIAN_FLOOR: f64 = 1e-300;

/// Relative slack on the top-hat support test so that fine points lying
/// exactly on `|ξ - x| = h(x)` are kept despite rounding in `ξ - x`.
const TOP_HAT_EDGE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterKind {
    TopHat,
    Gaussian,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterKind::TopHat => "tophat",
            FilterKind::Gaussian => "gaussian",
        })
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tophat" | "top-hat" | "top_hat" => Ok(FilterKind::TopHat),
            "gaussian" => Ok(FilterKind::Gaussian),
            other => Err(Error::InvalidArgument(format!("unknown filter kind '{other}'"))),
        }
    }
}

/// Shape of the filter radius `h(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadiusProfile {
    /// `h(x) = (1 + amplitude · sin(2πx)) h0`.
    Sinusoidal { amplitude: f64 },
    /// `h(x) = h0`.
    Uniform,
}

impl Default for RadiusProfile {
    fn default() -> Self {
        RadiusProfile::Sinusoidal {
            amplitude: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub h0: f64,
    pub profile: RadiusProfile,
    /// Periodic images `z ∈ [-z_max, z_max]` summed in `G̃`.
    pub z_max: usize,
}

impl FilterSpec {
    /// Sinusoidal radius with `h0 = 1/50` and one periodic image per side.
    pub fn new(kind: FilterKind) -> Self {
        FilterSpec {
            kind,
            h0: 1.0 / 50.0,
            profile: RadiusProfile::default(),
            z_max: 1,
        }
    }

    pub fn uniform(kind: FilterKind, h0: f64) -> Self {
        FilterSpec {
            kind,
            h0,
            profile: RadiusProfile::Uniform,
            z_max: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h0 > 0.0) || !self.h0.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "filter radius h0 must be positive, got {}",
                self.h0
            )));
        }
        if let RadiusProfile::Sinusoidal { amplitude } = self.profile {
            if !(amplitude.abs() < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "radius amplitude must lie in (-1, 1), got {amplitude}"
                )));
            }
        }
        if self.z_max < 1 {
            return Err(Error::InvalidArgument("z_max must be at least 1".into()));
        }
        Ok(())
    }

    pub fn radius(&self, x: f64) -> f64 {
        match self.profile {
            RadiusProfile::Sinusoidal { amplitude } => {
                (1.0 + amplitude * (2.0 * PI * x).sin()) * self.h0
            }
            RadiusProfile::Uniform => self.h0,
        }
    }

    /// Kernel `G(x, ξ)` without periodization.
    pub fn kernel(&self, x: f64, xi: f64) -> f64 {
        let h = self.radius(x);
        let dist = (xi - x).abs();
        match self.kind {
            FilterKind::TopHat => {
                if dist <= h * (1.0 + TOP_HAT_EDGE_SLACK) {
                    1.0 / (2.0 * h)
                } else {
                    0.0
                }
            }
            FilterKind::Gaussian => {
                let g = (3.0 / (2.0 * PI * h * h)).sqrt() * (-3.0 * dist * dist / (2.0 * h * h)).exp();
                if g < GAUSSIAN_FLOOR {
                    0.0
                } else {
                    g
                }
            }
        }
    }

    /// Periodized kernel `G̃(x, ξ) = Σ_{|z| ≤ z_max} G(x, ξ + z)`.
    pub fn periodic_kernel(&self, x: f64, xi: f64) -> f64 {
        let z = self.z_max as i64;
        (-z..=z).map(|shift| self.kernel(x, xi + shift as f64)).sum()
    }
}

/// Dense `M × N` quadrature matrix of a filter.
#[derive(Debug, Clone)]
pub struct FilterMatrix {
    weights: Array2<f64>,
    coarse: Grid,
    fine: Grid,
}

impl FilterMatrix {
    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }

    pub fn coarse_grid(&self) -> &Grid {
        &self.coarse
    }

    pub fn fine_grid(&self) -> &Grid {
        &self.fine
    }

    /// Wraps an existing weight matrix (for instance one read from disk).
    pub fn from_weights(weights: Array2<f64>, coarse: Grid, fine: Grid) -> Result<Self> {
        if weights.nrows() != coarse.n_points() {
            return Err(Error::dim("filter rows", coarse.n_points(), weights.nrows()));
        }
        if weights.ncols() != fine.n_points() {
            return Err(Error::dim("filter columns", fine.n_points(), weights.ncols()));
        }
        Ok(FilterMatrix {
            weights,
            coarse,
            fine,
        })
    }

    /// `Ū = W U` for fine states stored as columns.
    pub fn filter_snapshots(&self, fine_states: ArrayView2<f64>) -> Result<Array2<f64>> {
        if fine_states.nrows() != self.cols() {
            return Err(Error::dim("filter_snapshots", self.cols(), fine_states.nrows()));
        }
        Ok(self.weights.dot(&fine_states))
    }
}

pub fn build_filter_matrix(spec: &FilterSpec, coarse: &Grid, fine: &Grid) -> Result<FilterMatrix> {
    spec.validate()?;
    let (m, n) = (coarse.n_points(), fine.n_points());
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "coarse grid ({m}) must not be finer than the fine grid ({n})"
        )));
    }
    let xi = fine.points();
    let rows = par::try_map_indexed(m, |row| {
        let x = coarse.point(row + 1);
        let mut w: Vec<f64> = xi.iter().map(|&xi| spec.periodic_kernel(x, xi)).collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::EmptyFilterSupport { row });
        }
        w.iter_mut().for_each(|v| *v /= total);
        Ok(w)
    })?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let weights = Array2::from_shape_vec((m, n), flat).expect("row lengths match");
    Ok(FilterMatrix {
        weights,
        coarse: coarse.clone(),
        fine: fine.clone(),
    })
}
