//! Uniform periodic grids and circulant finite-difference operators.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use crate::{Error, Result};

/// Smallest grid that still fits the seven-point stencils.
pub const MIN_POINTS: usize = 7;

/// Uniform periodic grid on `[0, 1)` with points `x_n = n / N`, `n = 1..=N`.
///
/// The last point is `x_N = 1`, which is identified with `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n_points: usize,
    spacing: f64,
    points: Array1<f64>,
}

impl Grid {
    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn points(&self) -> ArrayView1<'_, f64> {
        self.points.view()
    }

    /// Point with 1-based index `n`, matching `x_n = n Δx`.
    pub fn point(&self, n: usize) -> f64 {
        self.points[n - 1]
    }

    /// Evaluates `f` at every grid point.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Array1<f64> {
        self.points.mapv(f)
    }
}

pub fn make_grid(n_points: usize) -> Result<Grid> {
    if n_points < MIN_POINTS {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least {MIN_POINTS} points, got {n_points}"
        )));
    }
    let points = Array1::from_iter((1..=n_points).map(|n| n as f64 / n_points as f64));
    Ok(Grid {
        n_points,
        spacing: 1.0 / n_points as f64,
        points,
    })
}

/// Periodic operator whose `i`-th (periodically extended) superdiagonal holds
/// `stencil[i + α] * scale` for `i in -α..=α`.
///
/// Stencil entries are kept as the exact integers (or short rationals) of the
/// finite-difference formula, and the grid-dependent factor lives in `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct CirculantOperator {
    size: usize,
    stencil: Vec<f64>,
    scale: f64,
}

impl CirculantOperator {
    pub fn new(size: usize, stencil: Vec<f64>, scale: f64) -> Result<Self> {
        if stencil.len() % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "stencil length must be odd, got {}",
                stencil.len()
            )));
        }
        if stencil.len() > size {
            return Err(Error::InvalidArgument(format!(
                "stencil of length {} does not fit {size} points",
                stencil.len()
            )));
        }
        Ok(CirculantOperator {
            size,
            stencil,
            scale,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn stencil(&self) -> &[f64] {
        &self.stencil
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Half-width `α` of the stencil.
    pub fn radius(&self) -> usize {
        self.stencil.len() / 2
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.size;
        let alpha = self.radius() as isize;
        let mut dense = Array2::zeros((n, n));
        for row in 0..n {
            for (k, &s) in self.stencil.iter().enumerate() {
                let col = (row as isize + k as isize - alpha).rem_euclid(n as isize) as usize;
                dense[[row, col]] += s * self.scale;
            }
        }
        dense
    }

    pub fn apply(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.size {
            return Err(Error::dim("circulant apply", self.size, v.len()));
        }
        let mut out = Array1::zeros(self.size);
        self.apply_into(v, out.view_mut());
        Ok(out)
    }

    /// `out = self * v`; lengths must already agree.
    pub fn apply_into(&self, v: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
        let n = self.size;
        let alpha = self.radius();
        match (v.as_slice(), out.as_slice_mut()) {
            (Some(v), Some(out)) => {
                // interior rows avoid the modulo
                for (row, o) in out.iter_mut().enumerate() {
                    let acc = if row >= alpha && row + alpha < n {
                        let window = &v[row - alpha..=row + alpha];
                        window
                            .iter()
                            .zip(&self.stencil)
                            .map(|(x, s)| x * s)
                            .sum::<f64>()
                    } else {
                        self.wrapped_row(row, |i| v[i])
                    };
                    *o = acc * self.scale;
                }
            }
            _ => {
                for row in 0..n {
                    out[row] = self.wrapped_row(row, |i| v[i]) * self.scale;
                }
            }
        }
    }

    fn wrapped_row(&self, row: usize, value: impl Fn(usize) -> f64) -> f64 {
        let n = self.size as isize;
        let alpha = self.radius() as isize;
        self.stencil
            .iter()
            .enumerate()
            .map(|(k, s)| s * value((row as isize + k as isize - alpha).rem_euclid(n) as usize))
            .sum()
    }

    /// Eigenvalues `scale * Σ_j s_j exp(2πi jk/η)` for `k = 0..η`, as (re, im).
    pub fn eigenvalues(&self) -> Vec<(f64, f64)> {
        let n = self.size as f64;
        let alpha = self.radius() as isize;
        (0..self.size)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (idx, &s) in self.stencil.iter().enumerate() {
                    let j = idx as isize - alpha;
                    let phase = 2.0 * std::f64::consts::PI * (j as f64) * (k as f64) / n;
                    re += s * phase.cos();
                    im += s * phase.sin();
                }
                (re * self.scale, im * self.scale)
            })
            .collect()
    }

    /// Largest eigenvalue modulus.
    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues()
            .into_iter()
            .map(|(re, im)| re.hypot(im))
            .fold(0.0, f64::max)
    }
}

/// Sixth-order central stencil for `-∂/∂x`: `(1/(60Δx)) circ(1, -9, 45, 0, -45, 9, -1)`.
pub fn convection_operator(grid: &Grid) -> CirculantOperator {
    CirculantOperator {
        size: grid.n_points(),
        stencil: vec![1.0, -9.0, 45.0, 0.0, -45.0, 9.0, -1.0],
        scale: 1.0 / (60.0 * grid.spacing()),
    }
}

/// Sixth-order central stencil for `∂²/∂x²`:
/// `(1/(180Δx²)) circ(2, -27, 270, -490, 270, -27, 2)`.
pub fn diffusion_operator(grid: &Grid) -> CirculantOperator {
    let dx = grid.spacing();
    CirculantOperator {
        size: grid.n_points(),
        stencil: vec![2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0],
        scale: 1.0 / (180.0 * dx * dx),
    }
}

/// Right-hand side `F(Y) = L Y` of a linear autonomous ODE acting on a block
/// of states stored as columns.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    /// `out = L x` for an `dim × k` block `x`.
    fn apply_block(&self, x: ArrayView2<f64>, out: ArrayViewMut2<f64>);
}

impl LinearOperator for CirculantOperator {
    fn dim(&self) -> usize {
        self.size
    }

    fn apply_block(&self, x: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
        for (col, out_col) in x.columns().into_iter().zip(out.columns_mut()) {
            self.apply_into(col, out_col);
        }
    }
}

/// Dense product. The gemm kernel repacks the matrix on every call, which
/// dominates for a few columns, so narrow blocks go column by column.
fn dense_apply(a: ArrayView2<f64>, x: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
    if x.ncols() < 4 {
        for (col, mut out_col) in x.columns().into_iter().zip(out.columns_mut()) {
            ndarray::linalg::general_mat_vec_mul(1.0, &a, &col, 0.0, &mut out_col);
        }
    } else {
        ndarray::linalg::general_mat_mul(1.0, &a, &x, 0.0, &mut out);
    }
}

impl LinearOperator for Array2<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply_block(&self, x: ArrayView2<f64>, out: ArrayViewMut2<f64>) {
        dense_apply(self.view(), x, out);
    }
}

impl LinearOperator for ArrayView2<'_, f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply_block(&self, x: ArrayView2<f64>, out: ArrayViewMut2<f64>) {
        dense_apply(self.view(), x, out);
    }
}
