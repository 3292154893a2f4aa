//! Small dense linear-algebra helpers: Cholesky factorization and the
//! right-division `B S⁻¹` used by every ridge-type closed form.

use ndarray::{Array2, ArrayView2, Axis};

use crate::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `S = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric positive-definite matrix. Only the lower
    /// triangle of `s` is read.
    pub fn factor(s: ArrayView2<f64>) -> Result<Self> {
        let n = s.nrows();
        if s.ncols() != n {
            return Err(Error::dim("cholesky (square)", n, s.ncols()));
        }
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut diag = s[[j, j]];
            {
                let row_j = l.row(j);
                for k in 0..j {
                    diag -= row_j[k] * row_j[k];
                }
            }
            // pivots that lost all significant digits count as singular
            if !(diag > 64.0 * f64::EPSILON * s[[j, j]].abs()) || !diag.is_finite() {
                return Err(Error::Singular(format!(
                    "matrix is not numerically positive definite (pivot {j} = {diag:e})"
                )));
            }
            let d = diag.sqrt();
            l[[j, j]] = d;
            for i in j + 1..n {
                let mut v = s[[i, j]];
                let (ri, rj) = (l.row(i), l.row(j));
                for k in 0..j {
                    v -= ri[k] * rj[k];
                }
                l[[i, j]] = v / d;
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// Solves `S X = B` for a block of right-hand sides (columns of `b`).
    pub fn solve(&self, b: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = self.lower.nrows();
        if b.nrows() != n {
            return Err(Error::dim("cholesky solve", n, b.nrows()));
        }
        // work on the transpose so each right-hand side is a contiguous row
        let mut x = b.t().as_standard_layout().into_owned();
        let l = &self.lower;
        for mut rhs in x.axis_iter_mut(Axis(0)) {
            let rhs = rhs.as_slice_mut().expect("standard layout");
            for i in 0..n {
                let row = l.row(i);
                let mut v = rhs[i];
                for k in 0..i {
                    v -= row[k] * rhs[k];
                }
                rhs[i] = v / row[i];
            }
            for i in (0..n).rev() {
                let mut v = rhs[i];
                for k in i + 1..n {
                    v -= l[[k, i]] * rhs[k];
                }
                rhs[i] = v / l[[i, i]];
            }
        }
        Ok(x.reversed_axes().as_standard_layout().into_owned())
    }
}

/// Returns `X = B S⁻¹` for symmetric positive-definite `S`, via `S Xᵀ = Bᵀ`.
pub fn spd_right_divide(b: ArrayView2<f64>, s: ArrayView2<f64>) -> Result<Array2<f64>> {
    if b.ncols() != s.nrows() {
        return Err(Error::dim("right division", s.nrows(), b.ncols()));
    }
    let chol = Cholesky::factor(s)?;
    Ok(chol.solve(b.t())?.reversed_axes().as_standard_layout().into_owned())
}

pub fn frobenius(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `X Yᵀ` without materializing the transpose.
pub fn mul_transpose(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    x.dot(&y.t())
}

/// Adds `alpha` to the diagonal.
pub fn add_diagonal(m: &mut Array2<f64>, alpha: f64) {
    m.diag_mut().mapv_inplace(|d| d + alpha);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_small_system() {
        let s = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let b = array![[1.0, 0.0], [2.0, 1.0], [3.0, -1.0]];
        let x = Cholesky::factor(s.view()).unwrap().solve(b.view()).unwrap();
        let r = s.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-14));
        let l = Cholesky::factor(s.view()).unwrap();
        let back = l.lower().dot(&l.lower().t());
        assert!((back - &s).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn right_division() {
        let s = array![[3.0, 1.0], [1.0, 2.0]];
        let b = array![[1.0, 2.0], [0.5, -1.0], [4.0, 0.0]];
        let x = spd_right_divide(b.view(), s.view()).unwrap();
        assert!((x.dot(&s) - &b).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn rejects_indefinite() {
        let s = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(Cholesky::factor(s.view()), Err(Error::Singular(_))));
        let z = Array2::<f64>::zeros((3, 3));
        assert!(Cholesky::factor(z.view()).is_err());
    }
}
