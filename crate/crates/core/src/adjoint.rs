//! Differentiable fixed-step RK4 solve of `dū/dt = Ā ū` and the discrete
//! adjoint of `‖S(Ā, ū0, t) - target‖²` with respect to every entry of `Ā`.
//!
//! The reverse sweep walks the RK4 stages backwards. Per step the contribution
//! to `∂loss/∂Ā` is `Σ_i k̄_i y_iᵀ`, with `y_i` the stage inputs and `k̄_i` the
//! adjoints of the stage derivatives; those outer products are accumulated as
//! one matrix product per checkpoint segment. Forward states inside a segment
//! are recomputed from the nearest stored checkpoint.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};

use crate::{par, Error, Result};

/// States stored during the forward sweep.
#[derive(Debug, Clone)]
pub struct TapeCheckpoint {
    pub stride: usize,
    /// `(step index, state before that step)`, always starting with step 0.
    pub stored_states: Vec<(usize, Array1<f64>)>,
}

/// `√n_steps`, at least 1.
pub fn default_stride(n_steps: usize) -> usize {
    ((n_steps as f64).sqrt().round() as usize).max(1)
}

/// Samples per block in [`batch_gradient`]. Fixed so results do not depend
/// on the thread count.
const BLOCK: usize = 16;

fn check_inputs(a: ArrayView2<f64>, u0: ArrayView1<f64>, t: f64, n_steps: usize) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::dim("embedded operator (square)", a.nrows(), a.ncols()));
    }
    if u0.len() != a.nrows() {
        return Err(Error::dim("embedded initial state", a.nrows(), u0.len()));
    }
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("integration time must be >= 0, got {t}")));
    }
    Ok(())
}

/// `out = base + c · h ⊙ k`, with `h` scaling columns.
fn axpy_cols(mut out: ArrayViewMut2<f64>, base: ArrayView2<f64>, c: f64, h: &[f64], k: ArrayView2<f64>) {
    Zip::from(out.rows_mut())
        .and(base.rows())
        .and(k.rows())
        .for_each(|mut o, b, k| {
            for j in 0..h.len() {
                o[j] = b[j] + c * h[j] * k[j];
            }
        });
}

/// `out += c · h ⊙ k`.
fn add_cols(mut out: ArrayViewMut2<f64>, c: f64, h: &[f64], k: ArrayView2<f64>) {
    Zip::from(out.rows_mut()).and(k.rows()).for_each(|mut o, k| {
        for j in 0..h.len() {
            o[j] += c * h[j] * k[j];
        }
    });
}

/// Several trajectories advanced together, one per column, sorted by
/// decreasing step count. Column `j` takes `n[j]` steps of size `h[j]` and
/// then stays put, so at any step the moving columns form a prefix.
struct Block<'a> {
    a: ArrayView2<'a, f64>,
    h: Vec<f64>,
    n: Vec<usize>,
    k: Array2<f64>,
    y: Array2<f64>,
}

impl<'a> Block<'a> {
    fn new(a: ArrayView2<'a, f64>, h: Vec<f64>, n: Vec<usize>) -> Self {
        debug_assert!(n.windows(2).all(|w| w[0] >= w[1]));
        let shape = (a.nrows(), h.len());
        Block {
            a,
            h,
            n,
            k: Array2::zeros(shape),
            y: Array2::zeros(shape),
        }
    }

    fn n_max(&self) -> usize {
        self.n.first().copied().unwrap_or(0)
    }

    /// Number of columns still moving at `step`.
    fn active(&self, step: usize) -> usize {
        self.n.partition_point(|&n| n > step)
    }

    /// One RK4 step, `u → next`. With `record`, the four stage inputs of the
    /// moving columns are written side by side into it.
    fn step(&mut self, u: &Array2<f64>, step: usize, next: &mut Array2<f64>, mut record: Option<ArrayViewMut2<f64>>) {
        let act = self.active(step);
        let hs = &self.h[..act];
        let a = self.a;
        let u_act = u.slice(s![.., ..act]);
        let mut k = self.k.slice_mut(s![.., ..act]);
        let mut y = self.y.slice_mut(s![.., ..act]);
        next.slice_mut(s![.., act..]).assign(&u.slice(s![.., act..]));
        let mut n_act = next.slice_mut(s![.., ..act]);

        if let Some(r) = record.as_mut() {
            r.slice_mut(s![.., ..act]).assign(&u_act);
        }
        general_mat_mul(1.0, &a, &u_act, 0.0, &mut k);
        axpy_cols(n_act.view_mut(), u_act, 1.0 / 6.0, hs, k.view());
        axpy_cols(y.view_mut(), u_act, 0.5, hs, k.view());
        for (stage, c_next, c_y) in [(1, 1.0 / 3.0, 0.5), (2, 1.0 / 3.0, 1.0)] {
            if let Some(r) = record.as_mut() {
                r.slice_mut(s![.., stage * act..(stage + 1) * act]).assign(&y);
            }
            general_mat_mul(1.0, &a, &y, 0.0, &mut k);
            add_cols(n_act.view_mut(), c_next, hs, k.view());
            axpy_cols(y.view_mut(), u_act, c_y, hs, k.view());
        }
        if let Some(r) = record.as_mut() {
            r.slice_mut(s![.., 3 * act..4 * act]).assign(&y);
        }
        general_mat_mul(1.0, &a, &y, 0.0, &mut k);
        add_cols(n_act, 1.0 / 6.0, hs, k.view());
    }

    fn blow_up_time(&self, steps: usize) -> f64 {
        steps as f64 * self.h.iter().copied().fold(0.0, f64::max)
    }

    /// Forward sweep storing the state before every `stride`-th step.
    fn forward(&mut self, u0: Array2<f64>, stride: usize) -> Result<(Array2<f64>, Vec<(usize, Array2<f64>)>)> {
        let mut u = u0;
        let mut next = Array2::zeros(u.raw_dim());
        let mut stored = vec![(0, u.clone())];
        for step in 0..self.n_max() {
            if step > 0 && step % stride == 0 {
                stored.push((step, u.clone()));
            }
            self.step(&u, step, &mut next, None);
            std::mem::swap(&mut u, &mut next);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    time: self.blow_up_time(step + 1),
                });
            }
        }
        Ok((u, stored))
    }

    /// Summed loss and gradient over the columns.
    fn gradient(&mut self, u0: Array2<f64>, target: ArrayView2<f64>, stride: usize) -> Result<(f64, Array2<f64>)> {
        let (final_state, stored) = self.forward(u0, stride)?;
        let (m, b) = final_state.dim();
        let a = self.a;
        let at = a.t();
        let residual = final_state - &target;
        let loss = residual.iter().map(|r| r * r).sum::<f64>();

        let mut grad = Array2::zeros((m, m));
        let mut lam = residual * 2.0;
        let mut ybar = Array2::zeros((m, b));
        let mut acc = Array2::zeros((m, b));
        let mut kbar = Array2::zeros((m, b));
        let n_max = self.n_max();

        for seg in (0..stored.len()).rev() {
            let (start, ref start_state) = stored[seg];
            let end = stored.get(seg + 1).map(|(s, _)| *s).unwrap_or(n_max);

            // stage inputs y_i and stage adjoints k̄_i, 4 column groups per step
            let mut offsets = Vec::with_capacity(end - start + 1);
            offsets.push(0);
            for step in start..end {
                offsets.push(offsets.last().unwrap() + 4 * self.active(step));
            }
            let width = *offsets.last().unwrap();
            let mut y_cols = Array2::zeros((m, width));
            let mut kbar_cols = Array2::zeros((m, width));

            // recompute the segment from its checkpoint
            let mut u = start_state.clone();
            let mut next = Array2::zeros((m, b));
            for (local, step) in (start..end).enumerate() {
                let rec = y_cols.slice_mut(s![.., offsets[local]..offsets[local + 1]]);
                self.step(&u, step, &mut next, Some(rec));
                std::mem::swap(&mut u, &mut next);
            }

            for (local, step) in (start..end).enumerate().rev() {
                let act = self.active(step);
                let hs = &self.h[..act];
                let base = offsets[local];
                let mut lam_a = lam.slice_mut(s![.., ..act]);
                let mut ybar_a = ybar.slice_mut(s![.., ..act]);
                let mut acc_a = acc.slice_mut(s![.., ..act]);
                let mut kbar_a = kbar.slice_mut(s![.., ..act]);

                // k̄4 = λh/6, k̄3 = λh/3 + h Aᵀk̄4, k̄2 = λh/3 + (h/2) Aᵀk̄3, k̄1 = λh/6 + (h/2) Aᵀk̄2
                acc_a.fill(0.0);
                for (stage, c_lam, c_prev) in [(3, 1.0 / 6.0, 0.0), (2, 1.0 / 3.0, 1.0), (1, 1.0 / 3.0, 0.5), (0, 1.0 / 6.0, 0.5)] {
                    Zip::from(kbar_a.rows_mut())
                        .and(lam_a.rows())
                        .and(ybar_a.rows())
                        .for_each(|mut kb, l, yb| {
                            for j in 0..act {
                                kb[j] = hs[j] * (c_lam * l[j] + c_prev * yb[j]);
                            }
                        });
                    general_mat_mul(1.0, &at, &kbar_a, 0.0, &mut ybar_a);
                    acc_a += &ybar_a;
                    kbar_cols
                        .slice_mut(s![.., base + stage * act..base + (stage + 1) * act])
                        .assign(&kbar_a);
                }
                lam_a += &acc_a;
                if lam_a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        time: self.blow_up_time(step),
                    });
                }
            }
            general_mat_mul(1.0, &kbar_cols, &y_cols.t(), 1.0, &mut grad);
        }
        Ok((loss, grad))
    }
}

fn column(v: ArrayView1<f64>) -> Array2<f64> {
    v.to_owned().insert_axis(Axis(1))
}

pub fn forward(
    a: ArrayView2<f64>,
    u0: ArrayView1<f64>,
    t: f64,
    n_steps: usize,
) -> Result<(Array1<f64>, TapeCheckpoint)> {
    forward_with_stride(a, u0, t, n_steps, default_stride(n_steps))
}

/// Classical RK4 with step `t / n_steps`.
pub fn forward_with_stride(
    a: ArrayView2<f64>,
    u0: ArrayView1<f64>,
    t: f64,
    n_steps: usize,
    stride: usize,
) -> Result<(Array1<f64>, TapeCheckpoint)> {
    check_inputs(a, u0, t, n_steps)?;
    let stride = stride.max(1);
    let mut block = Block::new(a, vec![t / n_steps as f64], vec![n_steps]);
    let (u, stored) = block.forward(column(u0), stride)?;
    let flatten = |m: Array2<f64>| m.index_axis_move(Axis(1), 0);
    Ok((
        flatten(u),
        TapeCheckpoint {
            stride,
            stored_states: stored.into_iter().map(|(s, m)| (s, flatten(m))).collect(),
        },
    ))
}

/// Loss `‖S(Ā, u0, t) - target‖²` and its gradient with respect to `Ā`.
pub fn gradient(
    a: ArrayView2<f64>,
    u0: ArrayView1<f64>,
    t: f64,
    n_steps: usize,
    target: ArrayView1<f64>,
) -> Result<(f64, Array2<f64>)> {
    gradient_with_stride(a, u0, t, n_steps, target, default_stride(n_steps))
}

pub fn gradient_with_stride(
    a: ArrayView2<f64>,
    u0: ArrayView1<f64>,
    t: f64,
    n_steps: usize,
    target: ArrayView1<f64>,
    stride: usize,
) -> Result<(f64, Array2<f64>)> {
    check_inputs(a, u0, t, n_steps)?;
    if target.len() != u0.len() {
        return Err(Error::dim("embedded target", u0.len(), target.len()));
    }
    let mut block = Block::new(a, vec![t / n_steps as f64], vec![n_steps]);
    block.gradient(column(u0), column(target).view(), stride.max(1))
}

/// One term of a batched embedded loss.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub u0: ArrayView1<'a, f64>,
    pub target: ArrayView1<'a, f64>,
    pub t: f64,
    pub n_steps: usize,
}

/// Sum of per-sample losses and gradients. Samples are sorted by step
/// count and integrated in fixed-size column blocks, blocks run in parallel and are reduced
/// pairwise in a fixed order, so the result does not depend on the thread
/// count.
pub fn batch_gradient(a: ArrayView2<f64>, samples: &[Sample<'_>]) -> Result<(f64, Array2<f64>)> {
    for s in samples {
        check_inputs(a, s.u0, s.t, s.n_steps)?;
        if s.target.len() != s.u0.len() {
            return Err(Error::dim("embedded target", s.u0.len(), s.target.len()));
        }
    }
    // longest horizons first, so finished columns drop off the end of each block
    let mut order: Vec<&Sample> = samples.iter().collect();
    order.sort_by(|x, y| y.n_steps.cmp(&x.n_steps));
    let chunks: Vec<&[&Sample]> = order.chunks(BLOCK).collect();
    let parts: Vec<(f64, Array2<f64>)> = par::map_slice(&chunks, |chunk| {
        let m = a.nrows();
        let mut u0 = Array2::zeros((m, chunk.len()));
        let mut target = Array2::zeros((m, chunk.len()));
        for (j, s) in chunk.iter().enumerate() {
            u0.column_mut(j).assign(&s.u0);
            target.column_mut(j).assign(&s.target);
        }
        let h = chunk.iter().map(|s| s.t / s.n_steps as f64).collect();
        let n: Vec<usize> = chunk.iter().map(|s| s.n_steps).collect();
        let mut block = Block::new(a, h, n);
        let stride = default_stride(block.n_max());
        block.gradient(u0, target.view(), stride)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(tree_sum(parts).unwrap_or_else(|| (0.0, Array2::zeros(a.raw_dim()))))
}

fn tree_sum(mut parts: Vec<(f64, Array2<f64>)>) -> Option<(f64, Array2<f64>)> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut iter = parts.into_iter();
        while let Some((la, mut ga)) = iter.next() {
            match iter.next() {
                Some((lb, gb)) => {
                    ga += &gb;
                    next.push((la + lb, ga));
                }
                None => next.push((la, ga)),
            }
        }
        parts = next;
    }
    parts.pop()
}
