//! Dense row-major kernels the model is built from. Shapes follow one
//! convention throughout: weight matrices are stored `[out][in]` so the
//! forward pass is a row of dot products and both backward passes walk
//! contiguous memory.

use crate::real::{real, Real};

pub const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Mat<T>) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().into_f64())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// y += a * x
#[inline]
pub fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * *xi;
    }
}

/// Y = X · Wᵀ with X `[n×in]`, W `[out×in]`, Y `[n×out]`.
pub fn matmul_nt<T: Real>(x: &Mat<T>, w: &Mat<T>) -> Mat<T> {
    assert_eq!(x.cols, w.cols, "inner dims");
    let mut y = Mat::zeros(x.rows, w.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for o in 0..w.rows {
            yr[o] = dot(xr, w.row(o));
        }
    }
    y
}

/// dX += dY · W, the input adjoint of [`matmul_nt`].
pub fn matmul_acc_dx<T: Real>(dy: &Mat<T>, w: &Mat<T>, dx: &mut Mat<T>) {
    assert_eq!(dy.cols, w.rows);
    assert_eq!((dx.rows, dx.cols), (dy.rows, w.cols));
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let dxr = dx.row_mut(r);
        for o in 0..w.rows {
            axpy(dyr[o], w.row(o), dxr);
        }
    }
}

/// dW += dYᵀ · X, the weight adjoint of [`matmul_nt`].
pub fn matmul_acc_dw<T: Real>(dy: &Mat<T>, x: &Mat<T>, dw: &mut Mat<T>) {
    assert_eq!(dy.rows, x.rows);
    assert_eq!((dw.rows, dw.cols), (dy.cols, x.cols));
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xr = x.row(r);
        for o in 0..dy.cols {
            axpy(dyr[o], xr, dw.row_mut(o));
        }
    }
}

/// out = gain ⊙ x / rms(x). Returns 1/rms for the backward pass.
pub fn rmsnorm<T: Real>(x: &[T], gain: &[T], out: &mut [T]) -> T {
    let n = x.len();
    let ms = dot(x, x).into_f64() / n as f64 + RMS_EPS;
    let inv = real::<T>(1.0 / ms.sqrt());
    for i in 0..n {
        out[i] = gain[i] * x[i] * inv;
    }
    inv
}

/// Adjoint of [`rmsnorm`]: accumulates into `dx` and `dgain`.
pub fn rmsnorm_bwd<T: Real>(
    x: &[T],
    gain: &[T],
    inv: T,
    dout: &[T],
    dx: &mut [T],
    dgain: &mut [T],
) {
    let n = x.len();
    let mut proj = T::zero();
    for i in 0..n {
        proj = proj + dout[i] * gain[i] * x[i];
    }
    let scale = inv * inv * inv * proj / real::<T>(n as f64);
    for i in 0..n {
        dx[i] = dx[i] + inv * gain[i] * dout[i] - scale * x[i];
        dgain[i] = dgain[i] + dout[i] * x[i] * inv;
    }
}

/// In-place stable softmax.
pub fn softmax<T: Real>(v: &mut [T]) {
    let mut mx = T::neg_infinity();
    for x in v.iter() {
        if *x > mx {
            mx = *x;
        }
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in v.iter_mut() {
        *x = *x * inv;
    }
}

pub fn log_sum_exp<T: Real>(v: &[T]) -> T {
    let mut mx = T::neg_infinity();
    for x in v {
        if *x > mx {
            mx = *x;
        }
    }
    let mut sum = T::zero();
    for x in v {
        sum = sum + (*x - mx).exp();
    }
    mx + sum.ln()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu(x) / dx = σ(x)·(1 + x·(1 − σ(x)))
#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Rotary embedding applied in place to a `[n_heads × head_dim]` row.
/// Adjacent pairs within each head rotate by pos·θᵢ, θᵢ = base^(-2i/head_dim).
/// `inverse` rotates back; the map is orthogonal so this is also the adjoint.
pub fn rope_apply<T: Real>(
    row: &mut [T],
    pos: usize,
    n_heads: usize,
    head_dim: usize,
    base: f64,
    inverse: bool,
) {
    debug_assert_eq!(row.len(), n_heads * head_dim);
    debug_assert_eq!(head_dim % 2, 0);
    let sign = if inverse { -1.0 } else { 1.0 };
    for h in 0..n_heads {
        let off = h * head_dim;
        for i in 0..head_dim / 2 {
            let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
            let ang = sign * pos as f64 * theta;
            let (sin, cos) = (real::<T>(ang.sin()), real::<T>(ang.cos()));
            let a = row[off + 2 * i];
            let b = row[off + 2 * i + 1];
            row[off + 2 * i] = a * cos - b * sin;
            row[off + 2 * i + 1] = a * sin + b * cos;
        }
    }
}
