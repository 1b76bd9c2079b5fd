//! Row-level kernels shared by the forward and backward passes.
//! Weight matrices are `[in, out]`, row-major.

use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `out = bias + a·W`
#[inline]
pub(crate) fn linear_row<T: Scalar>(a: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    out.copy_from_slice(bias);
    linear_row_acc(a, w, out);
}

/// `out += a·W`
#[inline]
pub(crate) fn linear_row_acc<T: Scalar>(a: &[T], w: &[T], out: &mut [T]) {
    let n = out.len();
    debug_assert_eq!(w.len(), a.len() * n);
    for (&ai, row) in a.iter().zip(w.chunks_exact(n)) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o = *o + ai * wv;
        }
    }
}

/// `out = W·dy`, i.e. `out[i] = Σ_j W[i, j] dy[j]`.
#[inline]
pub(crate) fn matvec<T: Scalar>(w: &[T], dy: &[T], out: &mut [T]) {
    let n = dy.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o = dot(row, dy);
    }
}

/// `out += W·dy`
#[inline]
pub(crate) fn matvec_acc<T: Scalar>(w: &[T], dy: &[T], out: &mut [T]) {
    let n = dy.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o = *o + dot(row, dy);
    }
}

/// `g[i, j] += a[i] · dy[j]`
#[inline]
pub(crate) fn outer_acc<T: Scalar>(g: &mut [T], a: &[T], dy: &[T]) {
    let n = dy.len();
    for (&ai, row) in a.iter().zip(g.chunks_exact_mut(n)) {
        for (gv, &d) in row.iter_mut().zip(dy) {
            *gv = *gv + ai * d;
        }
    }
}

#[inline]
pub(crate) fn add_assign<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + v;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

/// Normalizes each `d`-wide row of `x` into `xhat`, storing `1/σ` per row.
pub(crate) fn layer_norm_rows<T: Scalar>(x: &[T], xhat: &mut [T], rstd: &mut [T], d: usize) {
    let inv_d = T::one() / T::from_usize(d);
    let eps = T::from_f64(LN_EPS);
    for ((row, out), r) in x.chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(rstd.iter_mut()) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let inv = T::one() / (var + eps).sqrt();
        *r = inv;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
}

/// `out = xhat ⊙ gain + bias` for one row.
#[inline]
pub(crate) fn affine<T: Scalar>(xhat: &[T], gain: &[T], bias: &[T], out: &mut [T]) {
    for (((o, &x), &g), &b) in out.iter_mut().zip(xhat).zip(gain).zip(bias) {
        *o = x * g + b;
    }
}

/// Backward of `a = LN(x) ⊙ gain + bias` for one row. Accumulates the
/// gain/bias gradients and adds `dL/dx` into `dx`.
pub(crate) fn layer_norm_backward_row<T: Scalar>(
    da: &[T],
    xhat: &[T],
    rstd: T,
    gain: &[T],
    g_gain: &mut [T],
    g_bias: &mut [T],
    dx: &mut [T],
) {
    let d = da.len();
    let inv_d = T::one() / T::from_usize(d);
    let mut mean_dxhat = T::zero();
    let mut mean_dxhat_xhat = T::zero();
    for j in 0..d {
        g_gain[j] = g_gain[j] + da[j] * xhat[j];
        g_bias[j] = g_bias[j] + da[j];
        let dxh = da[j] * gain[j];
        mean_dxhat = mean_dxhat + dxh;
        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[j];
    }
    mean_dxhat = mean_dxhat * inv_d;
    mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
    for j in 0..d {
        let dxh = da[j] * gain[j];
        dx[j] = dx[j] + rstd * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
}

/// tanh-approximated GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// In-place numerically stable softmax.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

pub(crate) fn all_finite<T: Scalar>(xs: &[T]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, -0.2, 0.0, 0.3, 1.5, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn softmax_sums_to_one_under_large_inputs() {
        let mut row = vec![1000.0f64, 1001.0, 999.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[1] > row[0] && row[0] > row[2]);
    }

    #[test]
    fn layer_norm_row_is_standardized() {
        let x = [1.0f64, 2.0, 3.0, 6.0];
        let mut xhat = [0.0; 4];
        let mut rstd = [0.0; 1];
        layer_norm_rows(&x, &mut xhat, &mut rstd, 4);
        let mean: f64 = xhat.iter().sum::<f64>() / 4.0;
        let var: f64 = xhat.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn linear_and_matvec_agree_with_naive_loops() {
        let a = [1.0f64, -2.0, 0.5];
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [3, 2]
        let b = [0.1, -0.1];
        let mut out = [0.0; 2];
        linear_row(&a, &w, &b, &mut out);
        assert_eq!(out, [0.1 + 1.0 - 6.0 + 2.5, -0.1 + 2.0 - 8.0 + 3.0]);
        let dy = [1.0, -1.0];
        let mut back = [0.0; 3];
        matvec(&w, &dy, &mut back);
        assert_eq!(back, [-1.0, -1.0, -1.0]);
    }
}
