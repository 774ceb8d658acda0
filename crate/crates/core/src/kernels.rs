//! Row-major kernels shared by the inference engine (f32) and the trainer
//! (f32 for optimisation, f64 for gradient checking). Every reduction runs in
//! ascending index order so results are bit-reproducible.

use num_traits::Float;

#[inline]
pub(crate) fn c<T: Float>(v: f64) -> T {
    T::from(v).expect("constant representable")
}

/// `out[n×m] += x[n×k] · w[k×m]`
pub(crate) fn matmul_acc<T: Float>(x: &[T], n: usize, k: usize, w: &[T], m: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let dst = &mut out[i * m..(i + 1) * m];
        let xi = &x[i * k..(i + 1) * k];
        for (p, &s) in xi.iter().enumerate() {
            let src = &w[p * m..(p + 1) * m];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = *d + s * v;
            }
        }
    }
}

/// `x[n×k] · w[k×m]`
pub(crate) fn matmul<T: Float>(x: &[T], n: usize, k: usize, w: &[T], m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    matmul_acc(x, n, k, w, m, &mut out);
    out
}

/// `dx[n×k] += dy[n×m] · wᵀ` where `w` is `k×m`.
pub(crate) fn matmul_bt_acc<T: Float>(dy: &[T], n: usize, m: usize, w: &[T], k: usize, dx: &mut [T]) {
    for i in 0..n {
        let dyi = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            dx[i * k + p] = dx[i * k + p] + dot(dyi, &w[p * m..(p + 1) * m]);
        }
    }
}

/// `dw[k×m] += xᵀ · dy` where `x` is `n×k`, `dy` is `n×m`.
pub(crate) fn matmul_at_acc<T: Float>(x: &[T], n: usize, k: usize, dy: &[T], m: usize, dw: &mut [T]) {
    for i in 0..n {
        let dyi = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let s = x[i * k + p];
            if s == T::zero() {
                continue;
            }
            let dst = &mut dw[p * m..(p + 1) * m];
            for (d, &v) in dst.iter_mut().zip(dyi) {
                *d = *d + s * v;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub(crate) fn add_bias<T: Float>(x: &mut [T], bias: &[T]) {
    let m = bias.len();
    for row in x.chunks_mut(m) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

pub(crate) fn gelu<T: Float>(x: T) -> T {
    let k = c::<T>(0.797_884_560_802_865_4);
    let half = c::<T>(0.5);
    half * x * (T::one() + (k * (x + c::<T>(0.044715) * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let k = c::<T>(0.797_884_560_802_865_4);
    let a = c::<T>(0.044715);
    let half = c::<T>(0.5);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x)
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Per-row statistics kept for the backward pass: `(mean, rstd)`; `mean` is
/// zero for RMS normalisation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RowStats<T> {
    pub mean: T,
    pub rstd: T,
}

pub(crate) fn layer_norm_row<T: Float>(x: &[T], gamma: &[T], beta: &[T], out: &mut [T]) -> RowStats<T> {
    let n = c::<T>(x.len() as f64);
    let mut sum = T::zero();
    for &v in x {
        sum = sum + v;
    }
    let mean = sum / n;
    let mut var = T::zero();
    for &v in x {
        var = var + (v - mean) * (v - mean);
    }
    var = var / n;
    let rstd = T::one() / (var + c::<T>(NORM_EPS)).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    RowStats { mean, rstd }
}

pub(crate) fn rms_norm_row<T: Float>(x: &[T], gamma: &[T], out: &mut [T]) -> RowStats<T> {
    let n = c::<T>(x.len() as f64);
    let mut ms = T::zero();
    for &v in x {
        ms = ms + v * v;
    }
    let rstd = T::one() / (ms / n + c::<T>(NORM_EPS)).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] * rstd * gamma[i];
    }
    RowStats {
        mean: T::zero(),
        rstd,
    }
}

/// In-place max-subtracted softmax; entries equal to `-inf` become exactly 0.
pub(crate) fn softmax_in_place<T: Float>(v: &mut [T]) {
    let mut max = T::neg_infinity();
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}
