//! Slice-level numeric kernels.
//!
//! Every kernel accumulates each output element in a fixed order that does not
//! depend on how many rows are processed together, so computing one row alone
//! gives the same bits as computing it inside a larger batch.

use super::Real;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|x| *x = F::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot(arow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row<F: Real>(x: &[F], out: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `log softmax` of one row.
pub fn log_softmax_row<F: Real>(x: &[F], out: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &v in x {
        sum = sum + (v - max).exp();
    }
    let lse = sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - max - lse;
    }
}

/// Normalizes one row; returns `(mean, 1/sqrt(var + eps))`.
pub fn layer_norm_row<F: Real>(x: &[F], gain: &[F], bias: &[F], eps: F, out: &mut [F]) -> (F, F) {
    let n = F::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let rstd = F::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

const GELU_COEF: f64 = 0.044_715;

fn sqrt_2_over_pi<F: Real>() -> F {
    F::lit((2.0 / std::f64::consts::PI).sqrt())
}

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let inner = sqrt_2_over_pi::<F>() * (x + F::lit(GELU_COEF) * x * x * x);
    F::lit(0.5) * x * (F::one() + inner.tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = sqrt_2_over_pi::<F>();
    let a = F::lit(GELU_COEF);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::lit(3.0) * a * x * x);
    F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * dinner
}
