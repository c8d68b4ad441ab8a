//! Raw numeric routines shared by forward and backward passes.
//!
//! Loop orders keep the innermost index contiguous so the compiler can
//! vectorize; accumulation order is fixed, which keeps results bitwise
//! deterministic for a given scalar type.

use super::Scalar;

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + av * b_row[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ  (rows of B dotted against rows of A)
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for p in 0..k {
                s = s + a_row[p] * b_row[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub fn matmul_at<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + av * b_row[j];
            }
        }
    }
    c
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax with max subtraction. `prefix` limits each row i to its
/// first `prefix(i)` entries; the rest of the row is exactly zero.
pub fn softmax_rows<T: Scalar>(
    x: &[T],
    rows: usize,
    cols: usize,
    prefix: impl Fn(usize) -> usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let width = prefix(i).min(cols);
        debug_assert!(width >= 1, "softmax row must keep at least one entry");
        let row = &x[i * cols..i * cols + width];
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut denom = T::zero();
        let orow = &mut out[i * cols..i * cols + width];
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - m).exp();
            *o = e;
            denom = denom + e;
        }
        for o in orow.iter_mut() {
            *o = *o / denom;
        }
    }
    out
}

/// tanh-approximation GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

/// Derivative of the tanh-approximation GELU.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// Per-row mean and reciprocal standard deviation for layer norm.
pub fn layernorm_stats<T: Scalar>(x: &[T], rows: usize, cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let inv_c = T::from_f64(1.0 / cols as f64);
    let mut mean = vec![T::zero(); rows];
    let mut rstd = vec![T::zero(); rows];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mut s = T::zero();
        for &v in row {
            s = s + v;
        }
        let mu = s * inv_c;
        let mut var = T::zero();
        for &v in row {
            let d = v - mu;
            var = var + d * d;
        }
        var = var * inv_c;
        mean[i] = mu;
        rstd[i] = T::one() / (var + eps).sqrt();
    }
    (mean, rstd)
}
