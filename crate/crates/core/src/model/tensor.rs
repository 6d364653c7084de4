//! Row-major matrices and the handful of kernels the encoder needs.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(F::zero());
    }

    pub fn cast<G: Scalar>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| G::of(x.as_f64())).collect(),
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out (m x n) (+)= a (m x k) * b (k x n)` over row-major slices. Rows go
/// in blocks of four so each row of `b` is loaded once per block. Each
/// output element sums its `k` products in order.
pub fn gemm<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !accumulate {
        out.fill(F::zero());
    }
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            for j in 0..n {
                let y = bp[j];
                o0[j] += a0 * y;
                o1[j] += a1 * y;
                o2[j] += a2 * y;
                o3[j] += a3 * y;
            }
        }
        i += 4;
    }
    for i in i..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], o);
        }
    }
}

/// Row-major transpose of an `m x n` slice.
pub fn transpose<F: Scalar>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut t = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// `out (m x n) = a (m x k) * b (k x n) + bias`
pub fn linear<F: Scalar>(a: &[F], b: &Matrix<F>, bias: &[F], m: usize, out: &mut [F]) {
    let n = b.cols;
    for i in 0..m {
        out[i * n..(i + 1) * n].copy_from_slice(bias);
    }
    gemm(a, &b.data, m, b.rows, n, out, true);
}

/// `grad_w (k x n) += a^T (k x m) * d (m x n)`
pub fn accumulate_weight_grad<F: Scalar>(a: &[F], d: &[F], m: usize, grad_w: &mut Matrix<F>) {
    let (k, n) = (grad_w.rows, grad_w.cols);
    let at = transpose(a, m, k);
    gemm(&at, d, k, m, n, &mut grad_w.data, true);
}

/// `grad_b (n) += column sums of d (m x n)`
pub fn accumulate_bias_grad<F: Scalar>(d: &[F], m: usize, grad_b: &mut [F]) {
    let n = grad_b.len();
    for i in 0..m {
        for (g, &x) in grad_b.iter_mut().zip(&d[i * n..(i + 1) * n]) {
            *g += x;
        }
    }
}

/// `out (m x k) (+)= d (m x n) * w^T` where `w` is `k x n`.
pub fn input_grad<F: Scalar>(d: &[F], w: &Matrix<F>, m: usize, out: &mut [F], accumulate: bool) {
    let (k, n) = (w.rows, w.cols);
    let wt = transpose(&w.data, k, n);
    gemm(d, &wt, m, n, k, out, accumulate);
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer norm. Returns the normalized inputs and reciprocal std
/// for the backward pass.
pub fn layer_norm_forward<F: Scalar>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    m: usize,
    out: &mut [F],
    xhat: &mut [F],
    rstd: &mut [F],
) {
    let d = gamma.len();
    let inv_d = F::one() / F::of(d as f64);
    let eps = F::of(LAYER_NORM_EPS);
    for i in 0..m {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = gamma[j] * h + beta[j];
        }
    }
}

/// Accumulates gamma/beta grads and adds the input grad into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gamma: &[F],
    m: usize,
    dgamma: &mut [F],
    dbeta: &mut [F],
    dx: &mut [F],
) {
    let d = gamma.len();
    let inv_d = F::one() / F::of(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for i in 0..m {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        let mut sum = F::zero();
        let mut sum_x = F::zero();
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xh[j];
        }
        let r = rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (dxhat[j] - inv_d * sum - xh[j] * inv_d * sum_x);
        }
    }
}

const GELU_C: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_S: f64 = 0.797_884_560_802_865_4;

/// tanh approximation of GELU
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_S) * (x + F::of(GELU_C) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let s = F::of(GELU_S);
    let c = F::of(GELU_C);
    let t = (s * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * s * (F::one() + F::of(3.0) * c * x * x)
}

/// In-place softmax; returns log-sum-exp of the input.
pub fn softmax_in_place<F: Scalar>(v: &mut [F]) -> F {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    max + sum.ln()
}

pub fn log_sum_exp<F: Scalar>(v: &[F]) -> F {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<F>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_and_grads_match_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = Matrix {
            rows: 3,
            cols: 2,
            data: vec![1.0, -1.0, 0.5, 2.0, -2.0, 1.0],
        };
        let mut out = [0.0; 4];
        linear(&a, &w, &[0.1, 0.2], 2, &mut out);
        assert_eq!(out, [1.0 + 1.0 - 6.0 + 0.1, -1.0 + 4.0 + 3.0 + 0.2, 4.0 + 2.5 - 12.0 + 0.1, -4.0 + 10.0 + 6.0 + 0.2]);

        let d = [1.0, 0.0, 0.0, 1.0];
        let mut gw = Matrix::zeros(3, 2);
        accumulate_weight_grad(&a, &d, 2, &mut gw);
        assert_eq!(gw.data, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let mut gx = [0.0; 6];
        input_grad(&d, &w, 2, &mut gx, false);
        assert_eq!(gx, [1.0, 0.5, -2.0, -1.0, 2.0, 1.0]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let mut p = v.clone();
            let lse = softmax_in_place(&mut p);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((lse - log_sum_exp(&v)).abs() < 1e-9);
        }

        #[test]
        fn gemm_matches_triple_loop(m in 1usize..11, k in 1usize..7, n in 1usize..19, acc in any::<bool>(), seed in 0u64..1000) {
            let val = |i: usize| ((i as u64 * 2654435761 + seed) % 17) as f64 - 8.0;
            let a: Vec<f64> = (0..m * k).map(val).collect();
            let b: Vec<f64> = (0..k * n).map(|i| val(i + 7)).collect();
            let start: Vec<f64> = (0..m * n).map(|i| val(i + 3)).collect();
            let mut out = start.clone();
            gemm(&a, &b, m, k, n, &mut out, acc);
            for i in 0..m {
                for j in 0..n {
                    let s: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                    let want = if acc { start[i * n + j] + s } else { s };
                    prop_assert_eq!(out[i * n + j], want);
                }
            }
        }

        #[test]
        fn dot_matches_naive(v in prop::collection::vec(-10.0f64..10.0, 0..37)) {
            let w: Vec<f64> = v.iter().map(|x| x * 0.5 - 1.0).collect();
            let naive: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            prop_assert!((dot(&v, &w) - naive).abs() < 1e-9);
        }
    }
}
