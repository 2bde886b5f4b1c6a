//! Dense row-major kernels used by the transformer.
//!
//! Every output element of [`matmul_wt`] is one [`dot`] with a fixed
//! accumulation order, so a row computes to the same bits whether it is
//! evaluated alone or inside a larger batch. Incremental decoding relies on
//! this to reproduce full-sequence logits exactly.

use std::ops::{Index, IndexMut};

/// Rows of `W` processed together so the block stays cache resident.
const ROW_BLOCK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m×n] = x[m×k] · w[n×k]ᵀ (+ bias)`.
pub fn matmul_wt(x: &[f64], w: &[f64], bias: Option<&[f64]>, m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for o0 in (0..n).step_by(ROW_BLOCK) {
        let o1 = (o0 + ROW_BLOCK).min(n);
        for i in 0..m {
            let xi = &x[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for o in o0..o1 {
                let v = dot(xi, &w[o * k..(o + 1) * k]);
                orow[o] = match bias {
                    Some(b) => v + b[o],
                    None => v,
                };
            }
        }
    }
}

/// `dx[m×k] += dy[m×n] · w[n×k]`.
pub fn matmul_acc(dy: &[f64], w: &[f64], m: usize, n: usize, k: usize, dx: &mut [f64]) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(dx.len(), m * k);
    for o0 in (0..n).step_by(ROW_BLOCK) {
        let o1 = (o0 + ROW_BLOCK).min(n);
        for i in 0..m {
            let dxi = &mut dx[i * k..(i + 1) * k];
            for o in o0..o1 {
                let g = dy[i * n + o];
                if g != 0.0 {
                    axpy(g, &w[o * k..(o + 1) * k], dxi);
                }
            }
        }
    }
}

/// `dw[n×k] += dy[m×n]ᵀ · x[m×k]`, and `db[n] += Σ_i dy[i]` when given.
pub fn matmul_tn_acc(dy: &[f64], x: &[f64], m: usize, n: usize, k: usize, dw: &mut [f64], db: Option<&mut [f64]>) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(dw.len(), n * k);
    for o0 in (0..n).step_by(ROW_BLOCK) {
        let o1 = (o0 + ROW_BLOCK).min(n);
        for i in 0..m {
            let xi = &x[i * k..(i + 1) * k];
            for o in o0..o1 {
                let g = dy[i * n + o];
                if g != 0.0 {
                    axpy(g, xi, &mut dw[o * k..(o + 1) * k]);
                }
            }
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            for (b, g) in db.iter_mut().zip(&dy[i * n..(i + 1) * n]) {
                *b += g;
            }
        }
    }
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `log softmax(xs / temperature)`.
pub fn log_softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|x| x - lse).collect()
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for o in 0..n {
                out[i * n + o] = (0..k).map(|j| x[i * k + j] * w[o * k + j]).sum();
            }
        }
        out
    }

    fn seq(len: usize, s: f64) -> Vec<f64> {
        (0..len).map(|i| (i as f64 * 0.37 + s).sin()).collect()
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (5, 19, 23);
        let x = seq(m * k, 0.1);
        let w = seq(n * k, 0.7);
        let mut out = vec![0.0; m * n];
        matmul_wt(&x, &w, None, m, k, n, &mut out);
        for (a, b) in out.iter().zip(naive(&x, &w, m, k, n)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_is_bit_identical_to_batch() {
        let (m, k, n) = (7, 40, 33);
        let x = seq(m * k, 0.3);
        let w = seq(n * k, 1.1);
        let b = seq(n, 2.0);
        let mut full = vec![0.0; m * n];
        matmul_wt(&x, &w, Some(&b), m, k, n, &mut full);
        for i in 0..m {
            let mut row = vec![0.0; n];
            matmul_wt(&x[i * k..(i + 1) * k], &w, Some(&b), 1, k, n, &mut row);
            assert_eq!(row, full[i * n..(i + 1) * n]);
        }
    }

    #[test]
    fn backward_kernels_match_naive_transposes() {
        let (m, n, k) = (4, 9, 6);
        let dy = seq(m * n, 0.5);
        let w = seq(n * k, 0.2);
        let x = seq(m * k, 0.9);
        let mut dx = vec![0.0; m * k];
        matmul_acc(&dy, &w, m, n, k, &mut dx);
        for i in 0..m {
            for j in 0..k {
                let want: f64 = (0..n).map(|o| dy[i * n + o] * w[o * k + j]).sum();
                assert!((dx[i * k + j] - want).abs() < 1e-12);
            }
        }
        let mut dw = vec![0.0; n * k];
        let mut db = vec![0.0; n];
        matmul_tn_acc(&dy, &x, m, n, k, &mut dw, Some(&mut db));
        for o in 0..n {
            for j in 0..k {
                let want: f64 = (0..m).map(|i| dy[i * n + o] * x[i * k + j]).sum();
                assert!((dw[o * k + j] - want).abs() < 1e-12);
            }
            let want: f64 = (0..m).map(|i| dy[i * n + o]).sum();
            assert!((db[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_variants_agree() {
        let mut xs = vec![1.0, -2.0, 0.5, 3.0];
        let ls = log_softmax(&xs, 1.0);
        softmax_in_place(&mut xs);
        assert!((xs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for (p, l) in xs.iter().zip(&ls) {
            assert!((p.ln() - l).abs() < 1e-12);
        }
    }
}
