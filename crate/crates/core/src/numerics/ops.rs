//! Forward/backward kernels shared by the fusion network and the decoder.
//! All backward passes are derived by hand.

use super::{gemm, softmax_backward_rows, softmax_in_place, Matrix};

const LN_EPS: f64 = 1e-5;

/// Saved activations of a layer norm without affine parameters.
pub(crate) struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix) -> (Matrix, LayerNormCache) {
    let d = x.cols() as f64;
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat.clone(), LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(cache: &LayerNormCache, dy: &Matrix) -> Matrix {
    let d = dy.cols() as f64;
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.iter().sum::<f64>() / d;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let is = cache.inv_std[r];
        for ((o, gi), xi) in dx.row_mut(r).iter_mut().zip(g).zip(xh) {
            *o = is * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Adds a `1 x cols` bias to every row.
pub(crate) fn add_row_bias(x: &mut Matrix, bias: &Matrix) {
    for r in 0..x.rows() {
        for (a, b) in x.row_mut(r).iter_mut().zip(bias.data()) {
            *a += b;
        }
    }
}

/// Column sums as a `1 x cols` matrix (bias gradient).
pub(crate) fn column_sums(x: &Matrix) -> Matrix {
    let mut out = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    Matrix::from_vec(1, x.cols(), out)
}

/// Saved state of a multi-head scaled dot-product attention whose
/// projections were computed by the caller.
pub(crate) struct AttentionCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention weights, one `Tq x Tk` matrix per head.
    pub probs: Vec<Matrix>,
}

/// Multi-head attention over already projected `q` (Tq x H*dh), `k` and
/// `v` (Tk x H*dh). Heads occupy contiguous column blocks. With `causal`,
/// query `i` only sees keys `0..=i`.
pub(crate) fn attention(
    q: Matrix,
    k: Matrix,
    v: Matrix,
    heads: usize,
    causal: bool,
) -> (Matrix, AttentionCache) {
    let width = q.cols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let tq = q.rows();
    let tk = k.rows();
    let mut out = Matrix::zeros(tq, width);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.column_block(h * dh, dh);
        let kh = k.column_block(h * dh, dh);
        let vh = v.column_block(h * dh, dh);
        let mut s = gemm(&qh, false, &kh, true);
        for i in 0..tq {
            let row = s.row_mut(i);
            if causal {
                let visible = (i + 1).min(tk);
                for x in &mut row[..visible] {
                    *x *= scale;
                }
                softmax_in_place(&mut row[..visible]);
                for x in &mut row[visible..] {
                    *x = 0.0;
                }
            } else {
                for x in row.iter_mut() {
                    *x *= scale;
                }
                softmax_in_place(row);
            }
        }
        let oh = gemm(&s, false, &vh, false);
        out.add_to_column_block(h * dh, &oh);
        probs.push(s);
    }
    (out, AttentionCache { q, k, v, probs })
}

/// Gradients of the attention output w.r.t. the projected `q`, `k`, `v`.
pub(crate) fn attention_backward(
    cache: &AttentionCache,
    dout: &Matrix,
    heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let width = cache.q.cols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(cache.q.rows(), width);
    let mut dk = Matrix::zeros(cache.k.rows(), width);
    let mut dv = Matrix::zeros(cache.v.rows(), width);
    for h in 0..heads {
        let p = &cache.probs[h];
        let qh = cache.q.column_block(h * dh, dh);
        let kh = cache.k.column_block(h * dh, dh);
        let vh = cache.v.column_block(h * dh, dh);
        let doh = dout.column_block(h * dh, dh);
        let dvh = gemm(p, true, &doh, false);
        let dp = gemm(&doh, false, &vh, true);
        // masked entries have p = 0, so their score gradient vanishes too
        let mut ds = softmax_backward_rows(p, &dp);
        ds.scale_assign(scale);
        let dqh = gemm(&ds, false, &kh, false);
        let dkh = gemm(&ds, true, &qh, false);
        dq.add_to_column_block(h * dh, &dqh);
        dk.add_to_column_block(h * dh, &dkh);
        dv.add_to_column_block(h * dh, &dvh);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;

    fn fd_check(f: impl Fn(&Matrix) -> f64, x: &Matrix, analytic: &Matrix) {
        let eps = 1e-6;
        for i in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let num = (f(&p) - f(&m)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!((num - a).abs() / 1f64.max(a.abs()) < 1e-6, "coord {i}: {a} vs {num}");
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut r = rng::seeded(11);
        let x = rng::gaussian_matrix(&mut r, 3, 6, 2.0);
        let w = rng::gaussian_matrix(&mut r, 3, 6, 1.0);
        let f = |x: &Matrix| {
            let (y, _) = layer_norm(x);
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = layer_norm(&x);
        fd_check(f, &x, &layer_norm_backward(&cache, &w));
    }

    #[test]
    fn gelu_derivative() {
        for &u in &[-3.0, -0.7, 0.0, 0.2, 1.9] {
            let num = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_gradients() {
        let mut r = rng::seeded(5);
        let q = rng::gaussian_matrix(&mut r, 4, 6, 1.0);
        let k = rng::gaussian_matrix(&mut r, 4, 6, 1.0);
        let v = rng::gaussian_matrix(&mut r, 4, 6, 1.0);
        let w = rng::gaussian_matrix(&mut r, 4, 6, 1.0);
        for causal in [false, true] {
            let (_, cache) = attention(q.clone(), k.clone(), v.clone(), 2, causal);
            let (dq, dk, dv) = attention_backward(&cache, &w, 2);
            let obj = |o: &Matrix| o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
            fd_check(|x| obj(&attention(x.clone(), k.clone(), v.clone(), 2, causal).0), &q, &dq);
            fd_check(|x| obj(&attention(q.clone(), x.clone(), v.clone(), 2, causal).0), &k, &dk);
            fd_check(|x| obj(&attention(q.clone(), k.clone(), x.clone(), 2, causal).0), &v, &dv);
        }
    }

    #[test]
    fn causal_rows_sum_to_one() {
        let mut r = rng::seeded(9);
        let x = rng::gaussian_matrix(&mut r, 5, 4, 1.0);
        let (_, cache) = attention(x.clone(), x.clone(), x, 2, true);
        for p in &cache.probs {
            for i in 0..5 {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(p.row(i)[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }
}
