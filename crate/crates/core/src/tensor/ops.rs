//! Forward/backward pairs for the dense operations the head is built from.
//!
//! Every backward takes the forward inputs (or cached intermediates) plus the
//! upstream gradient and returns gradients for each differentiable input.
//! Summation inside a matrix product runs sequentially over the inner
//! dimension in ascending order, which makes results bit-reproducible.

use super::{Mask, Tensor};
use crate::error::{CsdnError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c[m x n] = a[m x k] * b[k x n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // four rows of `c` per pass so each row of `b` is loaded once per block;
    // every entry still accumulates over `p` in ascending order
    let mut rows = c.chunks_exact_mut(4 * n);
    let mut i = 0;
    for block in &mut rows {
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            let lanes = c0.iter_mut().zip(c1.iter_mut()).zip(c2.iter_mut()).zip(c3.iter_mut());
            for ((((x0, x1), x2), x3), &bj) in lanes.zip(brow) {
                *x0 += a0 * bj;
                *x1 += a1 * bj;
                *x2 += a2 * bj;
                *x3 += a3 * bj;
            }
        }
        i += 4;
    }
    for crow in rows.into_remainder().chunks_exact_mut(n.max(1)) {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
        i += 1;
    }
    c
}

/// `c[m x n] = a^T * b` with `a[k x m]`, `b[k x n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_tn_acc(a, b, k, m, n, &mut c);
    c
}

pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

/// `c[m x n] = a * b^T` with `a[m x k]`, `b[n x k]`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(arow, brow);
        }
    }
    c
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(CsdnError::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(CsdnError::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(Tensor::matrix_unchecked(m, n, gemm_nn(a.data(), b.data(), m, k, n)))
}

/// Returns `(dL/da, dL/db)` given `dL/dc`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = require_2d("matmul_backward", a)?;
    let (_, n) = require_2d("matmul_backward", b)?;
    if dc.shape() != [m, n] {
        return Err(CsdnError::Shape {
            op: "matmul_backward",
            left: vec![m, n],
            right: dc.shape().to_vec(),
        });
    }
    let da = gemm_nt(dc.data(), b.data(), m, n, k);
    let db = gemm_tn(a.data(), dc.data(), m, k, n);
    Ok((Tensor::matrix_unchecked(m, k, da), Tensor::matrix_unchecked(k, n, db)))
}

fn check_linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, din) = require_2d("linear", x)?;
    let (din2, dout) = require_2d("linear", weight)?;
    if din != din2 || bias.len() != dout {
        return Err(CsdnError::Shape {
            op: "linear",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    Ok((n, din, dout))
}

/// `x * weight + bias` with the bias broadcast over rows.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = check_linear(x, weight, bias)?;
    let mut y = gemm_nn(x.data(), weight.data(), n, din, dout);
    for row in y.chunks_exact_mut(dout) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(Tensor::matrix_unchecked(n, dout, y))
}

/// Gradients `(dx, dweight, dbias)` of [`linear`].
pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, din) = require_2d("linear_backward", x)?;
    let (_, dout) = require_2d("linear_backward", weight)?;
    if dy.shape() != [n, dout] {
        return Err(CsdnError::Shape {
            op: "linear_backward",
            left: vec![n, dout],
            right: dy.shape().to_vec(),
        });
    }
    let dx = gemm_nt(dy.data(), weight.data(), n, dout, din);
    let dw = gemm_tn(x.data(), dy.data(), n, din, dout);
    let mut db = vec![0.0; dout];
    for row in dy.data().chunks_exact(dout) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((
        Tensor::matrix_unchecked(n, din, dx),
        Tensor::matrix_unchecked(din, dout, dw),
        Tensor::new(vec![dout], db)?,
    ))
}

/// Row-wise softmax of `logits / scale` restricted to allowed entries.
/// Masked entries are exactly zero.
pub fn masked_softmax(logits: &Tensor, mask: &Mask, scale: f64) -> Result<Tensor> {
    let (n, m) = require_2d("masked_softmax", logits)?;
    if mask.rows() != n || mask.cols() != m {
        return Err(CsdnError::Shape {
            op: "masked_softmax",
            left: vec![n, m],
            right: vec![mask.rows(), mask.cols()],
        });
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(CsdnError::InvalidArgument(format!(
            "softmax scale must be positive, got {scale}"
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        softmax_row(
            &logits.data()[i * m..(i + 1) * m],
            mask.row(i),
            scale,
            &mut out[i * m..(i + 1) * m],
        )
        .map_err(|e| e.at_row(i, "masked_softmax"))?;
    }
    Ok(Tensor::matrix_unchecked(n, m, out))
}

/// Why a softmax row could not be normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RowError {
    Empty,
    NonFinite,
}

impl RowError {
    pub(crate) fn at_row(self, row: usize, op: &str) -> CsdnError {
        match self {
            Self::Empty => CsdnError::DegenerateRow { row },
            Self::NonFinite => CsdnError::NonFinite(format!("{op} logits in row {row}")),
        }
    }
}

/// Softmax of one row over the allowed entries.
pub(crate) fn softmax_row(
    logits: &[f64],
    allowed: &[bool],
    scale: f64,
    out: &mut [f64],
) -> std::result::Result<(), RowError> {
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (&l, &a) in logits.iter().zip(allowed) {
        if a {
            if !l.is_finite() {
                return Err(RowError::NonFinite);
            }
            any = true;
            max = max.max(l);
        }
    }
    if !any {
        return Err(RowError::Empty);
    }
    let mut total = 0.0;
    for ((o, &l), &a) in out.iter_mut().zip(logits).zip(allowed) {
        if a {
            let e = ((l - max) / scale).exp();
            *o = e;
            total += e;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Gradient w.r.t. the logits given the softmax output and `dL/doutput`.
pub fn masked_softmax_backward(output: &Tensor, mask: &Mask, scale: f64, dout: &Tensor) -> Result<Tensor> {
    let (n, m) = require_2d("masked_softmax_backward", output)?;
    if dout.shape() != output.shape() {
        return Err(CsdnError::Shape {
            op: "masked_softmax_backward",
            left: output.shape().to_vec(),
            right: dout.shape().to_vec(),
        });
    }
    let mut dl = vec![0.0; n * m];
    for i in 0..n {
        softmax_row_backward(
            &output.data()[i * m..(i + 1) * m],
            mask.row(i),
            scale,
            &dout.data()[i * m..(i + 1) * m],
            &mut dl[i * m..(i + 1) * m],
        );
    }
    Ok(Tensor::matrix_unchecked(n, m, dl))
}

pub(crate) fn softmax_row_backward(probs: &[f64], allowed: &[bool], scale: f64, dout: &[f64], dlogits: &mut [f64]) {
    let mut s = 0.0;
    for ((&p, &g), &a) in probs.iter().zip(dout).zip(allowed) {
        if a {
            s += p * g;
        }
    }
    for (((d, &p), &g), &a) in dlogits.iter_mut().zip(probs).zip(dout).zip(allowed) {
        *d = if a { p * (g - s) / scale } else { 0.0 };
    }
}

/// Intermediates of [`layer_norm`] needed by its backward.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row to zero mean and unit variance, then applies the
/// learned affine `gamma * xhat + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let (n, d) = require_2d("layer_norm", x)?;
    if gamma.len() != d || beta.len() != d {
        return Err(CsdnError::Shape {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let mut xhat = vec![0.0; n * d];
    let mut y = vec![0.0; n * d];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(rstd);
        for j in 0..d {
            let h = (row[j] - mean) * rstd;
            xhat[i * d + j] = h;
            y[i * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((
        Tensor::matrix_unchecked(n, d, y),
        LayerNormCache {
            normalized: Tensor::matrix_unchecked(n, d, xhat),
            inv_std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Tensor, dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let n = cache.normalized.rows();
    let d = cache.normalized.cols();
    let mut dx = vec![0.0; n * d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = cache.normalized.row(i);
        let g = dy.row(i);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma.data()[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rstd = cache.inv_std[i];
        for j in 0..d {
            dx[i * d + j] = rstd * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (Tensor::matrix_unchecked(n, d, dx), dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU, applied elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `dL/dx` for [`gelu`] given the forward input.
pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * gelu_derivative(v))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub const INVERSE_SIGMOID_CLIP: f64 = 1e-6;

/// Inverse sigmoid of `p` clipped to `[1e-6, 1 - 1e-6]`. The second value is
/// the derivative w.r.t. `p` (zero where the clip is active).
#[inline]
pub fn inverse_sigmoid_clipped(p: f64) -> (f64, f64) {
    let lo = INVERSE_SIGMOID_CLIP;
    let hi = 1.0 - INVERSE_SIGMOID_CLIP;
    if p <= lo {
        ((lo / (1.0 - lo)).ln(), 0.0)
    } else if p >= hi {
        ((hi / (1.0 - hi)).ln(), 0.0)
    } else {
        ((p / (1.0 - p)).ln(), 1.0 / (p * (1.0 - p)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::{grad_check, GradStore, ParamStore};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_column() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);

        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let a = store.add("a", random(&[3, 4], 1));
        let b = store.add("b", random(&[4, 2], 2));
        let err = grad_check(
            |s: &ParamStore, g: Option<&mut GradStore>| {
                let c = matmul(s.value(a), s.value(b))?;
                if let Some(g) = g {
                    let (da, db) = matmul_backward(s.value(a), s.value(b), &Tensor::full(&[3, 2], 1.0))?;
                    g.accumulate(a, da.data());
                    g.accumulate(b, db.data());
                }
                Ok(c.data().iter().sum())
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err.max_rel_error < 1e-6, "{err:?}");
    }

    #[test]
    fn matmul_is_bit_deterministic() {
        let a = random(&[5, 7], 3);
        let b = random(&[7, 4], 4);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1.data(), c2.data());
        // explicit ascending-k reference
        for i in 0..5 {
            for j in 0..4 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert_eq!(s.to_bits(), c1.at(i, j).to_bits());
            }
        }
    }

    #[test]
    fn softmax_trivial_rows() {
        let l = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let out = masked_softmax(&l, &Mask::all(1, 3), 1.0).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let l = Tensor::from_rows(&[vec![5.0, 0.0, 0.0]]).unwrap();
        let m = Mask::new(1, 3, vec![true, false, false]).unwrap();
        assert_eq!(masked_softmax(&l, &m, 1.0).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_matches_extended_precision_reference() {
        // Reference values: exp(k/sqrt2) / sum_k exp(k/sqrt2), k = 1,2,3,
        // evaluated at 50 digits.
        let expected = [
            0.140_029_245_043_378_01,
            0.283_995_409_741_260_02,
            0.575_975_345_215_362,
        ];
        let l = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let out = masked_softmax(&l, &Mask::all(1, 3), 2f64.sqrt()).unwrap();
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-15, "{o} vs {e}");
        }
    }

    #[test]
    fn softmax_degenerate_row_is_an_error() {
        let l = Tensor::zeros(&[2, 2]);
        let m = Mask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(matches!(
            masked_softmax(&l, &m, 1.0),
            Err(CsdnError::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let x = store.add("x", random(&[4, 5], 9));
        let w = random(&[4, 5], 10);
        let mut mask = Mask::all(4, 5);
        mask.set(0, 1, false);
        mask.set(2, 0, false);
        mask.set(2, 4, false);
        let report = grad_check(
            |s: &ParamStore, g: Option<&mut GradStore>| {
                let p = masked_softmax(s.value(x), &mask, 1.7)?;
                if let Some(g) = g {
                    let d = masked_softmax_backward(&p, &mask, 1.7, &w)?;
                    g.accumulate(x, d.data());
                }
                Ok(dot(p.data(), w.data()))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn linear_trivial_cases() {
        let x = random(&[3, 2], 5);
        let bias = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let y = linear(&x, &Tensor::zeros(&[2, 2]), &bias).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), bias.data());
        }
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let x = store.add("x", random(&[2, 3], 11));
        let w = store.add("w", random(&[3, 4], 12));
        let b = store.add("b", random(&[4], 13));
        let upstream = random(&[2, 4], 14);
        let report = grad_check(
            |s: &ParamStore, g: Option<&mut GradStore>| {
                let y = linear(s.value(x), s.value(w), s.value(b))?;
                if let Some(g) = g {
                    let (dx, dw, db) = linear_backward(s.value(x), s.value(w), &upstream)?;
                    g.accumulate(x, dx.data());
                    g.accumulate(w, dw.data());
                    g.accumulate(b, db.data());
                }
                Ok(dot(y.data(), upstream.data()))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        let mut store = ParamStore::new();
        let x = store.add("x", random(&[3, 6], 21));
        let gamma = store.add("gamma", random(&[6], 22));
        let beta = store.add("beta", random(&[6], 23));
        let upstream = random(&[3, 6], 24);
        let report = grad_check(
            |s: &ParamStore, g: Option<&mut GradStore>| {
                let (y, cache) = layer_norm(s.value(x), s.value(gamma), s.value(beta))?;
                let z = gelu(&y);
                if let Some(g) = g {
                    let dy = gelu_backward(&y, &upstream);
                    let (dx, dg, db) = layer_norm_backward(&cache, s.value(gamma), &dy);
                    g.accumulate(x, dx.data());
                    g.accumulate(gamma, &dg);
                    g.accumulate(beta, &db);
                }
                Ok(dot(z.data(), upstream.data()))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn stable_sigmoid_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        let (z, dz) = inverse_sigmoid_clipped(sigmoid(1.25));
        assert!((z - 1.25).abs() < 1e-12);
        assert!(dz > 0.0);
        assert_eq!(inverse_sigmoid_clipped(0.0).1, 0.0);
    }
}
