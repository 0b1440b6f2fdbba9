//! Multi-head scaled dot-product attention with an explicit mask, shared by
//! the self, neighbor and block branches.

use crate::error::{CsdnError, Result};
use crate::nn::Linear;
use crate::rng::DetRng;
use crate::tensor::ops::{dot, softmax_row, softmax_row_backward};
use crate::tensor::{GradStore, Mask, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct MultiHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct MultiHeadCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// `[heads][n][m]` attention probabilities.
    probs: Vec<f64>,
    concat: Tensor,
}

impl MultiHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut DetRng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(CsdnError::Config(format!(
                "embedding dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.out]
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// `out_i = W_o concat_h softmax_mask(q_i k^T / sqrt(d_h)) v`
    pub fn forward(
        &self,
        store: &ParamStore,
        xq: &Tensor,
        xk: &Tensor,
        xv: &Tensor,
        mask: &Mask,
    ) -> Result<(Tensor, MultiHeadCache)> {
        let n = xq.rows();
        let m = xk.rows();
        if xv.rows() != m || mask.rows() != n || mask.cols() != m {
            return Err(CsdnError::Shape {
                op: "multi_head_attention",
                left: vec![n, m],
                right: vec![mask.rows(), mask.cols()],
            });
        }
        if m == 0 {
            return Err(CsdnError::InvalidArgument("attention over an empty key set".into()));
        }
        let q = self.q.forward(store, xq)?;
        let k = self.k.forward(store, xk)?;
        let v = self.v.forward(store, xv)?;
        let d = self.dim;
        let dh = self.head_dim();
        let scale = (dh as f64).sqrt();

        let mut probs = vec![0.0; self.heads * n * m];
        let mut concat = vec![0.0; n * d];
        let mut logits = vec![0.0; m];
        for h in 0..self.heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &q.row(i)[off..off + dh];
                let allowed = mask.row(i);
                for j in 0..m {
                    logits[j] = if allowed[j] {
                        dot(qi, &k.row(j)[off..off + dh])
                    } else {
                        0.0
                    };
                }
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                softmax_row(&logits, allowed, scale, p).map_err(|e| e.at_row(i, "attention"))?;
                let out = &mut concat[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj != 0.0 {
                        for (o, vv) in out.iter_mut().zip(&v.row(j)[off..off + dh]) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let concat = Tensor::matrix_unchecked(n, d, concat);
        let output = self.out.forward(store, &concat)?;
        Ok((output, MultiHeadCache { q, k, v, probs, concat }))
    }

    /// Returns `dxq` and, when `kv_input_grads` is set, `(dxk, dxv)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MultiHeadCache,
        xq: &Tensor,
        xk: &Tensor,
        xv: &Tensor,
        mask: &Mask,
        dout: &Tensor,
        grads: &mut GradStore,
        kv_input_grads: bool,
    ) -> (Tensor, Option<(Tensor, Tensor)>) {
        let n = xq.rows();
        let m = xk.rows();
        let d = self.dim;
        let dh = self.head_dim();
        let scale = (dh as f64).sqrt();

        let dconcat = self
            .out
            .backward(store, &cache.concat, dout, grads, true)
            .expect("requested");
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut dp = vec![0.0; m];
        let mut dlogits = vec![0.0; m];
        for h in 0..self.heads {
            let off = h * dh;
            for i in 0..n {
                let allowed = mask.row(i);
                let p = &cache.probs[(h * n + i) * m..(h * n + i + 1) * m];
                let go = &dconcat.row(i)[off..off + dh];
                for j in 0..m {
                    if allowed[j] {
                        dp[j] = dot(go, &cache.v.row(j)[off..off + dh]);
                        let pj = p[j];
                        for (a, g) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                            *a += pj * g;
                        }
                    } else {
                        dp[j] = 0.0;
                    }
                }
                softmax_row_backward(p, allowed, scale, &dp, &mut dlogits);
                let qi = &cache.q.row(i)[off..off + dh];
                for j in 0..m {
                    let g = dlogits[j];
                    if g == 0.0 {
                        continue;
                    }
                    let kj = &cache.k.row(j)[off..off + dh];
                    for (a, kk) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                        *a += g * kk;
                    }
                    for (a, qq) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                        *a += g * qq;
                    }
                }
            }
        }
        let dq = Tensor::matrix_unchecked(n, d, dq);
        let dk = Tensor::matrix_unchecked(m, d, dk);
        let dv = Tensor::matrix_unchecked(m, d, dv);
        let dxq = self.q.backward(store, xq, &dq, grads, true).expect("requested");
        let dxk = self.k.backward(store, xk, &dk, grads, kv_input_grads);
        let dxv = self.v.backward(store, xv, &dv, grads, kv_input_grads);
        (dxq, dxk.zip(dxv))
    }
}
