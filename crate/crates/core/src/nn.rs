//! Parameterized building blocks shared by the attention branches and the head.

use crate::error::Result;
use crate::rng::{self, DetRng};
use crate::tensor::{ops, GradStore, ParamId, ParamStore, Tensor};

/// Affine map `x W + b` with `W: [d_in x d_out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight uniform in `[-1/sqrt(d_in), 1/sqrt(d_in)]`, bias zero.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut DetRng) -> Self {
        let w = rng::uniform_fan_in(rng, d_in, d_in * d_out);
        Self::with_values(store, name, d_in, d_out, w, vec![0.0; d_out])
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_values(store, name, d_in, d_out, vec![0.0; d_in * d_out], vec![0.0; d_out])
    }

    pub fn with_values(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::matrix_unchecked(d_in, d_out, weight));
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::new(vec![d_out], bias).expect("bias length"),
        );
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, store.value(self.weight), store.value(self.bias))
    }

    /// Accumulates weight/bias gradients; returns `dx` when requested.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        dy: &Tensor,
        grads: &mut GradStore,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let n = x.rows();
        ops::gemm_tn_acc(
            x.data(),
            dy.data(),
            n,
            self.d_in,
            self.d_out,
            grads.get_mut(self.weight),
        );
        let db = grads.get_mut(self.bias);
        for row in dy.data().chunks_exact(self.d_out) {
            for (b, g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
        need_input_grad.then(|| {
            Tensor::matrix_unchecked(
                n,
                self.d_in,
                ops::gemm_nt(dy.data(), store.value(self.weight).data(), n, self.d_out, self.d_in),
            )
        })
    }
}

/// Learned affine layer normalization over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, ops::LayerNormCache)> {
        ops::layer_norm(x, store.value(self.gamma), store.value(self.beta))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ops::LayerNormCache,
        dy: &Tensor,
        grads: &mut GradStore,
    ) -> Tensor {
        let (dx, dg, db) = ops::layer_norm_backward(cache, store.value(self.gamma), dy);
        grads.accumulate(self.gamma, &dg);
        grads.accumulate(self.beta, &db);
        dx
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    pre_activation: Tensor,
    hidden: Tensor,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut DetRng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    /// Same as [`Mlp::new`] but with the output layer zeroed, so the block
    /// starts as the zero map.
    pub fn zero_output(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut DetRng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::zeros(store, &format!("{name}.fc2"), hidden, d_out),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let pre = self.fc1.forward(store, x)?;
        let hidden = ops::gelu(&pre);
        let out = self.fc2.forward(store, &hidden)?;
        Ok((
            out,
            MlpCache {
                pre_activation: pre,
                hidden,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        cache: &MlpCache,
        dy: &Tensor,
        grads: &mut GradStore,
    ) -> Tensor {
        let dh = self
            .fc2
            .backward(store, &cache.hidden, dy, grads, true)
            .expect("requested");
        let dpre = ops::gelu_backward(&cache.pre_activation, &dh);
        self.fc1.backward(store, x, &dpre, grads, true).expect("requested")
    }
}
