use super::GATE_SLOTS;
use crate::error::{CsdnError, Result};
use crate::nn::Linear;
use crate::tensor::ops::{softmax_row, softmax_row_backward};
use crate::tensor::{GradStore, ParamId, ParamStore, Tensor};

/// Per-query convex weights over the branch slots, `[N x 3]` ordered
/// (block, neighbor, deformable). Inactive columns are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub weights: Tensor,
}

impl GateWeights {
    pub fn row(&self, i: usize) -> &[f64] {
        self.weights.row(i)
    }

    /// Mean weight of each slot over all queries.
    pub fn column_means(&self) -> [f64; GATE_SLOTS] {
        let mut m = [0.0; GATE_SLOTS];
        let n = self.weights.rows().max(1);
        for i in 0..self.weights.rows() {
            for (a, w) in m.iter_mut().zip(self.row(i)) {
                *a += w / n as f64;
            }
        }
        m
    }
}

fn active_mask(outputs: &[Option<&Tensor>; GATE_SLOTS]) -> [bool; GATE_SLOTS] {
    [outputs[0].is_some(), outputs[1].is_some(), outputs[2].is_some()]
}

/// Fuses branch outputs with gate logits `[N x 3]`: softmax over the slots
/// that have an output, then the weighted sum of those outputs.
pub fn gated_fusion(logits: &Tensor, outputs: &[Option<&Tensor>; GATE_SLOTS]) -> Result<(Tensor, GateWeights)> {
    let active = active_mask(outputs);
    let first = outputs
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| CsdnError::InvalidArgument("gated fusion needs at least one active branch".into()))?;
    let (n, d) = (first.rows(), first.cols());
    if logits.shape() != [n, GATE_SLOTS] {
        return Err(CsdnError::Shape {
            op: "gated_fusion",
            left: vec![n, GATE_SLOTS],
            right: logits.shape().to_vec(),
        });
    }
    for o in outputs.iter().flatten() {
        if o.shape() != first.shape() {
            return Err(CsdnError::Shape {
                op: "gated_fusion",
                left: first.shape().to_vec(),
                right: o.shape().to_vec(),
            });
        }
    }
    let mut weights = vec![0.0; n * GATE_SLOTS];
    let mut fused = vec![0.0; n * d];
    for i in 0..n {
        let g = &mut weights[i * GATE_SLOTS..(i + 1) * GATE_SLOTS];
        softmax_row(logits.row(i), &active, 1.0, g).map_err(|e| e.at_row(i, "gate"))?;
        let row = &mut fused[i * d..(i + 1) * d];
        for (slot, o) in outputs.iter().enumerate() {
            if let Some(o) = o {
                let w = g[slot];
                for (f, v) in row.iter_mut().zip(o.row(i)) {
                    *f += w * v;
                }
            }
        }
    }
    Ok((
        Tensor::matrix_unchecked(n, d, fused),
        GateWeights {
            weights: Tensor::matrix_unchecked(n, GATE_SLOTS, weights),
        },
    ))
}

/// Returns `dL/dlogits` and the gradient for each active branch output.
pub fn gated_fusion_backward(
    weights: &GateWeights,
    outputs: &[Option<&Tensor>; GATE_SLOTS],
    dfused: &Tensor,
) -> (Tensor, [Option<Tensor>; GATE_SLOTS]) {
    let active = active_mask(outputs);
    let (n, d) = (dfused.rows(), dfused.cols());
    let mut dlogits = vec![0.0; n * GATE_SLOTS];
    let mut douts: [Option<Tensor>; GATE_SLOTS] = std::array::from_fn(|s| active[s].then(|| Tensor::zeros(&[n, d])));
    for i in 0..n {
        let g = weights.row(i);
        let dy = dfused.row(i);
        let mut dg = [0.0; GATE_SLOTS];
        for slot in 0..GATE_SLOTS {
            if let (Some(o), Some(dout)) = (outputs[slot], douts[slot].as_mut()) {
                dg[slot] = crate::tensor::ops::dot(o.row(i), dy);
                for (a, b) in dout.row_mut(i).iter_mut().zip(dy) {
                    *a = g[slot] * b;
                }
            }
        }
        softmax_row_backward(g, &active, 1.0, &dg, &mut dlogits[i * GATE_SLOTS..(i + 1) * GATE_SLOTS]);
    }
    (Tensor::matrix_unchecked(n, GATE_SLOTS, dlogits), douts)
}

/// Linear gate from the pre-attention query embedding to one logit per slot.
/// Zero-initialized, so a fresh gate averages its active branches.
#[derive(Debug, Clone, Copy)]
pub struct Gate {
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    pub weights: GateWeights,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            proj: Linear::zeros(store, name, dim, GATE_SLOTS),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.proj.weight, self.proj.bias]
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        outputs: &[Option<&Tensor>; GATE_SLOTS],
    ) -> Result<(Tensor, GateCache)> {
        let logits = self.proj.forward(store, x)?;
        let (fused, weights) = gated_fusion(&logits, outputs)?;
        Ok((fused, GateCache { weights }))
    }

    /// Returns `dL/dx` through the gate logits and the per-branch gradients.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        cache: &GateCache,
        outputs: &[Option<&Tensor>; GATE_SLOTS],
        dfused: &Tensor,
        grads: &mut GradStore,
    ) -> (Tensor, [Option<Tensor>; GATE_SLOTS]) {
        let (dlogits, douts) = gated_fusion_backward(&cache.weights, outputs, dfused);
        let dx = self.proj.backward(store, x, &dlogits, grads, true).expect("requested");
        (dx, douts)
    }
}
