use super::mha::{MultiHead, MultiHeadCache};
use super::{AttentionBranch, BranchCache, BranchGrads, BranchInput, BranchKind};
use crate::error::{CsdnError, Result};
use crate::rng::DetRng;
use crate::tensor::{GradStore, Mask, ParamId, ParamStore, Tensor};

/// Cross-attention from every query to all locations of the coarsest
/// pyramid level.
#[derive(Debug, Clone)]
pub struct BlockAttention {
    pub mha: MultiHead,
    /// Add a 2-D sinusoidal encoding of each location to the keys.
    pub pos_encoding: bool,
}

struct BlockCache {
    mha: MultiHeadCache,
    keys: Tensor,
    values: Tensor,
}

impl BlockAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        pos_encoding: bool,
        rng: &mut DetRng,
    ) -> Result<Self> {
        if pos_encoding && !dim.is_multiple_of(4) {
            return Err(CsdnError::Config(format!(
                "sinusoidal position encoding needs dim divisible by 4, got {dim}"
            )));
        }
        Ok(Self {
            mha: MultiHead::new(store, name, dim, heads, rng)?,
            pos_encoding,
        })
    }

    fn keys_and_values(&self, input: &BranchInput<'_>) -> (Tensor, Tensor) {
        let top = input.pyramid.top();
        let values = top.flatten();
        let mut keys = values.clone();
        if self.pos_encoding {
            keys.add_assign(&sine_position_encoding(top.height(), top.width(), top.channels()));
        }
        (keys, values)
    }
}

/// DETR-style 2-D sine encoding `[H*W x d]`: the first half of the channels
/// encode the row, the second half the column, each as interleaved sin/cos
/// pairs over `d/4` frequencies of the normalized coordinate scaled by 2*pi.
pub fn sine_position_encoding(height: usize, width: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; height * width * dim];
    let two_pi = 2.0 * std::f64::consts::PI;
    for r in 0..height {
        let y = (r as f64 + 0.5) / height as f64 * two_pi;
        for c in 0..width {
            let x = (c as f64 + 0.5) / width as f64 * two_pi;
            let row = &mut data[(r * width + c) * dim..(r * width + c + 1) * dim];
            for (part, coord) in [(0, y), (1, x)] {
                for k in 0..half {
                    let freq = 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
                    let arg = coord / freq;
                    row[part * half + k] = if k % 2 == 0 { arg.sin() } else { arg.cos() };
                }
            }
        }
    }
    Tensor::matrix_unchecked(height * width, dim, data)
}

impl AttentionBranch for BlockAttention {
    fn kind(&self) -> BranchKind {
        BranchKind::Block
    }

    fn forward(&self, store: &ParamStore, input: &BranchInput<'_>) -> Result<(Tensor, BranchCache)> {
        let (keys, values) = self.keys_and_values(input);
        let mask = Mask::all(input.x.rows(), keys.rows());
        let (out, mha) = self.mha.forward(store, input.x, &keys, &values, &mask)?;
        Ok((out, BranchCache::new(BlockCache { mha, keys, values })))
    }

    fn backward(
        &self,
        store: &ParamStore,
        input: &BranchInput<'_>,
        cache: &BranchCache,
        dout: &Tensor,
        grads: &mut GradStore,
    ) -> Result<BranchGrads> {
        let cache: &BlockCache = cache.downcast();
        let mask = Mask::all(input.x.rows(), cache.keys.rows());
        let (dx, _) = self.mha.backward(
            store,
            &cache.mha,
            input.x,
            &cache.keys,
            &cache.values,
            &mask,
            dout,
            grads,
            false,
        );
        Ok(BranchGrads { dx, dboxes: None })
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.mha.param_ids()
    }
}
