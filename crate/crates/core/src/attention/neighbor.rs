use super::mha::{MultiHead, MultiHeadCache};
use super::{AttentionBranch, BranchCache, BranchGrads, BranchInput, BranchKind};
use crate::error::Result;
use crate::rng::DetRng;
use crate::tensor::{GradStore, Mask, ParamId, ParamStore, Tensor};

/// Self-attention among queries restricted to IoU-overlapping pairs.
#[derive(Debug, Clone)]
pub struct NeighborAttention {
    pub mha: MultiHead,
}

/// Unrestricted self-attention among all queries. Same kernel as
/// [`NeighborAttention`] with an all-true mask.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub mha: MultiHead,
}

impl NeighborAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut DetRng) -> Result<Self> {
        Ok(Self {
            mha: MultiHead::new(store, name, dim, heads, rng)?,
        })
    }
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut DetRng) -> Result<Self> {
        Ok(Self {
            mha: MultiHead::new(store, name, dim, heads, rng)?,
        })
    }
}

fn query_attention_forward(
    mha: &MultiHead,
    store: &ParamStore,
    x: &Tensor,
    mask: &Mask,
) -> Result<(Tensor, BranchCache)> {
    let (out, cache) = mha.forward(store, x, x, x, mask)?;
    Ok((out, BranchCache::new(cache)))
}

fn query_attention_backward(
    mha: &MultiHead,
    store: &ParamStore,
    x: &Tensor,
    mask: &Mask,
    cache: &BranchCache,
    dout: &Tensor,
    grads: &mut GradStore,
) -> BranchGrads {
    let cache: &MultiHeadCache = cache.downcast();
    let (mut dx, kv) = mha.backward(store, cache, x, x, x, mask, dout, grads, true);
    let (dk, dv) = kv.expect("requested");
    dx.add_assign(&dk);
    dx.add_assign(&dv);
    BranchGrads { dx, dboxes: None }
}

impl AttentionBranch for NeighborAttention {
    fn kind(&self) -> BranchKind {
        BranchKind::Neighbor
    }

    fn forward(&self, store: &ParamStore, input: &BranchInput<'_>) -> Result<(Tensor, BranchCache)> {
        query_attention_forward(&self.mha, store, input.x, input.mask.as_mask())
    }

    fn backward(
        &self,
        store: &ParamStore,
        input: &BranchInput<'_>,
        cache: &BranchCache,
        dout: &Tensor,
        grads: &mut GradStore,
    ) -> Result<BranchGrads> {
        Ok(query_attention_backward(
            &self.mha,
            store,
            input.x,
            input.mask.as_mask(),
            cache,
            dout,
            grads,
        ))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.mha.param_ids()
    }
}

impl AttentionBranch for SelfAttention {
    fn kind(&self) -> BranchKind {
        BranchKind::SelfAttention
    }

    fn forward(&self, store: &ParamStore, input: &BranchInput<'_>) -> Result<(Tensor, BranchCache)> {
        let n = input.x.rows();
        query_attention_forward(&self.mha, store, input.x, &Mask::all(n, n))
    }

    fn backward(
        &self,
        store: &ParamStore,
        input: &BranchInput<'_>,
        cache: &BranchCache,
        dout: &Tensor,
        grads: &mut GradStore,
    ) -> Result<BranchGrads> {
        let n = input.x.rows();
        Ok(query_attention_backward(
            &self.mha,
            store,
            input.x,
            &Mask::all(n, n),
            cache,
            dout,
            grads,
        ))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.mha.param_ids()
    }
}
