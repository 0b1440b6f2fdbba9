//! The attention branches of a CSDN layer and the gate that fuses them.
//!
//! Each branch implements [`AttentionBranch`] and is constructed by name
//! through a [`BranchRegistry`]; a layer only ever talks to the trait. The
//! shared multi-head kernel lives in [`mha`].

mod block;
mod deformable;
mod gate;
pub mod mha;
mod neighbor;
mod pyramid;
mod registry;

use std::any::Any;

pub use block::{sine_position_encoding, BlockAttention};
pub use deformable::{bilinear_sample, bilinear_sample_backward, BilinearGrad, DeformableAttention};
pub use gate::{gated_fusion, gated_fusion_backward, Gate, GateCache, GateWeights};
pub use neighbor::{NeighborAttention, SelfAttention};
pub use pyramid::{FeatureMap, FeaturePyramid, QuerySet};
pub use registry::{BranchBuilder, BranchRegistry, BranchSpec};

use crate::error::Result;
use crate::geometry::{BBox, NeighborMask};
use crate::tensor::{GradStore, ParamId, ParamStore, Tensor};

/// Number of gate columns, ordered (block, neighbor, deformable).
pub const GATE_SLOTS: usize = 3;

/// Built-in branch families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchKind {
    SelfAttention,
    Neighbor,
    Block,
    Deformable,
}

impl BranchKind {
    /// Gate column this branch writes to. Plain self-attention shares the
    /// query-interaction column with neighbor attention.
    pub fn gate_slot(self) -> usize {
        match self {
            BranchKind::Block => 0,
            BranchKind::Neighbor | BranchKind::SelfAttention => 1,
            BranchKind::Deformable => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::SelfAttention => "self",
            BranchKind::Neighbor => "neighbor",
            BranchKind::Block => "block",
            BranchKind::Deformable => "deformable",
        }
    }

    pub fn code(self) -> char {
        match self {
            BranchKind::SelfAttention => 's',
            BranchKind::Neighbor => 'n',
            BranchKind::Block => 'b',
            BranchKind::Deformable => 'd',
        }
    }
}

/// Everything a branch may read during one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BranchInput<'a> {
    /// Query embeddings `[N x d]`.
    pub x: &'a Tensor,
    /// Current box estimate of each query.
    pub boxes: &'a [BBox],
    pub mask: &'a NeighborMask,
    pub pyramid: &'a FeaturePyramid,
}

/// Opaque per-branch intermediates kept for the backward pass.
pub struct BranchCache(Box<dyn Any + Send + Sync>);

impl BranchCache {
    pub fn new<T: Any + Send + Sync>(value: T) -> Self {
        Self(Box::new(value))
    }

    pub fn downcast<T: Any>(&self) -> &T {
        self.0
            .downcast_ref()
            .expect("branch cache passed to a different branch type")
    }
}

impl std::fmt::Debug for BranchCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("BranchCache(..)")
    }
}

/// Input gradients returned by a branch backward.
#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub dx: Tensor,
    /// `dL/d(cx, cy, w, h)` per query when the branch reads box geometry.
    pub dboxes: Option<Vec<[f64; 4]>>,
}

/// A pluggable attention pattern over object queries.
pub trait AttentionBranch: Send + Sync + std::fmt::Debug {
    fn kind(&self) -> BranchKind;

    fn forward(&self, store: &ParamStore, input: &BranchInput<'_>) -> Result<(Tensor, BranchCache)>;

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradients.
    fn backward(
        &self,
        store: &ParamStore,
        input: &BranchInput<'_>,
        cache: &BranchCache,
        dout: &Tensor,
        grads: &mut GradStore,
    ) -> Result<BranchGrads>;

    fn param_ids(&self) -> Vec<ParamId>;
}
