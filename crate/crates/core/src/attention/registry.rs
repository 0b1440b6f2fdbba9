use std::collections::BTreeMap;

use super::{AttentionBranch, BlockAttention, BranchKind, DeformableAttention, NeighborAttention, SelfAttention};
use crate::error::{CsdnError, Result};
use crate::rng::DetRng;
use crate::tensor::ParamStore;

/// Shape hyperparameters every branch constructor receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSpec {
    pub dim: usize,
    pub heads: usize,
    pub num_levels: usize,
    pub points: usize,
    pub pos_encoding: bool,
}

pub type BranchBuilder = fn(&mut ParamStore, &str, &BranchSpec, &mut DetRng) -> Result<Box<dyn AttentionBranch>>;

/// Maps branch kinds to constructors. Layers build their branches only
/// through a registry, so alternative implementations can be swapped in.
#[derive(Debug, Clone)]
pub struct BranchRegistry {
    builders: BTreeMap<BranchKind, BranchBuilder>,
}

fn build_self(
    store: &mut ParamStore,
    name: &str,
    s: &BranchSpec,
    rng: &mut DetRng,
) -> Result<Box<dyn AttentionBranch>> {
    Ok(Box::new(SelfAttention::new(store, name, s.dim, s.heads, rng)?))
}

fn build_neighbor(
    store: &mut ParamStore,
    name: &str,
    s: &BranchSpec,
    rng: &mut DetRng,
) -> Result<Box<dyn AttentionBranch>> {
    Ok(Box::new(NeighborAttention::new(store, name, s.dim, s.heads, rng)?))
}

fn build_block(
    store: &mut ParamStore,
    name: &str,
    s: &BranchSpec,
    rng: &mut DetRng,
) -> Result<Box<dyn AttentionBranch>> {
    Ok(Box::new(BlockAttention::new(
        store,
        name,
        s.dim,
        s.heads,
        s.pos_encoding,
        rng,
    )?))
}

fn build_deformable(
    store: &mut ParamStore,
    name: &str,
    s: &BranchSpec,
    rng: &mut DetRng,
) -> Result<Box<dyn AttentionBranch>> {
    Ok(Box::new(DeformableAttention::new(
        store,
        name,
        s.dim,
        s.heads,
        s.num_levels,
        s.points,
        rng,
    )?))
}

impl Default for BranchRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl BranchRegistry {
    pub fn empty() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    /// Registry holding the self, neighbor, block and deformable branches.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(BranchKind::SelfAttention, build_self);
        r.register(BranchKind::Neighbor, build_neighbor);
        r.register(BranchKind::Block, build_block);
        r.register(BranchKind::Deformable, build_deformable);
        r
    }

    /// Installs `builder` for `kind`, returning the one it replaced.
    pub fn register(&mut self, kind: BranchKind, builder: BranchBuilder) -> Option<BranchBuilder> {
        self.builders.insert(kind, builder)
    }

    pub fn contains(&self, kind: BranchKind) -> bool {
        self.builders.contains_key(&kind)
    }

    pub fn build(
        &self,
        kind: BranchKind,
        store: &mut ParamStore,
        name: &str,
        spec: &BranchSpec,
        rng: &mut DetRng,
    ) -> Result<Box<dyn AttentionBranch>> {
        let builder = self
            .builders
            .get(&kind)
            .ok_or_else(|| CsdnError::Config(format!("no branch registered for '{}'", kind.name())))?;
        builder(store, name, spec, rng)
    }
}
