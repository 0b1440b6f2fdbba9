use super::{FusionMode, HeadConfig};
use crate::attention::{
    AttentionBranch, BranchCache, BranchInput, BranchRegistry, BranchSpec, FeaturePyramid, Gate, GateCache,
    GateWeights, GATE_SLOTS,
};
use crate::error::Result;
use crate::geometry::{neighbor_mask, BBox, NeighborMask};
use crate::nn::{LayerNorm, Mlp, MlpCache};
use crate::rng::DetRng;
use crate::tensor::ops::{inverse_sigmoid_clipped, sigmoid, LayerNormCache};
use crate::tensor::{GradStore, ParamId, ParamStore, Tensor};

/// One decoder layer: attention branches (stacked or gated), feed-forward
/// block and box refinement.
#[derive(Debug)]
pub struct CsdnLayer {
    pub mode: FusionMode,
    pub branches: Vec<Box<dyn AttentionBranch>>,
    /// Present in gated mode only.
    pub gate: Option<Gate>,
    /// One norm after the fused output (gated) or after each branch (stacked).
    pub attn_norms: Vec<LayerNorm>,
    pub ffn: Mlp,
    pub ffn_norm: LayerNorm,
    /// Predicts `(dcx, dcy, dw, dh)` in inverse-sigmoid space. The output
    /// layer starts at zero so a fresh layer leaves boxes unchanged.
    pub refine: Mlp,
}

enum AttnCache {
    Gated {
        outputs: Vec<Tensor>,
        caches: Vec<BranchCache>,
        gate: GateCache,
        norm: LayerNormCache,
    },
    Stacked {
        inputs: Vec<Tensor>,
        caches: Vec<BranchCache>,
        norms: Vec<LayerNormCache>,
    },
}

/// Intermediates of [`CsdnLayer::forward`].
pub struct LayerCache {
    boxes_in: Vec<BBox>,
    mask: NeighborMask,
    attn: AttnCache,
    h1: Tensor,
    ffn: MlpCache,
    ffn_norm: LayerNormCache,
    h2: Tensor,
    refine: MlpCache,
    /// `d(inverse_sigmoid)/db` of the input box coordinates.
    dinv: Vec<[f64; 4]>,
    boxes_out: Vec<BBox>,
}

impl LayerCache {
    pub fn mask(&self) -> &NeighborMask {
        &self.mask
    }

    pub fn gate_weights(&self) -> Option<&GateWeights> {
        match &self.attn {
            AttnCache::Gated { gate, .. } => Some(&gate.weights),
            AttnCache::Stacked { .. } => None,
        }
    }
}

impl std::fmt::Debug for LayerCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LayerCache")
            .field("queries", &self.boxes_in.len())
            .finish()
    }
}

impl CsdnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &HeadConfig,
        registry: &BranchRegistry,
        rng: &mut DetRng,
    ) -> Result<Self> {
        let spec = BranchSpec {
            dim: config.dim,
            heads: config.heads,
            num_levels: config.num_levels,
            points: config.points,
            pos_encoding: config.pos_encoding,
        };
        let topo = &config.topology;
        let mut branches = Vec::with_capacity(topo.branches.len());
        for kind in &topo.branches {
            branches.push(registry.build(*kind, store, &format!("{name}.{}", kind.name()), &spec, rng)?);
        }
        let (gate, norm_count) = match topo.mode {
            FusionMode::Gated => (Some(Gate::new(store, &format!("{name}.gate"), config.dim)), 1),
            FusionMode::Stacked => (None, branches.len()),
        };
        let attn_norms = (0..norm_count)
            .map(|k| LayerNorm::new(store, &format!("{name}.attn_norm{k}"), config.dim))
            .collect();
        Ok(Self {
            mode: topo.mode,
            branches,
            gate,
            attn_norms,
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                config.dim,
                config.ffn_hidden,
                config.dim,
                rng,
            ),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), config.dim),
            refine: Mlp::zero_output(store, &format!("{name}.refine"), config.dim, config.dim, 4, rng),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.branches.iter().flat_map(|b| b.param_ids()).collect();
        if let Some(g) = &self.gate {
            ids.extend(g.param_ids());
        }
        for n in self.attn_norms.iter().chain([&self.ffn_norm]) {
            ids.extend([n.gamma, n.beta]);
        }
        for m in [&self.ffn, &self.refine] {
            ids.extend([m.fc1.weight, m.fc1.bias, m.fc2.weight, m.fc2.bias]);
        }
        ids
    }

    /// Returns the updated embeddings and boxes. The neighbor mask is built
    /// from the incoming boxes.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        boxes: &[BBox],
        pyramid: &FeaturePyramid,
    ) -> Result<(Tensor, Vec<BBox>, LayerCache)> {
        let mask = neighbor_mask(boxes);
        let input = BranchInput {
            x,
            boxes,
            mask: &mask,
            pyramid,
        };
        let (h1, attn) = match self.mode {
            FusionMode::Gated => {
                let mut outputs = Vec::with_capacity(self.branches.len());
                let mut caches = Vec::with_capacity(self.branches.len());
                for b in &self.branches {
                    let (o, c) = b.forward(store, &input)?;
                    outputs.push(o);
                    caches.push(c);
                }
                let slots = self.slot_view(&outputs);
                let gate = self.gate.as_ref().expect("gated layer has a gate");
                let (mut fused, gate_cache) = gate.forward(store, x, &slots)?;
                fused.add_assign(x);
                let (h1, norm) = self.attn_norms[0].forward(store, &fused)?;
                (
                    h1,
                    AttnCache::Gated {
                        outputs,
                        caches,
                        gate: gate_cache,
                        norm,
                    },
                )
            }
            FusionMode::Stacked => {
                let mut cur = x.clone();
                let mut inputs = Vec::with_capacity(self.branches.len());
                let mut caches = Vec::with_capacity(self.branches.len());
                let mut norms = Vec::with_capacity(self.branches.len());
                for (b, norm) in self.branches.iter().zip(&self.attn_norms) {
                    let step = BranchInput { x: &cur, ..input };
                    let (mut o, c) = b.forward(store, &step)?;
                    o.add_assign(&cur);
                    let (next, nc) = norm.forward(store, &o)?;
                    inputs.push(std::mem::replace(&mut cur, next));
                    caches.push(c);
                    norms.push(nc);
                }
                (cur, AttnCache::Stacked { inputs, caches, norms })
            }
        };

        let (mut f, ffn) = self.ffn.forward(store, &h1)?;
        f.add_assign(&h1);
        let (h2, ffn_norm) = self.ffn_norm.forward(store, &f)?;

        let (delta, refine) = self.refine.forward(store, &h2)?;
        let mut dinv = Vec::with_capacity(boxes.len());
        let mut boxes_out = Vec::with_capacity(boxes.len());
        for (i, b) in boxes.iter().enumerate() {
            let mut out = [0.0; 4];
            let mut d = [0.0; 4];
            for (c, v) in b.to_array().into_iter().enumerate() {
                let (z, dz) = inverse_sigmoid_clipped(v);
                out[c] = sigmoid(z + delta.at(i, c));
                d[c] = dz;
            }
            dinv.push(d);
            boxes_out.push(BBox::from_array(out));
        }
        Ok((
            h2.clone(),
            boxes_out.clone(),
            LayerCache {
                boxes_in: boxes.to_vec(),
                mask,
                attn,
                h1,
                ffn,
                ffn_norm,
                h2,
                refine,
                dinv,
                boxes_out,
            },
        ))
    }

    fn slot_view<'a>(&self, outputs: &'a [Tensor]) -> [Option<&'a Tensor>; GATE_SLOTS] {
        let mut slots = [None; GATE_SLOTS];
        for (b, o) in self.branches.iter().zip(outputs) {
            slots[b.kind().gate_slot()] = Some(o);
        }
        slots
    }

    /// Backward from `dL/dx_out` and `dL/dboxes_out`; returns the gradients
    /// w.r.t. the layer's input embeddings and boxes.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        pyramid: &FeaturePyramid,
        cache: &LayerCache,
        dx_out: &Tensor,
        dboxes_out: &[[f64; 4]],
        grads: &mut GradStore,
    ) -> Result<(Tensor, Vec<[f64; 4]>)> {
        let n = x.rows();
        let mut ddelta = Tensor::zeros(&[n, 4]);
        let mut dboxes = vec![[0.0; 4]; n];
        for i in 0..n {
            let b = cache.boxes_out[i].to_array();
            for c in 0..4 {
                let dz = dboxes_out[i][c] * b[c] * (1.0 - b[c]);
                ddelta.row_mut(i)[c] = dz;
                dboxes[i][c] = dz * cache.dinv[i][c];
            }
        }
        let mut dh2 = self.refine.backward(store, &cache.h2, &cache.refine, &ddelta, grads);
        dh2.add_assign(dx_out);
        let dsum = self.ffn_norm.backward(store, &cache.ffn_norm, &dh2, grads);
        let mut dh1 = self.ffn.backward(store, &cache.h1, &cache.ffn, &dsum, grads);
        dh1.add_assign(&dsum);

        let input = BranchInput {
            x,
            boxes: &cache.boxes_in,
            mask: &cache.mask,
            pyramid,
        };
        let mut add_boxes = |db: Option<Vec<[f64; 4]>>| {
            if let Some(db) = db {
                for (a, g) in dboxes.iter_mut().zip(db) {
                    for c in 0..4 {
                        a[c] += g[c];
                    }
                }
            }
        };
        let dx = match &cache.attn {
            AttnCache::Gated {
                outputs,
                caches,
                gate,
                norm,
            } => {
                let dfused = self.attn_norms[0].backward(store, norm, &dh1, grads);
                let slots = self.slot_view(outputs);
                let (mut dx, douts) = self
                    .gate
                    .as_ref()
                    .expect("gated layer has a gate")
                    .backward(store, x, gate, &slots, &dfused, grads);
                dx.add_assign(&dfused);
                for (b, c) in self.branches.iter().zip(caches) {
                    let dout = douts[b.kind().gate_slot()].as_ref().expect("active slot");
                    let g = b.backward(store, &input, c, dout, grads)?;
                    dx.add_assign(&g.dx);
                    add_boxes(g.dboxes);
                }
                dx
            }
            AttnCache::Stacked { inputs, caches, norms } => {
                let mut dcur = dh1;
                for k in (0..self.branches.len()).rev() {
                    let dsum = self.attn_norms[k].backward(store, &norms[k], &dcur, grads);
                    let step = BranchInput { x: &inputs[k], ..input };
                    let g = self.branches[k].backward(store, &step, &caches[k], &dsum, grads)?;
                    dcur = dsum;
                    dcur.add_assign(&g.dx);
                    add_boxes(g.dboxes);
                }
                dcur
            }
        };
        Ok((dx, dboxes))
    }
}
