//! The full detection head: learned query tables, a stack of
//! [`CsdnLayer`]s and the shared classification head.

mod layer;
mod topology;

pub use layer::{CsdnLayer, LayerCache};
pub use topology::{FusionMode, Topology, ABLATION_TOPOLOGIES};

use serde::{Deserialize, Serialize};

use crate::attention::{BranchRegistry, FeaturePyramid, GateWeights, QuerySet};
use crate::error::{CsdnError, Result};
use crate::geometry::BBox;
use crate::nn::Linear;
use crate::rng::{self, DetRng};
use crate::tensor::ops::{inverse_sigmoid_clipped, sigmoid};
use crate::tensor::{GradStore, ParamId, ParamStore, Tensor};

/// Focal-loss style prior: the class head starts out predicting
/// probability 0.01 for every class.
const CLASS_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub num_layers: usize,
    pub num_queries: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub ffn_hidden: usize,
    #[serde(with = "topology_serde")]
    pub topology: Topology,
    /// Sine position encoding on the block-attention keys.
    pub pos_encoding: bool,
    /// Deformable sampling points per level and head.
    pub points: usize,
    pub num_levels: usize,
    /// Stop gradients through the box estimate passed from one layer to
    /// the next. Each layer's refinement is still trained by its own loss.
    pub detach_boxes: bool,
    /// Initial width and height of the learned query boxes.
    pub init_box_size: f64,
}

mod topology_serde {
    use super::Topology;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Topology, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Topology, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_queries: 100,
            dim: 64,
            heads: 4,
            num_classes: 8,
            ffn_hidden: 256,
            topology: "n+b+d".parse().expect("valid topology"),
            pos_encoding: true,
            points: 4,
            num_levels: 3,
            detach_boxes: true,
            init_box_size: 0.15,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CsdnError::Config(m));
        if self.num_queries == 0 {
            return fail("num_queries must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.ffn_hidden == 0 || self.points == 0 || self.num_levels == 0 {
            return fail("ffn_hidden, points and num_levels must be positive".into());
        }
        if !(self.init_box_size > 0.0 && self.init_box_size < 1.0) {
            return fail(format!("init_box_size {} outside (0, 1)", self.init_box_size));
        }
        Ok(())
    }
}

/// Predictions of one layer (or of the bare query tables when the head has
/// no layers).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    /// `[N x C]` class logits.
    pub logits: Tensor,
    pub boxes: Vec<BBox>,
}

/// Per-layer predictions; the last entry is the reported output.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub layers: Vec<LayerOutput>,
    /// Gate weights of each layer (`None` for stacked layers).
    pub gates: Vec<Option<GateWeights>>,
}

impl HeadOutput {
    pub fn final_layer(&self) -> &LayerOutput {
        self.layers.last().expect("at least one output")
    }
}

/// Upstream gradient for one [`LayerOutput`].
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dlogits: Tensor,
    pub dboxes: Vec<[f64; 4]>,
}

/// Intermediates of [`CsdnHead::forward`].
#[derive(Debug)]
pub struct HeadCache {
    /// Embeddings entering each layer, plus the final embeddings.
    xs: Vec<Tensor>,
    layers: Vec<LayerCache>,
    initial_boxes: Vec<BBox>,
}

impl HeadCache {
    pub fn layer_caches(&self) -> &[LayerCache] {
        &self.layers
    }
}

#[derive(Debug)]
pub struct CsdnHead {
    pub config: HeadConfig,
    /// `[N x d]` learned query embeddings.
    pub query_embed: ParamId,
    /// `[N x 4]` learned box logits, decoded by sigmoid.
    pub query_boxes: ParamId,
    pub layers: Vec<CsdnLayer>,
    /// Shared across layers.
    pub class_head: Linear,
}

impl CsdnHead {
    /// Builds the head with the built-in branches. Every parameter is drawn
    /// from a stream keyed by `seed`.
    pub fn new(config: &HeadConfig, seed: u64) -> Result<(Self, ParamStore)> {
        Self::with_registry(config, &BranchRegistry::builtin(), seed)
    }

    pub fn with_registry(config: &HeadConfig, registry: &BranchRegistry, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = rng::stream(seed, 1);
        let mut store = ParamStore::new();
        let (query_embed, query_boxes) = init_query_tables(&mut store, config, &mut rng);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            layers.push(CsdnLayer::new(
                &mut store,
                &format!("layer{l}"),
                config,
                registry,
                &mut rng,
            )?);
        }
        let prior_bias = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        let class_head = Linear::with_values(
            &mut store,
            "class_head",
            config.dim,
            config.num_classes,
            rng::uniform_fan_in(&mut rng, config.dim, config.dim * config.num_classes),
            vec![prior_bias; config.num_classes],
        );
        Ok((
            Self {
                config: config.clone(),
                query_embed,
                query_boxes,
                layers,
                class_head,
            },
            store,
        ))
    }

    /// The learned queries with their sigmoid-decoded boxes.
    pub fn init_queries(&self, store: &ParamStore) -> QuerySet {
        let table = store.value(self.query_boxes);
        let boxes = (0..table.rows())
            .map(|i| {
                let r = table.row(i);
                BBox::new(sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3]))
            })
            .collect();
        QuerySet::new(store.value(self.query_embed).clone(), boxes).expect("tables agree")
    }

    fn check_pyramid(&self, pyramid: &FeaturePyramid) -> Result<()> {
        if pyramid.channels() != self.config.dim || pyramid.num_levels() != self.config.num_levels {
            return Err(CsdnError::Shape {
                op: "head_forward",
                left: vec![self.config.num_levels, self.config.dim],
                right: vec![pyramid.num_levels(), pyramid.channels()],
            });
        }
        Ok(())
    }

    pub fn forward(&self, store: &ParamStore, pyramid: &FeaturePyramid) -> Result<(HeadOutput, HeadCache)> {
        self.check_pyramid(pyramid)?;
        let q = self.init_queries(store);
        let initial_boxes = q.boxes.clone();
        let mut x = q.embeddings;
        let mut boxes = q.boxes;
        let mut xs = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len().max(1));
        let mut gates = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (nx, nb, cache) = layer.forward(store, &x, &boxes, pyramid)?;
            outputs.push(LayerOutput {
                logits: self.class_head.forward(store, &nx)?,
                boxes: nb.clone(),
            });
            gates.push(cache.gate_weights().cloned());
            xs.push(std::mem::replace(&mut x, nx));
            boxes = nb;
            caches.push(cache);
        }
        if self.layers.is_empty() {
            outputs.push(LayerOutput {
                logits: self.class_head.forward(store, &x)?,
                boxes: boxes.clone(),
            });
        }
        xs.push(x);
        Ok((
            HeadOutput { layers: outputs, gates },
            HeadCache {
                xs,
                layers: caches,
                initial_boxes,
            },
        ))
    }

    /// Accumulates parameter gradients given one [`LayerGrad`] per output.
    pub fn backward(
        &self,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
        cache: &HeadCache,
        upstream: &[LayerGrad],
        grads: &mut GradStore,
    ) -> Result<()> {
        let expected = self.layers.len().max(1);
        if upstream.len() != expected {
            return Err(CsdnError::Shape {
                op: "head_backward",
                left: vec![expected],
                right: vec![upstream.len()],
            });
        }
        let n = self.config.num_queries;
        let d = self.config.dim;
        let mut dx = Tensor::zeros(&[n, d]);
        let mut dboxes = vec![[0.0; 4]; n];
        for l in (0..expected).rev() {
            let out_x = &cache.xs[if self.layers.is_empty() { 0 } else { l + 1 }];
            dx.add_assign(
                &self
                    .class_head
                    .backward(store, out_x, &upstream[l].dlogits, grads, true)
                    .expect("requested"),
            );
            for (a, g) in dboxes.iter_mut().zip(&upstream[l].dboxes) {
                for c in 0..4 {
                    a[c] += g[c];
                }
            }
            if let Some(layer) = self.layers.get(l) {
                let (ndx, ndb) = layer.backward(store, &cache.xs[l], pyramid, &cache.layers[l], &dx, &dboxes, grads)?;
                dx = ndx;
                dboxes = if self.config.detach_boxes && l > 0 {
                    vec![[0.0; 4]; n]
                } else {
                    ndb
                };
            }
        }
        grads.accumulate(self.query_embed, dx.data());
        let mut dtable = Vec::with_capacity(n * 4);
        for (b, g) in cache.initial_boxes.iter().zip(&dboxes) {
            for (v, gc) in b.to_array().into_iter().zip(g) {
                dtable.push(gc * v * (1.0 - v));
            }
        }
        grads.accumulate(self.query_boxes, &dtable);
        Ok(())
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        store.num_scalars()
    }
}

fn init_query_tables(store: &mut ParamStore, config: &HeadConfig, rng: &mut DetRng) -> (ParamId, ParamId) {
    use rand::Rng;
    let (n, d) = (config.num_queries, config.dim);
    let embed: Vec<f64> = (0..n * d).map(|_| rng::normal(rng)).collect();
    let (size_logit, _) = inverse_sigmoid_clipped(config.init_box_size);
    let mut boxes = Vec::with_capacity(n * 4);
    for _ in 0..n {
        for _ in 0..2 {
            boxes.push(inverse_sigmoid_clipped(rng.gen_range(0.05..0.95)).0);
        }
        boxes.extend([size_logit, size_logit]);
    }
    (
        store.add("query_embed", Tensor::matrix(n, d, embed).expect("sized")),
        store.add("query_boxes", Tensor::matrix(n, 4, boxes).expect("sized")),
    )
}

/// Scalar count of one layer's parameters under `config`.
pub fn layer_param_count(config: &HeadConfig) -> Result<usize> {
    let mut store = ParamStore::new();
    let mut rng = rng::seeded(0);
    CsdnLayer::new(&mut store, "probe", config, &BranchRegistry::builtin(), &mut rng)?;
    Ok(store.num_scalars())
}

/// Feed-forward width that brings one layer of `config` closest to
/// `target` parameters. Used to keep ablation rows at a comparable size.
pub fn ffn_hidden_for_budget(config: &HeadConfig, target: usize) -> Result<usize> {
    let mut probe = config.clone();
    probe.ffn_hidden = 1;
    let base = layer_param_count(&probe)? as f64;
    // each hidden unit adds an input column, a bias and an output row
    let per_unit = (2 * config.dim + 1) as f64;
    let hidden = ((target as f64 - base) / per_unit + 1.0).round();
    Ok(hidden.max(1.0) as usize)
}
