//! Finite-difference verification of every hand-written backward pass, from
//! single ops up to the full head under the detection loss.

use rand::Rng;

use crate::attention::{
    bilinear_sample, bilinear_sample_backward, gated_fusion, gated_fusion_backward, AttentionBranch, BlockAttention,
    BranchInput, DeformableAttention, FeatureMap, FeaturePyramid, NeighborAttention, SelfAttention,
};
use crate::error::Result;
use crate::geometry::{giou_with_grad, neighbor_mask, BBox, Target};
use crate::head::{CsdnHead, HeadConfig, Topology};
use crate::rng::{self, DetRng};
use crate::tensor::{
    central_difference, gelu, gelu_backward, grad_check, layer_norm, layer_norm_backward, linear, linear_backward,
    masked_softmax, masked_softmax_backward, matmul, matmul_backward, GradCheckReport, GradStore, Mask, ParamId,
    ParamStore, Tensor,
};
use crate::training::{detection_loss, focal_loss, hungarian_match, match_cost, LossWeights};

/// Result of one grad-checked objective.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn uniform(r: &mut DetRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(lo..hi)).collect()).expect("sized")
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_boxes(r: &mut DetRng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            BBox::new(
                r.gen_range(0.3..0.7),
                r.gen_range(0.3..0.7),
                r.gen_range(0.15..0.45),
                r.gen_range(0.15..0.45),
            )
        })
        .collect()
}

fn boxes_param(store: &mut ParamStore, boxes: &[BBox]) -> ParamId {
    let flat = boxes.iter().flat_map(|b| b.to_array()).collect();
    store.add("input.boxes", Tensor::matrix(boxes.len(), 4, flat).expect("sized"))
}

fn read_boxes(store: &ParamStore, id: ParamId) -> Vec<BBox> {
    let t = store.value(id);
    (0..t.rows())
        .map(|i| BBox::from_array(t.row(i).try_into().expect("4 columns")))
        .collect()
}

fn random_pyramid(r: &mut DetRng, dim: usize) -> FeaturePyramid {
    let mut map = |size: usize, stride: usize| {
        FeatureMap::new(
            size,
            size,
            dim,
            stride,
            (0..size * size * dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .expect("sized")
    };
    FeaturePyramid::new(vec![map(6, 8), map(3, 16)]).expect("consistent levels")
}

fn check_matmul(r: &mut DetRng, eps: f64) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let a = s.add("a", uniform(r, 3, 4, -1.0, 1.0));
    let b = s.add("b", uniform(r, 4, 5, -1.0, 1.0));
    let probe = uniform(r, 3, 5, -1.0, 1.0);
    grad_check(
        |s, g| {
            let c = matmul(s.value(a), s.value(b))?;
            if let Some(g) = g {
                let (da, db) = matmul_backward(s.value(a), s.value(b), &probe)?;
                g.accumulate(a, da.data());
                g.accumulate(b, db.data());
            }
            Ok(inner(c.data(), probe.data()))
        },
        &mut s,
        eps,
    )
}

fn check_linear(r: &mut DetRng, eps: f64) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(r, 4, 3, -1.0, 1.0));
    let w = s.add("w", uniform(r, 3, 5, -1.0, 1.0));
    let b = s.add(
        "b",
        Tensor::new(vec![5], (0..5).map(|_| r.gen_range(-1.0..1.0)).collect())?,
    );
    let probe = uniform(r, 4, 5, -1.0, 1.0);
    grad_check(
        |s, g| {
            let y = linear(s.value(x), s.value(w), s.value(b))?;
            if let Some(g) = g {
                let (dx, dw, db) = linear_backward(s.value(x), s.value(w), &probe)?;
                g.accumulate(x, dx.data());
                g.accumulate(w, dw.data());
                g.accumulate(b, db.data());
            }
            Ok(inner(y.data(), probe.data()))
        },
        &mut s,
        eps,
    )
}

fn check_softmax(r: &mut DetRng, eps: f64) -> Result<GradCheckReport> {
    let (n, m) = (4, 6);
    let mut mask = Mask::new(n, m, (0..n * m).map(|_| r.gen_bool(0.6)).collect())?;
    for i in 0..n {
        mask.set(i, i, true);
    }
    let mut s = ParamStore::new();
    let logits = s.add("logits", uniform(r, n, m, -3.0, 3.0));
    let probe = uniform(r, n, m, -1.0, 1.0);
    let scale = r.gen_range(0.5..3.0);
    grad_check(
        |s, g| {
            let p = masked_softmax(s.value(logits), &mask, scale)?;
            if let Some(g) = g {
                g.accumulate(logits, masked_softmax_backward(&p, &mask, scale, &probe)?.data());
            }
            Ok(inner(p.data(), probe.data()))
        },
        &mut s,
        eps,
    )
}

fn check_layer_norm(r: &mut DetRng, eps: f64) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(r, 3, 6, -2.0, 2.0));
    let gamma = s.add(
        "gamma",
        Tensor::new(vec![6], (0..6).map(|_| r.gen_range(0.5..1.5)).collect())?,
    );
    let beta = s.add(
        "beta",
        Tensor::new(vec![6], (0..6).map(|_| r.gen_range(-0.5..0.5)).collect())?,
    );
    let probe = uniform(r, 3, 6, -1.0, 1.0);
    grad_check(
        |s, g| {
            let (y, cache) = layer_norm(s.value(x), s.value(gamma), s.value(beta))?;
            if let Some(g) = g {
                let (dx, dg, db) = layer_norm_backward(&cache, s.value(gamma), &probe);
                g.accumulate(x, dx.data());
                g.accumulate(gamma, &dg);
                g.accumulate(beta, &db);
            }
            Ok(inner(y.data(), probe.data()))
        },
        &mut s,
        eps,
    )
}

fn check_gelu(r: &mut DetRng, eps: f64) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(r, 4, 4, -4.0, 4.0));
    let probe = uniform(r, 4, 4, -1.0, 1.0);
    grad_check(
        |s, g| {
            let y = gelu(s.value(x));
            if let Some(g) = g {
                g.accumulate(x, gelu_backward(s.value(x), &probe).data());
            }
            Ok(inner(y.data(), probe.data()))
        },
        &mut s,
        eps,
    )
}

/// Map values and sampling locations, including locations that straddle
/// the zero-padded border.
fn check_bilinear(r: &mut DetRng, eps: f64) -> Result<GradCheckReport> {
    let (h, w, c) = (3, 4, 2);
    let mut s = ParamStore::new();
    let map_id = s.add("map", uniform(r, h * w, c, -1.0, 1.0));
    let loc = s.add(
        "loc",
        Tensor::matrix(
            5,
            2,
            (0..5)
                .flat_map(|_| [r.gen_range(-0.9..w as f64 - 0.1), r.gen_range(-0.9..h as f64 - 0.1)])
                .collect(),
        )?,
    );
    let probe = uniform(r, 5, c, -1.0, 1.0);
    grad_check(
        |s, g| {
            let map = FeatureMap::new(h, w, c, 1, s.value(map_id).data().to_vec())?;
            let mut total = 0.0;
            let mut dmap = vec![0.0; h * w * c];
            let mut dloc = vec![0.0; 10];
            for i in 0..5 {
                let (x, y) = (s.value(loc).at(i, 0), s.value(loc).at(i, 1));
                total += inner(&bilinear_sample(&map, x, y), probe.row(i));
                let bg = bilinear_sample_backward(&map, x, y, probe.row(i));
                for (a, b) in dmap.iter_mut().zip(&bg.dmap) {
                    *a += b;
                }
                dloc[2 * i] = bg.dx;
                dloc[2 * i + 1] = bg.dy;
            }
            if let Some(g) = g {
                g.accumulate(map_id, &dmap);
                g.accumulate(loc, &dloc);
            }
            Ok(total)
        },
        &mut s,
        eps,
    )
}

fn check_giou(r: &mut DetRng, eps: f64) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    // redraw pairs with nearly aligned edges, where giou has a kink
    let (mut boxes, mut targets) = (Vec::new(), Vec::new());
    while boxes.len() < 3 {
        let (b, t) = (random_boxes(r, 1)[0], random_boxes(r, 1)[0]);
        let (cb, ct) = (b.to_corners(), t.to_corners());
        let edges = [cb.x1, cb.y1, cb.x2, cb.y2, ct.x1, ct.y1, ct.x2, ct.y2];
        let xs = [edges[0], edges[2], edges[4], edges[6]];
        let ys = [edges[1], edges[3], edges[5], edges[7]];
        let apart = |v: [f64; 4]| (0..4).all(|i| (0..i).all(|j| (v[i] - v[j]).abs() > 1e-3));
        if apart(xs) && apart(ys) {
            boxes.push(b);
            targets.push(t);
        }
    }
    let id = boxes_param(&mut s, &boxes);
    grad_check(
        |s, g| {
            let mut total = 0.0;
            let mut d = Vec::new();
            for (b, t) in read_boxes(s, id).into_iter().zip(&targets) {
                let (v, grad) = giou_with_grad(b, *t);
                total += v;
                d.extend(grad);
            }
            if let Some(g) = g {
                g.accumulate(id, &d);
            }
            Ok(total)
        },
        &mut s,
        eps,
    )
}

fn check_focal(r: &mut DetRng, eps: f64) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let logits = s.add("logits", uniform(r, 5, 3, -4.0, 4.0));
    let targets: Vec<Option<usize>> = (0..5).map(|i| (i % 2 == 0).then(|| r.gen_range(0..3))).collect();
    grad_check(
        |s, g| {
            let (loss, d) = focal_loss(s.value(logits), &targets, 0.25, 2.0)?;
            if let Some(g) = g {
                g.accumulate(logits, d.data());
            }
            Ok(loss)
        },
        &mut s,
        eps,
    )
}

fn check_fusion(r: &mut DetRng, eps: f64) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let logits = s.add("logits", uniform(r, 4, 3, -2.0, 2.0));
    let outs: Vec<ParamId> = (0..3)
        .map(|k| s.add(format!("out{k}"), uniform(r, 4, 5, -1.0, 1.0)))
        .collect();
    let probe = uniform(r, 4, 5, -1.0, 1.0);
    grad_check(
        |s, g| {
            let o: [Option<&Tensor>; 3] = std::array::from_fn(|k| Some(s.value(outs[k])));
            let (fused, weights) = gated_fusion(s.value(logits), &o)?;
            if let Some(g) = g {
                let (dl, douts) = gated_fusion_backward(&weights, &o, &probe);
                g.accumulate(logits, dl.data());
                for (id, d) in outs.iter().zip(douts) {
                    g.accumulate(*id, d.expect("all slots active").data());
                }
            }
            Ok(inner(fused.data(), probe.data()))
        },
        &mut s,
        eps,
    )
}

/// `<branch(x, boxes), probe>` over the branch parameters, the queries and
/// their boxes.
fn check_branch(
    r: &mut DetRng,
    eps: f64,
    build: impl Fn(&mut ParamStore, &mut DetRng) -> Result<Box<dyn AttentionBranch>>,
) -> Result<GradCheckReport> {
    let (n, d) = (4, 8);
    let mut s = ParamStore::new();
    let branch = build(&mut s, r)?;
    for p in s.params_mut() {
        for v in p.value.data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    let pyr = random_pyramid(r, d);
    let x = s.add("input.x", uniform(r, n, d, -1.0, 1.0));
    let b = boxes_param(&mut s, &random_boxes(r, n));
    let probe = uniform(r, n, d, -1.0, 1.0);
    grad_check(
        |s, g| {
            let boxes = read_boxes(s, b);
            let mask = neighbor_mask(&boxes);
            let input = BranchInput {
                x: s.value(x),
                boxes: &boxes,
                mask: &mask,
                pyramid: &pyr,
            };
            let (out, cache) = branch.forward(s, &input)?;
            if let Some(g) = g {
                let bg = branch.backward(s, &input, &cache, &probe, g)?;
                g.accumulate(x, bg.dx.data());
                if let Some(db) = bg.dboxes {
                    g.accumulate(b, &db.concat());
                }
            }
            Ok(inner(out.data(), probe.data()))
        },
        &mut s,
        eps,
    )
}

/// Toy-sized head of the given topology under the full deep-supervised
/// detection loss, with each layer's assignment frozen at the base point.
pub fn check_head(topology: &Topology, layers: usize, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let cfg = HeadConfig {
        num_layers: layers,
        num_queries: 4,
        dim: 8,
        heads: 2,
        num_classes: 3,
        ffn_hidden: 16,
        topology: topology.clone(),
        points: 2,
        num_levels: 2,
        detach_boxes: false,
        init_box_size: 0.3,
        ..HeadConfig::default()
    };
    let (head, base) = CsdnHead::new(&cfg, seed)?;
    let w = LossWeights::default();
    // Redraw the point while the loss has a kink within reach of `eps` (a
    // sampling location on a grid line, aligned box edges). The screen looks
    // at loss values only, never at the analytic gradient.
    for attempt in 0..KINK_REDRAWS {
        let mut store = base.clone();
        let mut r = rng::stream(seed, 31 + attempt);
        for p in store.params_mut() {
            let boxes = p.name == "query_boxes";
            for v in p.value.data_mut() {
                *v = if boxes {
                    *v + r.gen_range(-0.3..0.3)
                } else {
                    r.gen_range(-0.5..0.5)
                };
            }
        }
        let pyr = random_pyramid(&mut r, cfg.dim);
        let gts: Vec<Target> = random_boxes(&mut r, 2)
            .into_iter()
            .map(|b| Target::new(b, r.gen_range(0..3)))
            .collect();
        let (out, _) = head.forward(&store, &pyr)?;
        let frozen = out
            .layers
            .iter()
            .map(|l| hungarian_match(&match_cost(l, &gts, &w)))
            .collect::<Result<Vec<_>>>()?;
        let mut objective = |s: &ParamStore, g: Option<&mut GradStore>| {
            let (out, cache) = head.forward(s, &pyr)?;
            let (loss, upstream, _) = detection_loss(&out, &gts, &w, Some(&frozen))?;
            if let Some(g) = g {
                head.backward(s, &pyr, &cache, &upstream, g)?;
            }
            Ok(loss.total)
        };
        if attempt + 1 < KINK_REDRAWS && !smooth_at(&mut objective, &mut store, eps)? {
            continue;
        }
        return grad_check(objective, &mut store, eps);
    }
    unreachable!("the last attempt always returns")
}

const KINK_REDRAWS: u64 = 8;

/// True when every coordinate's central difference agrees at `eps` and
/// `eps / 4`, i.e. no slope change lies within `eps` of the point.
fn smooth_at<F>(f: &mut F, store: &mut ParamStore, eps: f64) -> Result<bool>
where
    F: FnMut(&ParamStore, Option<&mut GradStore>) -> Result<f64>,
{
    for p in 0..store.len() {
        for i in 0..store.params()[p].value.len() {
            let wide = central_difference(f, store, p, i, eps)?;
            let narrow = central_difference(f, store, p, i, eps / 4.0)?;
            if (wide - narrow).abs() > 1e-6 * wide.abs().max(1.0) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Every case of the suite for one seed.
pub fn grad_suite(seed: u64, eps: f64) -> Result<Vec<GradCase>> {
    type Case = fn(&mut DetRng, f64) -> Result<GradCheckReport>;
    let ops: [(&str, Case); 14] = [
        ("matmul", check_matmul),
        ("linear", check_linear),
        ("masked_softmax", check_softmax),
        ("layer_norm", check_layer_norm),
        ("gelu", check_gelu),
        ("bilinear_sample", check_bilinear),
        ("giou", check_giou),
        ("focal_loss", check_focal),
        ("gated_fusion", check_fusion),
        ("self_attention", |r, e| {
            check_branch(r, e, |s, r| Ok(Box::new(SelfAttention::new(s, "s", 8, 2, r)?)))
        }),
        ("neighbor_attention", |r, e| {
            check_branch(r, e, |s, r| Ok(Box::new(NeighborAttention::new(s, "n", 8, 2, r)?)))
        }),
        ("block_attention", |r, e| {
            check_branch(r, e, |s, r| Ok(Box::new(BlockAttention::new(s, "b", 8, 2, false, r)?)))
        }),
        ("block_attention_pe", |r, e| {
            check_branch(r, e, |s, r| Ok(Box::new(BlockAttention::new(s, "b", 8, 2, true, r)?)))
        }),
        ("deformable_attention", |r, e| {
            check_branch(r, e, |s, r| {
                Ok(Box::new(DeformableAttention::new(s, "d", 8, 2, 2, 2, r)?))
            })
        }),
    ];
    let mut cases = Vec::with_capacity(ops.len() + 1);
    for (i, (name, case)) in ops.iter().enumerate() {
        let mut r = rng::stream(seed, 100 + i as u64);
        cases.push(GradCase {
            name: name.to_string(),
            seed,
            report: case(&mut r, eps)?,
        });
    }
    cases.push(GradCase {
        name: "head n+b+d".into(),
        seed,
        report: check_head(&"n+b+d".parse()?, 1, seed, eps)?,
    });
    Ok(cases)
}
