use csdn::attention::{BranchKind, FeatureMap, FeaturePyramid};
use csdn::geometry::neighbor_mask;
use csdn::head::{ffn_hidden_for_budget, layer_param_count, CsdnHead, FusionMode, HeadConfig, LayerGrad, Topology};
use csdn::rng::{self, DetRng};
use csdn::tensor::{grad_check, GradStore, ParamStore, Tensor};
use rand::Rng;

fn toy_config(topology: &str, layers: usize) -> HeadConfig {
    HeadConfig {
        num_layers: layers,
        num_queries: 4,
        dim: 8,
        heads: 2,
        num_classes: 3,
        ffn_hidden: 16,
        topology: topology.parse().unwrap(),
        points: 2,
        num_levels: 2,
        init_box_size: 0.3,
        ..HeadConfig::default()
    }
}

fn toy_pyramid(seed: u64) -> FeaturePyramid {
    let mut r = rng::seeded(seed);
    let mut map = |h: usize, s: usize| {
        FeatureMap::new(h, h, 8, s, (0..h * h * 8).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    FeaturePyramid::new(vec![map(6, 8), map(3, 16)]).unwrap()
}

fn randomize(store: &mut ParamStore, r: &mut DetRng) {
    for p in store.params_mut() {
        let keep_boxes = p.name == "query_boxes";
        for v in p.value.data_mut() {
            if keep_boxes {
                *v += r.gen_range(-0.3..0.3);
            } else {
                *v = r.gen_range(-0.5..0.5);
            }
        }
    }
}

#[test]
fn fresh_layer_keeps_boxes() {
    let cfg = toy_config("n+b+d", 3);
    let (head, store) = CsdnHead::new(&cfg, 1).unwrap();
    let q = head.init_queries(&store);
    let (out, _) = head.forward(&store, &toy_pyramid(2)).unwrap();
    for layer in &out.layers {
        for (a, b) in layer.boxes.iter().zip(&q.boxes) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gated_single_branch_equals_stacked() {
    for kind in [BranchKind::Neighbor, BranchKind::Block, BranchKind::Deformable] {
        let mut gated = toy_config("d", 2);
        gated.topology = Topology::new(FusionMode::Gated, vec![kind]).unwrap();
        let mut stacked = gated.clone();
        stacked.topology = Topology::new(FusionMode::Stacked, vec![kind]).unwrap();
        let (hg, mut sg) = CsdnHead::new(&gated, 7).unwrap();
        let (hs, mut ss) = CsdnHead::new(&stacked, 7).unwrap();
        randomize(&mut ss, &mut rng::seeded(3));
        let copied = sg.copy_matching(&ss).unwrap();
        assert_eq!(copied, ss.len());
        // give the (irrelevant) gate nonzero weights as well
        for p in sg.params_mut().iter_mut().filter(|p| p.name.contains(".gate.")) {
            p.value.data_mut().fill(0.7);
        }
        let pyr = toy_pyramid(4);
        let (og, _) = hg.forward(&sg, &pyr).unwrap();
        let (os, _) = hs.forward(&ss, &pyr).unwrap();
        assert_eq!(og.layers, os.layers, "{kind:?}");
    }
}

/// `sum_l <logits_l, R_l> + <boxes_l, S_l>` with fixed random probes.
fn probe_grad_error(cfg: &HeadConfig, seed: u64) -> f64 {
    let (head, mut store) = CsdnHead::new(cfg, seed).unwrap();
    let mut r = rng::seeded(seed + 100);
    randomize(&mut store, &mut r);
    let pyr = toy_pyramid(seed + 200);
    let outputs = cfg.num_layers.max(1);
    let probes: Vec<LayerGrad> = (0..outputs)
        .map(|_| LayerGrad {
            dlogits: Tensor::matrix(4, 3, (0..12).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap(),
            dboxes: (0..4)
                .map(|_| std::array::from_fn(|_| r.gen_range(-1.0..1.0)))
                .collect(),
        })
        .collect();
    let f = |s: &ParamStore, g: Option<&mut GradStore>| {
        let (out, cache) = head.forward(s, &pyr)?;
        let mut loss = 0.0;
        for (o, p) in out.layers.iter().zip(&probes) {
            loss += o
                .logits
                .data()
                .iter()
                .zip(p.dlogits.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
            for (b, d) in o.boxes.iter().zip(&p.dboxes) {
                loss += b.to_array().iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if let Some(g) = g {
            head.backward(s, &pyr, &cache, &probes, g)?;
        }
        Ok(loss)
    };
    let report = grad_check(f, &mut store, 1e-5).unwrap();
    report.max_rel_error
}

#[test]
fn full_layer_passes_grad_check() {
    let mut cfg = toy_config("n+b+d", 1);
    cfg.detach_boxes = false;
    let err = probe_grad_error(&cfg, 11);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn stacked_two_layer_head_passes_grad_check() {
    let mut cfg = toy_config("s-d", 2);
    cfg.detach_boxes = false;
    let err = probe_grad_error(&cfg, 12);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn zero_layer_head_passes_grad_check() {
    let err = probe_grad_error(&toy_config("n+b+d", 0), 13);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn zero_layers_reports_initial_queries() {
    let cfg = toy_config("n+b+d", 0);
    let (head, store) = CsdnHead::new(&cfg, 5).unwrap();
    let (out, _) = head.forward(&store, &toy_pyramid(1)).unwrap();
    assert_eq!(out.layers.len(), 1);
    assert_eq!(out.final_layer().boxes, head.init_queries(&store).boxes);
}

#[test]
fn forward_is_bit_reproducible() {
    let cfg = toy_config("n+b+d", 3);
    let run = || {
        let (head, store) = CsdnHead::new(&cfg, 9).unwrap();
        head.forward(&store, &toy_pyramid(3)).unwrap().0
    };
    assert_eq!(run(), run());
}

#[test]
fn depth_changes_param_count_by_whole_layers() {
    for topo in ["s-d", "n+b+d"] {
        let count = |l| {
            let (head, store) = CsdnHead::new(&toy_config(topo, l), 0).unwrap();
            head.num_params(&store)
        };
        let per_layer = layer_param_count(&toy_config(topo, 1)).unwrap();
        assert_eq!(count(6) - count(2), 4 * per_layer);
    }
}

#[test]
fn budget_helper_matches_target() {
    let reference = HeadConfig::default();
    let target = layer_param_count(&reference).unwrap();
    for topo in csdn::head::ABLATION_TOPOLOGIES {
        let mut cfg = HeadConfig {
            topology: topo.parse().unwrap(),
            ..HeadConfig::default()
        };
        cfg.ffn_hidden = ffn_hidden_for_budget(&cfg, target).unwrap();
        let got = layer_param_count(&cfg).unwrap() as f64;
        assert!((got / target as f64 - 1.0).abs() < 0.01, "{topo}: {got} vs {target}");
    }
}

#[test]
fn permuting_queries_permutes_outputs() {
    let cfg = toy_config("n+b+d", 2);
    let (head, mut store) = CsdnHead::new(&cfg, 21).unwrap();
    randomize(&mut store, &mut rng::seeded(22));
    let pyr = toy_pyramid(23);
    let (base, _) = head.forward(&store, &pyr).unwrap();
    let perm = [2usize, 0, 3, 1];
    let mut permuted = store.clone();
    for id in [head.query_embed, head.query_boxes] {
        let src = store.value(id).clone();
        let dst = permuted.value_mut(id);
        for (i, &p) in perm.iter().enumerate() {
            dst.row_mut(i).copy_from_slice(src.row(p));
        }
    }
    let (out, _) = head.forward(&permuted, &pyr).unwrap();
    for (a, b) in base.layers.iter().zip(&out.layers) {
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((b.logits.at(i, c) - a.logits.at(p, c)).abs() < 1e-10);
            }
            for (x, y) in b.boxes[i].to_array().iter().zip(a.boxes[p].to_array()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn masks_stay_well_formed_and_boxes_decode_in_range() {
    let cfg = toy_config("n+b+d", 4);
    let (head, mut store) = CsdnHead::new(&cfg, 31).unwrap();
    randomize(&mut store, &mut rng::seeded(32));
    let (out, cache) = head.forward(&store, &toy_pyramid(33)).unwrap();
    for c in cache.layer_caches() {
        assert!(c.mask().is_well_formed());
    }
    for l in &out.layers {
        assert!(neighbor_mask(&l.boxes).is_well_formed());
        for b in &l.boxes {
            for v in b.to_array() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
    for g in out.gates.iter().flatten() {
        for i in 0..4 {
            assert!((g.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn single_query_is_well_formed() {
    let cfg = HeadConfig {
        num_queries: 1,
        ..toy_config("n+b+d", 2)
    };
    let (head, store) = CsdnHead::new(&cfg, 3).unwrap();
    let (out, _) = head.forward(&store, &toy_pyramid(4)).unwrap();
    assert_eq!(out.final_layer().boxes.len(), 1);
    assert!(out.final_layer().logits.is_finite());
}

#[test]
fn pyramid_mismatch_is_rejected() {
    let cfg = HeadConfig {
        num_levels: 3,
        ..toy_config("d", 1)
    };
    let (head, store) = CsdnHead::new(&cfg, 3).unwrap();
    assert!(head.forward(&store, &toy_pyramid(4)).is_err());
}
