use csdn::attention::{
    AttentionBranch, BlockAttention, BranchInput, DeformableAttention, FeatureMap, FeaturePyramid, NeighborAttention,
    SelfAttention,
};
use csdn::geometry::{neighbor_mask, BBox, NeighborMask};
use csdn::rng::{self, DetRng};
use csdn::tensor::{grad_check, GradStore, Mask, ParamId, ParamStore, Tensor};
use rand::Rng;

fn random_tensor(rows: usize, cols: usize, r: &mut DetRng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_map(h: usize, w: usize, c: usize, stride: usize, r: &mut DetRng) -> FeatureMap {
    FeatureMap::new(
        h,
        w,
        c,
        stride,
        (0..h * w * c).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn randomize(store: &mut ParamStore, scale: f64, r: &mut DetRng) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

/// `x W + b` for one row using the named parameters.
fn affine(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.value(store.find(&format!("{name}.weight")).unwrap());
    let b = store.value(store.find(&format!("{name}.bias")).unwrap());
    let (din, dout) = (w.rows(), w.cols());
    assert_eq!(din, x.len());
    (0..dout)
        .map(|j| b.data()[j] + (0..din).map(|k| x[k] * w.at(k, j)).sum::<f64>())
        .collect()
}

/// Straight multi-head attention: one query row against explicit key/value
/// rows, summing only over `allowed` positions.
fn reference_mha(
    store: &ParamStore,
    name: &str,
    heads: usize,
    q_in: &[f64],
    kv_in: &[Vec<f64>],
    k_extra: &[Vec<f64>],
    allowed: &[bool],
) -> Vec<f64> {
    let q = affine(store, &format!("{name}.q"), q_in);
    let keys: Vec<Vec<f64>> = kv_in
        .iter()
        .zip(k_extra)
        .map(|(x, e)| {
            let xk: Vec<f64> = x.iter().zip(e).map(|(a, b)| a + b).collect();
            affine(store, &format!("{name}.k"), &xk)
        })
        .collect();
    let vals: Vec<Vec<f64>> = kv_in.iter().map(|x| affine(store, &format!("{name}.v"), x)).collect();
    let d = q.len();
    let dh = d / heads;
    let mut concat = vec![0.0; d];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let scores: Vec<Option<f64>> = keys
            .iter()
            .zip(allowed)
            .map(|(k, &a)| {
                a.then(|| q[r.clone()].iter().zip(&k[r.clone()]).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt())
            })
            .collect();
        let m = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().flatten().map(|s| (s - m).exp()).sum();
        for (j, s) in scores.iter().enumerate() {
            if let Some(s) = s {
                let p = (s - m).exp() / z;
                for c in r.clone() {
                    concat[c] += p * vals[j][c];
                }
            }
        }
    }
    affine(store, &format!("{name}.out"), &concat)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn single_level(map: FeatureMap) -> FeaturePyramid {
    FeaturePyramid::new(vec![map]).unwrap()
}

fn boxes_of(n: usize, r: &mut DetRng) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            BBox::new(
                r.gen_range(0.25..0.75),
                r.gen_range(0.25..0.75),
                r.gen_range(0.1..0.4),
                r.gen_range(0.1..0.4),
            )
        })
        .collect()
}

#[test]
fn block_single_location_returns_its_value_projection() {
    let mut r = rng::seeded(1);
    let mut store = ParamStore::new();
    let b = BlockAttention::new(&mut store, "b", 8, 2, false, &mut r).unwrap();
    randomize(&mut store, 0.5, &mut r);
    let pyr = single_level(random_map(1, 1, 8, 32, &mut r));
    let x = random_tensor(3, 8, &mut r);
    let boxes = boxes_of(3, &mut r);
    let mask = NeighborMask::full(3);
    let (out, _) = b
        .forward(
            &store,
            &BranchInput {
                x: &x,
                boxes: &boxes,
                mask: &mask,
                pyramid: &pyr,
            },
        )
        .unwrap();
    let v = affine(&store, "b.v", pyr.top().at(0, 0));
    let want = affine(&store, "b.out", &v);
    for i in 0..3 {
        for (a, w) in out.row(i).iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }
}

#[test]
fn block_identical_locations_ignore_query_content() {
    let mut r = rng::seeded(2);
    let mut store = ParamStore::new();
    let b = BlockAttention::new(&mut store, "b", 8, 2, false, &mut r).unwrap();
    randomize(&mut store, 0.5, &mut r);
    let cell: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let data: Vec<f64> = (0..4).flat_map(|_| cell.clone()).collect();
    let pyr = single_level(FeatureMap::new(2, 2, 8, 32, data).unwrap());
    let x = random_tensor(4, 8, &mut r);
    let boxes = boxes_of(4, &mut r);
    let mask = NeighborMask::full(4);
    let (out, _) = b
        .forward(
            &store,
            &BranchInput {
                x: &x,
                boxes: &boxes,
                mask: &mask,
                pyramid: &pyr,
            },
        )
        .unwrap();
    for i in 1..4 {
        for j in 0..8 {
            assert!((out.at(i, j) - out.at(0, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn block_matches_reference_loop() {
    for pe in [false, true] {
        let mut r = rng::seeded(3);
        let mut store = ParamStore::new();
        let b = BlockAttention::new(&mut store, "b", 8, 2, pe, &mut r).unwrap();
        randomize(&mut store, 0.7, &mut r);
        let map = random_map(2, 2, 8, 32, &mut r);
        let pyr = single_level(map.clone());
        let x = random_tensor(2, 8, &mut r);
        let boxes = boxes_of(2, &mut r);
        let mask = NeighborMask::full(2);
        let (out, _) = b
            .forward(
                &store,
                &BranchInput {
                    x: &x,
                    boxes: &boxes,
                    mask: &mask,
                    pyramid: &pyr,
                },
            )
            .unwrap();
        let locs = rows(&map.flatten());
        let extra = if pe {
            rows(&csdn::attention::sine_position_encoding(2, 2, 8))
        } else {
            vec![vec![0.0; 8]; 4]
        };
        for i in 0..2 {
            let want = reference_mha(&store, "b", 2, x.row(i), &locs, &extra, &[true; 4]);
            for (a, w) in out.row(i).iter().zip(&want) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn block_permutation_invariance_depends_on_position_encoding() {
    for pe in [false, true] {
        let mut r = rng::seeded(4);
        let mut store = ParamStore::new();
        let b = BlockAttention::new(&mut store, "b", 8, 2, pe, &mut r).unwrap();
        randomize(&mut store, 0.7, &mut r);
        let map = random_map(3, 3, 8, 32, &mut r);
        // reverse the order of the 9 spatial locations
        let mut flipped = map.clone();
        for l in 0..9 {
            let src = map.at(l / 3, l % 3).to_vec();
            flipped.at_mut((8 - l) / 3, (8 - l) % 3).copy_from_slice(&src);
        }
        let x = random_tensor(3, 8, &mut r);
        let boxes = boxes_of(3, &mut r);
        let mask = NeighborMask::full(3);
        let run = |m: FeatureMap| {
            let p = single_level(m);
            b.forward(
                &store,
                &BranchInput {
                    x: &x,
                    boxes: &boxes,
                    mask: &mask,
                    pyramid: &p,
                },
            )
            .unwrap()
            .0
        };
        let diff = run(map).max_abs_diff(&run(flipped));
        if pe {
            assert!(diff > 1e-6, "position encoding should break invariance");
        } else {
            assert!(diff < 1e-12);
        }
    }
}

#[test]
fn neighbor_with_full_mask_equals_self_attention() {
    let mut r = rng::seeded(5);
    let mut store = ParamStore::new();
    let n = NeighborAttention::new(&mut store, "a", 8, 2, &mut r).unwrap();
    // same parameter ids, so both kernels read identical weights
    let s = SelfAttention { mha: n.mha };
    randomize(&mut store, 0.7, &mut r);
    let pyr = single_level(random_map(1, 1, 8, 32, &mut r));
    let x = random_tensor(5, 8, &mut r);
    let boxes = boxes_of(5, &mut r);
    let full = NeighborMask::full(5);
    let input = BranchInput {
        x: &x,
        boxes: &boxes,
        mask: &full,
        pyramid: &pyr,
    };
    let (a, _) = n.forward(&store, &input).unwrap();
    let (b, _) = s.forward(&store, &input).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-12);
}

#[test]
fn neighbor_identity_mask_projects_own_value() {
    let mut r = rng::seeded(6);
    let mut store = ParamStore::new();
    let n = NeighborAttention::new(&mut store, "a", 8, 4, &mut r).unwrap();
    randomize(&mut store, 0.7, &mut r);
    let pyr = single_level(random_map(1, 1, 8, 32, &mut r));
    let x = random_tensor(3, 8, &mut r);
    let boxes = boxes_of(3, &mut r);
    let mask = NeighborMask::from_mask(Mask::identity(3)).unwrap();
    let (out, _) = n
        .forward(
            &store,
            &BranchInput {
                x: &x,
                boxes: &boxes,
                mask: &mask,
                pyramid: &pyr,
            },
        )
        .unwrap();
    for i in 0..3 {
        let want = affine(&store, "a.out", &affine(&store, "a.v", x.row(i)));
        for (a, w) in out.row(i).iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }
}

#[test]
fn neighbor_chain_matches_reference_loop() {
    let mut r = rng::seeded(7);
    let mut store = ParamStore::new();
    let n = NeighborAttention::new(&mut store, "a", 8, 2, &mut r).unwrap();
    randomize(&mut store, 0.7, &mut r);
    // four boxes along a line, each overlapping only its direct neighbors
    let boxes: Vec<BBox> = (0..4)
        .map(|i| BBox::new(0.2 + 0.15 * i as f64, 0.5, 0.2, 0.2))
        .collect();
    let mask = neighbor_mask(&boxes);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(mask.allowed(i, j), (i as i64 - j as i64).abs() <= 1);
        }
    }
    let pyr = single_level(random_map(1, 1, 8, 32, &mut r));
    let x = random_tensor(4, 8, &mut r);
    let (out, _) = n
        .forward(
            &store,
            &BranchInput {
                x: &x,
                boxes: &boxes,
                mask: &mask,
                pyramid: &pyr,
            },
        )
        .unwrap();
    let xs = rows(&x);
    for i in 0..4 {
        let allowed: Vec<bool> = (0..4).map(|j| mask.allowed(i, j)).collect();
        let want = reference_mha(&store, "a", 2, x.row(i), &xs, &vec![vec![0.0; 8]; 4], &allowed);
        for (a, w) in out.row(i).iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }
}

#[test]
fn deformable_zero_offsets_on_grid_point_read_that_cell() {
    let mut r = rng::seeded(8);
    let mut store = ParamStore::new();
    let d = DeformableAttention::new(&mut store, "d", 8, 2, 1, 3, &mut r).unwrap();
    // zero offsets everywhere, uniform weights (zero logits)
    let bias = d.offsets.bias;
    store.value_mut(bias).data_mut().fill(0.0);
    let map = random_map(4, 4, 8, 8, &mut r);
    let pyr = single_level(map.clone());
    // pixel (col 2, row 1) has continuous coordinate ((2 + 0.5) / 4, (1 + 0.5) / 4)
    let boxes = vec![BBox::new(2.5 / 4.0, 1.5 / 4.0, 0.3, 0.2)];
    let x = random_tensor(1, 8, &mut r);
    let mask = NeighborMask::full(1);
    let (out, _) = d
        .forward(
            &store,
            &BranchInput {
                x: &x,
                boxes: &boxes,
                mask: &mask,
                pyramid: &pyr,
            },
        )
        .unwrap();
    let want = affine(&store, "d.out", &affine(&store, "d.value", map.at(1, 2)));
    for (a, w) in out.row(0).iter().zip(&want) {
        assert!((a - w).abs() < 1e-12);
    }
}

#[test]
fn deformable_constant_map_ignores_offsets_and_weights() {
    let mut r = rng::seeded(9);
    let mut store = ParamStore::new();
    let d = DeformableAttention::new(&mut store, "d", 8, 2, 2, 2, &mut r).unwrap();
    randomize(&mut store, 0.3, &mut r);
    let cell: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let const_map =
        |h: usize, s: usize| FeatureMap::new(h, h, 8, s, (0..h * h).flat_map(|_| cell.clone()).collect()).unwrap();
    let pyr = FeaturePyramid::new(vec![const_map(8, 8), const_map(4, 16)]).unwrap();
    // boxes well inside so every sample stays in bounds
    let boxes = vec![BBox::new(0.5, 0.5, 0.1, 0.1), BBox::new(0.45, 0.55, 0.08, 0.12)];
    let x = random_tensor(2, 8, &mut r);
    let mask = NeighborMask::full(2);
    let (out, _) = d
        .forward(
            &store,
            &BranchInput {
                x: &x,
                boxes: &boxes,
                mask: &mask,
                pyramid: &pyr,
            },
        )
        .unwrap();
    let want = affine(&store, "d.out", &affine(&store, "d.value", &cell));
    for i in 0..2 {
        for (a, w) in out.row(i).iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }
}

fn bilinear_reference(map: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let (x0, y0) = (x.floor(), y.floor());
    let mut out = vec![0.0; map.channels()];
    for (cx, cy) in [(x0, y0), (x0 + 1.0, y0), (x0, y0 + 1.0), (x0 + 1.0, y0 + 1.0)] {
        let w = (1.0 - (x - cx).abs()) * (1.0 - (y - cy).abs());
        if cx < 0.0 || cy < 0.0 || cx >= map.width() as f64 || cy >= map.height() as f64 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(map.at(cy as usize, cx as usize)) {
            *o += w * v;
        }
    }
    out
}

#[test]
fn deformable_matches_reference_loop() {
    let mut r = rng::seeded(10);
    let mut store = ParamStore::new();
    let (dim, heads, k) = (4, 2, 2);
    let d = DeformableAttention::new(&mut store, "d", dim, heads, 1, k, &mut r).unwrap();
    randomize(&mut store, 0.8, &mut r);
    let map = random_map(3, 3, dim, 8, &mut r);
    let pyr = single_level(map.clone());
    let b = BBox::new(0.4, 0.6, 0.5, 0.7);
    let x = random_tensor(1, dim, &mut r);
    let mask = NeighborMask::full(1);
    let (out, _) = d
        .forward(
            &store,
            &BranchInput {
                x: &x,
                boxes: &[b],
                mask: &mask,
                pyramid: &pyr,
            },
        )
        .unwrap();

    let off = affine(&store, "d.offsets", x.row(0));
    let logits = affine(&store, "d.weights", x.row(0));
    let dh = dim / heads;
    let mut concat = vec![0.0; dim];
    for h in 0..heads {
        let l = &logits[h * k..(h + 1) * k];
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
        for p in 0..k {
            let a = (l[p] - m).exp() / z;
            let u = b.cx + off[(h * k + p) * 2] * b.w / 2.0;
            let v = b.cy + off[(h * k + p) * 2 + 1] * b.h / 2.0;
            let (px, py) = (u * 3.0 - 0.5, v * 3.0 - 0.5);
            // explicit bilinear weights over the value-projected map
            let (x0, y0) = (px.floor(), py.floor());
            for (cx, cy) in [(x0, y0), (x0 + 1.0, y0), (x0, y0 + 1.0), (x0 + 1.0, y0 + 1.0)] {
                if cx < 0.0 || cy < 0.0 || cx >= 3.0 || cy >= 3.0 {
                    continue;
                }
                let w = (1.0 - (px - cx).abs()) * (1.0 - (py - cy).abs());
                let vs = affine(&store, "d.value", map.at(cy as usize, cx as usize));
                for c in h * dh..(h + 1) * dh {
                    concat[c] += a * w * vs[c];
                }
            }
        }
    }
    let want = affine(&store, "d.out", &concat);
    for (a, w) in out.row(0).iter().zip(&want) {
        assert!((a - w).abs() < 1e-12, "{a} vs {w}");
    }
}

#[test]
fn bilinear_sample_matches_explicit_formula() {
    let mut r = rng::seeded(11);
    let map = random_map(4, 5, 3, 8, &mut r);
    for _ in 0..200 {
        let (x, y) = (r.gen_range(-1.5..5.5), r.gen_range(-1.5..4.5));
        let got = csdn::attention::bilinear_sample(&map, x, y);
        for (a, w) in got.iter().zip(bilinear_reference(&map, x, y)) {
            assert!((a - w).abs() < 1e-14);
        }
    }
}

/// Grad-checks `<branch(x, boxes), probe>` over the branch parameters, the
/// query embeddings and the boxes.
fn branch_grad_error(
    branch: &dyn AttentionBranch,
    mut store: ParamStore,
    pyr: &FeaturePyramid,
    n: usize,
    r: &mut DetRng,
) -> f64 {
    let d = pyr.channels();
    let xid = store.add("input.x", random_tensor(n, d, r));
    let flat: Vec<f64> = boxes_of(n, r).iter().flat_map(|b| b.to_array()).collect();
    let bid = store.add("input.boxes", Tensor::matrix(n, 4, flat).unwrap());
    let probe = random_tensor(n, d, r);
    let f = |s: &ParamStore, g: Option<&mut GradStore>| {
        let x = s.value(xid).clone();
        let boxes: Vec<BBox> = (0..n)
            .map(|i| {
                let b = s.value(bid).row(i);
                BBox::new(b[0], b[1], b[2], b[3])
            })
            .collect();
        let mask = neighbor_mask(&boxes);
        let input = BranchInput {
            x: &x,
            boxes: &boxes,
            mask: &mask,
            pyramid: pyr,
        };
        let (out, cache) = branch.forward(s, &input)?;
        let loss: f64 = out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        if let Some(g) = g {
            let bg = branch.backward(s, &input, &cache, &probe, g)?;
            g.accumulate(xid, bg.dx.data());
            if let Some(db) = bg.dboxes {
                let flat: Vec<f64> = db.iter().flatten().cloned().collect();
                g.accumulate(bid, &flat);
            }
        }
        Ok(loss)
    };
    let report = grad_check(f, &mut store, 1e-6).unwrap();
    assert!(report.coordinates > 0);
    report.max_rel_error
}

fn two_level_pyramid(d: usize, r: &mut DetRng) -> FeaturePyramid {
    FeaturePyramid::new(vec![random_map(6, 6, d, 8, r), random_map(3, 3, d, 16, r)]).unwrap()
}

#[test]
fn branches_pass_grad_check() {
    let mut r = rng::seeded(12);
    let pyr = two_level_pyramid(8, &mut r);
    type Builder = Box<dyn Fn(&mut ParamStore, &mut DetRng) -> Box<dyn AttentionBranch>>;
    let builders: Vec<Builder> = vec![
        Box::new(|s, r| Box::new(SelfAttention::new(s, "s", 8, 2, r).unwrap())),
        Box::new(|s, r| Box::new(NeighborAttention::new(s, "n", 8, 2, r).unwrap())),
        Box::new(|s, r| Box::new(BlockAttention::new(s, "b", 8, 2, true, r).unwrap())),
        Box::new(|s, r| Box::new(DeformableAttention::new(s, "d", 8, 2, 2, 2, r).unwrap())),
    ];
    for build in builders {
        let mut store = ParamStore::new();
        let branch = build(&mut store, &mut r);
        randomize(&mut store, 0.5, &mut r);
        let err = branch_grad_error(branch.as_ref(), store, &pyr, 4, &mut r);
        assert!(err < 1e-4, "{:?}: {err}", branch.kind());
    }
}

#[test]
fn deformable_reports_box_gradients() {
    let mut r = rng::seeded(13);
    let pyr = two_level_pyramid(4, &mut r);
    let mut store = ParamStore::new();
    let d = DeformableAttention::new(&mut store, "d", 4, 1, 2, 3, &mut r).unwrap();
    randomize(&mut store, 0.5, &mut r);
    let x = random_tensor(2, 4, &mut r);
    let boxes = boxes_of(2, &mut r);
    let mask = neighbor_mask(&boxes);
    let input = BranchInput {
        x: &x,
        boxes: &boxes,
        mask: &mask,
        pyramid: &pyr,
    };
    let (out, cache) = d.forward(&store, &input).unwrap();
    let mut g = GradStore::zeros_like(&store);
    let bg = d
        .backward(&store, &input, &cache, &Tensor::full(out.shape(), 1.0), &mut g)
        .unwrap();
    let db = bg.dboxes.expect("deformable reads boxes");
    assert!(db.iter().flatten().any(|v| v.abs() > 1e-8));
    let ids: Vec<ParamId> = d.param_ids();
    assert_eq!(ids.len(), store.len());
}
