use super::pyramid::FeatureMap;
use super::{AttentionBranch, BranchCache, BranchGrads, BranchInput, BranchKind};
use crate::error::{CsdnError, Result};
use crate::nn::Linear;
use crate::rng::DetRng;
use crate::tensor::ops::{dot, softmax_row, softmax_row_backward};
use crate::tensor::{GradStore, ParamId, ParamStore, Tensor};

/// The four bilinear corners of a continuous pixel location together with
/// their weights and the weights' derivatives w.r.t. `x` and `y`.
#[derive(Debug, Clone, Copy)]
struct Taps {
    index: [usize; 4],
    valid: [bool; 4],
    weight: [f64; 4],
    dwdx: [f64; 4],
    dwdy: [f64; 4],
}

fn taps(height: usize, width: usize, x: f64, y: f64) -> Taps {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let corners = [(x0, y0), (x0 + 1.0, y0), (x0, y0 + 1.0), (x0 + 1.0, y0 + 1.0)];
    let mut t = Taps {
        index: [0; 4],
        valid: [false; 4],
        weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        dwdx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        dwdy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
    };
    for (c, &(cx, cy)) in corners.iter().enumerate() {
        if cx >= 0.0 && cy >= 0.0 && cx < width as f64 && cy < height as f64 {
            t.valid[c] = true;
            t.index[c] = cy as usize * width + cx as usize;
        }
    }
    t
}

/// Bilinear interpolation of `map` at pixel coordinates `(x, y)` (`x` along
/// the width). Corners outside the map contribute zero.
pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let c = map.channels();
    let t = taps(map.height(), map.width(), x, y);
    let mut out = vec![0.0; c];
    for k in 0..4 {
        if t.valid[k] {
            let src = &map.data()[t.index[k] * c..(t.index[k] + 1) * c];
            for (o, s) in out.iter_mut().zip(src) {
                *o += t.weight[k] * s;
            }
        }
    }
    out
}

/// Gradients of `<dout, bilinear_sample(map, x, y)>`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearGrad {
    pub dmap: Vec<f64>,
    pub dx: f64,
    pub dy: f64,
}

pub fn bilinear_sample_backward(map: &FeatureMap, x: f64, y: f64, dout: &[f64]) -> BilinearGrad {
    let c = map.channels();
    let t = taps(map.height(), map.width(), x, y);
    let mut g = BilinearGrad {
        dmap: vec![0.0; map.data().len()],
        dx: 0.0,
        dy: 0.0,
    };
    for k in 0..4 {
        if t.valid[k] {
            let i = t.index[k] * c;
            let along = dot(&map.data()[i..i + c], dout);
            g.dx += t.dwdx[k] * along;
            g.dy += t.dwdy[k] * along;
            for (d, o) in g.dmap[i..i + c].iter_mut().zip(dout) {
                *d += t.weight[k] * o;
            }
        }
    }
    g
}

/// Multi-scale deformable attention around each query's box.
///
/// For every head, level and point the query predicts a 2-D offset (in
/// units of half the box size, relative to the box center) and an attention
/// logit. Value-projected features are sampled bilinearly at the offset
/// locations and combined with weights normalized over levels x points.
#[derive(Debug, Clone)]
pub struct DeformableAttention {
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub dim: usize,
}

struct DeformCache {
    offsets: Tensor,
    probs: Vec<f64>,
    /// Raw (unprojected) bilinear samples, `[n][heads][levels * points][dim]`.
    sampled: Vec<f64>,
    /// Total in-bounds tap weight of each sample, `[n][heads][levels * points]`.
    coverage: Vec<f64>,
    /// Per query and head: `sum_p a_p * sample_p` and `sum_p a_p * coverage_p`.
    mixed: Vec<f64>,
    mixed_coverage: Vec<f64>,
    concat: Tensor,
}

impl DeformableAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        rng: &mut DetRng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) || levels == 0 || points == 0 {
            return Err(CsdnError::Config(format!(
                "deformable attention: dim {dim}, heads {heads}, levels {levels}, points {points}"
            )));
        }
        // Offsets start from a fixed star pattern: head h looks along angle
        // 2*pi*h/heads, point k at radius (k+1)/points of the half box.
        let n_off = heads * levels * points * 2;
        let mut bias = vec![0.0; n_off];
        for h in 0..heads {
            let theta = 2.0 * std::f64::consts::PI * h as f64 / heads as f64;
            let (s, c) = theta.sin_cos();
            let norm = c.abs().max(s.abs());
            for l in 0..levels {
                for k in 0..points {
                    let r = (k + 1) as f64 / points as f64;
                    let i = ((h * levels + l) * points + k) * 2;
                    bias[i] = c / norm * r;
                    bias[i + 1] = s / norm * r;
                }
            }
        }
        Ok(Self {
            offsets: Linear::with_values(
                store,
                &format!("{name}.offsets"),
                dim,
                n_off,
                vec![0.0; dim * n_off],
                bias,
            ),
            weights: Linear::zeros(store, &format!("{name}.weights"), dim, heads * levels * points),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            levels,
            points,
            dim,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn location(
        &self,
        input: &BranchInput<'_>,
        offsets: &Tensor,
        i: usize,
        h: usize,
        l: usize,
        k: usize,
    ) -> (f64, f64) {
        let b = input.boxes[i];
        let o = ((h * self.levels + l) * self.points + k) * 2;
        let row = offsets.row(i);
        let map = &input.pyramid.levels()[l];
        let u = b.cx + row[o] * 0.5 * b.w;
        let v = b.cy + row[o + 1] * 0.5 * b.h;
        (u * map.width() as f64 - 0.5, v * map.height() as f64 - 0.5)
    }

    fn check(&self, input: &BranchInput<'_>) -> Result<()> {
        if input.pyramid.num_levels() != self.levels || input.pyramid.channels() != self.dim {
            return Err(CsdnError::Shape {
                op: "deformable_attention",
                left: vec![self.levels, self.dim],
                right: vec![input.pyramid.num_levels(), input.pyramid.channels()],
            });
        }
        if input.boxes.len() != input.x.rows() {
            return Err(CsdnError::Shape {
                op: "deformable_attention",
                left: vec![input.x.rows()],
                right: vec![input.boxes.len()],
            });
        }
        Ok(())
    }
}

impl AttentionBranch for DeformableAttention {
    fn kind(&self) -> BranchKind {
        BranchKind::Deformable
    }

    // Sampling is linear, so the value projection is applied once per query
    // and head to the attention-weighted raw samples instead of to every
    // pyramid location. Zero-padded taps drop the projection bias as well,
    // which is what `coverage` tracks.
    fn forward(&self, store: &ParamStore, input: &BranchInput<'_>) -> Result<(Tensor, BranchCache)> {
        self.check(input)?;
        let n = input.x.rows();
        let d = self.dim;
        let dh = self.head_dim();
        let lk = self.levels * self.points;
        let offsets = self.offsets.forward(store, input.x)?;
        let logits = self.weights.forward(store, input.x)?;
        let wv = store.value(self.value.weight).data();
        let bv = store.value(self.value.bias).data();

        let allowed = vec![true; lk];
        let mut probs = vec![0.0; n * self.heads * lk];
        let mut sampled = vec![0.0; n * self.heads * lk * d];
        let mut coverage = vec![0.0; n * self.heads * lk];
        let mut mixed = vec![0.0; n * self.heads * d];
        let mut mixed_coverage = vec![0.0; n * self.heads];
        let mut concat = vec![0.0; n * d];
        for i in 0..n {
            for h in 0..self.heads {
                let ih = i * self.heads + h;
                let base = ih * lk;
                softmax_row(
                    &logits.row(i)[h * lk..(h + 1) * lk],
                    &allowed,
                    1.0,
                    &mut probs[base..base + lk],
                )
                .map_err(|e| e.at_row(i, "deformable attention"))?;
                let mix = &mut mixed[ih * d..(ih + 1) * d];
                for l in 0..self.levels {
                    let map = &input.pyramid.levels()[l];
                    let feats = map.data();
                    for k in 0..self.points {
                        let p = base + l * self.points + k;
                        let (x, y) = self.location(input, &offsets, i, h, l, k);
                        let t = taps(map.height(), map.width(), x, y);
                        let s = &mut sampled[p * d..(p + 1) * d];
                        for c in 0..4 {
                            if t.valid[c] {
                                coverage[p] += t.weight[c];
                                let src = &feats[t.index[c] * d..(t.index[c] + 1) * d];
                                for (a, v) in s.iter_mut().zip(src) {
                                    *a += t.weight[c] * v;
                                }
                            }
                        }
                        let a = probs[p];
                        mixed_coverage[ih] += a * coverage[p];
                        for (m, v) in mix.iter_mut().zip(s.iter()) {
                            *m += a * v;
                        }
                    }
                }
                let out = &mut concat[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, o) in out.iter_mut().enumerate() {
                    let col = h * dh + j;
                    let mut acc = mixed_coverage[ih] * bv[col];
                    for (r, m) in mix.iter().enumerate() {
                        acc += m * wv[r * d + col];
                    }
                    *o = acc;
                }
            }
        }
        let concat = Tensor::matrix_unchecked(n, d, concat);
        let output = self.out.forward(store, &concat)?;
        Ok((
            output,
            BranchCache::new(DeformCache {
                offsets,
                probs,
                sampled,
                coverage,
                mixed,
                mixed_coverage,
                concat,
            }),
        ))
    }

    fn backward(
        &self,
        store: &ParamStore,
        input: &BranchInput<'_>,
        cache: &BranchCache,
        dout: &Tensor,
        grads: &mut GradStore,
    ) -> Result<BranchGrads> {
        let cache: &DeformCache = cache.downcast();
        let n = input.x.rows();
        let d = self.dim;
        let dh = self.head_dim();
        let lk = self.levels * self.points;
        let dconcat = self
            .out
            .backward(store, &cache.concat, dout, grads, true)
            .expect("requested");
        let wv = store.value(self.value.weight).data().to_vec();
        let bv = store.value(self.value.bias).data().to_vec();

        let mut dwv = vec![0.0; d * d];
        let mut dbv = vec![0.0; d];
        let mut doffsets = vec![0.0; cache.offsets.len()];
        let mut dlogits = vec![0.0; n * self.heads * lk];
        let mut dboxes = vec![[0.0; 4]; n];
        let allowed = vec![true; lk];
        let mut dprob = vec![0.0; lk];
        let mut dmix = vec![0.0; d];
        let mut ds = vec![0.0; d];
        let off_cols = cache.offsets.cols();
        for i in 0..n {
            let b = input.boxes[i];
            let off = cache.offsets.row(i);
            for h in 0..self.heads {
                let ih = i * self.heads + h;
                let base = ih * lk;
                let g = &dconcat.row(i)[h * dh..(h + 1) * dh];
                let mix = &cache.mixed[ih * d..(ih + 1) * d];
                // projection of the mixed sample onto this head's columns
                for (r, dm) in dmix.iter_mut().enumerate() {
                    let w = &wv[r * d + h * dh..r * d + (h + 1) * dh];
                    *dm = dot(w, g);
                    let m = mix[r];
                    if m != 0.0 {
                        for (a, gg) in dwv[r * d + h * dh..r * d + (h + 1) * dh].iter_mut().zip(g) {
                            *a += m * gg;
                        }
                    }
                }
                let dcov = dot(&bv[h * dh..(h + 1) * dh], g);
                for (a, gg) in dbv[h * dh..(h + 1) * dh].iter_mut().zip(g) {
                    *a += cache.mixed_coverage[ih] * gg;
                }

                for l in 0..self.levels {
                    let map = &input.pyramid.levels()[l];
                    let feats = map.data();
                    for k in 0..self.points {
                        let p = base + l * self.points + k;
                        let s = &cache.sampled[p * d..(p + 1) * d];
                        dprob[l * self.points + k] = dot(&dmix, s) + dcov * cache.coverage[p];
                        let a = cache.probs[p];
                        for (x, m) in ds.iter_mut().zip(&dmix) {
                            *x = a * m;
                        }
                        let (x, y) = self.location(input, &cache.offsets, i, h, l, k);
                        let t = taps(map.height(), map.width(), x, y);
                        let (mut dx, mut dy) = (0.0, 0.0);
                        for c in 0..4 {
                            if t.valid[c] {
                                let lo = t.index[c] * d;
                                let along = dot(&feats[lo..lo + d], &ds) + a * dcov;
                                dx += t.dwdx[c] * along;
                                dy += t.dwdy[c] * along;
                            }
                        }
                        // pixel coords -> normalized -> offsets and box
                        let du = dx * map.width() as f64;
                        let dv = dy * map.height() as f64;
                        let o = ((h * self.levels + l) * self.points + k) * 2;
                        doffsets[i * off_cols + o] += du * 0.5 * b.w;
                        doffsets[i * off_cols + o + 1] += dv * 0.5 * b.h;
                        dboxes[i][0] += du;
                        dboxes[i][1] += dv;
                        dboxes[i][2] += du * 0.5 * off[o];
                        dboxes[i][3] += dv * 0.5 * off[o + 1];
                    }
                }
                softmax_row_backward(
                    &cache.probs[base..base + lk],
                    &allowed,
                    1.0,
                    &dprob,
                    &mut dlogits[base..base + lk],
                );
            }
        }
        grads.accumulate(self.value.weight, &dwv);
        grads.accumulate(self.value.bias, &dbv);
        let doffsets = Tensor::matrix_unchecked(n, off_cols, doffsets);
        let dlogits = Tensor::matrix_unchecked(n, self.heads * lk, dlogits);
        let mut dx = self
            .offsets
            .backward(store, input.x, &doffsets, grads, true)
            .expect("requested");
        dx.add_assign(
            &self
                .weights
                .backward(store, input.x, &dlogits, grads, true)
                .expect("requested"),
        );
        Ok(BranchGrads {
            dx,
            dboxes: Some(dboxes),
        })
    }

    fn param_ids(&self) -> Vec<ParamId> {
        [self.offsets, self.weights, self.value, self.out]
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}
