use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{FeatureMap, FeaturePyramid};
use crate::error::{CsdnError, Result};
use crate::geometry::{intersection, BBox, Target};
use crate::rng::{self, DetRng};

/// Generator settings for synthetic scenes and their feature pyramids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of box width and height, as a fraction of the image.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Probability that a new object is placed overlapping an existing
    /// one; otherwise it is placed disjoint from all others.
    pub overlap_rate: f64,
    pub image_size: usize,
    /// Pyramid strides, finest first. The last level is the coarsest.
    pub strides: Vec<usize>,
    /// Per-channel standard deviation of the additive feature noise.
    pub noise_std: f64,
    /// Seed of the class signature vectors; fixed across data seeds so that
    /// every split shares one "backbone".
    pub signature_seed: u64,
    /// Re-render every training scene each epoch with fresh noise and
    /// jittered boxes.
    pub augment: bool,
    /// Largest box shift and relative size change of that jitter, as a
    /// fraction of the box size.
    pub jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 512,
            eval_scenes: 128,
            min_objects: 1,
            max_objects: 8,
            min_scale: 0.08,
            max_scale: 0.3,
            overlap_rate: 0.3,
            image_size: 256,
            strides: vec![8, 16, 32],
            noise_std: 0.3,
            signature_seed: 7,
            augment: true,
            jitter: 0.05,
        }
    }
}

pub const MAX_OBJECTS: usize = 20;

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CsdnError::Config(format!("data: {m}")));
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return fail("need 1 <= min_objects <= max_objects <= 20");
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale < 1.0) {
            return fail("need 0 < min_scale <= max_scale < 1");
        }
        if !(0.0..=1.0).contains(&self.overlap_rate) {
            return fail("overlap_rate must lie in [0, 1]");
        }
        if self.strides.is_empty() || self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return fail("strides must be non-empty and strictly increasing");
        }
        if self
            .strides
            .iter()
            .any(|&s| s == 0 || !self.image_size.is_multiple_of(s))
        {
            return fail("every stride must divide image_size");
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return fail("noise_std must be non-negative");
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return fail("jitter must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// Objects of one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Target>,
    pub image_size: usize,
    pub seed: u64,
}

const PLACEMENT_TRIES: usize = 200;

/// Draws a scene from `rng::seeded(seed)`. With `overlap_rate == 0` all boxes
/// are pairwise disjoint; objects that cannot be placed after a bounded
/// number of attempts are skipped, but a scene always has at least one.
pub fn gen_scene(seed: u64, cfg: &DataConfig, num_classes: usize) -> Result<Scene> {
    cfg.validate()?;
    if num_classes == 0 {
        return Err(CsdnError::Config("num_classes must be positive".into()));
    }
    let mut r = rng::seeded(seed);
    let count = r.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<Target> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = r.gen_range(0..num_classes);
        let w = r.gen_range(cfg.min_scale..=cfg.max_scale);
        let h = r.gen_range(cfg.min_scale..=cfg.max_scale);
        let overlap = !objects.is_empty() && r.gen_bool(cfg.overlap_rate);
        if let Some(bbox) = place(&mut r, w, h, &objects, overlap) {
            objects.push(Target::new(bbox, class_id));
        }
    }
    debug_assert!(!objects.is_empty());
    Ok(Scene {
        objects,
        image_size: cfg.image_size,
        seed,
    })
}

fn place(r: &mut DetRng, w: f64, h: f64, others: &[Target], overlap: bool) -> Option<BBox> {
    let inside = |r: &mut DetRng| {
        BBox::new(
            r.gen_range(w / 2.0..=1.0 - w / 2.0),
            r.gen_range(h / 2.0..=1.0 - h / 2.0),
            w,
            h,
        )
    };
    if overlap {
        // center inside a random existing box, clamped to the image
        let anchor = others[r.gen_range(0..others.len())].bbox;
        let cx = (anchor.cx + r.gen_range(-0.5..0.5) * anchor.w).clamp(w / 2.0, 1.0 - w / 2.0);
        let cy = (anchor.cy + r.gen_range(-0.5..0.5) * anchor.h).clamp(h / 2.0, 1.0 - h / 2.0);
        return Some(BBox::new(cx, cy, w, h));
    }
    if others.is_empty() {
        return Some(inside(r));
    }
    (0..PLACEMENT_TRIES)
        .map(|_| inside(r))
        .find(|b| others.iter().all(|o| intersection(*b, o.bbox) == 0.0))
}

/// View of a training scene for one epoch: each box moves by up to
/// `amount` of its size and is rescaled by up to `1 +- amount`, and the
/// scene gets a fresh noise seed. Deterministic in `(scene.seed, epoch)`.
pub fn jitter_scene(scene: &Scene, amount: f64, epoch: u64) -> Scene {
    let mut r = rng::stream(scene.seed, 2000 + epoch);
    let objects = scene
        .objects
        .iter()
        .map(|o| {
            let b = o.bbox;
            let w = (b.w * (1.0 + r.gen_range(-amount..=amount))).min(1.0);
            let h = (b.h * (1.0 + r.gen_range(-amount..=amount))).min(1.0);
            let cx = (b.cx + r.gen_range(-amount..=amount) * b.w).clamp(w / 2.0, 1.0 - w / 2.0);
            let cy = (b.cy + r.gen_range(-amount..=amount) * b.h).clamp(h / 2.0, 1.0 - h / 2.0);
            Target::new(BBox::new(cx, cy, w, h), o.class_id)
        })
        .collect();
    Scene {
        objects,
        image_size: scene.image_size,
        seed: r.gen(),
    }
}

/// Fixed per-class signature vectors of norm `sqrt(dim)`.
pub fn class_signatures(seed: u64, num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 7);
    (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x * (dim as f64).sqrt() / norm).collect()
        })
        .collect()
}

/// Stand-in for a backbone + neck: every object is rendered on every level
/// as its class signature times an anisotropic Gaussian whose spread is a
/// quarter of the box size (at least half a cell), plus seeded noise.
pub fn synth_features(scene: &Scene, cfg: &DataConfig, signatures: &[Vec<f64>]) -> Result<FeaturePyramid> {
    let dim = signatures.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(CsdnError::Config("empty class signatures".into()));
    }
    let mut noise = rng::stream(scene.seed, 11);
    let mut levels = Vec::with_capacity(cfg.strides.len());
    for &stride in &cfg.strides {
        let size = cfg.image_size / stride;
        let mut map = FeatureMap::zeros(size, size, dim, stride);
        let cell = 1.0 / size as f64;
        for obj in &scene.objects {
            let b = obj.bbox;
            let sx = (b.w / 4.0).max(0.5 * cell);
            let sy = (b.h / 4.0).max(0.5 * cell);
            let sig = &signatures[obj.class_id];
            // beyond 4 sigma the profile is below 3.4e-4; skip those cells
            let c0 = (((b.cx - 4.0 * sx) / cell).floor().max(0.0)) as usize;
            let c1 = (((b.cx + 4.0 * sx) / cell).ceil() as usize).min(size);
            let r0 = (((b.cy - 4.0 * sy) / cell).floor().max(0.0)) as usize;
            let r1 = (((b.cy + 4.0 * sy) / cell).ceil() as usize).min(size);
            for row in r0..r1 {
                let v = (row as f64 + 0.5) * cell;
                let gy = ((v - b.cy) / sy).powi(2);
                for col in c0..c1 {
                    let u = (col as f64 + 0.5) * cell;
                    let g = (-0.5 * (((u - b.cx) / sx).powi(2) + gy)).exp();
                    for (a, s) in map.at_mut(row, col).iter_mut().zip(sig) {
                        *a += g * s;
                    }
                }
            }
        }
        if cfg.noise_std > 0.0 {
            for a in map.data_mut() {
                *a += cfg.noise_std * rng::normal(&mut noise);
            }
        }
        levels.push(map);
    }
    FeaturePyramid::new(levels)
}
