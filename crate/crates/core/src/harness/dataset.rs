use std::borrow::Cow;

use rayon::prelude::*;

use super::scene::{class_signatures, gen_scene, jitter_scene, synth_features, DataConfig, Scene};
use crate::error::Result;
use crate::rng;
use crate::training::{Sample, TrainingSet};

/// Train and held-out splits rendered from one data seed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    /// Scenes behind `train`, kept for per-epoch augmentation.
    pub train_scenes: Vec<Scene>,
    config: DataConfig,
    signatures: Vec<Vec<f64>>,
}

fn scene_seed(data_seed: u64, split: u64, index: usize) -> u64 {
    use rand::RngCore;
    rng::stream(data_seed, (split << 32) | index as u64).next_u64()
}

fn render(scene: &Scene, cfg: &DataConfig, signatures: &[Vec<f64>]) -> Result<Sample> {
    Ok(Sample {
        pyramid: synth_features(scene, cfg, signatures)?,
        targets: scene.objects.clone(),
    })
}

fn split(
    cfg: &DataConfig,
    signatures: &[Vec<f64>],
    data_seed: u64,
    split: u64,
    count: usize,
) -> Result<(Vec<Scene>, Vec<Sample>)> {
    let num_classes = signatures.len();
    let scenes = (0..count)
        .into_par_iter()
        .map(|i| gen_scene(scene_seed(data_seed, split, i), cfg, num_classes))
        .collect::<Result<Vec<_>>>()?;
    let samples = scenes
        .par_iter()
        .map(|s| render(s, cfg, signatures))
        .collect::<Result<_>>()?;
    Ok((scenes, samples))
}

impl Dataset {
    /// Renders both splits; scene seeds of the two splits never collide.
    pub fn generate(cfg: &DataConfig, num_classes: usize, dim: usize, data_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let signatures = class_signatures(cfg.signature_seed, num_classes, dim);
        let (train_scenes, train) = split(cfg, &signatures, data_seed, 1, cfg.train_scenes)?;
        let (_, eval) = split(cfg, &signatures, data_seed, 2, cfg.eval_scenes)?;
        Ok(Self {
            train,
            eval,
            train_scenes,
            config: cfg.clone(),
            signatures,
        })
    }
}

/// The training split as the trainer sees it: augmented per epoch when the
/// data config asks for it.
impl TrainingSet for Dataset {
    fn len(&self) -> usize {
        self.train.len()
    }

    fn sample(&self, epoch: usize, index: usize) -> Result<Cow<'_, Sample>> {
        if epoch == 0 || !self.config.augment {
            return Ok(Cow::Borrowed(&self.train[index]));
        }
        let scene = jitter_scene(&self.train_scenes[index], self.config.jitter, epoch as u64);
        Ok(Cow::Owned(render(&scene, &self.config, &self.signatures)?))
    }
}
