use std::borrow::Cow;
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{detection_loss, LossBreakdown, LossWeights};
use super::optim::{adamw_step, AdamW};
use crate::attention::FeaturePyramid;
use crate::error::{CsdnError, Result};
use crate::evaluation::{decode_detections, evaluate, EvalResult};
use crate::geometry::{Target, DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD};
use crate::head::CsdnHead;
use crate::rng;
use crate::tensor::{GradStore, ParamStore};

/// One scene as seen by the head: its feature pyramid and ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub pyramid: FeaturePyramid,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop once the held-out mAP50 reaches this value; 0 disables.
    pub stop_at_map50: f64,
    /// Number of leading training samples whose mean loss is tracked.
    pub probe_samples: usize,
    pub conf_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 8,
            stop_at_map50: 0.0,
            probe_samples: 16,
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CsdnError::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(CsdnError::Config("NMS thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub lr: f64,
    /// Means over the epoch's training samples, summed over layers.
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    /// Mean loss of the probe samples after the epoch.
    pub probe_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map5095: f64,
    /// Mean gate weight per slot (block, neighbor, deformable) over the
    /// evaluation split, final layer; empty for stacked topologies.
    pub gate_mean: Vec<f64>,
}

impl fmt::Display for EpochRecord {
    /// Tab-separated `key=value` pairs; floats use their shortest exact
    /// representation so equal logs mean bit-equal values.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={}\tstep={}\tlr={:?}\tloss={:?}\tloss_cls={:?}\tloss_l1={:?}\tloss_giou={:?}\tprobe_loss={:?}\tprecision={:?}\trecall={:?}\tmap50={:?}\tmap5095={:?}",
            self.epoch,
            self.step,
            self.lr,
            self.loss,
            self.loss_cls,
            self.loss_l1,
            self.loss_giou,
            self.probe_loss,
            self.precision,
            self.recall,
            self.map50,
            self.map5095,
        )?;
        if !self.gate_mean.is_empty() {
            let g: Vec<String> = self.gate_mean.iter().map(|v| format!("{v:?}")).collect();
            write!(f, "\tgate_mean={}", g.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    /// Probe loss before any update.
    pub initial_probe_loss: f64,
    /// Evaluation after the last epoch (or of the untouched model when no
    /// epoch ran).
    pub final_eval: EvalResult,
    /// Whether the `stop_at_map50` target ended training early.
    pub reached_target: bool,
}

/// Training samples, possibly presented differently in every epoch.
pub trait TrainingSet: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample `index` as seen during `epoch` (from 1). Epoch 0 is the
    /// unaugmented sample.
    fn sample(&self, epoch: usize, index: usize) -> Result<Cow<'_, Sample>>;
}

impl TrainingSet for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn sample(&self, _epoch: usize, index: usize) -> Result<Cow<'_, Sample>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_loss_and_grads(
    head: &CsdnHead,
    store: &ParamStore,
    sample: &Sample,
    weights: &LossWeights,
) -> Result<(LossBreakdown, GradStore)> {
    let (out, cache) = head.forward(store, &sample.pyramid)?;
    let (loss, upstream, _) = detection_loss(&out, &sample.targets, weights, None)?;
    let mut grads = GradStore::zeros_like(store);
    head.backward(store, &sample.pyramid, &cache, &upstream, &mut grads)?;
    Ok((loss, grads))
}

fn mean_loss(head: &CsdnHead, store: &ParamStore, samples: &[Sample], weights: &LossWeights) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|s| {
            let (out, _) = head.forward(store, &s.pyramid)?;
            Ok(detection_loss(&out, &s.targets, weights, None)?.0.total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len().max(1) as f64)
}

/// Post-NMS evaluation of the final layer on `samples`; also returns the
/// mean gate weights of the final layer when the topology is gated.
pub fn evaluate_model(
    head: &CsdnHead,
    store: &ParamStore,
    samples: &[Sample],
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<(EvalResult, Vec<f64>)> {
    let per_image = samples
        .par_iter()
        .map(|s| {
            let (out, _) = head.forward(store, &s.pyramid)?;
            let gate = out.gates.last().cloned().flatten().map(|g| g.column_means());
            Ok((
                decode_detections(out.final_layer(), conf_threshold, iou_threshold),
                gate,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gate_sum: Vec<f64> = Vec::new();
    for (_, g) in &per_image {
        if let Some(g) = g {
            gate_sum.resize(g.len(), 0.0);
            for (a, b) in gate_sum.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    for v in &mut gate_sum {
        *v /= samples.len() as f64;
    }
    let dets: Vec<_> = per_image.into_iter().map(|(d, _)| d).collect();
    let gts: Vec<Vec<Target>> = samples.iter().map(|s| s.targets.clone()).collect();
    Ok((evaluate(&dets, &gts, head.config.num_classes), gate_sum))
}

/// Trains `store` in place. Data order, and therefore the result, is fully
/// determined by `seed`; `on_epoch` sees each record as soon as it exists.
#[allow(clippy::too_many_arguments)]
pub fn train(
    head: &CsdnHead,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    opt: &AdamW,
    weights: &LossWeights,
    train_set: &(impl TrainingSet + ?Sized),
    eval_set: &[Sample],
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    opt.validate()?;
    weights.validate()?;
    if train_set.is_empty() {
        return Err(CsdnError::InvalidArgument("empty training set".into()));
    }
    let probe = (0..cfg.probe_samples.clamp(1, train_set.len()))
        .map(|i| train_set.sample(0, i).map(Cow::into_owned))
        .collect::<Result<Vec<_>>>()?;
    let initial_probe_loss = mean_loss(head, store, &probe, weights)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut reached_target = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(seed, 1000 + epoch as u64));
        let mut totals = LossBreakdown::default();
        let mut lr = opt.lr_at(step);
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| sample_loss_and_grads(head, store, &*train_set.sample(epoch, i)?, weights))
                .collect::<Vec<Result<_>>>();
            let mut grads = GradStore::zeros_like(store);
            for r in results {
                let (loss, g) = r.map_err(|e| match e {
                    CsdnError::NonFinite(what) => CsdnError::Divergence {
                        step,
                        reason: format!("non-finite {what}"),
                    },
                    other => other,
                })?;
                totals.total += loss.total;
                totals.cls += loss.cls;
                totals.l1 += loss.l1;
                totals.giou += loss.giou;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if opt.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > opt.grad_clip {
                    grads.scale(opt.grad_clip / norm);
                }
            }
            lr = opt.lr_at(step);
            adamw_step(store, &grads, opt, lr, step)?;
            step += 1;
        }
        let n = train_set.len() as f64;
        let (eval, gate_mean) = evaluate_model(head, store, eval_set, cfg.conf_threshold, cfg.iou_threshold)?;
        let record = EpochRecord {
            epoch,
            step,
            lr,
            loss: totals.total / n,
            loss_cls: totals.cls / n,
            loss_l1: totals.l1 / n,
            loss_giou: totals.giou / n,
            probe_loss: mean_loss(head, store, &probe, weights)?,
            precision: eval.precision,
            recall: eval.recall,
            map50: eval.map50,
            map5095: eval.map5095,
            gate_mean,
        };
        on_epoch(&record)?;
        history.push(record);
        if cfg.stop_at_map50 > 0.0 && eval.map50 >= cfg.stop_at_map50 {
            reached_target = true;
            break;
        }
    }
    let final_eval = evaluate_model(head, store, eval_set, cfg.conf_threshold, cfg.iou_threshold)?.0;
    Ok(TrainOutcome {
        history,
        steps: step,
        initial_probe_loss,
        final_eval,
        reached_target,
    })
}
