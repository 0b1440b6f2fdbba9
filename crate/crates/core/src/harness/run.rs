use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::checkpoint;
use super::config::RunConfig;
use super::dataset::Dataset;
use super::report::{Metrics, Report, ReportKind, RunRow};
use crate::error::{CsdnError, Result};
use crate::evaluation::EvalResult;
use crate::head::{ffn_hidden_for_budget, layer_param_count, CsdnHead, HeadConfig, Topology};
use crate::tensor::ParamStore;
use crate::training::{evaluate_model, train, TrainOutcome};

pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// A trained model and how it got there.
#[derive(Debug)]
pub struct RunResult {
    pub head: CsdnHead,
    pub store: ParamStore,
    pub outcome: TrainOutcome,
}

impl RunResult {
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Builds the splits described by `cfg`.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::generate(&cfg.data, cfg.head.num_classes, cfg.head.dim, cfg.run.data_seed)
}

/// Trains one model. With `out_dir` set, the metric log is written there one
/// record per epoch and the final checkpoint is saved next to it.
pub fn run_training(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let (head, mut store) = CsdnHead::new(&cfg.head, cfg.run.seed)?;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };
    let outcome = train(
        &head,
        &mut store,
        &cfg.train,
        &cfg.optimizer,
        &cfg.loss,
        data,
        &data.eval,
        cfg.run.seed,
        |record| {
            if let Some(w) = log.as_mut() {
                writeln!(w, "{record}")?;
                w.flush()?;
            }
            Ok(())
        },
    )?;
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join(CHECKPOINT_FILE), cfg, &store)?;
    }
    Ok(RunResult { head, store, outcome })
}

/// Post-NMS evaluation of a trained model on the held-out split.
pub fn evaluate_run(cfg: &RunConfig, head: &CsdnHead, store: &ParamStore, data: &Dataset) -> Result<EvalResult> {
    Ok(evaluate_model(
        head,
        store,
        &data.eval,
        cfg.train.conf_threshold,
        cfg.train.iou_threshold,
    )?
    .0)
}

/// `base` with `topology` and a feed-forward width chosen so that one layer
/// has about as many parameters as one layer of `reference`.
pub fn matched_head(base: &HeadConfig, topology: &Topology, reference: &Topology) -> Result<HeadConfig> {
    let target = layer_param_count(&HeadConfig {
        topology: reference.clone(),
        ..base.clone()
    })?;
    let mut cfg = HeadConfig {
        topology: topology.clone(),
        ..base.clone()
    };
    cfg.ffn_hidden = ffn_hidden_for_budget(&cfg, target)?;
    Ok(cfg)
}

fn is_divergence(e: &CsdnError) -> bool {
    matches!(e, CsdnError::Divergence { .. } | CsdnError::NonFinite(_))
}

fn matrix_row(label: String, cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<RunRow> {
    let params = CsdnHead::new(&cfg.head, cfg.run.seed)?.1.num_scalars();
    let row = match run_training(cfg, data, out_dir) {
        Ok(r) => {
            let e = &r.outcome.final_eval;
            RunRow {
                label,
                seed: cfg.run.seed,
                params,
                epochs: r.outcome.history.len(),
                steps: r.outcome.steps,
                result: Ok(Metrics {
                    precision: e.precision,
                    recall: e.recall,
                    map50: e.map50,
                    map5095: e.map5095,
                }),
            }
        }
        Err(e) if is_divergence(&e) => RunRow {
            label,
            seed: cfg.run.seed,
            params,
            epochs: 0,
            steps: match e {
                CsdnError::Divergence { step, .. } => step,
                _ => 0,
            },
            result: Err(e.to_string()),
        },
        Err(e) => return Err(e),
    };
    Ok(row)
}

/// Trains every configured topology for every configured seed on the same
/// data. Parameter counts are matched to the reference topology; a run that
/// diverges becomes a FAILED row instead of aborting the matrix.
pub fn run_ablation(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    let reference: Topology = cfg.ablation.reference.parse()?;
    let heads = cfg
        .ablation
        .topologies
        .iter()
        .map(|t| matched_head(&cfg.head, &t.parse()?, &reference))
        .collect::<Result<Vec<_>>>()?;
    let ref_params = CsdnHead::new(&matched_head(&cfg.head, &reference, &reference)?, 0)?
        .1
        .num_scalars();
    for h in &heads {
        let p = CsdnHead::new(h, 0)?.1.num_scalars();
        let rel = (p as f64 - ref_params as f64).abs() / ref_params as f64;
        if rel > cfg.ablation.param_tolerance {
            return Err(CsdnError::Config(format!(
                "topology {} has {p} parameters, {:.1}% away from the reference {ref_params}",
                h.topology,
                100.0 * rel
            )));
        }
    }
    let mut rows = Vec::new();
    for head in heads {
        for &seed in &cfg.ablation.seeds {
            let mut c = cfg.clone();
            c.head = head.clone();
            c.run.seed = seed;
            let label = head.topology.to_string();
            let dir = out_dir.map(|d| d.join(format!("{label}_seed{seed}")));
            rows.push(matrix_row(label, &c, data, dir.as_deref())?);
        }
    }
    Ok(Report {
        kind: ReportKind::Ablation,
        config: cfg.clone(),
        rows,
    })
}

/// Trains the configured topology at each depth of `sweep.layers`.
pub fn run_layer_sweep(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &layers in &cfg.sweep.layers {
        let mut c = cfg.clone();
        c.head.num_layers = layers;
        let dir = out_dir.map(|d| d.join(format!("layers{layers}")));
        rows.push(matrix_row(layers.to_string(), &c, data, dir.as_deref())?);
    }
    Ok(Report {
        kind: ReportKind::Sweep,
        config: cfg.clone(),
        rows,
    })
}
