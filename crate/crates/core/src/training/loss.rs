use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian_match, Assignment};
use crate::error::{CsdnError, Result};
use crate::geometry::{giou, giou_with_grad, Target};
use crate::head::{HeadOutput, LayerGrad, LayerOutput};
use crate::tensor::ops::{log_sigmoid, sigmoid};
use crate::tensor::Tensor;

/// Coefficients shared by the matching cost and the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.cls, self.l1, self.giou]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
            && (0.0..=1.0).contains(&self.focal_alpha)
            && self.focal_gamma >= 0.0
            && self.focal_gamma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(CsdnError::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Unweighted components of one layer's loss and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LayerLoss {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    /// Sum of the layer totals.
    pub total: f64,
    /// Component sums over layers.
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub layers: Vec<LayerLoss>,
}

/// Per-element focal loss and its derivative w.r.t. the logit.
fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let logp = log_sigmoid(x);
        let q = 1.0 - p;
        let w = q.powf(gamma);
        (-alpha * w * logp, alpha * w * (gamma * p * logp - q))
    } else {
        let log1mp = log_sigmoid(-x);
        let w = p.powf(gamma);
        (
            -(1.0 - alpha) * w * log1mp,
            (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log1mp),
        )
    }
}

/// Sigmoid focal loss over all `N x C` logits. `targets[i]` is the class of
/// the ground truth matched to prediction `i` (`None` for background). The
/// sum is divided by `max(1, num_matched)`. Returns the loss and its
/// gradient w.r.t. the logits.
pub fn focal_loss(logits: &Tensor, targets: &[Option<usize>], alpha: f64, gamma: f64) -> Result<(f64, Tensor)> {
    if !(0.0..=1.0).contains(&alpha) || gamma < 0.0 {
        return Err(CsdnError::InvalidArgument(format!(
            "focal alpha {alpha}, gamma {gamma}"
        )));
    }
    let (n, c) = (logits.rows(), logits.cols());
    if targets.len() != n {
        return Err(CsdnError::Shape {
            op: "focal_loss",
            left: vec![n],
            right: vec![targets.len()],
        });
    }
    let norm = targets.iter().flatten().count().max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; n * c];
    for i in 0..n {
        for k in 0..c {
            let (l, g) = focal_term(logits.at(i, k), targets[i] == Some(k), alpha, gamma);
            total += l;
            grad[i * c + k] = g / norm;
        }
    }
    Ok((total / norm, Tensor::matrix(n, c, grad)?))
}

/// `cost[i][j]` of assigning prediction `i` to ground truth `j`.
pub fn match_cost(pred: &LayerOutput, gts: &[Target], w: &LossWeights) -> Vec<Vec<f64>> {
    let (alpha, gamma) = (w.focal_alpha, w.focal_gamma);
    (0..pred.boxes.len())
        .map(|i| {
            gts.iter()
                .map(|gt| {
                    let x = pred.logits.at(i, gt.class_id);
                    let p = sigmoid(x);
                    let pos = alpha * (1.0 - p).powf(gamma) * -log_sigmoid(x);
                    let neg = (1.0 - alpha) * p.powf(gamma) * -log_sigmoid(-x);
                    let b = pred.boxes[i].to_array();
                    let g = gt.bbox.to_array();
                    let l1: f64 = b.iter().zip(g).map(|(a, b)| (a - b).abs()).sum();
                    w.cls * (pos - neg) + w.l1 * l1 + w.giou * (1.0 - giou(pred.boxes[i], gt.bbox))
                })
                .collect()
        })
        .collect()
}

/// Loss and gradient of one layer under a given assignment.
pub fn layer_loss(
    pred: &LayerOutput,
    gts: &[Target],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<(LayerLoss, LayerGrad)> {
    let n = pred.boxes.len();
    let mut classes = vec![None; n];
    for &(p, g) in &assignment.pairs {
        classes[p] = Some(gts[g].class_id);
    }
    let (cls, mut dlogits) = focal_loss(&pred.logits, &classes, w.focal_alpha, w.focal_gamma)?;
    for v in dlogits.data_mut() {
        *v *= w.cls;
    }
    let norm = assignment.pairs.len().max(1) as f64;
    let mut l1 = 0.0;
    let mut giou_loss = 0.0;
    let mut dboxes = vec![[0.0; 4]; n];
    for &(p, g) in &assignment.pairs {
        let b = pred.boxes[p].to_array();
        let t = gts[g].bbox.to_array();
        for c in 0..4 {
            let diff = b[c] - t[c];
            l1 += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            dboxes[p][c] += w.l1 * sign / norm;
        }
        let (gv, gg) = giou_with_grad(pred.boxes[p], gts[g].bbox);
        giou_loss += 1.0 - gv;
        for c in 0..4 {
            dboxes[p][c] -= w.giou * gg[c] / norm;
        }
    }
    let l1 = l1 / norm;
    let giou_loss = giou_loss / norm;
    Ok((
        LayerLoss {
            total: w.cls * cls + w.l1 * l1 + w.giou * giou_loss,
            cls,
            l1,
            giou: giou_loss,
        },
        LayerGrad { dlogits, dboxes },
    ))
}

/// Deep-supervised loss over every layer of `output`. Each layer is matched
/// on its own unless `frozen` supplies the assignments.
pub fn detection_loss(
    output: &HeadOutput,
    gts: &[Target],
    w: &LossWeights,
    frozen: Option<&[Assignment]>,
) -> Result<(LossBreakdown, Vec<LayerGrad>, Vec<Assignment>)> {
    let mut breakdown = LossBreakdown::default();
    let mut grads = Vec::with_capacity(output.layers.len());
    let mut assignments = Vec::with_capacity(output.layers.len());
    for (l, pred) in output.layers.iter().enumerate() {
        let a = match frozen {
            Some(f) => f
                .get(l)
                .cloned()
                .ok_or_else(|| CsdnError::InvalidArgument(format!("no frozen assignment for layer {l}")))?,
            None => hungarian_match(&match_cost(pred, gts, w))?,
        };
        let (loss, grad) = layer_loss(pred, gts, &a, w)?;
        breakdown.total += loss.total;
        breakdown.cls += loss.cls;
        breakdown.l1 += loss.l1;
        breakdown.giou += loss.giou;
        breakdown.layers.push(loss);
        grads.push(grad);
        assignments.push(a);
    }
    if !breakdown.total.is_finite() {
        return Err(CsdnError::NonFinite("detection loss".into()));
    }
    Ok((breakdown, grads, assignments))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_reduces_to_half_bce() {
        let logits = Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let targets = [Some(0), None];
        let (l, _) = focal_loss(&logits, &targets, 0.5, 0.0).unwrap();
        let bce = |x: f64, y: f64| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        };
        let want = 0.5 * (bce(0.3, 1.0) + bce(-1.2, 0.0) + bce(2.0, 0.0) + bce(0.0, 0.0));
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_have_vanishing_loss() {
        let logits = Tensor::matrix(1, 3, vec![40.0, -40.0, -40.0]).unwrap();
        let (l, _) = focal_loss(&logits, &[Some(0)], 0.25, 2.0).unwrap();
        assert!(l < 1e-15);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let xs = [-3.0, -0.7, 0.0, 0.4, 2.5];
        for &x in &xs {
            for pos in [true, false] {
                let (_, g) = focal_term(x, pos, 0.25, 2.0);
                let e = 1e-6;
                let num = (focal_term(x + e, pos, 0.25, 2.0).0 - focal_term(x - e, pos, 0.25, 2.0).0) / (2.0 * e);
                assert!((g - num).abs() < 1e-8, "x={x} pos={pos}");
            }
        }
    }

    #[test]
    fn bad_focal_parameters_rejected() {
        let logits = Tensor::zeros(&[1, 1]);
        assert!(focal_loss(&logits, &[None], 1.5, 2.0).is_err());
        assert!(focal_loss(&logits, &[None], 0.5, -1.0).is_err());
    }
}
