//! Precision, recall and COCO-style mean average precision.

use std::cmp::Ordering;

use serde::Serialize;

use crate::geometry::{iou, nms, Detection, Target};
use crate::head::LayerOutput;
use crate::tensor::ops::sigmoid;

/// IoU thresholds 0.50, 0.55, .., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| 0.5 + 0.05 * k as f64)
}

/// Number of recall points of the interpolated precision envelope.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_dets: usize,
    /// `None` when the class has neither ground truth nor detections.
    pub ap50: Option<f64>,
    pub ap5095: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map5095: f64,
    pub per_class: Vec<ClassAp>,
}

/// Deterministic detection order: confidence descending, then box and class,
/// so that the result does not depend on input order.
fn det_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy matching of detections (already sorted by descending confidence)
/// to ground truths. Each detection takes the unmatched same-class ground
/// truth of highest IoU (lowest index on ties) if that IoU reaches
/// `iou_threshold`. Returns one true-positive flag per detection.
pub fn match_detections(dets: &[Detection], gts: &[Target], iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class_id != d.class_id {
                    continue;
                }
                let v = iou(d.bbox, g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= iou_threshold => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP of scored true/false-positive flags.
///
/// Detections with equal confidence form one operating point, so the value
/// does not depend on their order. `None` when there is neither ground truth
/// nor detection; `0` when there are detections but no ground truth.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return (!scored.is_empty()).then_some(0.0);
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // (recall, precision) after each confidence group
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, &(conf, is_tp)) in sorted.iter().enumerate() {
        tp += usize::from(is_tp);
        let last_of_group = sorted.get(k + 1).is_none_or(|n| n.0 != conf);
        if last_of_group {
            points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
        }
    }
    // precision envelope: max precision at any recall >= r
    let mut envelope = vec![0.0; points.len()];
    let mut running: f64 = 0.0;
    for k in (0..points.len()).rev() {
        running = running.max(points[k].1);
        envelope[k] = running;
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < points.len() && points[k].0 < level - 1e-12 {
            k += 1;
        }
        if k < points.len() {
            sum += envelope[k];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Scores post-NMS detections against ground truth, image by image.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<Target>], num_classes: usize) -> EvalResult {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let thresholds = coco_thresholds();
    let sorted: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| {
            let mut d = d.clone();
            d.sort_by(det_order);
            d
        })
        .collect();

    let mut num_gt = vec![0usize; num_classes];
    for g in gts.iter().flatten() {
        num_gt[g.class_id] += 1;
    }
    let mut num_dets = vec![0usize; num_classes];
    for d in sorted.iter().flatten() {
        num_dets[d.class_id] += 1;
    }

    // scored[t][class] -> (confidence, tp)
    let mut scored = vec![vec![Vec::new(); num_classes]; thresholds.len()];
    let mut tp50 = 0usize;
    for (d, g) in sorted.iter().zip(gts) {
        for (t, &thr) in thresholds.iter().enumerate() {
            let flags = match_detections(d, g, thr);
            if t == 0 {
                tp50 += flags.iter().filter(|&&f| f).count();
            }
            for (det, f) in d.iter().zip(flags) {
                scored[t][det.class_id].push((det.confidence, f));
            }
        }
    }

    let per_class: Vec<ClassAp> = (0..num_classes)
        .map(|c| {
            let aps: Vec<Option<f64>> = (0..thresholds.len())
                .map(|t| average_precision(&scored[t][c], num_gt[c]))
                .collect();
            let ap5095 = aps[0].map(|_| aps.iter().flatten().sum::<f64>() / thresholds.len() as f64);
            ClassAp {
                class_id: c,
                num_gt: num_gt[c],
                num_dets: num_dets[c],
                ap50: aps[0],
                ap5095,
            }
        })
        .collect();

    let mean = |f: fn(&ClassAp) -> Option<f64>| {
        let v: Vec<f64> = per_class.iter().filter_map(f).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let total_dets: usize = num_dets.iter().sum();
    let total_gt: usize = num_gt.iter().sum();
    EvalResult {
        precision: if total_dets == 0 {
            0.0
        } else {
            tp50 as f64 / total_dets as f64
        },
        recall: if total_gt == 0 {
            0.0
        } else {
            tp50 as f64 / total_gt as f64
        },
        map50: mean(|c| c.ap50),
        map5095: mean(|c| c.ap5095),
        per_class,
    }
}

/// Turns one layer's predictions into post-NMS detections: each query
/// reports its most probable class with the sigmoid probability as
/// confidence.
pub fn decode_detections(pred: &LayerOutput, conf_threshold: f64, iou_threshold: f64) -> Vec<Detection> {
    let dets: Vec<Detection> = (0..pred.boxes.len())
        .map(|i| {
            let probs: Vec<f64> = pred.logits.row(i).iter().map(|&x| sigmoid(x)).collect();
            let (class_id, &confidence) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            Detection {
                bbox: pred.boxes[i],
                class_id,
                confidence,
                class_probs: probs,
            }
        })
        .collect();
    nms(&dets, conf_threshold, iou_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn b(cx: f64) -> BBox {
        BBox::new(cx, 0.5, 0.1, 0.1)
    }

    #[test]
    fn perfect_and_duplicate_matches() {
        let gts = vec![Target::new(b(0.2), 0), Target::new(b(0.6), 1)];
        let dets = vec![Detection::new(b(0.2), 0, 0.9), Detection::new(b(0.6), 1, 0.8)];
        assert_eq!(match_detections(&dets, &gts, 0.5), vec![true, true]);
        let dup = vec![Detection::new(b(0.2), 0, 0.9), Detection::new(b(0.2), 0, 0.7)];
        assert_eq!(match_detections(&dup, &gts, 0.5), vec![true, false]);
    }

    #[test]
    fn trivial_ap_values() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), Some(1.0));
        assert_eq!(average_precision(&[(0.9, false), (0.8, false)], 2), Some(0.0));
        assert_eq!(average_precision(&[(0.9, false)], 0), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[], 3), Some(0.0));
    }

    #[test]
    fn interleaved_staircase() {
        // TP FP TP FP TP with 4 GT:
        // recall .25 .25 .5 .5 .75, precision 1 .5 .667 .5 .6
        let s = [(0.9, true), (0.8, false), (0.7, true), (0.6, false), (0.5, true)];
        // envelope: r <= .25 -> 1, (.25, .5] -> 2/3, (.5, .75] -> .6, above -> 0
        let want = (26.0 + 25.0 * 2.0 / 3.0 + 25.0 * 0.6) / 101.0;
        assert!((average_precision(&s, 4).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn empty_detections_score_zero() {
        let r = evaluate(&[vec![]], &[vec![Target::new(b(0.5), 0)]], 2);
        assert_eq!((r.precision, r.recall, r.map50, r.map5095), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn exact_detections_score_one() {
        let gts = vec![
            vec![Target::new(b(0.2), 0), Target::new(b(0.7), 1)],
            vec![Target::new(b(0.4), 1)],
        ];
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|t| Detection::new(t.bbox, t.class_id, 1.0)).collect())
            .collect();
        let r = evaluate(&dets, &gts, 3);
        assert_eq!((r.precision, r.recall, r.map50, r.map5095), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.per_class[2].ap50, None);
    }
}
