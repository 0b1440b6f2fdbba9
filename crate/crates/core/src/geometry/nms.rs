use super::{iou, BBox};

/// Harness defaults for post-processing.
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.6;

/// One decoded prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
    /// Per-class probabilities the confidence was taken from (may be empty).
    pub class_probs: Vec<f64>,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, confidence: f64) -> Self {
        Self {
            bbox,
            class_id,
            confidence,
            class_probs: Vec::new(),
        }
    }
}

/// Class-aware greedy non-maximum suppression.
///
/// Detections below `conf_threshold` are dropped. The rest are visited in
/// descending confidence (ties: lower input index first); a detection is kept
/// unless it overlaps an already kept detection of the same class with IoU
/// above `iou_threshold`.
pub fn nms(dets: &[Detection], conf_threshold: f64, iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence >= conf_threshold)
        .collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class_id == dets[i].class_id && iou(dets[k].bbox, dets[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_keep_the_most_confident() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let dets = vec![Detection::new(b, 1, 0.8), Detection::new(b, 1, 0.9)];
        let out = nms(&dets, DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);
    }

    #[test]
    fn other_classes_are_not_suppressed_and_threshold_applies() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let dets = vec![
            Detection::new(b, 0, 0.9),
            Detection::new(b, 1, 0.7),
            Detection::new(b, 2, 0.2),
        ];
        let out = nms(&dets, 0.25, 0.6);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].class_id, 1);
    }

    #[test]
    fn ties_resolve_by_input_index() {
        let dets = vec![
            Detection::new(BBox::new(0.2, 0.2, 0.1, 0.1), 0, 0.5),
            Detection::new(BBox::new(0.8, 0.8, 0.1, 0.1), 0, 0.5),
        ];
        let out = nms(&dets, 0.25, 0.6);
        assert_eq!(out[0].bbox, dets[0].bbox);
        assert_eq!(out[1].bbox, dets[1].bbox);
    }
}
