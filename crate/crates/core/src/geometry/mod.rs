//! Box algebra: IoU/GIoU, the IoU>0 neighbor relation, format conversion and
//! class-aware NMS.

mod nms;

pub use nms::{nms, Detection, DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD};

use serde::{Deserialize, Serialize};

use crate::tensor::Mask;

/// Axis-aligned box in normalized center form.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// A ground-truth object: box and class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub bbox: BBox,
    pub class_id: usize,
}

impl Target {
    pub const fn new(bbox: BBox, class_id: usize) -> Self {
        Self { bbox, class_id }
    }
}

/// Corner form `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_corners(self) -> Corners {
        Corners {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn from_corners(c: Corners) -> Self {
        Self {
            cx: 0.5 * (c.x1 + c.x2),
            cy: 0.5 * (c.y1 + c.y2),
            w: c.x2 - c.x1,
            h: c.y2 - c.y1,
        }
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_valid(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    /// Clamp into the unit square (used only when decoding predictions).
    pub fn clamped(self) -> Self {
        let c = self.to_corners();
        Self::from_corners(Corners {
            x1: c.x1.clamp(0.0, 1.0),
            y1: c.y1.clamp(0.0, 1.0),
            x2: c.x2.clamp(0.0, 1.0),
            y2: c.y2.clamp(0.0, 1.0),
        })
    }
}

fn overlap_1d(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    (a2.min(b2) - a1.max(b1)).max(0.0)
}

pub fn intersection(a: BBox, b: BBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    overlap_1d(ca.x1, ca.x2, cb.x1, cb.x2) * overlap_1d(ca.y1, ca.y2, cb.y1, cb.y2)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`, 0 when the
/// enclosing box has no area.
pub fn giou(a: BBox, b: BBox) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU and its gradient w.r.t. `a` as `[d/dcx, d/dcy, d/dw, d/dh]`.
pub fn giou_with_grad(a: BBox, b: BBox) -> (f64, [f64; 4]) {
    let (ca, cb) = (a.to_corners(), b.to_corners());

    let ix = ca.x2.min(cb.x2) - ca.x1.max(cb.x1);
    let iy = ca.y2.min(cb.y2) - ca.y1.max(cb.y1);
    let (iw, ih) = (ix.max(0.0), iy.max(0.0));
    let inter = iw * ih;
    let area_a = a.w * a.h;
    let union = area_a + b.area() - inter;
    let ex = ca.x2.max(cb.x2) - ca.x1.min(cb.x1);
    let ey = ca.y2.max(cb.y2) - ca.y1.min(cb.y1);
    let enclosing = ex * ey;
    if enclosing <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    // corners and sizes round differently; keep the penalty non-negative
    let value = iou - ((enclosing - union) / enclosing).max(0.0);
    if union <= 0.0 {
        return (value, [0.0; 4]);
    }

    // giou = I/U - 1 + U/C
    let d_inter = 1.0 / union;
    let d_union = -inter / (union * union) + 1.0 / enclosing;
    let d_encl = -union / (enclosing * enclosing);

    // partials w.r.t. the corners of a: [x1, y1, x2, y2]
    let mut dc = [0.0; 4];
    if ix > 0.0 && iy > 0.0 {
        let dix2 = if ca.x2 < cb.x2 { 1.0 } else { 0.0 };
        let dix1 = if ca.x1 > cb.x1 { -1.0 } else { 0.0 };
        let diy2 = if ca.y2 < cb.y2 { 1.0 } else { 0.0 };
        let diy1 = if ca.y1 > cb.y1 { -1.0 } else { 0.0 };
        // dI = ih * dix + iw * diy, and dU gets -dI
        let gi = d_inter - d_union;
        dc[0] += gi * ih * dix1;
        dc[2] += gi * ih * dix2;
        dc[1] += gi * iw * diy1;
        dc[3] += gi * iw * diy2;
    }
    let dex2 = if ca.x2 >= cb.x2 { 1.0 } else { 0.0 };
    let dex1 = if ca.x1 <= cb.x1 { -1.0 } else { 0.0 };
    let dey2 = if ca.y2 >= cb.y2 { 1.0 } else { 0.0 };
    let dey1 = if ca.y1 <= cb.y1 { -1.0 } else { 0.0 };
    dc[0] += d_encl * ey * dex1;
    dc[2] += d_encl * ey * dex2;
    dc[1] += d_encl * ex * dey1;
    dc[3] += d_encl * ex * dey2;

    // area_a = w * h enters the union directly
    let dw_area = d_union * a.h;
    let dh_area = d_union * a.w;

    let grad = [
        dc[0] + dc[2],
        dc[1] + dc[3],
        0.5 * (dc[2] - dc[0]) + dw_area,
        0.5 * (dc[3] - dc[1]) + dh_area,
    ];
    (value, grad)
}

/// Symmetric adjacency with `allowed[i][j] <=> iou(b_i, b_j) > 0`; every box
/// neighbors itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborMask {
    mask: Mask,
}

impl NeighborMask {
    pub fn n(&self) -> usize {
        self.mask.rows()
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.mask.get(i, j)
    }

    pub fn as_mask(&self) -> &Mask {
        &self.mask
    }

    /// Every pair allowed: plain self-attention.
    pub fn full(n: usize) -> Self {
        Self { mask: Mask::all(n, n) }
    }

    pub fn from_mask(mask: Mask) -> Option<Self> {
        let n = mask.rows();
        if mask.cols() != n {
            return None;
        }
        for i in 0..n {
            if !mask.get(i, i) {
                return None;
            }
            for j in 0..i {
                if mask.get(i, j) != mask.get(j, i) {
                    return None;
                }
            }
        }
        Some(Self { mask })
    }

    /// Symmetric with a true diagonal.
    pub fn is_well_formed(&self) -> bool {
        Self::from_mask(self.mask.clone()).is_some()
    }
}

pub fn neighbor_mask(boxes: &[BBox]) -> NeighborMask {
    let n = boxes.len();
    let mut mask = Mask::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if iou(boxes[i], boxes[j]) > 0.0 {
                mask.set(i, j, true);
                mask.set(j, i, true);
            }
        }
    }
    NeighborMask { mask }
}
