//! Axis-aligned box algebra: offset encoding/decoding, IoU and GIoU with
//! hand-derived gradients, and greedy quality-score NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image units, corners (x1, y1) top-left and
/// (x2, y2) bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if x2 < x1 || y2 < y1 {
            return Err(Error::invalid_input(format!(
                "degenerate corner order: ({x1},{y1},{x2},{y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// Non-negative distances from an anchor location to the four box sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideOffsets {
    pub l: f64,
    pub r: f64,
    pub t: f64,
    pub b: f64,
}

impl SideOffsets {
    pub fn new(l: f64, r: f64, t: f64, b: f64) -> Result<Self> {
        if l < 0.0 || r < 0.0 || t < 0.0 || b < 0.0 {
            return Err(Error::invalid_input(format!(
                "negative offset ({l},{r},{t},{b})"
            )));
        }
        Ok(SideOffsets { l, r, t, b })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l, self.r, self.t, self.b]
    }
}

/// One scored location: the decoded box, its per-class joint scores, and an
/// optional real-IoU annotation carried along for analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCandidate {
    pub location: (f64, f64),
    pub bbox: BBox,
    pub joint_scores: Vec<f64>,
    pub real_iou: Option<f64>,
}

impl DetectionCandidate {
    /// Detection class: argmax of the joint scores, ties to lowest index.
    pub fn class(&self) -> usize {
        argmax(&self.joint_scores)
    }

    /// NMS ranking score: the maximum joint score.
    pub fn score(&self) -> f64 {
        self.joint_scores[self.class()]
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Box from a location and side offsets: (x-l, y-t, x+r, y+b).
pub fn decode(location: (f64, f64), offsets: &SideOffsets) -> BBox {
    BBox {
        x1: location.0 - offsets.l,
        y1: location.1 - offsets.t,
        x2: location.0 + offsets.r,
        y2: location.1 + offsets.b,
    }
}

/// Inverse of [`decode`]; the location must lie inside the box (boundary
/// included) so every offset is non-negative.
pub fn encode(bbox: &BBox, location: (f64, f64)) -> Result<SideOffsets> {
    let (x, y) = location;
    if x < bbox.x1 || x > bbox.x2 || y < bbox.y1 || y > bbox.y2 {
        return Err(Error::invalid_input(format!(
            "location ({x},{y}) outside box ({},{},{},{})",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        )));
    }
    Ok(SideOffsets {
        l: x - bbox.x1,
        r: bbox.x2 - x,
        t: y - bbox.y1,
        b: bbox.y2 - y,
    })
}

/// Intersection-over-union. Degenerate boxes (zero union) score 0 against
/// everything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// GIoU value together with its gradient with respect to the coordinates of
/// `a` (order x1, y1, x2, y2). Piecewise-smooth; at branch ties the gradient
/// picks one consistent subgradient.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    // Every intermediate carries its partials w.r.t. (ax1, ay1, ax2, ay2).
    #[derive(Clone, Copy)]
    struct D {
        v: f64,
        g: [f64; 4],
    }
    fn c(v: f64) -> D {
        D { v, g: [0.0; 4] }
    }
    fn var(v: f64, i: usize) -> D {
        let mut g = [0.0; 4];
        g[i] = 1.0;
        D { v, g }
    }
    fn add(x: D, y: D) -> D {
        D {
            v: x.v + y.v,
            g: [
                x.g[0] + y.g[0],
                x.g[1] + y.g[1],
                x.g[2] + y.g[2],
                x.g[3] + y.g[3],
            ],
        }
    }
    fn sub(x: D, y: D) -> D {
        D {
            v: x.v - y.v,
            g: [
                x.g[0] - y.g[0],
                x.g[1] - y.g[1],
                x.g[2] - y.g[2],
                x.g[3] - y.g[3],
            ],
        }
    }
    fn mul(x: D, y: D) -> D {
        D {
            v: x.v * y.v,
            g: [
                x.g[0] * y.v + y.g[0] * x.v,
                x.g[1] * y.v + y.g[1] * x.v,
                x.g[2] * y.v + y.g[2] * x.v,
                x.g[3] * y.v + y.g[3] * x.v,
            ],
        }
    }
    fn div(x: D, y: D) -> D {
        let inv = 1.0 / y.v;
        D {
            v: x.v * inv,
            g: [
                (x.g[0] - x.v * inv * y.g[0]) * inv,
                (x.g[1] - x.v * inv * y.g[1]) * inv,
                (x.g[2] - x.v * inv * y.g[2]) * inv,
                (x.g[3] - x.v * inv * y.g[3]) * inv,
            ],
        }
    }
    fn dmax(x: D, y: D) -> D {
        if x.v >= y.v {
            x
        } else {
            y
        }
    }
    fn dmin(x: D, y: D) -> D {
        if x.v <= y.v {
            x
        } else {
            y
        }
    }
    fn relu(x: D) -> D {
        if x.v > 0.0 {
            x
        } else {
            c(0.0)
        }
    }

    let ax1 = var(a.x1, 0);
    let ay1 = var(a.y1, 1);
    let ax2 = var(a.x2, 2);
    let ay2 = var(a.y2, 3);
    let (bx1, by1, bx2, by2) = (c(b.x1), c(b.y1), c(b.x2), c(b.y2));

    let area_a = mul(sub(ax2, ax1), sub(ay2, ay1));
    let area_b = mul(sub(bx2, bx1), sub(by2, by1));
    let iw = relu(sub(dmin(ax2, bx2), dmax(ax1, bx1)));
    let ih = relu(sub(dmin(ay2, by2), dmax(ay1, by1)));
    let inter = mul(iw, ih);
    let union = sub(add(area_a, area_b), inter);

    let iou_d = if union.v <= 0.0 {
        c(0.0)
    } else {
        div(inter, union)
    };

    let cw = sub(dmax(ax2, bx2), dmin(ax1, bx1));
    let ch = sub(dmax(ay2, by2), dmin(ay1, by1));
    let area_c = mul(cw, ch);

    let giou_d = if area_c.v <= 0.0 {
        iou_d
    } else {
        sub(iou_d, div(sub(area_c, union), area_c))
    };

    (giou_d.v, giou_d.g)
}

/// GIoU value only.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_with_grad(a, b).0
}

/// Greedy non-maximum suppression over scored candidates.
///
/// Candidates scoring below `score_threshold` are dropped, the rest are
/// processed in descending score order (ties by input index), and a kept
/// candidate suppresses any later candidate of the same class (or any class
/// when `per_class` is false) whose box overlaps it beyond `iou_threshold`.
/// Returns indices into the input, sorted by descending score.
pub fn nms(
    candidates: &[DetectionCandidate],
    iou_threshold: f64,
    score_threshold: f64,
    per_class: bool,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].score() >= score_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score()
            .partial_cmp(&candidates[a].score())
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut suppressed = vec![false; candidates.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let ci = &candidates[i];
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let cj = &candidates[j];
            if per_class && ci.class() != cj.class() {
                continue;
            }
            if iou(&ci.bbox, &cj.bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Literal-definition NMS used as a test oracle: repeatedly scan the whole
/// candidate list for the best unsuppressed survivor, keep it, and mark its
/// overlaps. Quadratic and slow on purpose.
pub fn nms_reference(
    candidates: &[DetectionCandidate],
    iou_threshold: f64,
    score_threshold: f64,
    per_class: bool,
) -> Vec<usize> {
    let mut alive: Vec<bool> = candidates
        .iter()
        .map(|c| c.score() >= score_threshold)
        .collect();
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for (i, &a) in alive.iter().enumerate() {
            if !a {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if candidates[i].score() > candidates[b].score() => Some(i),
                other => other,
            };
        }
        let Some(i) = best else { break };
        keep.push(i);
        alive[i] = false;
        for (j, a) in alive.iter_mut().enumerate() {
            if !*a {
                continue;
            }
            if per_class && candidates[i].class() != candidates[j].class() {
                continue;
            }
            if iou(&candidates[i].bbox, &candidates[j].bbox) > iou_threshold {
                *a = false;
            }
        }
    }
    keep
}
