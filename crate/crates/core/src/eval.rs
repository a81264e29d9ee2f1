//! Rotated 3D and bird's-eye IoU, and AP over 40 recall positions.

use std::fmt::Write as _;

use crate::data::{class_name, KittiObject};

/// Yaw-rotated box; `center` is the bottom centre in camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `(h, w, l)`.
    pub dims: [f64; 3],
    pub heading: f64,
}

impl Box3D {
    pub fn from_kitti(o: &KittiObject) -> Self {
        Self { center: o.location, dims: o.dims, heading: o.heading }
    }

    /// Ground-plane footprint `(X, Z)`, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let [_, w, l] = self.dims;
        let (s, c) = self.heading.sin_cos();
        let mut out = [[0.0; 2]; 4];
        for (k, (sx, sz)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].into_iter().enumerate() {
            let (x, z) = (sx * l / 2.0, sz * w / 2.0);
            out[k] = [self.center[0] + c * x + s * z, self.center[2] - s * x + c * z];
        }
        if signed_area(&out) < 0.0 {
            out.reverse();
        }
        out
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[1] * self.dims[2]
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Sutherland–Hodgman clipping of `subject` by the convex, counter-clockwise
/// `clip` polygon.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_polygon(&a.footprint(), &b.footprint());
    if poly.len() < 3 {
        0.0
    } else {
        signed_area(&poly).abs()
    }
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Vertical extent of each box is `[Y − h, Y]`.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let top = (a.center[1] - a.dims[0]).max(b.center[1] - b.dims[0]);
    let bottom = a.center[1].min(b.center[1]);
    let overlap = (bottom - top).max(0.0);
    if overlap == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * overlap;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A scored detection in image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub score: f64,
    pub bbox: Box3D,
}

/// Precision/recall after each detection in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    /// Percentage in `[0, 100]`.
    pub ap: f64,
    /// Set when there was no ground truth, in which case `ap` is 0.
    pub no_ground_truth: bool,
    pub curve: PrCurve,
}

/// Greedy matching in descending score order, each detection to the
/// highest-IoU unmatched GT of its image at or above `threshold`.
/// `gts[i]` lists the boxes of image `i`.
pub fn average_precision_r40(
    dets: &[Detection],
    gts: &[Vec<Box3D>],
    iou: fn(&Box3D, &Box3D) -> f64,
    threshold: f64,
) -> ApResult {
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = PrCurve { precision: Vec::with_capacity(dets.len()), recall: Vec::with_capacity(dets.len()) };
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        if let Some(boxes) = gts.get(det.image) {
            for (k, g) in boxes.iter().enumerate() {
                if taken[det.image][k] {
                    continue;
                }
                let v = iou(&det.bbox, g);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
        }
        match best {
            Some((k, _)) => {
                taken[det.image][k] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.precision.push(tp as f64 / (tp + fp) as f64);
        curve.recall.push(if total == 0 { 0.0 } else { tp as f64 / total as f64 });
    }
    if total == 0 {
        return ApResult { ap: 0.0, no_ground_truth: true, curve };
    }
    let mut sum = 0.0;
    for r in 1..=40 {
        let r = r as f64 / 40.0;
        let best = curve
            .recall
            .iter()
            .zip(&curve.precision)
            .filter(|(&rec, _)| rec >= r - 1e-12)
            .map(|(_, &p)| p)
            .fold(0.0, f64::max);
        sum += best;
    }
    ApResult { ap: sum / 40.0 * 100.0, no_ground_truth: false, curve }
}

/// IoU threshold per class: 0.7 for the first class, 0.5 otherwise.
pub fn class_threshold(class_id: usize) -> f64 {
    if class_id == 0 {
        0.7
    } else {
        0.5
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub class_id: usize,
    pub metric: &'static str,
    pub threshold: f64,
    pub ap: f64,
    pub no_ground_truth: bool,
}

/// AP_3D and AP_BEV per class over paired per-image result and label lists.
pub fn evaluate(results: &[Vec<KittiObject>], labels: &[Vec<KittiObject>], num_classes: usize) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for class in 0..num_classes {
        let gts: Vec<Vec<Box3D>> = labels
            .iter()
            .map(|l| l.iter().filter(|o| o.class_id == Some(class)).map(Box3D::from_kitti).collect())
            .collect();
        let dets: Vec<Detection> = results
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                r.iter().filter(|o| o.class_id == Some(class)).map(move |o| Detection {
                    image: i,
                    score: o.score.unwrap_or(1.0),
                    bbox: Box3D::from_kitti(o),
                })
            })
            .collect();
        let threshold = class_threshold(class);
        for (metric, f) in [("AP_3D", iou3d as fn(&Box3D, &Box3D) -> f64), ("AP_BEV", bev_iou)] {
            let r = average_precision_r40(&dets, &gts, f, threshold);
            rows.push(MetricRow { class_id: class, metric, threshold, ap: r.ap, no_ground_truth: r.no_ground_truth });
        }
    }
    rows
}

pub fn format_report(rows: &[MetricRow]) -> String {
    let mut s = String::from("class metric threshold AP_R40\n");
    for r in rows {
        write!(s, "{} {} {:.2} {:.4}", class_name(r.class_id), r.metric, r.threshold, r.ap).expect("string write");
        if r.no_ground_truth {
            s.push_str(" (no ground truth)");
        }
        s.push('\n');
    }
    s
}
