//! Prediction heads on decoded queries, the per-attribute losses, and the
//! geometric helpers they share.

use std::f64::consts::PI;

use thiserror::Error;

use crate::config::Config;
use crate::nn::{Graph, Init, Linear, Mlp, ParamStore};
use crate::numerics::{sigmoid, softplus, Result, Var};

pub const LOG_SIGMA_MIN: f64 = -6.907755278982137; // ln 1e-3
pub const LOG_SIGMA_MAX: f64 = 6.907755278982137; // ln 1e3

#[derive(Debug, Error)]
pub enum HeadsError {
    #[error("ground-truth dimensions must be positive, got {0:?}")]
    ZeroDimension([f64; 3]),
}

/// One annotated object.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthObject {
    pub class_id: usize,
    /// Projected 3D centre divided by image width and height.
    pub center3d_norm: [f64; 2],
    /// `(x1, y1, x2, y2)` in pixels.
    pub box2d: [f64; 4],
    pub depth: f64,
    /// `(h, w, l)` in meters.
    pub dims: [f64; 3],
    /// Yaw around the camera Y axis, in `[-π, π)`.
    pub heading: f64,
    /// Bottom centre in camera coordinates.
    pub location: [f64; 3],
}

/// Decoded outputs of one query, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPrediction {
    pub class_probs: Vec<f64>,
    pub center3d: [f64; 2],
    /// `(l, r, t, b)` as fractions of the image width/height.
    pub sides: [f64; 4],
    pub d_reg: f64,
    pub depth_log_sigma: f64,
    pub dims: [f64; 3],
    pub orient_bin_logits: Vec<f64>,
    pub orient_residuals: Vec<f64>,
    /// Ensemble depth (regressed, geometric, depth-map average).
    pub depth: f64,
}

impl QueryPrediction {
    pub fn sigma(&self) -> f64 {
        self.depth_log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp()
    }

    pub fn heading(&self) -> f64 {
        let bin = crate::depth::argmax(&self.orient_bin_logits);
        decode_heading(bin, self.orient_residuals[bin], self.orient_bin_logits.len())
    }

    pub fn box2d(&self, width: f64, height: f64) -> [f64; 4] {
        recover_box2d(self.center3d, self.sides, width, height)
    }
}

/// Tape handles for the head outputs of all `N` queries.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[N, classes]` pre-sigmoid.
    pub class_logits: Var,
    /// `[N, 2]` in `(0, 1)`.
    pub center: Var,
    /// `[N, 4]` in `(0, 1)`.
    pub sides: Var,
    /// `[N]` meters.
    pub d_reg: Var,
    /// `[N]`, clamped.
    pub log_sigma: Var,
    /// `[N, 3]` meters.
    pub dims: Var,
    /// `[N, B]`.
    pub orient_logits: Var,
    /// `[N, B]` radians.
    pub orient_residuals: Var,
}

#[derive(Clone, Debug)]
pub struct Heads {
    class: Linear,
    center: Mlp,
    depth: Mlp,
    dims: Mlp,
    orient: Mlp,
    d_min: f64,
    d_max: f64,
    bins: usize,
}

impl Heads {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &Config) -> Self {
        let (c, h) = (cfg.channels, cfg.head_hidden);
        let class = Linear::new(store, init, "heads.class", c, cfg.num_classes);
        // rare-foreground prior: sigmoid(bias) = 0.01
        let prior = -(99f64).ln();
        store
            .get_mut(class.bias)
            .values_mut()
            .iter_mut()
            .for_each(|b| *b = prior);
        Self {
            class,
            center: Mlp::new(store, init, "heads.center", &[c, h, h, 6]),
            depth: Mlp::new(store, init, "heads.depth", &[c, h, 2]),
            dims: Mlp::new(store, init, "heads.dims", &[c, h, 3]),
            orient: Mlp::new(store, init, "heads.orient", &[c, h, 2 * cfg.orientation_bins]),
            d_min: cfg.depth_min,
            d_max: cfg.depth_max,
            bins: cfg.orientation_bins,
        }
    }

    /// Every parameter of the heads, for tests that zero them.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut v = vec![&self.class];
        for m in [&self.center, &self.depth, &self.dims, &self.orient] {
            v.extend(m.layers.iter());
        }
        v
    }

    pub fn forward(&self, g: &mut Graph<'_>, queries: Var) -> Result<HeadOutputs> {
        let class_logits = self.class.forward(g, queries)?;

        let geo = self.center.forward(g, queries)?;
        let geo = g.sigmoid(geo)?;
        let center = g.slice_cols(geo, 0, 2)?;
        let sides = g.slice_cols(geo, 2, 4)?;

        let depth = self.depth.forward(g, queries)?;
        let raw = g.slice_cols(depth, 0, 1)?;
        let raw = g.sigmoid(raw)?;
        let d_reg = g.scale(raw, self.d_max - self.d_min)?;
        let d_reg = g.add_scalar(d_reg, self.d_min)?;
        let n = g.shape(queries)[0];
        let d_reg = g.reshape(d_reg, &[n])?;
        let log_sigma = g.slice_cols(depth, 1, 1)?;
        let log_sigma = g.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        let log_sigma = g.reshape(log_sigma, &[n])?;

        let dims = self.dims.forward(g, queries)?;
        let dims = g.exp(dims)?;

        let orient = self.orient.forward(g, queries)?;
        let orient_logits = g.slice_cols(orient, 0, self.bins)?;
        let orient_residuals = g.slice_cols(orient, self.bins, self.bins)?;

        Ok(HeadOutputs {
            class_logits,
            center,
            sides,
            d_reg,
            log_sigma,
            dims,
            orient_logits,
            orient_residuals,
        })
    }
}

/// Reads detached predictions for every query. `depth` holds the ensemble
/// depth per query.
pub fn predictions(g: &Graph<'_>, out: &HeadOutputs, depth: Var) -> Vec<QueryPrediction> {
    let n = g.shape(out.center)[0];
    let k = g.shape(out.class_logits)[1];
    let b = g.shape(out.orient_logits)[1];
    let (cls, ctr, sides) = (g.values(out.class_logits), g.values(out.center), g.values(out.sides));
    let (dreg, ls, dims) = (g.values(out.d_reg), g.values(out.log_sigma), g.values(out.dims));
    let (ol, or) = (g.values(out.orient_logits), g.values(out.orient_residuals));
    let dp = g.values(depth);
    (0..n)
        .map(|i| QueryPrediction {
            class_probs: cls[i * k..(i + 1) * k].iter().map(|&x| sigmoid(x)).collect(),
            center3d: [ctr[2 * i], ctr[2 * i + 1]],
            sides: [sides[4 * i], sides[4 * i + 1], sides[4 * i + 2], sides[4 * i + 3]],
            d_reg: dreg[i],
            depth_log_sigma: ls[i],
            dims: [dims[3 * i], dims[3 * i + 1], dims[3 * i + 2]],
            orient_bin_logits: ol[i * b..(i + 1) * b].to_vec(),
            orient_residuals: or[i * b..(i + 1) * b].to_vec(),
            depth: dp[i],
        })
        .collect()
}

/// Pixel box `(x1, y1, x2, y2)` from a normalised centre and side distances,
/// clipped to the image.
pub fn recover_box2d(center: [f64; 2], sides: [f64; 4], width: f64, height: f64) -> [f64; 4] {
    let [x, y] = center;
    let [l, r, t, b] = sides;
    [
        ((x - l) * width).clamp(0.0, width),
        ((y - t) * height).clamp(0.0, height),
        ((x + r) * width).clamp(0.0, width),
        ((y + b) * height).clamp(0.0, height),
    ]
}

/// Side distances of a GT box around the GT projected centre, normalised.
pub fn side_targets(gt: &GroundTruthObject, width: f64, height: f64) -> [f64; 4] {
    let [x, y] = gt.center3d_norm;
    let [x1, y1, x2, y2] = gt.box2d;
    [x - x1 / width, x2 / width - x, y - y1 / height, y2 / height - y]
}

/// Depth from the pinhole similar-triangle relation `f_y·h_3D / h_2D`,
/// clamped to `[d_min, d_max]`; boxes at most one pixel tall give `d_max`.
pub fn geometric_depth(height_3d: f64, height_2d: f64, focal_y: f64, d_min: f64, d_max: f64) -> f64 {
    if height_2d <= 1.0 {
        return d_max;
    }
    (focal_y * height_3d / height_2d).clamp(d_min, d_max)
}

/// Plain average of the three depth estimates.
pub fn ensemble_depth(d_reg: f64, d_geo: f64, d_map: f64) -> f64 {
    (d_reg + d_geo + d_map) / 3.0
}

/// Generalised IoU of two `(x1, y1, x2, y2)` boxes.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    let iou = inter / (union + GIOU_EPS);
    iou - (hull - union) / (hull + GIOU_EPS)
}

pub(crate) const GIOU_EPS: f64 = 1e-9;

/// Centre of heading bin `i` out of `bins`, bins tiling `[-π, π)`.
pub fn bin_center(i: usize, bins: usize) -> f64 {
    -PI + (i as f64 + 0.5) * 2.0 * PI / bins as f64
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let r = (a + PI).rem_euclid(two_pi) - PI;
    if r >= PI {
        r - two_pi
    } else {
        r
    }
}

/// Heading bin and in-bin residual of an angle.
pub fn encode_heading(heading: f64, bins: usize) -> (usize, f64) {
    let width = 2.0 * PI / bins as f64;
    let h = wrap_angle(heading);
    let bin = (((h + PI) / width).floor() as usize).min(bins - 1);
    (bin, h - bin_center(bin, bins))
}

pub fn decode_heading(bin: usize, residual: f64, bins: usize) -> f64 {
    wrap_angle(bin_center(bin, bins) + residual)
}

/// Unweighted per-pair attribute losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttributeLosses {
    pub class: f64,
    pub center: f64,
    pub lrtb: f64,
    pub giou: f64,
    pub dim: f64,
    pub orien: f64,
    pub depth: f64,
}

/// Sigmoid focal loss summed over classes against a one-hot (or all-zero)
/// target.
pub fn sigmoid_focal(logit_probs: &[f64], target: Option<usize>, gamma: f64, alpha: f64) -> f64 {
    logit_probs
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            let t = if Some(c) == target { 1.0 } else { 0.0 };
            let p = p.clamp(1e-300, 1.0);
            let x = (p / (1.0 - p).max(1e-300)).ln();
            let ce = softplus(x) - t * x;
            let pt = p * t + (1.0 - p) * (1.0 - t);
            let at = alpha * t + (1.0 - alpha) * (1.0 - t);
            at * (1.0 - pt).powf(gamma) * ce
        })
        .sum()
}

/// Loss terms of one matched pair. The prediction's `depth` field is the
/// ensemble depth the uncertainty loss acts on.
pub fn attribute_losses(
    pred: &QueryPrediction,
    gt: &GroundTruthObject,
    image_size: (f64, f64),
    gamma: f64,
    alpha: f64,
) -> Result<AttributeLosses, HeadsError> {
    if gt.dims.iter().any(|&d| d <= 0.0) {
        return Err(HeadsError::ZeroDimension(gt.dims));
    }
    let (w, h) = image_size;
    let target_sides = side_targets(gt, w, h);
    let bins = pred.orient_bin_logits.len();
    let (bin, residual) = encode_heading(gt.heading, bins);
    let logits = &pred.orient_bin_logits;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let sigma = pred.sigma();
    Ok(AttributeLosses {
        class: sigmoid_focal(&pred.class_probs, Some(gt.class_id), gamma, alpha),
        center: l1(&pred.center3d, &gt.center3d_norm),
        lrtb: l1(&pred.sides, &target_sides),
        giou: 1.0 - giou(pred.box2d(w, h), gt.box2d),
        dim: pred.dims.iter().zip(&gt.dims).map(|(p, g)| (p - g).abs() / g).sum(),
        orien: (lse - logits[bin]) + (pred.orient_residuals[bin] - residual).abs(),
        depth: 2f64.sqrt() / sigma * (pred.depth - gt.depth).abs() + sigma.ln(),
    })
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
