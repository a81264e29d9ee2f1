//! Depth predictor, foreground depth-map supervision, and depth bin algebra.

use thiserror::Error;

use crate::backbone::MultiScaleFeatures;
use crate::config::{BinMode, Config, DepthDecode};
use crate::heads::GroundTruthObject;
use crate::nn::{Conv2d, Graph, Init, ParamStore};
use crate::numerics::{NumericsError, Padding, Var};

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("depth {depth} outside [{min}, {max}]")]
    OutOfRange { depth: f64, min: f64, max: f64 },
    #[error("bin {index} outside 0..={k}")]
    BinOutOfRange { index: usize, k: usize },
    #[error("bin probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("invalid bin specification: {0}")]
    InvalidSpec(String),
}

/// Discretisation of `[d_min, d_max]` into `k` foreground bins; index `k`
/// is background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBinSpec {
    d_min: f64,
    d_max: f64,
    k: usize,
    mode: BinMode,
    delta: f64,
}

impl DepthBinSpec {
    pub fn new(d_min: f64, d_max: f64, k: usize, mode: BinMode) -> Result<Self, DepthError> {
        if !(d_min < d_max) || k == 0 || d_min < 0.0 {
            return Err(DepthError::InvalidSpec(format!("[{d_min}, {d_max}] with k = {k}")));
        }
        let delta = 2.0 * (d_max - d_min) / (k as f64 * (k as f64 + 1.0));
        Ok(Self { d_min, d_max, k, mode, delta })
    }

    pub fn from_config(cfg: &Config) -> Result<Self, DepthError> {
        Self::new(cfg.depth_min, cfg.depth_max, cfg.depth_bins, cfg.bin_mode)
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    /// Number of foreground bins; the background class index.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> BinMode {
        self.mode
    }

    /// First interval length and common difference of the linear-increasing
    /// scheme.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    // SID works in log space; a zero lower bound is shifted by one meter.
    fn sid_shift(&self) -> f64 {
        if self.d_min == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// Interval-starting depth of bin `i`; the background bin `k` maps to `d_max`.
    pub fn bin_start(&self, i: usize) -> Result<f64, DepthError> {
        if i > self.k {
            return Err(DepthError::BinOutOfRange { index: i, k: self.k });
        }
        if i == self.k {
            return Ok(self.d_max);
        }
        let fi = i as f64;
        Ok(match self.mode {
            BinMode::Lid => self.d_min + self.delta * fi * (fi + 1.0) / 2.0,
            BinMode::Ud => self.d_min + fi * (self.d_max - self.d_min) / self.k as f64,
            BinMode::Sid => {
                let s = self.sid_shift();
                let (lo, hi) = (self.d_min + s, self.d_max + s);
                lo * (hi / lo).powf(fi / self.k as f64) - s
            }
        })
    }

    /// All `k + 1` bin representatives, background last.
    pub fn bin_values(&self) -> Vec<f64> {
        (0..=self.k).map(|i| self.bin_start(i).expect("in range")).collect()
    }

    /// Foreground bin of a depth, in `0..k`.
    pub fn bin_index(&self, d: f64) -> Result<usize, DepthError> {
        if !(d >= self.d_min && d <= self.d_max) {
            return Err(DepthError::OutOfRange { depth: d, min: self.d_min, max: self.d_max });
        }
        let k = self.k as f64;
        let raw = match self.mode {
            BinMode::Lid => -0.5 + 0.5 * (1.0 + 8.0 * (d - self.d_min) / self.delta).sqrt(),
            BinMode::Ud => (d - self.d_min) / ((self.d_max - self.d_min) / k),
            BinMode::Sid => {
                let s = self.sid_shift();
                k * ((d + s) / (self.d_min + s)).ln() / ((self.d_max + s) / (self.d_min + s)).ln()
            }
        };
        let mut idx = (raw.floor().max(0.0) as usize).min(self.k - 1);
        // The closed forms can land one bin off at exact interval starts
        // after rounding; settle against the bin starts themselves.
        while idx + 1 < self.k && self.bin_start(idx + 1)? <= d {
            idx += 1;
        }
        while idx > 0 && self.bin_start(idx)? > d {
            idx -= 1;
        }
        Ok(idx)
    }

    /// Depth represented by a bin distribution over `k + 1` classes.
    pub fn expected_depth(&self, probs: &[f64], decode: DepthDecode) -> Result<f64, DepthError> {
        if probs.len() != self.k + 1 {
            return Err(DepthError::InvalidSpec(format!(
                "{} probabilities for {} bins",
                probs.len(),
                self.k + 1
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(DepthError::NotNormalized(total));
        }
        Ok(match decode {
            DepthDecode::Weighted => probs
                .iter()
                .zip(self.bin_values())
                .map(|(p, d)| p * d)
                .sum(),
            DepthDecode::Argmax => self.bin_start(argmax(probs))?,
        })
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel class targets for the foreground depth map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthMapTarget {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<usize>,
}

/// Rasterises object boxes at `1/stride` resolution. A cell belongs to a box
/// when its centre lies inside the box scaled by `1/stride` (edges included);
/// overlapping cells take the bin of the nearest object.
pub fn build_depth_target(
    objects: &[GroundTruthObject],
    spec: &DepthBinSpec,
    height: usize,
    width: usize,
    stride: usize,
) -> DepthMapTarget {
    let mut classes = vec![spec.k(); height * width];
    let mut nearest = vec![f64::INFINITY; height * width];
    let s = stride as f64;
    for obj in objects {
        let depth = obj.depth.clamp(spec.d_min(), spec.d_max());
        let bin = spec.bin_index(depth).expect("clamped into range");
        let [x1, y1, x2, y2] = obj.box2d;
        for i in 0..height {
            let cy = i as f64 + 0.5;
            if cy < y1 / s || cy > y2 / s {
                continue;
            }
            for j in 0..width {
                let cx = j as f64 + 0.5;
                if cx < x1 / s || cx > x2 / s {
                    continue;
                }
                let at = i * width + j;
                if obj.depth < nearest[at] {
                    nearest[at] = obj.depth;
                    classes[at] = bin;
                }
            }
        }
    }
    DepthMapTarget { height, width, classes }
}

/// Mean multi-class focal loss of `logits: [k+1, H, W]` against the target.
pub fn depth_map_loss(
    g: &mut Graph<'_>,
    logits: Var,
    target: &DepthMapTarget,
    gamma: f64,
) -> Result<Var, NumericsError> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[1] != target.height || s[2] != target.width {
        return Err(NumericsError::Dimension {
            op: "depth_map_loss".into(),
            detail: format!("logits {s:?} vs target {}x{}", target.height, target.width),
        });
    }
    let classes = s[0];
    let pixels = target.height * target.width;
    let flat = g.reshape(logits, &[classes, pixels])?;
    let logp = g.log_softmax(flat, 0)?;
    let idx: Vec<usize> = target.classes.iter().enumerate().map(|(p, &c)| c * pixels + p).collect();
    let logpt = g.gather_flat(logp, &idx)?;
    let pt = g.exp(logpt)?;
    let one_minus = g.rsub_scalar(1.0, pt)?;
    let modulator = pow_gamma(g, one_minus, gamma)?;
    let weighted = g.mul(modulator, logpt)?;
    let mean = g.mean(weighted)?;
    g.neg(mean)
}

/// `x^gamma` for `x >= 0`, exact products for small integer exponents.
pub(crate) fn pow_gamma(g: &mut Graph<'_>, x: Var, gamma: f64) -> Result<Var, NumericsError> {
    if gamma == 0.0 {
        let ones = vec![1.0; g.values(x).len()];
        let shape = g.shape(x).to_vec();
        return g.constant_from(&shape, ones);
    }
    if gamma.fract() == 0.0 && gamma > 0.0 && gamma <= 4.0 {
        let mut out = x;
        for _ in 1..gamma as usize {
            out = g.mul(out, x)?;
        }
        return Ok(out);
    }
    // general exponent through exp(γ·ln x), with x kept off zero
    let safe = g.clamp(x, 1e-12, f64::MAX)?;
    let l = g.log(safe)?;
    let l = g.scale(l, gamma)?;
    g.exp(l)
}

/// Output of the depth predictor.
#[derive(Clone, Copy, Debug)]
pub struct DepthOutput {
    /// Depth features `[C, H/16, W/16]`.
    pub features: Var,
    /// Foreground depth-map logits `[k+1, H/16, W/16]`.
    pub logits: Var,
    /// Per-pixel bin probabilities `[H/16·W/16, k+1]`.
    pub probs: Var,
    /// Decoded per-pixel depth `[H/16, W/16]`.
    pub depth_grid: Var,
}

/// Fuses the three backbone scales at 1/16 and predicts the depth map.
#[derive(Clone, Debug)]
pub struct DepthPredictor {
    smooth8: Conv2d,
    smooth32: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
    classifier: Conv2d,
    spec: DepthBinSpec,
    decode: DepthDecode,
}

impl DepthPredictor {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &Config) -> Result<Self, DepthError> {
        let c = cfg.channels;
        let p0 = Padding::same(0);
        let p1 = Padding::same(1);
        Ok(Self {
            smooth8: Conv2d::new(store, init, "depth.smooth8", c, c, 1, 1, p0),
            smooth32: Conv2d::new(store, init, "depth.smooth32", c, c, 1, 1, p0),
            conv1: Conv2d::new(store, init, "depth.conv1", c, c, 3, 1, p1),
            conv2: Conv2d::new(store, init, "depth.conv2", c, c, 3, 1, p1),
            classifier: Conv2d::new(store, init, "depth.classifier", c, cfg.depth_bins + 1, 1, 1, p0),
            spec: DepthBinSpec::from_config(cfg)?,
            decode: cfg.depth_decode,
        })
    }

    pub fn spec(&self) -> &DepthBinSpec {
        &self.spec
    }

    pub fn forward(&self, g: &mut Graph<'_>, ms: &MultiScaleFeatures) -> Result<DepthOutput, NumericsError> {
        let s16 = g.shape(ms.f16).to_vec();
        let (s8, s32) = (g.shape(ms.f8).to_vec(), g.shape(ms.f32).to_vec());
        if s8[1] != 2 * s16[1] || s8[2] != 2 * s16[2] || s16[1] != 2 * s32[1] || s16[2] != 2 * s32[2] {
            return Err(NumericsError::Dimension {
                op: "depth_predictor".into(),
                detail: format!("scales {s8:?}, {s16:?}, {s32:?}"),
            });
        }
        let down = g.downsample_nearest(ms.f8, 2)?;
        let down = self.smooth8.forward(g, down)?;
        let up = g.upsample_nearest(ms.f32, 2)?;
        let up = self.smooth32.forward(g, up)?;
        let fused = g.add(down, up)?;
        let fused = g.add(fused, ms.f16)?;
        let x = self.conv1.forward(g, fused)?;
        let x = g.relu(x)?;
        let x = self.conv2.forward(g, x)?;
        let features = g.relu(x)?;
        let logits = self.classifier.forward(g, features)?;

        let (h, w) = (s16[1], s16[2]);
        let bins = self.spec.k() + 1;
        let flat = g.reshape(logits, &[bins, h * w])?;
        let flat = g.transpose(flat)?;
        let probs = g.softmax(flat, 1)?;
        let depth_grid = match self.decode {
            DepthDecode::Weighted => {
                let values = g.constant_from(&[bins, 1], self.spec.bin_values())?;
                let d = g.matmul(probs, values)?;
                g.reshape(d, &[h, w])?
            }
            DepthDecode::Argmax => {
                let grid: Vec<f64> = g
                    .values(probs)
                    .chunks(bins)
                    .map(|p| self.spec.bin_start(argmax(p)).expect("bin in range"))
                    .collect();
                g.constant_from(&[h, w], grid)?
            }
        };
        Ok(DepthOutput { features, logits, probs, depth_grid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::numerics::Tensor;

    fn lid80() -> DepthBinSpec {
        DepthBinSpec::new(0.0, 80.0, 80, BinMode::Lid).unwrap()
    }

    fn object(box2d: [f64; 4], depth: f64) -> GroundTruthObject {
        GroundTruthObject {
            class_id: 0,
            center3d_norm: [0.5, 0.5],
            box2d,
            depth,
            dims: [1.5, 1.6, 3.9],
            heading: 0.0,
            location: [0.0, 1.5, depth],
        }
    }

    #[test]
    fn lid_delta_for_reference_range() {
        let s = lid80();
        assert_eq!(s.delta(), 160.0 / 6480.0);
        assert!((s.delta() - 0.0246914).abs() < 1e-7);
    }

    #[test]
    fn lid_index_examples() {
        let s = lid80();
        assert_eq!(s.bin_index(0.0).unwrap(), 0);
        assert_eq!(s.bin_index(s.delta()).unwrap(), 1);
        assert_eq!(s.bin_index(80.0).unwrap(), 79);
        assert!(matches!(s.bin_index(80.5), Err(DepthError::OutOfRange { .. })));
        assert!(s.bin_index(-0.1).is_err());
    }

    #[test]
    fn bin_start_examples() {
        for mode in [BinMode::Lid, BinMode::Ud, BinMode::Sid] {
            let s = DepthBinSpec::new(0.0, 80.0, 80, mode).unwrap();
            assert_eq!(s.bin_start(0).unwrap(), 0.0);
            assert_eq!(s.bin_start(80).unwrap(), 80.0);
            assert!(s.bin_start(81).is_err());
            for i in 0..80 {
                assert_eq!(s.bin_index(s.bin_start(i).unwrap()).unwrap(), i, "{mode:?} bin {i}");
                assert!(s.bin_start(i + 1).unwrap() > s.bin_start(i).unwrap());
            }
        }
    }

    #[test]
    fn lid_widths_grow_by_delta() {
        let s = lid80();
        let starts = s.bin_values();
        for i in 0..78 {
            let w0 = starts[i + 1] - starts[i];
            let w1 = starts[i + 2] - starts[i + 1];
            assert!((w1 - w0 - s.delta()).abs() < 1e-9);
        }
    }

    #[test]
    fn sid_with_nonzero_minimum_has_no_shift() {
        let s = DepthBinSpec::new(2.0, 50.0, 10, BinMode::Sid).unwrap();
        let b1 = s.bin_start(1).unwrap();
        assert!((b1 - 2.0 * 25f64.powf(0.1)).abs() < 1e-12);
    }

    #[test]
    fn bin_index_monotone_over_sweep() {
        for mode in [BinMode::Lid, BinMode::Ud, BinMode::Sid] {
            let s = DepthBinSpec::new(0.0, 80.0, 80, mode).unwrap();
            let mut prev = 0;
            for step in 0..=8000 {
                let idx = s.bin_index(step as f64 * 0.01).unwrap();
                assert!(idx >= prev);
                prev = idx;
            }
        }
    }

    #[test]
    fn expected_depth_examples() {
        let s = lid80();
        let mut p = vec![0.0; 81];
        p[80] = 1.0;
        assert_eq!(s.expected_depth(&p, DepthDecode::Weighted).unwrap(), 80.0);
        p[80] = 0.0;
        p[7] = 1.0;
        assert_eq!(s.expected_depth(&p, DepthDecode::Weighted).unwrap(), s.bin_start(7).unwrap());
        assert_eq!(s.expected_depth(&p, DepthDecode::Argmax).unwrap(), s.bin_start(7).unwrap());

        let small = DepthBinSpec::new(0.0, 3.0, 2, BinMode::Lid).unwrap();
        assert_eq!(small.delta(), 1.0);
        let third = [1.0 / 3.0; 3];
        let d = small.expected_depth(&third, DepthDecode::Weighted).unwrap();
        assert!((d - 4.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            small.expected_depth(&[0.5, 0.1, 0.1], DepthDecode::Weighted),
            Err(DepthError::NotNormalized(_))
        ));
    }

    #[test]
    fn depth_target_examples() {
        let s = lid80();
        let empty = build_depth_target(&[], &s, 4, 8, 16);
        assert!(empty.classes.iter().all(|&c| c == 80));

        let full = build_depth_target(&[object([0.0, 0.0, 128.0, 64.0], 20.0)], &s, 4, 8, 16);
        assert!(full.classes.iter().all(|&c| c == s.bin_index(20.0).unwrap()));

        let objs = [object([0.0, 0.0, 80.0, 64.0], 30.0), object([48.0, 0.0, 128.0, 64.0], 10.0)];
        let t = build_depth_target(&objs, &s, 4, 8, 16);
        let (near, far) = (s.bin_index(10.0).unwrap(), s.bin_index(30.0).unwrap());
        // cells 3 and 4 (centres at 56 and 72 px) are covered by both boxes
        assert_eq!(&t.classes[0..8], &[far, far, far, near, near, near, near, near]);
    }

    #[test]
    fn target_edge_cells_use_centre_containment() {
        let s = lid80();
        // scaled box spans [0.5, 1.5] horizontally: centres 0.5 and 1.5 are on the edges
        let t = build_depth_target(&[object([8.0, 0.0, 24.0, 16.0], 5.0)], &s, 1, 3, 16);
        let b = s.bin_index(5.0).unwrap();
        assert_eq!(t.classes, vec![b, b, 80]);
    }

    #[test]
    fn focal_depth_loss_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, false);
        // single pixel, two classes with equal logits: p_t = 0.5
        let logits = g.constant(Tensor::zeros(&[2, 1, 1])).unwrap();
        let target = DepthMapTarget { height: 1, width: 1, classes: vec![0] };
        let l = depth_map_loss(&mut g, logits, &target, 2.0).unwrap();
        assert!((g.item(l) - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((g.item(l) - 0.17329).abs() < 1e-5);

        let sharp = g.constant(Tensor::new(&[2, 1, 1], vec![800.0, 0.0]).unwrap()).unwrap();
        let l = depth_map_loss(&mut g, sharp, &target, 2.0).unwrap();
        assert_eq!(g.item(l), 0.0);
    }
}
