//! The assembled detector: backbone, depth predictor, transformer and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::Backbone;
use crate::config::{Config, ConfigError, ScoreMode};
use crate::data::{observation_angle, CameraIntrinsics, KittiObject, SceneSample};
use crate::depth::{build_depth_target, DepthError, DepthOutput, DepthPredictor};
use crate::heads::{predictions, HeadOutputs, Heads, QueryPrediction};
use crate::matcher::{cost_matrix, hungarian, overall_loss, BlockOutputs, CostWeights, LossBreakdown, MatchAssignment, MatcherError};
use crate::nn::{Graph, Init, ParamStore};
use crate::numerics::{NumericsError, Result as NResult, Tensor, Var};
use crate::transformer::{Transformer, TransformerOutput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
}

#[derive(Clone, Debug)]
pub struct MonoDetr {
    pub cfg: Config,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub depth: DepthPredictor,
    pub transformer: Transformer,
    pub heads: Heads,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Heads applied to every decoder block, last block last.
    pub blocks: Vec<BlockOutputs>,
    pub depth: DepthOutput,
    pub transformer: TransformerOutput,
}

impl MonoDetr {
    /// Parameters are drawn from a generator seeded with `cfg.seed`.
    pub fn new(cfg: &Config) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(cfg.seed));
        let backbone = Backbone::new(&mut store, &mut init, cfg);
        let depth = DepthPredictor::new(&mut store, &mut init, cfg)?;
        let transformer = Transformer::new(&mut store, &mut init, cfg);
        let heads = Heads::new(&mut store, &mut init, cfg);
        Ok(Self { cfg: cfg.clone(), store, backbone, depth, transformer, heads })
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: &Tensor, focal_y: f64) -> NResult<ForwardOutput> {
        let img = g.constant(image.clone())?;
        let ms = self.backbone.forward(g, img)?;
        let depth = self.depth.forward(g, &ms)?;
        let transformer = self.transformer.forward(g, ms.f32, &depth)?;
        let mut blocks = Vec::with_capacity(transformer.decoded.len());
        for &q in &transformer.decoded {
            let heads = self.heads.forward(g, q)?;
            let d = self.ensemble_depth(g, &heads, depth.depth_grid, focal_y)?;
            blocks.push(BlockOutputs { heads, depth: d });
        }
        Ok(ForwardOutput { blocks, depth, transformer })
    }

    /// Average of regressed, geometric and depth-map depths per query `[N]`.
    pub fn ensemble_depth(&self, g: &mut Graph<'_>, h: &HeadOutputs, depth_grid: Var, focal_y: f64) -> NResult<Var> {
        let n = g.shape(h.center)[0];
        let (d_min, d_max) = (self.cfg.depth_min, self.cfg.depth_max);
        let ih = self.cfg.image_height as f64;

        // recovered box height in pixels, after clipping to the image
        let cy = g.slice_cols(h.center, 1, 1)?;
        let t = g.slice_cols(h.sides, 2, 1)?;
        let b = g.slice_cols(h.sides, 3, 1)?;
        let top = g.sub(cy, t)?;
        let top = g.scale(top, ih)?;
        let top = g.clamp(top, 0.0, ih)?;
        let bottom = g.add(cy, b)?;
        let bottom = g.scale(bottom, ih)?;
        let bottom = g.clamp(bottom, 0.0, ih)?;
        let h2d = g.sub(bottom, top)?;
        let h2d = g.reshape(h2d, &[n])?;
        let degenerate: Vec<bool> = g.values(h2d).iter().map(|&v| v <= 1.0).collect();
        let safe = g.mask_fill(h2d, degenerate.clone(), 1.0)?;
        let h3d = g.slice_cols(h.dims, 0, 1)?;
        let h3d = g.reshape(h3d, &[n])?;
        let geo = g.div(h3d, safe)?;
        let geo = g.scale(geo, focal_y)?;
        let geo = g.mask_fill(geo, degenerate, d_max)?;
        let geo = g.clamp(geo, d_min, d_max)?;

        let map = g.sample_bilinear(depth_grid, h.center)?;
        let sum = g.add(h.d_reg, geo)?;
        let sum = g.add(sum, map)?;
        g.scale(sum, 1.0 / 3.0)
    }

    /// Matching on detached predictions of one block.
    pub fn assign(&self, g: &Graph<'_>, block: &BlockOutputs, scene: &SceneSample) -> Result<MatchAssignment, MatcherError> {
        let preds = predictions(g, &block.heads, block.depth);
        let mut w = CostWeights::from_config(&self.cfg);
        w.image_size = (scene.width() as f64, scene.height() as f64);
        hungarian(&cost_matrix(&preds, &scene.objects, &w))
    }

    /// Training loss for one scene on a fresh tape.
    pub fn scene_loss<'p>(&'p self, g: &mut Graph<'p>, scene: &SceneSample) -> Result<(Var, LossBreakdown), ModelError> {
        let out = self.forward(g, &scene.image, scene.camera.fy())?;
        self.loss_from(g, &out, scene, None)
    }

    /// Loss with optional fixed assignments per supervised block.
    pub fn loss_from(
        &self,
        g: &mut Graph<'_>,
        out: &ForwardOutput,
        scene: &SceneSample,
        fixed: Option<&[MatchAssignment]>,
    ) -> Result<(Var, LossBreakdown), ModelError> {
        let supervised: Vec<BlockOutputs> = if self.cfg.aux_loss {
            out.blocks.clone()
        } else {
            out.blocks.last().copied().into_iter().collect()
        };
        let mut blocks = Vec::with_capacity(supervised.len());
        for (i, b) in supervised.into_iter().enumerate() {
            let a = match fixed {
                Some(f) => f[i].clone(),
                None => self.assign(g, &b, scene)?,
            };
            blocks.push((b, a));
        }
        let s = g.shape(out.depth.logits).to_vec();
        let target = build_depth_target(&scene.objects, self.depth.spec(), s[1], s[2], 16);
        let cfg = Config { image_width: scene.width(), image_height: scene.height(), ..self.cfg.clone() };
        Ok(overall_loss(g, &blocks, &scene.objects, out.depth.logits, &target, &cfg)?)
    }

    /// Assignments the loss would use for `scene` at the current weights.
    pub fn assignments(&self, scene: &SceneSample) -> Result<Vec<MatchAssignment>, ModelError> {
        let mut g = Graph::new(&self.store, false);
        let out = self.forward(&mut g, &scene.image, scene.camera.fy())?;
        let blocks: Vec<&BlockOutputs> =
            if self.cfg.aux_loss { out.blocks.iter().collect() } else { out.blocks.last().into_iter().collect() };
        Ok(blocks.into_iter().map(|b| self.assign(&g, b, scene)).collect::<Result<_, _>>()?)
    }

    /// Final-block predictions for every query.
    pub fn predict(&self, image: &Tensor, focal_y: f64) -> NResult<Vec<QueryPrediction>> {
        let mut g = Graph::new(&self.store, false);
        let out = self.forward(&mut g, image, focal_y)?;
        let last = out.blocks.last().expect("at least one decoder block");
        Ok(predictions(&g, &last.heads, last.depth))
    }
}

/// Confidence and class of a query.
pub fn score(pred: &QueryPrediction, mode: ScoreMode) -> (usize, f64) {
    let class = crate::depth::argmax(&pred.class_probs);
    let p = pred.class_probs[class];
    match mode {
        ScoreMode::Prob => (class, p),
        ScoreMode::Sigma => (class, p * (-pred.sigma()).exp()),
    }
}

/// Lifts queries scoring at least `threshold` to KITTI result objects.
pub fn detections(
    preds: &[QueryPrediction],
    cam: &CameraIntrinsics,
    width: usize,
    height: usize,
    threshold: f64,
    mode: ScoreMode,
) -> Vec<KittiObject> {
    let mut out: Vec<(f64, KittiObject)> = preds
        .iter()
        .filter_map(|p| {
            let (class, s) = score(p, mode);
            if s < threshold {
                return None;
            }
            let (u, v) = (p.center3d[0] * width as f64, p.center3d[1] * height as f64);
            let c = cam.back_project(u, v, p.depth);
            let location = [c[0], c[1] + p.dims[0] / 2.0, c[2]];
            let heading = p.heading();
            Some((
                s,
                KittiObject {
                    class_id: Some(class),
                    type_name: crate::data::class_name(class),
                    truncated: 0.0,
                    occluded: 0,
                    alpha: observation_angle(heading, location),
                    box2d: p.box2d(width as f64, height as f64),
                    dims: p.dims,
                    location,
                    heading,
                    score: Some(s),
                },
            ))
        })
        .collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out.into_iter().map(|(_, o)| o).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};

    #[test]
    fn tiny_model_runs_and_loss_is_finite() {
        let cfg = Config::tiny();
        let model = MonoDetr::new(&cfg).unwrap();
        let scene = generate_scene(1, &SceneSpec::from_config(&cfg));
        let mut g = Graph::new(&model.store, true);
        let (loss, parts) = model.scene_loss(&mut g, &scene).unwrap();
        assert!(g.item(loss).is_finite());
        assert!((parts.total() - g.item(loss)).abs() < 1e-12);
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        assert!(grads.iter().all(Option::is_some), "every parameter reached");
    }

    #[test]
    fn confidence_floor_above_one_emits_nothing() {
        let cfg = Config::tiny();
        let model = MonoDetr::new(&cfg).unwrap();
        let scene = generate_scene(2, &SceneSpec::from_config(&cfg));
        let preds = model.predict(&scene.image, scene.camera.fy()).unwrap();
        assert_eq!(preds.len(), cfg.num_queries);
        assert!(detections(&preds, &scene.camera, 64, 32, 1.1, ScoreMode::Prob).is_empty());
        assert_eq!(detections(&preds, &scene.camera, 64, 32, 0.0, ScoreMode::Prob).len(), cfg.num_queries);
    }
}
