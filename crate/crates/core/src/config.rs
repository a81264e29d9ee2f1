//! Flat `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a complete configuration; unknown keys are rejected.

use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
    #[error("reading configuration: {0}")]
    Io(#[from] std::io::Error),
}

macro_rules! choice {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl FromStr for $name {
            type Err = ();
            fn from_str(s: &str) -> Result<Self, ()> {
                match s { $($text => Ok(Self::$variant),)+ _ => Err(()) }
            }
        }

        impl Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
    };
}

choice!(
    /// Depth discretisation for the foreground depth map.
    BinMode { Lid => "lid", Ud => "ud", Sid => "sid" }
);
choice!(
    /// How a per-pixel bin distribution is turned into a depth.
    DepthDecode { Weighted => "weighted", Argmax => "argmax" }
);
choice!(
    /// Slot of the depth cross-attention inside each decoder block; `add` and
    /// `concat` instead merge depth embeddings into the visual cross-attention.
    DepthCaPosition {
        First => "1",
        Second => "2",
        Third => "3",
        Off => "off",
        Add => "add",
        Concat => "concat",
    }
);
choice!(
    /// What the depth cross-attention attends over.
    DepthEmbedSource { Encoder => "encoder", Conv1x1 => "conv1x1", Raw => "none", DepthMap => "depth_map" }
);
choice!(
    DepthPosEncoding { Learnable => "learnable", Sine => "sine" }
);
choice!(
    /// Classification term of the matching cost.
    MatchClassCost { Prob => "prob", Focal => "focal" }
);
choice!(
    /// Detection confidence at inference.
    ScoreMode { Prob => "prob", Sigma => "sigma" }
);

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    // model
    pub channels: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub head_hidden: usize,
    pub num_queries: usize,
    /// Std of the Gaussian the query embeddings start from.
    pub query_init_std: f64,
    pub num_classes: usize,
    pub visual_encoder_blocks: usize,
    pub depth_encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub orientation_bins: usize,
    pub depth_bins: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub bin_mode: BinMode,
    pub depth_decode: DepthDecode,
    pub depth_ca_position: DepthCaPosition,
    pub depth_embed_source: DepthEmbedSource,
    pub depth_pos_encoding: DepthPosEncoding,
    pub depth_pos_stop_grad: bool,
    pub aux_loss: bool,
    // loss
    pub lambda_class: f64,
    pub lambda_center: f64,
    pub lambda_lrtb: f64,
    pub lambda_giou: f64,
    pub lambda_dim: f64,
    pub lambda_orien: f64,
    pub lambda_depth: f64,
    pub lambda_dmap: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dmap_gamma: f64,
    pub match_class_cost: MatchClassCost,
    // optimisation
    pub learning_rate: f64,
    /// Linear learning-rate ramp over the first optimizer steps.
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    // data
    pub image_height: usize,
    pub image_width: usize,
    pub focal_length: f64,
    pub train_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub scene_depth_min: f64,
    pub scene_depth_max: f64,
    pub flip_prob: f64,
    // inference
    pub score_threshold: f64,
    pub score_mode: ScoreMode,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            channels: 64,
            heads: 8,
            ffn_width: 256,
            head_hidden: 64,
            num_queries: 50,
            query_init_std: 1.0,
            num_classes: 3,
            visual_encoder_blocks: 3,
            depth_encoder_blocks: 1,
            decoder_blocks: 3,
            orientation_bins: 12,
            depth_bins: 80,
            depth_min: 0.0,
            depth_max: 80.0,
            bin_mode: BinMode::Lid,
            depth_decode: DepthDecode::Weighted,
            depth_ca_position: DepthCaPosition::First,
            depth_embed_source: DepthEmbedSource::Encoder,
            depth_pos_encoding: DepthPosEncoding::Learnable,
            depth_pos_stop_grad: true,
            aux_loss: true,
            lambda_class: 2.0,
            lambda_center: 10.0,
            lambda_lrtb: 5.0,
            lambda_giou: 2.0,
            lambda_dim: 1.0,
            lambda_orien: 1.0,
            lambda_depth: 1.0,
            lambda_dmap: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dmap_gamma: 2.0,
            match_class_cost: MatchClassCost::Prob,
            learning_rate: 2e-4,
            warmup_steps: 0,
            weight_decay: 1e-4,
            epochs: 60,
            lr_decay_epochs: vec![40, 52],
            lr_decay_factor: 0.1,
            batch_size: 8,
            grad_clip_norm: 0.0,
            seed: 0,
            image_height: 96,
            image_width: 320,
            focal_length: 180.0,
            train_scenes: 200,
            min_objects: 1,
            max_objects: 4,
            scene_depth_min: 5.0,
            scene_depth_max: 45.0,
            flip_prob: 0.5,
            score_threshold: 0.2,
            score_mode: ScoreMode::Prob,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl Config {
    /// The small model used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            channels: 16,
            ffn_width: 32,
            head_hidden: 16,
            num_queries: 6,
            image_height: 32,
            image_width: 64,
            focal_length: 60.0,
            min_objects: 2,
            max_objects: 2,
            scene_depth_min: 4.0,
            scene_depth_max: 12.0,
            depth_bins: 16,
            depth_max: 20.0,
            ..Self::default()
        }
    }

    /// Memorizing a few fixed scenes: 20 scenes, full batch, 300 optimizer
    /// steps and no augmentation.
    pub fn overfit() -> Self {
        Self {
            train_scenes: 20,
            batch_size: 20,
            epochs: 300,
            learning_rate: 1e-3,
            warmup_steps: 20,
            lr_decay_epochs: vec![230],
            flip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(k.trim(), v.trim())?;
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "channels" => self.channels = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn_width" => self.ffn_width = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse(key, v)?,
            "num_queries" => self.num_queries = parse(key, v)?,
            "query_init_std" => self.query_init_std = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "visual_encoder_blocks" => self.visual_encoder_blocks = parse(key, v)?,
            "depth_encoder_blocks" => self.depth_encoder_blocks = parse(key, v)?,
            "decoder_blocks" => self.decoder_blocks = parse(key, v)?,
            "orientation_bins" => self.orientation_bins = parse(key, v)?,
            "depth_bins" => self.depth_bins = parse(key, v)?,
            "depth_min" => self.depth_min = parse(key, v)?,
            "depth_max" => self.depth_max = parse(key, v)?,
            "bin_mode" => self.bin_mode = parse(key, v)?,
            "depth_decode" => self.depth_decode = parse(key, v)?,
            "depth_ca_position" => self.depth_ca_position = parse(key, v)?,
            "depth_embed_source" => self.depth_embed_source = parse(key, v)?,
            "depth_pos_encoding" => self.depth_pos_encoding = parse(key, v)?,
            "depth_pos_stop_grad" => self.depth_pos_stop_grad = parse(key, v)?,
            "aux_loss" => self.aux_loss = parse(key, v)?,
            "lambda_class" => self.lambda_class = parse(key, v)?,
            "lambda_center" => self.lambda_center = parse(key, v)?,
            "lambda_lrtb" => self.lambda_lrtb = parse(key, v)?,
            "lambda_giou" => self.lambda_giou = parse(key, v)?,
            "lambda_dim" => self.lambda_dim = parse(key, v)?,
            "lambda_orien" => self.lambda_orien = parse(key, v)?,
            "lambda_depth" => self.lambda_depth = parse(key, v)?,
            "lambda_dmap" => self.lambda_dmap = parse(key, v)?,
            "focal_gamma" => self.focal_gamma = parse(key, v)?,
            "focal_alpha" => self.focal_alpha = parse(key, v)?,
            "dmap_gamma" => self.dmap_gamma = parse(key, v)?,
            "match_class_cost" => self.match_class_cost = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr_decay_epochs" => {
                self.lr_decay_epochs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_, _>>()?
            }
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "grad_clip_norm" => self.grad_clip_norm = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "image_height" => self.image_height = parse(key, v)?,
            "image_width" => self.image_width = parse(key, v)?,
            "focal_length" => self.focal_length = parse(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "min_objects" => self.min_objects = parse(key, v)?,
            "max_objects" => self.max_objects = parse(key, v)?,
            "scene_depth_min" => self.scene_depth_min = parse(key, v)?,
            "scene_depth_max" => self.scene_depth_max = parse(key, v)?,
            "flip_prob" => self.flip_prob = parse(key, v)?,
            "score_threshold" => self.score_threshold = parse(key, v)?,
            "score_mode" => self.score_mode = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Inconsistent(m.to_string()));
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail("heads must divide channels");
        }
        if self.depth_min < 0.0 || self.depth_min >= self.depth_max || self.depth_bins == 0 {
            return fail("need 0 <= depth_min < depth_max and depth_bins >= 1");
        }
        if self.depth_max.fract() != 0.0 || self.depth_min.fract() != 0.0 {
            return fail("depth range must be whole meters");
        }
        if !self.image_height.is_multiple_of(32) || !self.image_width.is_multiple_of(32) || self.image_height == 0 {
            return fail("image extents must be positive multiples of 32");
        }
        if self.num_queries == 0 || self.num_classes == 0 || self.orientation_bins == 0 {
            return fail("num_queries, num_classes and orientation_bins must be positive");
        }
        if self.decoder_blocks == 0 || self.batch_size == 0 {
            return fail("decoder_blocks and batch_size must be positive");
        }
        if self.min_objects > self.max_objects || self.max_objects > self.num_queries {
            return fail("need min_objects <= max_objects <= num_queries");
        }
        if self.scene_depth_min < self.depth_min + 1.0 || self.scene_depth_max > self.depth_max - 1.0 {
            return fail("scene depths must lie within [depth_min + 1, depth_max - 1]");
        }
        if !(self.query_init_std > 0.0) {
            return fail("query_init_std must be positive");
        }
        if self.scene_depth_min >= self.scene_depth_max {
            return fail("scene_depth_min must be below scene_depth_max");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

impl Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let decay: Vec<String> = self.lr_decay_epochs.iter().map(usize::to_string).collect();
        let rows: Vec<(&str, String)> = vec![
            ("channels", self.channels.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_width", self.ffn_width.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("num_queries", self.num_queries.to_string()),
            ("query_init_std", self.query_init_std.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("visual_encoder_blocks", self.visual_encoder_blocks.to_string()),
            ("depth_encoder_blocks", self.depth_encoder_blocks.to_string()),
            ("decoder_blocks", self.decoder_blocks.to_string()),
            ("orientation_bins", self.orientation_bins.to_string()),
            ("depth_bins", self.depth_bins.to_string()),
            ("depth_min", self.depth_min.to_string()),
            ("depth_max", self.depth_max.to_string()),
            ("bin_mode", self.bin_mode.to_string()),
            ("depth_decode", self.depth_decode.to_string()),
            ("depth_ca_position", self.depth_ca_position.to_string()),
            ("depth_embed_source", self.depth_embed_source.to_string()),
            ("depth_pos_encoding", self.depth_pos_encoding.to_string()),
            ("depth_pos_stop_grad", self.depth_pos_stop_grad.to_string()),
            ("aux_loss", self.aux_loss.to_string()),
            ("lambda_class", self.lambda_class.to_string()),
            ("lambda_center", self.lambda_center.to_string()),
            ("lambda_lrtb", self.lambda_lrtb.to_string()),
            ("lambda_giou", self.lambda_giou.to_string()),
            ("lambda_dim", self.lambda_dim.to_string()),
            ("lambda_orien", self.lambda_orien.to_string()),
            ("lambda_depth", self.lambda_depth.to_string()),
            ("lambda_dmap", self.lambda_dmap.to_string()),
            ("focal_gamma", self.focal_gamma.to_string()),
            ("focal_alpha", self.focal_alpha.to_string()),
            ("dmap_gamma", self.dmap_gamma.to_string()),
            ("match_class_cost", self.match_class_cost.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr_decay_epochs", decay.join(",")),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("grad_clip_norm", self.grad_clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("focal_length", self.focal_length.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("min_objects", self.min_objects.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("scene_depth_min", self.scene_depth_min.to_string()),
            ("scene_depth_max", self.scene_depth_max.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            ("score_threshold", self.score_threshold.to_string()),
            ("score_mode", self.score_mode.to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = Config::default();
        assert_eq!((c.visual_encoder_blocks, c.depth_encoder_blocks, c.decoder_blocks), (3, 1, 3));
        assert_eq!((c.heads, c.num_queries, c.depth_bins), (8, 50, 80));
        assert_eq!((c.depth_min, c.depth_max), (0.0, 80.0));
        assert_eq!(c.bin_mode, BinMode::Lid);
        assert_eq!(c.depth_decode, DepthDecode::Weighted);
        assert_eq!(c.depth_ca_position, DepthCaPosition::First);
        let lambdas = [
            c.lambda_class,
            c.lambda_center,
            c.lambda_lrtb,
            c.lambda_giou,
            c.lambda_dim,
            c.lambda_orien,
            c.lambda_depth,
        ];
        assert_eq!(lambdas, [2.0, 10.0, 5.0, 2.0, 1.0, 1.0, 1.0]);
        c.validate().unwrap();
        Config::tiny().validate().unwrap();
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let mut c = Config::default();
        c.apply_override("bin_mode=sid").unwrap();
        c.apply_override("lr_decay_epochs = 3,5").unwrap();
        c.apply_override("depth_ca_position=off").unwrap();
        let back = Config::from_text(&c.to_string()).unwrap();
        assert_eq!(back, c);
        assert!(matches!(c.apply_override("nope=1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.apply_override("heads=x"), Err(ConfigError::InvalidValue { .. })));
        assert!(c.apply_override("heads=7").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = Config::from_text("# model\n\nchannels = 32 # narrower\nseed=4\n").unwrap();
        assert_eq!((c.channels, c.seed), (32, 4));
        assert!(matches!(Config::from_text("channels 3"), Err(ConfigError::Syntax { line: 1 })));
    }

    #[test]
    fn step_schedule() {
        let c = Config::default();
        assert_eq!(c.learning_rate_at(0), 2e-4);
        assert!((c.learning_rate_at(40) - 2e-5).abs() < 1e-18);
        assert!((c.learning_rate_at(59) - 2e-6).abs() < 1e-18);
    }
}
