//! Command-line front end and the library routines behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::data::{self, DataError, KittiObject, SceneSample};
use crate::eval::{evaluate, format_report, MetricRow};
use crate::gradcheck::{self, GradcheckOptions};
use crate::imageio::{self, ImageError};
use crate::model::{detections, ModelError, MonoDetr};
use crate::nn::Graph;
use crate::numerics::NumericsError;
use crate::train::{self, heldout_scenes, training_scenes, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("query index {index} out of range for {queries} queries")]
    QueryRange { index: usize, queries: usize },
    #[error("the model has no depth cross-attention to dump")]
    NoDepthAttention,
    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    /// Small model used by the gradient check.
    Tiny,
    /// Settings for memorizing a handful of scenes.
    Overfit,
}

impl Preset {
    pub fn config(self) -> Config {
        match self {
            Self::Default => Config::default(),
            Self::Tiny => Config::tiny(),
            Self::Overfit => Config::overfit(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "monodetr", version, about = "Depth-guided detection transformer for monocular 3D detection")]
pub struct Cli {
    /// Built-in starting configuration (gradcheck defaults to tiny).
    #[arg(long, value_enum, global = true)]
    pub preset: Option<Preset>,
    /// `key = value` configuration file applied over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single `key=value` override, applied after the file.
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on generated scenes, writing loss.csv and checkpoint.bin each epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or score existing result files against labels.
    Eval(EvalArgs),
    /// Write KITTI result files for a dataset directory.
    Infer(InferArgs),
    /// Compare autodiff gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write depth cross-attention maps and the depth map as PGM images.
    DumpAttn(DumpArgs),
    /// Write generated scenes as a KITTI-style dataset directory.
    GenData(GenArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/checkpoint.bin`.
    #[arg(long)]
    pub resume: bool,
    /// Threads per batch; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "results")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory; without it, held-out scenes are generated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of generated held-out scenes.
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    /// Directory of KITTI result files to score instead of running a model.
    #[arg(long, requires = "labels")]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Entries checked per parameter tensor.
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding the scene; without it a scene is generated.
    #[arg(long, requires = "id")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<String>,
    /// Seed of the generated scene.
    #[arg(long, default_value_t = 0)]
    pub scene_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub queries: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Generate the held-out split instead of the training split.
    #[arg(long)]
    pub heldout: bool,
}

impl Cli {
    /// Preset, then file, then overrides, then `--seed`.
    pub fn resolve_config(&self) -> Result<Config, CliError> {
        let default = match self.command {
            Command::Gradcheck(_) => Preset::Tiny,
            _ => Preset::Default,
        };
        let mut cfg = self.preset.unwrap_or(default).config();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Configuration stored next to a checkpoint, if any, else `fallback`.
fn checkpoint_config(cli: &Cli, checkpoint: &Path, fallback: Config) -> Result<Config, CliError> {
    let stored = checkpoint.parent().map(|p| p.join("config.txt"));
    match stored {
        Some(p) if cli.config.is_none() && cli.preset.is_none() && p.exists() => {
            let mut cfg = Config::load(&p)?;
            for kv in &cli.overrides {
                cfg.apply_override(kv)?;
            }
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            Ok(cfg)
        }
        _ => Ok(fallback),
    }
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::Train(a) => {
            let scenes = training_scenes(&cfg);
            let ck = a.out.join("checkpoint.bin");
            let mut trainer = if a.resume && ck.exists() {
                Trainer::load(&ck, &cfg, scenes)?
            } else {
                Trainer::new(&cfg, scenes)?
            };
            trainer.workers = a.workers.max(1);
            trainer.run(&a.out, |epoch, l| eprintln!("epoch {epoch}: total {:.4}", l.total()))?;
            Ok(format!("trained {} epochs into {}\n", trainer.epoch, a.out.display()))
        }
        Command::Eval(a) => {
            if let Some(results) = &a.results {
                let labels = a.labels.as_deref().ok_or_else(|| CliError::Usage("--results needs --labels".into()))?;
                let report = format_report(&evaluate_dirs(results, labels, cfg.num_classes)?);
                if let Some(out) = &a.out {
                    create_dir(out)?;
                    write(&out.join("report.txt"), &report)?;
                }
                return Ok(report);
            }
            let ck = a.checkpoint.as_deref().ok_or_else(|| CliError::Usage("eval needs --checkpoint or --results".into()))?;
            let cfg = checkpoint_config(cli, ck, cfg)?;
            let model = train::load_model(ck, &cfg)?;
            let scenes = match &a.data {
                Some(dir) => read_dataset(dir)?,
                None => heldout_scenes(&cfg, a.scenes),
            };
            let rows = evaluate_model(&model, &scenes, a.out.as_deref())?;
            Ok(format_report(&rows))
        }
        Command::Infer(a) => {
            let cfg = checkpoint_config(cli, &a.checkpoint, cfg)?;
            let model = train::load_model(&a.checkpoint, &cfg)?;
            let scenes = read_dataset(&a.data)?;
            create_dir(&a.out)?;
            let mut n = 0;
            for s in &scenes {
                let dets = infer(&model, s)?;
                n += dets.len();
                data::write_kitti_file(&a.out.join(format!("{}.txt", s.id)), &dets)?;
            }
            Ok(format!("{n} detections over {} scenes\n", scenes.len()))
        }
        Command::Gradcheck(a) => {
            let opts = GradcheckOptions { tolerance: a.tolerance, samples: a.samples.max(1), ..GradcheckOptions::default() };
            let reports = gradcheck::gradcheck(&cfg, &opts)?;
            let text = gradcheck::format_report(&reports);
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.group.as_str()).collect();
            if failed.is_empty() {
                Ok(text)
            } else {
                print!("{text}");
                Err(CliError::GradcheckFailed(failed.join(", ")))
            }
        }
        Command::DumpAttn(a) => {
            let cfg = checkpoint_config(cli, &a.checkpoint, cfg)?;
            let model = train::load_model(&a.checkpoint, &cfg)?;
            let scene = match (&a.data, &a.id) {
                (Some(dir), Some(id)) => data::read_scene(dir, id)?,
                _ => data::generate_scene(a.scene_seed, &data::SceneSpec::from_config(&cfg)),
            };
            let files = dump_attention(&model, &scene, &a.queries, &a.out)?;
            Ok(files.iter().map(|f| format!("{}\n", f.display())).collect())
        }
        Command::GenData(a) => {
            let cfg = Config { train_scenes: a.count, ..cfg };
            let scenes = if a.heldout { heldout_scenes(&cfg, a.count) } else { training_scenes(&cfg) };
            for s in &scenes {
                data::write_scene(&a.out, s)?;
            }
            Ok(format!("wrote {} scenes to {}\n", scenes.len(), a.out.display()))
        }
    }
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>, CliError> {
    let ids = data::dataset_ids(dir)?;
    Ok(ids.iter().map(|id| data::read_scene(dir, id)).collect::<Result<_, _>>()?)
}

/// Detections of the final decoder block above the configured floor.
pub fn infer(model: &MonoDetr, scene: &SceneSample) -> Result<Vec<KittiObject>, CliError> {
    let preds = model.predict(&scene.image, scene.camera.fy())?;
    let cfg = &model.cfg;
    Ok(detections(&preds, &scene.camera, scene.width(), scene.height(), cfg.score_threshold, cfg.score_mode))
}

/// Runs the model on every scene and scores it; with `out`, also writes
/// `results/<id>.txt` and `report.txt`.
pub fn evaluate_model(model: &MonoDetr, scenes: &[SceneSample], out: Option<&Path>) -> Result<Vec<MetricRow>, CliError> {
    let mut results = Vec::with_capacity(scenes.len());
    let mut labels = Vec::with_capacity(scenes.len());
    for s in scenes {
        results.push(infer(model, s)?);
        labels.push(s.objects.iter().map(|o| KittiObject::from_ground_truth(o, None)).collect());
    }
    let rows = evaluate(&results, &labels, model.cfg.num_classes);
    if let Some(out) = out {
        let dir = out.join("results");
        create_dir(&dir)?;
        for (s, r) in scenes.iter().zip(&results) {
            data::write_kitti_file(&dir.join(format!("{}.txt", s.id)), r)?;
        }
        write(&out.join("report.txt"), &format_report(&rows))?;
    }
    Ok(rows)
}

/// Scores result files against label files of the same names. A label
/// file without a result file counts as an image with no detections.
pub fn evaluate_dirs(results: &Path, labels: &Path, num_classes: usize) -> Result<Vec<MetricRow>, CliError> {
    let mut ids: Vec<String> = fs::read_dir(labels)
        .map_err(io_err(labels))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".txt").map(str::to_string))
        .collect();
    ids.sort();
    let mut res = Vec::with_capacity(ids.len());
    let mut gts = Vec::with_capacity(ids.len());
    for id in &ids {
        gts.push(data::read_kitti_file(&labels.join(format!("{id}.txt")))?);
        let r = results.join(format!("{id}.txt"));
        res.push(if r.exists() { data::read_kitti_file(&r)? } else { Vec::new() });
    }
    Ok(evaluate(&res, &gts, num_classes))
}

/// Head-averaged depth attention of one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    /// Grid of the depth tokens (`H/16 × W/16`).
    pub height: usize,
    pub width: usize,
    /// Per decoder block, per query, `height * width` weights.
    pub maps: Vec<Vec<Vec<f64>>>,
    /// Predicted depth per grid cell.
    pub depth_map: Vec<f64>,
}

pub fn attention_maps(model: &MonoDetr, scene: &SceneSample) -> Result<AttentionDump, CliError> {
    let mut g = Graph::new(&model.store, false);
    let out = model.forward(&mut g, &scene.image, scene.camera.fy())?;
    let grid = g.shape(out.depth.depth_grid).to_vec();
    let (height, width) = (grid[grid.len() - 2], grid[grid.len() - 1]);
    let mut maps = Vec::with_capacity(out.transformer.depth_attention.len());
    for heads in &out.transformer.depth_attention {
        if heads.is_empty() {
            return Err(CliError::NoDepthAttention);
        }
        let n = g.shape(heads[0])[0];
        let t = g.shape(heads[0])[1];
        let mut avg = vec![vec![0.0; t]; n];
        for &h in heads {
            for (row, vals) in avg.iter_mut().zip(g.values(h).chunks(t)) {
                for (a, v) in row.iter_mut().zip(vals) {
                    *a += v / heads.len() as f64;
                }
            }
        }
        maps.push(avg);
    }
    if maps.is_empty() {
        return Err(CliError::NoDepthAttention);
    }
    Ok(AttentionDump { height, width, maps, depth_map: g.values(out.depth.depth_grid).to_vec() })
}

/// Rescales to `[0, 1]`; a constant map becomes mid-gray.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Writes `attn_b{block}_q{query}.pgm` for each block and requested query,
/// plus `depth_map.pgm` scaled over the depth range.
pub fn dump_attention(model: &MonoDetr, scene: &SceneSample, queries: &[usize], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let n = model.cfg.num_queries;
    if let Some(&index) = queries.iter().find(|&&q| q >= n) {
        return Err(CliError::QueryRange { index, queries: n });
    }
    let dump = attention_maps(model, scene)?;
    create_dir(out)?;
    let mut files = Vec::new();
    for (b, block) in dump.maps.iter().enumerate() {
        for &q in queries {
            let path = out.join(format!("attn_b{b}_q{q}.pgm"));
            imageio::write_pgm(&path, dump.height, dump.width, &min_max_normalize(&block[q]))?;
            files.push(path);
        }
    }
    let (lo, hi) = (model.cfg.depth_min, model.cfg.depth_max);
    let scaled: Vec<f64> = dump.depth_map.iter().map(|d| ((d - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
    let path = out.join("depth_map.pgm");
    imageio::write_pgm(&path, dump.height, dump.width, &scaled)?;
    files.push(path);
    Ok(files)
}
