//! AdamW training loop, loss log and resumable training state.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::Config;
use crate::data::{flip_horizontal, generate_scene, SceneSample, SceneSpec};
use crate::matcher::{LossBreakdown, MatcherError, TERM_NAMES};
use crate::model::{ModelError, MonoDetr};
use crate::nn::{Graph, ParamStore};
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value in {term}; aborting")]
    NonFinite { term: String },
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Matcher(MatcherError::NonFiniteLoss { term }) => Self::NonFinite { term: term.to_string() },
            ModelError::Numerics(NumericsError::NonFinite { op }) => Self::NonFinite { term: format!("forward pass ({op})") },
            other => Self::Model(other),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

/// Seed of training scene `i`.
pub fn train_scene_seed(cfg: &Config, i: usize) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Seed of held-out scene `i`, far from every training seed.
pub fn heldout_scene_seed(cfg: &Config, i: usize) -> u64 {
    train_scene_seed(cfg, i).wrapping_add(1 << 40)
}

pub fn training_scenes(cfg: &Config) -> Vec<SceneSample> {
    let spec = SceneSpec::from_config(cfg);
    (0..cfg.train_scenes).map(|i| generate_scene(train_scene_seed(cfg, i), &spec)).collect()
}

pub fn heldout_scenes(cfg: &Config, count: usize) -> Vec<SceneSample> {
    let spec = SceneSpec::from_config(cfg);
    (0..count).map(|i| generate_scene(heldout_scene_seed(cfg, i), &spec)).collect()
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).values_mut();
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= lr * (step + weight_decay * p[i]);
            }
        }
    }
}

/// Loss and dense gradients of one scene.
pub fn scene_gradients(model: &MonoDetr, scene: &SceneSample) -> Result<(Vec<Vec<f64>>, LossBreakdown), TrainError> {
    let mut g = Graph::new(&model.store, true);
    let (loss, parts) = model.scene_loss(&mut g, scene)?;
    g.backward(loss).map_err(ModelError::from)?;
    let grads: Vec<Vec<f64>> = g
        .param_grads()
        .into_iter()
        .zip(model.store.iter())
        .map(|(grad, (_, t))| grad.unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((grads, parts))
}

pub struct Trainer {
    pub model: MonoDetr,
    pub opt: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean per-scene losses of each completed epoch.
    pub history: Vec<LossBreakdown>,
    pub scenes: Vec<SceneSample>,
    /// Scenes of a batch processed concurrently; results do not depend on it.
    pub workers: usize,
}

impl Trainer {
    pub fn new(cfg: &Config, scenes: Vec<SceneSample>) -> Result<Self, TrainError> {
        let model = MonoDetr::new(cfg)?;
        let opt = AdamW::new(&model.store);
        Ok(Self { model, opt, epoch: 0, history: Vec::new(), scenes, workers: 1 })
    }

    fn cfg(&self) -> &Config {
        &self.model.cfg
    }

    /// Batches of scene order and flips for `epoch`, derived from the seed
    /// and the epoch number only.
    pub fn epoch_plan(&self, epoch: usize) -> Vec<Vec<(usize, bool)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg().seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.scenes.len()).collect();
        order.shuffle(&mut rng);
        let flip_prob = self.cfg().flip_prob;
        let plan: Vec<(usize, bool)> = order.into_iter().map(|i| (i, rng.random_bool(flip_prob))).collect();
        plan.chunks(self.cfg().batch_size.max(1)).map(<[_]>::to_vec).collect()
    }

    /// One optimizer step on the batch; returns the mean per-scene losses.
    pub fn step(&mut self, batch: &[SceneSample], lr: f64) -> Result<LossBreakdown, TrainError> {
        let results = self.batch_gradients(batch)?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = self.model.store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let mut mean = LossBreakdown::default();
        for (g, parts) in &results {
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(gi) {
                    *a += b * scale;
                }
            }
            mean.add(&parts.scaled(scale));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { term: "gradient".into() });
        }
        let clip = self.cfg().grad_clip_norm;
        if clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let wd = self.cfg().weight_decay;
        let warmup = self.cfg().warmup_steps;
        let lr = if warmup > 0 { lr * ((self.opt.step + 1) as f64 / warmup as f64).min(1.0) } else { lr };
        self.opt.update(&mut self.model.store, &grads, lr, wd);
        Ok(mean)
    }

    fn batch_gradients(&self, batch: &[SceneSample]) -> Result<Vec<(Vec<Vec<f64>>, LossBreakdown)>, TrainError> {
        let workers = self.workers.clamp(1, batch.len().max(1));
        if workers == 1 {
            return batch.iter().map(|s| scene_gradients(&self.model, s)).collect();
        }
        let model = &self.model;
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| scene_gradients(model, s)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }

    /// Trains one epoch and records its mean losses.
    pub fn run_epoch(&mut self) -> Result<LossBreakdown, TrainError> {
        let epoch = self.epoch;
        let lr = self.cfg().learning_rate_at(epoch);
        let mut total = LossBreakdown::default();
        let n = self.scenes.len() as f64;
        for batch in self.epoch_plan(epoch) {
            let scenes: Vec<SceneSample> = batch
                .iter()
                .map(|&(i, flip)| if flip { flip_horizontal(&self.scenes[i]) } else { self.scenes[i].clone() })
                .collect();
            let mean = self.step(&scenes, lr)?;
            total.add(&mean.scaled(scenes.len() as f64 / n));
        }
        self.epoch += 1;
        self.history.push(total);
        Ok(total)
    }

    /// Trains until `cfg.epochs`, writing `config.txt`, `loss.csv` and
    /// `checkpoint.bin` into `out` after every epoch.
    pub fn run(&mut self, out: &Path, mut on_epoch: impl FnMut(usize, &LossBreakdown)) -> Result<(), TrainError> {
        fs::create_dir_all(out).map_err(|source| TrainError::Io { path: out.display().to_string(), source })?;
        write_file(&out.join("config.txt"), &self.cfg().to_string())?;
        while self.epoch < self.cfg().epochs {
            let losses = self.run_epoch()?;
            on_epoch(self.epoch, &losses);
            write_file(&out.join("loss.csv"), &self.loss_csv())?;
            self.save(&out.join("checkpoint.bin"))?;
        }
        Ok(())
    }

    pub fn loss_csv(&self) -> String {
        loss_csv(&self.history)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let store = &self.model.store;
        let mut arrays = Vec::with_capacity(3 * store.len() + 4);
        for (k, (name, t)) in store.iter().enumerate() {
            arrays.push((format!("param/{name}"), t.values().to_vec()));
            arrays.push((format!("adam_m/{name}"), self.opt.m[k].clone()));
            arrays.push((format!("adam_v/{name}"), self.opt.v[k].clone()));
        }
        arrays.push(("state/step".into(), vec![self.opt.step as f64]));
        arrays.push(("state/epoch".into(), vec![self.epoch as f64]));
        let seed = self.cfg().seed;
        arrays.push(("state/seed".into(), vec![(seed >> 32) as f64, (seed & 0xffff_ffff) as f64]));
        arrays.push(("history".into(), self.history.iter().flat_map(|h| h.0).collect()));
        checkpoint::save(path, &arrays)?;
        Ok(())
    }

    /// Restores weights, optimizer moments, epoch and history into a trainer
    /// built from the same configuration.
    pub fn load(path: &Path, cfg: &Config, scenes: Vec<SceneSample>) -> Result<Self, TrainError> {
        let arrays = checkpoint::load(path)?;
        let mut t = Self::new(cfg, scenes)?;
        restore_params(&mut t.model.store, &arrays)?;
        let names: Vec<String> = t.model.store.iter().map(|(n, _)| n.to_string()).collect();
        for (k, name) in names.iter().enumerate() {
            for (prefix, dest) in [("adam_m", &mut t.opt.m[k]), ("adam_v", &mut t.opt.v[k])] {
                let v = checkpoint::find(&arrays, &format!("{prefix}/{name}"))?;
                if v.len() != dest.len() {
                    return Err(TrainError::Mismatch(format!("{prefix}/{name}")));
                }
                dest.copy_from_slice(v);
            }
        }
        t.opt.step = checkpoint::find(&arrays, "state/step")?[0] as u64;
        t.epoch = checkpoint::find(&arrays, "state/epoch")?[0] as usize;
        let seed = checkpoint::find(&arrays, "state/seed")?;
        let stored = ((seed[0] as u64) << 32) | seed[1] as u64;
        if stored != cfg.seed {
            return Err(TrainError::Mismatch(format!("seed {stored} vs configured {}", cfg.seed)));
        }
        let hist = checkpoint::find(&arrays, "history")?;
        t.history = hist.chunks_exact(9).map(|c| LossBreakdown(c.try_into().expect("9 values"))).collect();
        Ok(t)
    }
}

/// Copies `param/<name>` arrays into the store.
pub fn restore_params(store: &mut ParamStore, arrays: &[(String, Vec<f64>)]) -> Result<(), TrainError> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = format!("param/{}", store.name(id));
        let v = checkpoint::find(arrays, &name)?;
        let dest = store.get_mut(id).values_mut();
        if v.len() != dest.len() {
            return Err(CheckpointError::Length { name, expected: dest.len(), found: v.len() }.into());
        }
        dest.copy_from_slice(v);
    }
    Ok(())
}

/// Model with weights read from a checkpoint.
pub fn load_model(path: &Path, cfg: &Config) -> Result<MonoDetr, TrainError> {
    let arrays = checkpoint::load(path)?;
    let mut model = MonoDetr::new(cfg)?;
    restore_params(&mut model.store, &arrays)?;
    Ok(model)
}

pub fn loss_csv(history: &[LossBreakdown]) -> String {
    let mut s = format!("epoch,{}\n", TERM_NAMES.join(","));
    for (e, h) in history.iter().enumerate() {
        write!(s, "{}", e + 1).expect("string write");
        for v in h.0 {
            write!(s, ",{v}").expect("string write");
        }
        s.push('\n');
    }
    s
}
