//! Central finite differences against reverse-mode gradients of the full
//! training loss, reported per parameter group.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{generate_scene, SceneSpec};
use crate::model::{ModelError, MonoDetr};
use crate::nn::Graph;
use crate::numerics::OpKind;
use crate::train::train_scene_seed;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    /// Entries checked per parameter tensor (the largest-gradient entry is
    /// always among them).
    pub samples: usize,
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Corrupts one backward rule, for testing the checker itself.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { tolerance: 1e-3, samples: 3, step: 1e-5, floor: 1e-5, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Parameter group of a parameter name.
pub fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts[0] {
        "decoder" => format!("decoder.{}", parts.get(2).unwrap_or(&"")),
        "visual_enc" | "depth_enc" => {
            let sub = parts.get(2).unwrap_or(&"");
            let sub = if sub.starts_with("ln") { "norm" } else { sub };
            format!("{}.{}", parts[0], sub)
        }
        "heads" => format!("heads.{}", parts.get(1).unwrap_or(&"")),
        "transformer" => parts.get(1).unwrap_or(&"transformer").to_string(),
        other => other.to_string(),
    }
}

/// Checks the loss of the first training scene of `cfg`. Assignments are
/// fixed at the unperturbed weights. The depth positional stop-gradient is
/// lifted, since finite differences see through it.
pub fn gradcheck(cfg: &Config, opts: &GradcheckOptions) -> Result<Vec<GroupReport>, ModelError> {
    let cfg = &Config { depth_pos_stop_grad: false, ..cfg.clone() };
    let mut model = MonoDetr::new(cfg)?;
    let scene = generate_scene(train_scene_seed(cfg, 0), &SceneSpec::from_config(cfg));
    let fixed = model.assignments(&scene)?;

    let grads = {
        let mut g = Graph::new(&model.store, true);
        if let Some((kind, factor)) = opts.fault {
            g.inject_fault(kind, factor);
        }
        let out = model.forward(&mut g, &scene.image, scene.camera.fy())?;
        let (loss, _) = model.loss_from(&mut g, &out, &scene, Some(&fixed))?;
        g.backward(loss)?;
        g.param_grads()
    };

    let loss_at = |m: &MonoDetr| -> Result<f64, ModelError> {
        let mut g = Graph::new(&m.store, false);
        let out = m.forward(&mut g, &scene.image, scene.camera.fy())?;
        let (loss, _) = m.loss_from(&mut g, &out, &scene, Some(&fixed))?;
        Ok(g.item(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for id in model.store.ids().collect::<Vec<_>>() {
        let group = group_of(model.store.name(id));
        let len = model.store.get(id).len();
        let analytic = grads[id.index()].clone().unwrap_or_else(|| vec![0.0; len]);
        let mut picks = vec![analytic
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map_or(0, |(i, _)| i)];
        while picks.len() < opts.samples.min(len) {
            let i = rng.random_range(0..len);
            if !picks.contains(&i) {
                picks.push(i);
            }
        }
        let entry = groups.entry(group).or_insert((0.0, 0));
        for i in picks {
            let orig = model.store.get(id).values()[i];
            model.store.get_mut(id).values_mut()[i] = orig + opts.step;
            let up = loss_at(&model)?;
            model.store.get_mut(id).values_mut()[i] = orig - opts.step;
            let down = loss_at(&model)?;
            model.store.get_mut(id).values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            entry.0 = entry.0.max(err);
            entry.1 += 1;
        }
    }
    Ok(groups
        .into_iter()
        .map(|(group, (max_rel_err, checked))| GroupReport {
            group,
            max_rel_err,
            checked,
            passed: max_rel_err < opts.tolerance,
        })
        .collect())
}

pub fn format_report(reports: &[GroupReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "{:<24} {:>4} entries  max rel err {:.3e}  {}\n",
            r.group,
            r.checked,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}
