//! Every ablation switch builds a model that trains and predicts.

use monodetr::config::{
    BinMode, Config, DepthCaPosition, DepthDecode, DepthEmbedSource, DepthPosEncoding, MatchClassCost, ScoreMode,
};
use monodetr::data::{generate_scene, SceneSpec};
use monodetr::model::{detections, MonoDetr};
use monodetr::nn::Graph;
use monodetr::train::{train_scene_seed, training_scenes, Trainer};

fn variants() -> Vec<(String, Config)> {
    let base = Config::tiny();
    let mut out = Vec::new();
    let mut push = |name: String, cfg: Config| out.push((name, cfg));
    for m in [BinMode::Lid, BinMode::Ud, BinMode::Sid] {
        push(format!("bin_mode={m}"), Config { bin_mode: m, ..base.clone() });
    }
    for d in [DepthDecode::Weighted, DepthDecode::Argmax] {
        push(format!("depth_decode={d}"), Config { depth_decode: d, ..base.clone() });
    }
    for p in [
        DepthCaPosition::First,
        DepthCaPosition::Second,
        DepthCaPosition::Third,
        DepthCaPosition::Off,
        DepthCaPosition::Add,
        DepthCaPosition::Concat,
    ] {
        push(format!("depth_ca_position={p}"), Config { depth_ca_position: p, ..base.clone() });
    }
    for s in [DepthEmbedSource::Encoder, DepthEmbedSource::Conv1x1, DepthEmbedSource::Raw, DepthEmbedSource::DepthMap] {
        push(format!("depth_embed_source={s}"), Config { depth_embed_source: s, ..base.clone() });
    }
    for e in [DepthPosEncoding::Learnable, DepthPosEncoding::Sine] {
        push(format!("depth_pos_encoding={e}"), Config { depth_pos_encoding: e, ..base.clone() });
    }
    push("depth_pos_stop_grad=false".into(), Config { depth_pos_stop_grad: false, ..base.clone() });
    push("aux_loss=false".into(), Config { aux_loss: false, ..base.clone() });
    push("match_class_cost=focal".into(), Config { match_class_cost: MatchClassCost::Focal, ..base.clone() });
    push("score_mode=sigma".into(), Config { score_mode: ScoreMode::Sigma, ..base.clone() });
    push("lambda_dmap=0".into(), Config { lambda_dmap: 0.0, ..base.clone() });
    out
}

#[test]
fn every_variant_has_finite_loss_and_gradients() {
    for (name, cfg) in variants() {
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        let model = MonoDetr::new(&cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
        let scene = generate_scene(train_scene_seed(&cfg, 0), &SceneSpec::from_config(&cfg));
        let mut g = Graph::new(&model.store, true);
        let (loss, parts) = model.scene_loss(&mut g, &scene).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(parts.total().is_finite(), "{name}: loss {}", parts.total());
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        let finite = grads.iter().flatten().flatten().all(|v| v.is_finite());
        assert!(finite, "{name}: non-finite gradient");
        assert!(grads.iter().flatten().flatten().any(|v| *v != 0.0), "{name}: all gradients zero");

        let preds = model.predict(&scene.image, scene.camera.fy()).unwrap();
        assert_eq!(preds.len(), cfg.num_queries, "{name}");
        let dets = detections(&preds, &scene.camera, scene.width(), scene.height(), 0.0, cfg.score_mode);
        assert!(dets.iter().all(|d| d.score.is_some_and(f64::is_finite)), "{name}");
    }
}

#[test]
fn dmap_weight_zero_leaves_loss_without_dmap_term() {
    let cfg = Config { lambda_dmap: 0.0, ..Config::tiny() };
    let model = MonoDetr::new(&cfg).unwrap();
    let scene = generate_scene(train_scene_seed(&cfg, 0), &SceneSpec::from_config(&cfg));
    let with = {
        let full = MonoDetr::new(&Config::tiny()).unwrap();
        let mut g = Graph::new(&full.store, false);
        full.scene_loss(&mut g, &scene).unwrap().1
    };
    let mut g = Graph::new(&model.store, false);
    let without = model.scene_loss(&mut g, &scene).unwrap().1;
    assert!(without.0[7] > 0.0);
    assert!((with.total() - without.total() - with.0[7]).abs() < 1e-9);
}

#[test]
fn one_training_step_changes_the_loss() {
    let cfg = Config { train_scenes: 2, batch_size: 2, ..Config::tiny() };
    let scenes = training_scenes(&cfg);
    let mut t = Trainer::new(&cfg, scenes.clone()).unwrap();
    let before = t.run_epoch().unwrap().total();
    let after = t.run_epoch().unwrap().total();
    assert!(before.is_finite() && after.is_finite());
    assert_ne!(before, after);
}
