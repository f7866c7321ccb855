use murmur_autodiff::StreamKey;
use murmur_core::features::{FeatureMap, N_FRAMES, N_MELS};
use murmur_core::model::{Mode, ModelConfig, ModelState};
use murmur_core::training::{
    batch_gradients, eval_logits, train, weighted_ce, AdamW, Labeled, PlateauSchedule, TrainConfig,
    TrainOutputs,
};
use murmur_core::ClassLabel;
use proptest::prelude::*;
use rand::Rng;

fn small() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        head_dim: 4,
        model_dim: 8,
        subsample_channels: 2,
        conv_kernel: 5,
        max_rel_offset: 8,
        ..ModelConfig::default()
    }
}

fn maps(n: usize, seed: u64) -> Vec<FeatureMap> {
    (0..n)
        .map(|i| {
            let mut rng = StreamKey::root(seed).index(i as u64).rng();
            FeatureMap::new(
                (0..N_MELS * N_FRAMES)
                    .map(|_| rng.random_range(-3.0..1.0))
                    .collect(),
            )
            .unwrap()
        })
        .collect()
}

fn labeled(maps: &[FeatureMap]) -> Vec<Labeled<'_>> {
    maps.iter()
        .enumerate()
        .map(|(i, m)| (m, ClassLabel::from_index(i % 3).unwrap()))
        .collect()
}

fn eval_loss(model: &ModelState<f32>, set: &[Labeled<'_>], w: &[f64; 3]) -> f64 {
    let maps: Vec<&FeatureMap> = set.iter().map(|(m, _)| *m).collect();
    let labels: Vec<ClassLabel> = set.iter().map(|(_, l)| *l).collect();
    weighted_ce(&eval_logits(model, &maps, 16).unwrap(), &labels, w).unwrap()
}

#[test]
fn tiny_step_lowers_batch_loss() {
    let data = maps(6, 3);
    let set = labeled(&data);
    let cfg = TrainConfig {
        lr0: 1e-6,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    for seed in 0..3 {
        let mut model = ModelState::<f32>::init(small(), StreamKey::root(seed)).unwrap();
        let before = eval_loss(&model, &set, &cfg.class_weights);
        let (loss, grads, _) =
            batch_gradients(&model, &set, &cfg.class_weights, &Mode::Eval).unwrap();
        assert!((loss - before).abs() < 1e-5);
        let mut opt = AdamW::new(&model, &cfg);
        opt.step(&mut model, &grads, cfg.lr0);
        let after = eval_loss(&model, &set, &cfg.class_weights);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = maps(10, 5);
    let (tr, va) = data.split_at(7);
    let (tr, va) = (labeled(tr), labeled(va));
    let cfg = TrainConfig {
        batch: 3,
        epochs: 3,
        lr0: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = |dir: &std::path::Path| {
        let model = ModelState::<f32>::init(small(), StreamKey::root(1)).unwrap();
        let out = TrainOutputs {
            dir: dir.to_path_buf(),
        };
        train(model, &tr, &va, &cfg, Some(&out)).unwrap()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (run(d1.path()), run(d2.path()));
    assert_eq!(a.log, b.log);
    assert_eq!(a.summary, b.summary);
    for (x, y) in a.last.params.iter().zip(b.last.params.iter()) {
        assert_eq!(x.tensor.data(), y.tensor.data(), "{}", x.name);
    }
    for f in ["train_log.jsonl", "best.ckpt", "best.json"] {
        assert_eq!(
            std::fs::read(d1.path().join(f)).unwrap(),
            std::fs::read(d2.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let lines = std::fs::read_to_string(d1.path().join("train_log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), a.log.len() + 1);
    let other = TrainConfig {
        seed: 12,
        ..cfg.clone()
    };
    let model = ModelState::<f32>::init(small(), StreamKey::root(1)).unwrap();
    let c = train(model, &tr, &va, &other, None).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn max_steps_caps_the_run() {
    let data = maps(8, 9);
    let (tr, va) = data.split_at(6);
    let (tr, va) = (labeled(tr), labeled(va));
    let cfg = TrainConfig {
        batch: 2,
        epochs: 50,
        max_steps: Some(7),
        ..TrainConfig::default()
    };
    let model = ModelState::<f32>::init(small(), StreamKey::root(2)).unwrap();
    let out = train(model, &tr, &va, &cfg, None).unwrap();
    assert_eq!(out.summary.steps, 7);
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().any(|e| e.is_best));
    assert!(out.log.iter().all(|e| e.lr == cfg.lr0));
}

#[test]
fn empty_splits_are_rejected() {
    let data = maps(2, 1);
    let set = labeled(&data);
    let model = ModelState::<f32>::init(small(), StreamKey::root(2)).unwrap();
    assert!(train(model.clone(), &set, &[], &TrainConfig::default(), None).is_err());
    assert!(train(model, &[], &set, &TrainConfig::default(), None).is_err());
}

proptest! {
    #[test]
    fn rate_is_kept_while_validation_improves(start in 0.1f64..10.0, drops in prop::collection::vec(1e-6f64..1.0, 1..40)) {
        let mut s = PlateauSchedule::new(1e-4, 5, 0.5);
        let mut v = start;
        prop_assert!(s.observe(v));
        for d in drops {
            v -= d;
            prop_assert!(s.observe(v));
            prop_assert_eq!(s.lr, 1e-4);
        }
    }

    #[test]
    fn rate_halves_after_each_patience_window(losses in prop::collection::vec(0.0f64..2.0, 1..60)) {
        let mut s = PlateauSchedule::new(1.0, 5, 0.5);
        let (mut best, mut stale, mut lr) = (f64::INFINITY, 0, 1.0);
        for v in losses {
            let improved = s.observe(v);
            prop_assert_eq!(improved, v < best);
            if improved {
                best = v;
                stale = 0;
            } else {
                stale += 1;
                if stale == 5 {
                    lr *= 0.5;
                    stale = 0;
                }
            }
            prop_assert_eq!(s.lr, lr);
        }
    }
}
