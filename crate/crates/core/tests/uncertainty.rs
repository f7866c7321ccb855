use murmur_autodiff::StreamKey;
use murmur_core::features::{FeatureMap, N_FRAMES, N_MELS};
use murmur_core::model::{Mode, ModelConfig, ModelState};
use murmur_core::uncertainty::{entropy, mc_predict, mc_predict_batch, McOptions, ProbVector};
use rand::Rng;

fn small(dropout_p: f64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        head_dim: 4,
        model_dim: 8,
        subsample_channels: 2,
        conv_kernel: 5,
        max_rel_offset: 8,
        dropout_p,
        ..ModelConfig::default()
    }
}

fn map(seed: u64) -> FeatureMap {
    let mut rng = StreamKey::root(seed).rng();
    FeatureMap::new(
        (0..N_MELS * N_FRAMES)
            .map(|_| rng.random_range(-3.0..1.0))
            .collect(),
    )
    .unwrap()
}

#[test]
fn no_dropout_means_no_spread() {
    let model = ModelState::<f32>::init(small(0.0), StreamKey::root(4)).unwrap();
    let m = map(1);
    let r = mc_predict(&model, &m, StreamKey::root(9), &McOptions::default()).unwrap();
    assert_eq!(r.n_passes, 30);
    let passes = r.per_pass.as_ref().unwrap();
    assert!(passes.iter().all(|p| p == &passes[0]));
    let z = model.logits(&[&m], &Mode::Eval).unwrap();
    let z: [f64; 3] = std::array::from_fn(|i| z.data()[i] as f64);
    let eval = ProbVector::from_logits(&z, 1.0);
    for c in 0..3 {
        assert!((r.mean.0[c] - eval.0[c]).abs() <= 1e-12);
    }
}

#[test]
fn fixed_seed_is_bit_identical_and_seed_matters() {
    let model = ModelState::<f32>::init(small(0.3), StreamKey::root(4)).unwrap();
    let m = map(2);
    let opts = McOptions::default();
    let a = mc_predict(&model, &m, StreamKey::root(5), &opts).unwrap();
    let b = mc_predict(&model, &m, StreamKey::root(5), &opts).unwrap();
    assert_eq!(a, b);
    let c = mc_predict(&model, &m, StreamKey::root(6), &opts).unwrap();
    assert_ne!(a.per_pass, c.per_pass);
    let passes = a.per_pass.as_ref().unwrap();
    assert!(passes.iter().any(|p| p != &passes[0]));
}

#[test]
fn batch_agrees_with_single_segment_calls() {
    let model = ModelState::<f32>::init(small(0.2), StreamKey::root(8)).unwrap();
    let maps = [map(3), map(4), map(5)];
    let refs: Vec<&FeatureMap> = maps.iter().collect();
    let keys: Vec<StreamKey> = (0..3).map(|i| StreamKey::root(1).index(i)).collect();
    let opts = McOptions {
        passes: 7,
        chunk: 2,
        ..McOptions::default()
    };
    let batch = mc_predict_batch(&model, &refs, &keys, &opts).unwrap();
    for ((m, k), r) in maps.iter().zip(&keys).zip(&batch) {
        let single = mc_predict(&model, m, *k, &opts).unwrap();
        assert_eq!(&single, r);
        let s: f64 = r.mean.0.iter().sum();
        assert!((s - 1.0).abs() < 1e-6 && r.mean.0.iter().all(|&p| p >= 0.0));
        assert!(r.entropy >= 0.0 && r.entropy <= 3f64.ln() + 1e-12);
        assert_eq!(r.entropy, entropy(&r.mean));
    }
}
