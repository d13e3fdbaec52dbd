mod common;

use proptest::prelude::*;
use rand::Rng;
use specklenn::checkpoint::{ModelCheckpoint, TrainingMetadata, BLOB_FILE};
use specklenn::embedding::EmbeddingNet;
use specklenn::network::{prepare_batch, EmbeddingNetConfig, Mode};
use specklenn::{Error, Tensor};

fn frames(seed: u64, n: usize, size: usize) -> Vec<Vec<f32>> {
    let mut rng = common::rng(seed);
    (0..n).map(|_| (0..size * size).map(|_| rng.random::<f32>().powi(3) * 1e3).collect()).collect()
}

fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
    v.iter().map(Vec::as_slice).collect()
}

#[test]
fn equal_seeds_give_identical_parameters() {
    let a = EmbeddingNet::<f32>::build(EmbeddingNetConfig::desk(), 42).unwrap();
    let b = EmbeddingNet::<f32>::build(EmbeddingNetConfig::desk(), 42).unwrap();
    let c = EmbeddingNet::<f32>::build(EmbeddingNetConfig::desk(), 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn conv1_weights_have_the_configured_mean_and_biases_are_zero() {
    let net = EmbeddingNet::<f64>::build(EmbeddingNetConfig::default(), 7).unwrap();
    let w = net.network().param("conv1.weight").unwrap().data();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    assert!(mean.abs() < 3.0 * 0.2 / n.sqrt(), "mean {mean}");

    let fc1 = net.network().param("fc1.weight").unwrap().data();
    let m = fc1.iter().sum::<f64>() / fc1.len() as f64;
    let sd = (fc1.iter().map(|v| (v - m).powi(2)).sum::<f64>() / fc1.len() as f64).sqrt();
    assert!((sd - 0.2).abs() < 1e-3, "std {sd}");

    for name in ["conv1.bias", "conv2.bias", "fc1.bias", "fc2.bias", "bn1.shift", "bn2.shift"] {
        assert!(net.network().param(name).unwrap().data().iter().all(|&v| v == 0.0), "{name}");
    }
}

#[test]
fn default_parameter_count_matches_hand_count() {
    // conv1 32·(1·25)+32, bn1 2·32, conv2 64·(32·25)+64, bn2 2·64,
    // fc1 512·(64·21·21)+512, fc2 128·512+128
    let hand = (32 * 25 + 32) + 64 + (64 * 800 + 64) + 128 + (512 * 28_224 + 512) + (128 * 512 + 128);
    assert_eq!(hand, 14_569_152);
    assert_eq!(EmbeddingNetConfig::default().param_count().unwrap(), hand);
    let net = EmbeddingNet::<f32>::build(EmbeddingNetConfig::default(), 0).unwrap();
    assert_eq!(net.network().param_count(), hand);
}

#[test]
fn rows_are_unit_norm_in_both_modes() {
    let net = EmbeddingNet::<f32>::build(EmbeddingNetConfig::desk(), 1).unwrap();
    let imgs = frames(2, 4, 96);
    let batch = prepare_batch::<f32>(&refs(&imgs), 96).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let e = net.embed(&batch, mode).unwrap();
        assert_eq!(e.shape(), [4, 128]);
        for r in 0..4 {
            let n = e.row(r).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{mode:?} row {r}: {n}");
        }
    }
}

#[test]
fn duplicate_images_embed_identically() {
    let net = EmbeddingNet::<f32>::build(EmbeddingNetConfig::desk(), 1).unwrap();
    let imgs = frames(3, 1, 96);
    let e = net.embed_frames(&[&imgs[0], &imgs[0]]).unwrap();
    assert_eq!(e.row(0), e.row(1));
}

#[test]
fn eval_embedding_does_not_depend_on_batch_composition() {
    let net = EmbeddingNet::<f32>::build(EmbeddingNetConfig::default(), 5).unwrap();
    let imgs = frames(4, 16, 96);
    let batch = net.embed_frames(&refs(&imgs)).unwrap();
    for i in [0, 7, 15] {
        let alone = net.embed_frames(&[&imgs[i]]).unwrap();
        let diff = alone.row(0).iter().zip(batch.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "image {i}: {diff}");
    }
}

#[test]
fn wrong_input_size_is_rejected() {
    let net = EmbeddingNet::<f32>::build(EmbeddingNetConfig::desk(), 1).unwrap();
    let batch = Tensor::<f32>::zeros([2, 1, 92, 92]);
    assert!(matches!(net.embed(&batch, Mode::Eval), Err(Error::Shape { .. })));
    let two_channel = Tensor::<f32>::zeros([1, 2, 96, 96]);
    assert!(net.embed(&two_channel, Mode::Eval).is_err());
    assert!(net.embed_frames(&[&[0.0; 100]]).is_err());
}

#[test]
fn too_small_input_config_is_rejected() {
    let cfg = EmbeddingNetConfig { input_size: 12, ..EmbeddingNetConfig::default() };
    assert!(matches!(EmbeddingNet::<f32>::build(cfg, 0), Err(Error::Config { .. })));
}

#[test]
fn save_load_embed_is_bit_exact() {
    let mut net = EmbeddingNet::<f32>::build(EmbeddingNetConfig::desk(), 9).unwrap();
    // non-trivial running statistics, so the round trip has something to lose
    let imgs = frames(5, 6, 96);
    let batch = prepare_batch::<f32>(&refs(&imgs), 96).unwrap();
    let mut g = specklenn::autodiff::Graph::new();
    let vars = net.network().register_frozen(&mut g);
    let x = g.input(batch);
    let (_, stats) = net.forward(&mut g, &vars, x, Mode::Train).unwrap();
    net.network_mut().update_running_stats(&stats);

    let dir = tempfile::tempdir().unwrap();
    let meta = TrainingMetadata { seed: 9, epoch: 3, loss: 0.25 };
    net.save(dir.path(), meta.clone()).unwrap();
    let back = EmbeddingNet::<f32>::load(dir.path()).unwrap();
    assert_eq!(back, net);
    assert_eq!(ModelCheckpoint::load(dir.path()).unwrap().metadata, meta);

    let a = net.embed_frames(&refs(&imgs)).unwrap();
    let b = back.embed_frames(&refs(&imgs)).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn truncated_checkpoint_is_a_load_error() {
    let net = EmbeddingNet::<f32>::build(EmbeddingNetConfig::desk(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    net.save(dir.path(), TrainingMetadata::default()).unwrap();
    let blob = dir.path().join(BLOB_FILE);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    assert!(EmbeddingNet::<f32>::load(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pairwise_squared_distances_stay_in_zero_to_four(seed in any::<u64>(), scale in 1e-3f32..1e4) {
        let cfg = EmbeddingNetConfig { input_size: 20, conv1_out_channels: 2, conv2_out_channels: 3, fc_hidden: 8, output_dim: 3, ..Default::default() };
        let net = EmbeddingNet::<f32>::build(cfg, seed).unwrap();
        let mut rng = common::rng(seed ^ 0x5eed);
        let imgs: Vec<Vec<f32>> = (0..5).map(|_| (0..400).map(|_| rng.random::<f32>() * scale).collect()).collect();
        let e = net.embed_frames(&refs(&imgs)).unwrap();
        for i in 0..5 {
            let n: f64 = e.row(i).iter().map(|&v| f64::from(v).powi(2)).sum();
            prop_assert!((n.sqrt() - 1.0).abs() < 1e-6);
            for j in 0..5 {
                let d: f64 = e.row(i).iter().zip(e.row(j)).map(|(&a, &b)| f64::from(a - b).powi(2)).sum();
                prop_assert!((0.0..=4.0 + 1e-5).contains(&d));
            }
        }
    }
}
