//! End-to-end properties across modules: synthetic data through partial
//! views, encoders, the objective and checkpoint files.

use c2p_core::autograd::Tensor;
use c2p_core::distill::{geo_loss, Denominator, DistillConfig, Model, NegativeScope, TrainState};
use c2p_core::encoders::EncoderConfig;
use c2p_core::eval::extract_features;
use c2p_core::io;
use c2p_core::partial_view::{generate_partial_sequence, random_sample_sequence, survival_ratios, TrajectoryConfig};
use c2p_core::rng::Pcg32;
use c2p_core::synth::{make_dataset, DataConfig};
use c2p_core::RunConfig;
use proptest::prelude::*;

fn small_data(seed: u64, frames: usize, points: usize) -> Vec<c2p_core::geometry::Sequence> {
    let cfg = DataConfig {
        sequences: 2,
        frames,
        points,
        ..DataConfig::default()
    };
    make_dataset(2, &cfg.template(), seed).unwrap()
}

fn small_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig {
        spatial_stride: 16,
        neighbors: 8,
        dim: 8,
        heads: 2,
        ffn_dim: 8,
        max_frames: 8,
        ..EncoderConfig::default()
    };
    cfg.data.frames = 5;
    cfg.data.points = 64;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partial_views_keep_labels_and_shrink(seed in any::<u64>(), sweep in 30.0f64..=360.0) {
        let data = small_data(seed, 5, 96);
        let cfg = TrajectoryConfig { sweep_degrees: sweep, ..TrajectoryConfig::default() };
        let (partial, traj) = generate_partial_sequence(&data[0], &cfg, seed).unwrap();
        prop_assert_eq!(&partial.labels, &data[0].labels);
        prop_assert_eq!(partial.cameras.as_ref().map(Vec::len), Some(5));
        prop_assert_eq!(traj.entries.len(), 5);
        for r in survival_ratios(&data[0], &partial) {
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn random_sampling_keeps_the_ratio(seed in any::<u64>(), ratio in 0.05f64..=1.0) {
        let data = small_data(seed, 4, 80);
        let kept = random_sample_sequence(&data[0], ratio, seed).unwrap();
        for (k, c) in kept.frames.iter().zip(&data[0].frames) {
            prop_assert_eq!(k.len(), (ratio * c.len() as f64).round() as usize);
        }
    }

    #[test]
    fn standard_denominator_loss_is_nonnegative(seed in any::<u64>(), tau in 0.05f64..2.0) {
        let mut rng = Pcg32::from_seed(seed);
        let rows = 6;
        let unit = |rng: &mut Pcg32| {
            let mut data = Vec::new();
            for _ in 0..rows {
                let r: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                data.extend(r.iter().map(|x| x / n));
            }
            Tensor::new(vec![rows, 4], data).unwrap()
        };
        let (s, t) = (unit(&mut rng), unit(&mut rng));
        let cfg = DistillConfig {
            temperature: tau,
            denominator: Denominator::Standard,
            negatives: NegativeScope::Sequence,
            ..DistillConfig::default()
        };
        prop_assert!(geo_loss(&s, &t, &[rows], &cfg).unwrap() >= 0.0);
    }
}

#[test]
fn checkpoint_file_round_trips_training_state() {
    let cfg = small_run();
    let data = small_data(1, 5, 64);
    let model = Model::new(&cfg.encoder, &cfg.distill);
    let mut run = cfg.clone();
    run.train.epochs = 1;
    run.train.batch_size = 2;
    let report = c2p_core::distill::pretrain(
        &data,
        &run,
        3,
        TrainState::new(model.init(3).unwrap()),
        &mut Vec::new(),
        &mut |_| Ok(()),
    )
    .unwrap();
    let dir = std::env::temp_dir().join(format!("c2p-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("state.c2pw");
    io::write_checkpoint(&path, &report.state.to_checkpoint()).unwrap();
    let back = TrainState::from_checkpoint(&io::read_checkpoint(&path).unwrap()).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    assert_eq!(back, report.state);
    assert_eq!(back.step, 1);
    assert!(!back.momentum.is_empty());
}

#[test]
fn features_are_deterministic_and_depend_on_weights() {
    let cfg = small_run();
    let data = small_data(2, 5, 64);
    let model = Model::new(&cfg.encoder, &cfg.distill);
    let a = model.init(0).unwrap();
    let b = model.init(1).unwrap();
    let fa = extract_features(&a, &cfg.encoder, &data).unwrap();
    let fa2 = extract_features(&a, &cfg.encoder, &data).unwrap();
    let fb = extract_features(&b, &cfg.encoder, &data).unwrap();
    assert_eq!(fa.features, fa2.features);
    assert_eq!(fa.features.len(), 10);
    let diff: f64 = fa
        .features
        .iter()
        .flatten()
        .zip(fb.features.iter().flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    assert!(diff > 0.0);
    for row in &fa.features {
        let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn sequence_files_survive_the_partial_pipeline() {
    let data = small_data(4, 5, 64);
    // Stored points are f32; culling the reloaded sequence keeps them exact.
    let complete = io::decode_sequence(&io::encode_sequence(&data[1]).unwrap()).unwrap();
    let (partial, _) = generate_partial_sequence(&complete, &TrajectoryConfig::default(), 8).unwrap();
    let bytes = io::encode_sequence(&partial).unwrap();
    let back = io::decode_sequence(&bytes).unwrap();
    assert_eq!(back.frames, partial.frames);
    assert_eq!(back.labels, partial.labels);
    // Cameras are stored as f32.
    for (a, b) in back.cameras.unwrap().iter().zip(partial.cameras.as_ref().unwrap()) {
        for (ra, rb) in a.pose.rotation.iter().zip(&b.pose.rotation) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
    // Cameras flag set, labels flag set.
    assert_eq!(bytes[12], 0b11);
}
