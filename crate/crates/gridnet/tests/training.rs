use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storm_core::bev::GridSpec;
use storm_core::simworld::{build_scene, presets, simulate, SceneConfig};
use storm_gridnet::train::{self, TrainConfig};
use storm_gridnet::{Error, GridNet, GridNetConfig, PillarSpec, SampleSet};

fn small() -> GridNetConfig {
    GridNetConfig {
        pillar: PillarSpec { grid: GridSpec { resolution: 0.4, half_extent: 3.2, center: [0.0, 0.0] }, ..Default::default() },
        pillar_channels: 4,
        latent_channels: 4,
        velocity_channels: 4,
        hidden: 8,
        decoder_channels: 4,
        ..Default::default()
    }
}

fn samples(cfg: &GridNetConfig) -> SampleSet {
    let mut c = SceneConfig::empty_room();
    let mut w = presets::walker("w", presets::circle_waypoints([0.0, 0.0], 2.0, presets::WALKER_CENTER_Z, 0.0, 12), 1.0);
    w.trajectory.looped = true;
    c.dynamic_obstacles.push(w);
    let mut set = SampleSet::new();
    set.add_recording(&simulate(&build_scene(c).unwrap(), 1.0, 4), cfg).unwrap();
    set
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = small();
    let set = samples(&cfg);
    let mut net = GridNet::new(cfg, 1).unwrap();
    let before = net.clone();
    let tc = TrainConfig { epochs: 2, learning_rate: 0.0, ..Default::default() };
    let r = train::train(&mut net, &set, None, &tc).unwrap();
    assert_eq!(net, before);
    for e in &r.epochs {
        assert!((e.train_loss - r.initial_loss).abs() < 1e-12 * r.initial_loss);
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = small();
    let set = samples(&cfg);
    let tc = TrainConfig { epochs: 2, ..Default::default() };
    let run = || {
        let mut net = GridNet::new(cfg, 9).unwrap();
        let r = train::train(&mut net, &set, Some(&set), &tc).unwrap();
        (net, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn divergence_aborts() {
    let cfg = small();
    let set = samples(&cfg);
    let mut net = GridNet::new(cfg, 2).unwrap();
    let tc = TrainConfig { epochs: 3, learning_rate: 1e4, grad_clip: 0.0, momentum: 0.0, divergence_factor: 1.5, ..Default::default() };
    match train::train(&mut net, &set, None, &tc) {
        Err(Error::Diverged { .. }) | Err(Error::NonFinite(_)) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn shuffled_targets_keep_label_counts() {
    let cfg = small();
    let set = samples(&cfg);
    let shuffled = set.with_shuffled_targets(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        let i = rng.gen_range(0..set.len());
        let (_, a) = set.get(i, cfg.sequence_len);
        let (_, b) = shuffled.get(i, cfg.sequence_len);
        assert_eq!(a.iter().sum::<f64>(), b.iter().sum::<f64>());
    }
}
