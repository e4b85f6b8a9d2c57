use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storm_core::bev::GridSpec;
use storm_core::Vec3;
use storm_gridnet::gradcheck::check_gradients;
use storm_gridnet::pillars::encode_pillars;
use storm_gridnet::{FrameInput, GridNet, GridNetConfig, LossConfig, LstmMode, PillarSpec};

fn tiny(mode: LstmMode) -> GridNetConfig {
    GridNetConfig {
        pillar: PillarSpec { grid: GridSpec { resolution: 0.2, half_extent: 0.8, center: [0.0, 0.0] }, z_min: 0.0, z_max: 3.0, max_points_per_pillar: 8 },
        pillar_channels: 4,
        latent_channels: 4,
        velocity_channels: 4,
        hidden: 16,
        decoder_channels: 4,
        lstm_mode: mode,
        sequence_len: 3,
    }
}

fn random_inputs(cfg: &GridNetConfig, seed: u64) -> (Vec<FrameInput>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = (0..3)
        .map(|_| {
            let pts: Vec<Vec3> = (0..30).map(|_| Vec3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(0.1..2.0))).collect();
            FrameInput { pillars: encode_pillars(&pts, &cfg.pillar), velocity: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.1] }
        })
        .collect();
    let target = (0..64).map(|_| (rng.gen_range(0.0..1.0) < 0.2) as u8 as f64).collect();
    (seq, target)
}

#[test]
fn per_cell_model_gradient_matches_finite_differences() {
    let cfg = tiny(LstmMode::PerCell);
    let net = GridNet::new(cfg, 3).unwrap();
    let (seq, y) = random_inputs(&cfg, 11);
    let r = check_gradients(&net, &seq, &y, &LossConfig::default(), 1e-5, 1e-6).unwrap();
    assert_eq!(r.checked, net.param_count());
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn flattened_model_gradient_matches_finite_differences() {
    let cfg = tiny(LstmMode::Flattened);
    let net = GridNet::new(cfg, 5).unwrap();
    let (seq, y) = random_inputs(&cfg, 12);
    let r = check_gradients(&net, &seq, &y, &LossConfig::default(), 1e-5, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn total_gradient_is_weighted_sum_of_parts() {
    let cfg = tiny(LstmMode::PerCell);
    let net = GridNet::new(cfg, 8).unwrap();
    let (seq, y) = random_inputs(&cfg, 13);
    let only = |b: f64, d: f64| net.loss_and_grad(&seq, &y, &LossConfig { pos_weight: 5.0, bce_weight: b, dice_weight: d }).unwrap();
    let (lb, gb) = only(1.0, 0.0);
    let (ld, gd) = only(0.0, 1.0);
    let (lt, gt) = only(0.7, 0.3);
    assert!((lt.total - (0.7 * lb.total + 0.3 * ld.total)).abs() < 1e-12);
    for ((a, b), t) in gb.iter().flatten().zip(gd.iter().flatten()).zip(gt.iter().flatten()) {
        assert!((t - (0.7 * a + 0.3 * b)).abs() <= 1e-12 * (1.0 + t.abs()));
    }
}
