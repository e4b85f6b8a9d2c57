use storm_gridnet::loss::{dice_loss, total_loss, weighted_bce};
use storm_gridnet::LossConfig;

/// Direct transcription of the loss definitions, one cell at a time.
fn oracle(p: &[f64], y: &[f64], w: f64) -> (f64, f64) {
    let mut bce = 0.0;
    let (mut py, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let q = p[i].max(1e-7).min(1.0 - 1e-7);
        bce += if y[i] == 1.0 { -w * q.ln() } else { -(1.0 - q).ln() };
        py += q * y[i];
        sp += q;
        sy += y[i];
    }
    (bce / p.len() as f64, 1.0 - (2.0 * py + 1.0) / (sp + sy + 1.0))
}

#[test]
fn two_by_two_half_probabilities() {
    let p = [0.5; 4];
    let y = [1.0, 0.0, 0.0, 0.0];
    let (ob, od) = oracle(&p, &y, 5.0);
    assert!((weighted_bce(&p, &y, 5.0) - ob).abs() < 1e-12);
    assert!((weighted_bce(&p, &y, 5.0) - 1.3862944).abs() < 1e-6);
    assert!((dice_loss(&p, &y) - od).abs() < 1e-12);
    assert!((dice_loss(&p, &y) - 0.5).abs() < 1e-6);
    let t = total_loss(&p, &y, &LossConfig::default());
    assert!((t.total - (0.7 * t.bce + 0.3 * t.dice)).abs() < 1e-15);
}

#[test]
fn extreme_probabilities_are_clamped() {
    let p = [0.0, 1.0];
    let y = [1.0, 0.0];
    let l = weighted_bce(&p, &y, 1.0);
    assert!(l.is_finite());
    assert!((l - oracle(&p, &y, 1.0).0).abs() < 1e-9);
}

#[test]
fn random_grids_match_oracle() {
    let mut s = 7u64;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..50 {
        let p: Vec<f64> = (0..37).map(|_| next()).collect();
        let y: Vec<f64> = (0..37).map(|_| (next() < 0.3) as u8 as f64).collect();
        let (ob, od) = oracle(&p, &y, 2.5);
        assert!((weighted_bce(&p, &y, 2.5) - ob).abs() < 1e-12);
        assert!((dice_loss(&p, &y) - od).abs() < 1e-12);
    }
}

#[test]
fn single_cell_cross_entropy() {
    assert!((weighted_bce(&[0.5], &[1.0], 2.0) - 1.3862944).abs() < 1e-6);
    for w in [0.5, 1.0, 2.0, 9.0] {
        assert!((weighted_bce(&[0.5], &[0.0], w) - 0.6931472).abs() < 1e-6);
    }
}

#[test]
fn perfect_prediction_is_near_zero() {
    let y = [1.0, 0.0, 0.0, 1.0, 0.0];
    let eps = 1e-7;
    assert!(weighted_bce(&y, &y, 1.0) <= 16.0 * eps);
    assert!(dice_loss(&y, &y) < 1e-6);
}

#[test]
fn total_is_weighted_sum() {
    let p = [0.9, 0.2, 0.4, 0.05, 0.6, 0.3];
    let y = [1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let cfg = LossConfig::default();
    let t = total_loss(&p, &y, &cfg);
    let by_hand = 0.7 * weighted_bce(&p, &y, cfg.pos_weight) + 0.3 * dice_loss(&p, &y);
    assert!((t.total - by_hand).abs() < 1e-15);
    let no_dice = total_loss(&p, &y, &LossConfig { dice_weight: 0.0, ..cfg });
    assert!((no_dice.total - 0.7 * t.bce).abs() < 1e-15);
}

#[test]
fn loss_bounds_on_random_grids() {
    let mut s = 3u64;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..100 {
        let p: Vec<f64> = (0..20).map(|_| next()).collect();
        let y: Vec<f64> = (0..20).map(|_| (next() < 0.5) as u8 as f64).collect();
        assert!(weighted_bce(&p, &y, 5.0) >= 0.0);
        let d = dice_loss(&p, &y);
        assert!((0.0..=1.0).contains(&d));
        assert!(total_loss(&p, &y, &LossConfig::default()).total >= 0.0);
    }
}
