//! Training objective on per-cell probabilities.

use serde::{Deserialize, Serialize};

use crate::tape::{bce_value, dice_value, PROB_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Extra weight on positive cells in the cross-entropy term.
    pub pos_weight: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { pos_weight: 5.0, bce_weight: 0.7, dice_weight: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

fn clamped(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect()
}

pub fn weighted_bce(probs: &[f64], targets: &[f64], pos_weight: f64) -> f64 {
    assert_eq!(probs.len(), targets.len());
    bce_value(&clamped(probs), targets, pos_weight)
}

pub fn dice_loss(probs: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(probs.len(), targets.len());
    dice_value(&clamped(probs), targets)
}

pub fn total_loss(probs: &[f64], targets: &[f64], cfg: &LossConfig) -> LossParts {
    let bce = weighted_bce(probs, targets, cfg.pos_weight);
    let dice = dice_loss(probs, targets);
    LossParts { bce, dice, total: cfg.bce_weight * bce + cfg.dice_weight * dice }
}

/// Intersection over union of `probs > threshold` against binary targets;
/// 1 when both are empty.
pub fn iou(probs: &[f64], targets: &[f64], threshold: f64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in probs.iter().zip(targets) {
        let (a, b) = (*p > threshold, *t > 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
