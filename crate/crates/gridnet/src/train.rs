//! Mini-batch SGD with momentum over windows of consecutive frames.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use storm_core::simworld::{rasterize_target_grid, FrameRecord};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{prepare_frame, FrameInput, GridNet, GridNetConfig};

/// Pillarized frames plus targets; a sample is a window of
/// `sequence_len` consecutive frames from one recording.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    frames: Vec<FrameInput>,
    targets: Vec<Vec<f64>>,
    /// Index of the last frame of each window.
    ends: Vec<usize>,
}

impl SampleSet {
    pub fn new() -> Self {
        SampleSet::default()
    }

    /// Appends one recording; windows never span recordings.
    pub fn add_recording(&mut self, records: &[FrameRecord], cfg: &GridNetConfig) -> Result<()> {
        let base = self.frames.len();
        let t = cfg.sequence_len;
        for r in records {
            self.frames.push(prepare_frame(&r.scan, &cfg.pillar)?);
            self.targets.push(rasterize_target_grid(&r.ground_truth, &cfg.pillar.grid, r.scan.stamp).values);
        }
        if records.len() >= t {
            self.ends.extend(base + t - 1..base + records.len());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    /// Input window and target of sample `i`.
    pub fn get(&self, i: usize, sequence_len: usize) -> (&[FrameInput], &[f64]) {
        let e = self.ends[i];
        (&self.frames[e + 1 - sequence_len..=e], &self.targets[e])
    }

    /// Same inputs with each target's cells randomly permuted, so labels
    /// carry neither the input's content nor its location.
    pub fn with_shuffled_targets(&self, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = self
            .targets
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.shuffle(&mut rng);
                t
            })
            .collect();
        SampleSet { frames: self.frames.clone(), targets, ends: self.ends.clone() }
    }

    fn window_targets(&self) -> impl Iterator<Item = &[f64]> {
        self.ends.iter().map(|&e| self.targets[e].as_slice())
    }
}

/// Loss of predicting the same probability `c` in every cell of every sample.
pub fn constant_loss(set: &SampleSet, c: f64, loss: &LossConfig) -> f64 {
    let mut sum = 0.0;
    for y in set.window_targets() {
        let p = vec![c; y.len()];
        sum += crate::loss::total_loss(&p, y, loss).total;
    }
    sum / set.len().max(1) as f64
}

/// Best input-independent background probability for `set` and its loss,
/// found by a logit-space grid search refined by golden section.
pub fn best_constant(set: &SampleSet, loss: &LossConfig) -> (f64, f64) {
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let f = |z: f64| constant_loss(set, sig(z), loss);
    let (mut best_z, mut best) = (-16.0, f(-16.0));
    let mut z = -16.0;
    while z <= 4.0 {
        let v = f(z);
        if v < best {
            (best_z, best) = (z, v);
        }
        z += 0.25;
    }
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (best_z - 0.25, best_z + 0.25);
    for _ in 0..40 {
        let (c, d) = (b - g * (b - a), a + g * (b - a));
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let zm = (a + b) / 2.0;
    let vm = f(zm);
    if vm < best {
        (sig(zm), vm)
    } else {
        (sig(best_z), best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    /// Abort once an epoch's training loss exceeds this multiple of the
    /// initial loss.
    pub divergence_factor: f64,
    /// Probability threshold used for the validation IoU.
    pub iou_threshold: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 4,
            grad_clip: 1.0,
            lr_decay: 1.0,
            divergence_factor: 10.0,
            iou_threshold: 0.5,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.grad_clip >= 0.0
            && self.lr_decay > 0.0
            && self.divergence_factor > 1.0
            && self.loss.pos_weight > 0.0;
        if !ok {
            return Err(Error::Config(format!("bad training config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent without a validation set.
    pub val_loss: Option<f64>,
    pub val_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Pooled over all samples: total intersection over total union.
    pub iou: f64,
}

pub fn evaluate(model: &GridNet, set: &SampleSet, loss: &LossConfig, iou_threshold: f64) -> Result<Evaluation> {
    let t = model.config().sequence_len;
    let (mut sum, mut inter, mut union) = (0.0, 0usize, 0usize);
    for i in 0..set.len() {
        let (seq, y) = set.get(i, t);
        let p = model.predict(seq)?;
        sum += crate::loss::total_loss(&p, y, loss).total;
        for (a, b) in p.iter().zip(y) {
            let (a, b) = (*a > iou_threshold, *b > 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    let n = set.len().max(1) as f64;
    Ok(Evaluation { loss: sum / n, iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 } })
}

pub fn train(model: &mut GridNet, train_set: &SampleSet, val_set: Option<&SampleSet>, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each one.
pub fn train_with(
    model: &mut GridNet,
    train_set: &SampleSet,
    val_set: Option<&SampleSet>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let t = model.config().sequence_len;
    let initial_loss = evaluate(model, train_set, &cfg.loss, cfg.iou_threshold)?.loss;
    let limit = cfg.divergence_factor * initial_loss;
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32 - 1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
            for &i in batch {
                let (seq, y) = train_set.get(i, t);
                let (parts, g) = model.loss_and_grad(seq, y, &cfg.loss)?;
                total += parts.total;
                for (a, gi) in acc.iter_mut().zip(g) {
                    a.iter_mut().zip(gi).for_each(|(x, v)| *x += v);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let norm = acc.iter().flatten().map(|v| (v * scale).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm in epoch {epoch}")));
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            for ((p, v), a) in model.params_mut().iter_mut().zip(&mut velocity).zip(&acc) {
                for ((w, m), g) in p.data.iter_mut().zip(v.iter_mut()).zip(a) {
                    *m = cfg.momentum * *m + g * scale * clip;
                    *w -= lr * *m;
                }
            }
        }
        let train_loss = total / train_set.len() as f64;
        if !train_loss.is_finite() || train_loss > limit {
            return Err(Error::Diverged { epoch, loss: train_loss, limit });
        }
        let val = val_set.filter(|v| !v.is_empty()).map(|v| evaluate(model, v, &cfg.loss, cfg.iou_threshold)).transpose()?;
        let stats = EpochStats { epoch, train_loss, val_loss: val.map(|e| e.loss), val_iou: val.map(|e| e.iou) };
        on_epoch(&stats);
        epochs.push(stats);
    }
    Ok(TrainReport { initial_loss, epochs })
}

/// Trailing mean over up to `window` values.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let s = &xs[(i + 1).saturating_sub(window)..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}
