//! Pillar encoder, strided conv encoder, recurrent core and upsampling decoder
//! mapping a short scan sequence to per-cell dynamic logits.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use storm_core::bev::DynamicGrid;
use storm_core::types::to_world;
use storm_core::PointCloudScan;

use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossParts};
use crate::pillars::{encode_pillars, PillarBatch, PillarSpec, POINT_FEATURES};
use crate::tape::{Conv, Tape, Tensor, Var, PROB_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstmMode {
    /// One LSTM shared across latent cells (a 1x1 convolutional LSTM).
    PerCell,
    /// One LSTM over the flattened latent map, projected back by a dense layer.
    Flattened,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridNetConfig {
    pub pillar: PillarSpec,
    pub pillar_channels: usize,
    pub latent_channels: usize,
    pub velocity_channels: usize,
    pub hidden: usize,
    pub decoder_channels: usize,
    pub lstm_mode: LstmMode,
    pub sequence_len: usize,
}

impl Default for GridNetConfig {
    fn default() -> Self {
        GridNetConfig {
            pillar: PillarSpec::default(),
            pillar_channels: 16,
            latent_channels: 16,
            velocity_channels: 16,
            hidden: 32,
            decoder_channels: 8,
            lstm_mode: LstmMode::PerCell,
            sequence_len: 3,
        }
    }
}

const STRIDED: Conv = Conv { stride: 2, pad: 1 };
const SAME: Conv = Conv { stride: 1, pad: 1 };

impl GridNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.pillar.validate()?;
        let dims = [self.pillar_channels, self.latent_channels, self.velocity_channels, self.hidden, self.decoder_channels, self.sequence_len];
        if dims.contains(&0) {
            return Err(Error::Config(format!("all model sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.pillar.cells()
    }

    /// Side of the latent map after two stride-2 convolutions.
    pub fn latent_side(&self) -> usize {
        let half = |n: usize| (n + 1) / 2;
        half(half(self.cells()))
    }

    /// Named parameter shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c1, cl, cv, h, cd) = (self.pillar_channels, self.latent_channels, self.velocity_channels, self.hidden, self.decoder_channels);
        let l = self.latent_side();
        let (lstm_in, dec_in) = match self.lstm_mode {
            LstmMode::PerCell => (cl + cv, h),
            LstmMode::Flattened => (cl * l * l + cv, cl),
        };
        let mut v: Vec<(&str, Vec<usize>)> = vec![
            ("pillar.w", vec![c1, POINT_FEATURES]),
            ("pillar.b", vec![c1]),
            ("enc1.w", vec![c1, c1, 3, 3]),
            ("enc1.b", vec![c1]),
            ("enc2.w", vec![cl, c1, 3, 3]),
            ("enc2.b", vec![cl]),
            ("vel.w", vec![cv, 3]),
            ("vel.b", vec![cv]),
            ("lstm.wx", vec![4 * h, lstm_in]),
            ("lstm.wh", vec![4 * h, h]),
            ("lstm.b", vec![4 * h]),
        ];
        if self.lstm_mode == LstmMode::Flattened {
            v.push(("proj.w", vec![cl * l * l, h]));
            v.push(("proj.b", vec![cl * l * l]));
        }
        v.extend([
            ("dec1.w", vec![dec_in, cd, 2, 2]),
            ("dec1.b", vec![cd]),
            ("dec2.w", vec![cd, cd, 2, 2]),
            ("dec2.b", vec![cd]),
            ("head1.w", vec![cd, cd + c1, 3, 3]),
            ("head1.b", vec![cd]),
            ("head2.w", vec![1, cd, 3, 3]),
            ("head2.b", vec![1]),
        ]);
        v.into_iter().map(|(n, s)| (n.to_string(), s)).collect()
    }
}

/// One scan after pillarization.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub pillars: PillarBatch,
    /// Ego velocity in the body frame.
    pub velocity: [f64; 3],
}

/// Transforms the scan to the world frame and pillarizes it.
pub fn prepare_frame(scan: &PointCloudScan, spec: &PillarSpec) -> Result<FrameInput> {
    let world = to_world(scan)?;
    let v = scan.ego.body_velocity;
    Ok(FrameInput { pillars: encode_pillars(&world, spec), velocity: [v.x, v.y, v.z] })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridNet {
    config: GridNetConfig,
    params: Vec<Tensor>,
}

impl GridNet {
    /// Fan-in scaled uniform weights from a seeded generator. Biases get
    /// small random values, the forget gate starts open and the output bias
    /// starts at a low prior.
    pub fn new(config: GridNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".b") {
                    (0..n)
                        .map(|i| match name.as_str() {
                            "lstm.b" if (h..2 * h).contains(&i) => 1.0,
                            "head2.b" => -4.0,
                            _ => rng.gen_range(-0.05..0.05),
                        })
                        .collect()
                } else {
                    let fan_in: usize = match name.as_str() {
                        "dec1.w" | "dec2.w" => shape[0],
                        _ => shape[1..].iter().product(),
                    };
                    let bound = (if name.starts_with("lstm") || name == "proj.w" { 3.0 } else { 6.0 } / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                Tensor::new(shape, data)
            })
            .collect();
        Ok(GridNet { config, params })
    }

    /// All parameters zero.
    pub fn zeros(config: GridNetConfig) -> Result<Self> {
        config.validate()?;
        let params = config.param_shapes().into_iter().map(|(_, s)| Tensor::zeros(&s)).collect();
        Ok(GridNet { config, params })
    }

    pub fn from_params(config: GridNetConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Config(format!("expected {} tensors, got {}", shapes.len(), params.len())));
        }
        for ((name, s), t) in shapes.iter().zip(&params) {
            if *s != t.shape {
                return Err(Error::Config(format!("tensor {name}: expected shape {s:?}, got {:?}", t.shape)));
            }
        }
        Ok(GridNet { config, params })
    }

    pub fn config(&self) -> &GridNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_len(&self, seq: &[FrameInput]) -> Result<()> {
        if seq.len() != self.config.sequence_len {
            return Err(Error::SequenceLength { expected: self.config.sequence_len, got: seq.len() });
        }
        Ok(())
    }

    /// Records the forward pass; returns the parameter leaves and the
    /// `[1, n, n]` logits.
    fn forward(&self, tape: &mut Tape, seq: &[FrameInput]) -> Result<(Vec<Var>, Var)> {
        self.check_len(seq)?;
        let cfg = &self.config;
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone())).collect();
        let names = self.param_names();
        let w = |name: &str| p[names.iter().position(|n| n == name).expect("known parameter")];
        let (n, l, hd, c1) = (cfg.cells(), cfg.latent_side(), cfg.hidden, cfg.pillar_channels);

        let mut state: Option<(Var, Var)> = None;
        let mut last_map = None;
        for frame in seq {
            let pb = &frame.pillars;
            if pb.cells_per_side != n {
                return Err(Error::Config(format!("pillar grid has {} cells per side, model expects {n}", pb.cells_per_side)));
            }
            let map = if pb.points() == 0 {
                tape.leaf(Tensor::zeros(&[c1, n * n]))
            } else {
                let x = tape.leaf(Tensor::new(vec![POINT_FEATURES, pb.points()], pb.features.clone()));
                let a = tape.matmul(w("pillar.w"), x);
                let a = tape.add_bias(a, w("pillar.b"));
                let a = tape.relu(a);
                tape.scatter_max(a, &pb.cell, n * n)
            };
            let map = tape.reshape(map, &[c1, n, n]);
            last_map = Some(map);
            let e = tape.conv2d(map, w("enc1.w"), w("enc1.b"), STRIDED);
            let e = tape.relu(e);
            let e = tape.conv2d(e, w("enc2.w"), w("enc2.b"), STRIDED);
            let e = tape.relu(e);

            let vin = tape.leaf(Tensor::new(vec![3, 1], frame.velocity.to_vec()));
            let v = tape.matmul(w("vel.w"), vin);
            let v = tape.add_bias(v, w("vel.b"));
            let v = tape.relu(v);

            let x = match cfg.lstm_mode {
                LstmMode::PerCell => {
                    let e = tape.reshape(e, &[cfg.latent_channels, l * l]);
                    let v = tape.broadcast_cols(v, l * l);
                    tape.concat(&[e, v])
                }
                LstmMode::Flattened => {
                    let e = tape.reshape(e, &[cfg.latent_channels * l * l, 1]);
                    tape.concat(&[e, v])
                }
            };
            let mut gates = tape.matmul(w("lstm.wx"), x);
            if let Some((h, _)) = state {
                let r = tape.matmul(w("lstm.wh"), h);
                gates = tape.add(gates, r);
            }
            let gates = tape.add_bias(gates, w("lstm.b"));
            let gi = tape.slice_rows(gates, 0, hd);
            let i = tape.sigmoid(gi);
            let gf = tape.slice_rows(gates, hd, hd);
            let f = tape.sigmoid(gf);
            let gg = tape.slice_rows(gates, 2 * hd, hd);
            let g = tape.tanh(gg);
            let go = tape.slice_rows(gates, 3 * hd, hd);
            let o = tape.sigmoid(go);
            let mut c = tape.mul(i, g);
            if let Some((_, c_prev)) = state {
                let keep = tape.mul(f, c_prev);
                c = tape.add(keep, c);
            }
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc);
            state = Some((h, c));
        }
        let (h, _) = state.expect("sequence is non-empty");

        let d = match cfg.lstm_mode {
            LstmMode::PerCell => tape.reshape(h, &[hd, l, l]),
            LstmMode::Flattened => {
                let z = tape.matmul(w("proj.w"), h);
                let z = tape.add_bias(z, w("proj.b"));
                let z = tape.relu(z);
                tape.reshape(z, &[cfg.latent_channels, l, l])
            }
        };
        let d = tape.conv_transpose2d(d, w("dec1.w"), w("dec1.b"), 2);
        let d = tape.relu(d);
        let d = tape.conv_transpose2d(d, w("dec2.w"), w("dec2.b"), 2);
        let d = tape.relu(d);
        let d = tape.crop(d, n, n);
        let d = tape.concat(&[d, last_map.expect("sequence is non-empty")]);
        let d = tape.conv2d(d, w("head1.w"), w("head1.b"), SAME);
        let d = tape.relu(d);
        let logits = tape.conv2d(d, w("head2.w"), w("head2.b"), SAME);
        Ok((p, logits))
    }

    /// Per-cell dynamic probabilities, row-major over the grid.
    pub fn predict(&self, seq: &[FrameInput]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (_, logits) = self.forward(&mut tape, seq)?;
        let probs = tape.sigmoid(logits);
        Ok(tape.value(probs).data.clone())
    }

    /// Probabilities for the last scan of `scans`, stamped with its time.
    pub fn predict_scans(&self, scans: &[PointCloudScan]) -> Result<DynamicGrid> {
        let seq = scans.iter().map(|s| prepare_frame(s, &self.config.pillar)).collect::<Result<Vec<_>>>()?;
        let values = self.predict(&seq)?;
        let stamp = scans.last().map(|s| s.stamp).unwrap_or_default();
        Ok(DynamicGrid { stamp, spec: self.config.pillar.grid, values })
    }

    fn loss_graph(&self, tape: &mut Tape, seq: &[FrameInput], target: &[f64], cfg: &LossConfig) -> Result<(Vec<Var>, Var, LossParts)> {
        let n = self.config.cells();
        if target.len() != n * n {
            return Err(Error::Config(format!("target has {} cells, grid has {}", target.len(), n * n)));
        }
        let (p, logits) = self.forward(tape, seq)?;
        let probs = tape.sigmoid(logits);
        let probs = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
        let y = Rc::new(target.to_vec());
        let bce = tape.weighted_bce(probs, y.clone(), cfg.pos_weight);
        let dice = tape.dice(probs, y);
        let a = tape.scale(bce, cfg.bce_weight);
        let b = tape.scale(dice, cfg.dice_weight);
        let total = tape.add(a, b);
        let parts = LossParts { bce: tape.value(bce).data[0], dice: tape.value(dice).data[0], total: tape.value(total).data[0] };
        Ok((p, total, parts))
    }

    pub fn loss(&self, seq: &[FrameInput], target: &[f64], cfg: &LossConfig) -> Result<LossParts> {
        let mut tape = Tape::new();
        Ok(self.loss_graph(&mut tape, seq, target, cfg)?.2)
    }

    /// Loss and its gradient with respect to every parameter tensor.
    pub fn loss_and_grad(&self, seq: &[FrameInput], target: &[f64], cfg: &LossConfig) -> Result<(LossParts, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let (p, total, parts) = self.loss_graph(&mut tape, seq, target, cfg)?;
        let grads = tape.backward(total);
        let g = p
            .iter()
            .zip(&self.params)
            .map(|(v, t)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((parts, g))
    }
}
