//! Learned bird's-eye-view dynamic grid: pillarized scans in, per-cell
//! probability that the cell holds a moving obstacle out.

pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod pillars;
pub mod tape;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use loss::{LossConfig, LossParts};
pub use model::{FrameInput, GridNet, GridNetConfig, LstmMode};
pub use pillars::PillarSpec;
pub use train::{SampleSet, TrainConfig, TrainReport};
