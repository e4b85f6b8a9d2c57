//! Whole-pipeline configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use storm_core::cluster::ClusterConfig;
use storm_core::fusion::FusionConfig;
use storm_core::ogm::OgmConfig;
use storm_core::tracker::NoiseParams;
use storm_gridnet::{GridNetConfig, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Run without the learned grid: fusion sees no 2D detections.
    pub disable_gridnet: bool,
    /// Skip the static-proximity demotion in clustering.
    pub disable_nn_check: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ogm: OgmConfig,
    pub cluster: ClusterConfig,
    pub noise: NoiseParams,
    pub fusion: FusionConfig,
    pub gridnet: GridNetConfig,
    /// Cells with probability strictly above this form 2D detections.
    pub grid_threshold: f64,
    /// Trained grid weights; required unless the grid is disabled.
    pub weights: Option<PathBuf>,
    pub ablation: Ablation,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        // voxel and cell boundaries offset half a voxel from the room's
        // walls and floor, grid sized to the room
        let mut gridnet = GridNetConfig::default();
        gridnet.pillar.grid = crate::scenarios::room_grid();
        PipelineConfig {
            ogm: OgmConfig { center: [0.1, 0.1, 0.1], ..OgmConfig::default() },
            cluster: ClusterConfig::default(),
            noise: NoiseParams::default(),
            fusion: FusionConfig::default(),
            gridnet,
            grid_threshold: 0.5,
            weights: None,
            ablation: Ablation::default(),
            train: crate::scenarios::fixture_train_config(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Reads and validates a config file. A relative weights path is taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(w), Some(dir)) = (&c.weights, path.parent()) {
            if w.is_relative() {
                c.weights = Some(dir.join(w));
            }
        }
        Ok(c)
    }

    /// Per-module checks plus cross-module consistency.
    pub fn validate(&self) -> Result<()> {
        self.ogm.validate()?;
        self.cluster.validate()?;
        self.noise.validate()?;
        self.fusion.validate()?;
        self.gridnet.validate()?;
        self.train.validate()?;
        if !(self.grid_threshold > 0.0 && self.grid_threshold < 1.0) {
            return Err(Error::Config(format!("grid_threshold must lie in (0, 1), got {}", self.grid_threshold)));
        }
        // the BEV grid must lie inside the voxel map's footprint
        let g = &self.gridnet.pillar.grid;
        let half = g.cells() as f64 * g.resolution / 2.0;
        let o = &self.ogm;
        let reach = o.cells() as f64 * o.resolution / 2.0;
        for k in 0..2 {
            if (g.center[k] - o.center[k]).abs() + half > reach + 1e-9 {
                return Err(Error::Config(format!(
                    "BEV grid (center {:?}, half extent {half}) extends beyond the voxel map (center {:?}, half extent {reach})",
                    g.center, o.center
                )));
            }
        }
        Ok(())
    }

    /// Cluster settings with the ablation applied.
    pub fn effective_cluster(&self) -> ClusterConfig {
        let mut c = self.cluster;
        c.disable_nn_check |= self.ablation.disable_nn_check;
        c
    }

    pub fn gridnet_enabled(&self) -> bool {
        !self.ablation.disable_gridnet
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = PipelineConfig::from_toml_str("grid_threshold = 0.4\n[ogm]\ntau_u = 0.3\n").unwrap();
        assert_eq!(c.ogm.tau_u, 0.3);
        assert_eq!(c.ogm.tau_o, 0.5);
        assert_eq!(c.grid_threshold, 0.4);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(PipelineConfig::from_toml_str("[ogm]\ntau = 1.0\n").is_err());
    }

    #[test]
    fn grid_outside_voxel_map_is_rejected() {
        let mut c = PipelineConfig::default();
        c.gridnet.pillar.grid.center = [8.0, 0.0];
        assert!(c.validate().is_err());
    }
}
