//! Per-frame detection pipeline: voxel-map motion segmentation and
//! clustering on one side, the learned dynamic grid on the other, joined at
//! fusion.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::Serialize;
use storm_core::bev::{extract_detections_2d, Detection2D};
use storm_core::cluster::{detect_obstacles, ClusterConfig, ClusterStats, Detection3D};
use storm_core::fusion::{Fusion, FusionReport};
use storm_core::ogm::TemporalVoxelGrid;
use storm_core::types::to_world;
use storm_core::{PointCloudScan, Vec3};
use storm_gridnet::pillars::encode_pillars;
use storm_gridnet::{weights, FrameInput, GridNet};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};

/// Wall time of each stage for one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub preprocess: Duration,
    pub mos: Duration,
    pub clustering: Duration,
    /// Pillarization, forward pass and 2D extraction.
    pub gridnet: Duration,
    pub fusion: Duration,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub report: FusionReport,
    pub dynamic_points: usize,
    pub static_points: usize,
    pub detections_3d: Vec<Detection3D>,
    pub cluster_stats: ClusterStats,
    pub detections_2d: Vec<Detection2D>,
    pub times: StageTimes,
}

impl FrameOutput {
    /// Positions the system reports for this frame.
    pub fn positions(&self) -> Vec<Vec3> {
        self.report.detections.iter().map(|d| d.position).collect()
    }
}

/// Output of the learned branch for one frame.
struct GridBranch {
    detections: Vec<Detection2D>,
    time: Duration,
}

struct GridStage {
    model: GridNet,
    history: VecDeque<FrameInput>,
    threshold: f64,
}

impl GridStage {
    fn run(&mut self, world: &[Vec3], velocity: Vec3, stamp: storm_core::Timestamp) -> Result<GridBranch> {
        let start = Instant::now();
        let cfg = self.model.config();
        let t = cfg.sequence_len;
        let pillars = encode_pillars(world, &cfg.pillar);
        if self.history.len() == t {
            self.history.pop_front();
        }
        self.history.push_back(FrameInput { pillars, velocity: [velocity.x, velocity.y, velocity.z] });
        let mut detections = Vec::new();
        if self.history.len() == t {
            let seq: Vec<FrameInput> = self.history.iter().cloned().collect();
            let values = self.model.predict(&seq)?;
            let grid = storm_core::bev::DynamicGrid { stamp, spec: cfg.pillar.grid, values };
            detections = extract_detections_2d(&grid, self.threshold);
        }
        Ok(GridBranch { detections, time: start.elapsed() })
    }
}

/// Loads the weights named in the config, or `None` when the grid is
/// disabled. The weights must have been trained with the configured network.
pub fn load_model(config: &PipelineConfig) -> Result<Option<GridNet>> {
    if !config.gridnet_enabled() {
        return Ok(None);
    }
    let path = config
        .weights
        .as_ref()
        .ok_or_else(|| Error::Config("the learned grid is enabled but no weights file is configured (set `weights` or disable it)".into()))?;
    let (model, manifest) = weights::load(path)?;
    if manifest.config != config.gridnet {
        return Err(Error::Config(format!("weights {} were trained with a different grid network configuration", path.display())));
    }
    Ok(Some(model))
}

pub struct Pipeline {
    ogm: TemporalVoxelGrid,
    cluster: ClusterConfig,
    fusion: Fusion,
    grid: Option<GridStage>,
    concurrent: bool,
}

impl Pipeline {
    /// Builds the pipeline, loading the grid weights named in the config
    /// unless the grid is disabled.
    pub fn new(config: &PipelineConfig) -> Result<Self> {
        Self::with_model(config, load_model(config)?)
    }

    /// Builds the pipeline around an in-memory model; `None` runs without
    /// the learned grid.
    pub fn with_model(config: &PipelineConfig, model: Option<GridNet>) -> Result<Self> {
        config.validate()?;
        if let Some(m) = &model {
            if m.config() != &config.gridnet {
                return Err(Error::Config("model configuration differs from the pipeline's".into()));
            }
        }
        Ok(Pipeline {
            ogm: TemporalVoxelGrid::new(config.ogm)?,
            cluster: config.effective_cluster(),
            fusion: Fusion::new(config.fusion, config.noise),
            grid: model.filter(|_| config.gridnet_enabled()).map(|model| GridStage {
                model,
                history: VecDeque::new(),
                threshold: config.grid_threshold,
            }),
            concurrent: false,
        })
    }

    /// Run the two branches on separate threads. Results are identical to
    /// the sequential mode.
    pub fn set_concurrent(&mut self, on: bool) {
        self.concurrent = on;
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn step(&mut self, scan: &PointCloudScan) -> Result<FrameOutput> {
        let mut times = StageTimes::default();
        let start = Instant::now();
        let world = to_world(scan)?;
        times.preprocess = start.elapsed();

        let stamp = scan.stamp;
        let sensor = scan.ego.position;
        let velocity = scan.ego.body_velocity;
        let (ogm, cluster) = (&mut self.ogm, &self.cluster);
        let mut ogm_branch = |times: &mut StageTimes| {
            let start = Instant::now();
            ogm.integrate_world(stamp, &sensor, &world);
            let seg = ogm.segment_world(&world);
            times.mos = start.elapsed();
            let start = Instant::now();
            let (dets, stats) = detect_obstacles(&seg.dynamic, &seg.static_points, stamp, cluster);
            times.clustering = start.elapsed();
            (seg.dynamic.len(), seg.static_points.len(), dets, stats)
        };

        let ((n_dyn, n_static, dets3, stats), grid) = match (&mut self.grid, self.concurrent) {
            (None, _) => (ogm_branch(&mut times), None),
            (Some(g), false) => {
                let a = ogm_branch(&mut times);
                (a, Some(g.run(&world, velocity, stamp)?))
            }
            (Some(g), true) => std::thread::scope(|s| {
                let handle = s.spawn(|| g.run(&world, velocity, stamp));
                let a = ogm_branch(&mut times);
                let b = handle.join().expect("grid branch panicked");
                b.map(|b| (a, Some(b)))
            })?,
        };
        let dets2 = match grid {
            Some(b) => {
                times.gridnet = b.time;
                b.detections
            }
            None => Vec::new(),
        };

        let start = Instant::now();
        let report = self.fusion.step(stamp, &dets3, &dets2);
        times.fusion = start.elapsed();
        Ok(FrameOutput {
            report,
            dynamic_points: n_dyn,
            static_points: n_static,
            detections_3d: dets3,
            cluster_stats: stats,
            detections_2d: dets2,
            times,
        })
    }
}
