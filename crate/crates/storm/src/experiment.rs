//! Runs the pipeline over recorded frames and scores its output against
//! ground truth over a sweep of distance thresholds.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use storm_core::bev::GridSpec;
use storm_core::eval::{associate_frame, evaluate_sweep, SweepResult};
use storm_core::fusion::FusionReport;
use storm_core::simworld::FrameRecord;
use storm_core::Vec3;
use storm_gridnet::GridNet;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::scenarios::WARMUP_S;

/// What gets scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Track positions from fusing clusters with the learned grid.
    Fusion,
    /// Track positions with the learned grid switched off.
    NoGridnet,
    /// Raw cluster centroids, no tracking.
    OgmOnly,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Fusion, Method::NoGridnet, Method::OgmOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fusion => "fusion",
            Method::NoGridnet => "no-gridnet",
            Method::OgmOnly => "ogm-only",
        }
    }

    pub fn uses_grid(self) -> bool {
        self == Method::Fusion
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected fusion, no-gridnet or ogm-only)")))
    }
}

/// One scored frame.
#[derive(Debug, Clone)]
pub struct ScoredFrame {
    pub stamp: f64,
    pub detections: Vec<Vec3>,
    pub truths: Vec<Vec3>,
    /// Detections the cluster branch produced.
    pub clusters: usize,
    pub report: FusionReport,
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    /// Frames after the warm-up, in order.
    pub frames: Vec<ScoredFrame>,
}

impl MethodRun {
    pub fn pairs(&self) -> Vec<(Vec<Vec3>, Vec<Vec3>)> {
        self.frames.iter().map(|f| (f.detections.clone(), f.truths.clone())).collect()
    }

    pub fn sweep(&self, sweep: &[f64]) -> SweepResult {
        evaluate_sweep(&self.pairs(), sweep)
    }
}

/// Rejects a recording whose target grid differs from the one the learned
/// grid predicts on.
pub fn check_dataset_grid(dataset_grid: Option<&GridSpec>, config: &PipelineConfig) -> Result<()> {
    match dataset_grid {
        Some(g) if config.gridnet_enabled() && *g != config.gridnet.pillar.grid => Err(Error::Config(format!(
            "dataset grid {g:?} differs from the configured BEV grid {:?}",
            config.gridnet.pillar.grid
        ))),
        _ => Ok(()),
    }
}

/// Runs one method over `records`. Frames within the warm-up after the
/// first stamp are processed but not scored; truths are the dynamic
/// obstacles' centers.
pub fn run_method(records: &[FrameRecord], config: &PipelineConfig, model: Option<&GridNet>, method: Method) -> Result<MethodRun> {
    let mut cfg = config.clone();
    let model = if method.uses_grid() {
        if !cfg.gridnet_enabled() {
            return Err(Error::Config("fusion needs the learned grid, but it is disabled".into()));
        }
        Some(model.ok_or_else(|| Error::Config("fusion needs a trained grid model".into()))?.clone())
    } else {
        cfg.ablation.disable_gridnet = true;
        None
    };
    let mut pipeline = Pipeline::with_model(&cfg, model)?;
    let t0 = records.first().map_or(0.0, |r| r.scan.stamp.secs());
    let mut frames = Vec::new();
    for r in records {
        let out = pipeline.step(&r.scan)?;
        let stamp = r.scan.stamp.secs();
        if stamp - t0 < WARMUP_S - 1e-9 {
            continue;
        }
        let detections = match method {
            Method::OgmOnly => out.detections_3d.iter().map(|d| d.centroid).collect(),
            _ => out.positions(),
        };
        let truths = r.ground_truth.iter().filter(|g| g.is_dynamic).map(|g| g.position).collect();
        frames.push(ScoredFrame { stamp, detections, truths, clusters: out.detections_3d.len(), report: out.report });
    }
    Ok(MethodRun { method, frames })
}

pub fn run_methods(records: &[FrameRecord], config: &PipelineConfig, model: Option<&GridNet>, methods: &[Method]) -> Result<Vec<MethodRun>> {
    methods.iter().map(|&m| run_method(records, config, model, m)).collect()
}

/// One structured row per method and threshold.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub method: Method,
    pub dist_thresh: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub position_error: Option<f64>,
}

pub fn sweep_rows(setting: &str, method: Method, sweep: &SweepResult) -> Vec<SweepRow> {
    sweep
        .iter()
        .map(|e| {
            let m = &e.metrics;
            SweepRow {
                setting: setting.into(),
                method,
                dist_thresh: e.dist_thresh,
                tp: m.tp,
                fp: m.fp,
                fn_: m.fn_,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                position_error: m.position_error,
            }
        })
        .collect()
}

/// Per-frame counts for one method and threshold, for plotting scores over
/// time.
#[derive(Debug, Clone, Serialize)]
pub struct TimelineRow {
    pub method: Method,
    pub dist_thresh: f64,
    pub stamp: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn timeline(run: &MethodRun, sweep: &[f64]) -> Vec<TimelineRow> {
    let mut rows = Vec::new();
    for &th in sweep {
        for f in &run.frames {
            let r = associate_frame(&f.detections, &f.truths, th);
            rows.push(TimelineRow { method: run.method, dist_thresh: th, stamp: f.stamp, tp: r.tp, fp: r.fp, fn_: r.fn_ });
        }
    }
    rows
}
