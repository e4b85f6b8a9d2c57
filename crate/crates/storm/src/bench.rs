//! Per-stage wall-time report shaped as Pre-process | MOS | Clustering |
//! Fusion | Total, with one row per pipeline.

use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;
use storm_core::simworld::FrameRecord;
use storm_gridnet::GridNet;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::pipeline::{Pipeline, StageTimes};

/// Mean and 95th percentile of one stage, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub p95: f64,
}

impl Stat {
    pub fn of(samples: &[Duration]) -> Stat {
        if samples.is_empty() {
            return Stat::default();
        }
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let mean = ms.iter().sum::<f64>() / ms.len() as f64;
        // nearest-rank percentile
        let rank = ((0.95 * ms.len() as f64).ceil() as usize).clamp(1, ms.len());
        Stat { mean, p95: ms[rank - 1] }
    }
}

/// A stage the row's pipeline does not have is `None`.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub name: String,
    pub preprocess: Option<Stat>,
    pub mos: Stat,
    pub clustering: Option<Stat>,
    pub fusion: Stat,
    pub total: Stat,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub mean_points: f64,
    pub rows: Vec<BenchRow>,
}

/// Times every stage over `records`, sequentially so stages do not compete
/// for cores. The grid row appears when a model is given.
pub fn run_bench(records: &[FrameRecord], config: &PipelineConfig, model: Option<GridNet>) -> Result<BenchReport> {
    if records.is_empty() {
        return Err(Error::Data("benchmark needs at least one frame".into()));
    }
    let mut cfg = config.clone();
    cfg.ablation.disable_gridnet = model.is_none();
    let mut pipeline = Pipeline::with_model(&cfg, model)?;
    let mut times: Vec<StageTimes> = Vec::with_capacity(records.len());
    for r in records {
        times.push(pipeline.step(&r.scan)?.times);
    }
    let col = |f: fn(&StageTimes) -> Duration| Stat::of(&times.iter().map(f).collect::<Vec<_>>());
    let ogm_total = col(|t| t.preprocess + t.mos + t.clustering + t.fusion);
    let mut rows = vec![BenchRow {
        name: "OGM".into(),
        preprocess: Some(col(|t| t.preprocess)),
        mos: col(|t| t.mos),
        clustering: Some(col(|t| t.clustering)),
        fusion: col(|t| t.fusion),
        total: ogm_total,
    }];
    if !cfg.ablation.disable_gridnet {
        rows.push(BenchRow {
            name: "GridNet".into(),
            preprocess: None,
            mos: col(|t| t.gridnet),
            clustering: None,
            fusion: col(|t| t.fusion),
            total: col(|t| t.gridnet + t.fusion),
        });
    }
    let mean_points = records.iter().map(|r| r.scan.points.len()).sum::<usize>() as f64 / records.len() as f64;
    Ok(BenchReport { frames: records.len(), mean_points, rows })
}

pub const COLUMNS: [&str; 5] = ["Pre-process", "MOS", "Clustering", "Fusion", "Total"];

impl BenchReport {
    /// Mean milliseconds per stage, then the same table for the 95th
    /// percentile.
    pub fn table(&self) -> String {
        let mut out = format!("# {} frames, {:.0} points per frame, wall time in ms\n", self.frames, self.mean_points);
        for (label, pick) in [("mean", (|s: &Stat| s.mean) as fn(&Stat) -> f64), ("p95", |s: &Stat| s.p95)] {
            let mut table = vec![std::iter::once(label.to_string()).chain(COLUMNS.iter().map(|c| c.to_string())).collect::<Vec<_>>()];
            for r in &self.rows {
                let cell = |s: Option<&Stat>| s.map_or_else(|| "-".to_string(), |s| format!("{:.2}", pick(s)));
                table.push(vec![
                    r.name.clone(),
                    cell(r.preprocess.as_ref()),
                    cell(Some(&r.mos)),
                    cell(r.clustering.as_ref()),
                    cell(Some(&r.fusion)),
                    cell(Some(&r.total)),
                ]);
            }
            let width: Vec<usize> = (0..6).map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
            for r in &table {
                let line: Vec<String> = r.iter().enumerate().map(|(c, s)| format!("{s:>w$}", w = width[c])).collect();
                let _ = writeln!(out, "{}", line.join(" | "));
            }
        }
        out
    }
}
