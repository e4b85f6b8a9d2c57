//! Temporal occupancy grid for moving-object segmentation.
//!
//! Every voxel remembers when it was last seen occupied and last seen empty.
//! A voxel that has been seen empty for long enough becomes free; anything
//! that later shows up inside a free voxel is labeled dynamic.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{to_world, PointCloudScan, Timestamp, Vec3};

/// Frame stamps are sums of float periods; spans within this of a threshold
/// count as equal to it.
const SPAN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OgmConfig {
    /// Voxel edge length, meters.
    pub resolution: f64,
    /// Half side of the covered cube, meters.
    pub max_radius: f64,
    /// Occupied span after which a voxel stops being free, seconds.
    pub tau_o: f64,
    /// Unoccupied span after which a voxel becomes free, seconds.
    pub tau_u: f64,
    /// World point the cube is centered on.
    #[serde(default)]
    pub center: [f64; 3],
}

impl Default for OgmConfig {
    fn default() -> Self {
        OgmConfig { resolution: 0.2, max_radius: 11.0, tau_o: 0.5, tau_u: 0.5, center: [0.0; 3] }
    }
}

impl OgmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.max_radius > 0.0 && self.tau_o > 0.0 && self.tau_u > 0.0) {
            return Err(Error::InvalidConfig(format!("ogm config needs positive values: {self:?}")));
        }
        if self.cells() == 0 {
            return Err(Error::InvalidConfig("ogm grid has no voxels".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        (2.0 * self.max_radius / self.resolution).round() as usize
    }

    /// World coordinates of the cube's minimum corner.
    pub fn origin(&self) -> Vec3 {
        let half = self.cells() as f64 * self.resolution / 2.0;
        Vec3::new(self.center[0] - half, self.center[1] - half, self.center[2] - half)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelState {
    /// Hit during the most recent integrated frame.
    pub o: bool,
    pub t_o: f64,
    pub t_u: f64,
    pub f: bool,
    /// Start of the current run of same-kind observations.
    run_start: f64,
}

impl Default for VoxelState {
    fn default() -> Self {
        VoxelState { o: false, t_o: f64::NEG_INFINITY, t_u: f64::NEG_INFINITY, f: false, run_start: f64::NEG_INFINITY }
    }
}

impl VoxelState {
    fn last_was_occupied(&self) -> bool {
        self.t_o > self.t_u
    }

    fn observe_occupied(&mut self, t: f64, tau_o: f64) {
        if !self.last_was_occupied() {
            self.run_start = t;
        }
        self.o = true;
        self.t_o = self.t_o.max(t);
        if self.t_o - self.run_start > tau_o + SPAN_EPS {
            self.f = false;
        }
    }

    fn observe_free(&mut self, t: f64, tau_u: f64) {
        if self.last_was_occupied() || self.t_u == f64::NEG_INFINITY {
            self.run_start = t;
        }
        self.t_u = self.t_u.max(t);
        if self.t_u - self.run_start > tau_u + SPAN_EPS {
            self.f = true;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrateStats {
    pub points: usize,
    pub out_of_bounds: usize,
    pub occupied_voxels: usize,
    pub free_observations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segmentation {
    /// World-frame points.
    pub dynamic: Vec<Vec3>,
    pub static_points: Vec<Vec3>,
    pub out_of_bounds: usize,
}

#[derive(Debug, Clone)]
pub struct TemporalVoxelGrid {
    config: OgmConfig,
    n: usize,
    origin: Vec3,
    voxels: Vec<VoxelState>,
    /// Voxels whose `o` flag is set, cleared at the next integration.
    hit: Vec<usize>,
    stamp: Option<Timestamp>,
}

impl TemporalVoxelGrid {
    pub fn new(config: OgmConfig) -> Result<Self> {
        config.validate()?;
        let n = config.cells();
        Ok(TemporalVoxelGrid {
            config,
            n,
            origin: config.origin(),
            voxels: vec![VoxelState::default(); n * n * n],
            hit: Vec::new(),
            stamp: None,
        })
    }

    pub fn config(&self) -> &OgmConfig {
        &self.config
    }

    pub fn cells(&self) -> usize {
        self.n
    }

    pub fn stamp(&self) -> Option<Timestamp> {
        self.stamp
    }

    pub fn voxel(&self, idx: usize) -> &VoxelState {
        &self.voxels[idx]
    }

    pub fn coords_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let u = (p - self.origin) / self.config.resolution;
        let n = self.n as f64;
        let f = [u.x.floor(), u.y.floor(), u.z.floor()];
        if f.iter().all(|&c| c >= 0.0 && c < n) {
            Some(f.map(|c| c as usize))
        } else {
            None
        }
    }

    pub fn index_of(&self, p: &Vec3) -> Option<usize> {
        self.coords_of(p).map(|c| self.flat(c))
    }

    pub fn flat(&self, [x, y, z]: [usize; 3]) -> usize {
        (z * self.n + y) * self.n + x
    }

    pub fn unflat(&self, idx: usize) -> [usize; 3] {
        [idx % self.n, (idx / self.n) % self.n, idx / (self.n * self.n)]
    }

    pub fn voxel_center(&self, idx: usize) -> Vec3 {
        let c = self.unflat(idx);
        self.origin + Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * self.config.resolution
    }

    pub fn integrate_scan(&mut self, scan: &PointCloudScan) -> Result<IntegrateStats> {
        let world = to_world(scan)?;
        Ok(self.integrate_world(scan.stamp, &scan.ego.position, &world))
    }

    /// Integrates world-frame returns observed from `sensor`.
    pub fn integrate_world(&mut self, stamp: Timestamp, sensor: &Vec3, points: &[Vec3]) -> IntegrateStats {
        let t = stamp.secs();
        for &i in &self.hit {
            self.voxels[i].o = false;
        }
        self.hit.clear();

        let mut stats = IntegrateStats { points: points.len(), ..Default::default() };
        let mut ends = Vec::with_capacity(points.len());
        for p in points {
            match self.index_of(p) {
                Some(i) => {
                    ends.push(p);
                    if !self.voxels[i].o {
                        self.voxels[i].o = true;
                        self.hit.push(i);
                    }
                }
                None => stats.out_of_bounds += 1,
            }
        }
        stats.occupied_voxels = self.hit.len();

        if self.coords_of(sensor).is_some() {
            let tau_u = self.config.tau_u;
            let mut path = Vec::new();
            for p in ends {
                path.clear();
                self.traverse_into(sensor, p, &mut path);
                path.pop();
                for &i in &path {
                    let v = &mut self.voxels[i];
                    // one free observation per voxel per frame
                    if v.o || v.t_u == t {
                        continue;
                    }
                    v.observe_free(t, tau_u);
                    stats.free_observations += 1;
                }
            }
        }

        let tau_o = self.config.tau_o;
        for &i in &self.hit {
            self.voxels[i].observe_occupied(t, tau_o);
        }
        self.stamp = Some(stamp);
        stats
    }

    /// Labels points of the frame just integrated: dynamic iff the voxel is
    /// both free and occupied.
    pub fn segment_dynamic(&self, scan: &PointCloudScan) -> Result<Segmentation> {
        Ok(self.segment_world(&to_world(scan)?))
    }

    pub fn segment_world(&self, points: &[Vec3]) -> Segmentation {
        let mut s = Segmentation::default();
        for p in points {
            match self.index_of(p) {
                Some(i) => {
                    let v = &self.voxels[i];
                    if v.f && v.o {
                        s.dynamic.push(*p);
                    } else {
                        s.static_points.push(*p);
                    }
                }
                None => s.out_of_bounds += 1,
            }
        }
        s
    }

    /// Ordered voxel indices crossed by the segment `a -> b`, ending at the
    /// voxel containing `b`. Both endpoints must be inside the grid.
    pub fn traverse_ray(&self, a: &Vec3, b: &Vec3) -> Vec<usize> {
        let mut out = Vec::new();
        self.traverse_into(a, b, &mut out);
        out
    }

    fn traverse_into(&self, a: &Vec3, b: &Vec3, out: &mut Vec<usize>) {
        let res = self.config.resolution;
        let ua = (a - self.origin) / res;
        let ub = (b - self.origin) / res;
        let d = ub - ua;
        let mut cur = [ua.x.floor() as i64, ua.y.floor() as i64, ua.z.floor() as i64];
        let end = [ub.x.floor() as i64, ub.y.floor() as i64, ub.z.floor() as i64];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            if end[k] > cur[k] {
                step[k] = 1;
                t_max[k] = (cur[k] as f64 + 1.0 - ua[k]) / d[k];
                t_delta[k] = 1.0 / d[k];
            } else if end[k] < cur[k] {
                step[k] = -1;
                t_max[k] = (cur[k] as f64 - ua[k]) / d[k];
                t_delta[k] = -1.0 / d[k];
            }
        }
        let n = self.n as i64;
        let flat = |c: [i64; 3]| ((c[2] * n + c[1]) * n + c[0]) as usize;
        out.push(flat(cur));
        // a fixed number of steps per axis keeps rounding from overshooting
        let mut remaining = [0i64; 3];
        for k in 0..3 {
            remaining[k] = (end[k] - cur[k]).abs();
        }
        while remaining.iter().any(|&r| r > 0) {
            let mut axis = 3;
            for k in 0..3 {
                if remaining[k] > 0 && (axis == 3 || t_max[k] < t_max[axis]) {
                    axis = k;
                }
            }
            cur[axis] += step[axis];
            t_max[axis] += t_delta[axis];
            remaining[axis] -= 1;
            out.push(flat(cur));
        }
    }

    pub fn free_count(&self) -> usize {
        self.voxels.iter().filter(|v| v.f).count()
    }

    /// One text line listing the free and occupied voxels of the current
    /// frame, for visual dumps.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let free: Vec<usize> = (0..self.voxels.len()).filter(|&i| self.voxels[i].f).collect();
        let mut occ = self.hit.clone();
        occ.sort_unstable();
        let line = serde_json::json!({
            "t": self.stamp.map(|s| s.secs()),
            "resolution": self.config.resolution,
            "origin": [self.origin.x, self.origin.y, self.origin.z],
            "cells": self.n,
            "free": free,
            "occupied": occ,
        });
        writeln!(w, "{line}")
    }
}
