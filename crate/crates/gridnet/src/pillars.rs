//! Groups world-frame points into vertical columns ("pillars") over the BEV
//! grid and computes the per-point feature vectors the pillar network eats.

use serde::{Deserialize, Serialize};
use storm_core::bev::GridSpec;
use storm_core::Vec3;

use crate::error::{Error, Result};

pub const POINT_FEATURES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PillarSpec {
    pub grid: GridSpec,
    /// Points outside `[z_min, z_max]` are dropped (floor and ceiling returns).
    pub z_min: f64,
    pub z_max: f64,
    pub max_points_per_pillar: usize,
}

impl Default for PillarSpec {
    fn default() -> Self {
        PillarSpec { grid: GridSpec::default(), z_min: 0.15, z_max: 2.6, max_points_per_pillar: 32 }
    }
}

impl PillarSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.z_max > self.z_min) || self.max_points_per_pillar == 0 {
            return Err(Error::Config(format!("bad pillar spec: {self:?}")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }
}

/// Features are stored feature-major: `features[f * n + j]` for point `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarBatch {
    pub features: Vec<f64>,
    /// Flat grid cell (`iy * cells + ix`) of each kept point.
    pub cell: Vec<usize>,
    pub cells_per_side: usize,
}

impl PillarBatch {
    pub fn points(&self) -> usize {
        self.cell.len()
    }

    pub fn pillar_count(&self) -> usize {
        let mut c = self.cell.clone();
        c.sort_unstable();
        c.dedup();
        c.len()
    }
}

/// Per point: position relative to the grid center (x, y) and raw z, offset
/// from the pillar's point mean, and (x, y) offset from the pillar's cell
/// center. Pillars keep their first `max_points_per_pillar` points.
pub fn encode_pillars(points: &[Vec3], spec: &PillarSpec) -> PillarBatch {
    let n = spec.cells();
    let mut kept: Vec<(usize, Vec3)> = Vec::new();
    let mut count = std::collections::HashMap::<usize, usize>::new();
    for p in points {
        if p.z < spec.z_min || p.z > spec.z_max {
            continue;
        }
        let Some((ix, iy)) = spec.grid.cell_of(p.x, p.y) else { continue };
        let c = iy * n + ix;
        let k = count.entry(c).or_insert(0);
        if *k >= spec.max_points_per_pillar {
            continue;
        }
        *k += 1;
        kept.push((c, *p));
    }
    let mut sums = std::collections::HashMap::<usize, (Vec3, f64)>::new();
    for (c, p) in &kept {
        let e = sums.entry(*c).or_insert((Vec3::zeros(), 0.0));
        e.0 += p;
        e.1 += 1.0;
    }
    let m = kept.len();
    let mut features = vec![0.0; POINT_FEATURES * m];
    let [gx, gy] = spec.grid.center;
    for (j, (c, p)) in kept.iter().enumerate() {
        let (s, k) = sums[c];
        let mean = s / k;
        let [cx, cy] = spec.grid.cell_center(c % n, c / n);
        let f = [p.x - gx, p.y - gy, p.z, p.x - mean.x, p.y - mean.y, p.z - mean.z, p.x - cx, p.y - cy];
        for (i, v) in f.into_iter().enumerate() {
            features[i * m + j] = v;
        }
    }
    PillarBatch { features, cell: kept.into_iter().map(|(c, _)| c).collect(), cells_per_side: n }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PillarSpec {
        PillarSpec { grid: GridSpec { resolution: 0.2, half_extent: 1.0, center: [0.0, 0.0] }, ..Default::default() }
    }

    fn feature(b: &PillarBatch, f: usize, j: usize) -> f64 {
        b.features[f * b.points() + j]
    }

    #[test]
    fn single_point_features() {
        let b = encode_pillars(&[Vec3::new(0.05, -0.13, 1.0)], &spec());
        assert_eq!(b.points(), 1);
        // cell column 5 (0.0..0.2), row 4 (-0.2..0.0)
        assert_eq!(b.cell[0], 4 * 10 + 5);
        let want = [0.05, -0.13, 1.0, 0.0, 0.0, 0.0, 0.05 - 0.1, -0.13 + 0.1];
        for (f, w) in want.iter().enumerate() {
            assert!((feature(&b, f, 0) - w).abs() < 1e-12, "feature {f}");
        }
    }

    #[test]
    fn mean_offsets_are_per_pillar() {
        let pts = [Vec3::new(0.01, 0.01, 0.5), Vec3::new(0.03, 0.05, 1.5), Vec3::new(0.5, 0.5, 1.0)];
        let b = encode_pillars(&pts, &spec());
        assert_eq!(b.pillar_count(), 2);
        assert!((feature(&b, 5, 0) + 0.5).abs() < 1e-12);
        assert!((feature(&b, 3, 1) - 0.01).abs() < 1e-12);
        assert_eq!(feature(&b, 5, 2), 0.0);
    }

    #[test]
    fn crops_height_extent_and_capacity() {
        let mut s = spec();
        s.max_points_per_pillar = 2;
        let pts = [
            Vec3::new(0.0, 0.0, 0.05),
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::new(5.0, 0.0, 1.0),
            Vec3::new(0.01, 0.0, 1.0),
            Vec3::new(0.02, 0.0, 1.0),
            Vec3::new(0.03, 0.0, 1.0),
        ];
        let b = encode_pillars(&pts, &s);
        assert_eq!(b.points(), 2);
        assert!((feature(&b, 0, 1) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn grid_center_offsets_positions() {
        let mut s = spec();
        s.grid.center = [10.0, 0.0];
        let b = encode_pillars(&[Vec3::new(10.3, 0.0, 1.0)], &s);
        assert!((feature(&b, 0, 0) - 0.3).abs() < 1e-12);
    }
}
