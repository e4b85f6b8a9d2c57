//! Bird's-eye-view grids: the dynamic-grid type shared by the simulator's
//! target rasterization, the learned predictor and the fusion stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Timestamp;

/// World-axis-aligned square BEV grid centered on a fixed world point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Cell edge length, meters.
    pub resolution: f64,
    /// Half the side length of the covered square, meters.
    pub half_extent: f64,
    /// World (x, y) of the grid center.
    #[serde(default)]
    pub center: [f64; 2],
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { resolution: 0.2, half_extent: 11.0, center: [0.0, 0.0] }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.half_extent > 0.0) {
            return Err(Error::InvalidConfig(format!("grid spec needs positive resolution and extent: {self:?}")));
        }
        Ok(())
    }

    /// Cells per side.
    pub fn cells(&self) -> usize {
        (2.0 * self.half_extent / self.resolution).round() as usize
    }

    pub fn len(&self) -> usize {
        self.cells() * self.cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// World (x, y) of the grid's lower-left corner.
    pub fn origin(&self) -> [f64; 2] {
        let side = self.cells() as f64 * self.resolution;
        [self.center[0] - side / 2.0, self.center[1] - side / 2.0]
    }

    /// Column/row of the cell containing world (x, y).
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let [ox, oy] = self.origin();
        let fx = ((x - ox) / self.resolution).floor();
        let fy = ((y - oy) / self.resolution).floor();
        let n = self.cells() as f64;
        if fx >= 0.0 && fy >= 0.0 && fx < n && fy < n {
            Some((fx as usize, fy as usize))
        } else {
            None
        }
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.cells() + ix
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let [ox, oy] = self.origin();
        [ox + (ix as f64 + 0.5) * self.resolution, oy + (iy as f64 + 0.5) * self.resolution]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }
}

/// Per-cell dynamic probability (inference) or binary label (target),
/// row-major with rows along +y.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGrid {
    pub stamp: Timestamp,
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl DynamicGrid {
    pub fn zeros(stamp: Timestamp, spec: GridSpec) -> Self {
        DynamicGrid { stamp, spec, values: vec![0.0; spec.len()] }
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.spec.index(ix, iy)]
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v > threshold).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    /// World (x, y), meters.
    pub position: [f64; 2],
    pub cell_count: usize,
    pub stamp: Timestamp,
}

/// 8-connected components of cells strictly above `threshold`; one detection
/// per component at the mean of its cell centers. Components are emitted in
/// row-major order of their first cell.
pub fn extract_detections_2d(grid: &DynamicGrid, threshold: f64) -> Vec<Detection2D> {
    let n = grid.spec.cells();
    let mut visited = vec![false; grid.values.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..grid.values.len() {
        if visited[start] || grid.values[start] <= threshold {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
        while let Some(idx) = stack.pop() {
            let (ix, iy) = (idx % n, idx / n);
            let [cx, cy] = grid.spec.cell_center(ix, iy);
            sx += cx;
            sy += cy;
            count += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (ix as i64 + dx, iy as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= n as i64 || ny >= n as i64 {
                        continue;
                    }
                    let j = ny as usize * n + nx as usize;
                    if !visited[j] && grid.values[j] > threshold {
                        visited[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(Detection2D {
            position: [sx / count as f64, sy / count as f64],
            cell_count: count,
            stamp: grid.stamp,
        });
    }
    out
}
