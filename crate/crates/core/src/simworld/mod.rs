//! Synthetic indoor scenes and a ray-cast LiDAR with ground truth.
//!
//! A scene is a room (axis-aligned box seen from the inside) containing static
//! boxes and vertical cylinders plus dynamic obstacles that follow waypoint
//! trajectories. [`cast_scan`] fires a fixed azimuth x elevation ray fan from
//! the ego pose and keeps the nearest hit of every ray.

mod dataset;
mod geometry;
pub mod presets;
mod trajectory;

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{
    format_point_coord, quantize_point_coord, read_dataset, write_dataset, DatasetHeader, DatasetReader,
    DatasetWriter, DATASET_FORMAT, DATASET_VERSION,
};
pub use geometry::{Aabb, Cylinder, Shape};
pub use trajectory::Trajectory;

use crate::bev::{DynamicGrid, GridSpec};
use crate::error::{Error, Result};
use crate::types::{EgoState, GroundTruthObstacle, PointCloudScan, Quat, Timestamp, Vec3};

pub const SCENE_VERSION: u32 = 1;

/// Default sensor height: a small quadcopter resting on the floor. Low
/// enough that nearby walkers are seen down to the knees.
pub const SENSOR_HEIGHT: f64 = 0.3;

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarConfig {
    pub rate_hz: f64,
    pub azimuth_count: usize,
    pub elevation_angles_deg: Vec<f64>,
    pub max_range_m: f64,
    pub range_noise_sigma_m: f64,
    /// Returns beyond this count are subsampled uniformly at random.
    pub max_points: usize,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            rate_hz: 10.0,
            azimuth_count: 360,
            elevation_angles_deg: linspace(-7.0, 52.0, 16),
            max_range_m: 11.0,
            range_noise_sigma_m: 0.0,
            max_points: 20_000,
        }
    }
}

impl LidarConfig {
    pub fn period(&self) -> f64 {
        1.0 / self.rate_hz
    }

    /// Unit ray directions in the sensor frame, elevation-major.
    pub fn ray_directions(&self) -> Vec<Vec3> {
        let mut dirs = Vec::with_capacity(self.azimuth_count * self.elevation_angles_deg.len());
        for &el in &self.elevation_angles_deg {
            let el = el.to_radians();
            for a in 0..self.azimuth_count {
                let az = std::f64::consts::TAU * a as f64 / self.azimuth_count as f64;
                dirs.push(Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        dirs
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicShape {
    /// Vertical cylinder centered on the trajectory point.
    Cylinder { radius: f64, height: f64 },
    Box { half_extents: [f64; 3] },
}

impl DynamicShape {
    pub fn footprint_radius(&self) -> f64 {
        match *self {
            DynamicShape::Cylinder { radius, .. } => radius,
            DynamicShape::Box { half_extents } => half_extents[0].max(half_extents[1]),
        }
    }

    pub fn placed_at(&self, c: Vec3) -> Shape {
        match *self {
            DynamicShape::Cylinder { radius, height } => {
                Shape::Cylinder(Cylinder { center: [c.x, c.y], radius, z_min: c.z - height / 2.0, z_max: c.z + height / 2.0 })
            }
            DynamicShape::Box { half_extents } => Shape::Box(Aabb::from_center(c, half_extents)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicObstacleConfig {
    pub id: String,
    pub shape: DynamicShape,
    /// Trajectory of the shape center.
    pub trajectory: Trajectory,
    /// The obstacle exists only for `active_from <= t < active_until`.
    #[serde(default)]
    pub active_from: Option<f64>,
    #[serde(default)]
    pub active_until: Option<f64>,
}

impl DynamicObstacleConfig {
    pub fn is_active(&self, t: f64) -> bool {
        self.active_from.map_or(true, |a| t >= a) && self.active_until.map_or(true, |b| t < b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoConfig {
    /// Trajectory of the sensor origin.
    pub trajectory: Trajectory,
    #[serde(default)]
    pub yaw: f64,
}

impl Default for EgoConfig {
    fn default() -> Self {
        EgoConfig { trajectory: Trajectory::stationary([0.0, 0.0, SENSOR_HEIGHT]), yaw: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub version: u32,
    pub room_bounds: Aabb,
    #[serde(default)]
    pub static_obstacles: Vec<Shape>,
    #[serde(default)]
    pub dynamic_obstacles: Vec<DynamicObstacleConfig>,
    #[serde(default)]
    pub ego: EgoConfig,
    #[serde(default)]
    pub lidar: LidarConfig,
    /// Overrides the duration implied by the trajectories.
    #[serde(default)]
    pub duration_s: Option<f64>,
}

impl SceneConfig {
    /// 10 x 10 m room, 3 m tall, sensor stationary above the center.
    pub fn empty_room() -> Self {
        SceneConfig {
            version: SCENE_VERSION,
            room_bounds: Aabb { min: [-5.0, -5.0, 0.0], max: [5.0, 5.0, 3.0] },
            static_obstacles: vec![],
            dynamic_obstacles: vec![],
            ego: EgoConfig::default(),
            lidar: LidarConfig::default(),
            duration_s: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}

/// A validated, immutable scene.
#[derive(Debug, Clone)]
pub struct Scene {
    config: SceneConfig,
    rays: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub scan: PointCloudScan,
    pub ground_truth: Vec<GroundTruthObstacle>,
}

pub fn build_scene(config: SceneConfig) -> Result<Scene> {
    if config.version != SCENE_VERSION {
        return Err(Error::InvalidScene(format!("unsupported scene version {}", config.version)));
    }
    let room = config.room_bounds;
    if !room.is_valid() {
        return Err(Error::InvalidScene("room bounds are empty".into()));
    }
    let l = &config.lidar;
    if !(l.rate_hz > 0.0 && l.max_range_m > 0.0 && l.range_noise_sigma_m >= 0.0 && l.azimuth_count > 0) {
        return Err(Error::InvalidScene(format!("invalid lidar config {l:?}")));
    }
    for (i, s) in config.static_obstacles.iter().enumerate() {
        let b = s.bounds();
        if !b.is_valid() || !room.contains_box(&b) {
            return Err(Error::InvalidScene(format!("static obstacle {i} is degenerate or outside the room")));
        }
    }
    for d in &config.dynamic_obstacles {
        d.trajectory.validate()?;
        let r = d.shape.footprint_radius();
        if !(r > 0.0) {
            return Err(Error::InvalidScene(format!("dynamic obstacle {} needs a positive size", d.id)));
        }
        for w in &d.trajectory.waypoints {
            if !room.contains_box(&d.shape.placed_at(Vec3::from(*w)).bounds()) {
                return Err(Error::InvalidScene(format!("dynamic obstacle {} leaves the room at {w:?}", d.id)));
            }
        }
    }
    config.ego.trajectory.validate()?;
    let ego0 = config.ego.trajectory.position(0.0);
    if !room.contains(&ego0) {
        return Err(Error::InvalidScene("ego starts outside the room".into()));
    }
    if config.static_obstacles.iter().any(|s| s.contains(&ego0)) {
        return Err(Error::InvalidScene("ego start overlaps a static obstacle".into()));
    }
    for d in config.dynamic_obstacles.iter().filter(|d| d.is_active(0.0)) {
        if d.shape.placed_at(d.trajectory.position(0.0)).contains(&ego0) {
            return Err(Error::InvalidScene(format!("ego start overlaps dynamic obstacle {}", d.id)));
        }
    }
    let rays = config.lidar.ray_directions();
    Ok(Scene { config, rays })
}

impl Scene {
    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn lidar(&self) -> &LidarConfig {
        &self.config.lidar
    }

    pub fn static_count(&self) -> usize {
        self.config.static_obstacles.len()
    }

    pub fn dynamic_count(&self) -> usize {
        self.config.dynamic_obstacles.len()
    }

    pub fn duration(&self) -> f64 {
        self.config.duration_s.unwrap_or_else(|| {
            self.config.dynamic_obstacles.iter().map(|d| d.trajectory.duration()).fold(0.0, f64::max)
        })
    }

    pub fn ego_state(&self, t: f64) -> EgoState {
        let ego = &self.config.ego;
        let q = Quat::from_yaw(ego.yaw);
        let rot = q.rotation().expect("yaw quaternion is unit");
        EgoState {
            position: ego.trajectory.position(t),
            orientation: q,
            body_velocity: rot.inverse() * ego.trajectory.velocity(t),
        }
    }

    /// Shapes of the dynamic obstacles active at `t`, with their config index.
    pub fn dynamic_shapes_at(&self, t: f64) -> Vec<(usize, Shape)> {
        self.config
            .dynamic_obstacles
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_active(t))
            .map(|(i, d)| (i, d.shape.placed_at(d.trajectory.position(t))))
            .collect()
    }

    pub fn ground_truth(&self, t: f64) -> Vec<GroundTruthObstacle> {
        self.config
            .dynamic_obstacles
            .iter()
            .filter(|d| d.is_active(t))
            .map(|d| GroundTruthObstacle {
                id: d.id.clone(),
                position: d.trajectory.position(t),
                radius: d.shape.footprint_radius(),
                is_dynamic: true,
            })
            .collect()
    }

    /// Nearest surface hit along a world-frame ray, excluding noise and range
    /// limits.
    pub fn nearest_hit(&self, origin: &Vec3, dir: &Vec3, dynamic: &[(usize, Shape)]) -> Option<f64> {
        let mut best = self.config.room_bounds.ray_hit(origin, dir, HIT_EPS).unwrap_or(f64::INFINITY);
        for s in &self.config.static_obstacles {
            if let Some(t) = s.ray_hit(origin, dir, HIT_EPS) {
                best = best.min(t);
            }
        }
        for (_, s) in dynamic {
            if let Some(t) = s.ray_hit(origin, dir, HIT_EPS) {
                best = best.min(t);
            }
        }
        best.is_finite().then_some(best)
    }

    /// Frame stamps for `seconds` of data at the lidar rate.
    pub fn frame_stamps(&self, seconds: f64) -> Vec<Timestamp> {
        let period = self.lidar().period();
        let n = (seconds * self.lidar().rate_hz).round() as usize;
        (0..n).map(|k| Timestamp(k as f64 * period)).collect()
    }
}

/// Simulates one sweep at `stamp`. Points are returned in the sensor frame,
/// quantized to the dataset's point precision so that records round-trip
/// through the text format bit-exactly.
pub fn cast_scan(scene: &Scene, stamp: Timestamp, rng_seed: u64) -> FrameRecord {
    let t = stamp.secs();
    let ego = scene.ego_state(t);
    let rot = ego.orientation.rotation().expect("scene ego orientation is unit");
    let origin = ego.position;
    let lidar = scene.lidar();
    let dynamic = scene.dynamic_shapes_at(t);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = (lidar.range_noise_sigma_m > 0.0).then(|| Normal::new(0.0, lidar.range_noise_sigma_m).unwrap());

    let mut points = Vec::new();
    for d in &scene.rays {
        let dw = rot * d;
        let Some(range) = scene.nearest_hit(&origin, &dw, &dynamic) else { continue };
        if range > lidar.max_range_m {
            continue;
        }
        let r = match &noise {
            Some(n) => (range + n.sample(&mut rng)).max(0.0),
            None => range,
        };
        points.push((d * r).map(quantize_point_coord));
    }
    if points.len() > lidar.max_points {
        let mut keep = sample(&mut rng, points.len(), lidar.max_points).into_vec();
        keep.sort_unstable();
        points = keep.into_iter().map(|i| points[i]).collect();
    }
    FrameRecord { scan: PointCloudScan::new(stamp, points, ego), ground_truth: scene.ground_truth(t) }
}

/// Per-frame seed derived from a dataset seed.
pub fn frame_seed(dataset_seed: u64, frame: usize) -> u64 {
    dataset_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(frame as u64)
}

/// Simulates `seconds` of data.
pub fn simulate(scene: &Scene, seconds: f64, seed: u64) -> Vec<FrameRecord> {
    scene
        .frame_stamps(seconds)
        .into_iter()
        .enumerate()
        .map(|(k, stamp)| cast_scan(scene, stamp, frame_seed(seed, k)))
        .collect()
}

/// Binary BEV target: cells whose center lies within an obstacle's footprint
/// radius of its (x, y) are set.
pub fn rasterize_target_grid(ground_truth: &[GroundTruthObstacle], spec: &GridSpec, stamp: Timestamp) -> DynamicGrid {
    let mut grid = DynamicGrid::zeros(stamp, *spec);
    let n = spec.cells();
    for g in ground_truth.iter().filter(|g| g.is_dynamic) {
        let (x, y, r) = (g.position.x, g.position.y, g.radius);
        let [ox, oy] = spec.origin();
        let span = |lo: f64, hi: f64, o: f64| {
            let a = ((lo - o) / spec.resolution).floor().clamp(0.0, n as f64) as usize;
            let b = ((hi - o) / spec.resolution).ceil().clamp(0.0, n as f64) as usize;
            a..b
        };
        let (xs, ys) = (span(x - r, x + r, ox), span(y - r, y + r, oy));
        for iy in ys {
            for ix in xs.clone() {
                let [cx, cy] = spec.cell_center(ix, iy);
                if (cx - x).powi(2) + (cy - y).powi(2) <= r * r {
                    grid.values[spec.index(ix, iy)] = 1.0;
                }
            }
        }
    }
    grid
}
