//! Obstacle presets and randomized scene builders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Aabb, Cylinder, DynamicObstacleConfig, DynamicShape, SceneConfig, Shape, Trajectory};
use crate::types::Vec3;

/// Pedestrian analog: 0.2 m radius (torso footprint), 1.7 m tall, 0.5-1.5 m/s.
pub const WALKER_SHAPE: DynamicShape = DynamicShape::Cylinder { radius: 0.2, height: 1.7 };
pub const WALKER_CENTER_Z: f64 = 0.85;
pub const WALKER_SPEED: (f64, f64) = (0.5, 1.5);

/// Small quadcopter analog: 0.25 m radius, 0.3 m tall, up to 5 m/s.
pub const FLYER_SHAPE: DynamicShape = DynamicShape::Cylinder { radius: 0.25, height: 0.3 };
pub const FLYER_SPEED: (f64, f64) = (0.0, 5.0);
pub const FLYER_ALTITUDE: (f64, f64) = (0.8, 2.2);

/// Keep-out radius around the sensor for generated geometry.
const EGO_CLEARANCE: f64 = 1.0;

pub fn walker(id: &str, waypoints: Vec<[f64; 3]>, speed: f64) -> DynamicObstacleConfig {
    let n = waypoints.len().saturating_sub(1);
    DynamicObstacleConfig {
        id: id.into(),
        shape: WALKER_SHAPE,
        trajectory: Trajectory::new(waypoints, vec![speed; n]),
        active_from: None,
        active_until: None,
    }
}

pub fn flyer(id: &str, waypoints: Vec<[f64; 3]>, speeds: Vec<f64>) -> DynamicObstacleConfig {
    DynamicObstacleConfig {
        id: id.into(),
        shape: FLYER_SHAPE,
        trajectory: Trajectory::new(waypoints, speeds),
        active_from: None,
        active_until: None,
    }
}

/// Closed polygonal approximation of a circle, traversed at constant speed.
pub fn circle_waypoints(center: [f64; 2], radius: f64, z: f64, phase: f64, segments: usize) -> Vec<[f64; 3]> {
    (0..=segments)
        .map(|k| {
            let a = phase + std::f64::consts::TAU * k as f64 / segments as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin(), z]
        })
        .collect()
}

/// Empty room with `n` randomly placed tables, foam panels and pillars.
pub fn cluttered_room(n: usize, seed: u64) -> SceneConfig {
    let mut c = SceneConfig::empty_room();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = c.room_bounds;
    let ego = c.ego.trajectory.position(0.0);
    while c.static_obstacles.len() < n {
        // footprint half sizes and height of a table, a foam panel or a pillar
        let kind = rng.gen_range(0..3);
        let (hx, hy, h) = match kind {
            0 => (rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.9), 0.75),
            1 if rng.gen_bool(0.5) => (0.05, rng.gen_range(0.3..0.6), 1.5),
            1 => (rng.gen_range(0.3..0.6), 0.05, 1.5),
            _ => {
                let r = rng.gen_range(0.15..0.3);
                (r, r, 2.0)
            }
        };
        let x = rng.gen_range(room.min[0] + hx + 0.05..room.max[0] - hx - 0.05);
        let y = rng.gen_range(room.min[1] + hy + 0.05..room.max[1] - hy - 0.05);
        if (x - ego.x).hypot(y - ego.y) < EGO_CLEARANCE + hx.max(hy) {
            continue;
        }
        let shape = if kind == 2 {
            Shape::Cylinder(Cylinder { center: [x, y], radius: hx, z_min: 0.0, z_max: h })
        } else {
            Shape::Box(Aabb { min: [x - hx, y - hy, 0.0], max: [x + hx, y + hy, h] })
        };
        c.static_obstacles.push(shape);
    }
    c
}

/// Does a disc of `radius` swept along segment a-b stay clear of the static
/// obstacles and the sensor?
pub fn segment_is_clear(c: &SceneConfig, a: Vec3, b: Vec3, radius: f64) -> bool {
    let ego = c.ego.trajectory.position(0.0);
    let steps = ((b - a).norm() / 0.05).ceil().max(1.0) as usize;
    (0..=steps).all(|k| {
        let p = a + (b - a) * (k as f64 / steps as f64);
        if (p.xy() - ego.xy()).norm() < EGO_CLEARANCE {
            return false;
        }
        c.static_obstacles.iter().all(|s| {
            let bb = s.bounds();
            let dx = (bb.min[0] - p.x).max(p.x - bb.max[0]).max(0.0);
            let dy = (bb.min[1] - p.y).max(p.y - bb.max[1]).max(0.0);
            dx.hypot(dy) > radius + 0.05
        })
    })
}

/// Random collision-free waypoint path with `legs` segments. Falls back to a
/// shorter path if the room is too cluttered to place every leg.
pub fn random_path<R: Rng>(
    rng: &mut R,
    c: &SceneConfig,
    radius: f64,
    z: (f64, f64),
    legs: usize,
) -> Vec<[f64; 3]> {
    let room = c.room_bounds;
    let margin = radius + 0.2;
    let sample = |rng: &mut R| {
        Vec3::new(
            rng.gen_range(room.min[0] + margin..room.max[0] - margin),
            rng.gen_range(room.min[1] + margin..room.max[1] - margin),
            if z.0 < z.1 { rng.gen_range(z.0..z.1) } else { z.0 },
        )
    };
    let start = loop {
        let p = sample(rng);
        if segment_is_clear(c, p, p, radius) {
            break p;
        }
    };
    let mut pts = vec![start];
    'legs: for _ in 0..legs {
        for _ in 0..200 {
            let p = sample(rng);
            if segment_is_clear(c, *pts.last().unwrap(), p, radius) {
                pts.push(p);
                continue 'legs;
            }
        }
        break;
    }
    if pts.len() == 1 {
        pts.push(start);
    }
    pts.into_iter().map(|p| [p.x, p.y, p.z]).collect()
}

pub fn random_walker<R: Rng>(rng: &mut R, c: &SceneConfig, id: &str, legs: usize) -> DynamicObstacleConfig {
    let r = WALKER_SHAPE.footprint_radius();
    let wps = random_path(rng, c, r, (WALKER_CENTER_Z, WALKER_CENTER_Z), legs);
    let speeds = (1..wps.len()).map(|_| rng.gen_range(WALKER_SPEED.0..WALKER_SPEED.1)).collect();
    DynamicObstacleConfig { id: id.into(), shape: WALKER_SHAPE, trajectory: Trajectory::new(wps, speeds), active_from: None, active_until: None }
}

pub fn random_flyer<R: Rng>(rng: &mut R, c: &SceneConfig, id: &str, legs: usize) -> DynamicObstacleConfig {
    let r = FLYER_SHAPE.footprint_radius();
    let wps = random_path(rng, c, r, FLYER_ALTITUDE, legs);
    // a zero-speed leg would never finish; keep a small floor on moving legs
    let speeds = (1..wps.len()).map(|_| rng.gen_range(FLYER_SPEED.0.max(0.3)..FLYER_SPEED.1)).collect();
    DynamicObstacleConfig { id: id.into(), shape: FLYER_SHAPE, trajectory: Trajectory::new(wps, speeds), active_from: None, active_until: None }
}
