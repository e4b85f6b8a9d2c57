//! Scripted and randomized scenes shared by the experiments, the training
//! fixture, the CLI and the tests. All scenes live in the default 10 x 10 m
//! room with the sensor resting at its center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storm_core::bev::GridSpec;
use storm_core::simworld::{self, presets, Aabb, FrameRecord, LidarConfig, SceneConfig, Shape};
use storm_gridnet::TrainConfig;

use crate::error::{Error, Result};

/// Warm-up the voxel map needs before free space exists (tau_u + tau_o with
/// the default timers). Frames before it are not scored.
pub const WARMUP_S: f64 = 1.0;

/// BEV grid covering the room: 52 x 52 cells of 0.2 m, cell edges on the
/// walls.
pub fn room_grid() -> GridSpec {
    GridSpec { resolution: 0.2, half_extent: 5.2, center: [0.1, 0.1] }
}

/// Names accepted by [`by_name`].
pub const SCENE_NAMES: [&str; 6] = ["static", "walkers", "flyers", "wall-brush", "circling", "bench"];

/// Builds a named scene. `clutter` is the number of static obstacles where
/// the scene has random clutter.
pub fn by_name(name: &str, clutter: usize, seed: u64) -> Result<SceneConfig> {
    Ok(match name {
        "static" => presets::cluttered_room(clutter, seed),
        "walkers" => walker_scene(clutter, 3, seed),
        "flyers" => flyer_scene(3, seed),
        "wall-brush" => wall_brush(),
        "circling" => circling_walker(3.0, 0.0),
        "bench" => bench_scene(seed),
        _ => {
            return Err(Error::Config(format!("unknown scene '{name}' (expected one of {})", SCENE_NAMES.join(", "))));
        }
    })
}

/// A walker crosses the room toward a wall, stops against it for 0.6 s and
/// walks off along it. Pressed against the wall and then standing, its
/// returns share voxels with the wall and are demoted by the static
/// neighborhood, so the cluster branch loses it for a few frames while it
/// is in plain view. The scene ends when the walker reaches its last
/// waypoint.
pub fn wall_brush() -> SceneConfig {
    let mut c = SceneConfig::empty_room();
    let wall_y = 1.5;
    c.static_obstacles.push(Shape::Box(Aabb { min: [-4.0, wall_y, 0.0], max: [4.0, wall_y + 0.1, 2.0] }));
    let y = wall_y - 0.02 - presets::WALKER_SHAPE.footprint_radius();
    let z = presets::WALKER_CENTER_Z;
    let mut w = presets::walker("walker", vec![[-3.0, y - 1.5, z], [-0.5, y, z], [-0.48, y, z], [2.5, y - 1.5, z]], 1.0);
    w.trajectory.speeds[1] = 0.02 / 0.6;
    c.dynamic_obstacles.push(w);
    c
}

/// One walker circling the sensor at 1 m/s; the training fixture's building
/// block.
pub fn circling_walker(radius: f64, phase: f64) -> SceneConfig {
    let mut c = SceneConfig::empty_room();
    let mut w = presets::walker("walker", presets::circle_waypoints([0.0, 0.0], radius, presets::WALKER_CENTER_Z, phase, 24), 1.0);
    w.trajectory.looped = true;
    c.dynamic_obstacles.push(w);
    c
}

/// Training fixture: walkers circling an empty room. Two 8 s training
/// recordings at radii 2.5 and 3.5 m, one 6 s validation recording at 3 m.
pub fn fixture_recordings() -> (Vec<Vec<FrameRecord>>, Vec<Vec<FrameRecord>>) {
    let rec = |radius: f64, phase: f64, seconds: f64, seed: u64| {
        let mut c = circling_walker(radius, phase);
        c.duration_s = Some(seconds);
        let scene = simworld::build_scene(c).expect("fixture scene is valid");
        simworld::simulate(&scene, seconds, seed)
    };
    (vec![rec(2.5, 0.0, 8.0, 1), rec(3.5, 1.0, 8.0, 2)], vec![rec(3.0, 2.0, 6.0, 3)])
}

/// Optimizer settings the fixture is trained with.
pub fn fixture_train_config() -> TrainConfig {
    TrainConfig { epochs: 20, learning_rate: 0.05, lr_decay: 0.9, ..Default::default() }
}

/// Random walkers in a room with `clutter` static obstacles. Walkers appear
/// after the warm-up so they enter long-free space.
pub fn walker_scene(clutter: usize, walkers: usize, seed: u64) -> SceneConfig {
    let mut c = presets::cluttered_room(clutter, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5741_4c4b);
    for k in 0..walkers {
        let mut w = presets::random_walker(&mut rng, &c, &format!("walker{k}"), 6);
        w.active_from = Some(WARMUP_S + rng.gen_range(0.0..1.0));
        c.dynamic_obstacles.push(w);
    }
    c
}

/// Random flyers (0.3-5 m/s legs, 0.8-2.2 m altitude) in the empty room.
pub fn flyer_scene(flyers: usize, seed: u64) -> SceneConfig {
    let mut c = SceneConfig::empty_room();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x464c_5952);
    for k in 0..flyers {
        let mut f = presets::random_flyer(&mut rng, &c, &format!("flyer{k}"), 12);
        f.active_from = Some(WARMUP_S + rng.gen_range(0.0..1.0));
        c.dynamic_obstacles.push(f);
    }
    c
}

/// Sensor that returns about 20,000 points per frame in the closed room.
pub fn dense_lidar() -> LidarConfig {
    LidarConfig { azimuth_count: 1250, ..LidarConfig::default() }
}

/// Timing workload: dense scans of a cluttered room with three walkers.
pub fn bench_scene(seed: u64) -> SceneConfig {
    let mut c = walker_scene(10, 3, seed);
    c.lidar = dense_lidar();
    c
}

/// Builds and simulates a scene for `seconds` with a pinned seed.
pub fn record(config: SceneConfig, seconds: f64, seed: u64) -> Result<Vec<FrameRecord>> {
    let scene = simworld::build_scene(config)?;
    Ok(simworld::simulate(&scene, seconds, seed))
}
