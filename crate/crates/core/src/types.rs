//! Shared geometric and temporal domain types.
//!
//! Everything downstream of the sensor lives in a single fixed world frame.
//! Scans carry points in the sensor (body) frame together with the ego pose
//! that maps them into the world.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Allowed deviation of a stored quaternion from unit norm.
pub const QUAT_NORM_TOL: f64 = 1e-9;

/// Seconds since the dataset epoch.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub f64);

impl Timestamp {
    pub fn secs(self) -> f64 {
        self.0
    }

    /// Signed difference `self - earlier` in seconds.
    pub fn since(self, earlier: Timestamp) -> f64 {
        self.0 - earlier.0
    }
}

/// Body-to-world rotation stored scalar-last as `[x, y, z, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([0.0, 0.0, 0.0, 1.0]);

    /// Rotation of `yaw` radians about world +z.
    pub fn from_yaw(yaw: f64) -> Quat {
        Quat::from_unit(&UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw))
    }

    pub fn from_unit(q: &UnitQuaternion<f64>) -> Quat {
        let c = q.quaternion().coords;
        Quat([c.x, c.y, c.z, c.w])
    }

    /// Normalizes arbitrary non-zero components, as done when loading
    /// hand-written configuration.
    pub fn normalized(xyzw: [f64; 4]) -> Result<Quat> {
        let n = xyzw.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::NonUnitQuaternion { norm: n });
        }
        Ok(Quat(xyzw.map(|c| c / n)))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Checked conversion; rejects quaternions further than
    /// [`QUAT_NORM_TOL`] from unit norm.
    pub fn rotation(&self) -> Result<UnitQuaternion<f64>> {
        let norm = self.norm();
        if !((norm - 1.0).abs() <= QUAT_NORM_TOL) {
            return Err(Error::NonUnitQuaternion { norm });
        }
        let [x, y, z, w] = self.0;
        Ok(UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)))
    }
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    /// Sensor origin in the world frame, meters.
    pub position: Vec3,
    pub orientation: Quat,
    /// Velocity expressed in the body frame, m/s.
    pub body_velocity: Vec3,
}

impl Default for EgoState {
    fn default() -> Self {
        EgoState { position: Vec3::zeros(), orientation: Quat::IDENTITY, body_velocity: Vec3::zeros() }
    }
}

impl EgoState {
    pub fn stationary(position: Vec3) -> Self {
        EgoState { position, ..Default::default() }
    }
}

/// One LiDAR sweep, points in the sensor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloudScan {
    pub stamp: Timestamp,
    pub points: Vec<Vec3>,
    pub ego: EgoState,
}

impl PointCloudScan {
    pub fn new(stamp: Timestamp, points: Vec<Vec3>, ego: EgoState) -> Self {
        PointCloudScan { stamp, points, ego }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObstacle {
    pub id: String,
    /// Point-mass position in the world frame.
    pub position: Vec3,
    /// Footprint radius used for target rasterization, meters.
    pub radius: f64,
    pub is_dynamic: bool,
}

/// Maps every scan point into the world frame.
pub fn to_world(scan: &PointCloudScan) -> Result<Vec<Vec3>> {
    let rot = scan.ego.orientation.rotation()?;
    let t = scan.ego.position;
    Ok(scan.points.iter().map(|p| rot * p + t).collect())
}

/// Inverse of [`to_world`] for a single pose.
pub fn to_sensor(ego: &EgoState, world: &[Vec3]) -> Result<Vec<Vec3>> {
    let inv = ego.orientation.rotation()?.inverse();
    Ok(world.iter().map(|p| inv * (p - ego.position)).collect())
}

pub fn body_to_world_velocity(ego: &EgoState) -> Result<Vec3> {
    Ok(ego.orientation.rotation()? * ego.body_velocity)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use proptest::prelude::*;

    use super::*;

    fn scan_with(ego: EgoState, pts: Vec<Vec3>) -> PointCloudScan {
        PointCloudScan::new(Timestamp(0.0), pts, ego)
    }

    #[test]
    fn identity_pose() {
        let s = scan_with(EgoState::default(), vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(to_world(&s).unwrap(), vec![Vec3::new(1.0, 0.0, 0.0)]);
    }

    #[test]
    fn translated_pose() {
        let s = scan_with(EgoState::stationary(Vec3::new(2.0, 0.0, 0.0)), vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(to_world(&s).unwrap(), vec![Vec3::new(3.0, 0.0, 0.0)]);
    }

    #[test]
    fn yaw_90_rotates_x_to_y() {
        let ego = EgoState { orientation: Quat::from_yaw(PI / 2.0), ..Default::default() };
        let w = to_world(&scan_with(ego, vec![Vec3::new(1.0, 0.0, 0.0)])).unwrap();
        assert!((w[0] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn body_velocity_rotation() {
        let ego = EgoState { body_velocity: Vec3::new(1.0, 2.0, 3.0), ..Default::default() };
        assert_eq!(body_to_world_velocity(&ego).unwrap(), Vec3::new(1.0, 2.0, 3.0));

        let ego = EgoState {
            orientation: Quat::from_yaw(PI),
            body_velocity: Vec3::new(1.0, 0.0, 0.0),
            ..Default::default()
        };
        let v = body_to_world_velocity(&ego).unwrap();
        assert!((v - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);

        let ego = EgoState { orientation: Quat::from_yaw(0.3), ..Default::default() };
        assert_eq!(body_to_world_velocity(&ego).unwrap(), Vec3::zeros());
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        let ego = EgoState { orientation: Quat([0.0, 0.0, 0.0, 1.1]), ..Default::default() };
        let s = scan_with(ego, vec![Vec3::zeros()]);
        assert!(matches!(to_world(&s), Err(Error::NonUnitQuaternion { .. })));
        assert!(body_to_world_velocity(&ego).is_err());
    }

    #[test]
    fn normalizes_config_quaternions() {
        let q = Quat::normalized([0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(q, Quat::IDENTITY);
        assert!(Quat::normalized([0.0; 4]).is_err());
    }

    fn arb_vec3() -> impl Strategy<Value = Vec3> {
        (-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn arb_ego() -> impl Strategy<Value = EgoState> {
        (arb_vec3(), -PI..PI, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(p, yaw, pitch, roll)| {
            let q = UnitQuaternion::from_euler_angles(roll, pitch, yaw);
            EgoState { position: p, orientation: Quat::from_unit(&q), body_velocity: Vec3::zeros() }
        })
    }

    proptest! {
        #[test]
        fn round_trip_recovers_sensor_points(ego in arb_ego(), pts in prop::collection::vec(arb_vec3(), 0..20)) {
            let world = to_world(&scan_with(ego, pts.clone())).unwrap();
            prop_assert_eq!(world.len(), pts.len());
            let back = to_sensor(&ego, &world).unwrap();
            for (a, b) in pts.iter().zip(&back) {
                prop_assert!((a - b).norm() < 1e-9);
            }
        }

        #[test]
        fn transform_is_rigid(ego in arb_ego(), a in arb_vec3(), b in arb_vec3()) {
            let w = to_world(&scan_with(ego, vec![a, b])).unwrap();
            prop_assert!(((w[0] - w[1]).norm() - (a - b).norm()).abs() < 1e-9);
        }
    }
}
