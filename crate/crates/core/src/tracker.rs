//! Extended Kalman filter over a Dubins-plane motion model.
//!
//! State is position, heading `theta`, climb angle `phi` and scalar speed
//! `v`. Turn rate, climb rate and acceleration are not part of the state;
//! the nominal model holds them at zero and the process noise on the angle
//! and speed components absorbs them.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{SMatrix, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Timestamp, Vec3};

pub type Vec6 = SVector<f64, 6>;
pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat3 = SMatrix<f64, 3, 3>;

/// Wraps to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
    pub phi: f64,
    pub v: f64,
}

impl TrackState {
    pub fn at(p: Vec3) -> Self {
        TrackState { x: p.x, y: p.y, z: p.z, ..Default::default() }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(self.x, self.y, self.z, self.theta, self.phi, self.v)
    }

    pub fn from_vector(s: &Vec6) -> Self {
        TrackState { x: s[0], y: s[1], z: s[2], theta: s[3], phi: s[4], v: s[5] }
    }

    fn wrapped(mut self) -> Self {
        self.theta = wrap_angle(self.theta);
        self.phi = wrap_angle(self.phi);
        self
    }

    pub fn velocity(&self) -> Vec3 {
        let (cp, sp) = (self.phi.cos(), self.phi.sin());
        self.v * Vec3::new(cp * self.theta.cos(), cp * self.theta.sin(), sp)
    }
}

/// Turn rate, climb rate and acceleration held constant over a step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DubinsInput {
    pub turn_rate: f64,
    pub climb_rate: f64,
    pub accel: f64,
}

pub fn dubins_derivative(s: &TrackState) -> Vec6 {
    dubins_derivative_with(s, &DubinsInput::default())
}

pub fn dubins_derivative_with(s: &TrackState, u: &DubinsInput) -> Vec6 {
    let vel = s.velocity();
    Vec6::new(vel.x, vel.y, vel.z, u.turn_rate, u.climb_rate, u.accel)
}

/// Partial derivatives of the derivative field with respect to the state.
fn derivative_jacobian(s: &TrackState) -> Mat6 {
    let (ct, st) = (s.theta.cos(), s.theta.sin());
    let (cp, sp) = (s.phi.cos(), s.phi.sin());
    let v = s.v;
    let mut d = Mat6::zeros();
    d[(0, 3)] = -v * cp * st;
    d[(1, 3)] = v * cp * ct;
    d[(0, 4)] = -v * sp * ct;
    d[(1, 4)] = -v * sp * st;
    d[(2, 4)] = v * cp;
    d[(0, 5)] = cp * ct;
    d[(1, 5)] = cp * st;
    d[(2, 5)] = sp;
    d
}

fn rk4(s: &TrackState, u: &DubinsInput, dt: f64) -> (Vec6, Mat6) {
    let x0 = s.to_vector();
    let at = |x: &Vec6| TrackState::from_vector(x);
    let k1 = dubins_derivative_with(s, u);
    let x2 = x0 + k1 * (dt / 2.0);
    let k2 = dubins_derivative_with(&at(&x2), u);
    let x3 = x0 + k2 * (dt / 2.0);
    let k3 = dubins_derivative_with(&at(&x3), u);
    let x4 = x0 + k3 * dt;
    let k4 = dubins_derivative_with(&at(&x4), u);
    let next = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

    // chain rule through the four stages
    let i = Mat6::identity();
    let j1 = derivative_jacobian(s);
    let j2 = derivative_jacobian(&at(&x2)) * (i + j1 * (dt / 2.0));
    let j3 = derivative_jacobian(&at(&x3)) * (i + j2 * (dt / 2.0));
    let j4 = derivative_jacobian(&at(&x4)) * (i + j3 * dt);
    let jac = i + (j1 + j2 * 2.0 + j3 * 2.0 + j4) * (dt / 6.0);
    (next, jac)
}

/// One RK4 step of the nominal model, angles wrapped.
pub fn state_transition(s: &TrackState, dt: f64) -> TrackState {
    state_transition_with(s, &DubinsInput::default(), dt)
}

pub fn state_transition_with(s: &TrackState, u: &DubinsInput, dt: f64) -> TrackState {
    TrackState::from_vector(&rk4(s, u, dt).0).wrapped()
}

/// Analytic derivative of [`state_transition`] with respect to the state.
pub fn transition_jacobian(s: &TrackState, dt: f64) -> Mat6 {
    rk4(s, &DubinsInput::default(), dt).1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Diagonal of the process noise per second; Q = diag(q) * dt.
    pub process_noise: [f64; 6],
    /// Per-axis position measurement standard deviation, meters.
    pub measurement_sigma: f64,
    /// Standard deviations of a freshly spawned track.
    pub initial_sigma: [f64; 6],
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            process_noise: [1e-4, 1e-4, 1e-4, 0.5, 0.2, 1.0],
            measurement_sigma: 0.05,
            initial_sigma: [0.05, 0.05, 0.05, PI, PI / 4.0, 2.0],
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.process_noise.iter().all(|&q| q >= 0.0)
            && self.measurement_sigma > 0.0
            && self.initial_sigma.iter().all(|&s| s > 0.0);
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid noise parameters {self:?}")));
        }
        Ok(())
    }

    pub fn q(&self, dt: f64) -> Mat6 {
        Mat6::from_diagonal(&Vec6::from(self.process_noise)) * dt
    }

    pub fn r(&self) -> Mat3 {
        Mat3::identity() * self.measurement_sigma.powi(2)
    }

    pub fn initial_covariance(&self) -> Mat6 {
        Mat6::from_diagonal(&Vec6::from(self.initial_sigma.map(|s| s * s)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEstimate {
    pub id: u64,
    pub state: TrackState,
    pub covariance: Mat6,
    /// Matched to a detection in the current frame.
    pub assigned: bool,
    /// Time the state refers to.
    pub stamp: Timestamp,
    pub last_update: Timestamp,
    pub missed_frames: u32,
    /// Number of measurements absorbed so far.
    pub hits: u32,
    last_measurement: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictStatus {
    Ok,
    /// Propagated covariance was not positive semi-definite and was replaced
    /// by the initial covariance.
    CovarianceReset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStatus {
    Applied,
    /// Innovation covariance could not be inverted; state untouched.
    SkippedSingular,
}

fn symmetrize(p: &Mat6) -> Mat6 {
    (p + p.transpose()) * 0.5
}

fn is_psd(p: &Mat6) -> bool {
    if !p.iter().all(|v| v.is_finite()) {
        return false;
    }
    let scale = p.diagonal().abs().max().max(1.0);
    SymmetricEigen::new(*p).eigenvalues.min() >= -1e-9 * scale
}

impl TrackEstimate {
    pub fn new(id: u64, position: Vec3, stamp: Timestamp, noise: &NoiseParams) -> Self {
        TrackEstimate {
            id,
            state: TrackState::at(position),
            covariance: noise.initial_covariance(),
            assigned: false,
            stamp,
            last_update: stamp,
            missed_frames: 0,
            hits: 1,
            last_measurement: position,
        }
    }

    pub fn position(&self) -> Vec3 {
        self.state.position()
    }

    pub fn predict(&mut self, dt: f64, noise: &NoiseParams) -> PredictStatus {
        let f = transition_jacobian(&self.state, dt);
        self.state = state_transition(&self.state, dt);
        self.stamp = Timestamp(self.stamp.secs() + dt);
        let p = symmetrize(&(f * self.covariance * f.transpose() + noise.q(dt)));
        if is_psd(&p) {
            self.covariance = p;
            PredictStatus::Ok
        } else {
            self.covariance = noise.initial_covariance();
            PredictStatus::CovarianceReset
        }
    }

    /// Predicts forward to `stamp`; a no-op when already there.
    pub fn predict_to(&mut self, stamp: Timestamp, noise: &NoiseParams) -> PredictStatus {
        let dt = stamp.since(self.stamp);
        if dt > 0.0 {
            let s = self.predict(dt, noise);
            self.stamp = stamp;
            s
        } else {
            PredictStatus::Ok
        }
    }

    /// Standard EKF position update with a Joseph-form covariance update.
    pub fn update(&mut self, z: &Vec3, noise: &NoiseParams) -> UpdateStatus {
        let p = self.covariance;
        let r = noise.r();
        let s: Mat3 = p.fixed_view::<3, 3>(0, 0).into_owned() + r;
        let Some(s_inv) = s.cholesky().map(|c| c.inverse()) else {
            return UpdateStatus::SkippedSingular;
        };
        if !s_inv.iter().all(|v| v.is_finite()) {
            return UpdateStatus::SkippedSingular;
        }
        let ph_t: SMatrix<f64, 6, 3> = p.fixed_view::<6, 3>(0, 0).into_owned();
        let k = ph_t * s_inv;
        let y = z - self.position();
        let x = self.state.to_vector() + k * y;
        let mut kh = Mat6::zeros();
        kh.fixed_view_mut::<6, 3>(0, 0).copy_from(&k);
        let a = Mat6::identity() - kh;
        let p_new = symmetrize(&(a * p * a.transpose() + k * r * k.transpose()));
        self.state = TrackState::from_vector(&x).wrapped();
        self.covariance = p_new;
        self.flip_negative_speed();
        self.hits += 1;
        self.last_measurement = *z;
        UpdateStatus::Applied
    }

    /// Update that, on a track's second measurement, seeds heading, climb
    /// and speed from the displacement between the two measurements. With a
    /// zero-speed prior the position measurement carries no information about
    /// heading, so the filter alone would never find it.
    pub fn update_with_motion_init(&mut self, z: &Vec3, stamp: Timestamp, noise: &NoiseParams) -> UpdateStatus {
        let prev = self.last_measurement;
        let dt = stamp.since(self.last_update);
        let second = self.hits == 1;
        let status = self.update(z, noise);
        if status == UpdateStatus::Applied && second && dt > 0.0 {
            let d = z - prev;
            let planar = d.xy().norm();
            let speed = d.norm() / dt;
            self.state.theta = wrap_angle(d.y.atan2(d.x));
            self.state.phi = wrap_angle(d.z.atan2(planar));
            self.state.v = speed;
            // two-point difference: var = 2 sigma^2 / baseline^2
            let var_v = 2.0 * noise.measurement_sigma.powi(2) / (dt * dt);
            let base = d.norm().max(1e-6);
            let var_ang = (2.0 * noise.measurement_sigma.powi(2) / (base * base)).min(noise.initial_sigma[3].powi(2));
            for i in 3..6 {
                for j in 0..6 {
                    self.covariance[(i, j)] = 0.0;
                    self.covariance[(j, i)] = 0.0;
                }
            }
            self.covariance[(3, 3)] = var_ang;
            self.covariance[(4, 4)] = var_ang.min(noise.initial_sigma[4].powi(2));
            self.covariance[(5, 5)] = var_v;
        }
        if status == UpdateStatus::Applied {
            self.last_update = stamp;
        }
        status
    }

    /// Keeps `v >= 0` by switching to the equivalent pose with heading
    /// rotated by pi and climb mirrored.
    fn flip_negative_speed(&mut self) {
        if self.state.v < 0.0 {
            self.state.v = -self.state.v;
            self.state.theta = wrap_angle(self.state.theta + PI);
            self.state.phi = -self.state.phi;
            let j = Mat6::from_diagonal(&Vec6::new(1.0, 1.0, 1.0, 1.0, -1.0, -1.0));
            self.covariance = j * self.covariance * j.transpose();
        }
    }
}

/// Owns the track set and hands out ids.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub tracks: Vec<TrackEstimate>,
    pub noise: NoiseParams,
    pub max_missed_frames: u32,
    next_id: u64,
}

impl Tracker {
    pub fn new(noise: NoiseParams, max_missed_frames: u32) -> Self {
        Tracker { tracks: Vec::new(), noise, max_missed_frames, next_id: 0 }
    }

    /// Starts a track at `position` with zero heading, climb and speed.
    pub fn spawn(&mut self, position: Vec3, stamp: Timestamp) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.tracks.push(TrackEstimate::new(id, position, stamp, &self.noise));
        id
    }

    /// Removes tracks that missed more than `max_missed_frames` frames and
    /// returns their ids.
    pub fn retire(&mut self) -> Vec<u64> {
        let max = self.max_missed_frames;
        let gone = self.tracks.iter().filter(|t| t.missed_frames > max).map(|t| t.id).collect();
        self.tracks.retain(|t| t.missed_frames <= max);
        gone
    }

    /// One text line per frame: id, state and covariance diagonal of each
    /// track.
    pub fn write_log_line<W: Write>(&self, stamp: Timestamp, mut w: W) -> std::io::Result<()> {
        let tracks: Vec<serde_json::Value> = self
            .tracks
            .iter()
            .map(|t| {
                let s = &t.state;
                serde_json::json!({
                    "id": t.id,
                    "state": [s.x, s.y, s.z, s.theta, s.phi, s.v],
                    "cov": t.covariance.diagonal().as_slice(),
                    "missed": t.missed_frames,
                })
            })
            .collect();
        writeln!(w, "{}", serde_json::json!({ "t": stamp.secs(), "tracks": tracks }))
    }
}
