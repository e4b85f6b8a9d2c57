//! Piecewise-linear waypoint trajectories with per-segment speeds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 3]>,
    /// Speed along segment `i` (from waypoint `i` to `i + 1`), m/s.
    #[serde(default)]
    pub speeds: Vec<f64>,
    /// Hold time at the first waypoint before moving, seconds.
    #[serde(default)]
    pub start_delay: f64,
    /// Restart from the first waypoint after the last one.
    #[serde(default)]
    pub looped: bool,
}

impl Trajectory {
    pub fn stationary(p: [f64; 3]) -> Self {
        Trajectory { waypoints: vec![p], speeds: vec![], start_delay: 0.0, looped: false }
    }

    pub fn new(waypoints: Vec<[f64; 3]>, speeds: Vec<f64>) -> Self {
        Trajectory { waypoints, speeds, start_delay: 0.0, looped: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::InvalidScene("trajectory without waypoints".into()));
        }
        if self.speeds.len() + 1 != self.waypoints.len() {
            return Err(Error::InvalidScene(format!(
                "trajectory has {} waypoints but {} segment speeds",
                self.waypoints.len(),
                self.speeds.len()
            )));
        }
        if !(self.start_delay >= 0.0) {
            return Err(Error::InvalidScene("negative start delay".into()));
        }
        for (i, &s) in self.speeds.iter().enumerate() {
            let len = self.segment_length(i);
            if !(s >= 0.0) || (s == 0.0 && len > 0.0) {
                return Err(Error::InvalidScene(format!("segment {i} has invalid speed {s} for length {len}")));
            }
        }
        Ok(())
    }

    fn segment_length(&self, i: usize) -> f64 {
        let (a, b) = (self.waypoints[i], self.waypoints[i + 1]);
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
    }

    fn segment_duration(&self, i: usize) -> f64 {
        let len = self.segment_length(i);
        if len == 0.0 {
            0.0
        } else {
            len / self.speeds[i]
        }
    }

    /// Time to traverse all segments once (excluding the start delay).
    pub fn path_duration(&self) -> f64 {
        (0..self.speeds.len()).map(|i| self.segment_duration(i)).sum()
    }

    pub fn duration(&self) -> f64 {
        self.start_delay + self.path_duration()
    }

    pub fn position(&self, t: f64) -> Vec3 {
        self.sample(t).0
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        self.sample(t).1
    }

    fn sample(&self, t: f64) -> (Vec3, Vec3) {
        let first = Vec3::from(self.waypoints[0]);
        let mut tau = t - self.start_delay;
        let total = self.path_duration();
        if tau <= 0.0 || total == 0.0 {
            return (first, Vec3::zeros());
        }
        if self.looped {
            tau %= total;
        } else if tau >= total {
            return (Vec3::from(*self.waypoints.last().unwrap()), Vec3::zeros());
        }
        for i in 0..self.speeds.len() {
            let d = self.segment_duration(i);
            if tau < d {
                let a = Vec3::from(self.waypoints[i]);
                let b = Vec3::from(self.waypoints[i + 1]);
                let dir = (b - a) / self.segment_length(i);
                return (a + dir * (self.speeds[i] * tau), dir * self.speeds[i]);
            }
            tau -= d;
        }
        (Vec3::from(*self.waypoints.last().unwrap()), Vec3::zeros())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_meters_at_one_mps_takes_five_seconds() {
        let t = Trajectory::new(vec![[0.0, 0.0, 1.0], [5.0, 0.0, 1.0]], vec![1.0]);
        t.validate().unwrap();
        assert_eq!(t.duration(), 5.0);
        assert!((t.position(2.5) - Vec3::new(2.5, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(t.velocity(2.5), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(t.position(9.0), Vec3::new(5.0, 0.0, 1.0));
    }

    #[test]
    fn looped_and_delayed() {
        let mut t = Trajectory::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]], vec![1.0, 1.0]);
        t.looped = true;
        t.start_delay = 1.0;
        assert_eq!(t.position(0.5), Vec3::zeros());
        assert!((t.position(1.0 + 2.5) - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert!((t.position(1.0 + 1.5) - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_speeds() {
        assert!(Trajectory::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![0.0]).validate().is_err());
        assert!(Trajectory::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![-1.0]).validate().is_err());
        assert!(Trajectory::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![]).validate().is_err());
        assert!(Trajectory::new(vec![[0.0; 3], [0.0; 3]], vec![0.0]).validate().is_ok());
    }
}
