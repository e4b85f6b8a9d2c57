//! Detection fusion: 3D cluster detections first, then recovery of the
//! remaining tracks from 2D dynamic-grid detections.

use serde::{Deserialize, Serialize};

use crate::bev::Detection2D;
use crate::cluster::Detection3D;
use crate::error::{Error, Result};
use crate::tracker::{NoiseParams, PredictStatus, TrackEstimate, Tracker, UpdateStatus};
use crate::types::{Timestamp, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Gate for 3D detections, meters.
    pub d_min_3d: f64,
    /// Gate for 2D detections on planar distance, meters.
    pub d_min_2d: f64,
    pub max_missed_frames: u32,
    /// Also report tracks that have coasted for at most this many frames.
    #[serde(default)]
    pub report_coast_frames: u32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { d_min_3d: 0.75, d_min_2d: 0.75, max_missed_frames: 5, report_coast_frames: 0 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min_3d > 0.0 && self.d_min_2d > 0.0) {
            return Err(Error::InvalidConfig(format!("fusion gates must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// In source order, each source takes the nearest still-unassigned target
/// strictly inside `gate`; ties go to the lower target index.
pub fn greedy_match_by(
    n_sources: usize,
    assigned: &mut [bool],
    gate: f64,
    dist: impl Fn(usize, usize) -> f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for s in 0..n_sources {
        let mut best: Option<(usize, f64)> = None;
        for (t, taken) in assigned.iter().enumerate() {
            if *taken {
                continue;
            }
            let d = dist(s, t);
            if d < gate && best.map_or(true, |(_, b)| d < b) {
                best = Some((t, d));
            }
        }
        if let Some((t, _)) = best {
            assigned[t] = true;
            pairs.push((s, t));
        }
    }
    pairs
}

pub fn greedy_match(sources: &[Vec3], targets: &[Vec3], assigned: &[bool], gate: f64) -> Vec<(usize, usize)> {
    let mut taken = assigned.to_vec();
    greedy_match_by(sources.len(), &mut taken, gate, |s, t| (sources[s] - targets[t]).norm())
}

/// Measurement for a 2D recovery: the grid's (x, y) with the track's
/// previous height.
pub fn compose_2d_measurement(det: &Detection2D, previous: &Vec3) -> Vec3 {
    Vec3::new(det.position[0], det.position[1], previous.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    Cluster,
    Grid,
    Spawn,
    Coast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedDetection {
    pub track_id: u64,
    pub position: Vec3,
    pub source: DetectionSource,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub stamp: Timestamp,
    pub matched_3d: usize,
    pub recovered_2d: usize,
    pub spawned: usize,
    pub retired: usize,
    pub coasting: usize,
    pub covariance_resets: usize,
    pub skipped_updates: usize,
    pub updated_3d: Vec<u64>,
    pub updated_2d: Vec<u64>,
    pub detections: Vec<FusedDetection>,
}

/// Owns the track set across frames.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub tracker: Tracker,
    pub config: FusionConfig,
}

impl Fusion {
    pub fn new(config: FusionConfig, noise: NoiseParams) -> Self {
        Fusion { tracker: Tracker::new(noise, config.max_missed_frames), config }
    }

    pub fn tracks(&self) -> &[TrackEstimate] {
        &self.tracker.tracks
    }

    /// Runs one frame of association, update, spawning and retirement.
    pub fn step(&mut self, stamp: Timestamp, s1: &[Detection3D], s2: &[Detection2D]) -> FusionReport {
        let noise = self.tracker.noise;
        let mut report = FusionReport { stamp, ..Default::default() };
        let tracks = &mut self.tracker.tracks;
        for t in tracks.iter_mut() {
            t.assigned = false;
        }
        let prev: Vec<Vec3> = tracks.iter().map(|t| t.position()).collect();
        let n_existing = tracks.len();
        let mut assigned = vec![false; n_existing];

        let bump = |r: &mut FusionReport, p: PredictStatus, u: UpdateStatus| {
            r.covariance_resets += (p == PredictStatus::CovarianceReset) as usize;
            r.skipped_updates += (u == UpdateStatus::SkippedSingular) as usize;
        };

        let pairs = greedy_match_by(s1.len(), &mut assigned, self.config.d_min_3d, |s, t| (s1[s].centroid - prev[t]).norm());
        let mut matched_src = vec![false; s1.len()];
        for &(s, ti) in &pairs {
            matched_src[s] = true;
            let t = &mut tracks[ti];
            t.assigned = true;
            let p = t.predict_to(stamp, &noise);
            let u = t.update_with_motion_init(&s1[s].centroid, stamp, &noise);
            t.missed_frames = 0;
            bump(&mut report, p, u);
            report.updated_3d.push(t.id);
            report.detections.push(FusedDetection { track_id: t.id, position: t.position(), source: DetectionSource::Cluster });
        }
        report.matched_3d = pairs.len();

        let pairs = greedy_match_by(s2.len(), &mut assigned, self.config.d_min_2d, |s, t| {
            let d = &s2[s].position;
            (d[0] - prev[t].x).hypot(d[1] - prev[t].y)
        });
        for &(s, ti) in &pairs {
            let t = &mut tracks[ti];
            t.assigned = true;
            let z = compose_2d_measurement(&s2[s], &prev[ti]);
            let p = t.predict_to(stamp, &noise);
            let u = t.update_with_motion_init(&z, stamp, &noise);
            t.missed_frames = 0;
            bump(&mut report, p, u);
            report.updated_2d.push(t.id);
            report.detections.push(FusedDetection { track_id: t.id, position: t.position(), source: DetectionSource::Grid });
        }
        report.recovered_2d = pairs.len();

        for t in tracks.iter_mut().filter(|t| !t.assigned) {
            let p = t.predict_to(stamp, &noise);
            bump(&mut report, p, UpdateStatus::Applied);
            t.missed_frames += 1;
            report.coasting += 1;
            if t.missed_frames <= self.config.report_coast_frames {
                report.detections.push(FusedDetection { track_id: t.id, position: t.position(), source: DetectionSource::Coast });
            }
        }

        // only 3D evidence starts tracks
        for (s, d) in s1.iter().enumerate() {
            if !matched_src[s] {
                let id = self.tracker.spawn(d.centroid, stamp);
                let t = self.tracker.tracks.last_mut().unwrap();
                t.assigned = true;
                report.spawned += 1;
                report.detections.push(FusedDetection { track_id: id, position: d.centroid, source: DetectionSource::Spawn });
            }
        }
        report.retired = self.tracker.retire().len();
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det3(x: f64, y: f64, z: f64, t: f64) -> Detection3D {
        let c = Vec3::new(x, y, z);
        Detection3D { centroid: c, bbox_min: c, bbox_max: c, point_count: 10, stamp: Timestamp(t) }
    }

    fn det2(x: f64, y: f64, t: f64) -> Detection2D {
        Detection2D { position: [x, y], cell_count: 4, stamp: Timestamp(t) }
    }

    fn fusion_with_track_at(p: Vec3, gate: f64) -> Fusion {
        let cfg = FusionConfig { d_min_3d: gate, d_min_2d: gate, ..Default::default() };
        let mut f = Fusion::new(cfg, NoiseParams::default());
        f.tracker.spawn(p, Timestamp(0.0));
        f
    }

    #[test]
    fn empty_frame_coasts_everything() {
        let mut f = fusion_with_track_at(Vec3::new(0.0, 0.0, 1.0), 0.5);
        f.tracker.spawn(Vec3::new(2.0, 0.0, 1.0), Timestamp(0.0));
        let r = f.step(Timestamp(0.1), &[], &[]);
        assert_eq!(r.coasting, 2);
        assert!(f.tracks().iter().all(|t| t.missed_frames == 1 && t.stamp == Timestamp(0.1)));
        assert!(r.detections.is_empty());
    }

    #[test]
    fn single_3d_match() {
        let mut f = fusion_with_track_at(Vec3::new(0.0, 0.0, 1.0), 0.5);
        let r = f.step(Timestamp(0.1), &[det3(0.1, 0.0, 1.0, 0.1)], &[]);
        assert_eq!((r.matched_3d, r.spawned), (1, 0));
        assert_eq!(f.tracks().len(), 1);
        assert!(f.tracks()[0].position().x > 0.0);
    }

    #[test]
    fn single_2d_recovery_uses_previous_height() {
        let mut f = fusion_with_track_at(Vec3::new(0.0, 0.0, 1.0), 0.5);
        let d = det2(0.05, 0.05, 0.1);
        assert_eq!(compose_2d_measurement(&d, &f.tracks()[0].position()), Vec3::new(0.05, 0.05, 1.0));
        let r = f.step(Timestamp(0.1), &[], &[d]);
        assert_eq!(r.recovered_2d, 1);
        assert_eq!(f.tracks()[0].missed_frames, 0);
    }

    #[test]
    fn compose_cases() {
        assert_eq!(compose_2d_measurement(&det2(1.0, 2.0, 0.0), &Vec3::new(0.0, 0.0, 1.5)), Vec3::new(1.0, 2.0, 1.5));
        let p = Vec3::new(0.3, -0.7, 0.9);
        assert_eq!(compose_2d_measurement(&det2(p.x, p.y, 0.0), &p), p);
    }

    #[test]
    fn grid_never_spawns_and_3d_has_priority() {
        let mut f = fusion_with_track_at(Vec3::new(0.0, 0.0, 1.0), 0.5);
        let r = f.step(Timestamp(0.1), &[det3(0.1, 0.0, 1.0, 0.1)], &[det2(0.0, 0.1, 0.1), det2(3.0, 3.0, 0.1)]);
        assert_eq!(r.recovered_2d, 0);
        assert_eq!(r.spawned, 0);
        assert!(r.updated_3d.iter().all(|id| !r.updated_2d.contains(id)));
        assert_eq!(f.tracks().len(), 1);
    }

    #[test]
    fn unmatched_3d_spawns() {
        let mut f = fusion_with_track_at(Vec3::new(0.0, 0.0, 1.0), 0.5);
        let r = f.step(Timestamp(0.1), &[det3(3.0, 0.0, 1.0, 0.1)], &[]);
        assert_eq!(r.spawned, 1);
        assert_eq!(f.tracks().len(), 2);
        assert_eq!(f.tracks()[0].missed_frames, 1);
    }

    #[test]
    fn gate_is_strict() {
        let p = greedy_match(&[Vec3::new(0.5, 0.0, 0.0)], &[Vec3::zeros()], &[false], 0.5);
        assert!(p.is_empty());
        let p = greedy_match(&[Vec3::new(0.4, 0.0, 0.0)], &[Vec3::zeros()], &[false], 0.5);
        assert_eq!(p, vec![(0, 0)]);
        let p = greedy_match(&[Vec3::new(0.4, 0.0, 0.0)], &[Vec3::zeros()], &[true], 0.5);
        assert!(p.is_empty());
    }

    /// Independent oracle: enumerate every injective partial assignment and
    /// keep the one consistent with the in-order greedy rule.
    fn oracle(sources: &[Vec3], targets: &[Vec3], gate: f64) -> Vec<(usize, usize)> {
        fn rec(s: usize, src: &[Vec3], tgt: &[Vec3], used: &mut Vec<bool>, gate: f64, acc: &mut Vec<(usize, usize)>) -> bool {
            if s == src.len() {
                return true;
            }
            let options: Vec<(usize, f64)> =
                (0..tgt.len()).filter(|&t| !used[t]).map(|t| (t, (src[s] - tgt[t]).norm())).filter(|&(_, d)| d < gate).collect();
            let min = options.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
            for t in 0..=tgt.len() {
                let ok = if t == tgt.len() {
                    options.is_empty()
                } else {
                    options.iter().find(|o| o.0 == t).is_some_and(|o| o.1 == min)
                        && options.iter().filter(|o| o.1 == min).map(|o| o.0).min() == Some(t)
                };
                if !ok {
                    continue;
                }
                if t < tgt.len() {
                    used[t] = true;
                    acc.push((s, t));
                }
                if rec(s + 1, src, tgt, used, gate, acc) {
                    return true;
                }
                if t < tgt.len() {
                    used[t] = false;
                    acc.pop();
                }
            }
            false
        }
        let mut acc = Vec::new();
        rec(0, sources, targets, &mut vec![false; targets.len()], gate, &mut acc);
        acc
    }

    #[test]
    fn crossing_pairs_follow_source_order() {
        // source 0 is closest to target 1, which source 1 wanted too
        let src = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.3, 0.0, 0.0)];
        let tgt = [Vec3::new(-0.35, 0.0, 0.0), Vec3::new(0.2, 0.0, 0.0)];
        let got = greedy_match(&src, &tgt, &[false, false], 0.75);
        assert_eq!(got, vec![(0, 1), (1, 0)]);
        assert_eq!(got, oracle(&src, &tgt, 0.75));

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let mut pt = || Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0);
            let src: Vec<Vec3> = (0..3).map(|_| pt()).collect();
            let tgt: Vec<Vec3> = (0..3).map(|_| pt()).collect();
            assert_eq!(greedy_match(&src, &tgt, &[false; 3], 0.75), oracle(&src, &tgt, 0.75));
        }
    }

    #[test]
    fn conservation_and_retirement() {
        let mut f = fusion_with_track_at(Vec3::new(0.0, 0.0, 1.0), 0.5);
        for k in 1..=5 {
            f.step(Timestamp(k as f64 * 0.1), &[], &[]);
            assert_eq!(f.tracks().len(), 1);
        }
        // sixth miss exceeds the limit of five
        let r = f.step(Timestamp(0.6), &[], &[]);
        assert_eq!(r.retired, 1);
        assert!(f.tracks().is_empty());
    }

    #[test]
    fn recovered_walker_keeps_height() {
        let mut f = fusion_with_track_at(Vec3::new(0.0, 0.0, 0.85), 0.75);
        let mut k = 0;
        let pos = |k: usize| Vec3::new(0.1 * k as f64, 0.0, 0.85);
        for _ in 0..10 {
            k += 1;
            let p = pos(k);
            f.step(Timestamp(k as f64 * 0.1), &[det3(p.x, p.y, p.z, 0.0)], &[]);
        }
        for _ in 0..5 {
            k += 1;
            let p = pos(k);
            let r = f.step(Timestamp(k as f64 * 0.1), &[], &[det2(p.x, p.y, 0.0)]);
            assert_eq!(r.recovered_2d, 1);
            let t = &f.tracks()[0];
            assert_eq!(t.missed_frames, 0);
            assert!((t.position().z - 0.85).abs() < 0.05);
        }
    }
}
