//! Euclidean clustering of dynamic points and artifact filtering.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Timestamp, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection3D {
    pub centroid: Vec3,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub point_count: usize,
    pub stamp: Timestamp,
}

impl Detection3D {
    pub fn from_points(points: &[Vec3], stamp: Timestamp) -> Option<Self> {
        let first = points.first()?;
        let (mut lo, mut hi, mut sum) = (*first, *first, Vec3::zeros());
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
            sum += p;
        }
        Some(Detection3D { centroid: sum / points.len() as f64, bbox_min: lo, bbox_max: hi, point_count: points.len(), stamp })
    }

    pub fn volume(&self) -> f64 {
        let e = self.bbox_max - self.bbox_min;
        e.x * e.y * e.z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub linkage_radius: f64,
    /// Points per cubic meter of bounding box.
    pub min_density: f64,
    pub nn_static_radius: f64,
    pub nn_static_fraction: f64,
    /// Floor on the bounding-box volume, normally one voxel.
    pub min_volume: f64,
    /// Disables the static-proximity demotion.
    #[serde(default)]
    pub disable_nn_check: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            linkage_radius: 0.3,
            min_density: 50.0,
            nn_static_radius: 0.2,
            nn_static_fraction: 0.5,
            min_volume: 0.2f64.powi(3),
            disable_nn_check: false,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.linkage_radius > 0.0
            && self.min_density > 0.0
            && self.nn_static_radius > 0.0
            && self.nn_static_fraction > 0.0
            && self.nn_static_fraction <= 1.0
            && self.min_volume > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid cluster config {self:?}")));
        }
        Ok(())
    }
}

/// Uniform hash grid over a point set.
struct CellIndex<'a> {
    cell: f64,
    points: &'a [Vec3],
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> CellIndex<'a> {
    fn new(points: &'a [Vec3], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(i);
        }
        CellIndex { cell, points, cells }
    }

    /// Indices of points within `r <= cell` of `p`, in ascending order per
    /// cell but not globally sorted.
    fn for_each_within(&self, p: &Vec3, r: f64, mut f: impl FnMut(usize)) {
        let k = key(p, self.cell);
        let r2 = r * r;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &j in ids {
                            if (self.points[j] - p).norm_squared() <= r2 {
                                f(j);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn key(p: &Vec3, cell: f64) -> [i64; 3] {
    [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components of the "within `linkage_radius`" graph. Members are
/// sorted, and clusters are ordered by their lowest member.
pub fn euclidean_cluster(points: &[Vec3], linkage_radius: f64) -> Vec<Vec<usize>> {
    let index = CellIndex::new(points, linkage_radius);
    let mut parent: Vec<usize> = (0..points.len()).collect();
    for (i, p) in points.iter().enumerate() {
        index.for_each_within(p, linkage_radius, |j| {
            if j > i {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        });
    }
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for i in 0..points.len() {
        let r = find(&mut parent, i);
        let s = *slot.entry(r).or_insert_with(|| {
            out.push(Vec::new());
            out.len() - 1
        });
        out[s].push(i);
    }
    out
}

/// Density of a non-empty point set over its bounding box, with the box
/// volume floored at `min_volume`.
pub fn cluster_density(points: &[Vec3], min_volume: f64) -> f64 {
    let d = Detection3D::from_points(points, Timestamp(0.0)).expect("non-empty cluster");
    points.len() as f64 / d.volume().max(min_volume)
}

pub fn density_filter(points: &[Vec3], config: &ClusterConfig) -> bool {
    cluster_density(points, config.min_volume) >= config.min_density
}

/// Static points indexed for neighbor queries.
pub struct StaticIndex<'a> {
    index: CellIndex<'a>,
}

impl<'a> StaticIndex<'a> {
    pub fn new(static_points: &'a [Vec3], radius: f64) -> Self {
        StaticIndex { index: CellIndex::new(static_points, radius) }
    }

    pub fn count_within(&self, p: &Vec3, r: f64) -> usize {
        let mut n = 0;
        self.index.for_each_within(p, r, |_| n += 1);
        n
    }
}

/// Per-point retain mask: a point is demoted when at least
/// `nn_static_fraction` of its neighbors (other cluster points plus static
/// points) within `nn_static_radius` are static.
pub fn static_proximity_check(cluster: &[Vec3], statics: &StaticIndex, config: &ClusterConfig) -> Vec<bool> {
    let r = config.nn_static_radius;
    let own = CellIndex::new(cluster, r);
    cluster
        .iter()
        .map(|p| {
            let s = statics.count_within(p, r);
            if s == 0 {
                return true;
            }
            let mut d = 0;
            own.for_each_within(p, r, |_| d += 1);
            // the point itself is not its own neighbor
            let total = s + d - 1;
            (s as f64) < config.nn_static_fraction * total as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub raw_clusters: usize,
    pub dropped_proximity: usize,
    pub dropped_density: usize,
    pub demoted_points: usize,
}

/// Clusters dynamic points and keeps the candidates that survive the
/// proximity and density checks.
pub fn detect_obstacles(
    dynamic: &[Vec3],
    static_points: &[Vec3],
    stamp: Timestamp,
    config: &ClusterConfig,
) -> (Vec<Detection3D>, ClusterStats) {
    let clusters = euclidean_cluster(dynamic, config.linkage_radius);
    let mut stats = ClusterStats { raw_clusters: clusters.len(), ..Default::default() };
    let statics = (!config.disable_nn_check).then(|| StaticIndex::new(static_points, config.nn_static_radius));
    let mut out = Vec::new();
    for ids in clusters {
        let mut pts: Vec<Vec3> = ids.iter().map(|&i| dynamic[i]).collect();
        if let Some(statics) = &statics {
            let mask = static_proximity_check(&pts, statics, config);
            let before = pts.len();
            pts = pts.into_iter().zip(mask).filter_map(|(p, keep)| keep.then_some(p)).collect();
            stats.demoted_points += before - pts.len();
            if pts.is_empty() {
                stats.dropped_proximity += 1;
                continue;
            }
        }
        if !density_filter(&pts, config) {
            stats.dropped_density += 1;
            continue;
        }
        out.extend(Detection3D::from_points(&pts, stamp));
    }
    (out, stats)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn oracle(points: &[Vec3], r: f64) -> Vec<Vec<usize>> {
        let n = points.len();
        let mut label: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    if (points[i] - points[j]).norm() <= r && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut roots: Vec<usize> = label.clone();
        roots.sort_unstable();
        roots.dedup();
        roots.into_iter().map(|r| (0..n).filter(|&i| label[i] == r).collect()).collect()
    }

    #[test]
    fn empty_input() {
        assert!(euclidean_cluster(&[], 0.3).is_empty());
    }

    #[test]
    fn close_pair_is_one_cluster() {
        let c = euclidean_cluster(&[Vec3::zeros(), Vec3::new(0.1, 0.0, 0.0)], 0.3);
        assert_eq!(c, vec![vec![0, 1]]);
    }

    #[test]
    fn fifty_random_points_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for r in [0.2, 0.5, 1.0] {
            let pts: Vec<Vec3> =
                (0..50).map(|_| Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..1.0))).collect();
            assert_eq!(euclidean_cluster(&pts, r), oracle(&pts, r));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn clustering_matches_oracle(
            raw in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64), 0..500),
            r in 0.05..0.6f64,
        ) {
            let pts: Vec<Vec3> = raw.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            prop_assert_eq!(euclidean_cluster(&pts, r), oracle(&pts, r));
        }
    }

    fn grid_points(n: [usize; 3], extent: [f64; 3], at: Vec3) -> Vec<Vec3> {
        let mut v = Vec::new();
        for i in 0..n[0] {
            for j in 0..n[1] {
                for k in 0..n[2] {
                    let f = |a: usize, m: usize, e: f64| if m == 1 { 0.0 } else { e * a as f64 / (m - 1) as f64 };
                    v.push(at + Vec3::new(f(i, n[0], extent[0]), f(j, n[1], extent[1]), f(k, n[2], extent[2])));
                }
            }
        }
        v
    }

    #[test]
    fn density_of_walker_sized_box() {
        let pts = grid_points([2, 2, 10], [0.5, 0.5, 1.7], Vec3::zeros());
        assert_eq!(pts.len(), 40);
        let d = cluster_density(&pts, 0.008);
        assert!((d - 40.0 / (0.5 * 0.5 * 1.7)).abs() < 1e-9);
        assert!(density_filter(&pts, &ClusterConfig::default()));
    }

    #[test]
    fn sparse_spread_cluster_is_dropped() {
        let pts = vec![Vec3::zeros(), Vec3::new(2.0, 2.0, 0.0), Vec3::new(1.0, 0.5, 2.0)];
        assert!((cluster_density(&pts, 0.008) - 0.375).abs() < 1e-12);
        assert!(!density_filter(&pts, &ClusterConfig::default()));
    }

    #[test]
    fn single_point_uses_volume_floor() {
        let cfg = ClusterConfig { min_density: 100.0, ..Default::default() };
        assert!(density_filter(&[Vec3::new(1.0, 1.0, 1.0)], &cfg));
    }

    #[test]
    fn no_statics_retains_everything() {
        let pts = grid_points([3, 3, 3], [0.2, 0.2, 0.2], Vec3::zeros());
        let s = StaticIndex::new(&[], 0.2);
        assert!(static_proximity_check(&pts, &s, &ClusterConfig::default()).iter().all(|&k| k));
    }

    #[test]
    fn point_next_to_wall_is_demoted() {
        let wall = grid_points([1, 9, 9], [0.0, 0.4, 0.4], Vec3::new(1.0, -0.2, -0.2));
        let s = StaticIndex::new(&wall, 0.2);
        let cfg = ClusterConfig::default();
        let p = Vec3::new(0.95, 0.0, 0.0);
        // neighbor-count oracle
        let stat = wall.iter().filter(|w| (*w - p).norm() <= 0.2).count();
        assert!(stat >= 1);
        assert_eq!(static_proximity_check(&[p], &s, &cfg), vec![false]);
        let far = Vec3::new(-1.0, 0.0, 0.0);
        assert_eq!(static_proximity_check(&[far], &s, &cfg), vec![true]);
    }

    #[test]
    fn fraction_rule_counts_dynamic_neighbors() {
        // 1 static neighbor vs 3 dynamic neighbors: 1/4 < 0.5, retained
        let statics = vec![Vec3::new(0.15, 0.0, 0.0)];
        let s = StaticIndex::new(&statics, 0.2);
        let cluster =
            vec![Vec3::zeros(), Vec3::new(-0.05, 0.0, 0.0), Vec3::new(0.0, 0.05, 0.0), Vec3::new(0.0, -0.05, 0.0)];
        let mask = static_proximity_check(&cluster, &s, &ClusterConfig::default());
        assert!(mask[0]);
        let cfg = ClusterConfig { nn_static_fraction: 0.25, ..Default::default() };
        assert!(!static_proximity_check(&cluster, &s, &cfg)[0]);
    }

    #[test]
    fn isolated_walker_survives_and_wall_hugger_vanishes() {
        let walker = grid_points([4, 4, 12], [0.4, 0.4, 1.6], Vec3::new(2.0, 0.0, 0.1));
        let wall = grid_points([1, 40, 40], [0.0, 2.0, 2.0], Vec3::new(-2.0, -1.0, 0.0));
        let hugger = grid_points([2, 4, 12], [0.04, 0.4, 1.6], Vec3::new(-1.96, 0.0, 0.1));
        let mut dynamic = walker.clone();
        dynamic.extend(&hugger);
        let (dets, stats) = detect_obstacles(&dynamic, &wall, Timestamp(1.0), &ClusterConfig::default());
        assert_eq!(stats.raw_clusters, 2);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].centroid - Vec3::new(2.2, 0.2, 0.9)).norm() < 1e-9);
        assert!(dets.len() <= stats.raw_clusters);
    }
}
