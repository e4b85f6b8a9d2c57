//! Detection-to-ground-truth association and precision/recall metrics over
//! a sweep of distance thresholds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::types::Vec3;

pub const DEFAULT_SWEEP: [f64; 3] = [0.75, 0.5, 0.25];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub matched_errors: Vec<f64>,
    /// (detection, truth) index pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// Repeatedly takes the globally closest unmatched (detection, truth) pair
/// within `dist_thresh`. Ties break on detection index, then truth index.
pub fn associate_frame(detections: &[Vec3], truths: &[Vec3], dist_thresh: f64) -> FrameResult {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (j, g) in truths.iter().enumerate() {
            let dist = (d - g).norm();
            if dist <= dist_thresh {
                cand.push((dist, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; detections.len()];
    let mut gt_used = vec![false; truths.len()];
    let mut r = FrameResult::default();
    for (dist, i, j) in cand {
        if det_used[i] || gt_used[j] {
            continue;
        }
        det_used[i] = true;
        gt_used[j] = true;
        r.pairs.push((i, j));
        r.matched_errors.push(dist);
    }
    r.tp = r.pairs.len();
    r.fp = detections.len() - r.tp;
    r.fn_ = truths.len() - r.tp;
    r
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Absent when there were no detections.
    pub precision: Option<f64>,
    /// Absent when there was no ground truth.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Absent when nothing matched.
    pub position_error: Option<f64>,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro-averaged metrics over frames.
pub fn aggregate(frames: &[FrameResult]) -> Metrics {
    let tp: usize = frames.iter().map(|f| f.tp).sum();
    let fp: usize = frames.iter().map(|f| f.fp).sum();
    let fn_: usize = frames.iter().map(|f| f.fn_).sum();
    let errs: Vec<f64> = frames.iter().flat_map(|f| f.matched_errors.iter().copied()).collect();
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => Some(f1_score(p, r)),
        _ => None,
    };
    let position_error = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);
    Metrics { tp, fp, fn_, precision, recall, f1, position_error }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub dist_thresh: f64,
    pub metrics: Metrics,
}

pub type SweepResult = Vec<SweepEntry>;

/// Scores a whole run: `frames[k]` is (detections, truths) of frame k.
pub fn evaluate_sweep(frames: &[(Vec<Vec3>, Vec<Vec3>)], sweep: &[f64]) -> SweepResult {
    sweep
        .iter()
        .map(|&th| {
            let per: Vec<FrameResult> = frames.iter().map(|(d, g)| associate_frame(d, g, th)).collect();
            SweepEntry { dist_thresh: th, metrics: aggregate(&per) }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Aligned text table, one row per (group, method), with a
/// precision/recall/F1/position-error group per threshold.
pub fn format_table(rows: &[(String, String, SweepResult)]) -> String {
    let Some((_, _, first)) = rows.first() else { return String::new() };
    let mut header = vec!["Setting".to_string(), "Method".to_string()];
    for e in first {
        let th = e.dist_thresh;
        header.extend([format!("P@{th}"), format!("R@{th}"), format!("F1@{th}"), format!("PosErr@{th}")]);
    }
    let mut table = vec![header];
    for (group, method, sweep) in rows {
        let mut r = vec![group.clone(), method.clone()];
        for e in sweep {
            let m = &e.metrics;
            r.extend([cell(m.precision), cell(m.recall), cell(m.f1), cell(m.position_error)]);
        }
        table.push(r);
    }
    let cols = table[0].len();
    let width: Vec<usize> = (0..cols).map(|c| table.iter().map(|r| r.get(c).map_or(0, |s| s.len())).max().unwrap_or(0)).collect();
    let mut out = String::from("# micro-averaged over frames; '-' marks an undefined value\n");
    for r in &table {
        let line: Vec<String> = r.iter().enumerate().map(|(c, s)| format!("{s:>w$}", w = width[c])).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn p(x: f64, y: f64) -> Vec3 {
        Vec3::new(x, y, 0.0)
    }

    #[test]
    fn no_detections() {
        let r = associate_frame(&[], &[p(0.0, 0.0), p(1.0, 0.0)], 0.5);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 2));
    }

    #[test]
    fn single_match_records_error() {
        let r = associate_frame(&[p(0.1, 0.0)], &[p(0.0, 0.0)], 0.25);
        assert_eq!(r.tp, 1);
        assert!((r.matched_errors[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn threshold_is_inclusive() {
        let r = associate_frame(&[p(0.25, 0.0)], &[p(0.0, 0.0)], 0.25);
        assert_eq!(r.tp, 1);
    }

    #[test]
    fn one_of_two_truths_found() {
        let m = aggregate(&[associate_frame(&[p(0.0, 0.1)], &[p(0.0, 0.0), p(3.0, 0.0)], 0.5)]);
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(0.5));
        assert_eq!(m.f1, Some(2.0 / 3.0));
    }

    #[test]
    fn micro_aggregation() {
        let a = FrameResult { tp: 1, fp: 0, fn_: 1, matched_errors: vec![0.1], pairs: vec![] };
        let b = FrameResult { tp: 1, fp: 1, fn_: 0, matched_errors: vec![0.3], pairs: vec![] };
        let m = aggregate(&[a, b]);
        assert!((m.precision.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.position_error.unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        let m = aggregate(&[associate_frame(&[p(5.0, 5.0)], &[p(0.0, 0.0)], 0.5)]);
        assert_eq!((m.precision, m.recall, m.f1, m.position_error), (Some(0.0), Some(0.0), Some(0.0), None));
        let m = aggregate(&[associate_frame(&[], &[], 0.5)]);
        assert_eq!((m.precision, m.recall, m.f1), (None, None, None));
    }

    #[test]
    fn perfect_run() {
        let f: Vec<FrameResult> = (0..4).map(|_| associate_frame(&[p(1.0, 1.0)], &[p(1.0, 1.0)], 0.25)).collect();
        let m = aggregate(&f);
        assert_eq!((m.precision, m.recall, m.f1), (Some(1.0), Some(1.0), Some(1.0)));
    }

    /// Brute force: rescan every unmatched pair for the minimum each round.
    pub(crate) fn oracle(dets: &[Vec3], gts: &[Vec3], th: f64) -> Vec<(usize, usize)> {
        let mut du = vec![false; dets.len()];
        let mut gu = vec![false; gts.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..dets.len() {
                for j in 0..gts.len() {
                    if du[i] || gu[j] {
                        continue;
                    }
                    let d = (dets[i] - gts[j]).norm();
                    if d <= th && best.map_or(true, |b| d < b.0) {
                        best = Some((d, i, j));
                    }
                }
            }
            let Some((_, i, j)) = best else { break };
            du[i] = true;
            gu[j] = true;
            out.push((i, j));
        }
        out
    }

    #[test]
    fn matches_closest_pair_oracle() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nd = rng.gen_range(0..=8);
            let ng = rng.gen_range(0..=8);
            let mut pt = || Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..2.0));
            let d: Vec<Vec3> = (0..nd).map(|_| pt()).collect();
            let g: Vec<Vec3> = (0..ng).map(|_| pt()).collect();
            let r = associate_frame(&d, &g, 0.75);
            assert_eq!(r.pairs, oracle(&d, &g, 0.75));
        }
    }

    #[test]
    fn table_has_threshold_groups() {
        let frames = vec![(vec![p(0.0, 0.1)], vec![p(0.0, 0.0)])];
        let s = evaluate_sweep(&frames, &DEFAULT_SWEEP);
        let t = format_table(&[("31".into(), "fused".into(), s)]);
        let header = t.lines().nth(1).unwrap();
        for th in ["0.75", "0.5", "0.25"] {
            assert!(header.contains(&format!("P@{th}")));
        }
        assert_eq!(t.lines().count(), 3);
    }
}
