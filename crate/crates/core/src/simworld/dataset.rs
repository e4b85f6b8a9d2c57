//! Line-oriented dataset files.
//!
//! Line 1 is a JSON header object. Every following line is one JSON object per
//! frame with the fixed field order `t, ego{p,q,v}, gt[{id,p,r,dyn}], pts`.
//! Point coordinates are flattened `[x0,y0,z0,x1,...]` and printed with 9
//! significant digits; all other floats use the shortest representation that
//! parses back to the identical `f64`. Together with
//! [`quantize_point_coord`] (applied by the simulator) this makes
//! `read(write(frames)) == frames` bit for bit.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FrameRecord, LidarConfig};
use crate::bev::GridSpec;
use crate::error::{Error, Result};
use crate::types::{EgoState, GroundTruthObstacle, PointCloudScan, Quat, Timestamp, Vec3, QUAT_NORM_TOL};

pub const DATASET_FORMAT: &str = "storm-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub point_digits: u32,
    pub lidar: LidarConfig,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Clutter level of the recorded scene, when known.
    #[serde(default)]
    pub static_obstacles: Option<usize>,
}

impl DatasetHeader {
    pub fn new(seed: u64, lidar: LidarConfig, grid: Option<GridSpec>) -> Self {
        DatasetHeader { format: DATASET_FORMAT.into(), version: DATASET_VERSION, seed, point_digits: 9, lidar, grid, static_obstacles: None }
    }
}

/// Point coordinate text: 9 significant digits.
pub fn format_point_coord(x: f64) -> String {
    format!("{x:.8e}")
}

/// Rounds to the value that survives a write/read cycle unchanged.
pub fn quantize_point_coord(x: f64) -> f64 {
    format_point_coord(x).parse().expect("formatted float parses")
}

fn push_f64(out: &mut String, x: f64) {
    // Debug formatting is the shortest round-tripping representation
    let _ = write!(out, "{x:?}");
}

fn push_vec(out: &mut String, v: &[f64]) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_f64(out, *x);
    }
    out.push(']');
}

fn record_line(frame: &FrameRecord) -> String {
    let scan = &frame.scan;
    let mut s = String::with_capacity(64 + scan.points.len() * 48);
    s.push_str("{\"t\":");
    push_f64(&mut s, scan.stamp.0);
    s.push_str(",\"ego\":{\"p\":");
    push_vec(&mut s, scan.ego.position.as_slice());
    s.push_str(",\"q\":");
    push_vec(&mut s, &scan.ego.orientation.0);
    s.push_str(",\"v\":");
    push_vec(&mut s, scan.ego.body_velocity.as_slice());
    s.push_str("},\"gt\":[");
    for (i, g) in frame.ground_truth.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str("{\"id\":");
        s.push_str(&serde_json::to_string(&g.id).expect("string serializes"));
        s.push_str(",\"p\":");
        push_vec(&mut s, g.position.as_slice());
        s.push_str(",\"r\":");
        push_f64(&mut s, g.radius);
        let _ = write!(s, ",\"dyn\":{}}}", g.is_dynamic);
    }
    s.push_str("],\"pts\":[");
    for (i, p) in scan.points.iter().enumerate() {
        for (j, c) in p.iter().enumerate() {
            if i + j > 0 {
                s.push(',');
            }
            s.push_str(&format_point_coord(*c));
        }
    }
    s.push_str("]}");
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEgo {
    p: [f64; 3],
    q: [f64; 4],
    v: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGt {
    id: String,
    p: [f64; 3],
    r: f64,
    #[serde(rename = "dyn")]
    dynamic: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    t: f64,
    ego: RawEgo,
    gt: Vec<RawGt>,
    pts: Vec<f64>,
}

fn parse_record(line: &str) -> std::result::Result<FrameRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if raw.pts.len() % 3 != 0 {
        return Err(format!("point array length {} is not a multiple of 3", raw.pts.len()));
    }
    let q = Quat(raw.ego.q);
    if (q.norm() - 1.0).abs() > QUAT_NORM_TOL {
        return Err(format!("ego quaternion norm {} is not unit", q.norm()));
    }
    if raw.gt.iter().any(|g| !(g.r > 0.0)) {
        return Err("ground-truth radius must be positive".into());
    }
    Ok(FrameRecord {
        scan: PointCloudScan {
            stamp: Timestamp(raw.t),
            points: raw.pts.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
            ego: EgoState { position: Vec3::from(raw.ego.p), orientation: q, body_velocity: Vec3::from(raw.ego.v) },
        },
        ground_truth: raw
            .gt
            .into_iter()
            .map(|g| GroundTruthObstacle { id: g.id, position: Vec3::from(g.p), radius: g.r, is_dynamic: g.dynamic })
            .collect(),
    })
}

/// Single-writer, append-only dataset file.
pub struct DatasetWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl DatasetWriter {
    pub fn create(path: &Path, header: &DatasetHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = DatasetWriter { out: BufWriter::new(file), path: path.to_owned() };
        let line = serde_json::to_string(header).expect("header serializes");
        w.write_line(&line)?;
        Ok(w)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn write_frame(&mut self, frame: &FrameRecord) -> Result<()> {
        let line = record_line(frame);
        self.write_line(&line)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Streaming reader; yields frames in file order and stops at the first
/// malformed line with its 1-based line number.
pub struct DatasetReader {
    lines: std::io::Lines<BufReader<File>>,
    path: PathBuf,
    line_no: usize,
    header: DatasetHeader,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let parse_err = |msg: String| Error::Parse { path: path.to_owned(), line: 1, msg };
        let first = lines
            .next()
            .ok_or_else(|| parse_err("missing header line".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| parse_err(e.to_string()))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(parse_err(format!("unsupported dataset {} v{}", header.format, header.version)));
        }
        Ok(DatasetReader { lines, path: path.to_owned(), line_no: 1, header })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }
}

impl Iterator for DatasetReader {
    type Item = Result<FrameRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = self.lines.next()?;
        self.line_no += 1;
        Some(match line {
            Err(e) => Err(Error::io(&self.path, e)),
            Ok(l) => parse_record(&l).map_err(|msg| Error::Parse { path: self.path.clone(), line: self.line_no, msg }),
        })
    }
}

pub fn write_dataset<'a>(
    path: &Path,
    header: &DatasetHeader,
    frames: impl IntoIterator<Item = &'a FrameRecord>,
) -> Result<()> {
    let mut w = DatasetWriter::create(path, header)?;
    for f in frames {
        w.write_frame(f)?;
    }
    w.finish()
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<FrameRecord>)> {
    let reader = DatasetReader::open(path)?;
    let header = reader.header().clone();
    let frames = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, frames))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::simworld::{build_scene, presets, simulate, SceneConfig};

    fn header() -> DatasetHeader {
        DatasetHeader::new(7, LidarConfig::default(), Some(GridSpec::default()))
    }

    #[test]
    fn empty_stream_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&p, &header(), &[]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        let (h, frames) = read_dataset(&p).unwrap();
        assert_eq!(h, header());
        assert!(frames.is_empty());
    }

    #[test]
    fn single_frame_round_trip() {
        let frame = FrameRecord {
            scan: PointCloudScan::new(
                Timestamp(0.1),
                vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.25, 1e-3), Vec3::new(0.1, 0.2, 0.3)]
                    .into_iter()
                    .map(|p| p.map(quantize_point_coord))
                    .collect(),
                EgoState { position: Vec3::new(0.1, 0.0, 1.0), orientation: Quat::from_yaw(0.3), body_velocity: Vec3::new(0.3, 0.0, 0.0) },
            ),
            ground_truth: vec![GroundTruthObstacle { id: "walker \"0\"".into(), position: Vec3::new(1.0 / 3.0, 2.0, 0.85), radius: 0.3, is_dynamic: true }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&p, &header(), [&frame]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
        let (_, frames) = read_dataset(&p).unwrap();
        assert_eq!(frames, vec![frame]);
    }

    #[test]
    fn sixty_seconds_at_ten_hz() {
        let mut c = SceneConfig::empty_room();
        c.lidar.azimuth_count = 8;
        c.lidar.elevation_angles_deg = vec![0.0];
        c.dynamic_obstacles.push(presets::walker("w", vec![[-3.0, 0.0, 0.85], [3.0, 0.0, 0.85]], 1.0));
        let s = build_scene(c).unwrap();
        let frames = simulate(&s, 60.0, 1);
        assert_eq!(frames.len(), 600);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&p, &header(), &frames).unwrap();
        let (_, back) = read_dataset(&p).unwrap();
        assert_eq!(back.len(), 600);
        for w in back.windows(2) {
            assert!((w[1].scan.stamp.0 - w[0].scan.stamp.0 - 0.1).abs() < 1e-9);
        }
        assert_eq!(back, frames);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut c = SceneConfig::empty_room();
        c.lidar.azimuth_count = 4;
        let frames = simulate(&build_scene(c).unwrap(), 0.2, 1);
        write_dataset(&p, &header(), &frames).unwrap();
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push_str("{\"t\":0.3,\"ego\":{}}\n");
        std::fs::write(&p, text).unwrap();
        match read_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn quantized_coords_round_trip(x in -1e3..1e3f64) {
            let q = quantize_point_coord(x);
            prop_assert_eq!(quantize_point_coord(q).to_bits(), q.to_bits());
            prop_assert!((q - x).abs() <= 1e-8 * x.abs().max(1e-300));
        }

        #[test]
        fn scalar_fields_round_trip(t in 0.0..1e4f64, yaw in -3.2..3.2f64, px in -10.0..10.0f64) {
            let frame = FrameRecord {
                scan: PointCloudScan::new(
                    Timestamp(t),
                    vec![],
                    EgoState { position: Vec3::new(px, -px, 1.0), orientation: Quat::from_yaw(yaw), body_velocity: Vec3::new(yaw, 0.0, t) },
                ),
                ground_truth: vec![],
            };
            let back = parse_record(&record_line(&frame)).unwrap();
            prop_assert_eq!(back, frame);
        }
    }
}
