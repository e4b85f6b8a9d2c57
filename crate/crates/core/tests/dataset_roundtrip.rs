use storm_core::simworld::{build_scene, presets, read_dataset, simulate, write_dataset, DatasetHeader, SceneConfig};
use storm_core::Error;

fn recording() -> (DatasetHeader, Vec<storm_core::simworld::FrameRecord>) {
    let mut c = SceneConfig::empty_room();
    c.dynamic_obstacles.push(presets::walker("w", vec![[-2.0, -1.0, presets::WALKER_CENTER_Z], [2.0, 1.0, presets::WALKER_CENTER_Z]], 1.0));
    let scene = build_scene(c.clone()).unwrap();
    (DatasetHeader::new(4, c.lidar, None), simulate(&scene, 1.0, 4))
}

#[test]
fn simulated_recording_reads_back_identically() {
    let (header, frames) = recording();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rec.jsonl");
    write_dataset(&path, &header, &frames).unwrap();
    let (h, back) = read_dataset(&path).unwrap();
    assert_eq!(h, header);
    assert_eq!(back, frames);
    assert!(frames.iter().all(|f| !f.scan.points.is_empty()));
}

#[test]
fn corrupt_frame_reports_its_line() {
    let (header, frames) = recording();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rec.jsonl");
    write_dataset(&path, &header, &frames[..3]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"stamp\": ";
    std::fs::write(&path, lines.join("\n")).unwrap();
    match read_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
