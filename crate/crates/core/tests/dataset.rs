//! Dataset layout round trips.

use partreg::io::dataset::{frame_path, write_session, Dataset, Split};
use partreg::synth::{generate_scene, scan_session, SceneConfig};

#[test]
fn hundred_frames_round_trip_with_identical_gt_flow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        persons: 1,
        frames: 100,
        window: 0.02,
        seed: 11,
        ..SceneConfig::default()
    };
    let scene = generate_scene(&cfg).unwrap();
    let session = scan_session(&scene).unwrap();
    write_session(dir.path(), &cfg, &scene, &session).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();

    let mut points = 0;
    for (f, frames) in session.iter().enumerate() {
        let loaded = ds.load_frame("person_000", f).unwrap();
        let Some(scan) = &frames[0].scan else {
            assert!(loaded.record.is_empty());
            continue;
        };
        let flow = loaded.record.flow.as_ref().unwrap();
        assert_eq!(flow.len(), scan.flow.len());
        for (a, b) in flow.iter().zip(scan.flow.vectors()) {
            // flow is stored as 32-bit floats
            assert_eq!(a.map(|v| v as f32), b.map(|v| v as f32));
        }
        assert_eq!(loaded.record.labels.as_deref(), Some(scan.labels.hard()));
        points += flow.len();
    }
    assert!(points > 0);

    let frames = |s| ds.frames_in_split(s)[0].frames();
    assert_eq!(frames(Split::Train), 0..70);
    assert_eq!(frames(Split::Val), 70..90);
    assert_eq!(frames(Split::Test), 90..100);
}

#[test]
fn missing_frame_and_count_mismatch_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        persons: 1,
        frames: 3,
        window: 0.05,
        ..SceneConfig::default()
    };
    partreg::io::write_dataset(dir.path(), &cfg).unwrap();

    // point count disagrees with the manifest
    let manifest = dir.path().join("manifest.toml");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let n = ds.manifest().persons[0].points[0];
    let edited = text.replacen(&format!("points = [{n},"), &format!("points = [{},", n + 1), 1);
    assert_ne!(edited, text, "manifest layout changed");
    std::fs::write(&manifest, &edited).unwrap();
    let err = Dataset::open(dir.path()).unwrap().load_frame("person_000", 0).unwrap_err().to_string();
    assert!(err.contains("manifest lists"), "{err}");
    std::fs::write(&manifest, &text).unwrap();

    let victim = frame_path(dir.path(), "person_000", 2);
    std::fs::remove_file(&victim).unwrap();
    let err = Dataset::open(dir.path()).unwrap_err().to_string();
    assert!(err.contains(victim.to_str().unwrap()), "{err}");
}
