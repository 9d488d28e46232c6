mod common;

use common::*;
use std::fs;

#[test]
fn default_config_writes_two_hundred_and_forty_clips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", s(&data)]);
    assert_eq!(count_dirs(&data.join("train")), 200);
    assert_eq!(count_dirs(&data.join("val")), 40);
    assert!(data.join("meta.json").is_file());
    assert!(data.join("manifest.json").is_file());
    let clip = data.join("train").join("clip_0000");
    assert!(clip.join("frame_039.ppm").is_file());
    assert!(clip.join("label_039.pgm").is_file());
    assert!(!clip.join("frame_040.ppm").exists());
}

#[test]
fn same_seed_gives_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--out", s(&a), "--clips", "5", "--seed", "9"]);
    ok(&["gen-data", "--out", s(&b), "--clips", "5", "--seed", "9"]);
    let (mut ta, mut tb) = (tree(&a), tree(&b));
    ta.remove(std::path::Path::new("manifest.json"));
    tb.remove(std::path::Path::new("manifest.json"));
    assert!(!ta.is_empty());
    assert!(ta == tb, "trees differ");

    let c = dir.path().join("c");
    ok(&["gen-data", "--out", s(&c), "--clips", "5", "--seed", "10"]);
    let tc = tree(&c);
    let frame = std::path::Path::new("train/clip_0000/frame_000.ppm");
    assert_ne!(ta[frame], tc[frame]);
}

#[test]
fn clips_flag_sets_the_training_clip_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--clips", "2", "--val-clips", "1"]);
    assert_eq!(count_dirs(&data.join("train")), 2);
    assert_eq!(count_dirs(&data.join("val")), 1);
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_gen_config(dir.path(), 2, 1);
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--config", s(&cfg)]);
    let keep = data.join("notes.txt");
    fs::write(&keep, "mine").unwrap();

    let out = run(&["gen-data", "--out", s(&data), "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--force"));

    ok(&["gen-data", "--out", s(&data), "--config", s(&cfg), "--force", "--clips", "3"]);
    assert_eq!(count_dirs(&data.join("train")), 3);
    assert_eq!(read(&keep), "mine");
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(&dir.path().join("bad.json"), serde_json::json!({ "height": 0 }));
    let out = run(&["gen-data", "--out", s(&dir.path().join("d")), "--config", s(&cfg)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let unknown = write_json(&dir.path().join("unknown.json"), serde_json::json!({ "hieght": 24 }));
    let out = run(&["gen-data", "--out", s(&dir.path().join("e")), "--config", s(&unknown)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}
