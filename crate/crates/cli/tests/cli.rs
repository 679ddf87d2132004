use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use surfelsim::pipeline::prepare_scans;
use surfelsim::scene::{write_scene, SceneBundle};
use surfelsim::synth::SynthConfig;

fn surfelsim(args: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surfelsim")).args(args).output().unwrap()
}

fn run(args: &[&str]) -> Output {
    let paths: Vec<&Path> = args.iter().map(Path::new).collect();
    surfelsim(&paths)
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    if stdout.trim().is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_str(&stdout).unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes and builds the default synthetic scene under `root`.
fn build_synthetic(root: &Path) -> serde_json::Value {
    write_scene(&SynthConfig::default().generate(), &root.join("scene")).unwrap();
    ok(&run(&["build", s(&root.join("scene")), s(&root.join("map"))]))
}

#[test]
fn empty_scene_builds_an_empty_map() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(&SceneBundle::default(), &dir.path().join("scene")).unwrap();
    let report = ok(&run(&["build", s(&dir.path().join("scene")), s(&dir.path().join("map"))]));
    assert_eq!(report["surfel_count"], 0);
    assert_eq!(report["object_count"], 0);
    assert!(dir.path().join("map/map.smap").is_file());
}

#[test]
fn missing_scene_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["build", s(&dir.path().join("absent")), s(&dir.path().join("map"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
}

#[test]
fn surfel_count_is_the_number_of_occupied_static_voxels() {
    let dir = tempfile::tempdir().unwrap();
    let report = build_synthetic(dir.path());

    let scene = SynthConfig::default().generate();
    let (scans, _) = prepare_scans(&scene);
    let mut voxels = HashSet::new();
    for scan in &scans {
        let ids = scan.point_object_ids.as_ref().unwrap();
        for (p, id) in scan.world_points().zip(ids) {
            if *id == 0 {
                voxels.insert([(p.x / 0.2).floor() as i64, (p.y / 0.2).floor() as i64, (p.z / 0.2).floor() as i64]);
            }
        }
    }
    assert_eq!(report["surfel_count"], voxels.len());
    assert_eq!(report["object_count"], 2);
}

#[test]
fn seeded_perturbed_renders_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    build_synthetic(dir.path());
    let map = dir.path().join("map");
    for name in ["a", "b"] {
        ok(&run(&["--seed", "7", "render", s(&map), s(&dir.path().join(name)), "--perturb"]));
    }
    let mut names: Vec<String> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.len() > 10);
    for n in &names {
        let a = fs::read(dir.path().join("a").join(n)).unwrap();
        let b = fs::read(dir.path().join("b").join(n)).unwrap();
        assert!(a == b, "{n} differs");
    }

    ok(&run(&["--seed", "8", "render", s(&map), s(&dir.path().join("c")), "--perturb"]));
    let a = fs::read(dir.path().join("a/index.json")).unwrap();
    let c = fs::read(dir.path().join("c/index.json")).unwrap();
    assert!(a != c, "a different seed should move the poses");
}

#[test]
fn eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    build_synthetic(dir.path());
    let render = dir.path().join("render");
    ok(&run(&["render", s(&dir.path().join("map")), s(&render)]));

    let report_path = dir.path().join("eval.json");
    let report = ok(&run(&[
        "eval",
        s(&render),
        "--real",
        s(&dir.path().join("scene/frames")),
        "--out",
        s(&report_path),
    ]));
    let frames = report["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 3);
    for f in frames {
        let l1 = f["l1"].as_f64().unwrap();
        assert!((0.0..=10.0 / 255.0).contains(&l1), "{f}");
    }
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(written, report);

    let export = ok(&run(&["export-gan", s(&render), s(&dir.path().join("scene/frames")), s(&dir.path().join("gan"))]));
    assert_eq!(export["paired"], serde_json::json!([0, 1, 2]));
    assert!(dir.path().join("gan/paired/real/000001.png").is_file());
}

#[test]
fn bad_config_and_bad_flags_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(&SceneBundle::default(), &dir.path().join("scene")).unwrap();
    let scene = dir.path().join("scene");
    let map = dir.path().join("map");

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, "no_such_key = 3\n").unwrap();
    let out = run(&["--config", s(&unknown), "build", s(&scene), s(&map)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    let negative = dir.path().join("negative.json");
    fs::write(&negative, r#"{"lambda_r": -1.0}"#).unwrap();
    let out = run(&["--config", s(&negative), "build", s(&scene), s(&map)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&["--voxel-size", "0", "build", s(&scene), s(&map)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&["--resolution", "wide", "build", s(&scene), s(&map)]);
    assert_eq!(out.status.code(), Some(1));

    let good = dir.path().join("good.toml");
    fs::write(&good, "seed = 3\nlambda_r = 0.5\n\n[perturb]\nmax_yaw = 0.2\n").unwrap();
    ok(&run(&["--config", s(&good), "--sequential", "--jobs", "2", "build", s(&scene), s(&map)]));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
