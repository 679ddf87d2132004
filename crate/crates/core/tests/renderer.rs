use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use surfelsim::camera::Intrinsics;
use surfelsim::objects::{ObjectModel, TrackPose};
use surfelsim::render::{render_fragments, render_with, CameraSpec, Placement, EMPTY_INDEX};
use surfelsim::scenario::paired_l1;
use surfelsim::scene::{ObjectClass, STATIC_ID};
use surfelsim::surfel::{build_map_from_observations, Observation, SemanticClass, SurfelConfig, SurfelMap, TexturedSurfel};
use surfelsim::synth::{SynthConfig, SynthWorld};
use surfelsim::{Execution, PoseSE3};

fn camera() -> CameraSpec {
    CameraSpec::new(
        PoseSE3::identity(),
        Intrinsics {
            fx: 90.0,
            fy: 90.0,
            cx: 48.0,
            cy: 36.0,
            width: 96,
            height: 72,
        },
    )
}

/// Random disks in front of an identity camera with every texel valid.
fn random_map(rng: &mut impl Rng, n: usize, class: SemanticClass) -> SurfelMap {
    let config = SurfelConfig::default();
    let mut map = SurfelMap::new(config.clone());
    for i in 0..n {
        let centroid = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(2.0..8.0));
        // tilted toward the camera so few disks are culled
        let normal = (-centroid.normalize() + Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5))).normalize();
        let voxel = [i as i32, 0, 0];
        map.surfels.insert(
            voxel,
            TexturedSurfel {
                voxel,
                centroid,
                normal,
                radius: config.radius(),
                semantic_class: class,
                object_id: 0,
                texels: (0..config.texel_count()).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
                texel_valid: vec![true; config.texel_count()],
                degenerate: false,
            },
        );
    }
    map
}

fn moved(map: &SurfelMap, motion: &PoseSE3) -> SurfelMap {
    let mut out = map.clone();
    for s in out.surfels.values_mut() {
        s.centroid = motion.transform_point(&s.centroid);
        s.normal = motion.transform_vector(&s.normal);
    }
    out
}

/// A proper rotation that permutes and flips the axes; it maps the canonical
/// axes onto themselves so every disk keeps the same in-plane footprint.
fn signed_permutation(rng: &mut impl Rng) -> Matrix3<f64> {
    loop {
        let mut order = [0usize, 1, 2];
        order.shuffle(rng);
        let m = Matrix3::from_fn(|r, c| {
            if order[r] == c {
                if rng.random_bool(0.5) { 1.0 } else { -1.0 }
            } else {
                0.0
            }
        });
        if m.determinant() > 0.0 {
            return m;
        }
    }
}

#[test]
fn rendering_is_invariant_under_moving_scene_and_camera_together() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..6 {
        let map = random_map(&mut rng, 80, SemanticClass::Background);
        let motion = PoseSE3 {
            rotation: signed_permutation(&mut rng),
            translation: Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0)),
        };
        let cam = camera();
        let moved_cam = CameraSpec::new(motion.compose(&cam.pose), cam.intrinsics);
        let a = render_with(&map, &[], &[], &cam, Execution::Parallel).unwrap();
        let b = render_with(&moved(&map, &motion), &[], &[], &moved_cam, Execution::Parallel).unwrap();
        assert!(a.coverage_ratio > 0.2, "trial {trial}: too little coverage");

        let mut flipped = 0;
        for i in 0..a.pixel_count() {
            match (a.is_covered(i), b.is_covered(i)) {
                (true, true) => assert!((a.depth[i] - b.depth[i]).abs() < 1e-4, "trial {trial} pixel {i}"),
                (false, false) => {}
                // a pixel center exactly on an edge may fall either way
                _ => flipped += 1,
            }
        }
        assert!(flipped <= a.pixel_count() / 1000, "trial {trial}: {flipped} pixels changed coverage");
    }
}

#[test]
fn winner_is_the_nearest_fragment_with_ties_to_the_lower_index() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let map = random_map(&mut rng, 60, SemanticClass::Background);
    let cam = camera();
    let out = render_with(&map, &[], &[], &cam, Execution::Parallel).unwrap();
    let mut best: HashMap<(u32, u32), (f64, u32)> = HashMap::new();
    for f in render_fragments(&map, &[], &[], &cam).unwrap() {
        let slot = best.entry((f.x, f.y)).or_insert((f.depth, f.surfel_index));
        let (d, idx) = *slot;
        if f.depth < d - 1e-6 || ((f.depth - d).abs() <= 1e-6 && f.surfel_index < idx) {
            *slot = (f.depth, f.surfel_index);
        }
    }
    for y in 0..cam.intrinsics.height {
        for x in 0..cam.intrinsics.width {
            let i = (y * cam.intrinsics.width + x) as usize;
            match best.get(&(x, y)) {
                Some((d, idx)) => {
                    assert_eq!(out.surfel_index[i], *idx, "pixel ({x}, {y})");
                    assert_eq!(out.depth[i], *d);
                }
                None => assert_eq!(out.surfel_index[i], EMPTY_INDEX),
            }
        }
    }
}

#[test]
fn channels_agree_with_the_winning_surfel() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let statics = random_map(&mut rng, 40, SemanticClass::Background);
    let mut object_map = random_map(&mut rng, 30, SemanticClass::Pedestrian);
    // object models live in their own frame; pull them back toward the origin
    let place = PoseSE3::from_yaw(0.0, Vector3::new(0.2, 0.0, 0.5));
    object_map = moved(&object_map, &place.inverse());
    let model = ObjectModel {
        track_id: 7,
        class: ObjectClass::Pedestrian,
        canonical_map: object_map,
        pose_track: vec![TrackPose {
            timestamp: 0.0,
            pose: place,
        }],
    };
    let placement = Placement {
        track_id: 7,
        pose: place,
        timestamp: Some(0.0),
    };
    let out = render_with(&statics, &[model], &[placement], &camera(), Execution::Parallel).unwrap();
    out.check_consistency().unwrap();

    let n_static = statics.len() as u32;
    let (mut saw_static, mut saw_object) = (false, false);
    for i in 0..out.pixel_count() {
        if !out.is_covered(i) {
            assert_eq!(out.rgb[i], [0, 0, 0]);
            assert!(out.distance_map[i] >= 1.0);
            continue;
        }
        if out.surfel_index[i] < n_static {
            saw_static = true;
            assert_eq!(out.instance[i], STATIC_ID);
            assert_eq!(out.semantic[i], SemanticClass::Background);
        } else {
            saw_object = true;
            assert_eq!(out.instance[i], 7);
            assert_eq!(out.semantic[i], SemanticClass::Pedestrian);
        }
    }
    assert!(saw_static && saw_object);
}

#[test]
fn checkerboard_ground_renders_close_to_the_photo() {
    let cfg = SynthConfig {
        world: SynthWorld {
            cuboids: Vec::new(),
            ..Default::default()
        },
        ..Default::default()
    };
    let scene = cfg.generate();
    let mut observations = Vec::new();
    for scan in &scene.scans {
        let origin = scan.sensor_pose.translation;
        observations.extend(scan.world_points().map(|p| Observation {
            point: p,
            color: Some(cfg.world.ground_color(p.x, p.y)),
            sensor_origin: origin,
            camera_origin: origin,
        }));
    }
    let map = build_map_from_observations(&observations, &SurfelConfig::default(), SemanticClass::Background, 0, Execution::Parallel);
    for (ego, frame) in cfg.ego_poses.iter().zip(&scene.frames) {
        let cam = cfg.camera_at(ego);
        let out = render_with(&map, &[], &[], &cam, Execution::Parallel).unwrap();
        let l1 = paired_l1(&out, &frame.image).unwrap().unwrap();
        assert!(out.coverage_ratio > 0.3, "coverage {}", out.coverage_ratio);
        assert!(l1 <= 10.0 / 255.0, "L1 {:.2}/255", l1 * 255.0);
    }
}
