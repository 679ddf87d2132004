use std::collections::BTreeSet;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use surfelsim::objects::{
    build_object_model, build_pedestrian_model, extract_object_frames, symmetrize, ObjectConfig,
};
use surfelsim::scene::{associate_points_to_boxes, BoxAnnotation, LidarScan, ObjectClass};
use surfelsim::surfel::{build_map_from_observations, Observation, SemanticClass, SurfelMap};
use surfelsim::{Execution, PoseSE3};

const DIMS: [f64; 3] = [4.0, 1.8, 1.5];

/// Random points on the faces of the body at `pose` that face `sensor`.
fn visible_surface(pose: &PoseSE3, sensor: &Vector3<f64>, n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let half = DIMS.map(|d| d / 2.0);
    let mut faces = Vec::new();
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut normal = Vector3::zeros();
            normal[axis] = sign;
            let center = normal * half[axis];
            let world_center = pose.transform_point(&center);
            if pose.transform_vector(&normal).dot(&(sensor - world_center)) > 0.0 {
                faces.push((axis, sign));
            }
        }
    }
    let area = |axis: usize| (0..3).filter(|a| *a != axis).map(|a| DIMS[a]).product::<f64>();
    let total: f64 = faces.iter().map(|(a, _)| area(*a)).sum();
    let mut out = Vec::new();
    for (axis, sign) in faces {
        let count = (n as f64 * area(axis) / total).round() as usize;
        for _ in 0..count {
            let mut p = Vector3::from_fn(|a, _| rng.random_range(-half[a]..half[a]));
            p[axis] = sign * half[axis];
            out.push(pose.transform_point(&p));
        }
    }
    out
}

/// Distance from a canonical-frame point to the surface of the true body.
fn surface_distance(q: &Vector3<f64>) -> f64 {
    let half = Vector3::from(DIMS.map(|d| d / 2.0));
    let excess = q.abs() - half;
    let outside = excess.map(|e| e.max(0.0)).norm();
    if outside > 0.0 {
        outside
    } else {
        -excess.max()
    }
}

fn annotation(track_id: u32, class: ObjectClass, pose: &PoseSE3, t: f64) -> BoxAnnotation {
    BoxAnnotation {
        track_id,
        class,
        center: pose.translation.into(),
        // generous margin so jittered boxes still hold every point
        dims: DIMS.map(|d| d + 0.4),
        heading: pose.heading(),
        timestamp: t,
    }
}

fn jitter(rng: &mut impl Rng, magnitude: f64) -> Vector3<f64> {
    let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    dir.normalize() * magnitude
}

fn colored_scan(t: f64, points: Vec<Vector3<f64>>, boxes: &[BoxAnnotation]) -> LidarScan {
    let mut scan = associate_points_to_boxes(&LidarScan::new(t, PoseSE3::identity(), points), boxes);
    scan.point_colors = Some(vec![Some([180, 30, 30]); scan.points.len()]);
    scan
}

#[test]
fn jittered_two_frame_model_stays_within_the_jitter() {
    let sensor = Vector3::new(0.0, 0.0, 1.8);
    let jitter_m = 0.05;
    let mut worst_rmse: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = [
            PoseSE3::from_yaw(0.3, Vector3::new(10.0, 6.0, 0.75)),
            PoseSE3::from_yaw(0.35, Vector3::new(13.0, 5.0, 0.75)),
        ];
        let mut scans = Vec::new();
        let mut boxes = Vec::new();
        for (i, pose) in truth.iter().enumerate() {
            let t = i as f64 * 0.1;
            let noisy = PoseSE3::from_yaw(pose.heading(), pose.translation + jitter(&mut rng, jitter_m));
            let b = annotation(3, ObjectClass::Vehicle, &noisy, t);
            scans.push(colored_scan(t, visible_surface(pose, &sensor, 4000, &mut rng), std::slice::from_ref(&b)));
            boxes.push(b);
        }
        let origins = vec![sensor; 2];
        let model = build_object_model(&scans, &origins, &boxes, 3, &ObjectConfig::default()).unwrap();
        assert_eq!(model.pose_track.len(), 2);

        // map every canonical surfel back to the true body frame of frame 0
        let to_truth = truth[0].inverse().compose(&model.pose_track[0].pose);
        let sq: f64 = model
            .canonical_map
            .iter()
            .map(|s| surface_distance(&to_truth.transform_point(&s.centroid)).powi(2))
            .sum();
        let rmse = (sq / model.canonical_map.len() as f64).sqrt();
        worst_rmse = worst_rmse.max(rmse);
        assert!(rmse <= jitter_m, "seed {seed}: rmse {rmse:.4}");

        // partial overlap between views limits ICP, but the recovered
        // relative motion stays inside the annotation noise
        let est = model.pose_track[1].pose.compose(&model.pose_track[0].pose.inverse());
        let real = truth[1].compose(&truth[0].inverse());
        let err = est.compose(&real.inverse());
        assert!(err.translation.norm() <= jitter_m, "seed {seed}: {}", err.translation.norm());
    }
    assert!(worst_rmse > 0.0);
}

fn voxel_set(map: &SurfelMap) -> BTreeSet<[i32; 3]> {
    map.surfels.keys().copied().collect()
}

#[test]
fn per_scan_model_is_the_vehicle_model_without_the_mirror() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sensor = Vector3::new(0.0, 0.0, 1.8);
    let pose = PoseSE3::from_yaw(-0.4, Vector3::new(8.0, -3.0, 0.75));
    let points = visible_surface(&pose, &sensor, 3000, &mut rng);
    let as_vehicle = annotation(6, ObjectClass::Vehicle, &pose, 0.0);
    let as_pedestrian = BoxAnnotation {
        class: ObjectClass::Pedestrian,
        ..as_vehicle.clone()
    };
    let scan = colored_scan(0.0, points, std::slice::from_ref(&as_vehicle));
    let config = ObjectConfig::default();
    let vehicle = build_object_model(std::slice::from_ref(&scan), &[sensor], std::slice::from_ref(&as_vehicle), 6, &config)
        .unwrap();
    let pedestrian = build_pedestrian_model(&scan, &sensor, &as_pedestrian, &config).unwrap();

    let frames = extract_object_frames(std::slice::from_ref(&scan), &[sensor], std::slice::from_ref(&as_vehicle), 6)
        .unwrap();
    let raw = &frames[0].points;
    let both = symmetrize(raw);
    assert_eq!(both.len(), 2 * raw.len());
    assert_eq!(&both[..raw.len()], raw.as_slice());

    let as_obs = |pts: &[surfelsim::objects::ObjectPoint]| -> Vec<Observation> {
        pts.iter()
            .map(|p| Observation {
                point: p.point,
                color: p.color,
                sensor_origin: p.sensor_origin,
                camera_origin: p.camera_origin,
            })
            .collect()
    };
    let direct = build_map_from_observations(&as_obs(raw), &config.surfel, SemanticClass::Pedestrian, 6, Execution::Sequential);
    assert_eq!(pedestrian.canonical_map, direct);
    let mirrored =
        build_map_from_observations(&as_obs(&both), &config.surfel, SemanticClass::Vehicle, 6, Execution::Sequential);
    assert_eq!(vehicle.canonical_map, mirrored);
    assert!(voxel_set(&pedestrian.canonical_map).len() < voxel_set(&vehicle.canonical_map).len());
    assert_eq!(pedestrian.pose_track[0].pose, as_pedestrian.pose());
    assert_eq!(vehicle.pose_track[0].pose, as_vehicle.pose());
}
