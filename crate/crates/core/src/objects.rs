//! Per-object surfel models.
//!
//! Rigid objects (vehicles) are reconstructed once: their points are pulled
//! out of every scan into the box canonical frame (origin at the box center,
//! x along the heading), chained together with ICP in capture order,
//! mirrored across the lateral plane and turned into a surfel map.
//! Pedestrians and cyclists deform, so they get one model per scan.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icp::{icp_register, IcpParams};
use crate::par::Execution;
use crate::pose::PoseSE3;
use crate::scene::{nearest_index, BoxAnnotation, LidarScan, ObjectClass, Rgb};
use crate::surfel::{build_map_from_observations, Observation, SemanticClass, SurfelConfig, SurfelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    /// Surfel parameters for object maps (voxel size already reduced).
    pub surfel: SurfelConfig,
    pub icp: IcpParams,
}

impl ObjectConfig {
    /// Object maps use half the scene voxel size.
    pub fn from_scene(scene: &SurfelConfig) -> Self {
        Self {
            surfel: scene.with_voxel_size(scene.voxel_size / 2.0),
            icp: IcpParams::default(),
        }
    }
}

impl Default for ObjectConfig {
    fn default() -> Self {
        Self::from_scene(&SurfelConfig::default())
    }
}

/// A point in an object's canonical frame together with where it was seen from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPoint {
    pub point: Vector3<f64>,
    pub color: Option<Rgb>,
    pub sensor_origin: Vector3<f64>,
    pub camera_origin: Vector3<f64>,
}

impl ObjectPoint {
    fn transformed(&self, t: &PoseSE3) -> Self {
        Self {
            point: t.transform_point(&self.point),
            color: self.color,
            sensor_origin: t.transform_point(&self.sensor_origin),
            camera_origin: t.transform_point(&self.camera_origin),
        }
    }

    fn mirrored(&self) -> Self {
        let flip = |v: &Vector3<f64>| Vector3::new(v.x, -v.y, v.z);
        Self {
            point: flip(&self.point),
            color: self.color,
            sensor_origin: flip(&self.sensor_origin),
            camera_origin: flip(&self.camera_origin),
        }
    }

    fn observation(&self) -> Observation {
        Observation {
            point: self.point,
            color: self.color,
            sensor_origin: self.sensor_origin,
            camera_origin: self.camera_origin,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFrame {
    pub timestamp: f64,
    pub annotation: BoxAnnotation,
    pub points: Vec<ObjectPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPose {
    pub timestamp: f64,
    /// object→world
    pub pose: PoseSE3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub track_id: u32,
    pub class: ObjectClass,
    pub canonical_map: SurfelMap,
    /// Ascending by timestamp.
    pub pose_track: Vec<TrackPose>,
}

impl ObjectModel {
    /// Pose at the tracked timestamp nearest to `t`.
    pub fn pose_near(&self, t: f64) -> Option<&TrackPose> {
        let ts: Vec<f64> = self.pose_track.iter().map(|p| p.timestamp).collect();
        nearest_index(&ts, t).map(|i| &self.pose_track[i])
    }

    /// True if every centroid lies inside the box scaled by `slack`.
    pub fn fits_box(&self, dims: [f64; 3], slack: f64) -> bool {
        self.canonical_map.iter().all(|s| {
            (0..3).all(|a| s.centroid[a].abs() <= dims[a] * 0.5 * slack)
        })
    }
}

fn track_boxes(boxes: &[BoxAnnotation], track_id: u32) -> Vec<&BoxAnnotation> {
    boxes.iter().filter(|b| b.track_id == track_id).collect()
}

/// Points of `track_id` from every scan whose nearest annotation time has a
/// box for that track, expressed in that box's canonical frame.
pub fn extract_object_frames(
    scans: &[LidarScan],
    camera_origins: &[Vector3<f64>],
    boxes: &[BoxAnnotation],
    track_id: u32,
) -> Result<Vec<ObjectFrame>> {
    let mine = track_boxes(boxes, track_id);
    if mine.is_empty() {
        return Err(Error::NotFound(format!("track {track_id}")));
    }
    let mut times: Vec<f64> = boxes.iter().map(|b| b.timestamp).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    let mut frames = Vec::new();
    for (si, scan) in scans.iter().enumerate() {
        let Some(ti) = nearest_index(&times, scan.timestamp) else { continue };
        let Some(annotation) = mine.iter().find(|b| b.timestamp == times[ti]) else {
            continue;
        };
        let Some(ids) = scan.point_object_ids.as_ref() else { continue };
        let to_box = annotation.pose().inverse();
        let sensor_origin = to_box.transform_point(&scan.sensor_pose.translation);
        let camera_origin = to_box.transform_point(camera_origins.get(si).unwrap_or(&scan.sensor_pose.translation));
        let points = scan
            .points
            .iter()
            .enumerate()
            .filter(|(i, _)| ids[*i] == track_id)
            .map(|(i, p)| ObjectPoint {
                point: annotation.to_canonical(&scan.sensor_pose.transform_point(p)),
                color: scan.point_colors.as_ref().and_then(|c| c[i]),
                sensor_origin,
                camera_origin,
            })
            .collect();
        frames.push(ObjectFrame {
            timestamp: scan.timestamp,
            annotation: (*annotation).clone(),
            points,
        });
    }
    Ok(frames)
}

/// Input followed by its mirror image across the plane `y = 0`.
pub fn symmetrize(points: &[ObjectPoint]) -> Vec<ObjectPoint> {
    points.iter().copied().chain(points.iter().map(ObjectPoint::mirrored)).collect()
}

/// Result of chaining a track's frames together, before symmetrization.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulatedTrack {
    pub points: Vec<ObjectPoint>,
    pub pose_track: Vec<TrackPose>,
}

/// Registers each frame onto the growing cloud (first frame seeds it) and
/// merges it. Pose track entries are `annotation ∘ correction⁻¹`.
pub fn accumulate_frames(frames: &[ObjectFrame], icp: &IcpParams) -> AccumulatedTrack {
    let mut points: Vec<ObjectPoint> = Vec::new();
    let mut cloud: Vec<Vector3<f64>> = Vec::new();
    let mut pose_track = Vec::with_capacity(frames.len());
    for frame in frames {
        let mut correction = PoseSE3::identity();
        if cloud.len() >= 3 && frame.points.len() >= 3 {
            let src: Vec<Vector3<f64>> = frame.points.iter().map(|p| p.point).collect();
            let result = icp_register(&src, &cloud, &PoseSE3::identity(), icp);
            if !result.degenerate {
                correction = result.transform;
            }
        }
        for p in &frame.points {
            let moved = p.transformed(&correction);
            cloud.push(moved.point);
            points.push(moved);
        }
        pose_track.push(TrackPose {
            timestamp: frame.timestamp,
            pose: frame.annotation.pose().compose(&correction.inverse()),
        });
    }
    AccumulatedTrack { points, pose_track }
}

/// Canonical surfel model for a rigid (vehicle) track.
pub fn build_object_model(
    scans: &[LidarScan],
    camera_origins: &[Vector3<f64>],
    boxes: &[BoxAnnotation],
    track_id: u32,
    config: &ObjectConfig,
) -> Result<ObjectModel> {
    let class = track_boxes(boxes, track_id)
        .first()
        .map(|b| b.class)
        .ok_or_else(|| Error::NotFound(format!("track {track_id}")))?;
    if class != ObjectClass::Vehicle {
        return Err(Error::WrongClass(format!(
            "track {track_id} is {class:?}; rigid models are built for vehicles only"
        )));
    }
    config.surfel.validate()?;
    let frames = extract_object_frames(scans, camera_origins, boxes, track_id)?;
    let track = accumulate_frames(&frames, &config.icp);
    if track.points.is_empty() {
        return Err(Error::EmptyModel(format!("track {track_id} has no points")));
    }
    let observations: Vec<Observation> = symmetrize(&track.points).iter().map(ObjectPoint::observation).collect();
    let canonical_map = build_map_from_observations(
        &observations,
        &config.surfel,
        SemanticClass::from(class),
        track_id,
        Execution::Sequential,
    );
    Ok(ObjectModel {
        track_id,
        class,
        canonical_map,
        pose_track: track.pose_track,
    })
}

/// Single-scan model for a deformable track (pedestrian or cyclist).
pub fn build_pedestrian_model(
    scan: &LidarScan,
    camera_origin: &Vector3<f64>,
    annotation: &BoxAnnotation,
    config: &ObjectConfig,
) -> Result<ObjectModel> {
    if annotation.class == ObjectClass::Vehicle {
        return Err(Error::WrongClass(format!(
            "track {} is a vehicle; per-scan models are for pedestrians and cyclists",
            annotation.track_id
        )));
    }
    config.surfel.validate()?;
    let frames = extract_object_frames(
        std::slice::from_ref(scan),
        std::slice::from_ref(camera_origin),
        std::slice::from_ref(annotation),
        annotation.track_id,
    )?;
    let points: Vec<ObjectPoint> = frames.into_iter().flat_map(|f| f.points).collect();
    if points.is_empty() {
        return Err(Error::EmptyModel(format!(
            "track {} has no points at t={}",
            annotation.track_id, scan.timestamp
        )));
    }
    let observations: Vec<Observation> = points.iter().map(ObjectPoint::observation).collect();
    let canonical_map = build_map_from_observations(
        &observations,
        &config.surfel,
        SemanticClass::from(annotation.class),
        annotation.track_id,
        Execution::Sequential,
    );
    Ok(ObjectModel {
        track_id: annotation.track_id,
        class: annotation.class,
        canonical_map,
        pose_track: vec![TrackPose {
            timestamp: scan.timestamp,
            pose: annotation.pose(),
        }],
    })
}
