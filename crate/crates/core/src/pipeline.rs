//! End-to-end commands over the on-disk formats: build a map directory from
//! a scene, render it, evaluate renders and export training layouts.
//!
//! Map directory:
//!
//! ```text
//! map.smap              static surfels
//! objects/index.json    one entry per object model
//! objects/<stem>.smap   canonical object surfels
//! objects/<stem>.track.json
//! trajectory.json       camera poses and intrinsics of the captured frames
//! boxes.json            annotations, used for placement and collision checks
//! build_report.json
//! ```
//!
//! Render directory: `NNNNNN.rgb.png`, `.sem.png`, `.inst.png` (16-bit),
//! `.depth.f32`, `.dist.f32` (little-endian, row-major) and `index.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{camera_pose_from_vehicle, vehicle_pose_from_camera, Intrinsics};
use crate::error::{Error, Result};
use crate::icp::IcpParams;
use crate::objects::{build_object_model, build_pedestrian_model, ObjectConfig, ObjectModel, TrackPose};
use crate::par::{self, Execution};
use crate::pose::PoseSE3;
use crate::render::{render_with, CameraSpec, Placement, RenderOutput};
use crate::scenario::{
    covered_l1, nearest_pose_deviation, perturb_pose, CoverageBin, DeviationBin, IntensityScale, PerturbConfig,
};
use crate::scene::{
    associate_points_to_boxes, colorize_points, create_dir, image_err, indexed, load_scene, nearest_frame,
    read_bytes, read_json, read_rgb_png, write_json, BoxAnnotation, LidarScan, ObjectClass, SceneBundle,
};
use crate::surfel::{build_surfel_map, read_map, write_map, SurfelConfig, SurfelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub surfel: SurfelConfig,
    /// Object maps default to half the scene voxel size.
    pub object_voxel_size: Option<f64>,
    pub icp: IcpParams,
    /// The `seed` field is ignored; [`PipelineConfig::seed`] is the one seed.
    pub perturb: PerturbConfig,
    /// Render resolution; intrinsics are rescaled. Defaults to each frame's own.
    pub render_width: Option<u32>,
    pub render_height: Option<u32>,
    pub near_clip: f64,
    /// Weight of the rotational term of the pose deviation.
    pub lambda_r: f64,
    /// Ego footprint `(length, width, height)`, meters.
    pub sdv_dims: [f64; 3],
    pub l1_scale: IntensityScale,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            surfel: SurfelConfig::default(),
            object_voxel_size: None,
            icp: IcpParams::default(),
            perturb: PerturbConfig::default(),
            render_width: None,
            render_height: None,
            near_clip: 0.1,
            lambda_r: 1.0,
            sdv_dims: [4.8, 2.1, 1.7],
            l1_scale: IntensityScale::Normalized,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.surfel.validate()?;
        self.object_config().surfel.validate()?;
        self.perturb_config().validate()?;
        let icp = &self.icp;
        if icp.max_iter == 0 || !(icp.tol >= 0.0) || !(icp.reject_factor > 0.0) {
            return Err(Error::Validation(format!("invalid icp parameters {icp:?}")));
        }
        if self.render_width.is_some() != self.render_height.is_some()
            || self.render_width == Some(0)
            || self.render_height == Some(0)
        {
            return Err(Error::Validation("render_width and render_height must be set together and be positive".into()));
        }
        if !(self.near_clip > 0.0) || !(self.lambda_r >= 0.0) || !self.sdv_dims.iter().all(|d| *d > 0.0) {
            return Err(Error::Validation(format!(
                "near_clip {}, lambda_r {}, sdv_dims {:?} out of range",
                self.near_clip, self.lambda_r, self.sdv_dims
            )));
        }
        Ok(())
    }

    pub fn object_config(&self) -> ObjectConfig {
        let voxel = self.object_voxel_size.unwrap_or(self.surfel.voxel_size / 2.0);
        ObjectConfig {
            surfel: self.surfel.with_voxel_size(voxel),
            icp: self.icp,
        }
    }

    pub fn perturb_config(&self) -> PerturbConfig {
        PerturbConfig {
            seed: self.seed,
            ..self.perturb.clone()
        }
    }

    fn render_intrinsics(&self, base: &Intrinsics) -> Intrinsics {
        match (self.render_width, self.render_height) {
            (Some(w), Some(h)) => base.scaled_to(w, h),
            _ => *base,
        }
    }
}

/// Static map plus object models, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub map: SurfelMap,
    pub models: Vec<ObjectModel>,
    /// Tracks (or track instants) that produced no model, with the reason.
    pub skipped: Vec<String>,
}

/// Colors and labels every scan; also returns the center of the camera that
/// colored each scan (the sensor origin when there are no frames).
pub fn prepare_scans(scene: &SceneBundle) -> (Vec<LidarScan>, Vec<Vector3<f64>>) {
    scene
        .scans
        .iter()
        .map(|scan| {
            let colored = colorize_points(scan, &scene.frames);
            let labeled = associate_points_to_boxes(&colored, scene.boxes_near(scan.timestamp));
            let origin = nearest_frame(&scene.frames, scan.timestamp)
                .map_or(scan.sensor_pose.translation, |i| scene.frames[i].pose.translation);
            (labeled, origin)
        })
        .unzip()
}

/// Builds the static map and one model per vehicle track, plus one model per
/// scan for every pedestrian or cyclist track.
pub fn reconstruct(scene: &SceneBundle, config: &PipelineConfig, exec: Execution) -> Result<Reconstruction> {
    config.validate()?;
    let (scans, origins) = prepare_scans(scene);
    let (map, _) = build_surfel_map(&scans, &origins, &config.surfel, exec)?;
    let (models, skipped) = build_models(scene, &scans, &origins, config)?;
    Ok(Reconstruction { map, models, skipped })
}

fn build_models(
    scene: &SceneBundle,
    scans: &[LidarScan],
    origins: &[Vector3<f64>],
    config: &PipelineConfig,
) -> Result<(Vec<ObjectModel>, Vec<String>)> {
    let object_config = config.object_config();
    let mut models = Vec::new();
    let mut skipped = Vec::new();
    for track_id in scene.track_ids() {
        let class = scene.boxes.iter().find(|b| b.track_id == track_id).map(|b| b.class);
        if class == Some(ObjectClass::Vehicle) {
            match build_object_model(scans, origins, &scene.boxes, track_id, &object_config) {
                Ok(m) => models.push(m),
                Err(Error::EmptyModel(msg)) => skipped.push(msg),
                Err(e) => return Err(e),
            }
            continue;
        }
        for (scan, origin) in scans.iter().zip(origins) {
            let Some(b) = scene.boxes_near(scan.timestamp).iter().find(|b| b.track_id == track_id) else {
                continue;
            };
            match build_pedestrian_model(scan, origin, b, &object_config) {
                Ok(m) => models.push(m),
                Err(Error::EmptyModel(msg)) => skipped.push(msg),
                Err(e) => return Err(e),
            }
        }
    }
    Ok((models, skipped))
}

/// One placement per annotated track that has a model, using the model
/// whose tracked pose is nearest in time to each box.
pub fn placements_for(models: &[ObjectModel], boxes: &[BoxAnnotation]) -> Vec<Placement> {
    let mut out = Vec::new();
    for b in boxes {
        let best = models
            .iter()
            .filter(|m| m.track_id == b.track_id)
            .filter_map(|m| m.pose_near(b.timestamp))
            .min_by(|x, y| (x.timestamp - b.timestamp).abs().total_cmp(&(y.timestamp - b.timestamp).abs()));
        if let Some(tp) = best {
            out.push(Placement {
                track_id: b.track_id,
                pose: tp.pose,
                timestamp: Some(tp.timestamp),
            });
        }
    }
    out
}

fn boxes_near(boxes: &[BoxAnnotation], t: f64) -> &[BoxAnnotation] {
    let mut ts: Vec<f64> = boxes.iter().map(|b| b.timestamp).collect();
    ts.dedup();
    let Some(i) = crate::scene::nearest_index(&ts, t) else {
        return &[];
    };
    let start = boxes.partition_point(|b| b.timestamp < ts[i]);
    let end = boxes.partition_point(|b| b.timestamp <= ts[i]);
    &boxes[start..end]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub timestamp: f64,
    /// camera→world
    pub pose: PoseSE3,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: Vec<TrajectoryFrame>,
}

impl Trajectory {
    pub fn of_scene(scene: &SceneBundle) -> Self {
        Self {
            frames: scene
                .frames
                .iter()
                .map(|f| TrajectoryFrame {
                    timestamp: f.timestamp,
                    pose: f.pose,
                    intrinsics: f.intrinsics,
                })
                .collect(),
        }
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        self.frames.iter().map(|f| f.pose).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelEntry {
    stem: String,
    track_id: u32,
    class: ObjectClass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrackFile {
    track_id: u32,
    class: ObjectClass,
    pose_track: Vec<TrackPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildTimings {
    pub load_ms: f64,
    pub static_map_ms: f64,
    pub objects_ms: f64,
    pub write_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub scene_id: String,
    pub surfel_count: usize,
    pub object_count: usize,
    pub object_surfel_count: usize,
    pub skipped: Vec<String>,
    pub timings: BuildTimings,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Loads `scene_dir`, reconstructs it and writes a map directory.
pub fn cmd_build(scene_dir: &Path, out_dir: &Path, config: &PipelineConfig, exec: Execution) -> Result<BuildReport> {
    config.validate()?;
    let t0 = Instant::now();
    let scene = load_scene(scene_dir)?;
    let load_ms = ms(t0);

    let t1 = Instant::now();
    let (scans, origins) = prepare_scans(&scene);
    let (map, _) = build_surfel_map(&scans, &origins, &config.surfel, exec)?;
    let static_map_ms = ms(t1);

    let t2 = Instant::now();
    let (models, skipped) = build_models(&scene, &scans, &origins, config)?;
    let objects_ms = ms(t2);

    let t3 = Instant::now();
    let recon = Reconstruction { map, models, skipped };
    write_reconstruction(out_dir, &recon, &Trajectory::of_scene(&scene), &scene.boxes)?;
    let write_ms = ms(t3);

    let report = BuildReport {
        scene_id: scene.scene_id,
        surfel_count: recon.map.len(),
        object_count: recon.models.len(),
        object_surfel_count: recon.models.iter().map(|m| m.canonical_map.len()).sum(),
        skipped: recon.skipped,
        timings: BuildTimings {
            load_ms,
            static_map_ms,
            objects_ms,
            write_ms,
        },
    };
    write_json(&out_dir.join("build_report.json"), &report)?;
    Ok(report)
}

pub fn write_reconstruction(
    dir: &Path,
    recon: &Reconstruction,
    trajectory: &Trajectory,
    boxes: &[BoxAnnotation],
) -> Result<()> {
    let objects = dir.join("objects");
    create_dir(&objects)?;
    write_map(&dir.join("map.smap"), &recon.map)?;
    let mut per_track: BTreeMap<u32, usize> = BTreeMap::new();
    let mut entries = Vec::new();
    for m in &recon.models {
        let n = per_track.entry(m.track_id).or_default();
        let stem = if m.class == ObjectClass::Vehicle {
            format!("track{}", m.track_id)
        } else {
            format!("track{}_{:03}", m.track_id, n)
        };
        *n += 1;
        write_map(&objects.join(format!("{stem}.smap")), &m.canonical_map)?;
        let track = TrackFile {
            track_id: m.track_id,
            class: m.class,
            pose_track: m.pose_track.clone(),
        };
        write_json(&objects.join(format!("{stem}.track.json")), &track)?;
        entries.push(ModelEntry {
            stem,
            track_id: m.track_id,
            class: m.class,
        });
    }
    write_json(&objects.join("index.json"), &entries)?;
    write_json(&dir.join("trajectory.json"), trajectory)?;
    write_json(&dir.join("boxes.json"), &boxes)
}

/// Everything a map directory holds.
#[derive(Debug, Clone, PartialEq)]
pub struct MapDir {
    pub recon: Reconstruction,
    pub trajectory: Trajectory,
    /// Sorted by timestamp.
    pub boxes: Vec<BoxAnnotation>,
}

pub fn read_map_dir(dir: &Path) -> Result<MapDir> {
    let map_path = dir.join("map.smap");
    if !map_path.is_file() {
        return Err(Error::Format(format!("missing map {}", map_path.display())));
    }
    let map = read_map(&map_path)?;
    let objects = dir.join("objects");
    let entries: Vec<ModelEntry> = read_json(&objects.join("index.json"))?;
    let mut models = Vec::with_capacity(entries.len());
    for e in entries {
        let track: TrackFile = read_json(&objects.join(format!("{}.track.json", e.stem)))?;
        models.push(ObjectModel {
            track_id: track.track_id,
            class: track.class,
            canonical_map: read_map(&objects.join(format!("{}.smap", e.stem)))?,
            pose_track: track.pose_track,
        });
    }
    let trajectory: Trajectory = read_json(&dir.join("trajectory.json"))?;
    let mut boxes: Vec<BoxAnnotation> = read_json(&dir.join("boxes.json"))?;
    for b in &boxes {
        b.validate()?;
    }
    boxes.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(MapDir {
        recon: Reconstruction {
            map,
            models,
            skipped: Vec::new(),
        },
        trajectory,
        boxes,
    })
}

/// Which camera poses to render.
#[derive(Debug, Clone, PartialEq)]
pub enum PoseSource {
    /// The captured frames.
    Trajectory,
    /// A JSON array of 12-number camera→world poses.
    File(PathBuf),
    /// One perturbed ego pose per captured frame.
    Perturb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderEntry {
    pub index: usize,
    /// Trajectory frame the pose was derived from (nearest one for pose files).
    pub source_frame: usize,
    pub timestamp: f64,
    pub pose: Option<PoseSE3>,
    pub intrinsics: Intrinsics,
    pub coverage_ratio: Option<f64>,
    pub deviation: Option<f64>,
    pub deviation_bin: Option<DeviationBin>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderIndex {
    pub resolution: Option<[u32; 2]>,
    pub lambda_r: f64,
    pub seed: u64,
    pub frames: Vec<RenderEntry>,
}

struct Job {
    source_frame: usize,
    pose: Result<PoseSE3>,
}

fn render_jobs(map: &MapDir, source: &PoseSource, config: &PipelineConfig) -> Result<Vec<Job>> {
    let traj = &map.trajectory;
    match source {
        PoseSource::Trajectory => Ok((0..traj.frames.len())
            .map(|i| Job {
                source_frame: i,
                pose: Ok(traj.frames[i].pose),
            })
            .collect()),
        PoseSource::File(path) => {
            let poses: Vec<PoseSE3> = read_json(path)?;
            if !poses.is_empty() && traj.frames.is_empty() {
                return Err(Error::EmptyTrajectory);
            }
            let trajectory = traj.poses();
            Ok(poses
                .into_iter()
                .map(|p| {
                    let source_frame = (0..trajectory.len())
                        .min_by(|a, b| {
                            let da = crate::scenario::pose_deviation(&p, &trajectory[*a], config.lambda_r);
                            let db = crate::scenario::pose_deviation(&p, &trajectory[*b], config.lambda_r);
                            da.total_cmp(&db)
                        })
                        .unwrap_or(0);
                    Job {
                        source_frame,
                        pose: Ok(p),
                    }
                })
                .collect())
        }
        PoseSource::Perturb => {
            let perturb = config.perturb_config();
            Ok(traj
                .frames
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let mut rng = perturb.rng_for_frame(i as u64);
                    let vehicle = vehicle_pose_from_camera(&f.pose);
                    let boxes = boxes_near(&map.boxes, f.timestamp);
                    let pose = perturb_pose(&vehicle, boxes, config.sdv_dims, &perturb, &mut rng)
                        .map(|v| camera_pose_from_vehicle(&v));
                    Job { source_frame: i, pose }
                })
                .collect())
        }
    }
}

/// Renders the map directory at every requested pose and writes a render
/// directory. Frames whose pose cannot be produced are recorded in the
/// index with an error and no image files.
pub fn cmd_render(
    map_dir: &Path,
    source: &PoseSource,
    out_dir: &Path,
    config: &PipelineConfig,
    exec: Execution,
) -> Result<RenderIndex> {
    config.validate()?;
    let map = read_map_dir(map_dir)?;
    let jobs = render_jobs(&map, source, config)?;
    create_dir(out_dir)?;
    let trajectory = map.trajectory.poses();
    let results = par::map_range(exec, jobs.len(), |i| render_job(i, &jobs[i], &map, &trajectory, out_dir, config, exec));
    let frames = results.into_iter().collect::<Result<Vec<_>>>()?;
    let index = RenderIndex {
        resolution: config.render_width.zip(config.render_height).map(|(w, h)| [w, h]),
        lambda_r: config.lambda_r,
        seed: config.seed,
        frames,
    };
    write_json(&out_dir.join("index.json"), &index)?;
    Ok(index)
}

fn render_job(
    index: usize,
    job: &Job,
    map: &MapDir,
    trajectory: &[PoseSE3],
    out_dir: &Path,
    config: &PipelineConfig,
    exec: Execution,
) -> Result<RenderEntry> {
    let frame = &map.trajectory.frames[job.source_frame];
    let intrinsics = config.render_intrinsics(&frame.intrinsics);
    let mut entry = RenderEntry {
        index,
        source_frame: job.source_frame,
        timestamp: frame.timestamp,
        pose: None,
        intrinsics,
        coverage_ratio: None,
        deviation: None,
        deviation_bin: None,
        error: None,
    };
    let pose = match &job.pose {
        Ok(p) => *p,
        Err(e) => {
            entry.error = Some(e.to_string());
            return Ok(entry);
        }
    };
    let camera = CameraSpec {
        pose,
        intrinsics,
        near_clip: config.near_clip,
    };
    let placements = placements_for(&map.recon.models, boxes_near(&map.boxes, frame.timestamp));
    let out = render_with(&map.recon.map, &map.recon.models, &placements, &camera, exec)?;
    write_render(out_dir, index, &out)?;
    let dev = nearest_pose_deviation(&pose, trajectory, config.lambda_r)?;
    entry.pose = Some(pose);
    entry.coverage_ratio = Some(out.coverage_ratio);
    entry.deviation = Some(dev.deviation);
    entry.deviation_bin = Some(dev.bin);
    Ok(entry)
}

fn write_f32s(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: length is not a multiple of 4", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Writes the five per-pose files of a render. Instance ids above 65535 are
/// saturated in the 16-bit instance image.
pub fn write_render(dir: &Path, index: usize, out: &RenderOutput) -> Result<()> {
    let (w, h) = (out.width, out.height);
    let rgb = RgbImage::from_fn(w, h, |x, y| image::Rgb(out.rgb[(y * w + x) as usize]));
    let sem = GrayImage::from_fn(w, h, |x, y| Luma([out.semantic[(y * w + x) as usize] as u8]));
    let inst: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
        Luma([out.instance[(y * w + x) as usize].min(u16::MAX as u32) as u16])
    });
    let save = |path: PathBuf, r: image::ImageResult<()>| r.map_err(|e| image_err(&path, e));
    let p = indexed(dir, index, ".rgb.png");
    save(p.clone(), rgb.save(&p))?;
    let p = indexed(dir, index, ".sem.png");
    save(p.clone(), sem.save(&p))?;
    let p = indexed(dir, index, ".inst.png");
    save(p.clone(), inst.save(&p))?;
    write_f32s(&indexed(dir, index, ".depth.f32"), &out.depth)?;
    write_f32s(&indexed(dir, index, ".dist.f32"), &out.distance_map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub index: usize,
    pub deviation: Option<f64>,
    pub deviation_bin: Option<DeviationBin>,
    pub coverage_ratio: Option<f64>,
    pub coverage_bin: Option<CoverageBin>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub label: String,
    pub count: usize,
    pub mean_coverage: Option<f64>,
    /// Only present when some frame in the bin had a paired real image.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub l1_scale: IntensityScale,
    pub frames: Vec<EvalEntry>,
    pub by_deviation: Vec<BinSummary>,
    pub by_coverage: Vec<BinSummary>,
}

/// Real image paired with render `index`: `NNNNNN.rgb.png` or `NNNNNN.png`.
pub fn find_real(real_dir: &Path, index: usize) -> Option<PathBuf> {
    [".rgb.png", ".png"].iter().map(|s| indexed(real_dir, index, s)).find(|p| p.is_file())
}

pub fn read_render_index(render_dir: &Path) -> Result<RenderIndex> {
    let path = render_dir.join("index.json");
    if !path.is_file() {
        return Err(Error::Format(format!("missing render index {}", path.display())));
    }
    read_json(&path)
}

/// Reads back the RGB image and coverage mask (finite depth) of a render.
pub fn read_render_rgb(render_dir: &Path, index: usize) -> Result<(RgbImage, Vec<bool>)> {
    let rgb = read_rgb_png(&indexed(render_dir, index, ".rgb.png"))?;
    let depth_path = indexed(render_dir, index, ".depth.f32");
    let depth = read_f32s(&depth_path)?;
    if depth.len() != (rgb.width() * rgb.height()) as usize {
        return Err(Error::Format(format!("{}: size disagrees with the rgb image", depth_path.display())));
    }
    Ok((rgb, depth.iter().map(|d| d.is_finite()).collect()))
}

fn eval_frame(render_dir: &Path, real_dir: Option<&Path>, e: &RenderEntry, scale: IntensityScale) -> EvalEntry {
    let mut out = EvalEntry {
        index: e.index,
        deviation: e.deviation,
        deviation_bin: e.deviation_bin,
        coverage_ratio: e.coverage_ratio,
        coverage_bin: e.coverage_ratio.map(CoverageBin::of),
        l1: None,
        error: e.error.clone(),
    };
    if e.error.is_some() {
        return out;
    }
    let Some(real_path) = real_dir.and_then(|d| find_real(d, e.index)) else {
        return out;
    };
    let l1 = (|| {
        let (rgb, covered) = read_render_rgb(render_dir, e.index)?;
        let real = read_rgb_png(&real_path)?;
        let pixels: Vec<[u8; 3]> = rgb.pixels().map(|p| p.0).collect();
        covered_l1(&pixels, &covered, &real, rgb.width(), rgb.height(), scale)
    })();
    match l1 {
        Ok(v) => out.l1 = v,
        Err(err) => out.error = Some(err.to_string()),
    }
    out
}

fn summarize<'a>(label: &str, entries: impl Iterator<Item = &'a EvalEntry>) -> BinSummary {
    let entries: Vec<&EvalEntry> = entries.collect();
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let l1s: Vec<f64> = entries.iter().filter_map(|e| e.l1).collect();
    let l1_count = (!l1s.is_empty()).then_some(l1s.len());
    BinSummary {
        label: label.to_string(),
        count: entries.len(),
        mean_coverage: mean(entries.iter().filter_map(|e| e.coverage_ratio).collect()),
        mean_l1: mean(l1s),
        l1_count,
    }
}

/// Per-pose metrics and per-bin means for a render directory, optionally
/// against real images.
pub fn cmd_eval(render_dir: &Path, real_dir: Option<&Path>, scale: IntensityScale) -> Result<EvalReport> {
    let index = read_render_index(render_dir)?;
    if let Some(d) = real_dir {
        if !d.is_dir() {
            return Err(Error::Format(format!("missing real image directory {}", d.display())));
        }
    }
    let frames: Vec<EvalEntry> = index.frames.iter().map(|e| eval_frame(render_dir, real_dir, e, scale)).collect();
    let by_deviation = DeviationBin::ALL
        .into_iter()
        .map(|b| summarize(b.label(), frames.iter().filter(|e| e.deviation_bin == Some(b))))
        .collect();
    let by_coverage = CoverageBin::ALL
        .into_iter()
        .map(|b| summarize(b.label(), frames.iter().filter(|e| e.coverage_bin == Some(b))))
        .collect();
    Ok(EvalReport {
        l1_scale: scale,
        frames,
        by_deviation,
        by_coverage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanExport {
    pub paired: Vec<usize>,
    pub unpaired_renders: usize,
    pub unpaired_reals: usize,
}

const RENDER_SUFFIXES: [&str; 5] = [".rgb.png", ".sem.png", ".inst.png", ".depth.f32", ".dist.f32"];

fn copy(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).map(|_| ()).map_err(|e| Error::io(from, e))
}

/// Writes the training layout:
///
/// ```text
/// paired/render/NNNNNN.*    renders of `paired_renders` that have a real image
/// paired/real/NNNNNN.png
/// unpaired_renders/NNNNNN.* every render of `unpaired_renders`, renumbered
/// unpaired_reals/NNNNNN.png every png in `unpaired_reals`, in name order
/// manifest.json
/// ```
pub fn export_gan(
    paired_renders: &Path,
    real_dir: &Path,
    unpaired_renders: &[PathBuf],
    unpaired_reals: &[PathBuf],
    out_dir: &Path,
) -> Result<GanExport> {
    let paired_render = out_dir.join("paired").join("render");
    let paired_real = out_dir.join("paired").join("real");
    let u_render = out_dir.join("unpaired_renders");
    let u_real = out_dir.join("unpaired_reals");
    for d in [&paired_render, &paired_real, &u_render, &u_real] {
        create_dir(d)?;
    }
    let mut paired = Vec::new();
    for e in read_render_index(paired_renders)?.frames.iter().filter(|e| e.error.is_none()) {
        let Some(real) = find_real(real_dir, e.index) else {
            continue;
        };
        for s in RENDER_SUFFIXES {
            copy(&indexed(paired_renders, e.index, s), &indexed(&paired_render, e.index, s))?;
        }
        copy(&real, &indexed(&paired_real, e.index, ".png"))?;
        paired.push(e.index);
    }
    let mut n_renders = 0;
    for dir in unpaired_renders {
        for e in read_render_index(dir)?.frames.iter().filter(|e| e.error.is_none()) {
            for s in RENDER_SUFFIXES {
                copy(&indexed(dir, e.index, s), &indexed(&u_render, n_renders, s))?;
            }
            n_renders += 1;
        }
    }
    let mut n_reals = 0;
    for dir in unpaired_reals {
        let mut pngs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        pngs.sort();
        for p in pngs {
            copy(&p, &indexed(&u_real, n_reals, ".png"))?;
            n_reals += 1;
        }
    }
    let export = GanExport {
        paired,
        unpaired_renders: n_renders,
        unpaired_reals: n_reals,
    };
    write_json(&out_dir.join("manifest.json"), &export)?;
    Ok(export)
}
