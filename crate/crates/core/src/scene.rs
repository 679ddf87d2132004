//! Scene directory I/O, point colorization and point-to-box association.
//!
//! Layout of a scene directory:
//!
//! ```text
//! manifest.json
//! boxes.json
//! scans/NNNNNN.lpc          "LPC1", u32 count, count × 3 × f32 (little endian)
//! scans/NNNNNN.pose.json    [R|t] as 12 row-major numbers (sensor→world)
//! frames/NNNNNN.png         RGB8
//! frames/NNNNNN.pose.json   [R|t] as 12 row-major numbers (camera→world)
//! frames/NNNNNN.intr.json   {fx, fy, cx, cy, width, height}
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::pose::PoseSE3;

pub type Rgb = [u8; 3];

/// Object id carried by points that belong to no annotated box.
pub const STATIC_ID: u32 = 0;

const LPC_MAGIC: &[u8; 4] = b"LPC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
    Cyclist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    pub timestamp: f64,
    /// sensor→world
    pub sensor_pose: PoseSE3,
    /// Sensor frame, meters.
    pub points: Vec<Vector3<f64>>,
    pub point_colors: Option<Vec<Option<Rgb>>>,
    pub point_object_ids: Option<Vec<u32>>,
}

impl LidarScan {
    pub fn new(timestamp: f64, sensor_pose: PoseSE3, points: Vec<Vector3<f64>>) -> Self {
        Self {
            timestamp,
            sensor_pose,
            points,
            point_colors: None,
            point_object_ids: None,
        }
    }

    pub fn world_points(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.points.iter().map(|p| self.sensor_pose.transform_point(p))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.point_colors.as_ref().is_some_and(|c| c.len() != n) {
            return Err(Error::Validation("point_colors length differs from points".into()));
        }
        if self.point_object_ids.as_ref().is_some_and(|c| c.len() != n) {
            return Err(Error::Validation("point_object_ids length differs from points".into()));
        }
        if !self.points.iter().all(|p| p.iter().all(|x| x.is_finite())) {
            return Err(Error::Validation("non-finite point coordinate".into()));
        }
        if !self.timestamp.is_finite() {
            return Err(Error::Validation("non-finite timestamp".into()));
        }
        self.sensor_pose.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub timestamp: f64,
    /// camera→world
    pub pose: PoseSE3,
    pub intrinsics: Intrinsics,
    pub image: RgbImage,
}

impl CameraFrame {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        if self.image.width() != self.intrinsics.width || self.image.height() != self.intrinsics.height {
            return Err(Error::Validation(format!(
                "image is {}x{} but intrinsics say {}x{}",
                self.image.width(),
                self.image.height(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub track_id: u32,
    pub class: ObjectClass,
    /// World frame, meters.
    pub center: [f64; 3],
    /// (length, width, height), meters.
    pub dims: [f64; 3],
    /// Yaw about world z, radians in `[-π, π)`.
    pub heading: f64,
    pub timestamp: f64,
}

impl BoxAnnotation {
    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::PI;
        if !self.dims.iter().all(|d| *d > 0.0) {
            return Err(Error::Validation(format!("box {} has non-positive dims", self.track_id)));
        }
        if !(-PI..PI).contains(&self.heading) {
            return Err(Error::Validation(format!(
                "box {} heading {} outside [-pi, pi)",
                self.track_id, self.heading
            )));
        }
        if self.track_id == STATIC_ID {
            return Err(Error::Validation("track id 0 is reserved for static points".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    /// Box canonical frame → world (origin at the center, x along heading).
    pub fn pose(&self) -> PoseSE3 {
        PoseSE3::from_yaw(self.heading, self.center())
    }

    /// World point expressed in the box canonical frame.
    #[inline]
    pub fn to_canonical(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.center();
        let (s, c) = self.heading.sin_cos();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let q = self.to_canonical(p);
        q.x.abs() <= self.dims[0] * 0.5
            && q.y.abs() <= self.dims[1] * 0.5
            && q.z.abs() <= self.dims[2] * 0.5
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneBundle {
    pub scene_id: String,
    pub scans: Vec<LidarScan>,
    pub frames: Vec<CameraFrame>,
    /// Stable-sorted by timestamp; file order is kept within a timestamp.
    pub boxes: Vec<BoxAnnotation>,
}

impl SceneBundle {
    /// Distinct annotation timestamps, ascending.
    pub fn box_timestamps(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.boxes.iter().map(|b| b.timestamp).collect();
        ts.dedup();
        ts
    }

    /// Boxes of the annotation timestamp nearest to `t`.
    pub fn boxes_near(&self, t: f64) -> &[BoxAnnotation] {
        let ts = self.box_timestamps();
        let Some(i) = nearest_index(&ts, t) else {
            return &[];
        };
        let target = ts[i];
        let start = self.boxes.partition_point(|b| b.timestamp < target);
        let end = self.boxes.partition_point(|b| b.timestamp <= target);
        &self.boxes[start..end]
    }

    pub fn track_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.boxes.iter().map(|b| b.track_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Index of the entry of an ascending slice closest to `t` (earlier wins ties).
pub fn nearest_index(sorted: &[f64], t: f64) -> Option<usize> {
    if sorted.is_empty() {
        return None;
    }
    let i = sorted.partition_point(|x| *x < t);
    if i == 0 {
        return Some(0);
    }
    if i == sorted.len() {
        return Some(i - 1);
    }
    if (t - sorted[i - 1]) <= (sorted[i] - t) {
        Some(i - 1)
    } else {
        Some(i)
    }
}

pub fn nearest_frame(frames: &[CameraFrame], t: f64) -> Option<usize> {
    let ts: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
    nearest_index(&ts, t)
}

/// Colors each point from the camera frame nearest in time. Points that
/// project behind the camera or outside the image get `None`.
pub fn colorize_points(scan: &LidarScan, frames: &[CameraFrame]) -> LidarScan {
    let mut out = scan.clone();
    let Some(fi) = nearest_frame(frames, scan.timestamp) else {
        out.point_colors = Some(vec![None; scan.points.len()]);
        return out;
    };
    let frame = &frames[fi];
    let world_to_cam = frame.pose.inverse().compose(&scan.sensor_pose);
    let colors = scan
        .points
        .iter()
        .map(|p| {
            let pc = world_to_cam.transform_point(p);
            let (u, v, _) = frame.intrinsics.project(&pc, 0.0)?;
            let (col, row) = frame.intrinsics.pixel_of(u, v)?;
            Some(frame.image.get_pixel(col, row).0)
        })
        .collect();
    out.point_colors = Some(colors);
    out
}

/// Labels each point with the track id of the first containing box, else 0.
pub fn associate_points_to_boxes(scan: &LidarScan, boxes: &[BoxAnnotation]) -> LidarScan {
    let mut out = scan.clone();
    let ids = scan
        .world_points()
        .map(|p| {
            boxes
                .iter()
                .find(|b| b.contains(&p))
                .map_or(STATIC_ID, |b| b.track_id)
        })
        .collect();
    out.point_object_ids = Some(ids);
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    scene_id: String,
    scan_count: usize,
    frame_count: usize,
    scans: Vec<ScanEntry>,
    frames: Vec<FrameEntry>,
    boxes: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScanEntry {
    timestamp: f64,
    points: String,
    pose: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameEntry {
    timestamp: f64,
    image: String,
    pose: String,
    intrinsics: String,
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Format(format!("missing file {}", path.display())),
        _ => Error::io(path, e),
    })
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn read_pose(path: &Path) -> Result<PoseSE3> {
    let rows: [f64; 12] = read_json(path)?;
    PoseSE3::from_rows(rows)
}

pub fn write_pose(path: &Path, pose: &PoseSE3) -> Result<()> {
    write_json(path, &pose.to_rows())
}

pub fn read_lpc(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let bytes = read_bytes(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != LPC_MAGIC {
        return Err(bad("missing LPC1 header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != count * 12 {
        return Err(bad(&format!("expected {} point bytes, found {}", count * 12, body.len())));
    }
    Ok(body
        .chunks_exact(12)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
            Vector3::new(f(0), f(1), f(2))
        })
        .collect())
}

/// Points are stored as f32.
pub fn write_lpc(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + points.len() * 12);
    bytes.extend_from_slice(LPC_MAGIC);
    bytes.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for c in p.iter() {
            bytes.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_sorted(what: &str, ts: impl Iterator<Item = f64>) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (i, t) in ts.enumerate() {
        if !t.is_finite() {
            return Err(Error::Validation(format!("{what} {i}: non-finite timestamp")));
        }
        if t < prev {
            return Err(Error::Validation(format!(
                "{what} {i}: timestamp {t} is earlier than its predecessor {prev}"
            )));
        }
        prev = t;
    }
    Ok(())
}

/// Loads and validates a scene directory.
pub fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::Format(format!("missing manifest {}", manifest_path.display())));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.scan_count != manifest.scans.len() || manifest.frame_count != manifest.frames.len() {
        return Err(Error::Format("manifest counts disagree with file lists".into()));
    }
    check_sorted("scan", manifest.scans.iter().map(|s| s.timestamp))?;
    check_sorted("frame", manifest.frames.iter().map(|f| f.timestamp))?;

    let mut scans = Vec::with_capacity(manifest.scans.len());
    for (i, entry) in manifest.scans.iter().enumerate() {
        let pose = read_pose(&dir.join(&entry.pose))
            .map_err(|e| name_frame(e, &format!("scan {i} ({})", entry.pose)))?;
        let points = read_lpc(&dir.join(&entry.points))?;
        let scan = LidarScan::new(entry.timestamp, pose, points);
        scan.validate().map_err(|e| name_frame(e, &format!("scan {i}")))?;
        scans.push(scan);
    }

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, entry) in manifest.frames.iter().enumerate() {
        let pose = read_pose(&dir.join(&entry.pose))
            .map_err(|e| name_frame(e, &format!("frame {i} ({})", entry.pose)))?;
        let intrinsics: Intrinsics = read_json(&dir.join(&entry.intrinsics))?;
        let image = read_rgb_png(&dir.join(&entry.image))?;
        let frame = CameraFrame {
            timestamp: entry.timestamp,
            pose,
            intrinsics,
            image,
        };
        frame.validate().map_err(|e| name_frame(e, &format!("frame {i}")))?;
        frames.push(frame);
    }

    let mut boxes: Vec<BoxAnnotation> = match &manifest.boxes {
        Some(rel) => read_json(&dir.join(rel))?,
        None => Vec::new(),
    };
    for b in &boxes {
        b.validate()?;
    }
    boxes.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

    Ok(SceneBundle {
        scene_id: manifest.scene_id,
        scans,
        frames,
        boxes,
    })
}

fn name_frame(e: Error, name: &str) -> Error {
    match e {
        Error::Validation(msg) => Error::Validation(format!("{name}: {msg}")),
        other => other,
    }
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub(crate) fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Writes a scene directory readable by [`load_scene`].
pub fn write_scene(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    create_dir(&dir.join("scans"))?;
    create_dir(&dir.join("frames"))?;
    let mut scans = Vec::new();
    for (i, scan) in bundle.scans.iter().enumerate() {
        let entry = ScanEntry {
            timestamp: scan.timestamp,
            points: format!("scans/{i:06}.lpc"),
            pose: format!("scans/{i:06}.pose.json"),
        };
        write_lpc(&dir.join(&entry.points), &scan.points)?;
        write_pose(&dir.join(&entry.pose), &scan.sensor_pose)?;
        scans.push(entry);
    }
    let mut frames = Vec::new();
    for (i, frame) in bundle.frames.iter().enumerate() {
        let entry = FrameEntry {
            timestamp: frame.timestamp,
            image: format!("frames/{i:06}.png"),
            pose: format!("frames/{i:06}.pose.json"),
            intrinsics: format!("frames/{i:06}.intr.json"),
        };
        let img_path = dir.join(&entry.image);
        frame.image.save(&img_path).map_err(|e| image_err(&img_path, e))?;
        write_pose(&dir.join(&entry.pose), &frame.pose)?;
        write_json(&dir.join(&entry.intrinsics), &frame.intrinsics)?;
        frames.push(entry);
    }
    write_json(&dir.join("boxes.json"), &bundle.boxes)?;
    let manifest = Manifest {
        scene_id: bundle.scene_id.clone(),
        scan_count: scans.len(),
        frame_count: frames.len(),
        scans,
        frames,
        boxes: Some("boxes.json".into()),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Relative path helper for `NNNNNN`-indexed files.
pub fn indexed(dir: &Path, index: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{index:06}{suffix}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera_frame(width: u32, height: u32) -> CameraFrame {
        let mut image = RgbImage::new(width, height);
        for (x, y, px) in image.enumerate_pixels_mut() {
            *px = image::Rgb([x as u8, y as u8, 7]);
        }
        CameraFrame {
            timestamp: 0.0,
            pose: PoseSE3::identity(),
            intrinsics: Intrinsics {
                fx: 50.0,
                fy: 50.0,
                cx: width as f64 / 2.0,
                cy: height as f64 / 2.0,
                width,
                height,
            },
            image,
        }
    }

    fn vehicle_box(track_id: u32, center: [f64; 3], heading: f64) -> BoxAnnotation {
        BoxAnnotation {
            track_id,
            class: ObjectClass::Vehicle,
            center,
            dims: [4.0, 2.0, 1.5],
            heading,
            timestamp: 0.0,
        }
    }

    #[test]
    fn nearest_index_picks_closest() {
        let ts = [0.0, 1.0, 2.0];
        assert_eq!(nearest_index(&ts, -5.0), Some(0));
        assert_eq!(nearest_index(&ts, 0.4), Some(0));
        assert_eq!(nearest_index(&ts, 0.5), Some(0));
        assert_eq!(nearest_index(&ts, 0.6), Some(1));
        assert_eq!(nearest_index(&ts, 9.0), Some(2));
        assert_eq!(nearest_index(&[], 1.0), None);
    }

    #[test]
    fn colorize_center_and_behind() {
        let frame = camera_frame(64, 48);
        let scan = LidarScan::new(
            0.0,
            PoseSE3::identity(),
            vec![Vector3::new(0.0, 0.0, 5.0), Vector3::new(0.0, 0.0, -1.0), Vector3::new(100.0, 0.0, 1.0)],
        );
        let out = colorize_points(&scan, std::slice::from_ref(&frame));
        let colors = out.point_colors.as_ref().unwrap();
        assert_eq!(colors[0], Some(frame.image.get_pixel(32, 24).0));
        assert_eq!(colors[1], None);
        assert_eq!(colors[2], None);
        assert_eq!(out.points, scan.points);
        assert_eq!(out.point_object_ids, scan.point_object_ids);
    }

    #[test]
    fn colorize_uses_nearest_frame_in_time() {
        let mut a = camera_frame(8, 8);
        let mut b = camera_frame(8, 8);
        a.image.pixels_mut().for_each(|p| *p = image::Rgb([255, 0, 0]));
        b.image.pixels_mut().for_each(|p| *p = image::Rgb([0, 0, 255]));
        b.timestamp = 1.0;
        let scan = LidarScan::new(0.8, PoseSE3::identity(), vec![Vector3::new(0.0, 0.0, 2.0)]);
        let out = colorize_points(&scan, &[a, b]);
        assert_eq!(out.point_colors.unwrap()[0], Some([0, 0, 255]));
    }

    #[test]
    fn association_rules() {
        let a = vehicle_box(7, [10.0, 0.0, 0.0], 0.0);
        let b = vehicle_box(9, [11.0, 0.0, 0.0], 0.3);
        let scan = LidarScan::new(
            0.0,
            PoseSE3::identity(),
            vec![
                Vector3::new(10.0, 0.0, 0.0),
                Vector3::new(100.0, 100.0, 0.0),
                Vector3::new(10.9, 0.1, 0.2),
                Vector3::new(12.9, 0.0, 0.0),
            ],
        );
        let out = associate_points_to_boxes(&scan, &[a.clone(), b.clone()]);
        assert_eq!(out.point_object_ids.unwrap(), vec![7, 0, 7, 9]);
        let swapped = associate_points_to_boxes(&scan, &[b, a]);
        assert_eq!(swapped.point_object_ids.unwrap()[2], 9);
    }

    #[test]
    fn rotated_box_containment() {
        let b = vehicle_box(3, [0.0, 0.0, 0.0], std::f64::consts::FRAC_PI_2);
        // length runs along world y at heading pi/2
        assert!(b.contains(&Vector3::new(0.0, 1.9, 0.0)));
        assert!(!b.contains(&Vector3::new(1.9, 0.0, 0.0)));
        let q = b.to_canonical(&Vector3::new(1.0, 0.0, 0.0));
        assert!((q - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn box_validation() {
        let mut b = vehicle_box(1, [0.0; 3], std::f64::consts::PI);
        assert!(b.validate().is_err());
        b.heading = -std::f64::consts::PI;
        assert!(b.validate().is_ok());
        b.dims[1] = 0.0;
        assert!(b.validate().is_err());
    }

    #[test]
    fn boxes_near_groups_by_timestamp() {
        let mut bundle = SceneBundle::default();
        let mut b0 = vehicle_box(1, [0.0; 3], 0.0);
        let mut b1 = vehicle_box(2, [0.0; 3], 0.0);
        b0.timestamp = 0.0;
        b1.timestamp = 1.0;
        bundle.boxes = vec![b0, b1.clone()];
        assert_eq!(bundle.boxes_near(0.9), &[b1]);
        assert_eq!(bundle.box_timestamps(), vec![0.0, 1.0]);
    }

    #[test]
    fn lpc_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.lpc");
        fs::write(&p, b"XXXX\0\0\0\0").unwrap();
        assert!(matches!(read_lpc(&p), Err(Error::Format(_))));
        fs::write(&p, [b"LPC1".as_slice(), &2u32.to_le_bytes(), &[0u8; 12]].concat()).unwrap();
        assert!(matches!(read_lpc(&p), Err(Error::Format(_))));
    }
}
