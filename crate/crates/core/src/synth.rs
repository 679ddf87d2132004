//! Analytic driving scene for tests, benches and demos.
//!
//! The world is a checkerboard ground plane (`z = 0`) with a few parked
//! cuboid vehicles. LiDAR returns and camera images are produced by exact ray
//! casting against this geometry, so they do not depend on the surfel
//! pipeline at all.

use image::RgbImage;
use nalgebra::Vector3;

use crate::camera::{camera_pose_from_vehicle, Intrinsics};
use crate::pose::PoseSE3;
use crate::render::CameraSpec;
use crate::scene::{BoxAnnotation, CameraFrame, LidarScan, ObjectClass, Rgb, SceneBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct Cuboid {
    pub track_id: u32,
    pub class: ObjectClass,
    /// Center of the body, world frame.
    pub center: Vector3<f64>,
    pub dims: [f64; 3],
    pub heading: f64,
    pub color: Rgb,
}

impl Cuboid {
    fn pose(&self) -> PoseSE3 {
        PoseSE3::from_yaw(self.heading, self.center)
    }

    /// Annotation box that encloses the body with a small margin.
    pub fn annotation(&self, timestamp: f64, margin: f64) -> BoxAnnotation {
        BoxAnnotation {
            track_id: self.track_id,
            class: self.class,
            center: self.center.into(),
            dims: self.dims.map(|d| d + 2.0 * margin),
            heading: self.heading,
            timestamp,
        }
    }

    /// Ray parameter of the first hit (slab test in the box frame).
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let inv = self.pose().inverse();
        let o = inv.transform_point(origin);
        let d = inv.transform_vector(dir);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let half = self.dims[a] * 0.5;
            if d[a].abs() < 1e-15 {
                if o[a].abs() > half {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((-half - o[a]) / d[a], (half - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1 && t0 > 1e-9).then_some(t0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    /// Checker cell side, meters.
    pub checker: f64,
    pub ground_colors: [Rgb; 2],
    pub sky: Rgb,
    pub cuboids: Vec<Cuboid>,
    pub max_range: f64,
}

impl Default for SynthWorld {
    fn default() -> Self {
        Self {
            checker: 2.0,
            ground_colors: [[200, 170, 120], [90, 110, 140]],
            sky: [135, 180, 235],
            cuboids: vec![
                Cuboid {
                    track_id: 1,
                    class: ObjectClass::Vehicle,
                    center: Vector3::new(16.0, 4.0, 0.95),
                    dims: [4.4, 1.9, 1.5],
                    heading: 0.25,
                    color: [200, 40, 40],
                },
                Cuboid {
                    track_id: 2,
                    class: ObjectClass::Vehicle,
                    center: Vector3::new(24.0, -4.5, 0.95),
                    dims: [4.0, 1.8, 1.5],
                    heading: -0.4,
                    color: [40, 160, 60],
                },
            ],
            max_range: 60.0,
        }
    }
}

/// What a ray hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub color: Rgb,
    /// 0 for the ground.
    pub track_id: u32,
}

impl SynthWorld {
    pub fn ground_color(&self, x: f64, y: f64) -> Rgb {
        let parity = ((x / self.checker).floor() as i64 + (y / self.checker).floor() as i64).rem_euclid(2);
        self.ground_colors[parity as usize]
    }

    /// Nearest hit along `origin + t·dir` within `max_range` (dir unit length).
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir.z < -1e-12 {
            let t = -origin.z / dir.z;
            if t > 0.0 {
                let p = origin + dir * t;
                best = Some(Hit {
                    t,
                    color: self.ground_color(p.x, p.y),
                    track_id: 0,
                });
            }
        }
        for c in &self.cuboids {
            if let Some(t) = c.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        color: c.color,
                        track_id: c.track_id,
                    });
                }
            }
        }
        best.filter(|h| h.t <= self.max_range)
    }

    /// Ground-truth image for a camera: one ray through each pixel center.
    pub fn camera_image(&self, camera: &CameraSpec) -> RgbImage {
        let intr = &camera.intrinsics;
        let origin = camera.pose.translation;
        let mut img = RgbImage::new(intr.width, intr.height);
        for (col, row, px) in img.enumerate_pixels_mut() {
            let dir = camera.pose.transform_vector(&intr.pixel_ray(col, row)).normalize();
            let color = self.cast(&origin, &dir).map_or(self.sky, |h| h.color);
            *px = image::Rgb(color);
        }
        img
    }

    /// Spinning LiDAR at `sensor_pose` (x forward, z up). Returns points in
    /// the sensor frame.
    pub fn lidar_scan(&self, sensor_pose: &PoseSE3, lidar: &LidarPattern) -> Vec<Vector3<f64>> {
        let origin = sensor_pose.translation;
        let mut points = Vec::new();
        for ring in 0..lidar.rings {
            let f = if lidar.rings > 1 { ring as f64 / (lidar.rings - 1) as f64 } else { 0.0 };
            let el = (lidar.min_elevation_deg + f * (lidar.max_elevation_deg - lidar.min_elevation_deg)).to_radians();
            for step in 0..lidar.azimuth_steps {
                let az = std::f64::consts::TAU * step as f64 / lidar.azimuth_steps as f64;
                let local = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                let dir = sensor_pose.transform_vector(&local);
                if let Some(hit) = self.cast(&origin, &dir) {
                    points.push(local * hit.t);
                }
            }
        }
        points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarPattern {
    pub rings: usize,
    pub azimuth_steps: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
}

impl Default for LidarPattern {
    fn default() -> Self {
        Self {
            rings: 96,
            azimuth_steps: 2048,
            min_elevation_deg: -30.0,
            max_elevation_deg: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub world: SynthWorld,
    pub lidar: LidarPattern,
    pub intrinsics: Intrinsics,
    /// Ego (vehicle) poses; camera and LiDAR sit at the vehicle origin.
    pub ego_poses: Vec<PoseSE3>,
    pub frame_interval: f64,
    /// Annotation box margin around each cuboid, meters.
    pub box_margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            world: SynthWorld::default(),
            lidar: LidarPattern::default(),
            intrinsics: Intrinsics {
                fx: 120.0,
                fy: 120.0,
                cx: 96.0,
                cy: 64.0,
                width: 192,
                height: 128,
            },
            ego_poses: (0..3)
                .map(|i| PoseSE3::from_yaw(0.0, Vector3::new(2.0 * i as f64, 0.0, 1.8)))
                .collect(),
            frame_interval: 0.1,
            box_margin: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn camera_at(&self, ego: &PoseSE3) -> CameraSpec {
        CameraSpec::new(camera_pose_from_vehicle(ego), self.intrinsics)
    }

    /// One scan and one frame per ego pose, plus box annotations per frame.
    pub fn generate(&self) -> SceneBundle {
        let mut bundle = SceneBundle {
            scene_id: "synthetic".into(),
            ..Default::default()
        };
        for (i, ego) in self.ego_poses.iter().enumerate() {
            let t = i as f64 * self.frame_interval;
            let points = self
                .world
                .lidar_scan(ego, &self.lidar)
                .into_iter()
                // the disk format stores f32
                .map(|p| p.map(|c| c as f32 as f64))
                .collect();
            bundle.scans.push(LidarScan::new(t, *ego, points));
            let camera = self.camera_at(ego);
            bundle.frames.push(CameraFrame {
                timestamp: t,
                pose: camera.pose,
                intrinsics: self.intrinsics,
                image: self.world.camera_image(&camera),
            });
            for c in &self.world.cuboids {
                bundle.boxes.push(c.annotation(t, self.box_margin));
            }
        }
        bundle
    }
}
