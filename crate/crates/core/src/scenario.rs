//! Novel-view sampling and evaluation metrics.

use image::RgbImage;
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{rotation_log_frobenius, PoseSE3};
use crate::render::{project, CameraSpec, RenderOutput};
use crate::scene::{BoxAnnotation, ObjectClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    /// Radius of the horizontal translation disc, meters.
    pub max_translation: f64,
    /// Yaw range `[-max_yaw, max_yaw]`, radians.
    pub max_yaw: f64,
    pub seed: u64,
    pub max_attempts: usize,
    /// Extra clearance added to every side of the ego footprint, meters.
    pub sdv_margin: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            max_translation: 3.0,
            max_yaw: 0.5,
            seed: 0,
            max_attempts: 100,
            sdv_margin: 0.0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_translation >= 0.0 && self.max_yaw >= 0.0 && self.max_attempts >= 1 && self.sdv_margin >= 0.0) {
            return Err(Error::Validation(format!("invalid perturbation config {self:?}")));
        }
        Ok(())
    }

    /// Deterministic RNG for frame `frame` derived from the single seed.
    pub fn rng_for_frame(&self, frame: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(frame);
        rng
    }
}

/// Bird's-eye footprint corners of a box, counter-clockwise.
fn footprint(b: &BoxAnnotation) -> [Vector2<f64>; 4] {
    let (s, c) = b.heading.sin_cos();
    let ax = Vector2::new(c, s) * (b.dims[0] * 0.5);
    let ay = Vector2::new(-s, c) * (b.dims[1] * 0.5);
    let ctr = Vector2::new(b.center[0], b.center[1]);
    [ctr - ax - ay, ctr + ax - ay, ctr + ax + ay, ctr - ax + ay]
}

/// Separating-axis test on the heading-oriented footprints plus overlap of
/// the vertical extents. Touching boxes collide.
pub fn check_collision(a: &BoxAnnotation, b: &BoxAnnotation) -> bool {
    let (az, bz) = (a.center[2], b.center[2]);
    if (az - bz).abs() > (a.dims[2] + b.dims[2]) * 0.5 {
        return false;
    }
    let (pa, pb) = (footprint(a), footprint(b));
    let axes = [a.heading, b.heading]
        .into_iter()
        .flat_map(|h| [Vector2::new(h.cos(), h.sin()), Vector2::new(-h.sin(), h.cos())]);
    for axis in axes {
        let span = |pts: &[Vector2<f64>; 4]| {
            pts.iter()
                .map(|p| p.dot(&axis))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
        };
        let (alo, ahi) = span(&pa);
        let (blo, bhi) = span(&pb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// Ego footprint for a vehicle pose (x forward) with dims `(l, w, h)`
/// centered on the pose origin.
pub fn sdv_box(vehicle_pose: &PoseSE3, dims: [f64; 3], margin: f64) -> BoxAnnotation {
    let heading = vehicle_pose.heading();
    let heading = if heading >= std::f64::consts::PI { -std::f64::consts::PI } else { heading };
    BoxAnnotation {
        track_id: u32::MAX,
        class: ObjectClass::Vehicle,
        center: vehicle_pose.translation.into(),
        dims: dims.map(|d| d + 2.0 * margin),
        heading,
        timestamp: 0.0,
    }
}

/// Applies a horizontal translation and a yaw about the vehicle origin.
pub fn apply_perturbation(base: &PoseSE3, dx: f64, dy: f64, yaw: f64) -> PoseSE3 {
    let turn = PoseSE3::from_yaw(yaw, Vector3::zeros());
    PoseSE3 {
        rotation: turn.rotation * base.rotation,
        translation: base.translation + Vector3::new(dx, dy, 0.0),
    }
}

/// Samples a collision-free perturbed vehicle pose: translation uniform in
/// the disc of radius `max_translation`, yaw uniform in `[-max_yaw, max_yaw]`.
pub fn perturb_pose(
    base: &PoseSE3,
    boxes: &[BoxAnnotation],
    sdv_dims: [f64; 3],
    config: &PerturbConfig,
    rng: &mut impl Rng,
) -> Result<PoseSE3> {
    config.validate()?;
    if !sdv_dims.iter().all(|d| *d > 0.0) {
        return Err(Error::Validation("ego dims must be positive".into()));
    }
    for _ in 0..config.max_attempts {
        let r = config.max_translation * rng.random::<f64>().sqrt();
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let yaw = (rng.random::<f64>() * 2.0 - 1.0) * config.max_yaw;
        let pose = apply_perturbation(base, r * theta.cos(), r * theta.sin(), yaw);
        let ego = sdv_box(&pose, sdv_dims, config.sdv_margin);
        if !boxes.iter().any(|b| check_collision(&ego, b)) {
            return Ok(pose);
        }
    }
    Err(Error::NoValidPose {
        attempts: config.max_attempts,
    })
}

/// `‖t − t′‖ + λ_R · ‖log(RᵀR′)‖_F / √2`.
pub fn pose_deviation(p: &PoseSE3, q: &PoseSE3, lambda_r: f64) -> f64 {
    let trans = (p.translation - q.translation).norm();
    let rel = p.rotation.transpose() * q.rotation;
    trans + lambda_r * rotation_log_frobenius(&rel) / std::f64::consts::SQRT_2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeviationBin {
    #[serde(rename = "d<=1")]
    UpToOne,
    #[serde(rename = "1<d<=2")]
    OneToTwo,
    #[serde(rename = "d>2")]
    AboveTwo,
}

impl DeviationBin {
    pub const ALL: [DeviationBin; 3] = [Self::UpToOne, Self::OneToTwo, Self::AboveTwo];

    pub fn of(d: f64) -> Self {
        if d <= 1.0 {
            Self::UpToOne
        } else if d <= 2.0 {
            Self::OneToTwo
        } else {
            Self::AboveTwo
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::UpToOne => "d<=1",
            Self::OneToTwo => "1<d<=2",
            Self::AboveTwo => "d>2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub deviation: f64,
    pub bin: DeviationBin,
}

/// Deviation to the closest pose of `trajectory`.
pub fn nearest_pose_deviation(p: &PoseSE3, trajectory: &[PoseSE3], lambda_r: f64) -> Result<DeviationReport> {
    let deviation = trajectory
        .iter()
        .map(|q| pose_deviation(p, q, lambda_r))
        .reduce(f64::min)
        .ok_or(Error::EmptyTrajectory)?;
    Ok(DeviationReport {
        deviation,
        bin: DeviationBin::of(deviation),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoverageBin {
    #[serde(rename = "r<=0.3")]
    UpToPoint3,
    #[serde(rename = "0.3<r<=0.5")]
    Point3ToPoint5,
    #[serde(rename = "r>0.5")]
    AbovePoint5,
}

impl CoverageBin {
    pub const ALL: [CoverageBin; 3] = [Self::UpToPoint3, Self::Point3ToPoint5, Self::AbovePoint5];

    pub fn of(r: f64) -> Self {
        if r <= 0.3 {
            Self::UpToPoint3
        } else if r <= 0.5 {
            Self::Point3ToPoint5
        } else {
            Self::AbovePoint5
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::UpToPoint3 => "r<=0.3",
            Self::Point3ToPoint5 => "0.3<r<=0.5",
            Self::AbovePoint5 => "r>0.5",
        }
    }
}

/// Splits ratios into the three coverage groups, keeping input order.
pub fn bin_by_coverage(ratios: &[f64]) -> [Vec<f64>; 3] {
    let mut groups: [Vec<f64>; 3] = Default::default();
    for &r in ratios {
        groups[CoverageBin::of(r) as usize].push(r);
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2d {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Axis-aligned image box around the projected centroids, clipped to the
/// image. `None` if no centroid projects inside the image.
pub fn derive_2d_box(centroids: &[Vector3<f64>], camera: &CameraSpec) -> Option<Box2d> {
    let (w, h) = (camera.intrinsics.width as f64, camera.intrinsics.height as f64);
    let projected: Vec<(f64, f64)> = centroids
        .iter()
        .filter_map(|c| project(c, camera))
        .map(|(u, v, _)| (u, v))
        .collect();
    if !projected.iter().any(|(u, v)| (0.0..w).contains(u) && (0.0..h).contains(v)) {
        return None;
    }
    let mut b = Box2d {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for (u, v) in projected {
        b.x_min = b.x_min.min(u);
        b.y_min = b.y_min.min(v);
        b.x_max = b.x_max.max(u);
        b.y_max = b.y_max.max(v);
    }
    b.x_min = b.x_min.clamp(0.0, w);
    b.x_max = b.x_max.clamp(0.0, w);
    b.y_min = b.y_min.clamp(0.0, h);
    b.y_max = b.y_max.clamp(0.0, h);
    Some(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityScale {
    /// Intensities divided by 255.
    #[default]
    Normalized,
    /// Raw 0–255 values.
    Raw,
}

/// Mean absolute RGB difference over covered pixels; `Ok(None)` when no
/// pixel is covered.
pub fn covered_l1(
    rgb: &[[u8; 3]],
    covered: &[bool],
    real: &RgbImage,
    width: u32,
    height: u32,
    scale: IntensityScale,
) -> Result<Option<f64>> {
    if real.width() != width || real.height() != height {
        return Err(Error::DimensionMismatch(format!(
            "render is {width}x{height}, real image is {}x{}",
            real.width(),
            real.height()
        )));
    }
    let mut sum = 0u64;
    let mut n = 0u64;
    for (i, px) in real.pixels().enumerate() {
        if !covered[i] {
            continue;
        }
        n += 1;
        for c in 0..3 {
            sum += (rgb[i][c] as i32 - px.0[c] as i32).unsigned_abs() as u64;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let mean = sum as f64 / (3 * n) as f64;
    Ok(Some(match scale {
        IntensityScale::Normalized => mean / 255.0,
        IntensityScale::Raw => mean,
    }))
}

/// Covered-pixel L1 in normalized intensity.
pub fn paired_l1(render: &RenderOutput, real: &RgbImage) -> Result<Option<f64>> {
    covered_l1(
        &render.rgb,
        &render.covered_mask(),
        real,
        render.width,
        render.height,
        IntensityScale::Normalized,
    )
}
