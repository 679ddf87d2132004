//! Pinhole camera model.
//!
//! Camera frame convention: x right, y down, z forward (optical axis).
//! Pixel `(col, row)` covers `[col, col+1) × [row, row+1)` in image
//! coordinates, so its center is at `(col + 0.5, row + 0.5)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::PoseSE3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Image coordinates of a camera-frame point, or `None` when `z <= min_depth`.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>, min_depth: f64) -> Option<(f64, f64, f64)> {
        if p.z <= min_depth {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        ))
    }

    /// Pixel containing image coordinate `(u, v)`, if inside the image.
    #[inline]
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(u32, u32)> {
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (col, row) = (u.floor(), v.floor());
        if col < self.width as f64 && row < self.height as f64 {
            Some((col as u32, row as u32))
        } else {
            None
        }
    }

    /// Unit-depth ray through the center of a pixel, in the camera frame.
    pub fn pixel_ray(&self, col: u32, row: u32) -> Vector3<f64> {
        Vector3::new(
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Resamples the intrinsics for a different output resolution.
    pub fn scaled_to(&self, width: u32, height: u32) -> Intrinsics {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// Camera-mount rotation taking camera axes (x right, y down, z forward) to
/// vehicle axes (x forward, y left, z up).
pub fn camera_to_vehicle_rotation() -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// Camera pose (camera→world) for a vehicle pose (vehicle→world), with the
/// camera at the vehicle origin looking along the vehicle's x axis.
pub fn camera_pose_from_vehicle(vehicle: &PoseSE3) -> PoseSE3 {
    PoseSE3 {
        rotation: vehicle.rotation * camera_to_vehicle_rotation(),
        translation: vehicle.translation,
    }
}

/// Inverse of [`camera_pose_from_vehicle`].
pub fn vehicle_pose_from_camera(camera: &PoseSE3) -> PoseSE3 {
    PoseSE3 {
        rotation: camera.rotation * camera_to_vehicle_rotation().transpose(),
        translation: camera.translation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics { fx: 100.0, fy: 100.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }

    #[test]
    fn principal_axis_projects_to_center() {
        let (u, v, z) = intr().project(&Vector3::new(0.0, 0.0, 5.0), 0.0).unwrap();
        assert_eq!((u, v, z), (320.0, 240.0, 5.0));
        assert_eq!(intr().pixel_of(u, v), Some((320, 240)));
    }

    #[test]
    fn off_axis_and_behind() {
        let (u, _, _) = intr().project(&Vector3::new(1.0, 0.0, 10.0), 0.0).unwrap();
        assert_eq!(u, 330.0);
        assert!(intr().project(&Vector3::new(0.0, 0.0, -1.0), 0.0).is_none());
        assert_eq!(intr().pixel_of(640.0, 10.0), None);
    }

    #[test]
    fn mount_round_trip() {
        let v = PoseSE3::from_yaw(0.4, Vector3::new(1.0, 2.0, 1.5));
        let c = camera_pose_from_vehicle(&v);
        c.validate().unwrap();
        // camera looks along the vehicle heading
        let fwd = c.transform_vector(&Vector3::z());
        assert!((fwd - Vector3::new(0.4f64.cos(), 0.4f64.sin(), 0.0)).norm() < 1e-12);
        let back = vehicle_pose_from_camera(&c);
        assert!((back.rotation - v.rotation).abs().max() < 1e-12);
    }
}
