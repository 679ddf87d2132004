//! Rigid transforms.
//!
//! A [`PoseSE3`] maps points from a local frame (sensor, camera, object) into
//! a parent frame (usually world): `p_parent = R * p_local + t`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise tolerance for `RᵀR = I` and `det R = 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 12]", into = "[f64; 12]")]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose after checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about the world z axis by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation,
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::new(axis_angle).matrix(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::Validation("pose has non-finite entries".into()));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if off > ORTHONORMAL_TOL {
            return Err(Error::Validation(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {off:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Validation(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(())
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Yaw of the local x axis expressed in the parent frame.
    pub fn heading(&self) -> f64 {
        let x = self.rotation.column(0);
        x[1].atan2(x[0])
    }

    /// Geodesic rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_log(&self.rotation).norm()
    }

    /// Row-major `[R | t]`.
    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_rows(rows: [f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(
            rows[0], rows[1], rows[2], rows[4], rows[5], rows[6], rows[8], rows[9], rows[10],
        );
        let translation = Vector3::new(rows[3], rows[7], rows[11]);
        Self::new(rotation, translation)
    }
}

impl TryFrom<[f64; 12]> for PoseSE3 {
    type Error = Error;

    fn try_from(rows: [f64; 12]) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<PoseSE3> for [f64; 12] {
    fn from(p: PoseSE3) -> Self {
        p.to_rows()
    }
}

/// Logarithm of a rotation matrix as an axis-angle vector `ω` (so that
/// `exp([ω]ₓ) = R`). `‖[ω]ₓ‖_F = √2·‖ω‖`.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) * 0.5;
    let sin = skew.norm();
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = sin.atan2(cos);
    if angle < 1e-12 {
        return skew;
    }
    if std::f64::consts::PI - angle > 1e-6 {
        return skew * (angle / sin);
    }
    // Near π the skew part vanishes; recover the axis from the symmetric part
    // (R + Rᵀ)/2 - cos·I = (1 - cos)·aaᵀ.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let (col, _) = (0..3)
        .map(|i| (i, sym[(i, i)]))
        .fold((0, f64::MIN), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
    let mut axis: Vector3<f64> = sym.column(col).into_owned();
    axis /= axis.norm();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

/// Frobenius norm of `log(R)`.
pub fn rotation_log_frobenius(r: &Matrix3<f64>) -> f64 {
    let w = rotation_log(r);
    let hat = Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0);
    hat.norm()
}
