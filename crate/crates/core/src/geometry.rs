//! Small rigid-body helpers shared by the perception and control stages.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn v(a: Vec3) -> Vector3<f64> {
    Vector3::from(a)
}

pub fn arr(a: &Vector3<f64>) -> Vec3 {
    [a.x, a.y, a.z]
}

/// Rotation from roll-pitch-yaw (fixed-axis x, then y, then z).
pub fn rpy_matrix(rpy: Vec3) -> Matrix3<f64> {
    Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]).into_inner()
}

/// `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }
}

impl RigidTransform {
    pub fn from_parts(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        RigidTransform {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: arr(t),
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    /// Rejects matrices that are not proper rotations.
    pub fn validate(&self) -> Result<()> {
        let r = self.matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !r.iter().chain(self.translation.iter()).all(|x| x.is_finite()) || err > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::invalid("transform rotation is not orthonormal"));
        }
        Ok(())
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        arr(&(self.matrix() * v(p) + v(self.translation)))
    }

    pub fn apply_vector(&self, d: Vec3) -> Vec3 {
        arr(&(self.matrix() * v(d)))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.matrix().transpose();
        Self::from_parts(&rt, &(-(rt * v(self.translation))))
    }
}

/// Camera-to-world pose for a camera at `eye` looking at `target`.
///
/// Camera axes: +z forward, +x right, +y down in the image.
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<RigidTransform> {
    let z = v(target) - v(eye);
    if z.norm() < 1e-12 {
        return Err(Error::invalid("camera eye and target coincide"));
    }
    let z = z.normalize();
    let x = z.cross(&v(up));
    if x.norm() < 1e-9 {
        return Err(Error::invalid("camera up vector is parallel to the view direction"));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_columns(&[x, y, z]);
    Ok(RigidTransform::from_parts(&r, &v(eye)))
}
