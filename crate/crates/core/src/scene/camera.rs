use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scaled orthographic camera: rotate, drop depth, scale, translate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakPerspectiveCamera {
    /// Pixels per scene unit.
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    /// Pixel offset.
    pub translation: [f64; 2],
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl WeakPerspectiveCamera {
    pub fn new(
        scale: f64,
        rotation: Matrix3<f64>,
        translation: [f64; 2],
        image_size: (usize, usize),
    ) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("camera scale must be positive, got {scale}")));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::invalid(format!(
                "camera rotation is not orthonormal (error {err:.2e})"
            )));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::invalid("camera image size must be positive"));
        }
        Ok(WeakPerspectiveCamera {
            scale,
            rotation,
            translation,
            image_size,
        })
    }

    /// Rotation from XYZ Euler angles in degrees (roll, pitch, yaw).
    pub fn from_euler_degrees(
        scale: f64,
        angles_deg: [f64; 3],
        translation: [f64; 2],
        image_size: (usize, usize),
    ) -> Result<Self> {
        let [rx, ry, rz] = angles_deg.map(f64::to_radians);
        let rot = Rotation3::from_euler_angles(rx, ry, rz);
        Self::new(scale, *rot.matrix(), translation, image_size)
    }

    pub fn project_point(&self, p: &[f64; 3]) -> ([f64; 2], f64) {
        let q = self.rotation * Vector3::from(*p);
        (
            [
                self.scale * q.x + self.translation[0],
                self.scale * q.y + self.translation[1],
            ],
            q.z,
        )
    }

    pub fn rotate(&self, v: &[f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::from(*v);
        [q.x, q.y, q.z]
    }
}

/// Project points to pixel coordinates and view-space depth.
pub fn project_weak_perspective(
    points: &[[f64; 3]],
    camera: &WeakPerspectiveCamera,
) -> (Vec<[f64; 2]>, Vec<f64>) {
    points.iter().map(|p| camera.project_point(p)).unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(scale: f64, t: [f64; 2]) -> WeakPerspectiveCamera {
        WeakPerspectiveCamera::new(scale, Matrix3::identity(), t, (64, 64)).unwrap()
    }

    #[test]
    fn identity_camera() {
        let (p, d) = project_weak_perspective(&[[3.0, 4.0, 5.0]], &cam(1.0, [0.0, 0.0]));
        assert_eq!(p[0], [3.0, 4.0]);
        assert_eq!(d[0], 5.0);
    }

    #[test]
    fn scaled_and_shifted() {
        let (p, d) = project_weak_perspective(&[[1.0, 2.0, 5.0]], &cam(2.0, [10.0, 20.0]));
        assert_eq!(p[0], [12.0, 24.0]);
        assert_eq!(d[0], 5.0);
    }

    #[test]
    fn doubling_scale_doubles_offsets() {
        let pts = [[0.3, -1.7, 2.0], [5.5, 0.25, -1.0]];
        let t = [7.0, -3.0];
        let (a, _) = project_weak_perspective(&pts, &cam(1.5, t));
        let (b, _) = project_weak_perspective(&pts, &cam(3.0, t));
        for (pa, pb) in a.iter().zip(&b) {
            for i in 0..2 {
                assert!(((pb[i] - t[i]) - 2.0 * (pa[i] - t[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_cameras() {
        assert!(WeakPerspectiveCamera::new(0.0, Matrix3::identity(), [0.0; 2], (8, 8)).is_err());
        assert!(WeakPerspectiveCamera::new(1.0, Matrix3::identity() * 2.0, [0.0; 2], (8, 8)).is_err());
    }
}
