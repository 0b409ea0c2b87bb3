//! Pinhole camera model used by the synthetic-data oracle.

use super::types::{Pose2D, Pose3D, PoseSource};
use super::DataError;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    /// (f_x, f_y) in pixels.
    pub focal: [f64; 2],
    /// (c_x, c_y) in pixels.
    pub principal_point: [f64; 2],
    /// World-to-camera rotation, row major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation in mm.
    pub translation: [f64; 3],
}

impl CameraModel {
    pub fn new(
        focal: [f64; 2],
        principal_point: [f64; 2],
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    ) -> Result<Self, DataError> {
        if focal[0] <= 0.0 || focal[1] <= 0.0 {
            return Err(DataError::Camera("focal lengths must be positive".into()));
        }
        // R^T R must equal identity to 1e-9.
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return Err(DataError::Camera(format!(
                        "rotation not orthonormal: (R^T R)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        Ok(Self {
            focal,
            principal_point,
            rotation,
            translation,
        })
    }

    /// Axis-aligned camera at `translation` looking down +z.
    pub fn frontal(focal: [f64; 2], principal_point: [f64; 2], translation: [f64; 3]) -> Self {
        Self {
            focal,
            principal_point,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, row) in self.rotation.iter().enumerate() {
            out[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + self.translation[i];
        }
        out
    }
}

/// Pinhole projection of every joint: u = f_x*x/z + c_x, v = f_y*y/z + c_y
/// in camera coordinates. Joints at nonpositive depth are rejected.
pub fn project(pose: &Pose3D, cam: &CameraModel) -> Result<Pose2D, DataError> {
    let mut keypoints = Vec::with_capacity(pose.num_joints());
    for (idx, &joint) in pose.joints.iter().enumerate() {
        let c = cam.to_camera(joint);
        if c[2] <= 0.0 {
            return Err(DataError::Projection {
                joint: idx,
                depth: c[2],
            });
        }
        keypoints.push([
            cam.focal[0] * c[0] / c[2] + cam.principal_point[0],
            cam.focal[1] * c[1] / c[2] + cam.principal_point[1],
        ]);
    }
    Pose2D::new(keypoints, PoseSource::GroundTruth)
}
