//! Pose and sample types shared across the pipeline.

use serde::{Deserialize, Serialize};

use super::DataError;

/// Where a set of 2D keypoints came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    GroundTruth,
    Detector,
}

/// Per-frame 2D keypoints in detector (pixel) space.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    /// N keypoints, each (u, v) in pixels.
    pub keypoints: Vec<[f64; 2]>,
    /// Optional per-keypoint confidence in [0, 1].
    pub confidence: Option<Vec<f64>>,
    pub source: PoseSource,
}

impl Pose2D {
    pub fn new(keypoints: Vec<[f64; 2]>, source: PoseSource) -> Result<Self, DataError> {
        let pose = Self {
            keypoints,
            confidence: None,
            source,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn with_confidence(mut self, confidence: Vec<f64>) -> Result<Self, DataError> {
        if confidence.len() != self.keypoints.len() {
            return Err(DataError::Shape(format!(
                "confidence length {} != keypoint count {}",
                confidence.len(),
                self.keypoints.len()
            )));
        }
        if confidence.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(DataError::Shape("confidence outside [0, 1]".into()));
        }
        self.confidence = Some(confidence);
        Ok(self)
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    /// Keypoints flattened to (u0, v0, u1, v1, ...).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.keypoints.len());
        for kp in &self.keypoints {
            out.push(kp[0]);
            out.push(kp[1]);
        }
        out
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.keypoints.iter().any(|kp| !kp[0].is_finite() || !kp[1].is_finite()) {
            return Err(DataError::Shape("non-finite 2D coordinate".into()));
        }
        Ok(())
    }
}

/// Per-frame 3D joints in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    /// M joints, each (x, y, z) in mm.
    pub joints: Vec<[f64; 3]>,
    /// Index of the root joint (pelvis).
    pub root_index: usize,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>, root_index: usize) -> Result<Self, DataError> {
        if root_index >= joints.len() {
            return Err(DataError::Shape(format!(
                "root index {} out of range for {} joints",
                root_index,
                joints.len()
            )));
        }
        let pose = Self { joints, root_index };
        if pose
            .joints
            .iter()
            .any(|j| j.iter().any(|v| !v.is_finite()))
        {
            return Err(DataError::Shape("non-finite 3D coordinate".into()));
        }
        Ok(pose)
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Joints flattened to (x0, y0, z0, x1, ...).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.joints.len());
        for j in &self.joints {
            out.extend_from_slice(j);
        }
        out
    }

    pub fn from_flat(values: &[f64], root_index: usize) -> Result<Self, DataError> {
        if values.len() % 3 != 0 {
            return Err(DataError::Shape(format!(
                "flat 3D pose length {} not divisible by 3",
                values.len()
            )));
        }
        let joints = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(joints, root_index)
    }
}

/// Translate a pose so its root joint sits at the origin. Idempotent.
pub fn root_center(pose: &Pose3D) -> Pose3D {
    let root = pose.joints[pose.root_index];
    let joints = pose
        .joints
        .iter()
        .map(|j| [j[0] - root[0], j[1] - root[1], j[2] - root[2]])
        .collect();
    Pose3D {
        joints,
        root_index: pose.root_index,
    }
}

/// Frames of a pose sequence: either all 2D or all 3D.
#[derive(Debug, Clone, PartialEq)]
pub enum Frames {
    D2(Vec<Pose2D>),
    D3(Vec<Pose3D>),
}

/// An ordered pose sequence at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: Frames,
    /// Hz.
    pub frame_rate: f64,
}

impl PoseSequence {
    pub fn from_3d(frames: Vec<Pose3D>, frame_rate: f64) -> Result<Self, DataError> {
        if frames.is_empty() {
            return Err(DataError::Shape("empty pose sequence".into()));
        }
        let m = frames[0].num_joints();
        if frames.iter().any(|f| f.num_joints() != m) {
            return Err(DataError::Shape("inconsistent joint count across frames".into()));
        }
        Ok(Self {
            frames: Frames::D3(frames),
            frame_rate,
        })
    }

    pub fn from_2d(frames: Vec<Pose2D>, frame_rate: f64) -> Result<Self, DataError> {
        if frames.is_empty() {
            return Err(DataError::Shape("empty pose sequence".into()));
        }
        let n = frames[0].num_keypoints();
        if frames.iter().any(|f| f.num_keypoints() != n) {
            return Err(DataError::Shape(
                "inconsistent keypoint count across frames".into(),
            ));
        }
        Ok(Self {
            frames: Frames::D2(frames),
            frame_rate,
        })
    }

    pub fn len(&self) -> usize {
        match &self.frames {
            Frames::D2(f) => f.len(),
            Frames::D3(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joint_count(&self) -> usize {
        match &self.frames {
            Frames::D2(f) => f[0].num_keypoints(),
            Frames::D3(f) => f[0].num_joints(),
        }
    }

    pub fn as_3d(&self) -> Result<&[Pose3D], DataError> {
        match &self.frames {
            Frames::D3(f) => Ok(f),
            Frames::D2(_) => Err(DataError::Shape("expected a 3D sequence".into())),
        }
    }

    pub fn as_2d(&self) -> Result<&[Pose2D], DataError> {
        match &self.frames {
            Frames::D2(f) => Ok(f),
            Frames::D3(_) => Err(DataError::Shape("expected a 2D sequence".into())),
        }
    }
}

/// A pose sequence with its action label and subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub sequence: PoseSequence,
    pub label: usize,
    pub subject: usize,
    pub split_tag: Option<String>,
}

impl LabeledSample {
    pub fn tagged(&self, tag: &str) -> Self {
        let mut s = self.clone();
        s.split_tag = Some(tag.to_string());
        s
    }
}

/// Per-coordinate standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this floor are clamped to it.
pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Identity statistics (mean 0, std 1) of the given dimension.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit mean/std per coordinate over a set of flat vectors. Standard
    /// deviations are floored at [`STD_FLOOR`].
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Shape("cannot fit stats on an empty set".into()));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DataError::Shape("inconsistent row lengths in stats fit".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, flat: &[f64]) -> Result<Vec<f64>, DataError> {
        if flat.len() != self.dim() {
            return Err(DataError::Shape(format!(
                "vector length {} != stats dimension {}",
                flat.len(),
                self.dim()
            )));
        }
        Ok(flat
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect())
    }

    pub fn destandardize(&self, flat: &[f64]) -> Result<Vec<f64>, DataError> {
        if flat.len() != self.dim() {
            return Err(DataError::Shape(format!(
                "vector length {} != stats dimension {}",
                flat.len(),
                self.dim()
            )));
        }
        Ok(flat
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, &m), &s)| v * s + m)
            .collect())
    }
}

/// Standardize a 2D pose against training statistics: output[i] =
/// (flatten(pose)[i] - mean[i]) / std[i].
pub fn standardize_2d(pose: &Pose2D, stats: &NormStats) -> Result<Vec<f64>, DataError> {
    stats.standardize(&pose.flatten())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose3(coords: &[[f64; 3]]) -> Pose3D {
        Pose3D::new(coords.to_vec(), 0).unwrap()
    }

    #[test]
    fn root_center_moves_root_to_origin() {
        let p = pose3(&[[10.0, 20.0, 30.0], [11.0, 22.0, 33.0]]);
        let c = root_center(&p);
        assert_eq!(c.joints[0], [0.0, 0.0, 0.0]);
        assert_eq!(c.joints[1], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn root_center_identity_when_already_centered() {
        let p = pose3(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert_eq!(root_center(&p), p);
    }

    #[test]
    fn root_center_is_idempotent() {
        let p = pose3(&[[5.0, -3.0, 2.0], [8.0, 1.0, -4.0], [0.5, 0.5, 0.5]]);
        let once = root_center(&p);
        let twice = root_center(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn standardize_pose_equal_to_mean_is_zero() {
        let pose = Pose2D::new(vec![[3.0, 4.0], [5.0, 6.0]], PoseSource::GroundTruth).unwrap();
        let stats = NormStats {
            mean: vec![3.0, 4.0, 5.0, 6.0],
            std: vec![2.0, 2.0, 2.0, 2.0],
        };
        assert_eq!(standardize_2d(&pose, &stats).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn standardize_identity_stats_is_flatten() {
        let pose = Pose2D::new(vec![[3.0, 4.0], [5.0, 6.0]], PoseSource::Detector).unwrap();
        let stats = NormStats::identity(4);
        assert_eq!(standardize_2d(&pose, &stats).unwrap(), pose.flatten());
    }

    #[test]
    fn standardize_matches_elementwise_formula() {
        let pose = Pose2D::new(vec![[1.5, -2.0], [0.25, 9.0]], PoseSource::GroundTruth).unwrap();
        let stats = NormStats {
            mean: vec![0.1, -0.2, 0.3, 4.0],
            std: vec![1.1, 2.2, 0.4, 3.0],
        };
        let got = standardize_2d(&pose, &stats).unwrap();
        let flat = pose.flatten();
        for i in 0..4 {
            let expect = (flat[i] - stats.mean[i]) / stats.std[i];
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_dimension_mismatch_errors() {
        let pose = Pose2D::new(vec![[1.0, 2.0]], PoseSource::GroundTruth).unwrap();
        let stats = NormStats::identity(6);
        assert!(standardize_2d(&pose, &stats).is_err());
    }

    #[test]
    fn standardize_roundtrip() {
        let stats = NormStats {
            mean: vec![1.0, -2.0, 0.5],
            std: vec![3.0, 0.1, 2.0],
        };
        let x = vec![4.2, -1.9, 7.5];
        let z = stats.standardize(&x).unwrap();
        let back = stats.destandardize(&z).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stats_fit_floors_std() {
        let rows = vec![vec![2.0, 5.0], vec![2.0, 7.0]];
        let stats = NormStats::fit(&rows).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        assert!((stats.mean[1] - 6.0).abs() < 1e-12);
    }
}
