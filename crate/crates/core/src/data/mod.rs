//! Pose data model: domain types, dataset files, schema registry, the
//! synthetic-action generator, and the train/test split protocols.

mod camera;
mod io;
mod schema;
mod split;
mod synth;
mod types;

pub use camera::{project, CameraModel};
pub use io::{
    load_pose_dataset, parse_pose_dataset, render_pose_dataset, write_pose_dataset, DatasetKind,
    DatasetMeta, PoseDataset,
};
pub use schema::{
    impute_detector_sequence, map_detector_pose, DetectorMapTerm, JointSchema, SchemaRegistry,
};
pub use split::{split_dataset, SplitProtocol, H36M_TEST_SUBJECTS, H36M_TRAIN_SUBJECTS};
pub use synth::{
    base_skeleton, class_mean_trajectory, generate_synthetic_actions, mean_bone_length,
    min_class_separation, synth_class_names, SynthConfig,
};
pub use types::{
    root_center, standardize_2d, Frames, LabeledSample, NormStats, Pose2D, Pose3D, PoseSequence,
    PoseSource, STD_FLOOR,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("camera error: {0}")]
    Camera(String),
    #[error("projection failed at joint {joint}: depth {depth} is not positive")]
    Projection { joint: usize, depth: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
