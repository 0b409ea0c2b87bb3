//! skelact: a pipeline library for skeleton-based action recognition.
//!
//! Three stages, each usable on its own:
//!
//! 1. [`lifter`] — a two-stream residual fully-connected network that lifts
//!    2D body keypoints to 3D joint positions, trained with a Huber
//!    objective and evaluated by MPJPE.
//! 2. [`encoder`] — encodes a 3D pose sequence and its frame-to-frame
//!    motion into a single fixed-size color image.
//! 3. [`nas`] / [`recognizer`] — weight-sharing cell search over a small
//!    convolutional space, followed by training the derived architecture
//!    from scratch on the encoded images.
//!
//! [`data`] holds the pose types, file formats, split protocols and the
//! synthetic-action generator used as a verification oracle. Everything is
//! deterministic given explicit seeds; no operation consults ambient
//! entropy.

pub mod data;
pub mod encoder;
pub mod hash;
pub mod lifter;
pub mod nas;
pub mod nn;
pub mod opt;
pub mod recognizer;
