//! Pose-sequence image encoding: a 3D sequence and its frame-to-frame
//! motion become one fixed-size color image. The pose map stacks per-joint
//! coordinates over time (min-max normalized per coordinate channel), the
//! motion map holds clamped scaled first differences, and the two are
//! concatenated, colormapped, bilinearly resized and contrast-enhanced.

mod cache;

pub use cache::{load_image_cache, write_image_cache, CachedImage, ImageCache};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PoseSequence;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("sequence too short: need at least {need} frames, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    /// Coordinate channels map directly to RGB.
    LinearRgb,
    /// Channel magnitude through the standard jet ramp.
    Jet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub output_height: usize,
    pub output_width: usize,
    pub colormap: Colormap,
    pub enhance: bool,
    /// Seconds; velocity v maps to 0.5 + motion_scale * v.
    pub motion_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            output_height: 32,
            output_width: 32,
            colormap: Colormap::LinearRgb,
            enhance: true,
            motion_scale: 0.05,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.output_height < 8 || self.output_width < 8 {
            return Err(EncoderError::Config(format!(
                "output size {}x{} below the 8-pixel minimum",
                self.output_height, self.output_width
            )));
        }
        if self.motion_scale <= 0.0 {
            return Err(EncoderError::Config(format!(
                "motion scale {} must be positive",
                self.motion_scale
            )));
        }
        Ok(())
    }
}

/// A fixed-size 3-channel encoding of one pose sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SPMFImage {
    /// (H, W, 3), values in [0, 1].
    pub pixels: Array3<f64>,
    /// Sample id this image encodes.
    pub provenance: String,
}

impl SPMFImage {
    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Joint-coordinate map: element (j, t, c) is coordinate c of joint j at
/// frame t, min-max normalized to [0, 1] per coordinate channel over the
/// whole sequence. Degenerate channels (max == min) map to 0.5.
pub fn pose_map(seq: &PoseSequence) -> Result<Array3<f64>, EncoderError> {
    let frames = seq.as_3d()?;
    let m = frames[0].num_joints();
    let t_len = frames.len();
    let mut out = Array3::zeros((m, t_len, 3));
    for c in 0..3 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for frame in frames {
            for joint in &frame.joints {
                lo = lo.min(joint[c]);
                hi = hi.max(joint[c]);
            }
        }
        let range = hi - lo;
        for (t, frame) in frames.iter().enumerate() {
            for (j, joint) in frame.joints.iter().enumerate() {
                out[[j, t, c]] = if range > 0.0 {
                    (joint[c] - lo) / range
                } else {
                    0.5
                };
            }
        }
    }
    Ok(out)
}

/// Motion map: element (j, t, c) = clamp(0.5 + motion_scale * velocity)
/// where velocity = (x[t+1] - x[t]) / frame_interval. Needs >= 2 frames.
pub fn motion_map(seq: &PoseSequence, motion_scale: f64) -> Result<Array3<f64>, EncoderError> {
    let frames = seq.as_3d()?;
    if frames.len() < 2 {
        return Err(EncoderError::TooShort {
            need: 2,
            got: frames.len(),
        });
    }
    let m = frames[0].num_joints();
    let t_len = frames.len() - 1;
    let frame_interval = 1.0 / seq.frame_rate;
    let mut out = Array3::zeros((m, t_len, 3));
    for t in 0..t_len {
        for j in 0..m {
            for c in 0..3 {
                let velocity = (frames[t + 1].joints[j][c] - frames[t].joints[j][c]) / frame_interval;
                out[[j, t, c]] = (0.5 + motion_scale * velocity).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// The standard jet ramp on a scalar in [0, 1].
fn jet(x: f64) -> [f64; 3] {
    let r = (1.5 - (4.0 * x - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * x - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * x - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Bilinear resize of an (h, w, 3) array to (out_h, out_w, 3).
fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, _) = src.dim();
    let mut out = Array3::zeros((out_h, out_w, 3));
    for oy in 0..out_h {
        // Align corners when the source has more than one row/column.
        let sy = if out_h > 1 && h > 1 {
            oy as f64 * (h - 1) as f64 / (out_h - 1) as f64
        } else {
            0.0
        };
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = if out_w > 1 && w > 1 {
                ox as f64 * (w - 1) as f64 / (out_w - 1) as f64
            } else {
                0.0
            };
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let top = src[[y0, x0, c]] * (1.0 - fx) + src[[y0, x1, c]] * fx;
                let bottom = src[[y1, x0, c]] * (1.0 - fx) + src[[y1, x1, c]] * fx;
                out[[oy, ox, c]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

const EQUALIZE_BINS: usize = 256;

/// Per-channel histogram equalization over 256 bins. Monotone and
/// rank-preserving; a constant channel is left unchanged.
pub fn enhance_contrast(img: &SPMFImage) -> SPMFImage {
    let (h, w, _) = img.pixels.dim();
    let total = (h * w) as f64;
    let mut out = img.pixels.clone();
    for c in 0..3 {
        let mut counts = [0usize; EQUALIZE_BINS];
        for y in 0..h {
            for x in 0..w {
                counts[bin_of(img.pixels[[y, x, c]])] += 1;
            }
        }
        let mut cdf = [0.0f64; EQUALIZE_BINS];
        let mut acc = 0usize;
        for (i, &count) in counts.iter().enumerate() {
            acc += count;
            cdf[i] = acc as f64 / total;
        }
        let cdf_min = counts
            .iter()
            .enumerate()
            .find(|(_, &count)| count > 0)
            .map(|(i, _)| cdf[i])
            .unwrap_or(0.0);
        if (1.0 - cdf_min).abs() < f64::EPSILON {
            // All mass in one bin: equalization is the identity.
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let v = img.pixels[[y, x, c]];
                out[[y, x, c]] = (cdf[bin_of(v)] - cdf_min) / (1.0 - cdf_min);
            }
        }
    }
    SPMFImage {
        pixels: out,
        provenance: img.provenance.clone(),
    }
}

fn bin_of(v: f64) -> usize {
    ((v * EQUALIZE_BINS as f64) as usize).min(EQUALIZE_BINS - 1)
}

/// Encode a root-centered 3D sequence into one color image: pose map over
/// motion map (the motion map right-padded by repeating its last column),
/// colormap, bilinear resize to (H, W), optional contrast enhancement.
pub fn encode(seq: &PoseSequence, config: &EncoderConfig) -> Result<SPMFImage, EncoderError> {
    encode_with_id(seq, config, "")
}

pub fn encode_with_id(
    seq: &PoseSequence,
    config: &EncoderConfig,
    sample_id: &str,
) -> Result<SPMFImage, EncoderError> {
    config.validate()?;
    let poses = pose_map(seq)?;
    let motion = motion_map(seq, config.motion_scale)?;
    let (m, t_len, _) = poses.dim();

    // Stack pose rows over motion rows; pad motion to width T by repeating
    // its last column.
    let mut stacked = Array3::zeros((2 * m, t_len, 3));
    for j in 0..m {
        for t in 0..t_len {
            for c in 0..3 {
                stacked[[j, t, c]] = poses[[j, t, c]];
                let mt = t.min(t_len - 2);
                stacked[[m + j, t, c]] = motion[[j, mt, c]];
            }
        }
    }

    let colored = match config.colormap {
        Colormap::LinearRgb => stacked,
        Colormap::Jet => {
            let (rows, cols, _) = stacked.dim();
            let mut out = Array3::zeros((rows, cols, 3));
            for y in 0..rows {
                for x in 0..cols {
                    let v = stacked[[y, x, 0]] * stacked[[y, x, 0]]
                        + stacked[[y, x, 1]] * stacked[[y, x, 1]]
                        + stacked[[y, x, 2]] * stacked[[y, x, 2]];
                    let magnitude = (v / 3.0).sqrt();
                    let rgb = jet(magnitude);
                    for c in 0..3 {
                        out[[y, x, c]] = rgb[c];
                    }
                }
            }
            out
        }
    };

    let resized = resize_bilinear(&colored, config.output_height, config.output_width);
    let image = SPMFImage {
        pixels: resized,
        provenance: sample_id.to_string(),
    };
    Ok(if config.enhance {
        enhance_contrast(&image)
    } else {
        image
    })
}
