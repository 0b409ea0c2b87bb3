//! Encoded-image cache files: one record per sample under a header that
//! carries the encoder-config hash, so stale caches are rejected on load.
//!
//! ```text
//! spmfcache v1
//! config_hash <16 hex chars>
//! count <records>
//! data
//! <sample id> <label> <H> <W> <H*W*3 reals, row-major channel-interleaved>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;

use super::{EncoderConfig, EncoderError, SPMFImage};
use crate::hash::short_hash;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedImage {
    pub image: SPMFImage,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageCache {
    pub config_hash: String,
    pub entries: Vec<CachedImage>,
}

/// Hash an encoder config for cache tagging.
pub fn config_hash(config: &EncoderConfig) -> String {
    let canonical = format!(
        "h={} w={} colormap={:?} enhance={} motion_scale={}",
        config.output_height,
        config.output_width,
        config.colormap,
        config.enhance,
        config.motion_scale
    );
    short_hash(canonical.as_bytes())
}

pub fn write_image_cache(
    path: &Path,
    config: &EncoderConfig,
    entries: &[CachedImage],
) -> Result<(), EncoderError> {
    let mut out = String::from("spmfcache v1\n");
    let _ = writeln!(out, "config_hash {}", config_hash(config));
    let _ = writeln!(out, "count {}", entries.len());
    out.push_str("data\n");
    for entry in entries {
        let (h, w, _) = entry.image.pixels.dim();
        let _ = write!(
            out,
            "{} {} {} {}",
            entry.image.provenance, entry.label, h, w
        );
        for v in entry.image.pixels.iter() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a cache, rejecting it when the stored config hash does not match
/// the given config.
pub fn load_image_cache(path: &Path, config: &EncoderConfig) -> Result<ImageCache, EncoderError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("spmfcache v1") {
        return Err(EncoderError::Cache("bad cache header".into()));
    }
    let hash_line = lines
        .next()
        .ok_or_else(|| EncoderError::Cache("missing config hash".into()))?;
    let stored_hash = hash_line
        .strip_prefix("config_hash ")
        .ok_or_else(|| EncoderError::Cache("missing config hash".into()))?;
    let expected = config_hash(config);
    if stored_hash != expected {
        return Err(EncoderError::Cache(format!(
            "stale cache: config hash {stored_hash} != current {expected}"
        )));
    }
    let count_line = lines
        .next()
        .ok_or_else(|| EncoderError::Cache("missing count".into()))?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| EncoderError::Cache("bad count line".into()))?;
    if lines.next() != Some("data") {
        return Err(EncoderError::Cache("missing data separator".into()));
    }
    let mut entries = Vec::with_capacity(count);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields
            .next()
            .ok_or_else(|| EncoderError::Cache("missing sample id".into()))?;
        let label: usize = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| EncoderError::Cache("bad label".into()))?;
        let h: usize = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| EncoderError::Cache("bad height".into()))?;
        let w: usize = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| EncoderError::Cache("bad width".into()))?;
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EncoderError::Cache(format!("bad pixel value: {e}")))?;
        if values.len() != h * w * 3 {
            return Err(EncoderError::Cache(format!(
                "record '{id}' has {} values for {h}x{w}x3",
                values.len()
            )));
        }
        let pixels = Array3::from_shape_vec((h, w, 3), values)
            .map_err(|e| EncoderError::Cache(e.to_string()))?;
        entries.push(CachedImage {
            image: SPMFImage {
                pixels,
                provenance: id.to_string(),
            },
            label,
        });
    }
    if entries.len() != count {
        return Err(EncoderError::Cache(format!(
            "cache declares {count} records but holds {}",
            entries.len()
        )));
    }
    Ok(ImageCache {
        config_hash: stored_hash.to_string(),
        entries,
    })
}
