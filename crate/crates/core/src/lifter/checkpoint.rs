//! Versioned lifter checkpoints: a JSON container with the architecture,
//! every array (declared shape, row-major data), the standardization
//! statistics, and an echo of the training config. Loading rejects any
//! version other than [`CHECKPOINT_VERSION`].

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{
    BatchNorm1d, LifterArchitecture, LifterError, LifterParams, Linear, ResidualBlock,
    StreamParams,
};
use crate::data::NormStats;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    arch: LifterArchitecture,
    root_index: usize,
    gt_input_stats: NormStats,
    det_input_stats: NormStats,
    output_stats: NormStats,
    config: serde_json::Value,
    arrays: BTreeMap<String, ArrayEntry>,
}

fn put2(map: &mut BTreeMap<String, ArrayEntry>, key: &str, a: &Array2<f64>) {
    map.insert(
        key.to_string(),
        ArrayEntry {
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        },
    );
}

fn put1(map: &mut BTreeMap<String, ArrayEntry>, key: &str, a: &Array1<f64>) {
    map.insert(
        key.to_string(),
        ArrayEntry {
            shape: vec![a.len()],
            data: a.to_vec(),
        },
    );
}

fn stream_arrays(prefix: &str, s: &StreamParams, map: &mut BTreeMap<String, ArrayEntry>) {
    put2(map, &format!("{prefix}.input.w"), &s.input.w);
    put1(map, &format!("{prefix}.input.b"), &s.input.b);
    for (i, block) in s.blocks.iter().enumerate() {
        let p = format!("{prefix}.block{i}");
        put2(map, &format!("{p}.lin1.w"), &block.lin1.w);
        put1(map, &format!("{p}.lin1.b"), &block.lin1.b);
        put1(map, &format!("{p}.bn1.gamma"), &block.bn1.gamma);
        put1(map, &format!("{p}.bn1.beta"), &block.bn1.beta);
        put1(map, &format!("{p}.bn1.running_mean"), &block.bn1.running_mean);
        put1(map, &format!("{p}.bn1.running_var"), &block.bn1.running_var);
        put2(map, &format!("{p}.lin2.w"), &block.lin2.w);
        put1(map, &format!("{p}.lin2.b"), &block.lin2.b);
        put1(map, &format!("{p}.bn2.gamma"), &block.bn2.gamma);
        put1(map, &format!("{p}.bn2.beta"), &block.bn2.beta);
        put1(map, &format!("{p}.bn2.running_mean"), &block.bn2.running_mean);
        put1(map, &format!("{p}.bn2.running_var"), &block.bn2.running_var);
    }
    put2(map, &format!("{prefix}.output.w"), &s.output.w);
    put1(map, &format!("{prefix}.output.b"), &s.output.b);
}

pub fn save_checkpoint(
    path: &Path,
    params: &LifterParams,
    config_echo: &serde_json::Value,
) -> Result<(), LifterError> {
    let mut arrays = BTreeMap::new();
    stream_arrays("gt", &params.gt, &mut arrays);
    stream_arrays("det", &params.det, &mut arrays);
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        arch: params.arch,
        root_index: params.root_index,
        gt_input_stats: params.gt_input_stats.clone(),
        det_input_stats: params.det_input_stats.clone(),
        output_stats: params.output_stats.clone(),
        config: config_echo.clone(),
        arrays,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

struct ArrayReader<'a> {
    map: &'a BTreeMap<String, ArrayEntry>,
}

impl<'a> ArrayReader<'a> {
    fn get2(&self, key: &str) -> Result<Array2<f64>, LifterError> {
        let entry = self
            .map
            .get(key)
            .ok_or_else(|| LifterError::Checkpoint(format!("missing array '{key}'")))?;
        if entry.shape.len() != 2 || entry.shape[0] * entry.shape[1] != entry.data.len() {
            return Err(LifterError::Checkpoint(format!("bad shape for '{key}'")));
        }
        Array2::from_shape_vec((entry.shape[0], entry.shape[1]), entry.data.clone())
            .map_err(|e| LifterError::Checkpoint(format!("array '{key}': {e}")))
    }

    fn get1(&self, key: &str) -> Result<Array1<f64>, LifterError> {
        let entry = self
            .map
            .get(key)
            .ok_or_else(|| LifterError::Checkpoint(format!("missing array '{key}'")))?;
        if entry.shape.len() != 1 || entry.shape[0] != entry.data.len() {
            return Err(LifterError::Checkpoint(format!("bad shape for '{key}'")));
        }
        Ok(Array1::from_vec(entry.data.clone()))
    }
}

fn read_stream(
    prefix: &str,
    arch: &LifterArchitecture,
    reader: &ArrayReader,
) -> Result<StreamParams, LifterError> {
    let mut blocks = Vec::with_capacity(arch.num_blocks);
    for i in 0..arch.num_blocks {
        let p = format!("{prefix}.block{i}");
        blocks.push(ResidualBlock {
            lin1: Linear {
                w: reader.get2(&format!("{p}.lin1.w"))?,
                b: reader.get1(&format!("{p}.lin1.b"))?,
            },
            bn1: BatchNorm1d {
                gamma: reader.get1(&format!("{p}.bn1.gamma"))?,
                beta: reader.get1(&format!("{p}.bn1.beta"))?,
                running_mean: reader.get1(&format!("{p}.bn1.running_mean"))?,
                running_var: reader.get1(&format!("{p}.bn1.running_var"))?,
            },
            lin2: Linear {
                w: reader.get2(&format!("{p}.lin2.w"))?,
                b: reader.get1(&format!("{p}.lin2.b"))?,
            },
            bn2: BatchNorm1d {
                gamma: reader.get1(&format!("{p}.bn2.gamma"))?,
                beta: reader.get1(&format!("{p}.bn2.beta"))?,
                running_mean: reader.get1(&format!("{p}.bn2.running_mean"))?,
                running_var: reader.get1(&format!("{p}.bn2.running_var"))?,
            },
        });
    }
    Ok(StreamParams {
        input: Linear {
            w: reader.get2(&format!("{prefix}.input.w"))?,
            b: reader.get1(&format!("{prefix}.input.b"))?,
        },
        blocks,
        output: Linear {
            w: reader.get2(&format!("{prefix}.output.w"))?,
            b: reader.get1(&format!("{prefix}.output.b"))?,
        },
    })
}

/// Load a checkpoint; returns the parameters and the config echo it was
/// saved with.
pub fn load_checkpoint(path: &Path) -> Result<(LifterParams, serde_json::Value), LifterError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(LifterError::Checkpoint(format!(
            "checkpoint version {} unsupported (expected {})",
            file.version, CHECKPOINT_VERSION
        )));
    }
    file.arch.validate()?;
    let reader = ArrayReader { map: &file.arrays };
    let params = LifterParams {
        arch: file.arch,
        gt: read_stream("gt", &file.arch, &reader)?,
        det: read_stream("det", &file.arch, &reader)?,
        gt_input_stats: file.gt_input_stats,
        det_input_stats: file.det_input_stats,
        output_stats: file.output_stats,
        root_index: file.root_index,
    };
    // Shape consistency against the declared architecture.
    if params.gt.input.w.dim() != (file.arch.hidden_width, file.arch.input_dim)
        || params.gt.output.w.dim() != (file.arch.output_dim, file.arch.hidden_width)
    {
        return Err(LifterError::Checkpoint(
            "array shapes inconsistent with architecture".into(),
        ));
    }
    Ok((params, file.config))
}
