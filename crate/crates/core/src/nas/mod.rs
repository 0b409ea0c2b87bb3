//! Weight-sharing cell search: a recurrent controller samples
//! normal/reduction cell genotypes, a shared-parameter supernet scores
//! them, and policy-gradient updates steer the controller toward cells
//! that classify encoded pose images well.

mod controller;
mod ops;
mod search;
mod supernet;

pub use controller::{
    controller_epoch, genotype_log_prob, genotype_step_probs, init_controller, sample_genotype,
    ControllerConfig, ControllerState, SampleMode,
};
pub use ops::{BatchNorm2d, OpId, SepConvParams};
pub use search::{derive_best_genotype, run_search, SearchConfig, SearchHistory};
pub use supernet::{
    init_standalone, init_supernet, supernet_backward, supernet_forward, train_shared_epoch,
    CellKind, ClassifierParams, GradStore, NetMode, OpKey, ParamStore, Scope, Scoping,
    SharedOptConfig, SharedOptState, Slot, StemParams, SEARCH_LAYOUT,
};
pub(crate) use supernet::{apply_bn_sites, supernet_backward_full};

use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{CachedImage, SPMFImage};

#[derive(Debug, Error)]
pub enum NasError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("genotype error: {0}")]
    Genotype(String),
    #[error("learning-rate step {step} outside [0, {total}]")]
    LrStep { step: usize, total: usize },
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The micro search space: B nodes per cell drawing from a fixed op list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub nodes_per_cell: usize,
    pub ops: Vec<OpId>,
    pub stem_channels: usize,
}

impl SearchSpace {
    pub fn standard(nodes_per_cell: usize, stem_channels: usize) -> Self {
        Self {
            nodes_per_cell,
            ops: vec![
                OpId::Identity,
                OpId::SepConv3x3,
                OpId::SepConv5x5,
                OpId::AvgPool3x3,
                OpId::MaxPool3x3,
            ],
            stem_channels,
        }
    }

    pub fn validate(&self) -> Result<(), NasError> {
        if self.nodes_per_cell < 2 {
            return Err(NasError::Config(format!(
                "need at least 2 nodes per cell, got {}",
                self.nodes_per_cell
            )));
        }
        if self.ops.is_empty() {
            return Err(NasError::Config("empty op list".into()));
        }
        if self.stem_channels == 0 {
            return Err(NasError::Config("stem channels must be positive".into()));
        }
        Ok(())
    }
}

/// One node of a cell: two inputs (0/1 are the cell inputs, 2+i is node i)
/// and the op applied to each; the node output is the sum of the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeGene {
    pub input_a: usize,
    pub op_a: OpId,
    pub input_b: usize,
    pub op_b: OpId,
}

/// Discrete description of the normal and reduction cells.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellGenotype {
    pub normal: Vec<NodeGene>,
    pub reduction: Vec<NodeGene>,
}

impl CellGenotype {
    pub fn cell(&self, kind: CellKind) -> &[NodeGene] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        }
    }

    /// Check DAG indices and op membership against a search space.
    pub fn validate(&self, space: &SearchSpace) -> Result<(), NasError> {
        for (name, nodes) in [("normal", &self.normal), ("reduction", &self.reduction)] {
            if nodes.len() != space.nodes_per_cell {
                return Err(NasError::Genotype(format!(
                    "{name} cell has {} nodes, space wants {}",
                    nodes.len(),
                    space.nodes_per_cell
                )));
            }
            for (k, node) in nodes.iter().enumerate() {
                for (input, op) in [(node.input_a, node.op_a), (node.input_b, node.op_b)] {
                    if input >= k + 2 {
                        return Err(NasError::Genotype(format!(
                            "{name} node {k} reads input {input}, limit {}",
                            k + 2
                        )));
                    }
                    if !space.ops.contains(&op) {
                        return Err(NasError::Genotype(format!(
                            "{name} node {k} uses {op} which is not in the space"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Indices of loose-end nodes (not consumed by any later node); their
    /// outputs concatenate into the cell output.
    pub fn loose_ends(&self, kind: CellKind) -> Vec<usize> {
        let nodes = self.cell(kind);
        let mut used = vec![false; nodes.len()];
        for (k, node) in nodes.iter().enumerate() {
            for input in [node.input_a, node.input_b] {
                if input >= 2 {
                    debug_assert!(input - 2 < k);
                    used[input - 2] = true;
                }
            }
        }
        (0..nodes.len()).filter(|&i| !used[i]).collect()
    }
}

/// Cosine annealing: lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi step/total)).
pub fn cosine_lr(
    step: usize,
    total_steps: usize,
    lr_max: f64,
    lr_min: f64,
) -> Result<f64, NasError> {
    if step > total_steps {
        return Err(NasError::LrStep {
            step,
            total: total_steps,
        });
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let ratio = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * ratio).cos()))
}

/// Labeled encoded images, the working set for search and recognition.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub images: Vec<SPMFImage>,
    pub labels: Vec<usize>,
    pub tags: Vec<Option<String>>,
    pub num_classes: usize,
}

impl EncodedDataset {
    pub fn from_cache(entries: &[CachedImage], num_classes: usize) -> Self {
        Self {
            images: entries.iter().map(|e| e.image.clone()).collect(),
            labels: entries.iter().map(|e| e.label).collect(),
            tags: vec![None; entries.len()],
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            tags: idx.iter().map(|&i| self.tags[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn has_test_tag(&self) -> bool {
        self.tags.iter().any(|t| t.as_deref() == Some("test"))
    }

    /// Pack images `idx` into an NCHW batch.
    pub fn batch(&self, idx: &[usize]) -> (Array4<f64>, Vec<usize>) {
        assert!(!idx.is_empty());
        let (h, w, _) = self.images[idx[0]].pixels.dim();
        let mut x = Array4::zeros((idx.len(), 3, h, w));
        for (b, &i) in idx.iter().enumerate() {
            let img = &self.images[i].pixels;
            for c in 0..3 {
                for y in 0..h {
                    for xx in 0..w {
                        x[[b, c, y, xx]] = img[[y, xx, c]];
                    }
                }
            }
        }
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Write a genotype file: search-space descriptor, node lists in fixed
/// order, and provenance, so files diff cleanly.
pub fn write_genotype(
    path: &Path,
    genotype: &CellGenotype,
    space: &SearchSpace,
    seed: u64,
    config_hash: &str,
) -> Result<(), NasError> {
    std::fs::write(path, render_genotype(genotype, space, seed, config_hash))?;
    Ok(())
}

pub fn render_genotype(
    genotype: &CellGenotype,
    space: &SearchSpace,
    seed: u64,
    config_hash: &str,
) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("genotype v1\n");
    let ops: Vec<String> = space.ops.iter().map(|o| o.to_string()).collect();
    let _ = writeln!(
        out,
        "space nodes={} stem_channels={} ops={}",
        space.nodes_per_cell,
        space.stem_channels,
        ops.join(",")
    );
    for (name, nodes) in [("normal", &genotype.normal), ("reduction", &genotype.reduction)] {
        for (k, node) in nodes.iter().enumerate() {
            let _ = writeln!(
                out,
                "{name} {k} in_a={} op_a={} in_b={} op_b={}",
                node.input_a, node.op_a, node.input_b, node.op_b
            );
        }
    }
    let _ = writeln!(out, "provenance seed={seed} config_hash={config_hash}");
    out
}

pub fn load_genotype(path: &Path) -> Result<(CellGenotype, SearchSpace), NasError> {
    let text = std::fs::read_to_string(path)?;
    parse_genotype(&text)
}

pub fn parse_genotype(text: &str) -> Result<(CellGenotype, SearchSpace), NasError> {
    let mut lines = text.lines();
    if lines.next() != Some("genotype v1") {
        return Err(NasError::Genotype("bad genotype header".into()));
    }
    let space_line = lines
        .next()
        .ok_or_else(|| NasError::Genotype("missing space line".into()))?;
    let rest = space_line
        .strip_prefix("space ")
        .ok_or_else(|| NasError::Genotype("missing space descriptor".into()))?;
    let mut nodes_per_cell = None;
    let mut stem_channels = None;
    let mut ops = Vec::new();
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| NasError::Genotype(format!("bad space field '{field}'")))?;
        match key {
            "nodes" => {
                nodes_per_cell = Some(
                    value
                        .parse()
                        .map_err(|_| NasError::Genotype(format!("bad node count '{value}'")))?,
                )
            }
            "stem_channels" => {
                stem_channels = Some(value.parse().map_err(|_| {
                    NasError::Genotype(format!("bad stem channels '{value}'"))
                })?)
            }
            "ops" => {
                for name in value.split(',') {
                    ops.push(OpId::parse(name)?);
                }
            }
            other => return Err(NasError::Genotype(format!("unknown space field '{other}'"))),
        }
    }
    let space = SearchSpace {
        nodes_per_cell: nodes_per_cell
            .ok_or_else(|| NasError::Genotype("space missing node count".into()))?,
        ops,
        stem_channels: stem_channels
            .ok_or_else(|| NasError::Genotype("space missing stem channels".into()))?,
    };
    let mut normal = Vec::new();
    let mut reduction = Vec::new();
    for line in lines {
        if line.starts_with("provenance ") || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let kind = fields
            .next()
            .ok_or_else(|| NasError::Genotype("empty node line".into()))?;
        let index: usize = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| NasError::Genotype(format!("bad node index in '{line}'")))?;
        let mut input_a = None;
        let mut op_a = None;
        let mut input_b = None;
        let mut op_b = None;
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| NasError::Genotype(format!("bad node field '{field}'")))?;
            match key {
                "in_a" => input_a = value.parse().ok(),
                "op_a" => op_a = Some(OpId::parse(value)?),
                "in_b" => input_b = value.parse().ok(),
                "op_b" => op_b = Some(OpId::parse(value)?),
                other => {
                    return Err(NasError::Genotype(format!("unknown node field '{other}'")))
                }
            }
        }
        let node = NodeGene {
            input_a: input_a
                .ok_or_else(|| NasError::Genotype(format!("node line '{line}' missing in_a")))?,
            op_a: op_a
                .ok_or_else(|| NasError::Genotype(format!("node line '{line}' missing op_a")))?,
            input_b: input_b
                .ok_or_else(|| NasError::Genotype(format!("node line '{line}' missing in_b")))?,
            op_b: op_b
                .ok_or_else(|| NasError::Genotype(format!("node line '{line}' missing op_b")))?,
        };
        let target = match kind {
            "normal" => &mut normal,
            "reduction" => &mut reduction,
            other => return Err(NasError::Genotype(format!("unknown cell kind '{other}'"))),
        };
        if target.len() != index {
            return Err(NasError::Genotype(format!("{kind} node {index} out of order")));
        }
        target.push(node);
    }
    let genotype = CellGenotype { normal, reduction };
    genotype.validate(&space)?;
    Ok((genotype, space))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_genotype() -> (CellGenotype, SearchSpace) {
        let space = SearchSpace::standard(3, 4);
        let node = |a: usize, oa: OpId, b: usize, ob: OpId| NodeGene {
            input_a: a,
            op_a: oa,
            input_b: b,
            op_b: ob,
        };
        let genotype = CellGenotype {
            normal: vec![
                node(0, OpId::SepConv3x3, 1, OpId::Identity),
                node(2, OpId::AvgPool3x3, 0, OpId::SepConv5x5),
                node(1, OpId::MaxPool3x3, 3, OpId::Identity),
            ],
            reduction: vec![
                node(0, OpId::MaxPool3x3, 1, OpId::SepConv3x3),
                node(1, OpId::Identity, 2, OpId::AvgPool3x3),
                node(0, OpId::SepConv5x5, 2, OpId::Identity),
            ],
        };
        (genotype, space)
    }

    #[test]
    fn cosine_lr_endpoints_and_midpoint() {
        assert!((cosine_lr(0, 100, 0.05, 0.001).unwrap() - 0.05).abs() < 1e-15);
        assert!((cosine_lr(100, 100, 0.05, 0.001).unwrap() - 0.001).abs() < 1e-15);
        let mid = cosine_lr(50, 100, 0.05, 0.001).unwrap();
        assert!((mid - (0.05 + 0.001) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_lr_monotone_nonincreasing() {
        let mut last = f64::INFINITY;
        for step in 0..=200 {
            let lr = cosine_lr(step, 200, 0.1, 0.0).unwrap();
            assert!(lr <= last + 1e-15);
            last = lr;
        }
    }

    #[test]
    fn cosine_lr_rejects_out_of_range() {
        assert!(cosine_lr(11, 10, 0.1, 0.0).is_err());
    }

    #[test]
    fn genotype_validation() {
        let (genotype, space) = toy_genotype();
        genotype.validate(&space).unwrap();
        let mut bad = genotype.clone();
        bad.normal[0].input_a = 5;
        assert!(bad.validate(&space).is_err());
    }

    #[test]
    fn loose_ends_computed() {
        let (genotype, _) = toy_genotype();
        // Normal cell: node1 reads node0 (input 2), node2 reads node1
        // (input 3) -> only node 2 is loose.
        assert_eq!(genotype.loose_ends(CellKind::Normal), vec![2]);
        // Reduction: node1 reads node0, node2 reads node0 -> loose: 1, 2.
        assert_eq!(genotype.loose_ends(CellKind::Reduction), vec![1, 2]);
    }

    #[test]
    fn genotype_file_roundtrip_stable() {
        let (genotype, space) = toy_genotype();
        let text = render_genotype(&genotype, &space, 42, "cafe0123");
        let (parsed, parsed_space) = parse_genotype(&text).unwrap();
        assert_eq!(parsed, genotype);
        assert_eq!(parsed_space, space);
        assert_eq!(render_genotype(&parsed, &parsed_space, 42, "cafe0123"), text);
    }

    #[test]
    fn genotype_ordering_is_lexicographic() {
        let (genotype, _) = toy_genotype();
        let mut other = genotype.clone();
        other.normal[0].input_a = 1;
        assert!(genotype < other);
    }
}
