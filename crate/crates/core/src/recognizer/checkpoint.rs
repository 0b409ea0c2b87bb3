//! Recognizer checkpoints: genotype, layout, every parameter array (with
//! BN running stats) under string keys, and a config echo. Versioned like
//! the lifter checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{RecognizerError, RecognizerParams};
use crate::nas::{
    BatchNorm2d, CellGenotype, CellKind, ClassifierParams, OpKey, ParamStore, Scope, Scoping,
    SearchSpace, SepConvParams, Slot, StemParams,
};

pub const RECOGNIZER_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecognizerFile {
    version: u32,
    space: SearchSpace,
    num_classes: usize,
    layout: Vec<CellKind>,
    genotype: CellGenotype,
    config: serde_json::Value,
    arrays: BTreeMap<String, ArrayEntry>,
}

fn scope_str(scope: &Scope) -> String {
    match scope {
        Scope::Shared(CellKind::Normal) => "shared_normal".into(),
        Scope::Shared(CellKind::Reduction) => "shared_reduction".into(),
        Scope::Instance(i) => format!("cell{i}"),
    }
}

fn parse_scope(s: &str) -> Result<Scope, RecognizerError> {
    match s {
        "shared_normal" => Ok(Scope::Shared(CellKind::Normal)),
        "shared_reduction" => Ok(Scope::Shared(CellKind::Reduction)),
        other => other
            .strip_prefix("cell")
            .and_then(|i| i.parse().ok())
            .map(Scope::Instance)
            .ok_or_else(|| RecognizerError::Checkpoint(format!("bad scope '{other}'"))),
    }
}

fn key_str(key: &OpKey) -> String {
    let slot = match key.slot {
        Slot::A => "a",
        Slot::B => "b",
    };
    format!("{}/{}/{}/{}", scope_str(&key.scope), key.node, slot, key.op)
}

fn entry_of(shape: Vec<usize>, data: Vec<f64>) -> ArrayEntry {
    ArrayEntry { shape, data }
}

pub fn save_recognizer(
    path: &Path,
    params: &RecognizerParams,
    config_echo: &serde_json::Value,
) -> Result<(), RecognizerError> {
    let store = &params.store;
    let mut arrays = BTreeMap::new();
    arrays.insert(
        "stem/conv".to_string(),
        entry_of(store.stem.conv.shape().to_vec(), store.stem.conv.iter().copied().collect()),
    );
    let bn_entries = |bn: &BatchNorm2d, prefix: &str, arrays: &mut BTreeMap<String, ArrayEntry>| {
        arrays.insert(
            format!("{prefix}/gamma"),
            entry_of(vec![bn.gamma.len()], bn.gamma.to_vec()),
        );
        arrays.insert(
            format!("{prefix}/beta"),
            entry_of(vec![bn.beta.len()], bn.beta.to_vec()),
        );
        arrays.insert(
            format!("{prefix}/running_mean"),
            entry_of(vec![bn.running_mean.len()], bn.running_mean.to_vec()),
        );
        arrays.insert(
            format!("{prefix}/running_var"),
            entry_of(vec![bn.running_var.len()], bn.running_var.to_vec()),
        );
    };
    bn_entries(&store.stem.bn, "stem/bn", &mut arrays);
    for (key, op) in &store.ops {
        let prefix = key_str(key);
        arrays.insert(
            format!("{prefix}/depthwise"),
            entry_of(op.depthwise.shape().to_vec(), op.depthwise.iter().copied().collect()),
        );
        arrays.insert(
            format!("{prefix}/pointwise"),
            entry_of(op.pointwise.shape().to_vec(), op.pointwise.iter().copied().collect()),
        );
        bn_entries(&op.bn, &format!("{prefix}/bn"), &mut arrays);
    }
    for (scope, proj) in &store.projections {
        arrays.insert(
            format!("{}/projection", scope_str(scope)),
            entry_of(proj.shape().to_vec(), proj.iter().copied().collect()),
        );
    }
    arrays.insert(
        "classifier/w".to_string(),
        entry_of(
            store.classifier.w.shape().to_vec(),
            store.classifier.w.iter().copied().collect(),
        ),
    );
    arrays.insert(
        "classifier/b".to_string(),
        entry_of(vec![store.classifier.b.len()], store.classifier.b.to_vec()),
    );
    let file = RecognizerFile {
        version: RECOGNIZER_VERSION,
        space: store.space.clone(),
        num_classes: store.num_classes,
        layout: store.layout.clone(),
        genotype: params.genotype.clone(),
        config: config_echo.clone(),
        arrays,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

struct Reader<'a>(&'a BTreeMap<String, ArrayEntry>);

impl<'a> Reader<'a> {
    fn entry(&self, key: &str) -> Result<&ArrayEntry, RecognizerError> {
        self.0
            .get(key)
            .ok_or_else(|| RecognizerError::Checkpoint(format!("missing array '{key}'")))
    }

    fn a1(&self, key: &str) -> Result<Array1<f64>, RecognizerError> {
        let e = self.entry(key)?;
        if e.shape.len() != 1 || e.shape[0] != e.data.len() {
            return Err(RecognizerError::Checkpoint(format!("bad shape for '{key}'")));
        }
        Ok(Array1::from_vec(e.data.clone()))
    }

    fn a2(&self, key: &str) -> Result<Array2<f64>, RecognizerError> {
        let e = self.entry(key)?;
        if e.shape.len() != 2 {
            return Err(RecognizerError::Checkpoint(format!("bad shape for '{key}'")));
        }
        Array2::from_shape_vec((e.shape[0], e.shape[1]), e.data.clone())
            .map_err(|err| RecognizerError::Checkpoint(format!("'{key}': {err}")))
    }

    fn a3(&self, key: &str) -> Result<Array3<f64>, RecognizerError> {
        let e = self.entry(key)?;
        if e.shape.len() != 3 {
            return Err(RecognizerError::Checkpoint(format!("bad shape for '{key}'")));
        }
        Array3::from_shape_vec((e.shape[0], e.shape[1], e.shape[2]), e.data.clone())
            .map_err(|err| RecognizerError::Checkpoint(format!("'{key}': {err}")))
    }

    fn a4(&self, key: &str) -> Result<Array4<f64>, RecognizerError> {
        let e = self.entry(key)?;
        if e.shape.len() != 4 {
            return Err(RecognizerError::Checkpoint(format!("bad shape for '{key}'")));
        }
        Array4::from_shape_vec(
            (e.shape[0], e.shape[1], e.shape[2], e.shape[3]),
            e.data.clone(),
        )
        .map_err(|err| RecognizerError::Checkpoint(format!("'{key}': {err}")))
    }

    fn bn(&self, prefix: &str) -> Result<BatchNorm2d, RecognizerError> {
        Ok(BatchNorm2d {
            gamma: self.a1(&format!("{prefix}/gamma"))?,
            beta: self.a1(&format!("{prefix}/beta"))?,
            running_mean: self.a1(&format!("{prefix}/running_mean"))?,
            running_var: self.a1(&format!("{prefix}/running_var"))?,
        })
    }
}

pub fn load_recognizer(
    path: &Path,
) -> Result<(RecognizerParams, serde_json::Value), RecognizerError> {
    let text = std::fs::read_to_string(path)?;
    let file: RecognizerFile = serde_json::from_str(&text)?;
    if file.version != RECOGNIZER_VERSION {
        return Err(RecognizerError::Checkpoint(format!(
            "recognizer checkpoint version {} unsupported (expected {})",
            file.version, RECOGNIZER_VERSION
        )));
    }
    let reader = Reader(&file.arrays);
    let stem = StemParams {
        conv: reader.a4("stem/conv")?,
        bn: reader.bn("stem/bn")?,
    };
    // Reconstruct op keys from the stored genotype and layout.
    let mut ops = BTreeMap::new();
    for (cell_idx, &kind) in file.layout.iter().enumerate() {
        for (node_idx, node) in file.genotype.cell(kind).iter().enumerate() {
            for (slot, op) in [(Slot::A, node.op_a), (Slot::B, node.op_b)] {
                if !op.has_params() {
                    continue;
                }
                let key = OpKey {
                    scope: Scope::Instance(cell_idx),
                    node: node_idx,
                    slot,
                    op,
                };
                if ops.contains_key(&key) {
                    continue;
                }
                let prefix = key_str(&key);
                ops.insert(
                    key,
                    SepConvParams {
                        depthwise: reader.a3(&format!("{prefix}/depthwise"))?,
                        pointwise: reader.a2(&format!("{prefix}/pointwise"))?,
                        bn: reader.bn(&format!("{prefix}/bn"))?,
                    },
                );
            }
        }
    }
    let mut projections = BTreeMap::new();
    for key in file.arrays.keys() {
        if let Some(scope_part) = key.strip_suffix("/projection") {
            projections.insert(parse_scope(scope_part)?, reader.a2(key)?);
        }
    }
    let classifier = ClassifierParams {
        w: reader.a2("classifier/w")?,
        b: reader.a1("classifier/b")?,
    };
    let store = ParamStore {
        space: file.space,
        num_classes: file.num_classes,
        layout: file.layout,
        scoping: Scoping::PerInstance,
        stem,
        ops,
        projections,
        classifier,
    };
    Ok((
        RecognizerParams {
            store,
            genotype: file.genotype,
        },
        file.config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nas::{NodeGene, OpId};
    use crate::recognizer::{build_final_network, FinalNetConfig};

    #[test]
    fn recognizer_checkpoint_roundtrip() {
        let genotype = CellGenotype {
            normal: vec![
                NodeGene {
                    input_a: 0,
                    op_a: OpId::SepConv3x3,
                    input_b: 1,
                    op_b: OpId::Identity,
                },
                NodeGene {
                    input_a: 2,
                    op_a: OpId::AvgPool3x3,
                    input_b: 0,
                    op_b: OpId::SepConv5x5,
                },
            ],
            reduction: vec![
                NodeGene {
                    input_a: 0,
                    op_a: OpId::MaxPool3x3,
                    input_b: 1,
                    op_b: OpId::SepConv3x3,
                },
                NodeGene {
                    input_a: 1,
                    op_a: OpId::Identity,
                    input_b: 2,
                    op_b: OpId::Identity,
                },
            ],
        };
        let config = FinalNetConfig {
            cells_per_stage: 1,
            stem_channels: 4,
            num_classes: 3,
            ..Default::default()
        };
        let params = build_final_network(&genotype, &config, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recognizer.ckpt");
        let echo = serde_json::json!({"epochs": 30});
        save_recognizer(&path, &params, &echo).unwrap();
        let (loaded, config_echo) = load_recognizer(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(config_echo, echo);
    }

    #[test]
    fn version_mismatch_rejected() {
        let genotype = CellGenotype {
            normal: vec![
                NodeGene {
                    input_a: 0,
                    op_a: OpId::Identity,
                    input_b: 1,
                    op_b: OpId::Identity,
                };
                2
            ],
            reduction: vec![
                NodeGene {
                    input_a: 0,
                    op_a: OpId::Identity,
                    input_b: 1,
                    op_b: OpId::Identity,
                };
                2
            ],
        };
        let config = FinalNetConfig {
            cells_per_stage: 1,
            stem_channels: 4,
            num_classes: 2,
            ..Default::default()
        };
        let params = build_final_network(&genotype, &config, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recognizer.ckpt");
        save_recognizer(&path, &params, &serde_json::Value::Null).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_recognizer(&path),
            Err(RecognizerError::Checkpoint(_))
        ));
    }
}
