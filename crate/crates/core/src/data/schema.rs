//! Schema registry: joint sets, detector-to-joint index maps, and optional
//! class-subset groupings for evaluation protocols.
//!
//! Registry file grammar (one or more schema blocks):
//!
//! ```text
//! schemas v1
//!
//! schema <id>
//! joints <M>
//! names <name0>,<name1>,...
//! root <root joint index>
//! detector_map <entry>;<entry>;...      # optional, M entries
//! subsets <name>:<class ids>;<name>:... # optional
//! end
//! ```
//!
//! Each `detector_map` entry builds one dataset joint from detector
//! keypoints as a weighted sum: `4*0.5+7*0.5` or a bare index `4`.
//! Weights must sum to 1. Joints absent from the detector output (pelvis,
//! spine) are interpolated this way.

use std::collections::BTreeMap;
use std::path::Path;

use super::types::{Pose2D, PoseSource};
use super::DataError;

/// One term of a detector-map entry: detector keypoint index and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorMapTerm {
    pub index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSchema {
    pub id: String,
    pub joint_count: usize,
    pub joint_names: Vec<String>,
    pub root_index: usize,
    /// Per dataset joint: weighted detector keypoints that build it.
    pub detector_map: Option<Vec<Vec<DetectorMapTerm>>>,
    /// Named class groups (for subset protocols), in file order.
    pub subsets: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, Default)]
pub struct SchemaRegistry {
    schemas: BTreeMap<String, JointSchema>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, schema: JointSchema) {
        self.schemas.insert(schema.id.clone(), schema);
    }

    pub fn get(&self, id: &str) -> Result<&JointSchema, DataError> {
        self.schemas
            .get(id)
            .ok_or_else(|| DataError::Schema(format!("unknown schema id '{id}'")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.schemas.keys().map(String::as_str)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let (first_no, first) = lines
            .next()
            .ok_or_else(|| DataError::Parse { line: 1, msg: "empty registry".into() })?;
        if first.trim() != "schemas v1" {
            return Err(DataError::Parse {
                line: first_no + 1,
                msg: format!("expected 'schemas v1' header, got '{first}'"),
            });
        }
        let mut registry = Self::new();
        let mut current: Option<(usize, PartialSchema)> = None;
        for (no, raw) in lines {
            let line = raw.trim();
            let lineno = no + 1;
            if line.is_empty() {
                continue;
            }
            let (key, rest) = match line.split_once(' ') {
                Some((k, r)) => (k, r.trim()),
                None => (line, ""),
            };
            match key {
                "schema" => {
                    if current.is_some() {
                        return Err(DataError::Parse {
                            line: lineno,
                            msg: "nested schema block (missing 'end')".into(),
                        });
                    }
                    current = Some((lineno, PartialSchema::new(rest)));
                }
                "end" => {
                    let (start, partial) = current.take().ok_or(DataError::Parse {
                        line: lineno,
                        msg: "'end' outside a schema block".into(),
                    })?;
                    registry.insert(partial.finish(start)?);
                }
                _ => {
                    let (_, partial) = current.as_mut().ok_or(DataError::Parse {
                        line: lineno,
                        msg: format!("field '{key}' outside a schema block"),
                    })?;
                    partial.set(key, rest, lineno)?;
                }
            }
        }
        if current.is_some() {
            return Err(DataError::Schema("unterminated schema block".into()));
        }
        Ok(registry)
    }

    /// Canonical serialization; `parse(write())` is a fixed point.
    pub fn to_text(&self) -> String {
        let mut out = String::from("schemas v1\n");
        for schema in self.schemas.values() {
            out.push('\n');
            out.push_str(&format!("schema {}\n", schema.id));
            out.push_str(&format!("joints {}\n", schema.joint_count));
            out.push_str(&format!("names {}\n", schema.joint_names.join(",")));
            out.push_str(&format!("root {}\n", schema.root_index));
            if let Some(map) = &schema.detector_map {
                let entries: Vec<String> = map
                    .iter()
                    .map(|terms| {
                        terms
                            .iter()
                            .map(|t| {
                                if t.weight == 1.0 {
                                    format!("{}", t.index)
                                } else {
                                    format!("{}*{}", t.index, t.weight)
                                }
                            })
                            .collect::<Vec<_>>()
                            .join("+")
                    })
                    .collect();
                out.push_str(&format!("detector_map {}\n", entries.join(";")));
            }
            if !schema.subsets.is_empty() {
                let subsets: Vec<String> = schema
                    .subsets
                    .iter()
                    .map(|(name, classes)| {
                        let ids: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
                        format!("{}:{}", name, ids.join(","))
                    })
                    .collect();
                out.push_str(&format!("subsets {}\n", subsets.join(";")));
            }
            out.push_str("end\n");
        }
        out
    }
}

struct PartialSchema {
    id: String,
    joint_count: Option<usize>,
    joint_names: Option<Vec<String>>,
    root_index: usize,
    detector_map: Option<Vec<Vec<DetectorMapTerm>>>,
    subsets: Vec<(String, Vec<usize>)>,
}

impl PartialSchema {
    fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            joint_count: None,
            joint_names: None,
            root_index: 0,
            detector_map: None,
            subsets: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: &str, lineno: usize) -> Result<(), DataError> {
        let err = |msg: String| DataError::Parse { line: lineno, msg };
        match key {
            "joints" => {
                self.joint_count =
                    Some(value.parse().map_err(|_| err(format!("bad joint count '{value}'")))?);
            }
            "names" => {
                self.joint_names = Some(value.split(',').map(|s| s.trim().to_string()).collect());
            }
            "root" => {
                self.root_index =
                    value.parse().map_err(|_| err(format!("bad root index '{value}'")))?;
            }
            "detector_map" => {
                let mut entries = Vec::new();
                for entry in value.split(';') {
                    let mut terms = Vec::new();
                    for term in entry.split('+') {
                        let term = term.trim();
                        let (idx, weight) = match term.split_once('*') {
                            Some((i, w)) => (
                                i.parse().map_err(|_| err(format!("bad index in '{term}'")))?,
                                w.parse().map_err(|_| err(format!("bad weight in '{term}'")))?,
                            ),
                            None => (
                                term.parse().map_err(|_| err(format!("bad index '{term}'")))?,
                                1.0,
                            ),
                        };
                        terms.push(DetectorMapTerm { index: idx, weight });
                    }
                    let total: f64 = terms.iter().map(|t| t.weight).sum();
                    if (total - 1.0).abs() > 1e-9 {
                        return Err(err(format!("detector map weights sum to {total}, not 1")));
                    }
                    entries.push(terms);
                }
                self.detector_map = Some(entries);
            }
            "subsets" => {
                for part in value.split(';') {
                    let (name, ids) = part
                        .split_once(':')
                        .ok_or_else(|| err(format!("bad subset '{part}'")))?;
                    let classes = ids
                        .split(',')
                        .map(|c| c.trim().parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| err(format!("bad class id in subset '{part}'")))?;
                    self.subsets.push((name.trim().to_string(), classes));
                }
            }
            _ => return Err(err(format!("unknown schema field '{key}'"))),
        }
        Ok(())
    }

    fn finish(self, start_line: usize) -> Result<JointSchema, DataError> {
        let joint_count = self.joint_count.ok_or_else(|| DataError::Parse {
            line: start_line,
            msg: format!("schema '{}' missing 'joints'", self.id),
        })?;
        let joint_names = self
            .joint_names
            .unwrap_or_else(|| (0..joint_count).map(|i| format!("j{i}")).collect());
        if joint_names.len() != joint_count {
            return Err(DataError::Schema(format!(
                "schema '{}': {} names for {} joints",
                self.id,
                joint_names.len(),
                joint_count
            )));
        }
        if self.root_index >= joint_count {
            return Err(DataError::Schema(format!(
                "schema '{}': root index {} out of range",
                self.id, self.root_index
            )));
        }
        if let Some(map) = &self.detector_map {
            if map.len() != joint_count {
                return Err(DataError::Schema(format!(
                    "schema '{}': detector map has {} entries for {} joints",
                    self.id,
                    map.len(),
                    joint_count
                )));
            }
        }
        Ok(JointSchema {
            id: self.id,
            joint_count,
            joint_names,
            root_index: self.root_index,
            detector_map: self.detector_map,
            subsets: self.subsets,
        })
    }
}

/// Map raw detector keypoints onto the schema's joint set via the schema's
/// weighted index map.
pub fn map_detector_pose(pose: &Pose2D, schema: &JointSchema) -> Result<Pose2D, DataError> {
    let map = schema.detector_map.as_ref().ok_or_else(|| {
        DataError::Schema(format!("schema '{}' has no detector map", schema.id))
    })?;
    let mut keypoints = Vec::with_capacity(schema.joint_count);
    for (joint, terms) in map.iter().enumerate() {
        let mut u = 0.0;
        let mut v = 0.0;
        for term in terms {
            let kp = pose.keypoints.get(term.index).ok_or_else(|| {
                DataError::Schema(format!(
                    "detector map for joint {joint} references keypoint {} but pose has {}",
                    term.index,
                    pose.num_keypoints()
                ))
            })?;
            u += term.weight * kp[0];
            v += term.weight * kp[1];
        }
        keypoints.push([u, v]);
    }
    Pose2D::new(keypoints, PoseSource::Detector)
}

/// Impute missing (zero-confidence) detector keypoints in place: each is
/// replaced with the previous frame's value, or with the per-joint fallback
/// mean when there is no history yet.
pub fn impute_detector_sequence(
    frames: &mut [Pose2D],
    fallback_mean: &[[f64; 2]],
) -> Result<(), DataError> {
    if frames.is_empty() {
        return Ok(());
    }
    let n = frames[0].num_keypoints();
    if fallback_mean.len() != n {
        return Err(DataError::Shape(format!(
            "fallback mean has {} joints, frames have {n}",
            fallback_mean.len()
        )));
    }
    let mut last_good: Vec<Option<[f64; 2]>> = vec![None; n];
    for frame in frames.iter_mut() {
        let missing: Vec<bool> = match &frame.confidence {
            Some(conf) => conf.iter().map(|&c| c <= 0.0).collect(),
            None => vec![false; n],
        };
        for (j, &is_missing) in missing.iter().enumerate() {
            if is_missing {
                frame.keypoints[j] = last_good[j].unwrap_or(fallback_mean[j]);
                if let Some(conf) = frame.confidence.as_mut() {
                    conf[j] = 0.0;
                }
            } else {
                last_good[j] = Some(frame.keypoints[j]);
            }
        }
    }
    Ok(())
}
