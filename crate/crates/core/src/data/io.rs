//! Pose dataset files: line-delimited records under a fixed-order header.
//!
//! ```text
//! posedata v1
//! schema <schema id>
//! kind pose2d|pose3d
//! source ground_truth|detector
//! n <detector keypoint count>
//! m <dataset joint count>
//! root <root joint index>
//! frame_rate <Hz>
//! confidence 0|1
//! classes <name>,<name>,...
//! data
//! <sample id> <frame idx> <label> <subject> <values...>
//! ```
//!
//! A pose2d record carries 2N coordinates (plus N confidences when the
//! `confidence` flag is 1); a pose3d record carries 3M coordinates. Values
//! are plain decimal with a '.' radix, one record per newline-terminated
//! line. Frames of a sample must be consecutive, share label and subject,
//! and count frame indices from 0. Writing is canonical: loading a written
//! file and writing it again is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use super::types::{
    Frames, LabeledSample, Pose2D, Pose3D, PoseSequence, PoseSource,
};
use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Pose2D,
    Pose3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub schema_id: String,
    pub kind: DatasetKind,
    pub source: PoseSource,
    /// Keypoint count for 2D records.
    pub n: usize,
    /// Joint count for 3D records.
    pub m: usize,
    pub root_index: usize,
    pub frame_rate: f64,
    pub has_confidence: bool,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseDataset {
    pub meta: DatasetMeta,
    pub samples: Vec<LabeledSample>,
}

impl PoseDataset {
    pub fn num_classes(&self) -> usize {
        self.meta.class_names.len()
    }
}

/// Load a dataset file, checking it declares the expected schema id.
pub fn load_pose_dataset(path: &Path, schema_id: &str) -> Result<PoseDataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let ds = parse_pose_dataset(&text)?;
    if ds.meta.schema_id != schema_id {
        return Err(DataError::Schema(format!(
            "file declares schema '{}', expected '{}'",
            ds.meta.schema_id, schema_id
        )));
    }
    Ok(ds)
}

pub fn write_pose_dataset(path: &Path, dataset: &PoseDataset) -> Result<(), DataError> {
    std::fs::write(path, render_pose_dataset(dataset))?;
    Ok(())
}

pub fn parse_pose_dataset(text: &str) -> Result<PoseDataset, DataError> {
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: String| DataError::Parse { line: line + 1, msg };

    let (no, first) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty file".into()))?;
    if first.trim() != "posedata v1" {
        return Err(parse_err(no, format!("expected 'posedata v1' header, got '{first}'")));
    }

    let mut schema_id = None;
    let mut kind = None;
    let mut source = PoseSource::GroundTruth;
    let mut n = None;
    let mut m = None;
    let mut root_index = 0usize;
    let mut frame_rate = None;
    let mut has_confidence = false;
    let mut class_names: Vec<String> = Vec::new();
    let mut data_line = None;

    for (no, raw) in lines.by_ref() {
        let line = raw.trim();
        if line == "data" {
            data_line = Some(no);
            break;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(no, format!("malformed header line '{line}'")))?;
        let value = value.trim();
        match key {
            "schema" => schema_id = Some(value.to_string()),
            "kind" => {
                kind = Some(match value {
                    "pose2d" => DatasetKind::Pose2D,
                    "pose3d" => DatasetKind::Pose3D,
                    other => return Err(parse_err(no, format!("unknown kind '{other}'"))),
                })
            }
            "source" => {
                source = match value {
                    "ground_truth" => PoseSource::GroundTruth,
                    "detector" => PoseSource::Detector,
                    other => return Err(parse_err(no, format!("unknown source '{other}'"))),
                }
            }
            "n" => n = Some(value.parse().map_err(|_| parse_err(no, format!("bad n '{value}'")))?),
            "m" => m = Some(value.parse().map_err(|_| parse_err(no, format!("bad m '{value}'")))?),
            "root" => {
                root_index =
                    value.parse().map_err(|_| parse_err(no, format!("bad root '{value}'")))?
            }
            "frame_rate" => {
                frame_rate = Some(
                    value
                        .parse()
                        .map_err(|_| parse_err(no, format!("bad frame_rate '{value}'")))?,
                )
            }
            "confidence" => has_confidence = value == "1",
            "classes" => {
                class_names = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            other => return Err(parse_err(no, format!("unknown header field '{other}'"))),
        }
    }

    let data_line =
        data_line.ok_or_else(|| DataError::Schema("missing 'data' separator".into()))?;
    let meta = DatasetMeta {
        schema_id: schema_id
            .ok_or_else(|| parse_err(data_line, "missing 'schema' header".into()))?,
        kind: kind.ok_or_else(|| parse_err(data_line, "missing 'kind' header".into()))?,
        source,
        n: n.ok_or_else(|| parse_err(data_line, "missing 'n' header".into()))?,
        m: m.ok_or_else(|| parse_err(data_line, "missing 'm' header".into()))?,
        root_index,
        frame_rate: frame_rate
            .ok_or_else(|| parse_err(data_line, "missing 'frame_rate' header".into()))?,
        has_confidence,
        class_names,
    };

    let expected_values = match meta.kind {
        DatasetKind::Pose2D => 2 * meta.n + if meta.has_confidence { meta.n } else { 0 },
        DatasetKind::Pose3D => 3 * meta.m,
    };

    // Group consecutive records by sample id.
    struct Pending {
        id: String,
        label: usize,
        subject: usize,
        frames2: Vec<Pose2D>,
        frames3: Vec<Pose3D>,
    }
    let mut samples = Vec::new();
    let mut pending: Option<Pending> = None;
    let mut seen_ids: std::collections::HashSet<String> = std::collections::HashSet::new();

    let flush = |p: Pending, samples: &mut Vec<LabeledSample>| -> Result<(), DataError> {
        let sequence = match meta.kind {
            DatasetKind::Pose2D => PoseSequence::from_2d(p.frames2, meta.frame_rate)?,
            DatasetKind::Pose3D => PoseSequence::from_3d(p.frames3, meta.frame_rate)?,
        };
        samples.push(LabeledSample {
            id: p.id,
            sequence,
            label: p.label,
            subject: p.subject,
            split_tag: None,
        });
        Ok(())
    };

    for (no, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields
            .next()
            .ok_or_else(|| parse_err(no, "missing sample id".into()))?
            .to_string();
        let frame_idx: usize = fields
            .next()
            .ok_or_else(|| parse_err(no, "missing frame index".into()))?
            .parse()
            .map_err(|_| parse_err(no, "bad frame index".into()))?;
        let label: usize = fields
            .next()
            .ok_or_else(|| parse_err(no, "missing label".into()))?
            .parse()
            .map_err(|_| parse_err(no, "bad label".into()))?;
        let subject: usize = fields
            .next()
            .ok_or_else(|| parse_err(no, "missing subject".into()))?
            .parse()
            .map_err(|_| parse_err(no, "bad subject".into()))?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(no, format!("bad value '{f}'"))))
            .collect::<Result<Vec<f64>, _>>()?;
        if values.len() != expected_values {
            return Err(DataError::Schema(format!(
                "line {}: record has {} values, schema expects {}",
                no + 1,
                values.len(),
                expected_values
            )));
        }
        if !meta.class_names.is_empty() && label >= meta.class_names.len() {
            return Err(parse_err(
                no,
                format!("label {label} outside class count {}", meta.class_names.len()),
            ));
        }

        let starts_new = match &pending {
            None => true,
            Some(p) => p.id != id,
        };
        if starts_new {
            if let Some(p) = pending.take() {
                flush(p, &mut samples)?;
            }
            if !seen_ids.insert(id.clone()) {
                return Err(parse_err(no, format!("sample '{id}' records are not consecutive")));
            }
            if frame_idx != 0 {
                return Err(parse_err(no, format!("sample '{id}' does not start at frame 0")));
            }
            pending = Some(Pending {
                id,
                label,
                subject,
                frames2: Vec::new(),
                frames3: Vec::new(),
            });
        }
        let p = pending.as_mut().unwrap();
        if p.label != label || p.subject != subject {
            return Err(parse_err(no, format!("sample '{}' changes label or subject", p.id)));
        }
        let current_frames = p.frames2.len().max(p.frames3.len());
        if frame_idx != current_frames {
            return Err(parse_err(
                no,
                format!("sample '{}' frame index {frame_idx}, expected {current_frames}", p.id),
            ));
        }
        match meta.kind {
            DatasetKind::Pose2D => {
                let coords: Vec<[f64; 2]> =
                    values[..2 * meta.n].chunks_exact(2).map(|c| [c[0], c[1]]).collect();
                let mut pose = Pose2D::new(coords, meta.source)?;
                if meta.has_confidence {
                    pose = pose.with_confidence(values[2 * meta.n..].to_vec())?;
                }
                p.frames2.push(pose);
            }
            DatasetKind::Pose3D => {
                p.frames3.push(Pose3D::from_flat(&values, meta.root_index)?);
            }
        }
    }
    if let Some(p) = pending.take() {
        flush(p, &mut samples)?;
    }
    Ok(PoseDataset { meta, samples })
}

pub fn render_pose_dataset(dataset: &PoseDataset) -> String {
    let meta = &dataset.meta;
    let mut out = String::new();
    out.push_str("posedata v1\n");
    let _ = writeln!(out, "schema {}", meta.schema_id);
    let _ = writeln!(
        out,
        "kind {}",
        match meta.kind {
            DatasetKind::Pose2D => "pose2d",
            DatasetKind::Pose3D => "pose3d",
        }
    );
    let _ = writeln!(
        out,
        "source {}",
        match meta.source {
            PoseSource::GroundTruth => "ground_truth",
            PoseSource::Detector => "detector",
        }
    );
    let _ = writeln!(out, "n {}", meta.n);
    let _ = writeln!(out, "m {}", meta.m);
    let _ = writeln!(out, "root {}", meta.root_index);
    let _ = writeln!(out, "frame_rate {}", meta.frame_rate);
    let _ = writeln!(out, "confidence {}", if meta.has_confidence { 1 } else { 0 });
    let _ = writeln!(out, "classes {}", meta.class_names.join(","));
    out.push_str("data\n");
    for sample in &dataset.samples {
        match &sample.sequence.frames {
            Frames::D2(frames) => {
                for (t, frame) in frames.iter().enumerate() {
                    let _ = write!(out, "{} {} {} {}", sample.id, t, sample.label, sample.subject);
                    for kp in &frame.keypoints {
                        let _ = write!(out, " {} {}", kp[0], kp[1]);
                    }
                    if meta.has_confidence {
                        let ones = vec![1.0; frame.num_keypoints()];
                        let conf = frame.confidence.as_deref().unwrap_or(&ones);
                        for c in conf {
                            let _ = write!(out, " {c}");
                        }
                    }
                    out.push('\n');
                }
            }
            Frames::D3(frames) => {
                for (t, frame) in frames.iter().enumerate() {
                    let _ = write!(out, "{} {} {} {}", sample.id, t, sample.label, sample.subject);
                    for j in &frame.joints {
                        let _ = write!(out, " {} {} {}", j[0], j[1], j[2]);
                    }
                    out.push('\n');
                }
            }
        }
    }
    out
}
