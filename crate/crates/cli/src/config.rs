//! Pipeline configuration: one TOML file drives every stage. Unknown keys
//! are rejected, missing keys fall back to documented defaults, and the
//! parsed config re-serializes canonically (parse -> serialize -> parse is
//! a fixed point).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skelact::encoder::Colormap;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub synthetic: SyntheticConfig,
    pub camera: CameraConfig,
    pub lifter: LifterConfig,
    pub encoder: EncoderSection,
    pub search: SearchSection,
    pub recognizer: RecognizerSection,
    pub pipeline: PipelineSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// "synthetic" or "files".
    pub source: String,
    /// Files mode: schema registry path and the schema id datasets declare.
    pub schema_registry: String,
    pub schema: String,
    /// Files mode: lifter training datasets (paired by sample id).
    pub gt_2d: String,
    pub det_2d: String,
    pub gt_3d: String,
    /// Files mode: detector 2D sequences of the action dataset.
    pub actions_det_2d: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            schema_registry: String::new(),
            schema: String::new(),
            gt_2d: String::new(),
            det_2d: String::new(),
            gt_3d: String::new(),
            actions_det_2d: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub joints: usize,
    pub frame_rate: f64,
    pub noise_std: f64,
    pub amplitude: f64,
    pub base_frequency: f64,
    pub subjects: usize,
    pub class_margin: f64,
    /// Pixel noise used to simulate detector output from projected 2D.
    pub detector_noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            samples_per_class: 20,
            frames: 24,
            joints: 17,
            frame_rate: 20.0,
            noise_std: 2.0,
            amplitude: 60.0,
            base_frequency: 0.8,
            subjects: 10,
            class_margin: 100.0,
            detector_noise_std: 1.5,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn to_synth(&self) -> skelact::data::SynthConfig {
        skelact::data::SynthConfig {
            classes: self.classes,
            samples_per_class: self.samples_per_class,
            frames_per_sequence: self.frames,
            joints: self.joints,
            frame_rate: self.frame_rate,
            noise_std: self.noise_std,
            amplitude: self.amplitude,
            base_frequency: self.base_frequency,
            num_subjects: self.subjects,
            class_margin: self.class_margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub translation: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal: [1100.0, 1100.0],
            principal_point: [500.0, 500.0],
            translation: [0.0, 0.0, 4500.0],
        }
    }
}

impl CameraConfig {
    pub fn to_camera(&self) -> skelact::data::CameraModel {
        skelact::data::CameraModel::frontal(self.focal, self.principal_point, self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifterConfig {
    pub hidden_width: usize,
    pub num_blocks: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub huber_delta: f64,
    pub base_lr: f64,
    pub joint_training: bool,
    /// Fraction of lifter samples held out for MPJPE evaluation.
    pub holdout_seed: u64,
    pub seed: u64,
}

impl Default for LifterConfig {
    fn default() -> Self {
        Self {
            hidden_width: 1024,
            num_blocks: 2,
            dropout: 0.25,
            epochs: 300,
            batch_size: 128,
            huber_delta: 1.0,
            base_lr: 0.001,
            joint_training: true,
            holdout_seed: 13,
            seed: 1,
        }
    }
}

impl LifterConfig {
    pub fn to_train_config(&self) -> skelact::lifter::LifterTrainConfig {
        skelact::lifter::LifterTrainConfig {
            hidden_width: self.hidden_width,
            num_blocks: self.num_blocks,
            dropout_rate: self.dropout,
            epochs: self.epochs,
            batch_size: self.batch_size,
            huber_delta: self.huber_delta,
            base_lr: self.base_lr,
            joint_training: self.joint_training,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub height: usize,
    pub width: usize,
    /// "linear_rgb" or "jet".
    pub colormap: String,
    pub enhance: bool,
    pub motion_scale: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            colormap: "linear_rgb".into(),
            enhance: true,
            motion_scale: 0.05,
        }
    }
}

impl EncoderSection {
    pub fn to_encoder(&self) -> Result<skelact::encoder::EncoderConfig, CliError> {
        let colormap = match self.colormap.as_str() {
            "linear_rgb" => Colormap::LinearRgb,
            "jet" => Colormap::Jet,
            other => {
                return Err(CliError::Config(format!(
                    "unknown colormap '{other}' (expected linear_rgb or jet)"
                )))
            }
        };
        Ok(skelact::encoder::EncoderConfig {
            output_height: self.height,
            output_width: self.width,
            colormap,
            enhance: self.enhance,
            motion_scale: self.motion_scale,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub nodes_per_cell: usize,
    pub stem_channels: usize,
    pub epochs: usize,
    pub controller_samples_per_epoch: usize,
    pub derive_candidates: usize,
    pub controller_hidden: usize,
    pub temperature: f64,
    pub baseline_decay: f64,
    pub controller_lr: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Fraction of the training split carved off as controller validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            nodes_per_cell: 5,
            stem_channels: 16,
            epochs: 200,
            controller_samples_per_epoch: 10,
            derive_candidates: 10,
            controller_hidden: 64,
            temperature: 1.0,
            baseline_decay: 0.95,
            controller_lr: 0.00035,
            lr_max: 0.05,
            lr_min: 0.001,
            momentum: 0.9,
            batch_size: 8,
            clip_norm: 5.0,
            val_fraction: 0.2,
            seed: 2,
        }
    }
}

impl SearchSection {
    pub fn to_search_config(&self) -> skelact::nas::SearchConfig {
        skelact::nas::SearchConfig {
            space: skelact::nas::SearchSpace::standard(self.nodes_per_cell, self.stem_channels),
            epochs: self.epochs,
            controller_samples_per_epoch: self.controller_samples_per_epoch,
            derive_candidates: self.derive_candidates,
            controller: skelact::nas::ControllerConfig {
                hidden: self.controller_hidden,
                temperature: self.temperature,
                baseline_decay: self.baseline_decay,
                lr: self.controller_lr,
            },
            shared_lr_max: self.lr_max,
            shared_lr_min: self.lr_min,
            momentum: self.momentum,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerSection {
    pub cells_per_stage: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub crop_padding: usize,
    pub hflip_prob: f64,
    pub inherit_weights: bool,
    pub seed: u64,
}

impl Default for RecognizerSection {
    fn default() -> Self {
        Self {
            cells_per_stage: 2,
            epochs: 30,
            batch_size: 8,
            lr_max: 0.05,
            lr_min: 0.001,
            momentum: 0.9,
            clip_norm: 5.0,
            crop_padding: 4,
            hflip_prob: 0.5,
            inherit_weights: false,
            seed: 3,
        }
    }
}

impl RecognizerSection {
    pub fn to_final_config(
        &self,
        stem_channels: usize,
        num_classes: usize,
    ) -> skelact::recognizer::FinalNetConfig {
        skelact::recognizer::FinalNetConfig {
            cells_per_stage: self.cells_per_stage,
            stem_channels,
            num_classes,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            momentum: self.momentum,
            clip_norm: self.clip_norm,
            augment: skelact::recognizer::AugmentConfig {
                crop_padding: self.crop_padding,
                hflip_prob: self.hflip_prob,
            },
            inherit_weights: self.inherit_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub out_dir: String,
    /// h36m_subject | msr_half | sbu_5fold | random_holdout
    pub protocol: String,
    pub fold: usize,
    pub split_seed: u64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            out_dir: "runs/default".into(),
            protocol: "random_holdout".into(),
            fold: 0,
            split_seed: 11,
        }
    }
}

/// Parse and validate a config file. Unknown keys are rejected by the
/// deserializer with the offending key named; defaults fill in the rest.
pub fn parse_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config '{}': {e}", path.display())))?;
    let config: PipelineConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config parse: {e}")))?;
    validate_config(&config)?;
    Ok(config)
}

pub fn validate_config(config: &PipelineConfig) -> Result<(), CliError> {
    match config.dataset.source.as_str() {
        "synthetic" => {
            if config.synthetic.classes < 2 {
                return Err(CliError::Config("synthetic.classes must be at least 2".into()));
            }
        }
        "files" => {
            for (key, value) in [
                ("dataset.schema_registry", &config.dataset.schema_registry),
                ("dataset.gt_2d", &config.dataset.gt_2d),
                ("dataset.det_2d", &config.dataset.det_2d),
                ("dataset.gt_3d", &config.dataset.gt_3d),
                ("dataset.actions_det_2d", &config.dataset.actions_det_2d),
            ] {
                if value.is_empty() {
                    return Err(CliError::Config(format!("files mode requires {key}")));
                }
                if !PathBuf::from(value).exists() {
                    return Err(CliError::Config(format!(
                        "{key} path '{value}' does not resolve"
                    )));
                }
            }
        }
        other => {
            return Err(CliError::Config(format!(
                "dataset.source '{other}' must be 'synthetic' or 'files'"
            )))
        }
    }
    skelact::data::SplitProtocol::parse(&config.pipeline.protocol)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if config.pipeline.out_dir.is_empty() {
        return Err(CliError::Config("pipeline.out_dir must not be empty".into()));
    }
    config.encoder.to_encoder()?;
    Ok(())
}

/// Canonical serialization of the effective config (used for echoing and
/// hashing).
pub fn render_config(config: &PipelineConfig) -> String {
    toml::to_string_pretty(config).expect("config serialization")
}

pub fn config_hash(config: &PipelineConfig) -> String {
    skelact::hash::short_hash(render_config(config).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("min.toml");
        std::fs::write(&path, "[pipeline]\nout_dir = \"runs/x\"\n").unwrap();
        let config = parse_config(&path).unwrap();
        assert_eq!(config.pipeline.out_dir, "runs/x");
        assert_eq!(config.lifter.epochs, 300);
        assert_eq!(config.search.epochs, 200);
        assert_eq!(config.lifter.batch_size, 128);
        assert_eq!(config.lifter.dropout, 0.25);
        assert_eq!(config.search.controller_lr, 0.00035);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[lifter]\nbogus_key = 3\n").unwrap();
        match parse_config(&path) {
            Err(CliError::Config(msg)) => assert!(msg.contains("bogus_key"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn reserialization_is_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "[synthetic]\nclasses = 4\n[pipeline]\nout_dir = \"runs/y\"\nprotocol = \"sbu_5fold\"\n",
        )
        .unwrap();
        let config = parse_config(&path).unwrap();
        let echoed = render_config(&config);
        let path2 = dir.path().join("c2.toml");
        std::fs::write(&path2, &echoed).unwrap();
        let reparsed = parse_config(&path2).unwrap();
        assert_eq!(reparsed, config);
        assert_eq!(render_config(&reparsed), echoed);
    }

    #[test]
    fn bad_protocol_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.toml");
        std::fs::write(&path, "[pipeline]\nprotocol = \"nope\"\n").unwrap();
        assert!(matches!(parse_config(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn files_mode_requires_resolvable_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.toml");
        std::fs::write(&path, "[dataset]\nsource = \"files\"\n").unwrap();
        assert!(matches!(parse_config(&path), Err(CliError::Config(_))));
    }
}
