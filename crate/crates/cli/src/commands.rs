//! Stage commands. Each command acquires the output-directory lock, runs
//! its stage, records artifacts and metrics in the manifest, and verifies
//! manifest hashes before returning. All randomness flows from config
//! seeds; reruns with identical config produce identical artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use skelact::data::{
    generate_synthetic_actions, load_pose_dataset, project, root_center, split_dataset,
    synth_class_names, LabeledSample, Pose2D, Pose3D, PoseSequence, PoseSource, SchemaRegistry,
    SplitProtocol,
};
use skelact::encoder::{encode_with_id, load_image_cache, write_image_cache, CachedImage};
use skelact::lifter::{
    load_checkpoint, mpjpe, pair_training_data, predict_3d, save_checkpoint, train_lifter,
    LiftingExample,
};
use skelact::nas::{load_genotype, run_search, write_genotype, EncodedDataset};
use skelact::recognizer::{
    build_final_network, build_final_network_inherited, evaluate_accuracy, evaluate_protocol,
    load_recognizer, render_metrics_report, render_table_row, save_recognizer, train_recognizer,
    MetricsReport, ProtocolEvalConfig, ProtocolReport, SplitRow,
};

use crate::config::{config_hash, render_config, PipelineConfig};
use crate::manifest::{DirLock, RunManifest};
use crate::CliError;

pub const ARTIFACT_LIFTER: &str = "lifter_checkpoint";
pub const ARTIFACT_CACHE: &str = "image_cache";
pub const ARTIFACT_GENOTYPE: &str = "genotype";
pub const ARTIFACT_RECOGNIZER: &str = "recognizer_checkpoint";
pub const ARTIFACT_METRICS: &str = "metrics_report";

fn lifter_ckpt_path(out: &Path) -> PathBuf {
    out.join("lifter.ckpt")
}
fn cache_path(out: &Path) -> PathBuf {
    out.join("images.cache")
}
fn genotype_path(out: &Path) -> PathBuf {
    out.join("genotype.txt")
}
fn recognizer_ckpt_path(out: &Path) -> PathBuf {
    out.join("recognizer.ckpt")
}
fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.json")
}

/// The action dataset plus per-sample 2D views, rebuilt deterministically
/// from config on every command.
struct World {
    /// 3D ground-truth samples (synthetic mode); in files mode the action
    /// samples carry the detector 2D sequences instead.
    samples: Vec<LabeledSample>,
    /// Detector-space 2D sequence per sample, parallel to `samples`.
    det_2d: Vec<PoseSequence>,
    /// Ground-truth 2D per sample (synthetic mode only).
    gt_2d: Vec<PoseSequence>,
    class_names: Vec<String>,
    subsets: Option<Vec<(String, Vec<usize>)>>,
    /// Whether samples hold 3D ground truth usable for lifter training.
    has_gt_3d: bool,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn build_synthetic_world(config: &PipelineConfig) -> Result<World, CliError> {
    let synth = config.synthetic.to_synth();
    let samples = generate_synthetic_actions(&synth, config.synthetic.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let camera = config.camera.to_camera();
    let noise_std = config.synthetic.detector_noise_std.max(0.0);
    let mut det_2d = Vec::with_capacity(samples.len());
    let mut gt_2d = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let frames = sample
            .sequence
            .as_3d()
            .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
        let mut gt_frames = Vec::with_capacity(frames.len());
        for pose in frames {
            let projected = project(pose, &camera).map_err(|e| {
                CliError::Numeric(format!("projection failed for '{}': {e}", sample.id))
            })?;
            gt_frames.push(projected);
        }
        // Simulated detector output: ground-truth 2D plus pixel jitter.
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
            config.synthetic.seed ^ (idx as u64).wrapping_mul(0xD1B54A32D192ED03),
        ));
        let noise = Normal::new(0.0, noise_std.max(1e-12)).unwrap();
        let det_frames: Vec<Pose2D> = gt_frames
            .iter()
            .map(|frame| {
                let keypoints = frame
                    .keypoints
                    .iter()
                    .map(|kp| {
                        if noise_std > 0.0 {
                            [kp[0] + noise.sample(&mut rng), kp[1] + noise.sample(&mut rng)]
                        } else {
                            *kp
                        }
                    })
                    .collect();
                Pose2D {
                    keypoints,
                    confidence: None,
                    source: PoseSource::Detector,
                }
            })
            .collect();
        let rate = sample.sequence.frame_rate;
        gt_2d.push(
            PoseSequence::from_2d(gt_frames, rate)
                .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?,
        );
        det_2d.push(
            PoseSequence::from_2d(det_frames, rate)
                .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?,
        );
    }
    Ok(World {
        class_names: synth_class_names(&synth),
        samples,
        det_2d,
        gt_2d,
        subsets: None,
        has_gt_3d: true,
    })
}

fn build_files_world(config: &PipelineConfig) -> Result<World, CliError> {
    let registry = SchemaRegistry::load(Path::new(&config.dataset.schema_registry))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let schema = registry
        .get(&config.dataset.schema)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let actions = load_pose_dataset(
        Path::new(&config.dataset.actions_det_2d),
        &config.dataset.schema,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let mut det_2d = Vec::with_capacity(actions.samples.len());
    for sample in &actions.samples {
        det_2d.push(sample.sequence.clone());
    }
    Ok(World {
        class_names: actions.meta.class_names.clone(),
        det_2d: det_2d.clone(),
        gt_2d: det_2d,
        subsets: if schema.subsets.is_empty() {
            None
        } else {
            Some(schema.subsets.clone())
        },
        samples: actions.samples,
        has_gt_3d: false,
    })
}

fn build_world(config: &PipelineConfig) -> Result<World, CliError> {
    match config.dataset.source.as_str() {
        "synthetic" => build_synthetic_world(config),
        "files" => build_files_world(config),
        other => Err(CliError::Config(format!("unknown dataset source '{other}'"))),
    }
}

/// Lifter training triples. Synthetic mode pairs the projected views with
/// the generated 3D; files mode pairs the three lifter datasets.
fn lifter_examples(
    config: &PipelineConfig,
    world: &World,
    tag: &str,
) -> Result<Vec<LiftingExample>, CliError> {
    if config.dataset.source == "files" {
        let gt2 = load_pose_dataset(Path::new(&config.dataset.gt_2d), &config.dataset.schema)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let det2 = load_pose_dataset(Path::new(&config.dataset.det_2d), &config.dataset.schema)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let gt3 = load_pose_dataset(Path::new(&config.dataset.gt_3d), &config.dataset.schema)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let (train, test) = split_dataset(
            &gt3.samples,
            SplitProtocol::RandomHoldout,
            None,
            config.lifter.holdout_seed,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        let wanted: std::collections::HashSet<&str> = match tag {
            "train" => train.iter().map(|s| s.id.as_str()).collect(),
            _ => test.iter().map(|s| s.id.as_str()).collect(),
        };
        let mut gt3_tagged = gt3.clone();
        gt3_tagged.samples = gt3
            .samples
            .iter()
            .filter(|s| wanted.contains(s.id.as_str()))
            .map(|s| s.tagged(tag))
            .collect();
        let mut gt2_sel = gt2.clone();
        gt2_sel.samples = gt2
            .samples
            .iter()
            .filter(|s| wanted.contains(s.id.as_str()))
            .cloned()
            .collect();
        let mut det2_sel = det2.clone();
        det2_sel.samples = det2
            .samples
            .iter()
            .filter(|s| wanted.contains(s.id.as_str()))
            .cloned()
            .collect();
        return pair_training_data(&gt2_sel, &det2_sel, &gt3_tagged)
            .map_err(|e| CliError::Config(e.to_string()));
    }

    // Synthetic: a per-sample holdout split, then per-frame triples.
    let (train, test) = split_dataset(
        &world.samples,
        SplitProtocol::RandomHoldout,
        None,
        config.lifter.holdout_seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let selected = if tag == "train" { &train } else { &test };
    let index_of: std::collections::HashMap<&str, usize> = world
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut examples = Vec::new();
    for sample in selected {
        let idx = index_of[sample.id.as_str()];
        let gt3 = sample
            .sequence
            .as_3d()
            .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
        let gt2 = world.gt_2d[idx]
            .as_2d()
            .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
        let det2 = world.det_2d[idx]
            .as_2d()
            .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
        for ((g3, g2), d2) in gt3.iter().zip(gt2).zip(det2) {
            examples.push(LiftingExample {
                gt_2d: g2.clone(),
                det_2d: d2.clone(),
                gt_3d: g3.clone(),
                split_tag: sample.split_tag.clone(),
            });
        }
    }
    Ok(examples)
}

fn protocol_of(config: &PipelineConfig) -> Result<SplitProtocol, CliError> {
    SplitProtocol::parse(&config.pipeline.protocol).map_err(|e| CliError::Config(e.to_string()))
}

/// Tag map (sample id -> train/test) under the configured action protocol.
fn action_split_tags(
    config: &PipelineConfig,
    world: &World,
) -> Result<BTreeMap<String, String>, CliError> {
    let protocol = protocol_of(config)?;
    let fold = match protocol {
        SplitProtocol::Sbu5Fold => Some(config.pipeline.fold),
        _ => None,
    };
    let (train, test) = split_dataset(&world.samples, protocol, fold, config.pipeline.split_seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut tags = BTreeMap::new();
    for s in train {
        tags.insert(s.id.clone(), "train".to_string());
    }
    for s in test {
        tags.insert(s.id.clone(), "test".to_string());
    }
    Ok(tags)
}

fn check_finite(history: &[f64], stage: &str) -> Result<(), CliError> {
    if history.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric(format!(
            "{stage}: non-finite loss detected (history: {history:?})"
        )));
    }
    Ok(())
}

fn echo_config(config: &PipelineConfig, out_dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Other(anyhow::anyhow!("creating out dir: {e}")))?;
    std::fs::write(out_dir.join("config.echo.toml"), render_config(config))
        .map_err(|e| CliError::Other(anyhow::anyhow!("writing config echo: {e}")))?;
    Ok(())
}

fn require_artifact(path: &Path, name: &str, produce_with: &str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            artifact: name.to_string(),
            produce_with: produce_with.to_string(),
        });
    }
    Ok(())
}

#[derive(Debug)]
pub struct StageResult {
    pub metrics: BTreeMap<String, f64>,
}

fn run_lift_train(
    config: &PipelineConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<StageResult, CliError> {
    let start = Instant::now();
    let world = build_world(config)?;
    if config.dataset.source == "synthetic" && !world.has_gt_3d {
        return Err(CliError::Config("synthetic world missing 3D ground truth".into()));
    }
    let examples = lifter_examples(config, &world, "train")?;
    let train_config = config.lifter.to_train_config();
    let (params, history) =
        train_lifter(&examples, &train_config).map_err(|e| CliError::Config(e.to_string()))?;
    check_finite(&history, "lift-train")?;
    let echo = serde_json::to_value(&config.lifter)
        .map_err(|e| CliError::Other(anyhow::anyhow!("config echo: {e}")))?;
    let path = lifter_ckpt_path(out_dir);
    save_checkpoint(&path, &params, &echo).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    manifest.record_artifact(ARTIFACT_LIFTER, &path)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("final_train_loss".into(), *history.last().unwrap());
    metrics.insert("examples".into(), examples.len() as f64);
    metrics.insert("epochs".into(), history.len() as f64);
    manifest.record_stage("lift_train", start.elapsed().as_millis() as u64, metrics.clone());
    println!(
        "lift-train: {} examples, {} epochs, final loss {:.6}",
        examples.len(),
        history.len(),
        history.last().unwrap()
    );
    Ok(StageResult { metrics })
}

fn run_lift_eval(
    config: &PipelineConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<StageResult, CliError> {
    let start = Instant::now();
    let path = lifter_ckpt_path(out_dir);
    require_artifact(&path, ARTIFACT_LIFTER, "lift-train")?;
    let (params, _) = load_checkpoint(&path).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    let world = build_world(config)?;
    if !world.has_gt_3d && config.dataset.source == "synthetic" {
        return Err(CliError::Config("no 3D ground truth to evaluate against".into()));
    }

    // Evaluate on the lifter holdout split.
    let (preds, gts, labels) = if config.dataset.source == "files" {
        let examples = lifter_examples(config, &world, "test")?;
        if examples.is_empty() {
            return Err(CliError::Config("empty lifter evaluation split".into()));
        }
        let rate = 1.0;
        let frames: Vec<Pose2D> = examples.iter().map(|e| e.det_2d.clone()).collect();
        let seq = PoseSequence::from_2d(frames, rate)
            .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
        let lifted = predict_3d(&params, &seq).map_err(|e| CliError::Numeric(e.to_string()))?;
        let preds = lifted
            .as_3d()
            .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?
            .to_vec();
        let gts: Vec<Pose3D> = examples.iter().map(|e| root_center(&e.gt_3d)).collect();
        (preds, gts, vec![0usize; examples.len()])
    } else {
        let (_, test) = split_dataset(
            &world.samples,
            SplitProtocol::RandomHoldout,
            None,
            config.lifter.holdout_seed,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        let index_of: std::collections::HashMap<&str, usize> = world
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut labels = Vec::new();
        for sample in &test {
            let idx = index_of[sample.id.as_str()];
            let lifted = predict_3d(&params, &world.det_2d[idx])
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            let lifted_frames = lifted
                .as_3d()
                .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
            let gt_frames = sample
                .sequence
                .as_3d()
                .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
            for (p, g) in lifted_frames.iter().zip(gt_frames) {
                preds.push(p.clone());
                gts.push(root_center(g));
                labels.push(sample.label);
            }
        }
        (preds, gts, labels)
    };

    let overall = mpjpe(&preds, &gts).map_err(|e| CliError::Numeric(e.to_string()))?;
    // Per-class errors in the benchmark row shape.
    let mut per_class = Vec::new();
    if !world.class_names.is_empty() {
        for (k, name) in world.class_names.iter().enumerate() {
            let idx: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == k)
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let p: Vec<Pose3D> = idx.iter().map(|&i| preds[i].clone()).collect();
            let g: Vec<Pose3D> = idx.iter().map(|&i| gts[i].clone()).collect();
            let err = mpjpe(&p, &g).map_err(|e| CliError::Numeric(e.to_string()))?;
            per_class.push((name.clone(), err));
        }
    }
    println!("MPJPE: {overall:.2} mm over {} poses", preds.len());
    print!(
        "{}",
        skelact::recognizer::render_mpjpe_row("ours", &per_class, overall)
    );

    let mut metrics = BTreeMap::new();
    metrics.insert("mpjpe_mm".into(), overall);
    metrics.insert("poses".into(), preds.len() as f64);
    manifest.record_stage("lift_eval", start.elapsed().as_millis() as u64, metrics.clone());
    Ok(StageResult { metrics })
}

fn run_encode(
    config: &PipelineConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<StageResult, CliError> {
    let start = Instant::now();
    let ckpt = lifter_ckpt_path(out_dir);
    require_artifact(&ckpt, ARTIFACT_LIFTER, "lift-train")?;
    let (params, _) = load_checkpoint(&ckpt).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    let world = build_world(config)?;
    let encoder = config.encoder.to_encoder()?;
    let mut entries = Vec::with_capacity(world.samples.len());
    for (idx, sample) in world.samples.iter().enumerate() {
        let lifted = predict_3d(&params, &world.det_2d[idx])
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let image = encode_with_id(&lifted, &encoder, &sample.id)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        entries.push(CachedImage {
            image,
            label: sample.label,
        });
    }
    let path = cache_path(out_dir);
    write_image_cache(&path, &encoder, &entries)
        .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    manifest.record_artifact(ARTIFACT_CACHE, &path)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("samples".into(), entries.len() as f64);
    manifest.record_stage("encode", start.elapsed().as_millis() as u64, metrics.clone());
    println!("encode: {} samples cached", entries.len());
    Ok(StageResult { metrics })
}

/// Load the cache and tag entries by the configured action split.
fn load_tagged_dataset(
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<EncodedDataset, CliError> {
    let path = cache_path(out_dir);
    require_artifact(&path, ARTIFACT_CACHE, "encode")?;
    let encoder = config.encoder.to_encoder()?;
    let cache = load_image_cache(&path, &encoder)
        .map_err(|e| CliError::Config(format!("image cache: {e}")))?;
    let world = build_world(config)?;
    let tags = action_split_tags(config, &world)?;
    let num_classes = world.class_names.len().max(
        cache
            .entries
            .iter()
            .map(|e| e.label + 1)
            .max()
            .unwrap_or(1),
    );
    let mut dataset = EncodedDataset::from_cache(&cache.entries, num_classes);
    for (i, entry) in cache.entries.iter().enumerate() {
        let tag = tags.get(&entry.image.provenance).ok_or_else(|| {
            CliError::Config(format!(
                "cached sample '{}' not present in the configured dataset",
                entry.image.provenance
            ))
        })?;
        dataset.tags[i] = Some(tag.clone());
    }
    Ok(dataset)
}

fn train_val_split(
    dataset: &EncodedDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(EncodedDataset, EncodedDataset), CliError> {
    use rand::seq::SliceRandom;
    let train_idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.tags[i].as_deref() == Some("train"))
        .collect();
    if train_idx.is_empty() {
        return Err(CliError::Config("no train-tagged samples".into()));
    }
    let mut order = train_idx.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x76616c5f73706c69));
    order.shuffle(&mut rng);
    let n_val = ((order.len() as f64 * val_fraction).ceil() as usize)
        .clamp(1, order.len().saturating_sub(1).max(1));
    let (val_ids, train_ids) = order.split_at(n_val);
    Ok((dataset.subset(train_ids), dataset.subset(val_ids)))
}

fn run_search_stage(
    config: &PipelineConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<StageResult, CliError> {
    let start = Instant::now();
    let dataset = load_tagged_dataset(config, out_dir)?;
    let (train, val) = train_val_split(&dataset, config.search.val_fraction, config.search.seed)?;
    let search_config = config.search.to_search_config();
    let (genotype, history, _, _) =
        run_search(&train, &val, &search_config).map_err(|e| CliError::Numeric(e.to_string()))?;
    check_finite(&history.shared_loss, "search")?;
    let path = genotype_path(out_dir);
    write_genotype(
        &path,
        &genotype,
        &search_config.space,
        config.search.seed,
        &config_hash(config),
    )
    .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    manifest.record_artifact(ARTIFACT_GENOTYPE, &path)?;
    let mut metrics = BTreeMap::new();
    if !history.mean_reward.is_empty() {
        let n5 = history.mean_reward.len().min(5);
        let first5: f64 = history.mean_reward[..n5].iter().sum::<f64>() / n5 as f64;
        let last5: f64 =
            history.mean_reward[history.mean_reward.len() - n5..].iter().sum::<f64>() / n5 as f64;
        metrics.insert("mean_reward_first5".into(), first5);
        metrics.insert("mean_reward_last5".into(), last5);
        metrics.insert("final_shared_loss".into(), *history.shared_loss.last().unwrap());
    }
    metrics.insert("train_samples".into(), train.len() as f64);
    metrics.insert("val_samples".into(), val.len() as f64);
    manifest.record_stage("search", start.elapsed().as_millis() as u64, metrics.clone());
    println!(
        "search: {} epochs, derived genotype written to {}",
        history.mean_reward.len(),
        path.display()
    );
    Ok(StageResult { metrics })
}

fn run_recog_train(
    config: &PipelineConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<StageResult, CliError> {
    let start = Instant::now();
    let gpath = genotype_path(out_dir);
    require_artifact(&gpath, ARTIFACT_GENOTYPE, "search")?;
    let (genotype, space) =
        load_genotype(&gpath).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    let dataset = load_tagged_dataset(config, out_dir)?;
    let train_idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.tags[i].as_deref() == Some("train"))
        .collect();
    if train_idx.is_empty() {
        return Err(CliError::Config("no train-tagged samples for the recognizer".into()));
    }
    let train = dataset.subset(&train_idx);
    let net_config = config
        .recognizer
        .to_final_config(space.stem_channels, dataset.num_classes);
    let mut params = if config.recognizer.inherit_weights {
        // Reproduce the (deterministic) search to recover the shared store.
        let (search_train, search_val) =
            train_val_split(&dataset, config.search.val_fraction, config.search.seed)?;
        let (_, _, store, _) =
            run_search(&search_train, &search_val, &config.search.to_search_config())
                .map_err(|e| CliError::Numeric(e.to_string()))?;
        build_final_network_inherited(&genotype, &net_config, &store, config.recognizer.seed)
            .map_err(|e| CliError::Config(e.to_string()))?
    } else {
        build_final_network(&genotype, &net_config, config.recognizer.seed)
            .map_err(|e| CliError::Config(e.to_string()))?
    };
    let history = train_recognizer(&mut params, &train, &net_config, config.recognizer.seed)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    check_finite(&history, "recog-train")?;
    let echo = serde_json::to_value(&config.recognizer)
        .map_err(|e| CliError::Other(anyhow::anyhow!("config echo: {e}")))?;
    let path = recognizer_ckpt_path(out_dir);
    save_recognizer(&path, &params, &echo).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    manifest.record_artifact(ARTIFACT_RECOGNIZER, &path)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("final_train_loss".into(), *history.last().unwrap());
    metrics.insert("train_samples".into(), train.len() as f64);
    manifest.record_stage("recog_train", start.elapsed().as_millis() as u64, metrics.clone());
    println!(
        "recog-train: {} samples, final loss {:.6}",
        train.len(),
        history.last().unwrap()
    );
    Ok(StageResult { metrics })
}

fn run_recog_eval(
    config: &PipelineConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<StageResult, CliError> {
    let start = Instant::now();
    let protocol = protocol_of(config)?;
    let report: ProtocolReport = match protocol {
        SplitProtocol::MsrHalf | SplitProtocol::Sbu5Fold => {
            // Multi-split protocols retrain per subset/fold from the
            // derived genotype, mirroring the benchmark procedure.
            let gpath = genotype_path(out_dir);
            require_artifact(&gpath, ARTIFACT_GENOTYPE, "search")?;
            let (genotype, space) =
                load_genotype(&gpath).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
            let world = build_world(config)?;
            let num_classes = world.class_names.len().max(2);
            let eval_config = ProtocolEvalConfig {
                encoder: config.encoder.to_encoder()?,
                final_net: config
                    .recognizer
                    .to_final_config(space.stem_channels, num_classes),
                subsets: world.subsets.clone().or_else(|| {
                    (protocol == SplitProtocol::MsrHalf).then(|| {
                        // Fall back to three round-robin class groups.
                        let k = num_classes;
                        let mut groups: Vec<(String, Vec<usize>)> = (0..3)
                            .map(|g| (format!("AS{}", g + 1), Vec::new()))
                            .collect();
                        for c in 0..k {
                            groups[c % 3].1.push(c);
                        }
                        groups
                    })
                }),
                seed: config.pipeline.split_seed,
            };

            // 3D sequences are required to re-encode per subset.
            if !world.has_gt_3d {
                let ckpt = lifter_ckpt_path(out_dir);
                require_artifact(&ckpt, ARTIFACT_LIFTER, "lift-train")?;
                let (params, _) =
                    load_checkpoint(&ckpt).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
                let mut lifted_samples = Vec::with_capacity(world.samples.len());
                for (idx, sample) in world.samples.iter().enumerate() {
                    let lifted = predict_3d(&params, &world.det_2d[idx])
                        .map_err(|e| CliError::Numeric(e.to_string()))?;
                    let mut s = sample.clone();
                    s.sequence = lifted;
                    lifted_samples.push(s);
                }
                evaluate_protocol(&genotype, &lifted_samples, protocol, &eval_config)
                    .map_err(|e| CliError::Numeric(e.to_string()))?
            } else {
                evaluate_protocol(&genotype, &world.samples, protocol, &eval_config)
                    .map_err(|e| CliError::Numeric(e.to_string()))?
            }
        }
        _ => {
            // Single-split protocols evaluate the trained checkpoint.
            let rpath = recognizer_ckpt_path(out_dir);
            require_artifact(&rpath, ARTIFACT_RECOGNIZER, "recog-train")?;
            let (params, _) =
                load_recognizer(&rpath).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
            let dataset = load_tagged_dataset(config, out_dir)?;
            let test_idx: Vec<usize> = (0..dataset.len())
                .filter(|&i| dataset.tags[i].as_deref() == Some("test"))
                .collect();
            if test_idx.is_empty() {
                return Err(CliError::Config("no test-tagged samples".into()));
            }
            let test = dataset.subset(&test_idx);
            let (accuracy, confusion) =
                evaluate_accuracy(&params, &test).map_err(|e| CliError::Numeric(e.to_string()))?;
            ProtocolReport {
                protocol: protocol.name().to_string(),
                rows: vec![SplitRow {
                    name: protocol.name().to_string(),
                    accuracy,
                }],
                average: accuracy,
                confusions: vec![confusion],
            }
        }
    };

    let metrics_report = MetricsReport {
        version: 1,
        protocol: report.protocol.clone(),
        config_hash: config_hash(config),
        seed: config.pipeline.split_seed,
        rows: report.rows.clone(),
        average: report.average,
        confusions: report.confusions.clone(),
    };
    let path = metrics_path(out_dir);
    std::fs::write(&path, render_metrics_report(&metrics_report))
        .map_err(|e| CliError::Other(anyhow::anyhow!("metrics write: {e}")))?;
    manifest.record_artifact(ARTIFACT_METRICS, &path)?;
    print!("{}", render_table_row("ours", &report.rows, report.average));
    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".into(), report.average);
    manifest.record_stage("recog_eval", start.elapsed().as_millis() as u64, metrics.clone());
    Ok(StageResult { metrics })
}

type StageRunner = fn(&PipelineConfig, &Path, &mut RunManifest) -> Result<StageResult, CliError>;

fn with_manifest(
    config: &PipelineConfig,
    out_dir: &Path,
    stages: &[StageRunner],
) -> Result<Vec<StageResult>, CliError> {
    let _lock = DirLock::acquire(out_dir)?;
    echo_config(config, out_dir)?;
    let hash = config_hash(config);
    println!("config {hash}");
    let mut manifest = RunManifest::load_or_new(out_dir, &hash);
    let mut results = Vec::new();
    for stage in stages {
        let result = stage(config, out_dir, &mut manifest)?;
        manifest.write(out_dir)?;
        results.push(result);
    }
    Ok(results)
}

pub fn cmd_lift_train(config: &PipelineConfig, out_dir: &Path) -> Result<StageResult, CliError> {
    Ok(with_manifest(config, out_dir, &[run_lift_train])?.pop().unwrap())
}

pub fn cmd_lift_eval(config: &PipelineConfig, out_dir: &Path) -> Result<StageResult, CliError> {
    Ok(with_manifest(config, out_dir, &[run_lift_eval])?.pop().unwrap())
}

pub fn cmd_encode(config: &PipelineConfig, out_dir: &Path) -> Result<StageResult, CliError> {
    Ok(with_manifest(config, out_dir, &[run_encode])?.pop().unwrap())
}

pub fn cmd_search(config: &PipelineConfig, out_dir: &Path) -> Result<StageResult, CliError> {
    Ok(with_manifest(config, out_dir, &[run_search_stage])?.pop().unwrap())
}

pub fn cmd_recog_train(config: &PipelineConfig, out_dir: &Path) -> Result<StageResult, CliError> {
    Ok(with_manifest(config, out_dir, &[run_recog_train])?.pop().unwrap())
}

pub fn cmd_recog_eval(config: &PipelineConfig, out_dir: &Path) -> Result<StageResult, CliError> {
    Ok(with_manifest(config, out_dir, &[run_recog_eval])?.pop().unwrap())
}

/// The end-to-end run: estimation, encoding, search, recognition.
pub fn cmd_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<Vec<StageResult>, CliError> {
    with_manifest(
        config,
        out_dir,
        &[
            run_lift_train,
            run_lift_eval,
            run_encode,
            run_search_stage,
            run_recog_train,
            run_recog_eval,
        ],
    )
}
