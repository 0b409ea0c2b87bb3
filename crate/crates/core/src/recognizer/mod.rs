//! Final recognizer: instantiate a derived genotype as a standalone
//! network, train it from scratch (or from inherited shared weights) with
//! crop/flip augmentation, and evaluate action accuracy per protocol.

mod checkpoint;
mod report;

pub use checkpoint::{load_recognizer, save_recognizer, RECOGNIZER_VERSION};
pub use report::{render_metrics_report, render_mpjpe_row, render_table_row, MetricsReport, SplitRow};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{root_center, LabeledSample, PoseSequence, SplitProtocol};
use crate::encoder::{encode_with_id, EncoderConfig, SPMFImage};
use crate::nas::{
    apply_bn_sites, cosine_lr, init_standalone, supernet_backward_full, supernet_forward,
    CellGenotype, CellKind, EncodedDataset, NetMode, ParamStore, Scope, SearchSpace,
    SharedOptConfig, SharedOptState,
};
use crate::nn::argmax_rows;

#[derive(Debug, Error)]
pub enum RecognizerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nas(#[from] crate::nas::NasError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub crop_padding: usize,
    pub hflip_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalNetConfig {
    pub cells_per_stage: usize,
    pub stem_channels: usize,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub augment: AugmentConfig,
    /// Start from the shared weights instead of fresh initialization.
    pub inherit_weights: bool,
}

impl Default for FinalNetConfig {
    fn default() -> Self {
        Self {
            cells_per_stage: 2,
            stem_channels: 16,
            num_classes: 2,
            epochs: 30,
            batch_size: 8,
            lr_max: 0.05,
            lr_min: 0.001,
            momentum: 0.9,
            clip_norm: 5.0,
            augment: AugmentConfig {
                crop_padding: 4,
                hflip_prob: 0.5,
            },
            inherit_weights: false,
        }
    }
}

impl FinalNetConfig {
    pub fn validate(&self) -> Result<(), RecognizerError> {
        if self.num_classes < 2 {
            return Err(RecognizerError::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            return Err(RecognizerError::Config(format!(
                "hflip probability {} outside [0, 1]",
                self.augment.hflip_prob
            )));
        }
        if self.cells_per_stage == 0 || self.stem_channels == 0 {
            return Err(RecognizerError::Config("degenerate network size".into()));
        }
        Ok(())
    }
}

/// Standalone parameters built from a genotype in the final macro layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerParams {
    pub store: ParamStore,
    pub genotype: CellGenotype,
}

/// Final macro layout: [normal x cps, reduction] x 2, then normal x cps.
pub fn final_layout(cells_per_stage: usize) -> Vec<CellKind> {
    let mut layout = Vec::new();
    for _ in 0..2 {
        layout.extend(std::iter::repeat_n(CellKind::Normal, cells_per_stage));
        layout.push(CellKind::Reduction);
    }
    layout.extend(std::iter::repeat_n(CellKind::Normal, cells_per_stage));
    layout
}

fn space_for(genotype: &CellGenotype, stem_channels: usize) -> SearchSpace {
    SearchSpace::standard(genotype.normal.len(), stem_channels)
}

/// Fresh He-initialized standalone network for the genotype.
pub fn build_final_network(
    genotype: &CellGenotype,
    config: &FinalNetConfig,
    seed: u64,
) -> Result<RecognizerParams, RecognizerError> {
    config.validate()?;
    let space = space_for(genotype, config.stem_channels);
    let layout = final_layout(config.cells_per_stage);
    let store = init_standalone(&space, config.num_classes, &layout, genotype, seed)?;
    Ok(RecognizerParams {
        store,
        genotype: genotype.clone(),
    })
}

/// Build the final network from shared search weights instead of fresh
/// initialization: op entries copy their shared counterparts, projections
/// copy the loose-set slice.
pub fn build_final_network_inherited(
    genotype: &CellGenotype,
    config: &FinalNetConfig,
    shared: &ParamStore,
    seed: u64,
) -> Result<RecognizerParams, RecognizerError> {
    let mut built = build_final_network(genotype, config, seed)?;
    if shared.space.stem_channels != config.stem_channels {
        return Err(RecognizerError::Config(format!(
            "shared store has {} channels, final config {}",
            shared.space.stem_channels, config.stem_channels
        )));
    }
    if shared.num_classes != config.num_classes {
        return Err(RecognizerError::Config("class count mismatch".into()));
    }
    built.store.stem = shared.stem.clone();
    built.store.classifier = shared.classifier.clone();
    let c = config.stem_channels;
    let layout = built.store.layout.clone();
    let keys: Vec<crate::nas::OpKey> = built.store.ops.keys().copied().collect();
    for key in keys {
        let cell_idx = match key.scope {
            Scope::Instance(i) => i,
            Scope::Shared(_) => continue,
        };
        let shared_key = crate::nas::OpKey {
            scope: Scope::Shared(layout[cell_idx]),
            ..key
        };
        let source = shared.ops.get(&shared_key).ok_or_else(|| {
            RecognizerError::Config(format!("shared store missing {shared_key:?}"))
        })?;
        built.store.ops.insert(key, source.clone());
    }
    let scopes: Vec<Scope> = built.store.projections.keys().copied().collect();
    for scope in scopes {
        let cell_idx = match scope {
            Scope::Instance(i) => i,
            Scope::Shared(_) => continue,
        };
        let kind = layout[cell_idx];
        let loose = genotype.loose_ends(kind);
        let shared_proj = shared
            .projections
            .get(&Scope::Shared(kind))
            .ok_or_else(|| RecognizerError::Config("shared projection missing".into()))?;
        let mut slice = ndarray::Array2::zeros((c, loose.len() * c));
        for (li, &node) in loose.iter().enumerate() {
            for row in 0..c {
                for col in 0..c {
                    slice[[row, li * c + col]] = shared_proj[[row, node * c + col]];
                }
            }
        }
        built.store.projections.insert(scope, slice);
    }
    Ok(built)
}

/// Zero-pad, random-crop back to size, flip horizontally (the time axis)
/// with the configured probability. Deterministic per seed.
pub fn augment(img: &SPMFImage, config: &AugmentConfig, seed: u64) -> SPMFImage {
    let (h, w, _) = img.pixels.dim();
    let p = config.crop_padding;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dy = rng.random_range(0..=2 * p);
    let dx = rng.random_range(0..=2 * p);
    let flip = rng.random::<f64>() < config.hflip_prob;
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            // Crop window position (dy, dx) inside the padded image.
            let sy = (y + dy) as isize - p as isize;
            let sx = (x + dx) as isize - p as isize;
            for ch in 0..3 {
                let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    img.pixels[[sy as usize, sx as usize, ch]]
                } else {
                    0.0
                };
                let tx = if flip { w - 1 - x } else { x };
                out[[y, tx, ch]] = v;
            }
        }
    }
    SPMFImage {
        pixels: out,
        provenance: img.provenance.clone(),
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Seeded mini-batch training with cross-entropy, Nesterov momentum and
/// cosine annealing; augmentation is re-drawn every epoch. Returns the
/// per-epoch mean train loss.
pub fn train_recognizer(
    params: &mut RecognizerParams,
    images: &EncodedDataset,
    config: &FinalNetConfig,
    seed: u64,
) -> Result<Vec<f64>, RecognizerError> {
    use rand::seq::SliceRandom;
    config.validate()?;
    if images.is_empty() {
        return Err(RecognizerError::Empty("recognizer training set".into()));
    }
    if images.has_test_tag() {
        return Err(RecognizerError::Config(
            "test-tagged samples passed to training".into(),
        ));
    }
    let (h, w, _) = images.images[0].pixels.dim();
    if config.augment.crop_padding >= h.min(w) {
        return Err(RecognizerError::Config(format!(
            "crop padding {} too large for {h}x{w} images",
            config.augment.crop_padding
        )));
    }
    let n = images.len();
    let steps_per_epoch = n.div_ceil(config.batch_size.max(1));
    let mut opt = SharedOptState::new(
        &params.store,
        SharedOptConfig {
            lr_max: config.lr_max,
            lr_min: config.lr_min,
            momentum: config.momentum,
            batch_size: config.batch_size,
            total_steps: (config.epochs * steps_per_epoch).max(1),
            clip_norm: config.clip_norm,
        },
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            // Augment the batch, one seed per (epoch, sample).
            let augmented: Vec<SPMFImage> = chunk
                .iter()
                .map(|&i| {
                    let s = splitmix64(seed ^ ((epoch as u64) << 32 | i as u64));
                    augment(&images.images[i], &config.augment, s)
                })
                .collect();
            let batch_ds = EncodedDataset {
                images: augmented,
                labels: chunk.iter().map(|&i| images.labels[i]).collect(),
                tags: vec![None; chunk.len()],
                num_classes: images.num_classes,
            };
            let idx: Vec<usize> = (0..chunk.len()).collect();
            let (x, labels) = batch_ds.batch(&idx);
            let (loss, grads, bn_sites) =
                supernet_backward_full(&params.store, &params.genotype, &x, &labels)?;
            let lr = cosine_lr(
                opt.step.min(opt.config.total_steps),
                opt.config.total_steps,
                config.lr_max,
                config.lr_min,
            )?;
            let mut flat = params.store.flatten();
            let mut grad_flat = grads.flatten(&params.store);
            crate::opt::clip_global_norm(&mut grad_flat, config.clip_norm);
            opt.nesterov.step(&mut flat, &grad_flat, lr);
            params.store.set_flat(&flat);
            apply_bn_sites(&mut params.store, &bn_sites);
            opt.step += 1;
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}

/// Argmax accuracy and the K x K confusion matrix (rows are true labels).
/// Evaluation runs the network with running statistics and no augmentation.
pub fn evaluate_accuracy(
    params: &RecognizerParams,
    images: &EncodedDataset,
) -> Result<(f64, Vec<Vec<usize>>), RecognizerError> {
    if images.is_empty() {
        return Err(RecognizerError::Empty("evaluation set".into()));
    }
    let k = images.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let idx: Vec<usize> = (0..images.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(32) {
        let (x, labels) = images.batch(chunk);
        let logits = supernet_forward(&params.store, &params.genotype, &x, NetMode::Eval, 0)?;
        for (pred, &label) in argmax_rows(&logits).iter().zip(&labels) {
            confusion[label][*pred] += 1;
            if *pred == label {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / images.len() as f64, confusion))
}

/// Everything evaluate_protocol needs besides the samples.
#[derive(Debug, Clone)]
pub struct ProtocolEvalConfig {
    pub encoder: EncoderConfig,
    pub final_net: FinalNetConfig,
    /// Class groups for the subset protocol (name, class ids). Required
    /// for msr_half; ignored otherwise.
    pub subsets: Option<Vec<(String, Vec<usize>)>>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub protocol: String,
    pub rows: Vec<SplitRow>,
    pub average: f64,
    pub confusions: Vec<Vec<Vec<usize>>>,
}

fn encode_samples(
    samples: &[LabeledSample],
    encoder: &EncoderConfig,
    num_classes: usize,
) -> Result<EncodedDataset, RecognizerError> {
    let mut images = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut tags = Vec::with_capacity(samples.len());
    for sample in samples {
        let frames = sample.sequence.as_3d()?;
        let centered: Vec<_> = frames.iter().map(root_center).collect();
        let seq = PoseSequence::from_3d(centered, sample.sequence.frame_rate)?;
        images.push(encode_with_id(&seq, encoder, &sample.id)?);
        labels.push(sample.label);
        tags.push(sample.split_tag.clone());
    }
    Ok(EncodedDataset {
        images,
        labels,
        tags,
        num_classes,
    })
}

/// Train/evaluate the genotype under a split protocol: one (train, test)
/// pass per subset or fold, reporting per-split accuracy and the mean.
pub fn evaluate_protocol(
    genotype: &CellGenotype,
    samples: &[LabeledSample],
    protocol: SplitProtocol,
    config: &ProtocolEvalConfig,
) -> Result<ProtocolReport, RecognizerError> {
    if samples.is_empty() {
        return Err(RecognizerError::Empty("protocol dataset".into()));
    }
    let num_classes = samples.iter().map(|s| s.label).max().unwrap() + 1;

    // Expand the protocol into named sample groups to split.
    let mut groups: Vec<(String, Vec<LabeledSample>, Option<usize>)> = Vec::new();
    match protocol {
        SplitProtocol::MsrHalf => {
            let subsets = config.subsets.clone().ok_or_else(|| {
                RecognizerError::Config("msr_half needs subset class groups".into())
            })?;
            for (name, classes) in subsets {
                // Remap labels to a dense 0..k range inside the subset.
                let mut members: Vec<LabeledSample> = Vec::new();
                for s in samples.iter().filter(|s| classes.contains(&s.label)) {
                    let mut remapped = s.clone();
                    remapped.label = classes.iter().position(|&c| c == s.label).unwrap();
                    members.push(remapped);
                }
                groups.push((name, members, None));
            }
        }
        SplitProtocol::Sbu5Fold => {
            for fold in 0..5 {
                groups.push((format!("fold{fold}"), samples.to_vec(), Some(fold)));
            }
        }
        SplitProtocol::H36mSubject | SplitProtocol::RandomHoldout => {
            groups.push((protocol.name().to_string(), samples.to_vec(), None));
        }
    }

    let mut rows = Vec::new();
    let mut confusions = Vec::new();
    for (i, (name, members, fold)) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(RecognizerError::Empty(format!("protocol group '{name}'")));
        }
        let split_seed = splitmix64(config.seed.wrapping_add(i as u64));
        let (train, test) =
            crate::data::split_dataset(members, protocol, *fold, split_seed)?;
        if train.is_empty() || test.is_empty() {
            return Err(RecognizerError::Empty(format!(
                "protocol group '{name}' produced an empty side"
            )));
        }
        let k = match protocol {
            SplitProtocol::MsrHalf => members.iter().map(|s| s.label).max().unwrap() + 1,
            _ => num_classes,
        };
        let train_ds = encode_samples(&train, &config.encoder, k)?;
        let test_ds = encode_samples(&test, &config.encoder, k)?;
        let mut net_config = config.final_net.clone();
        net_config.num_classes = k;
        let mut params =
            build_final_network(genotype, &net_config, splitmix64(config.seed ^ i as u64))?;
        train_recognizer(&mut params, &train_ds, &net_config, split_seed ^ 0x7472)?;
        let (accuracy, confusion) = evaluate_accuracy(&params, &test_ds)?;
        rows.push(SplitRow {
            name: name.clone(),
            accuracy,
        });
        confusions.push(confusion);
    }
    let average = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
    Ok(ProtocolReport {
        protocol: protocol.name().to_string(),
        rows,
        average,
        confusions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nas::{NodeGene, OpId};

    fn toy_genotype() -> CellGenotype {
        let node = |a: usize, oa: OpId, b: usize, ob: OpId| NodeGene {
            input_a: a,
            op_a: oa,
            input_b: b,
            op_b: ob,
        };
        CellGenotype {
            normal: vec![
                node(0, OpId::SepConv3x3, 1, OpId::Identity),
                node(2, OpId::Identity, 1, OpId::AvgPool3x3),
            ],
            reduction: vec![
                node(0, OpId::MaxPool3x3, 1, OpId::Identity),
                node(2, OpId::Identity, 1, OpId::MaxPool3x3),
            ],
        }
    }

    fn tiny_config() -> FinalNetConfig {
        FinalNetConfig {
            cells_per_stage: 1,
            stem_channels: 4,
            num_classes: 2,
            epochs: 2,
            batch_size: 4,
            lr_max: 0.02,
            lr_min: 0.001,
            augment: AugmentConfig {
                crop_padding: 2,
                hflip_prob: 0.5,
            },
            ..Default::default()
        }
    }

    fn toy_images(n: usize, hw: usize, classes: usize, seed: u64) -> EncodedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % classes;
            let base = 0.2 + 0.6 * label as f64 / (classes - 1).max(1) as f64;
            let pixels = Array3::from_shape_fn((hw, hw, 3), |(y, x, _)| {
                let texture = 0.25 * ((y as f64 * 0.7).sin() + (x as f64 * 1.1).cos());
                (base + texture + 0.1 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)
            });
            images.push(SPMFImage {
                pixels,
                provenance: format!("img{i}"),
            });
            labels.push(label);
        }
        EncodedDataset {
            images,
            labels,
            tags: vec![None; n],
            num_classes: classes,
        }
    }

    #[test]
    fn build_deterministic_per_seed() {
        let g = toy_genotype();
        let config = tiny_config();
        let a = build_final_network(&g, &config, 7).unwrap();
        let b = build_final_network(&g, &config, 7).unwrap();
        assert_eq!(a, b);
        let c = build_final_network(&g, &config, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn param_count_is_pure_function_of_genotype_and_config() {
        let g = toy_genotype();
        let config = tiny_config();
        let a = build_final_network(&g, &config, 1).unwrap();
        let b = build_final_network(&g, &config, 2).unwrap();
        assert_eq!(a.store.num_params(), b.store.num_params());
    }

    #[test]
    fn all_identity_genotype_closed_form_count() {
        let b_nodes = 2usize;
        let g = CellGenotype {
            normal: vec![
                NodeGene {
                    input_a: 0,
                    op_a: OpId::Identity,
                    input_b: 1,
                    op_b: OpId::Identity,
                };
                b_nodes
            ],
            reduction: vec![
                NodeGene {
                    input_a: 0,
                    op_a: OpId::Identity,
                    input_b: 1,
                    op_b: OpId::Identity,
                };
                b_nodes
            ],
        };
        let config = tiny_config();
        let params = build_final_network(&g, &config, 3).unwrap();
        let c = config.stem_channels;
        let k = config.num_classes;
        let cells = final_layout(config.cells_per_stage).len();
        // No conv ops anywhere, so the count is stem conv + stem BN
        // (gamma, beta) + classifier + one projection per cell whose loose
        // set is all b_nodes nodes: c x (b_nodes * c).
        let expect = (c * 3 * 3 * 3 + 2 * c) + (k * c + k) + cells * (c * b_nodes * c);
        assert_eq!(params.store.num_params(), expect);
    }

    #[test]
    fn augment_identity_when_disabled() {
        let images = toy_images(1, 8, 2, 3);
        let config = AugmentConfig {
            crop_padding: 0,
            hflip_prob: 0.0,
        };
        let out = augment(&images.images[0], &config, 99);
        assert_eq!(out, images.images[0]);
    }

    #[test]
    fn augment_flip_is_involution() {
        let images = toy_images(1, 8, 2, 5);
        let config = AugmentConfig {
            crop_padding: 0,
            hflip_prob: 1.0,
        };
        let once = augment(&images.images[0], &config, 1);
        assert_ne!(once, images.images[0]);
        let twice = augment(&once, &config, 2);
        assert_eq!(twice, images.images[0]);
    }

    #[test]
    fn augment_preserves_shape() {
        let images = toy_images(1, 8, 2, 7);
        let config = AugmentConfig {
            crop_padding: 3,
            hflip_prob: 0.5,
        };
        for seed in 0..20 {
            let out = augment(&images.images[0], &config, seed);
            assert_eq!(out.pixels.dim(), (8, 8, 3));
        }
    }

    #[test]
    fn training_is_deterministic_and_learns_toy_set() {
        let g = toy_genotype();
        let config = FinalNetConfig {
            epochs: 5,
            ..tiny_config()
        };
        let images = toy_images(16, 8, 2, 11);
        let mut p1 = build_final_network(&g, &config, 5).unwrap();
        let h1 = train_recognizer(&mut p1, &images, &config, 9).unwrap();
        let mut p2 = build_final_network(&g, &config, 5).unwrap();
        let h2 = train_recognizer(&mut p2, &images, &config, 9).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert!(
            h1.last().unwrap() < h1.first().unwrap(),
            "loss did not decrease: {h1:?}"
        );
    }

    #[test]
    fn test_tagged_training_rejected() {
        let g = toy_genotype();
        let config = tiny_config();
        let mut images = toy_images(8, 8, 2, 13);
        images.tags[3] = Some("test".into());
        let mut params = build_final_network(&g, &config, 1).unwrap();
        assert!(train_recognizer(&mut params, &images, &config, 1).is_err());
    }

    #[test]
    fn accuracy_and_confusion_consistency() {
        let g = toy_genotype();
        let config = FinalNetConfig {
            epochs: 6,
            ..tiny_config()
        };
        let images = toy_images(16, 8, 2, 17);
        let mut params = build_final_network(&g, &config, 3).unwrap();
        train_recognizer(&mut params, &images, &config, 3).unwrap();
        let (acc, confusion) = evaluate_accuracy(&params, &images).unwrap();
        let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
        assert_eq!(total, images.len());
        let trace: usize = (0..2).map(|i| confusion[i][i]).sum();
        assert!((acc - trace as f64 / total as f64).abs() < 1e-12);
        // Rows sum to per-class counts.
        for (label, row) in confusion.iter().enumerate() {
            let count = images.labels.iter().filter(|&&l| l == label).count();
            assert_eq!(row.iter().sum::<usize>(), count);
        }
    }

    #[test]
    fn accuracy_permutation_invariant() {
        let g = toy_genotype();
        let config = tiny_config();
        let images = toy_images(10, 8, 2, 19);
        let params = build_final_network(&g, &config, 2).unwrap();
        let (acc1, _) = evaluate_accuracy(&params, &images).unwrap();
        let perm: Vec<usize> = (0..images.len()).rev().collect();
        let shuffled = images.subset(&perm);
        let (acc2, _) = evaluate_accuracy(&params, &shuffled).unwrap();
        assert!((acc1 - acc2).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_hits_majority_fraction() {
        let g = toy_genotype();
        let config = tiny_config();
        let mut images = toy_images(10, 8, 2, 23);
        // Unbalance: 7 of class 0, 3 of class 1.
        for (i, l) in images.labels.iter_mut().enumerate() {
            *l = if i < 7 { 0 } else { 1 };
        }
        let mut params = build_final_network(&g, &config, 4).unwrap();
        // Force constant logits favoring class 0.
        params.store.classifier.w.fill(0.0);
        params.store.classifier.b.fill(0.0);
        params.store.classifier.b[0] = 1.0;
        let (acc, confusion) = evaluate_accuracy(&params, &images).unwrap();
        assert!((acc - 0.7).abs() < 1e-12);
        assert_eq!(confusion[0][0], 7);
        assert_eq!(confusion[1][0], 3);
        assert_eq!(confusion[0][1] + confusion[1][1], 0);
    }

    #[test]
    fn final_network_gradients_match_fd_on_two_cell_config() {
        // 2-cell micro config: [normal, reduction]; rel err <= 1e-4.
        use crate::nas::supernet_backward;
        let g = toy_genotype();
        let mut store = crate::nas::init_standalone(
            &SearchSpace::standard(2, 4),
            2,
            &[CellKind::Normal, CellKind::Reduction],
            &g,
            13,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = ndarray::Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random::<f64>());
        let labels = vec![0usize, 1];
        let (_, grads) = supernet_backward(&store, &g, &x, &labels).unwrap();
        let analytic = grads.flatten(&store);
        let flat = store.flatten();
        for i in (0..flat.len()).step_by(7) {
            let h = 1e-5 * flat[i].abs().max(1.0);
            let mut plus = flat.clone();
            plus[i] += h;
            store.set_flat(&plus);
            let (lp, _) = supernet_backward(&store, &g, &x, &labels).unwrap();
            let mut minus = flat.clone();
            minus[i] -= h;
            store.set_flat(&minus);
            let (lm, _) = supernet_backward(&store, &g, &x, &labels).unwrap();
            store.set_flat(&flat);
            let fd = (lp - lm) / (2.0 * h);
            let diff = (fd - analytic[i]).abs();
            assert!(
                diff <= 1e-7 || diff / fd.abs().max(analytic[i].abs()) <= 1e-4,
                "param {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    fn protocol_samples(classes: usize, per_class: usize, seed: u64) -> Vec<LabeledSample> {
        let config = crate::data::SynthConfig {
            classes,
            samples_per_class: per_class,
            frames_per_sequence: 8,
            joints: 7,
            num_subjects: 10,
            ..Default::default()
        };
        crate::data::generate_synthetic_actions(&config, seed).unwrap()
    }

    fn tiny_protocol_config(seed: u64) -> ProtocolEvalConfig {
        ProtocolEvalConfig {
            encoder: crate::encoder::EncoderConfig {
                output_height: 16,
                output_width: 16,
                ..Default::default()
            },
            final_net: FinalNetConfig {
                cells_per_stage: 1,
                stem_channels: 4,
                num_classes: 2,
                epochs: 2,
                batch_size: 4,
                lr_max: 0.02,
                augment: AugmentConfig {
                    crop_padding: 2,
                    hflip_prob: 0.5,
                },
                ..Default::default()
            },
            subsets: None,
            seed,
        }
    }

    #[test]
    fn msr_protocol_reports_three_subsets_and_mean() {
        let g = toy_genotype();
        let samples = protocol_samples(6, 6, 41);
        let mut config = tiny_protocol_config(3);
        config.subsets = Some(vec![
            ("AS1".into(), vec![0, 1]),
            ("AS2".into(), vec![2, 3]),
            ("AS3".into(), vec![4, 5]),
        ]);
        let report =
            evaluate_protocol(&g, &samples, crate::data::SplitProtocol::MsrHalf, &config)
                .unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].name, "AS1");
        let mean = report.rows.iter().map(|r| r.accuracy).sum::<f64>() / 3.0;
        assert!((report.average - mean).abs() < 1e-12);
        assert_eq!(report.confusions.len(), 3);
    }

    #[test]
    fn sbu_protocol_reports_five_folds_and_mean() {
        let g = toy_genotype();
        let samples = protocol_samples(2, 8, 43);
        let config = tiny_protocol_config(5);
        let report =
            evaluate_protocol(&g, &samples, crate::data::SplitProtocol::Sbu5Fold, &config)
                .unwrap();
        assert_eq!(report.rows.len(), 5);
        let mean = report.rows.iter().map(|r| r.accuracy).sum::<f64>() / 5.0;
        assert!((report.average - mean).abs() < 1e-12);
    }

    #[test]
    fn inherited_weights_copy_shared_values() {
        use crate::nas::{init_supernet, SEARCH_LAYOUT};
        let g = toy_genotype();
        let config = tiny_config();
        let space = SearchSpace::standard(2, 4);
        let shared = init_supernet(&space, 2, &SEARCH_LAYOUT, 31).unwrap();
        let inherited = build_final_network_inherited(&g, &config, &shared, 1).unwrap();
        assert_eq!(inherited.store.stem, shared.stem);
        // Every instance op matches its shared counterpart.
        for (key, params) in &inherited.store.ops {
            let cell_idx = match key.scope {
                Scope::Instance(i) => i,
                _ => panic!("unexpected scope"),
            };
            let shared_key = crate::nas::OpKey {
                scope: Scope::Shared(inherited.store.layout[cell_idx]),
                ..*key
            };
            assert_eq!(params, shared.ops.get(&shared_key).unwrap());
        }
    }
}
