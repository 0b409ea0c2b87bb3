//! Lifter training loop: seeded shuffled mini-batch Adam with the
//! step-decay schedule. Joint mode supervises the averaged output; separate
//! mode trains each stream on its own loss (averaging happens at inference
//! either way).

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    adam_step, apply_bn_updates, init_lifter, single_stream_backward, two_stream_backward,
    LifterArchitecture, LifterError, LifterGradients, LifterParams, Stream,
};
use crate::data::{root_center, NormStats, Pose2D, Pose3D, PoseDataset};
use crate::opt::AdamState;

/// One training example: the two 2D views of a frame and its 3D target.
#[derive(Debug, Clone)]
pub struct LiftingExample {
    pub gt_2d: Pose2D,
    pub det_2d: Pose2D,
    pub gt_3d: Pose3D,
    pub split_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifterTrainConfig {
    pub hidden_width: usize,
    pub num_blocks: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub huber_delta: f64,
    /// Initial learning rate, halved every 50 epochs.
    pub base_lr: f64,
    /// true: joint loss on the averaged output. false: each stream trained
    /// separately on its own loss with the same hyperparameters.
    pub joint_training: bool,
    pub seed: u64,
}

impl Default for LifterTrainConfig {
    fn default() -> Self {
        Self {
            hidden_width: 1024,
            num_blocks: 2,
            dropout_rate: 0.25,
            epochs: 300,
            batch_size: 128,
            huber_delta: 1.0,
            base_lr: 0.001,
            joint_training: true,
            seed: 0,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Pair three datasets into per-frame training triples by sample id. All
/// three must contain the same ids with matching frame counts.
pub fn pair_training_data(
    gt_2d: &PoseDataset,
    det_2d: &PoseDataset,
    gt_3d: &PoseDataset,
) -> Result<Vec<LiftingExample>, LifterError> {
    use std::collections::HashMap;
    let by_id = |ds: &PoseDataset| -> HashMap<String, usize> {
        ds.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect()
    };
    let det_idx = by_id(det_2d);
    let d3_idx = by_id(gt_3d);
    let mut out = Vec::new();
    for sample in &gt_2d.samples {
        let det_sample = det_idx
            .get(&sample.id)
            .map(|&i| &det_2d.samples[i])
            .ok_or_else(|| {
                LifterError::Shape(format!("sample '{}' missing from detector set", sample.id))
            })?;
        let d3_sample = d3_idx
            .get(&sample.id)
            .map(|&i| &gt_3d.samples[i])
            .ok_or_else(|| {
                LifterError::Shape(format!("sample '{}' missing from 3D set", sample.id))
            })?;
        let gt_frames = sample.sequence.as_2d()?;
        let det_frames = det_sample.sequence.as_2d()?;
        let d3_frames = d3_sample.sequence.as_3d()?;
        if gt_frames.len() != det_frames.len() || gt_frames.len() != d3_frames.len() {
            return Err(LifterError::Shape(format!(
                "sample '{}' frame counts differ across sets",
                sample.id
            )));
        }
        for ((g, d), y) in gt_frames.iter().zip(det_frames).zip(d3_frames) {
            out.push(LiftingExample {
                gt_2d: g.clone(),
                det_2d: d.clone(),
                gt_3d: y.clone(),
                split_tag: d3_sample.split_tag.clone(),
            });
        }
    }
    Ok(out)
}

fn to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows[0].len();
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

/// Train the two-stream lifter. Returns the fitted parameters and the
/// per-epoch mean train loss.
pub fn train_lifter(
    examples: &[LiftingExample],
    config: &LifterTrainConfig,
) -> Result<(LifterParams, Vec<f64>), LifterError> {
    if examples.is_empty() {
        return Err(LifterError::EmptyTrainingSet);
    }
    if examples
        .iter()
        .any(|e| e.split_tag.as_deref() == Some("test"))
    {
        return Err(LifterError::Config(
            "test-tagged samples passed to training".into(),
        ));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(LifterError::Config("epochs and batch size must be positive".into()));
    }

    let n2 = 2 * examples[0].gt_2d.num_keypoints();
    let m3 = 3 * examples[0].gt_3d.num_joints();
    let root_index = examples[0].gt_3d.root_index;

    // Standardization statistics come from the training split only.
    let gt_rows: Vec<Vec<f64>> = examples.iter().map(|e| e.gt_2d.flatten()).collect();
    let det_rows: Vec<Vec<f64>> = examples.iter().map(|e| e.det_2d.flatten()).collect();
    let y_rows: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| root_center(&e.gt_3d).flatten())
        .collect();
    if gt_rows.iter().any(|r| r.len() != n2)
        || det_rows.iter().any(|r| r.len() != n2)
        || y_rows.iter().any(|r| r.len() != m3)
    {
        return Err(LifterError::Shape("inconsistent example dimensions".into()));
    }
    let gt_stats = NormStats::fit(&gt_rows)?;
    let det_stats = NormStats::fit(&det_rows)?;
    let out_stats = NormStats::fit(&y_rows)?;

    let standardize_all = |rows: &[Vec<f64>], stats: &NormStats| -> Result<Array2<f64>, LifterError> {
        let std_rows: Result<Vec<Vec<f64>>, _> =
            rows.iter().map(|r| stats.standardize(r)).collect();
        Ok(to_matrix(&std_rows?))
    };
    let x_gt = standardize_all(&gt_rows, &gt_stats)?;
    let x_det = standardize_all(&det_rows, &det_stats)?;
    let y = standardize_all(&y_rows, &out_stats)?;

    let arch = LifterArchitecture {
        input_dim: n2,
        output_dim: m3,
        hidden_width: config.hidden_width,
        num_blocks: config.num_blocks,
        dropout_rate: config.dropout_rate,
    };
    let mut params = init_lifter(&arch, config.seed)?;
    params.gt_input_stats = gt_stats;
    params.det_input_stats = det_stats;
    params.output_stats = out_stats;
    params.root_index = root_index;

    let mut adam = AdamState::new(params.num_trainable());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed));
    let n = examples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut global_step: u64 = 0;

    let gather = |mat: &Array2<f64>, idx: &[usize]| -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), mat.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&mat.row(i));
        }
        out
    };

    for epoch in 0..config.epochs {
        let lr = config.base_lr * 0.5_f64.powi((epoch / 50) as i32);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let bx_gt = gather(&x_gt, chunk);
            let bx_det = gather(&x_det, chunk);
            let by = gather(&y, chunk);
            let step_seed = splitmix64(config.seed ^ global_step.wrapping_mul(0x2545F4914F6CDD1D));
            let loss = if config.joint_training {
                let (loss, grads, snaps) =
                    two_stream_backward(&params, &bx_gt, &bx_det, &by, config.huber_delta, step_seed)?;
                adam_step(&mut params, &grads, &mut adam, lr);
                apply_bn_updates(&mut params, &snaps);
                loss
            } else {
                let (loss_gt, g_gt, snaps_gt) = single_stream_backward(
                    &params,
                    Stream::Gt,
                    &bx_gt,
                    &by,
                    config.huber_delta,
                    step_seed,
                )?;
                let (loss_det, g_det, snaps_det) = single_stream_backward(
                    &params,
                    Stream::Det,
                    &bx_det,
                    &by,
                    config.huber_delta,
                    step_seed,
                )?;
                // The streams have disjoint parameters, so one Adam over the
                // concatenated gradients equals two independent optimizers.
                let grads = LifterGradients {
                    gt: g_gt,
                    det: g_det,
                };
                adam_step(&mut params, &grads, &mut adam, lr);
                for (block, (c1, c2)) in params.gt.blocks.iter_mut().zip(&snaps_gt) {
                    super::net::bn_update_running(&mut block.bn1, c1);
                    super::net::bn_update_running(&mut block.bn2, c2);
                }
                for (block, (c1, c2)) in params.det.blocks.iter_mut().zip(&snaps_det) {
                    super::net::bn_update_running(&mut block.bn1, c1);
                    super::net::bn_update_running(&mut block.bn2, c2);
                }
                (loss_gt + loss_det) / 2.0
            };
            epoch_loss += loss;
            batches += 1;
            global_step += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok((params, history))
}
