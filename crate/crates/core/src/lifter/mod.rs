//! Two-stream 2D-to-3D lifting network: He-initialized residual
//! fully-connected streams with batch norm, SELU and dropout, trained with
//! a Huber objective under Adam, evaluated by MPJPE.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use net::{BatchNorm1d, Linear, ResidualBlock, BN_EPS, BN_MOMENTUM};
pub use train::{pair_training_data, train_lifter, LifterTrainConfig, LiftingExample};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{root_center, NormStats, Pose3D, PoseSequence};
use crate::nn::he_matrix;
use crate::opt::AdamState;
use net::{bn_update_running, BlockCache, BnCache, StageGrads};

#[derive(Debug, Error)]
pub enum LifterError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifterArchitecture {
    /// 2N.
    pub input_dim: usize,
    /// 3M.
    pub output_dim: usize,
    pub hidden_width: usize,
    pub num_blocks: usize,
    pub dropout_rate: f64,
}

impl LifterArchitecture {
    pub fn validate(&self) -> Result<(), LifterError> {
        if self.hidden_width == 0 || self.num_blocks == 0 {
            return Err(LifterError::Config(
                "hidden width and block count must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(LifterError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.output_dim % 3 != 0 {
            return Err(LifterError::Config("bad input/output dimensions".into()));
        }
        Ok(())
    }
}

/// Which stream a 2D pose feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Trained on ground-truth 2D locations.
    Gt,
    /// Trained on detector 2D output.
    Det,
}

/// Forward mode: training uses batch statistics and live dropout, eval uses
/// running statistics and no dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub output: Linear,
}

/// Full lifter state: both streams plus the standardization statistics
/// they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct LifterParams {
    pub arch: LifterArchitecture,
    pub gt: StreamParams,
    pub det: StreamParams,
    pub gt_input_stats: NormStats,
    pub det_input_stats: NormStats,
    pub output_stats: NormStats,
    /// Root joint index of the 3D output space.
    pub root_index: usize,
}

fn init_stream(arch: &LifterArchitecture, rng: &mut ChaCha8Rng) -> StreamParams {
    let h = arch.hidden_width;
    let linear = |out: usize, fan_in: usize, rng: &mut ChaCha8Rng| Linear {
        w: he_matrix(out, fan_in, fan_in, rng),
        b: Array1::zeros(out),
    };
    StreamParams {
        input: linear(h, arch.input_dim, rng),
        blocks: (0..arch.num_blocks)
            .map(|_| ResidualBlock {
                lin1: linear(h, h, rng),
                bn1: BatchNorm1d::new(h),
                lin2: linear(h, h, rng),
                bn2: BatchNorm1d::new(h),
            })
            .collect(),
        output: linear(arch.output_dim, h, rng),
    }
}

/// He-initialize both streams: weights ~ N(0, 2/fan_in), biases zero, BN
/// scale 1 / shift 0. Statistics start as identity and are set by training.
pub fn init_lifter(arch: &LifterArchitecture, seed: u64) -> Result<LifterParams, LifterError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = init_stream(arch, &mut rng);
    let det = init_stream(arch, &mut rng);
    Ok(LifterParams {
        arch: *arch,
        gt,
        det,
        gt_input_stats: NormStats::identity(arch.input_dim),
        det_input_stats: NormStats::identity(arch.input_dim),
        output_stats: NormStats::identity(arch.output_dim),
        root_index: 0,
    })
}

impl LifterParams {
    pub fn stream(&self, which: Stream) -> &StreamParams {
        match which {
            Stream::Gt => &self.gt,
            Stream::Det => &self.det,
        }
    }

    pub fn input_stats(&self, which: Stream) -> &NormStats {
        match which {
            Stream::Gt => &self.gt_input_stats,
            Stream::Det => &self.det_input_stats,
        }
    }

    /// Trainable parameters flattened in a fixed order (gt stream, then
    /// det stream; within a stream: input linear, blocks, output linear).
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for stream in [&self.gt, &self.det] {
            flatten_stream(stream, &mut out);
        }
        out
    }

    pub fn set_trainable(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for stream in [&mut self.gt, &mut self.det] {
            offset = scatter_stream(stream, flat, offset);
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn num_trainable(&self) -> usize {
        self.flatten_trainable().len()
    }
}

fn flatten_stream(stream: &StreamParams, out: &mut Vec<f64>) {
    out.extend(stream.input.w.iter());
    out.extend(stream.input.b.iter());
    for block in &stream.blocks {
        out.extend(block.lin1.w.iter());
        out.extend(block.lin1.b.iter());
        out.extend(block.bn1.gamma.iter());
        out.extend(block.bn1.beta.iter());
        out.extend(block.lin2.w.iter());
        out.extend(block.lin2.b.iter());
        out.extend(block.bn2.gamma.iter());
        out.extend(block.bn2.beta.iter());
    }
    out.extend(stream.output.w.iter());
    out.extend(stream.output.b.iter());
}

fn scatter_stream(stream: &mut StreamParams, flat: &[f64], mut offset: usize) -> usize {
    fn take2(a: &mut Array2<f64>, flat: &[f64], offset: &mut usize) {
        for v in a.iter_mut() {
            *v = flat[*offset];
            *offset += 1;
        }
    }
    fn take1(a: &mut Array1<f64>, flat: &[f64], offset: &mut usize) {
        for v in a.iter_mut() {
            *v = flat[*offset];
            *offset += 1;
        }
    }
    take2(&mut stream.input.w, flat, &mut offset);
    take1(&mut stream.input.b, flat, &mut offset);
    for block in &mut stream.blocks {
        take2(&mut block.lin1.w, flat, &mut offset);
        take1(&mut block.lin1.b, flat, &mut offset);
        take1(&mut block.bn1.gamma, flat, &mut offset);
        take1(&mut block.bn1.beta, flat, &mut offset);
        take2(&mut block.lin2.w, flat, &mut offset);
        take1(&mut block.lin2.b, flat, &mut offset);
        take1(&mut block.bn2.gamma, flat, &mut offset);
        take1(&mut block.bn2.beta, flat, &mut offset);
    }
    take2(&mut stream.output.w, flat, &mut offset);
    take1(&mut stream.output.b, flat, &mut offset);
    offset
}

/// Gradients for one stream, shaped like its trainable parameters.
#[derive(Debug, Clone)]
pub struct StreamGradients {
    pub input_w: Array2<f64>,
    pub input_b: Array1<f64>,
    pub blocks: Vec<(StageGrads, StageGrads)>,
    pub output_w: Array2<f64>,
    pub output_b: Array1<f64>,
}

impl StreamGradients {
    fn zeros_like(stream: &StreamParams) -> Self {
        let zero_stage = |lin: &Linear, bn: &BatchNorm1d| StageGrads {
            dw: Array2::zeros(lin.w.dim()),
            db: Array1::zeros(lin.b.len()),
            dgamma: Array1::zeros(bn.gamma.len()),
            dbeta: Array1::zeros(bn.beta.len()),
        };
        Self {
            input_w: Array2::zeros(stream.input.w.dim()),
            input_b: Array1::zeros(stream.input.b.len()),
            blocks: stream
                .blocks
                .iter()
                .map(|b| (zero_stage(&b.lin1, &b.bn1), zero_stage(&b.lin2, &b.bn2)))
                .collect(),
            output_w: Array2::zeros(stream.output.w.dim()),
            output_b: Array1::zeros(stream.output.b.len()),
        }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.input_w.iter());
        out.extend(self.input_b.iter());
        for (g1, g2) in &self.blocks {
            for g in [g1, g2] {
                out.extend(g.dw.iter());
                out.extend(g.db.iter());
                out.extend(g.dgamma.iter());
                out.extend(g.dbeta.iter());
            }
        }
        out.extend(self.output_w.iter());
        out.extend(self.output_b.iter());
    }

    pub fn scale(&mut self, factor: f64) {
        self.input_w.mapv_inplace(|v| v * factor);
        self.input_b.mapv_inplace(|v| v * factor);
        for (g1, g2) in &mut self.blocks {
            for g in [g1, g2] {
                g.dw.mapv_inplace(|v| v * factor);
                g.db.mapv_inplace(|v| v * factor);
                g.dgamma.mapv_inplace(|v| v * factor);
                g.dbeta.mapv_inplace(|v| v * factor);
            }
        }
        self.output_w.mapv_inplace(|v| v * factor);
        self.output_b.mapv_inplace(|v| v * factor);
    }
}

/// Gradients for the whole lifter in the same fixed order as
/// [`LifterParams::flatten_trainable`].
#[derive(Debug, Clone)]
pub struct LifterGradients {
    pub gt: StreamGradients,
    pub det: StreamGradients,
}

impl LifterGradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.gt.flatten_into(&mut out);
        self.det.flatten_into(&mut out);
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.gt.scale(factor);
        self.det.scale(factor);
    }
}

struct StreamCache {
    x: Array2<f64>,
    blocks: Vec<BlockCache>,
    h_final: Array2<f64>,
}

/// Dropout streams must not collide between the two streams of one forward.
fn stream_rng(seed: u64, which: Stream) -> ChaCha8Rng {
    let tag = match which {
        Stream::Gt => 0x67745f73747265u64,
        Stream::Det => 0x6465745f737472u64,
    };
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

fn check_input(params: &LifterParams, x: &Array2<f64>) -> Result<(), LifterError> {
    if x.ncols() != params.arch.input_dim {
        return Err(LifterError::Shape(format!(
            "input has {} columns, architecture expects {}",
            x.ncols(),
            params.arch.input_dim
        )));
    }
    Ok(())
}

fn stream_forward_cached(
    params: &LifterParams,
    which: Stream,
    x: &Array2<f64>,
    seed: u64,
) -> (Array2<f64>, StreamCache) {
    let stream = params.stream(which);
    let mut rng = stream_rng(seed, which);
    let mut h = stream.input.forward(x);
    let mut blocks = Vec::with_capacity(stream.blocks.len());
    for block in &stream.blocks {
        let (out, cache) = block.forward_train(&h, params.arch.dropout_rate, &mut rng);
        blocks.push(cache);
        h = out;
    }
    let y = stream.output.forward(&h);
    (
        y,
        StreamCache {
            x: x.clone(),
            blocks,
            h_final: h,
        },
    )
}

/// One stream's forward pass on a standardized batch (rows are poses).
/// Output lives in standardized 3D space; the caller de-standardizes.
pub fn stream_forward(
    params: &LifterParams,
    which: Stream,
    x: &Array2<f64>,
    mode: Mode,
    seed: u64,
) -> Result<Array2<f64>, LifterError> {
    check_input(params, x)?;
    match mode {
        Mode::Train => Ok(stream_forward_cached(params, which, x, seed).0),
        Mode::Eval => {
            let stream = params.stream(which);
            let mut h = stream.input.forward(x);
            for block in &stream.blocks {
                h = block.forward_eval(&h);
            }
            Ok(stream.output.forward(&h))
        }
    }
}

/// Elementwise mean of the two stream outputs.
pub fn two_stream_forward(
    params: &LifterParams,
    x_gt: &Array2<f64>,
    x_det: &Array2<f64>,
    mode: Mode,
    seed: u64,
) -> Result<Array2<f64>, LifterError> {
    if x_gt.nrows() != x_det.nrows() {
        return Err(LifterError::Shape(format!(
            "stream batch sizes differ: {} vs {}",
            x_gt.nrows(),
            x_det.nrows()
        )));
    }
    let a = stream_forward(params, Stream::Gt, x_gt, mode, seed)?;
    let b = stream_forward(params, Stream::Det, x_det, mode, seed)?;
    Ok((a + b) / 2.0)
}

/// Mean Huber loss over all elements of (pred - target).
pub fn huber_loss(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    delta: f64,
) -> Result<f64, LifterError> {
    if delta <= 0.0 {
        return Err(LifterError::Config(format!(
            "huber delta {delta} must be positive"
        )));
    }
    if pred.dim() != target.dim() {
        return Err(LifterError::Shape(format!(
            "prediction shape {:?} != target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let count = pred.len() as f64;
    let mut total = 0.0;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let e = (p - t).abs();
        total += if e <= delta {
            0.5 * e * e
        } else {
            delta * (e - 0.5 * delta)
        };
    }
    Ok(total / count)
}

/// d(mean Huber)/d(pred), elementwise.
fn huber_grad(pred: &Array2<f64>, target: &Array2<f64>, delta: f64) -> Array2<f64> {
    let count = pred.len() as f64;
    let mut grad = pred - target;
    grad.mapv_inplace(|e| {
        if e.abs() <= delta {
            e / count
        } else {
            delta * e.signum() / count
        }
    });
    grad
}

fn stream_backward_from_cache(
    params: &LifterParams,
    which: Stream,
    cache: &StreamCache,
    dy: &Array2<f64>,
) -> StreamGradients {
    let stream = params.stream(which);
    let mut grads = StreamGradients::zeros_like(stream);
    let (mut dh, dw_out, db_out) = stream.output.backward(&cache.h_final, dy);
    grads.output_w = dw_out;
    grads.output_b = db_out;
    for (i, block) in stream.blocks.iter().enumerate().rev() {
        let (dx, g1, g2) = block.backward(&cache.blocks[i], &dh);
        grads.blocks[i] = (g1, g2);
        dh = dx;
    }
    let (_, dw_in, db_in) = stream.input.backward(&cache.x, &dh);
    grads.input_w = dw_in;
    grads.input_b = db_in;
    grads
}

/// Per-block (stage1, stage2) batch-stat snapshots for one stream.
pub(crate) type StreamBnStats = Vec<(BnCache, BnCache)>;

/// Batch-statistics snapshots collected during a cached forward, used by
/// training to update BN running stats.
pub(crate) struct BnSnapshots {
    gt: StreamBnStats,
    det: StreamBnStats,
}

pub(crate) fn apply_bn_updates(params: &mut LifterParams, snaps: &BnSnapshots) {
    for (block, (c1, c2)) in params.gt.blocks.iter_mut().zip(&snaps.gt) {
        bn_update_running(&mut block.bn1, c1);
        bn_update_running(&mut block.bn2, c2);
    }
    for (block, (c1, c2)) in params.det.blocks.iter_mut().zip(&snaps.det) {
        bn_update_running(&mut block.bn1, c1);
        bn_update_running(&mut block.bn2, c2);
    }
}

fn snapshots_of(cache: &StreamCache) -> Vec<(BnCache, BnCache)> {
    cache
        .blocks
        .iter()
        .map(|bc| (bc.stage1.bn.clone(), bc.stage2.bn.clone()))
        .collect()
}

pub(crate) fn two_stream_backward(
    params: &LifterParams,
    x_gt: &Array2<f64>,
    x_det: &Array2<f64>,
    y: &Array2<f64>,
    delta: f64,
    seed: u64,
) -> Result<(f64, LifterGradients, BnSnapshots), LifterError> {
    check_input(params, x_gt)?;
    check_input(params, x_det)?;
    if x_gt.nrows() != x_det.nrows() || x_gt.nrows() != y.nrows() {
        return Err(LifterError::Shape("batch size mismatch".into()));
    }
    let (out_gt, cache_gt) = stream_forward_cached(params, Stream::Gt, x_gt, seed);
    let (out_det, cache_det) = stream_forward_cached(params, Stream::Det, x_det, seed);
    let pred = (&out_gt + &out_det) / 2.0;
    let loss = huber_loss(&pred, y, delta)?;
    let dpred = huber_grad(&pred, y, delta);
    let dstream = dpred.mapv(|v| v / 2.0);
    let gt = stream_backward_from_cache(params, Stream::Gt, &cache_gt, &dstream);
    let det = stream_backward_from_cache(params, Stream::Det, &cache_det, &dstream);
    Ok((
        loss,
        LifterGradients { gt, det },
        BnSnapshots {
            gt: snapshots_of(&cache_gt),
            det: snapshots_of(&cache_det),
        },
    ))
}

pub(crate) fn single_stream_backward(
    params: &LifterParams,
    which: Stream,
    x: &Array2<f64>,
    y: &Array2<f64>,
    delta: f64,
    seed: u64,
) -> Result<(f64, StreamGradients, StreamBnStats), LifterError> {
    check_input(params, x)?;
    let (out, cache) = stream_forward_cached(params, which, x, seed);
    let loss = huber_loss(&out, y, delta)?;
    let dpred = huber_grad(&out, y, delta);
    let grads = stream_backward_from_cache(params, which, &cache, &dpred);
    Ok((loss, grads, snapshots_of(&cache)))
}

/// Exact gradients of the joint objective — the Huber loss of the averaged
/// two-stream output against `y` — for every trainable parameter.
/// Deterministic given the seed (which fixes the dropout masks).
pub fn lifter_gradients(
    params: &LifterParams,
    x_gt: &Array2<f64>,
    x_det: &Array2<f64>,
    y: &Array2<f64>,
    delta: f64,
    seed: u64,
) -> Result<(f64, LifterGradients), LifterError> {
    let (loss, grads, _) = two_stream_backward(params, x_gt, x_det, y, delta, seed)?;
    Ok((loss, grads))
}

/// One Adam update over every trainable lifter parameter.
pub fn adam_step(params: &mut LifterParams, grads: &LifterGradients, opt: &mut AdamState, lr: f64) {
    let mut flat = params.flatten_trainable();
    let grad_flat = grads.flatten();
    opt.step(&mut flat, &grad_flat, lr);
    params.set_trainable(&flat);
}

/// Step-decay learning rate: 0.001 halved after every 50 epochs.
pub fn lr_schedule(epoch: usize) -> f64 {
    0.001 * 0.5_f64.powi((epoch / 50) as i32)
}

/// Mean per-joint position error in millimeters: the average Euclidean
/// joint distance over all frames and joints. Inputs must be root-centered.
pub fn mpjpe(pred: &[Pose3D], gt: &[Pose3D]) -> Result<f64, LifterError> {
    if pred.len() != gt.len() {
        return Err(LifterError::Shape(format!(
            "{} predictions vs {} ground-truth poses",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(LifterError::Shape("empty pose lists".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.num_joints() != g.num_joints() {
            return Err(LifterError::Shape("joint count mismatch".into()));
        }
        for (a, b) in p.joints.iter().zip(&g.joints) {
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            total += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Lift a 2D sequence: the single available input is standardized with each
/// stream's own statistics, fed to both streams in eval mode, averaged,
/// de-standardized to millimeters and root-centered.
pub fn predict_3d(
    params: &LifterParams,
    seq2d: &PoseSequence,
) -> Result<PoseSequence, LifterError> {
    let frames = seq2d.as_2d()?;
    let n2 = params.arch.input_dim;
    let mut x_gt = Array2::zeros((frames.len(), n2));
    let mut x_det = Array2::zeros((frames.len(), n2));
    for (i, frame) in frames.iter().enumerate() {
        let flat = frame.flatten();
        if flat.len() != n2 {
            return Err(LifterError::Shape(format!(
                "frame {i} has {} coordinates, stats expect {n2}",
                flat.len()
            )));
        }
        for (j, &v) in params.gt_input_stats.standardize(&flat)?.iter().enumerate() {
            x_gt[[i, j]] = v;
        }
        for (j, &v) in params
            .det_input_stats
            .standardize(&flat)?
            .iter()
            .enumerate()
        {
            x_det[[i, j]] = v;
        }
    }
    let out = two_stream_forward(params, &x_gt, &x_det, Mode::Eval, 0)?;
    let mut poses = Vec::with_capacity(frames.len());
    for row in out.axis_iter(Axis(0)) {
        let flat = params.output_stats.destandardize(row.as_slice().unwrap())?;
        let pose = Pose3D::from_flat(&flat, params.root_index)?;
        poses.push(root_center(&pose));
    }
    Ok(PoseSequence::from_3d(poses, seq2d.frame_rate)?)
}
