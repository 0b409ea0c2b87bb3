//! Cell operations on NCHW feature maps: identity, separable convolutions
//! (depthwise + pointwise + BN + ReLU) and 3x3 poolings, each with an exact
//! backward pass. Reduction cells run ops at stride 2 on cell inputs.

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::NasError;

pub const BN2D_EPS: f64 = 1e-5;
pub const BN2D_MOMENTUM: f64 = 0.9;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum OpId {
    Identity,
    SepConv3x3,
    SepConv5x5,
    AvgPool3x3,
    MaxPool3x3,
}

impl OpId {
    pub fn kernel(&self) -> Option<usize> {
        match self {
            OpId::SepConv3x3 => Some(3),
            OpId::SepConv5x5 => Some(5),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        self.kernel().is_some()
    }

    pub fn parse(name: &str) -> Result<Self, NasError> {
        match name {
            "identity" => Ok(OpId::Identity),
            "sep_conv_3x3" => Ok(OpId::SepConv3x3),
            "sep_conv_5x5" => Ok(OpId::SepConv5x5),
            "avg_pool_3x3" => Ok(OpId::AvgPool3x3),
            "max_pool_3x3" => Ok(OpId::MaxPool3x3),
            other => Err(NasError::Genotype(format!("unknown op '{other}'"))),
        }
    }
}

impl std::fmt::Display for OpId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            OpId::Identity => "identity",
            OpId::SepConv3x3 => "sep_conv_3x3",
            OpId::SepConv5x5 => "sep_conv_5x5",
            OpId::AvgPool3x3 => "avg_pool_3x3",
            OpId::MaxPool3x3 => "max_pool_3x3",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bn2dCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

pub fn bn2d_forward_train(bn: &BatchNorm2d, x: &Array4<f64>) -> (Array4<f64>, Bn2dCache) {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    mean[ci] += x[[bi, ci, y, xx]];
                }
            }
        }
    }
    mean.mapv_inplace(|v| v / n);
    let mut var = Array1::<f64>::zeros(c);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let d = x[[bi, ci, y, xx]] - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
    }
    var.mapv_inplace(|v| v / n);
    let inv_std = var.mapv(|v| 1.0 / (v + BN2D_EPS).sqrt());
    let mut xhat = Array4::zeros((b, c, h, w));
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let z = (x[[bi, ci, y, xx]] - mean[ci]) * inv_std[ci];
                    xhat[[bi, ci, y, xx]] = z;
                    out[[bi, ci, y, xx]] = bn.gamma[ci] * z + bn.beta[ci];
                }
            }
        }
    }
    (
        out,
        Bn2dCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

pub fn bn2d_forward_eval(bn: &BatchNorm2d, x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::zeros((b, c, h, w));
    for ci in 0..c {
        let inv = 1.0 / (bn.running_var[ci] + BN2D_EPS).sqrt();
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    out[[bi, ci, y, xx]] =
                        bn.gamma[ci] * (x[[bi, ci, y, xx]] - bn.running_mean[ci]) * inv
                            + bn.beta[ci];
                }
            }
        }
    }
    out
}

/// Returns (dx, dgamma, dbeta) for train-mode BN.
pub fn bn2d_backward(
    bn: &BatchNorm2d,
    cache: &Bn2dCache,
    dy: &Array4<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (b, c, h, w) = dy.dim();
    let n = (b * h * w) as f64;
    let mut dgamma = Array1::<f64>::zeros(c);
    let mut dbeta = Array1::<f64>::zeros(c);
    let mut sum_dxhat = Array1::<f64>::zeros(c);
    let mut sum_dxhat_xhat = Array1::<f64>::zeros(c);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let g = dy[[bi, ci, y, xx]];
                    let z = cache.xhat[[bi, ci, y, xx]];
                    dgamma[ci] += g * z;
                    dbeta[ci] += g;
                    let dxh = g * bn.gamma[ci];
                    sum_dxhat[ci] += dxh;
                    sum_dxhat_xhat[ci] += dxh * z;
                }
            }
        }
    }
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let scale = cache.inv_std[ci] / n;
            for y in 0..h {
                for xx in 0..w {
                    let dxh = dy[[bi, ci, y, xx]] * bn.gamma[ci];
                    let z = cache.xhat[[bi, ci, y, xx]];
                    dx[[bi, ci, y, xx]] =
                        scale * (n * dxh - sum_dxhat[ci] - z * sum_dxhat_xhat[ci]);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn bn2d_update_running(bn: &mut BatchNorm2d, cache: &Bn2dCache) {
    for ci in 0..bn.running_mean.len() {
        bn.running_mean[ci] =
            BN2D_MOMENTUM * bn.running_mean[ci] + (1.0 - BN2D_MOMENTUM) * cache.batch_mean[ci];
        bn.running_var[ci] =
            BN2D_MOMENTUM * bn.running_var[ci] + (1.0 - BN2D_MOMENTUM) * cache.batch_var[ci];
    }
}

/// Separable convolution parameters: per-channel depthwise kernel,
/// pointwise mixing matrix, batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SepConvParams {
    /// (C, k, k)
    pub depthwise: Array3<f64>,
    /// (C_out, C_in) with C_out == C_in.
    pub pointwise: Array2<f64>,
    pub bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct SepConvGrads {
    pub depthwise: Array3<f64>,
    pub pointwise: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn depthwise_forward(x: &Array4<f64>, w: &Array3<f64>, stride: usize) -> Array4<f64> {
    let (b, c, h, ww) = x.dim();
    let k = w.dim().1;
    let pad = k / 2;
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(ww, k, stride, pad);
    let mut out = Array4::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= ww as isize {
                                continue;
                            }
                            acc += x[[bi, ci, iy as usize, ix as usize]] * w[[ci, ky, kx]];
                        }
                    }
                    out[[bi, ci, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

fn depthwise_backward(
    x: &Array4<f64>,
    w: &Array3<f64>,
    dy: &Array4<f64>,
    stride: usize,
) -> (Array4<f64>, Array3<f64>) {
    let (b, c, h, ww) = x.dim();
    let k = w.dim().1;
    let pad = k / 2;
    let (_, _, oh, ow) = dy.dim();
    let mut dx = Array4::zeros((b, c, h, ww));
    let mut dw = Array3::zeros((c, k, k));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[[bi, ci, oy, ox]];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= ww as isize {
                                continue;
                            }
                            dx[[bi, ci, iy as usize, ix as usize]] += g * w[[ci, ky, kx]];
                            dw[[ci, ky, kx]] += g * x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn pointwise_forward(x: &Array4<f64>, w: &Array2<f64>) -> Array4<f64> {
    let (b, c_in, h, ww) = x.dim();
    let c_out = w.nrows();
    let mut out = Array4::zeros((b, c_out, h, ww));
    for bi in 0..b {
        for o in 0..c_out {
            for ci in 0..c_in {
                let coeff = w[[o, ci]];
                if coeff == 0.0 {
                    continue;
                }
                for y in 0..h {
                    for xx in 0..ww {
                        out[[bi, o, y, xx]] += coeff * x[[bi, ci, y, xx]];
                    }
                }
            }
        }
    }
    out
}

fn pointwise_backward(
    x: &Array4<f64>,
    w: &Array2<f64>,
    dy: &Array4<f64>,
) -> (Array4<f64>, Array2<f64>) {
    let (b, c_in, h, ww) = x.dim();
    let c_out = w.nrows();
    let mut dx = Array4::zeros((b, c_in, h, ww));
    let mut dw = Array2::zeros((c_out, c_in));
    for bi in 0..b {
        for o in 0..c_out {
            for ci in 0..c_in {
                let coeff = w[[o, ci]];
                let mut acc = 0.0;
                for y in 0..h {
                    for xx in 0..ww {
                        let g = dy[[bi, o, y, xx]];
                        dx[[bi, ci, y, xx]] += coeff * g;
                        acc += g * x[[bi, ci, y, xx]];
                    }
                }
                dw[[o, ci]] += acc;
            }
        }
    }
    (dx, dw)
}

#[derive(Debug, Clone)]
pub enum OpCache {
    Identity {
        in_dim: (usize, usize, usize, usize),
    },
    AvgPool {
        in_dim: (usize, usize, usize, usize),
    },
    MaxPool {
        in_dim: (usize, usize, usize, usize),
        /// Per output element (scan order): flat (iy, ix) of the max.
        argmax: Vec<(usize, usize)>,
        out_dim: (usize, usize, usize, usize),
    },
    SepConv {
        x: Array4<f64>,
        dw_out: Array4<f64>,
        bn_in: Array4<f64>,
        bn_cache: Option<Bn2dCache>,
        pre_relu: Array4<f64>,
    },
}

/// Average pooling, 3x3 window, padding 1, count includes padding.
pub fn avg_pool3(x: &Array4<f64>, stride: usize) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_size(h, 3, stride, 1);
    let ow = conv_out_size(w, 3, stride, 1);
    let mut out = Array4::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                    out[[bi, ci, oy, ox]] = acc / 9.0;
                }
            }
        }
    }
    out
}

pub fn avg_pool3_backward(
    in_dim: (usize, usize, usize, usize),
    dy: &Array4<f64>,
    stride: usize,
) -> Array4<f64> {
    let (b, c, h, w) = in_dim;
    let (_, _, oh, ow) = dy.dim();
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[[bi, ci, oy, ox]] / 9.0;
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[bi, ci, iy as usize, ix as usize]] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn max_pool3(x: &Array4<f64>, stride: usize) -> (Array4<f64>, Vec<(usize, usize)>) {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_size(h, 3, stride, 1);
    let ow = conv_out_size(w, 3, stride, 1);
    let mut out = Array4::zeros((b, c, oh, ow));
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = (0usize, 0usize);
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[[bi, ci, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                best_at = (iy as usize, ix as usize);
                            }
                        }
                    }
                    out[[bi, ci, oy, ox]] = best;
                    argmax.push(best_at);
                }
            }
        }
    }
    (out, argmax)
}

/// Identity at stride 1 is a copy, at stride 2 a spatial subsample.
fn identity_forward(x: &Array4<f64>, stride: usize) -> Array4<f64> {
    if stride == 1 {
        return x.clone();
    }
    let (b, c, h, w) = x.dim();
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let mut out = Array4::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[[bi, ci, oy, ox]] = x[[bi, ci, oy * stride, ox * stride]];
                }
            }
        }
    }
    out
}

/// Forward one op. Parameterized ops need `params`; `train` picks BN mode.
pub fn op_forward(
    op: OpId,
    params: Option<&SepConvParams>,
    x: &Array4<f64>,
    stride: usize,
    train: bool,
) -> Result<(Array4<f64>, OpCache), NasError> {
    match op {
        OpId::Identity => Ok((
            identity_forward(x, stride),
            OpCache::Identity { in_dim: x.dim() },
        )),
        OpId::AvgPool3x3 => Ok((avg_pool3(x, stride), OpCache::AvgPool { in_dim: x.dim() })),
        OpId::MaxPool3x3 => {
            let (out, argmax) = max_pool3(x, stride);
            let out_dim = out.dim();
            Ok((
                out,
                OpCache::MaxPool {
                    in_dim: x.dim(),
                    argmax,
                    out_dim,
                },
            ))
        }
        OpId::SepConv3x3 | OpId::SepConv5x5 => {
            let p = params.ok_or_else(|| {
                NasError::Shape(format!("op {op} needs parameters but none were given"))
            })?;
            let dw_out = depthwise_forward(x, &p.depthwise, stride);
            let bn_in = pointwise_forward(&dw_out, &p.pointwise);
            let (pre_relu, bn_cache) = if train {
                let (out, cache) = bn2d_forward_train(&p.bn, &bn_in);
                (out, Some(cache))
            } else {
                (bn2d_forward_eval(&p.bn, &bn_in), None)
            };
            let out = pre_relu.mapv(|v| v.max(0.0));
            Ok((
                out,
                OpCache::SepConv {
                    x: x.clone(),
                    dw_out,
                    bn_in,
                    bn_cache,
                    pre_relu,
                },
            ))
        }
    }
}

/// Backward one op. Returns the input gradient and, for parameterized ops,
/// the parameter gradients.
pub fn op_backward(
    op: OpId,
    params: Option<&SepConvParams>,
    cache: &OpCache,
    dy: &Array4<f64>,
    stride: usize,
) -> Result<(Array4<f64>, Option<SepConvGrads>), NasError> {
    match (op, cache) {
        (OpId::Identity, OpCache::Identity { in_dim }) => {
            if stride == 1 {
                return Ok((dy.clone(), None));
            }
            let (b, c, h, w) = *in_dim;
            let (_, _, oh, ow) = dy.dim();
            let mut dx = Array4::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[[bi, ci, oy * stride, ox * stride]] = dy[[bi, ci, oy, ox]];
                        }
                    }
                }
            }
            Ok((dx, None))
        }
        (OpId::AvgPool3x3, OpCache::AvgPool { in_dim }) => {
            Ok((avg_pool3_backward(*in_dim, dy, stride), None))
        }
        (OpId::MaxPool3x3, OpCache::MaxPool { in_dim, argmax, out_dim }) => {
            let (b, c, h, w) = *in_dim;
            let (_, _, oh, ow) = *out_dim;
            let mut dx = Array4::zeros((b, c, h, w));
            let mut flat = 0usize;
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (iy, ix) = argmax[flat];
                            dx[[bi, ci, iy, ix]] += dy[[bi, ci, oy, ox]];
                            flat += 1;
                        }
                    }
                }
            }
            Ok((dx, None))
        }
        (
            OpId::SepConv3x3 | OpId::SepConv5x5,
            OpCache::SepConv {
                x,
                dw_out,
                bn_in,
                bn_cache,
                pre_relu,
            },
        ) => {
            let p = params
                .ok_or_else(|| NasError::Shape(format!("op {op} backward missing params")))?;
            // ReLU.
            let mut d_bn_out = dy.clone();
            for (g, &pre) in d_bn_out.iter_mut().zip(pre_relu.iter()) {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            }
            // BN (train-mode cache required for backward).
            let cache = bn_cache.as_ref().ok_or_else(|| {
                NasError::Shape("backward through an eval-mode forward".into())
            })?;
            let (d_bn_in, dgamma, dbeta) = bn2d_backward(&p.bn, cache, &d_bn_out);
            let _ = bn_in;
            // Pointwise then depthwise.
            let (d_dw_out, d_pw) = pointwise_backward(dw_out, &p.pointwise, &d_bn_in);
            let (dx, d_dw) = depthwise_backward(x, &p.depthwise, &d_dw_out, stride);
            Ok((
                dx,
                Some(SepConvGrads {
                    depthwise: d_dw,
                    pointwise: d_pw,
                    gamma: dgamma,
                    beta: dbeta,
                }),
            ))
        }
        _ => Err(NasError::Shape("op/cache mismatch in backward".into())),
    }
}
