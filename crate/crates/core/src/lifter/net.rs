//! Layer math for the lifting streams: linear, 1-D batch norm, SELU and
//! dropout, with hand-derived backward passes. Caches hold exactly what the
//! backward pass needs.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::nn::{dropout_mask, selu, selu_deriv};

pub const BN_EPS: f64 = 1e-5;
/// Running-stat update: running = momentum*running + (1-momentum)*batch.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (out, in)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Returns (dx, dw, db).
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.w);
        (dx, dw, db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

/// What BN saved during a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

/// Train-mode BN forward using batch statistics.
pub fn bn_forward_train(bn: &BatchNorm1d, x: &Array2<f64>) -> (Array2<f64>, BnCache) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = &centered * &inv_std;
    let y = &xhat * &bn.gamma + &bn.beta;
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

/// Eval-mode BN forward using running statistics.
pub fn bn_forward_eval(bn: &BatchNorm1d, x: &Array2<f64>) -> Array2<f64> {
    let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = (x - &bn.running_mean) * &inv_std;
    &xhat * &bn.gamma + &bn.beta
}

/// Backward through train-mode BN. Returns (dx, dgamma, dbeta).
pub fn bn_backward(
    bn: &BatchNorm1d,
    cache: &BnCache,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = dy.nrows() as f64;
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * &bn.gamma;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    // dx = inv_std/N * (N*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
    let dx = (dxhat.mapv(|v| v * n) - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat)
        * &cache.inv_std.mapv(|v| v / n);
    (dx, dgamma, dbeta)
}

/// Fold freshly computed batch statistics into the running estimates.
pub fn bn_update_running(bn: &mut BatchNorm1d, cache: &BnCache) {
    bn.running_mean = &bn.running_mean * BN_MOMENTUM + &cache.batch_mean * (1.0 - BN_MOMENTUM);
    bn.running_var = &bn.running_var * BN_MOMENTUM + &cache.batch_var * (1.0 - BN_MOMENTUM);
}

/// One residual block: two (linear -> BN -> SELU -> dropout) stages with an
/// identity skip from block input to block output.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub lin1: Linear,
    pub bn1: BatchNorm1d,
    pub lin2: Linear,
    pub bn2: BatchNorm1d,
}

#[derive(Debug, Clone)]
pub struct StageCache {
    /// Input to the linear layer.
    pub x: Array2<f64>,
    pub bn: BnCache,
    /// BN output (input to SELU).
    pub pre_act: Array2<f64>,
    pub mask: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub stage1: StageCache,
    pub stage2: StageCache,
}

fn stage_forward_train(
    lin: &Linear,
    bn: &BatchNorm1d,
    x: &Array2<f64>,
    dropout_rate: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, StageCache) {
    let a = lin.forward(x);
    let (pre_act, bn_cache) = bn_forward_train(bn, &a);
    let s = pre_act.mapv(selu);
    let mask = dropout_mask(s.dim(), dropout_rate, rng);
    let out = &s * &mask;
    (
        out,
        StageCache {
            x: x.clone(),
            bn: bn_cache,
            pre_act,
            mask,
        },
    )
}

fn stage_forward_eval(lin: &Linear, bn: &BatchNorm1d, x: &Array2<f64>) -> Array2<f64> {
    bn_forward_eval(bn, &lin.forward(x)).mapv(selu)
}

/// Gradients of one stage's parameters.
#[derive(Debug, Clone)]
pub struct StageGrads {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
    pub dgamma: Array1<f64>,
    pub dbeta: Array1<f64>,
}

fn stage_backward(
    lin: &Linear,
    bn: &BatchNorm1d,
    cache: &StageCache,
    dout: &Array2<f64>,
) -> (Array2<f64>, StageGrads) {
    let ds = dout * &cache.mask;
    let dn = &ds * &cache.pre_act.mapv(selu_deriv);
    let (da, dgamma, dbeta) = bn_backward(bn, &cache.bn, &dn);
    let (dx, dw, db) = lin.backward(&cache.x, &da);
    (
        dx,
        StageGrads {
            dw,
            db,
            dgamma,
            dbeta,
        },
    )
}

impl ResidualBlock {
    pub fn forward_train(
        &self,
        x: &Array2<f64>,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<f64>, BlockCache) {
        let (s1, c1) = stage_forward_train(&self.lin1, &self.bn1, x, dropout_rate, rng);
        let (s2, c2) = stage_forward_train(&self.lin2, &self.bn2, &s1, dropout_rate, rng);
        (
            s2 + x,
            BlockCache {
                stage1: c1,
                stage2: c2,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let s1 = stage_forward_eval(&self.lin1, &self.bn1, x);
        stage_forward_eval(&self.lin2, &self.bn2, &s1) + x
    }

    /// Returns (dx, grads for stage1, grads for stage2).
    pub fn backward(
        &self,
        cache: &BlockCache,
        dout: &Array2<f64>,
    ) -> (Array2<f64>, StageGrads, StageGrads) {
        let (ds1, g2) = stage_backward(&self.lin2, &self.bn2, &cache.stage2, dout);
        let (dx_block, g1) = stage_backward(&self.lin1, &self.bn1, &cache.stage1, &ds1);
        // Identity skip adds dout directly to the block-input gradient.
        (dx_block + dout, g1, g2)
    }
}
