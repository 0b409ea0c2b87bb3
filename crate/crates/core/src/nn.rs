//! Small shared neural-network pieces: activations, initialization,
//! softmax/cross-entropy and dropout masks. Layer-specific forward/backward
//! code lives next to the networks that use it.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// SELU scale constant.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU alpha constant.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

pub fn selu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// He-normal standard deviation for a layer with the given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Draw a He-normal initialized matrix of shape (rows, cols) with fan-in
/// `fan_in` from the given generator.
pub fn he_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let std = he_std(fan_in);
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// He-normal initialized flat buffer of `len` values with fan-in `fan_in`.
pub fn he_vec(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let std = he_std(fan_in);
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Row-wise softmax with optional temperature. Numerically stabilized by
/// subtracting the row max. `mask_len` limits each row to its first
/// `mask_len` entries; the rest get probability zero.
pub fn masked_softmax(logits: &Array1<f64>, mask_len: usize, temperature: f64) -> Array1<f64> {
    let n = mask_len.min(logits.len());
    let mut out = Array1::zeros(logits.len());
    let max = (0..n).map(|i| logits[i] / temperature).fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for i in 0..n {
        let e = ((logits[i] / temperature) - max).exp();
        out[i] = e;
        denom += e;
    }
    for i in 0..n {
        out[i] /= denom;
    }
    out
}

/// Mean cross-entropy of a batch of logits against integer labels, together
/// with the gradient with respect to the logits.
///
/// logits: (batch, classes); labels: one per row.
pub fn cross_entropy_with_grad(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (b, k) = logits.dim();
    assert_eq!(b, labels.len(), "batch/label count mismatch");
    let mut grad = Array2::zeros((b, k));
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        loss -= (exps[label] / denom).ln();
        for j in 0..k {
            let p = exps[j] / denom;
            grad[[i, j]] = (p - if j == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

/// Argmax prediction per row of a logits matrix.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Inverted-dropout mask: entries are 1/(1-rate) with probability 1-rate,
/// else 0. A rate of zero yields an all-ones mask.
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if rate == 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 - rate;
    Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn selu_is_continuous_at_zero() {
        assert!((selu(1e-12) - selu(-1e-12)).abs() < 1e-10);
        assert!((selu(0.0)).abs() < 1e-15);
    }

    #[test]
    fn he_matrix_empirical_std() {
        // fan_in = 1024 -> std ~= sqrt(2/1024) = 0.0442; check over >= 1e5 draws.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = he_matrix(256, 1024, 1024, &mut rng);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let expect = he_std(1024);
        assert!(
            (std - expect).abs() / expect < 0.10,
            "std {std} vs expected {expect}"
        );
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let probs = masked_softmax(&Array1::zeros(5), 3, 1.0);
        for i in 0..3 {
            assert!((probs[i] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(probs[3], 0.0);
        assert_eq!(probs[4], 0.0);
    }

    #[test]
    fn cross_entropy_uniform_gradient() {
        // At uniform logits with K classes, d loss / d logit_true = (1/K - 1)/batch.
        let logits = Array2::zeros((2, 4));
        let (loss, grad) = cross_entropy_with_grad(&logits, &[1, 3]);
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        assert!((grad[[0, 1]] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((grad[[0, 0]] - 0.25 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = dropout_mask((3, 4), 0.0, &mut rng);
        assert_eq!(mask, array![[1.0; 4], [1.0; 4], [1.0; 4]]);
    }

    #[test]
    fn dropout_mask_scales_kept_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = dropout_mask((100, 100), 0.25, &mut rng);
        for &v in mask.iter() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15);
        }
    }
}
