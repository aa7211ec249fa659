//! Batch normalization and loss functions with their analytic backward passes.

use super::tensor::{sigmoid, Mat};

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    /// Blend in batch statistics; the variance uses the unbiased estimate.
    pub(crate) fn absorb(&mut self, cache: &BnCache, momentum: f64) {
        let n = cache.n as f64;
        let correction = if cache.n > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * cache.batch_mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * cache.batch_var[c] * correction;
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub n: usize,
    pub train: bool,
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Normalize each column of `x`; batch statistics when `train`, running ones otherwise.
pub(crate) fn bn_forward(x: &Mat, stats: &RunningStats, train: bool, eps: f64) -> BnCache {
    let (n, dim) = (x.rows, x.cols);
    let (mean, var) = if train {
        let mut mean = vec![0.0; dim];
        for j in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(j)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for j in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(j)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        (mean, var)
    } else {
        (stats.mean.clone(), stats.var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Mat::zeros(n, dim);
    for j in 0..n {
        let src = x.row(j);
        for (c, o) in xhat.row_mut(j).iter_mut().enumerate() {
            *o = (src[c] - mean[c]) * inv_std[c];
        }
    }
    BnCache { n, train, xhat, inv_std, batch_mean: mean, batch_var: var }
}

/// Gradient with respect to the batch-norm input.
pub(crate) fn bn_backward(dy: &Mat, cache: &BnCache) -> Mat {
    let (n, dim) = (dy.rows, dy.cols);
    let mut dx = Mat::zeros(n, dim);
    if !cache.train {
        for j in 0..n {
            let g = dy.row(j);
            for (c, o) in dx.row_mut(j).iter_mut().enumerate() {
                *o = g[c] * cache.inv_std[c];
            }
        }
        return dx;
    }
    let nf = n as f64;
    let mut sum_dy = vec![0.0; dim];
    let mut sum_dy_xhat = vec![0.0; dim];
    for j in 0..n {
        let (g, xh) = (dy.row(j), cache.xhat.row(j));
        for c in 0..dim {
            sum_dy[c] += g[c];
            sum_dy_xhat[c] += g[c] * xh[c];
        }
    }
    for j in 0..n {
        let (g, xh) = (dy.row(j), cache.xhat.row(j));
        let out = dx.row_mut(j);
        for c in 0..dim {
            out[c] = cache.inv_std[c] / nf * (nf * g[c] - sum_dy[c] - xh[c] * sum_dy_xhat[c]);
        }
    }
    dx
}

/// Per-example squared error of the sigmoid output.
pub fn mse_loss(prediction: f64, label: f64) -> f64 {
    (prediction - label) * (prediction - label)
}

/// Per-example softmax cross-entropy.
pub fn cross_entropy(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[class]
}

/// Binary task: loss and `dL/dlogit` for one example.
pub(crate) fn binary_loss_grad(logit: f64, label: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    (mse_loss(p, label), 2.0 * (p - label) * p * (1.0 - p))
}

/// Multiclass task: loss and `dL/dlogits` for one example.
pub(crate) fn multiclass_loss_grad(logits: &[f64], class: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[class] -= 1.0;
    (cross_entropy(logits, class), grad)
}
