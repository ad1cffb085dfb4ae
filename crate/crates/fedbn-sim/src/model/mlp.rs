//! Layer-tagged MLP: dense layers interleaved with batch normalization.
//! A ReLU follows every batch-norm layer; the final dense layer emits raw
//! logits. Gradients are hand-derived (no autodiff).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Rng};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        /// in x out weight matrix
        w: DenseMatrix,
        b: Vec<f64>,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        momentum: f64,
        epsilon: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    CrossEntropy,
}

/// Gradients mirroring the layer list. Running statistics have no gradient;
/// their batch updates are reported separately.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Dense { d_w: DenseMatrix, d_b: Vec<f64> },
    BatchNorm { d_gamma: Vec<f64>, d_beta: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

/// Batch statistics observed by one batch-norm layer during a forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub layer_index: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Output of a training-mode backward pass.
#[derive(Debug, Clone)]
pub struct MlpBackward {
    pub grads: MlpGrads,
    pub loss: f64,
    pub logits: DenseMatrix,
    pub bn_stats: Vec<BnBatchStats>,
}

/// Dense(d -> hidden) -> BatchNorm -> ReLU -> Dense(hidden -> classes).
/// Hidden weights and biases are N(0, alpha^2); the output layer starts at
/// zero so early logits carry signal only.
pub fn new_classifier(d: usize, hidden: usize, classes: usize, alpha: f64, rng: &mut Rng) -> MlpParams {
    let w1 = DenseMatrix::from_fn(d, hidden, |_, _| alpha * rng.standard_normal());
    let b1: Vec<f64> = (0..hidden).map(|_| alpha * rng.standard_normal()).collect();
    let w2 = DenseMatrix::zeros(hidden, classes);
    let b2 = vec![0.0; classes];
    MlpParams {
        layers: vec![
            Layer::Dense { w: w1, b: b1 },
            Layer::BatchNorm {
                gamma: vec![1.0; hidden],
                beta: vec![0.0; hidden],
                running_mean: vec![0.0; hidden],
                running_var: vec![1.0; hidden],
                momentum: BN_MOMENTUM,
                epsilon: BN_EPSILON,
            },
            Layer::Dense { w: w2, b: b2 },
        ],
    }
}

impl MlpParams {
    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dense { w, .. } => Some(w.rows),
            _ => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Dense { w, .. } => Some(w.cols),
            _ => None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { w, b } => {
                    if let Some(prev) = width {
                        if w.rows != prev {
                            return Err(Error::StructuralMismatch(format!(
                                "layer {i}: expects {} inputs, previous width is {prev}",
                                w.rows
                            )));
                        }
                    }
                    if b.len() != w.cols {
                        return Err(Error::StructuralMismatch(format!(
                            "layer {i}: bias length {} vs {} columns",
                            b.len(),
                            w.cols
                        )));
                    }
                    width = Some(w.cols);
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    let w = width.ok_or_else(|| {
                        Error::StructuralMismatch(format!("layer {i}: batch norm before any dense layer"))
                    })?;
                    for (name, len) in [
                        ("gamma", gamma.len()),
                        ("beta", beta.len()),
                        ("running_mean", running_mean.len()),
                        ("running_var", running_var.len()),
                    ] {
                        if len != w {
                            return Err(Error::StructuralMismatch(format!(
                                "layer {i}: {name} length {len} vs width {w}"
                            )));
                        }
                    }
                    if running_var.iter().any(|&v| v <= 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: running variance must stay positive"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: MlpParams = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }
}

struct ForwardPass {
    /// Input to each layer, indexed like `layers`; last entry is the logits.
    inputs: Vec<DenseMatrix>,
    logits: DenseMatrix,
    bn_caches: Vec<BnCache>,
}

struct BnCache {
    layer_index: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    x_hat: DenseMatrix,
    relu_output: DenseMatrix,
}

fn dense_forward(w: &DenseMatrix, b: &[f64], x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.cols != w.rows {
        return Err(Error::DimensionMismatch(format!(
            "dense layer expects {} inputs, batch has {}",
            w.rows, x.cols
        )));
    }
    let mut out = DenseMatrix::zeros(x.rows, w.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let out_row = out.row_mut(r);
        out_row.copy_from_slice(b);
        for (k, &xv) in row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let w_row = w.row(k);
            for c in 0..w_row.len() {
                out_row[c] += xv * w_row[c];
            }
        }
    }
    Ok(out)
}

fn batch_stats(x: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let b = x.rows as f64;
    let mut mean = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += x.get(r, c);
        }
    }
    for m in &mut mean {
        *m /= b;
    }
    let mut var = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (c, v) in var.iter_mut().enumerate() {
            let diff = x.get(r, c) - mean[c];
            *v += diff * diff;
        }
    }
    for v in &mut var {
        *v /= b;
    }
    (mean, var)
}

fn forward_pass(params: &MlpParams, x: &DenseMatrix, mode: Mode) -> Result<ForwardPass> {
    if mode == Mode::Train && x.rows < 2 {
        return Err(Error::InvalidArgument(format!(
            "training-mode forward needs a batch of at least 2, got {}",
            x.rows
        )));
    }
    params.validate()?;
    let mut current = x.clone();
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut bn_caches = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        inputs.push(current.clone());
        match layer {
            Layer::Dense { w, b } => {
                current = dense_forward(w, b, &current)?;
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
                ..
            } => {
                let (mean, var) = match mode {
                    Mode::Train => batch_stats(&current),
                    Mode::Eval => (running_mean.clone(), running_var.clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                let mut x_hat = DenseMatrix::zeros(current.rows, current.cols);
                let mut out = DenseMatrix::zeros(current.rows, current.cols);
                for r in 0..current.rows {
                    for c in 0..current.cols {
                        let normalized = (current.get(r, c) - mean[c]) * inv_std[c];
                        x_hat.set(r, c, normalized);
                        // relu directly follows every batch-norm layer
                        out.set(r, c, (gamma[c] * normalized + beta[c]).max(0.0));
                    }
                }
                bn_caches.push(BnCache {
                    layer_index: i,
                    mean,
                    var,
                    inv_std,
                    x_hat,
                    relu_output: out.clone(),
                });
                current = out;
            }
        }
    }
    Ok(ForwardPass {
        inputs,
        logits: current.clone(),
        bn_caches,
    })
}

/// Forward pass. Training mode normalizes by batch statistics and folds them
/// into the running statistics with momentum; eval mode uses the running
/// statistics and leaves the parameters untouched.
pub fn mlp_forward(params: &mut MlpParams, x: &DenseMatrix, mode: Mode) -> Result<DenseMatrix> {
    let pass = forward_pass(params, x, mode)?;
    if mode == Mode::Train {
        let stats: Vec<BnBatchStats> = pass
            .bn_caches
            .iter()
            .map(|c| BnBatchStats {
                layer_index: c.layer_index,
                mean: c.mean.clone(),
                var: c.var.clone(),
            })
            .collect();
        apply_running_stat_update(params, &stats);
    }
    Ok(pass.logits)
}

/// Pure eval-mode forward.
pub fn mlp_forward_eval(params: &MlpParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(forward_pass(params, x, Mode::Eval)?.logits)
}

/// Folds observed batch statistics into the running statistics:
/// running = (1 - momentum) * running + momentum * batch.
pub fn apply_running_stat_update(params: &mut MlpParams, stats: &[BnBatchStats]) {
    for stat in stats {
        if let Layer::BatchNorm {
            running_mean,
            running_var,
            momentum,
            ..
        } = &mut params.layers[stat.layer_index]
        {
            for c in 0..running_mean.len() {
                running_mean[c] = (1.0 - *momentum) * running_mean[c] + *momentum * stat.mean[c];
                running_var[c] = (1.0 - *momentum) * running_var[c] + *momentum * stat.var[c];
            }
        }
    }
}

/// Overwrites the running statistics with the batch statistics of `x`,
/// as when a freshly admitted client computes (mean, variance) on its own data.
pub fn recompute_running_stats(params: &mut MlpParams, x: &DenseMatrix) -> Result<()> {
    let pass = forward_pass(params, x, Mode::Train)?;
    for cache in &pass.bn_caches {
        if let Layer::BatchNorm {
            running_mean,
            running_var,
            ..
        } = &mut params.layers[cache.layer_index]
        {
            running_mean.clone_from(&cache.mean);
            running_var.clone_from(&cache.var);
        }
    }
    Ok(())
}

fn loss_and_grad(
    logits: &DenseMatrix,
    labels: &[f64],
    loss: LossKind,
) -> Result<(f64, DenseMatrix)> {
    let batch = logits.rows as f64;
    if labels.len() != logits.rows {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.rows
        )));
    }
    let mut grad = DenseMatrix::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    match loss {
        LossKind::CrossEntropy => {
            for r in 0..logits.rows {
                let row = logits.row(r);
                let target = labels[r] as usize;
                if labels[r] < 0.0 || labels[r].fract() != 0.0 || target >= logits.cols {
                    return Err(Error::InvalidArgument(format!(
                        "label {} is not a class index below {}",
                        labels[r], logits.cols
                    )));
                }
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let exp_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                total += -(row[target] - max - exp_sum.ln());
                for c in 0..logits.cols {
                    let p = (row[c] - max).exp() / exp_sum;
                    let indicator = if c == target { 1.0 } else { 0.0 };
                    grad.set(r, c, (p - indicator) / batch);
                }
            }
        }
        LossKind::Squared => {
            // scalar regression against the first output column; extra
            // columns regress to zero
            for r in 0..logits.rows {
                for c in 0..logits.cols {
                    let target = if c == 0 { labels[r] } else { 0.0 };
                    let diff = logits.get(r, c) - target;
                    total += diff * diff;
                    grad.set(r, c, 2.0 * diff / batch);
                }
            }
        }
    }
    Ok((total / batch, grad))
}

/// Mean loss over the batch without touching parameters; the finite-difference
/// oracle evaluates this.
pub fn mlp_loss(params: &MlpParams, x: &DenseMatrix, labels: &[f64], loss: LossKind) -> Result<f64> {
    let pass = forward_pass(params, x, Mode::Train)?;
    Ok(loss_and_grad(&pass.logits, labels, loss)?.0)
}

/// Training-mode backward pass: gradients of the batch-mean loss for every
/// dense weight/bias and every batch-norm scale/shift. Parameters are not
/// mutated; the batch statistics are returned so the caller can fold them in.
pub fn mlp_backward(
    params: &MlpParams,
    x: &DenseMatrix,
    labels: &[f64],
    loss: LossKind,
) -> Result<MlpBackward> {
    let pass = forward_pass(params, x, Mode::Train)?;
    let (loss_value, mut upstream) = loss_and_grad(&pass.logits, labels, loss)?;

    let mut grads: Vec<LayerGrads> = Vec::with_capacity(params.layers.len());
    let mut bn_iter = pass.bn_caches.iter().rev().peekable();
    let mut rev_grads = Vec::with_capacity(params.layers.len());

    for (i, layer) in params.layers.iter().enumerate().rev() {
        match layer {
            Layer::Dense { w, .. } => {
                let input = &pass.inputs[i];
                let mut d_w = DenseMatrix::zeros(w.rows, w.cols);
                let mut d_b = vec![0.0; w.cols];
                for r in 0..input.rows {
                    let in_row = input.row(r);
                    let up_row = upstream.row(r);
                    for c in 0..w.cols {
                        d_b[c] += up_row[c];
                    }
                    for k in 0..w.rows {
                        let xv = in_row[k];
                        if xv == 0.0 {
                            continue;
                        }
                        let d_row = d_w.row_mut(k);
                        for c in 0..w.cols {
                            d_row[c] += xv * up_row[c];
                        }
                    }
                }
                let mut d_x = DenseMatrix::zeros(input.rows, w.rows);
                for r in 0..input.rows {
                    let up_row = upstream.row(r);
                    let d_row = d_x.row_mut(r);
                    for k in 0..w.rows {
                        let w_row = w.row(k);
                        let mut acc = 0.0;
                        for c in 0..w.cols {
                            acc += w_row[c] * up_row[c];
                        }
                        d_row[k] = acc;
                    }
                }
                rev_grads.push(LayerGrads::Dense { d_w, d_b });
                upstream = d_x;
            }
            Layer::BatchNorm { gamma, .. } => {
                let cache = bn_iter.next().expect("cache per batch-norm layer");
                debug_assert_eq!(cache.layer_index, i);
                let rows = upstream.rows;
                let cols = upstream.cols;
                let b = rows as f64;
                // relu gradient first (relu output cached)
                let mut d_post = upstream;
                for r in 0..rows {
                    for c in 0..cols {
                        if cache.relu_output.get(r, c) <= 0.0 {
                            d_post.set(r, c, 0.0);
                        }
                    }
                }
                let mut d_gamma = vec![0.0; cols];
                let mut d_beta = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        d_gamma[c] += d_post.get(r, c) * cache.x_hat.get(r, c);
                        d_beta[c] += d_post.get(r, c);
                    }
                }
                // d x_hat, then the two batch-coupling corrections
                let mut sum_dxhat = vec![0.0; cols];
                let mut sum_dxhat_xhat = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let dxh = d_post.get(r, c) * gamma[c];
                        sum_dxhat[c] += dxh;
                        sum_dxhat_xhat[c] += dxh * cache.x_hat.get(r, c);
                    }
                }
                let mut d_x = DenseMatrix::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let dxh = d_post.get(r, c) * gamma[c];
                        let value = cache.inv_std[c]
                            * (dxh
                                - sum_dxhat[c] / b
                                - cache.x_hat.get(r, c) * sum_dxhat_xhat[c] / b);
                        d_x.set(r, c, value);
                    }
                }
                rev_grads.push(LayerGrads::BatchNorm { d_gamma, d_beta });
                upstream = d_x;
            }
        }
    }
    rev_grads.reverse();
    grads.extend(rev_grads);

    let bn_stats = pass
        .bn_caches
        .iter()
        .map(|c| BnBatchStats {
            layer_index: c.layer_index,
            mean: c.mean.clone(),
            var: c.var.clone(),
        })
        .collect();
    Ok(MlpBackward {
        grads: MlpGrads { layers: grads },
        loss: loss_value,
        logits: pass.logits,
        bn_stats,
    })
}

/// w -= lr * grad across every trainable tensor.
pub fn sgd_step(params: &mut MlpParams, grads: &MlpGrads, lr: f64) {
    for (layer, grad) in params.layers.iter_mut().zip(&grads.layers) {
        match (layer, grad) {
            (Layer::Dense { w, b }, LayerGrads::Dense { d_w, d_b }) => {
                for (wv, gv) in w.entries.iter_mut().zip(&d_w.entries) {
                    *wv -= lr * gv;
                }
                for (bv, gv) in b.iter_mut().zip(d_b) {
                    *bv -= lr * gv;
                }
            }
            (Layer::BatchNorm { gamma, beta, .. }, LayerGrads::BatchNorm { d_gamma, d_beta }) => {
                for (gv, dv) in gamma.iter_mut().zip(d_gamma) {
                    *gv -= lr * dv;
                }
                for (bv, dv) in beta.iter_mut().zip(d_beta) {
                    *bv -= lr * dv;
                }
            }
            _ => unreachable!("gradient record mirrors the layer list"),
        }
    }
}

/// Scales every gradient tensor in place.
pub fn scale_grads(grads: &mut MlpGrads, factor: f64) {
    for grad in &mut grads.layers {
        match grad {
            LayerGrads::Dense { d_w, d_b } => {
                for v in &mut d_w.entries {
                    *v *= factor;
                }
                for v in d_b {
                    *v *= factor;
                }
            }
            LayerGrads::BatchNorm { d_gamma, d_beta } => {
                for v in d_gamma {
                    *v *= factor;
                }
                for v in d_beta {
                    *v *= factor;
                }
            }
        }
    }
}

/// Adds mu * (param - anchor) to every trainable gradient (proximal term).
pub fn add_proximal_term(grads: &mut MlpGrads, params: &MlpParams, anchor: &MlpParams, mu: f64) {
    for ((grad, layer), anchor_layer) in grads
        .layers
        .iter_mut()
        .zip(&params.layers)
        .zip(&anchor.layers)
    {
        match (grad, layer, anchor_layer) {
            (
                LayerGrads::Dense { d_w, d_b },
                Layer::Dense { w, b },
                Layer::Dense { w: aw, b: ab },
            ) => {
                for i in 0..d_w.entries.len() {
                    d_w.entries[i] += mu * (w.entries[i] - aw.entries[i]);
                }
                for i in 0..d_b.len() {
                    d_b[i] += mu * (b[i] - ab[i]);
                }
            }
            (
                LayerGrads::BatchNorm { d_gamma, d_beta },
                Layer::BatchNorm { gamma, beta, .. },
                Layer::BatchNorm {
                    gamma: ag,
                    beta: ab,
                    ..
                },
            ) => {
                for i in 0..d_gamma.len() {
                    d_gamma[i] += mu * (gamma[i] - ag[i]);
                }
                for i in 0..d_beta.len() {
                    d_beta[i] += mu * (beta[i] - ab[i]);
                }
            }
            _ => unreachable!("structural mismatch in proximal term"),
        }
    }
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &DenseMatrix, labels: &[f64]) -> f64 {
    let mut correct = 0usize;
    for r in 0..logits.rows {
        let row = logits.row(r);
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == labels[r] as usize {
            correct += 1;
        }
    }
    correct as f64 / logits.rows.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(rng: &mut Rng) -> MlpParams {
        new_classifier(3, 5, 2, 1.0, rng)
    }

    fn random_batch(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.standard_normal())
    }

    #[test]
    fn train_mode_normalizes_to_zero_mean_unit_variance() {
        let mut rng = Rng::new(5);
        let mut params = MlpParams {
            layers: vec![
                Layer::Dense {
                    w: DenseMatrix::identity(3),
                    b: vec![0.0; 3],
                },
                Layer::BatchNorm {
                    gamma: vec![1.0; 3],
                    beta: vec![0.0; 3],
                    running_mean: vec![0.0; 3],
                    running_var: vec![1.0; 3],
                    momentum: BN_MOMENTUM,
                    epsilon: BN_EPSILON,
                },
            ],
        };
        let x = random_batch(16, 3, &mut rng);
        // logits here are relu(x_hat); recover x_hat stats by rebuilding them
        let pass = forward_pass(&params, &x, Mode::Train).unwrap();
        let x_hat = &pass.bn_caches[0].x_hat;
        for c in 0..3 {
            let mean: f64 = (0..16).map(|r| x_hat.get(r, c)).sum::<f64>() / 16.0;
            let var: f64 = (0..16).map(|r| x_hat.get(r, c).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3); // epsilon bias only
        }
        mlp_forward(&mut params, &x, Mode::Train).unwrap();
    }

    #[test]
    fn eval_output_is_independent_of_batch_composition() {
        let mut rng = Rng::new(6);
        let mut params = small_net(&mut rng);
        let warmup = random_batch(8, 3, &mut rng);
        mlp_forward(&mut params, &warmup, Mode::Train).unwrap();

        let x = random_batch(4, 3, &mut rng);
        let full = mlp_forward_eval(&params, &x).unwrap();
        for r in 0..4 {
            let single = DenseMatrix::from_rows(&[x.row(r).to_vec()]).unwrap();
            let alone = mlp_forward_eval(&params, &single).unwrap();
            for c in 0..2 {
                assert!((full.get(r, c) - alone.get(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(7);
        let params = small_net(&mut rng);
        let x = random_batch(6, 3, &mut rng);
        let a = mlp_forward_eval(&params, &x).unwrap();
        let b = mlp_forward_eval(&params, &x).unwrap();
        assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn train_mode_rejects_batch_of_one() {
        let mut rng = Rng::new(8);
        let mut params = small_net(&mut rng);
        let x = random_batch(1, 3, &mut rng);
        assert!(mlp_forward(&mut params, &x, Mode::Train).is_err());
    }

    #[test]
    fn running_stats_move_with_momentum() {
        let mut rng = Rng::new(9);
        let mut params = small_net(&mut rng);
        let x = random_batch(32, 3, &mut rng);
        let before = match &params.layers[1] {
            Layer::BatchNorm { running_mean, .. } => running_mean.clone(),
            _ => unreachable!(),
        };
        mlp_forward(&mut params, &x, Mode::Train).unwrap();
        let after = match &params.layers[1] {
            Layer::BatchNorm { running_mean, .. } => running_mean.clone(),
            _ => unreachable!(),
        };
        assert_ne!(before, after);
    }

    #[test]
    fn uniform_logits_and_labels_cancel_cross_entropy_gradient() {
        // logits all equal and balanced labels: output-layer bias gradient
        // sums softmax-minus-onehot to zero
        let logits = DenseMatrix::zeros(4, 2);
        let labels = vec![0.0, 1.0, 0.0, 1.0];
        let (_, grad) = loss_and_grad(&logits, &labels, LossKind::CrossEntropy).unwrap();
        for c in 0..2 {
            let col_sum: f64 = (0..4).map(|r| grad.get(r, c)).sum();
            assert!(col_sum.abs() < 1e-15);
        }
    }

    #[test]
    fn beta_gradient_is_column_sum_of_upstream() {
        // with the output dense layer set to identity, the upstream gradient
        // at the batch-norm layer is exactly the loss gradient; relu masking
        // is avoided by a large positive beta
        let hidden = 3;
        let params = MlpParams {
            layers: vec![
                Layer::Dense {
                    w: DenseMatrix::identity(hidden),
                    b: vec![0.0; hidden],
                },
                Layer::BatchNorm {
                    gamma: vec![1.0; hidden],
                    beta: vec![10.0; hidden],
                    running_mean: vec![0.0; hidden],
                    running_var: vec![1.0; hidden],
                    momentum: BN_MOMENTUM,
                    epsilon: BN_EPSILON,
                },
                Layer::Dense {
                    w: DenseMatrix::identity(hidden),
                    b: vec![0.0; hidden],
                },
            ],
        };
        let mut rng = Rng::new(10);
        let x = random_batch(5, hidden, &mut rng);
        let labels = vec![0.0, 1.0, 2.0, 0.0, 1.0];
        let back = mlp_backward(&params, &x, &labels, LossKind::CrossEntropy).unwrap();
        // recompute the upstream at the output of the batch-norm layer
        let pass = forward_pass(&params, &x, Mode::Train).unwrap();
        let (_, upstream) = loss_and_grad(&pass.logits, &labels, LossKind::CrossEntropy).unwrap();
        match &back.grads.layers[1] {
            LayerGrads::BatchNorm { d_beta, .. } => {
                for c in 0..hidden {
                    let col_sum: f64 = (0..5).map(|r| upstream.get(r, c)).sum();
                    assert!((d_beta[c] - col_sum).abs() < 1e-12);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn bn_output_is_invariant_to_per_channel_affine_input_rescale() {
        // an identity first layer feeds the batch directly into the
        // batch-norm layer; rescaling a channel by a*x + b (a > 0) moves the
        // output by epsilon effects only
        let mut rng = Rng::new(11);
        let hidden = 5;
        let mut probe = small_net(&mut rng);
        probe.layers[0] = Layer::Dense {
            w: DenseMatrix::identity(hidden),
            b: vec![0.0; hidden],
        };
        probe.layers[2] = Layer::Dense {
            w: DenseMatrix::from_fn(hidden, 2, |_, _| rng.standard_normal()),
            b: vec![0.1, -0.2],
        };
        let hidden_x = random_batch(12, hidden, &mut rng);
        let mut hidden_scaled = hidden_x.clone();
        let a = [0.5, 2.0, 1.3, 1.7, 0.8];
        let b = [-1.0, 0.4, 2.0, 0.3, -0.2];
        for r in 0..12 {
            for c in 0..hidden {
                hidden_scaled.set(r, c, a[c] * hidden_x.get(r, c) + b[c]);
            }
        }
        let base = forward_pass(&probe, &hidden_x, Mode::Train).unwrap().logits;
        let shifted = forward_pass(&probe, &hidden_scaled, Mode::Train).unwrap().logits;
        for (u, v) in base.entries.iter().zip(&shifted.entries) {
            assert!((u - v).abs() < 1e-3, "{u} vs {v}");
        }
    }

    fn fd_check(loss: LossKind, seed: u64, configs: usize) -> f64 {
        let mut rng = Rng::new(seed);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..configs {
            let mut params = small_net(&mut rng);
            // randomize the output layer so upstream gradients reach every tensor
            if let Layer::Dense { w, b } = &mut params.layers[2] {
                for v in &mut w.entries {
                    *v = 0.3 * rng.standard_normal();
                }
                for v in b.iter_mut() {
                    *v = 0.1 * rng.standard_normal();
                }
            }
            let x = random_batch(4, 3, &mut rng);
            let labels: Vec<f64> = match loss {
                LossKind::CrossEntropy => (0..4).map(|_| rng.below(2) as f64).collect(),
                LossKind::Squared => (0..4).map(|_| rng.standard_normal()).collect(),
            };
            let back = mlp_backward(&params, &x, &labels, loss).unwrap();
            for (li, layer) in params.layers.iter().enumerate() {
                let coords: Vec<(usize, usize)> = match layer {
                    Layer::Dense { w, b } => (0..w.entries.len())
                        .map(|i| (0, i))
                        .chain((0..b.len()).map(|i| (1, i)))
                        .collect(),
                    Layer::BatchNorm { gamma, beta, .. } => (0..gamma.len())
                        .map(|i| (2, i))
                        .chain((0..beta.len()).map(|i| (3, i)))
                        .collect(),
                };
                for (slot, idx) in coords {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    perturb(&mut plus, li, slot, idx, h);
                    perturb(&mut minus, li, slot, idx, -h);
                    let fd = (mlp_loss(&plus, &x, &labels, loss).unwrap()
                        - mlp_loss(&minus, &x, &labels, loss).unwrap())
                        / (2.0 * h);
                    let analytic = read_grad(&back.grads, li, slot, idx);
                    let scale = analytic.abs().max(fd.abs());
                    let gap = if scale < 1e-7 {
                        (analytic - fd).abs() * 1e-3
                    } else {
                        (analytic - fd).abs() / scale
                    };
                    worst = worst.max(gap);
                }
            }
        }
        worst
    }

    fn perturb(params: &mut MlpParams, layer: usize, slot: usize, idx: usize, h: f64) {
        match (&mut params.layers[layer], slot) {
            (Layer::Dense { w, .. }, 0) => w.entries[idx] += h,
            (Layer::Dense { b, .. }, 1) => b[idx] += h,
            (Layer::BatchNorm { gamma, .. }, 2) => gamma[idx] += h,
            (Layer::BatchNorm { beta, .. }, 3) => beta[idx] += h,
            _ => unreachable!(),
        }
    }

    fn read_grad(grads: &MlpGrads, layer: usize, slot: usize, idx: usize) -> f64 {
        match (&grads.layers[layer], slot) {
            (LayerGrads::Dense { d_w, .. }, 0) => d_w.entries[idx],
            (LayerGrads::Dense { d_b, .. }, 1) => d_b[idx],
            (LayerGrads::BatchNorm { d_gamma, .. }, 2) => d_gamma[idx],
            (LayerGrads::BatchNorm { d_beta, .. }, 3) => d_beta[idx],
            _ => unreachable!(),
        }
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let worst = fd_check(LossKind::CrossEntropy, 63, 5);
        assert!(worst < 1e-4, "worst relative gap {worst:.3e}");
    }

    #[test]
    fn squared_gradients_match_finite_differences() {
        let worst = fd_check(LossKind::Squared, 64, 5);
        assert!(worst < 1e-4, "worst relative gap {worst:.3e}");
    }

    #[test]
    fn checkpoint_json_round_trips() {
        let mut rng = Rng::new(12);
        let params = small_net(&mut rng);
        let text = params.to_json().unwrap();
        assert!(text.contains("\"tag\": \"dense\""));
        assert!(text.contains("\"tag\": \"batch_norm\""));
        let back = MlpParams::from_json(&text).unwrap();
        match (&params.layers[0], &back.layers[0]) {
            (Layer::Dense { w: a, .. }, Layer::Dense { w: b, .. }) => {
                assert_eq!(a.entries, b.entries)
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn recompute_overwrites_running_stats_with_batch_stats() {
        let mut rng = Rng::new(13);
        let mut params = small_net(&mut rng);
        let x = random_batch(10, 3, &mut rng);
        recompute_running_stats(&mut params, &x).unwrap();
        let pass = forward_pass(&params, &x, Mode::Train).unwrap();
        match &params.layers[1] {
            Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } => {
                assert_eq!(running_mean, &pass.bn_caches[0].mean);
                assert_eq!(running_var, &pass.bn_caches[0].var);
            }
            _ => unreachable!(),
        }
    }
}
