//! Forward and backward passes over packed batches.
//!
//! Head layout per query: 3 tree-conv layers over every packed sub-tree,
//! vote-masked max pooling per sub-tree, concatenation of the K pooled
//! vectors, then dense+ReLU+batchnorm twice and a sigmoid output unit.
//! Dropout applies to the input of each dense layer in train mode.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use super::batch::Batch;
use super::layers::{
    batchnorm_backward, batchnorm_forward, conv_backward, conv_forward, dense_backward,
    dense_forward, dropout_mask, dynamic_pool_argmax, sigmoid, Activation, BnCache, BnStats,
};
use super::{ModelParams, CONV_LAYERS};
use crate::error::{Error, Result};

/// Forward-pass switches. Training uses batch statistics and (optionally) a
/// dropout stream; evaluation and gradient checks run with running
/// statistics and no dropout.
pub struct ForwardOpts {
    pub dropout_rng: Option<ChaCha8Rng>,
    pub bn: BnStats,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        ForwardOpts { dropout_rng: None, bn: BnStats::Running }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        ForwardOpts { dropout_rng: Some(rng), bn: BnStats::Batch }
    }

    /// Frozen mode for finite-difference checks: gradients flow, but the
    /// normalization constants come from running statistics.
    pub fn frozen() -> Self {
        ForwardOpts { dropout_rng: None, bn: BnStats::Running }
    }
}

pub struct ForwardCache {
    conv_inputs: Vec<Array2<f64>>,
    conv_preacts: Vec<Array2<f64>>,
    /// Per span, per output channel: the absolute row that won the max.
    pool_arg: Vec<Vec<Option<usize>>>,
    pooled: Array2<f64>,
    drop_masks: [Option<Array2<f64>>; 3],
    d0: Array2<f64>,
    z1: Array2<f64>,
    pub(super) bn1_cache: Option<BnCache>,
    d1: Array2<f64>,
    z2: Array2<f64>,
    pub(super) bn2_cache: Option<BnCache>,
    d2: Array2<f64>,
    preds: Vec<f64>,
}

impl ForwardCache {
    pub fn preds(&self) -> &[f64] {
        &self.preds
    }
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn apply_mask(x: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x.clone(),
    }
}

/// Run the network over a packed batch. Predictions are strictly in (0, 1).
pub fn forward(params: &ModelParams, batch: &Batch, mut opts: ForwardOpts) -> Result<ForwardCache> {
    if batch.rows.ncols() != params.feature_dim {
        return Err(Error::Shape(format!(
            "batch feature width {} != model feature width {}",
            batch.rows.ncols(),
            params.feature_dim
        )));
    }
    if batch.keep != params.keep {
        return Err(Error::Shape(format!(
            "batch K {} != model K {}",
            batch.keep, params.keep
        )));
    }
    let max_idx = batch.rows.nrows();
    if batch.left.iter().chain(batch.right.iter()).any(|&i| i >= max_idx) {
        return Err(Error::Shape("child index out of range".into()));
    }

    // Convolution stack.
    let mut conv_inputs = Vec::with_capacity(CONV_LAYERS);
    let mut conv_preacts = Vec::with_capacity(CONV_LAYERS);
    let mut x = batch.rows.clone();
    for layer in &params.conv {
        let (z, y) = conv_forward(
            &x.view(),
            &batch.left,
            &batch.right,
            &batch.zero_rows,
            layer,
            Activation::Relu,
        );
        conv_inputs.push(x);
        conv_preacts.push(z);
        x = y;
    }
    let conv_out = x;

    // Vote-masked dynamic pooling, one block per (query, slot).
    let c3 = params.arch.conv_channels[CONV_LAYERS - 1];
    let mut pooled = Array2::zeros((batch.n_queries, params.flat_width()));
    let mut pool_arg = Vec::with_capacity(batch.spans.len());
    for (span, votes) in batch.spans.iter().zip(&batch.votes) {
        let block = conv_out.slice(ndarray::s![
            span.base_row + 1..span.base_row + 1 + span.len,
            ..
        ]);
        let (values, arg) = dynamic_pool_argmax(&block, votes);
        for c in 0..c3 {
            pooled[(span.query, span.slot * c3 + c)] = values[c];
        }
        pool_arg.push(
            arg.into_iter()
                .map(|a| a.map(|r| span.base_row + 1 + r))
                .collect(),
        );
    }

    // Dense head.
    let rate = params.arch.dropout_rate;
    let mut mask_for = |shape: (usize, usize)| match &mut opts.dropout_rng {
        Some(rng) => dropout_mask(shape, rate, rng),
        None => None,
    };
    let mask0 = mask_for(pooled.dim());
    let d0 = apply_mask(&pooled, &mask0);
    let z1 = dense_forward(&d0.view(), &params.dense1);
    let a1 = relu(&z1);
    let (y1, bn1_cache) = match &params.bn1 {
        Some(bn) => {
            let (y, c) = batchnorm_forward(&a1, bn, opts.bn);
            (y, Some(c))
        }
        None => (a1, None),
    };
    let mask1 = mask_for(y1.dim());
    let d1 = apply_mask(&y1, &mask1);
    let z2 = dense_forward(&d1.view(), &params.dense2);
    let a2 = relu(&z2);
    let (y2, bn2_cache) = match &params.bn2 {
        Some(bn) => {
            let (y, c) = batchnorm_forward(&a2, bn, opts.bn);
            (y, Some(c))
        }
        None => (a2, None),
    };
    let mask2 = mask_for(y2.dim());
    let d2 = apply_mask(&y2, &mask2);
    let z3 = dense_forward(&d2.view(), &params.output);
    let preds: Vec<f64> = z3.column(0).iter().map(|&z| sigmoid(z)).collect();

    Ok(ForwardCache {
        conv_inputs,
        conv_preacts,
        pool_arg,
        pooled,
        drop_masks: [mask0, mask1, mask2],
        d0,
        z1,
        bn1_cache,
        d1,
        z2,
        bn2_cache,
        d2,
        preds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradSet {
    pub w_t: Array2<f64>,
    pub w_l: Array2<f64>,
    pub w_r: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradSet {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGradSet {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Gradients for every trainable tensor, in the same canonical order as
/// `ModelParams::param_slices_mut`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub conv: Vec<ConvGradSet>,
    pub dense1: DenseGradSet,
    pub dense2: DenseGradSet,
    pub output: DenseGradSet,
    pub bn1: Option<BnGradSet>,
    pub bn2: Option<BnGradSet>,
}

impl ModelGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.conv {
            out.push(layer.w_t.as_slice().expect("standard layout"));
            out.push(layer.w_l.as_slice().expect("standard layout"));
            out.push(layer.w_r.as_slice().expect("standard layout"));
            out.push(layer.b.as_slice().expect("standard layout"));
        }
        for dense in [&self.dense1, &self.dense2, &self.output] {
            out.push(dense.w.as_slice().expect("standard layout"));
            out.push(dense.b.as_slice().expect("standard layout"));
        }
        for bn in [&self.bn1, &self.bn2].into_iter().flatten() {
            out.push(bn.gamma.as_slice().expect("standard layout"));
            out.push(bn.beta.as_slice().expect("standard layout"));
        }
        out
    }
}

/// Backpropagate `d_preds` (gradient of the loss w.r.t. each query's
/// sigmoid output) through the cached forward pass.
pub fn backward(
    params: &ModelParams,
    batch: &Batch,
    cache: &ForwardCache,
    d_preds: &[f64],
) -> ModelGrads {
    assert_eq!(d_preds.len(), batch.n_queries);

    // Sigmoid.
    let dz3 = Array2::from_shape_fn((batch.n_queries, 1), |(i, _)| {
        let p = cache.preds[i];
        d_preds[i] * p * (1.0 - p)
    });

    // Output dense.
    let out_grads = dense_backward(&cache.d2.view(), &params.output, &dz3);
    let dd2 = out_grads.input;
    let dy2 = apply_mask(&dd2, &cache.drop_masks[2]);

    // BN2 + ReLU2 + dense2.
    let (da2, bn2_grads) = match (&params.bn2, &cache.bn2_cache) {
        (Some(bn), Some(c)) => {
            let g = batchnorm_backward(bn, c, &dy2);
            (g.input, Some(BnGradSet { gamma: g.gamma, beta: g.beta }))
        }
        _ => (dy2, None),
    };
    let mut dz2 = da2;
    dz2.zip_mut_with(&cache.z2, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let d2_grads = dense_backward(&cache.d1.view(), &params.dense2, &dz2);
    let dd1 = d2_grads.input;
    let dy1 = apply_mask(&dd1, &cache.drop_masks[1]);

    // BN1 + ReLU1 + dense1.
    let (da1, bn1_grads) = match (&params.bn1, &cache.bn1_cache) {
        (Some(bn), Some(c)) => {
            let g = batchnorm_backward(bn, c, &dy1);
            (g.input, Some(BnGradSet { gamma: g.gamma, beta: g.beta }))
        }
        _ => (dy1, None),
    };
    let mut dz1 = da1;
    dz1.zip_mut_with(&cache.z1, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let d1_grads = dense_backward(&cache.d0.view(), &params.dense1, &dz1);
    let dpooled_masked = apply_mask(&d1_grads.input, &cache.drop_masks[0]);

    // Pooling: route each channel's gradient to its argmax row.
    let c3 = params.arch.conv_channels[CONV_LAYERS - 1];
    let rows = cache.conv_inputs[0].nrows();
    let mut d_conv = Array2::zeros((rows, c3));
    for (span, arg) in batch.spans.iter().zip(&cache.pool_arg) {
        for (c, row) in arg.iter().enumerate() {
            if let Some(r) = row {
                d_conv[(*r, c)] += dpooled_masked[(span.query, span.slot * c3 + c)];
            }
        }
    }

    // Convolution stack, last layer first.
    let mut conv_grads: Vec<ConvGradSet> = Vec::with_capacity(CONV_LAYERS);
    let mut d_out = d_conv;
    for l in (0..CONV_LAYERS).rev() {
        let g = conv_backward(
            &cache.conv_inputs[l].view(),
            &batch.left,
            &batch.right,
            &batch.zero_rows,
            &params.conv[l],
            Activation::Relu,
            &cache.conv_preacts[l],
            &d_out,
        );
        conv_grads.push(ConvGradSet { w_t: g.w_t, w_l: g.w_l, w_r: g.w_r, b: g.b });
        d_out = g.input;
    }
    conv_grads.reverse();

    ModelGrads {
        conv: conv_grads,
        dense1: DenseGradSet { w: d1_grads.w, b: d1_grads.b },
        dense2: DenseGradSet { w: d2_grads.w, b: d2_grads.b },
        output: DenseGradSet { w: out_grads.w, b: out_grads.b },
        bn1: bn1_grads,
        bn2: bn2_grads,
    }
}

/// Mean Huber loss over a batch and its gradient w.r.t. each prediction.
pub fn batch_loss(preds: &[f64], targets: &[f64], delta: f64) -> (f64, Vec<f64>) {
    assert_eq!(preds.len(), targets.len());
    let n = preds.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (&p, &t) in preds.iter().zip(targets) {
        loss += super::layers::huber_loss(p, t, delta);
        grads.push(super::layers::huber_grad(p, t, delta) / n);
    }
    (loss / n, grads)
}
