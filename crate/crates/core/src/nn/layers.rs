//! Layer primitives: tree convolution, dynamic pooling, dense, batchnorm,
//! dropout, and the Huber loss.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Triangular kernel weights of one tree convolution layer, all (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub w_t: Array2<f64>,
    pub w_l: Array2<f64>,
    pub w_r: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn identity(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

pub fn gather(x: &ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (i, &j) in idx.iter().enumerate() {
        out.row_mut(i).assign(&x.row(j));
    }
    out
}

pub fn scatter_add(target: &mut Array2<f64>, src: &ArrayView2<f64>, idx: &[usize]) {
    for (i, &j) in idx.iter().enumerate() {
        let mut row = target.row_mut(j);
        row += &src.row(i);
    }
}

/// Tree convolution over packed rows:
/// `out(i) = act(W_t x_i + W_l x_left(i) + W_r x_right(i) + b)`, with the
/// designated zero rows forced back to zero after the activation.
///
/// Returns the pre-activation matrix alongside the output for backward use.
pub fn conv_forward(
    rows: &ArrayView2<f64>,
    left: &[usize],
    right: &[usize],
    zero_rows: &[usize],
    layer: &ConvLayer,
    activation: Activation,
) -> (Array2<f64>, Array2<f64>) {
    let xl = gather(rows, left);
    let xr = gather(rows, right);
    let mut z = rows.dot(&layer.w_t.t());
    z += &xl.dot(&layer.w_l.t());
    z += &xr.dot(&layer.w_r.t());
    z += &layer.b;
    let mut y = match activation {
        Activation::Relu => z.mapv(|v| v.max(0.0)),
        Activation::Identity => z.clone(),
    };
    for &r in zero_rows {
        y.row_mut(r).fill(0.0);
    }
    (z, y)
}

pub struct ConvGrads {
    pub w_t: Array2<f64>,
    pub w_l: Array2<f64>,
    pub w_r: Array2<f64>,
    pub b: Array1<f64>,
    /// Gradient w.r.t. the layer input rows.
    pub input: Array2<f64>,
}

/// Backward of `conv_forward`. `d_out` is the gradient w.r.t. the activated,
/// zero-forced output.
pub fn conv_backward(
    rows: &ArrayView2<f64>,
    left: &[usize],
    right: &[usize],
    zero_rows: &[usize],
    layer: &ConvLayer,
    activation: Activation,
    preact: &Array2<f64>,
    d_out: &Array2<f64>,
) -> ConvGrads {
    let mut dz = d_out.clone();
    for &r in zero_rows {
        dz.row_mut(r).fill(0.0);
    }
    if activation == Activation::Relu {
        dz.zip_mut_with(preact, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
    }
    let xl = gather(rows, left);
    let xr = gather(rows, right);
    let w_t = dz.t().dot(rows);
    let w_l = dz.t().dot(&xl);
    let w_r = dz.t().dot(&xr);
    let b = dz.sum_axis(Axis(0));
    let mut input = dz.dot(&layer.w_t);
    let dl = dz.dot(&layer.w_l);
    let dr = dz.dot(&layer.w_r);
    scatter_add(&mut input, &dl.view(), left);
    scatter_add(&mut input, &dr.view(), right);
    ConvGrads { w_t, w_l, w_r, b, input }
}

/// Spec-level single-slab convolution: slot 0 is the zero row, children
/// reference slots within the same slab.
pub fn tree_conv_layer(
    features: &Array2<f64>,
    left_idx: &[usize],
    right_idx: &[usize],
    layer: &ConvLayer,
    activation: Activation,
) -> Array2<f64> {
    conv_forward(&features.view(), left_idx, right_idx, &[0], layer, activation).1
}

/// Per-channel max over vote=1 slots; the zero vector when nothing votes.
pub fn dynamic_pool(features: &ArrayView2<f64>, votes: &[bool]) -> Array1<f64> {
    let ch = features.ncols();
    let mut out = Array1::zeros(ch);
    let mut any = false;
    for (row, &vote) in features.outer_iter().zip(votes) {
        if !vote {
            continue;
        }
        if !any {
            out.assign(&row);
            any = true;
        } else {
            out.zip_mut_with(&row, |o, &x| *o = o.max(x));
        }
    }
    out
}

/// Argmax row per channel over vote=1 slots, for pooling backward.
/// Returns `None` per channel when nothing votes.
pub fn dynamic_pool_argmax(
    features: &ArrayView2<f64>,
    votes: &[bool],
) -> (Array1<f64>, Vec<Option<usize>>) {
    let ch = features.ncols();
    let mut out = Array1::zeros(ch);
    let mut arg: Vec<Option<usize>> = vec![None; ch];
    for (r, (row, &vote)) in features.outer_iter().zip(votes).enumerate() {
        if !vote {
            continue;
        }
        for (c, &x) in row.iter().enumerate() {
            if arg[c].is_none() || x > out[c] {
                out[c] = x;
                arg[c] = Some(r);
            }
        }
    }
    (out, arg)
}

pub fn dense_forward(x: &ArrayView2<f64>, layer: &DenseLayer) -> Array2<f64> {
    let mut z = x.dot(&layer.w.t());
    z += &layer.b;
    z
}

pub struct DenseGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub input: Array2<f64>,
}

pub fn dense_backward(x: &ArrayView2<f64>, layer: &DenseLayer, dz: &Array2<f64>) -> DenseGrads {
    DenseGrads {
        w: dz.t().dot(x),
        b: dz.sum_axis(Axis(0)),
        input: dz.dot(&layer.w),
    }
}

/// Which statistics batchnorm normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnStats {
    /// Batch statistics (training mode).
    Batch,
    /// Running statistics (eval mode, or frozen for gradient checks).
    Running,
}

pub struct BnCache {
    pub x: Array2<f64>,
    pub xhat: Array2<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub stats: BnStats,
}

pub fn batchnorm_forward(x: &Array2<f64>, bn: &BatchNorm, stats: BnStats) -> (Array2<f64>, BnCache) {
    let (mean, var) = match stats {
        BnStats::Batch => {
            let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
            let centered = x - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty");
            (mean, var)
        }
        BnStats::Running => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let denom = var.mapv(|v| (v + BN_EPS).sqrt());
    let xhat = (x - &mean) / &denom;
    let y = &xhat * &bn.gamma + &bn.beta;
    (y, BnCache { x: x.clone(), xhat, mean, var, stats })
}

pub struct BnGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub input: Array2<f64>,
}

pub fn batchnorm_backward(bn: &BatchNorm, cache: &BnCache, dy: &Array2<f64>) -> BnGrads {
    let gamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let beta = dy.sum_axis(Axis(0));
    let denom = cache.var.mapv(|v| (v + BN_EPS).sqrt());
    let input = match cache.stats {
        BnStats::Running => dy * &(&bn.gamma / &denom),
        BnStats::Batch => {
            let n = dy.nrows() as f64;
            let dxhat = dy * &bn.gamma;
            let mean_dxhat = dxhat.mean_axis(Axis(0)).expect("nonempty");
            let mean_dxhat_xhat =
                (&dxhat * &cache.xhat).mean_axis(Axis(0)).expect("nonempty");
            let _ = n;
            (&dxhat - &mean_dxhat - &(&cache.xhat * &mean_dxhat_xhat)) / &denom
        }
    };
    BnGrads { gamma, beta, input }
}

/// Update running statistics from batch statistics.
pub fn batchnorm_update_running(bn: &mut BatchNorm, cache: &BnCache) {
    debug_assert_eq!(cache.stats, BnStats::Batch);
    bn.running_mean = &bn.running_mean * BN_MOMENTUM + &cache.mean * (1.0 - BN_MOMENTUM);
    bn.running_var = &bn.running_var * BN_MOMENTUM + &cache.var * (1.0 - BN_MOMENTUM);
}

/// Inverted dropout mask with keep scaling; `None` at rate 0.
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Option<Array2<f64>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Huber loss: quadratic within delta, linear beyond.
pub fn huber_loss(pred: f64, target: f64, delta: f64) -> f64 {
    let e = (pred - target).abs();
    if e <= delta {
        0.5 * e * e
    } else {
        delta * (e - 0.5 * delta)
    }
}

pub fn huber_grad(pred: f64, target: f64, delta: f64) -> f64 {
    (pred - target).clamp(-delta, delta)
}

/// Seeded dropout stream for one (seed, epoch, batch) triple.
pub fn dropout_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::util::mix64(
        seed ^ 0xd50f_0ff5,
        (epoch as u64) << 32 | batch as u64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn conv_1x1(w_t: f64, w_l: f64, w_r: f64, b: f64) -> ConvLayer {
        ConvLayer {
            w_t: array![[w_t]],
            w_l: array![[w_l]],
            w_r: array![[w_r]],
            b: array![b],
        }
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let layer = ConvLayer {
            w_t: Array2::eye(2),
            w_l: Array2::zeros((2, 2)),
            w_r: Array2::zeros((2, 2)),
            b: Array1::zeros(2),
        };
        // Slot 0 zero row, slot 1 a single node with no children.
        let features = array![[0.0, 0.0], [3.0, -4.0]];
        let out = tree_conv_layer(&features, &[0, 0], &[0, 0], &layer, Activation::Identity);
        assert_eq!(out, features);
    }

    #[test]
    fn conv_all_zero_features_and_bias_give_zero() {
        let layer = conv_1x1(2.0, 3.0, 5.0, 0.0);
        let features = Array2::zeros((4, 1));
        let out = tree_conv_layer(&features, &[0, 0, 0, 0], &[0, 0, 0, 0], &layer, Activation::Relu);
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn conv_three_node_hand_example() {
        // Root at slot 1 with children at slots 2 and 3, all features 1.
        // W_t=2, W_l=3, W_r=5, b=1: root = 2+3+5+1 = 11, leaves = 2+1 = 3.
        let layer = conv_1x1(2.0, 3.0, 5.0, 1.0);
        let features = array![[0.0], [1.0], [1.0], [1.0]];
        let left = [0usize, 2, 0, 0];
        let right = [0usize, 3, 0, 0];
        let out = tree_conv_layer(&features, &left, &right, &layer, Activation::Identity);
        assert_eq!(out, array![[0.0], [11.0], [3.0], [3.0]]);
    }

    #[test]
    fn conv_slot_zero_is_forced_zero_despite_bias() {
        let layer = conv_1x1(2.0, 0.0, 0.0, 7.0);
        let features = array![[0.0], [1.0]];
        let out = tree_conv_layer(&features, &[0, 0], &[0, 0], &layer, Activation::Relu);
        assert_eq!(out[(0, 0)], 0.0);
        assert_eq!(out[(1, 0)], 9.0);
    }

    #[test]
    fn pool_examples() {
        let rows = array![[1.0, 4.0], [3.0, 2.0]];
        assert_eq!(dynamic_pool(&rows.view(), &[true, true]), array![3.0, 4.0]);
        assert_eq!(dynamic_pool(&rows.view(), &[true, false]), array![1.0, 4.0]);
        assert_eq!(dynamic_pool(&rows.view(), &[false, false]), array![0.0, 0.0]);
    }

    #[test]
    fn pool_argmax_matches_pool() {
        let rows = array![[1.0, 4.0], [3.0, 2.0], [-5.0, 9.0]];
        let votes = [true, true, true];
        let (pooled, arg) = dynamic_pool_argmax(&rows.view(), &votes);
        assert_eq!(pooled, dynamic_pool(&rows.view(), &votes));
        assert_eq!(arg, vec![Some(1), Some(2)]);
    }

    #[test]
    fn huber_branch_values() {
        assert_eq!(huber_loss(1.0, 1.0, 1.0), 0.0);
        assert_eq!(huber_loss(0.5, 0.0, 1.0), 0.125);
        assert_eq!(huber_loss(2.0, 0.0, 1.0), 1.5);
        assert_eq!(huber_grad(2.0, 0.0, 1.0), 1.0);
        assert_eq!(huber_grad(0.5, 0.0, 1.0), 0.5);
    }

    #[test]
    fn batchnorm_running_mode_is_affine() {
        let mut bn = BatchNorm::identity(2);
        bn.running_mean = array![1.0, -1.0];
        bn.running_var = array![4.0, 1.0];
        bn.gamma = array![2.0, 1.0];
        bn.beta = array![0.5, 0.0];
        let x = array![[3.0, 0.0]];
        let (y, _) = batchnorm_forward(&x, &bn, BnStats::Running);
        let expect0 = 2.0 * (3.0 - 1.0) / (4.0f64 + BN_EPS).sqrt() + 0.5;
        assert!((y[(0, 0)] - expect0).abs() < 1e-12);
        let expect1 = (0.0 - (-1.0)) / (1.0f64 + BN_EPS).sqrt();
        assert!((y[(0, 1)] - expect1).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_batch_mode_normalizes() {
        let bn = BatchNorm::identity(1);
        let x = array![[1.0], [3.0]];
        let (y, cache) = batchnorm_forward(&x, &bn, BnStats::Batch);
        assert!((cache.mean[0] - 2.0).abs() < 1e-12);
        assert!((cache.var[0] - 1.0).abs() < 1e-12);
        assert!((y[(0, 0)] + y[(1, 0)]).abs() < 1e-9);
    }

    #[test]
    fn dropout_mask_is_seeded_and_scaled() {
        let mut rng = dropout_rng(7, 0, 0);
        let m1 = dropout_mask((4, 8), 0.5, &mut rng).unwrap();
        let mut rng = dropout_rng(7, 0, 0);
        let m2 = dropout_mask((4, 8), 0.5, &mut rng).unwrap();
        assert_eq!(m1, m2);
        assert!(m1.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(dropout_mask((4, 8), 0.0, &mut rng).is_none());
    }
}
