//! Sub-tree convolution regressor: three tree-conv layers, vote-masked
//! dynamic pooling per sub-tree, flatten across the K sub-trees, and a dense
//! head with sigmoid output. Trained with Adam on Huber loss with early
//! stopping; gradients are analytic throughout.

mod adam;
mod batch;
mod layers;
mod model;
mod train;

pub use adam::Adam;
pub use batch::{Batch, CompactQuery, CompactSubTree, Dataset};
pub use layers::{
    batchnorm_forward, batchnorm_update_running, dynamic_pool, huber_grad, huber_loss, sigmoid,
    tree_conv_layer, Activation, BatchNorm, BnStats, ConvLayer, DenseLayer,
};
pub use model::{backward, batch_loss, forward, ForwardCache, ForwardOpts, ModelGrads};
pub use train::{evaluate_loss, predict_normalized, run_training_epoch, train_model, EpochStats, TrainOutcome};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CONV_LAYERS: usize = 3;

/// Network shape. The convolution stack is fixed at three layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub conv_channels: [usize; CONV_LAYERS],
    pub dense_units: [usize; 2],
    pub dropout_rate: f64,
    pub use_batchnorm: bool,
}

impl ArchConfig {
    /// Full-size preset: 512/512/512 kernels, 128/64 dense units.
    pub fn paper() -> Self {
        ArchConfig {
            conv_channels: [512, 512, 512],
            dense_units: [128, 64],
            dropout_rate: 0.10,
            use_batchnorm: true,
        }
    }

    /// Scaled-down preset: 128/128/128 kernels, 32/8 dense units.
    pub fn small() -> Self {
        ArchConfig {
            conv_channels: [128, 128, 128],
            dense_units: [32, 8],
            dropout_rate: 0.10,
            use_batchnorm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.iter().any(|&c| c == 0)
            || self.dense_units.iter().any(|&d| d == 0)
        {
            return Err(Error::InvalidConfig("zero-width layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub huber_delta: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            huber_delta: 1.0,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.huber_delta <= 0.0 {
            return Err(Error::InvalidConfig("rates must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable weights plus batchnorm running state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    /// Input feature width F.
    pub feature_dim: usize,
    /// Sub-trees per query K; the flatten width is K * conv_channels[2].
    pub keep: usize,
    pub conv: Vec<ConvLayer>,
    pub dense1: DenseLayer,
    pub dense2: DenseLayer,
    pub output: DenseLayer,
    pub bn1: Option<BatchNorm>,
    pub bn2: Option<BatchNorm>,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
}

impl ModelParams {
    /// Seeded uniform Glorot initialization.
    pub fn init(arch: &ArchConfig, feature_dim: usize, keep: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if feature_dim == 0 || keep == 0 {
            return Err(Error::InvalidConfig("feature_dim and keep must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::util::mix64(seed, 0x696e_6974));
        let mut conv = Vec::with_capacity(CONV_LAYERS);
        let mut in_ch = feature_dim;
        for &out_ch in &arch.conv_channels {
            conv.push(ConvLayer {
                w_t: glorot(out_ch, in_ch, &mut rng),
                w_l: glorot(out_ch, in_ch, &mut rng),
                w_r: glorot(out_ch, in_ch, &mut rng),
                b: Array1::zeros(out_ch),
            });
            in_ch = out_ch;
        }
        let flat = keep * arch.conv_channels[CONV_LAYERS - 1];
        let d1 = arch.dense_units[0];
        let d2 = arch.dense_units[1];
        let dense1 = DenseLayer { w: glorot(d1, flat, &mut rng), b: Array1::zeros(d1) };
        let dense2 = DenseLayer { w: glorot(d2, d1, &mut rng), b: Array1::zeros(d2) };
        let output = DenseLayer { w: glorot(1, d2, &mut rng), b: Array1::zeros(1) };
        let (bn1, bn2) = if arch.use_batchnorm {
            (Some(BatchNorm::identity(d1)), Some(BatchNorm::identity(d2)))
        } else {
            (None, None)
        };
        Ok(ModelParams {
            arch: arch.clone(),
            feature_dim,
            keep,
            conv,
            dense1,
            dense2,
            output,
            bn1,
            bn2,
        })
    }

    pub fn flat_width(&self) -> usize {
        self.keep * self.arch.conv_channels[CONV_LAYERS - 1]
    }

    /// Trainable tensors in canonical order; gradients, the optimizer, and
    /// the finite-difference check all walk the same ordering.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.conv {
            out.push(layer.w_t.as_slice_mut().expect("standard layout"));
            out.push(layer.w_l.as_slice_mut().expect("standard layout"));
            out.push(layer.w_r.as_slice_mut().expect("standard layout"));
            out.push(layer.b.as_slice_mut().expect("standard layout"));
        }
        for dense in [&mut self.dense1, &mut self.dense2, &mut self.output] {
            out.push(dense.w.as_slice_mut().expect("standard layout"));
            out.push(dense.b.as_slice_mut().expect("standard layout"));
        }
        for bn in [&mut self.bn1, &mut self.bn2].into_iter().flatten() {
            out.push(bn.gamma.as_slice_mut().expect("standard layout"));
            out.push(bn.beta.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for layer in &self.conv {
            total += layer.w_t.len() + layer.w_l.len() + layer.w_r.len() + layer.b.len();
        }
        for dense in [&self.dense1, &self.dense2, &self.output] {
            total += dense.w.len() + dense.b.len();
        }
        for bn in [&self.bn1, &self.bn2].into_iter().flatten() {
            total += bn.gamma.len() + bn.beta.len();
        }
        total
    }

    pub fn all_finite(&self) -> bool {
        let mut clone = self.clone();
        clone
            .param_slices_mut()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }
}
