//! Training loop: seeded epoch shuffling, Adam updates, per-epoch validation
//! loss, and early stopping with best-weight restore.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::batch::{Batch, CompactQuery, Dataset};
use super::layers::{batchnorm_update_running, dropout_rng};
use super::model::{backward, batch_loss, forward, ForwardOpts};
use super::{ModelParams, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Train until `max_epochs` or until the validation loss has not improved
/// for `patience` epochs, then restore the best-validation weights.
pub fn train_model(
    mut params: ModelParams,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig("train and validation splits must be nonempty".into()));
    }

    let mut optimizer = Adam::new(cfg.learning_rate, &mut params);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 0..cfg.max_epochs {
        let train_loss = run_training_epoch(&mut params, &mut optimizer, train, cfg, epoch)?;
        let val_loss = evaluate_loss(&params, val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation loss at epoch {epoch}")));
        }
        history.push(EpochStats { epoch, train_loss, val_loss });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");

        let improved = best.as_ref().map_or(true, |(_, b, _)| val_loss < *b);
        if improved {
            best = Some((epoch, val_loss, params.clone()));
        } else if let Some((best_epoch, _, _)) = &best {
            if epoch - best_epoch >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params: best_params, history, best_epoch, best_val_loss })
}

/// One pass over the training set: seeded shuffle, forward in train mode,
/// backward, Adam update, and batchnorm running-stat refresh. Returns the
/// mean batch loss.
pub fn run_training_epoch(
    params: &mut ModelParams,
    optimizer: &mut Adam,
    train: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(crate::util::mix64(cfg.seed ^ 0x5817_ff1e, epoch as u64));
    indices.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for (batch_no, chunk) in indices.chunks(cfg.batch_size).enumerate() {
        let queries: Vec<&CompactQuery> = chunk.iter().map(|&i| &train.queries[i]).collect();
        let targets: Vec<f64> = chunk.iter().map(|&i| train.targets[i]).collect();
        let batch = Batch::pack(&queries, Some(targets.clone()));
        let opts = if params.arch.dropout_rate > 0.0 {
            ForwardOpts {
                dropout_rng: Some(dropout_rng(cfg.seed, epoch, batch_no)),
                bn: super::layers::BnStats::Batch,
            }
        } else {
            ForwardOpts { dropout_rng: None, bn: super::layers::BnStats::Batch }
        };
        let cache = forward(params, &batch, opts)?;
        let (loss, d_preds) = batch_loss(cache.preds(), &targets, cfg.huber_delta);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite training loss at epoch {epoch}, batch {batch_no}"
            )));
        }
        loss_sum += loss;
        batches += 1;
        let grads = backward(params, &batch, &cache, &d_preds);
        optimizer.step(params, &grads);
        if let (Some(bn), Some(c)) = (&mut params.bn1, &cache.bn1_cache) {
            batchnorm_update_running(bn, c);
        }
        if let (Some(bn), Some(c)) = (&mut params.bn2, &cache.bn2_cache) {
            batchnorm_update_running(bn, c);
        }
    }
    Ok(loss_sum / batches.max(1) as f64)
}

/// Mean Huber loss over a dataset in eval mode.
pub fn evaluate_loss(params: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for chunk_start in (0..data.len()).step_by(cfg.batch_size) {
        let end = (chunk_start + cfg.batch_size).min(data.len());
        let queries: Vec<&CompactQuery> =
            data.queries[chunk_start..end].iter().collect();
        let targets = data.targets[chunk_start..end].to_vec();
        let batch = Batch::pack(&queries, Some(targets.clone()));
        let cache = forward(params, &batch, ForwardOpts::eval())?;
        let (loss, _) = batch_loss(cache.preds(), &targets, cfg.huber_delta);
        sum += loss * (end - chunk_start) as f64;
    }
    Ok(sum / data.len() as f64)
}

/// Eval-mode predictions (normalized units) for a whole dataset.
pub fn predict_normalized(params: &ModelParams, queries: &[CompactQuery], batch_size: usize) -> Result<Vec<f64>> {
    let mut preds = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(batch_size.max(1)) {
        let refs: Vec<&CompactQuery> = chunk.iter().collect();
        let batch = Batch::pack(&refs, None);
        let cache = forward(params, &batch, ForwardOpts::eval())?;
        preds.extend_from_slice(cache.preds());
    }
    Ok(preds)
}
