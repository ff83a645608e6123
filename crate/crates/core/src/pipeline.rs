//! End-to-end wiring: split, transform, embedding training, encoding,
//! model training, prediction, and the epoch timing bench.

use std::time::Instant;

use crate::embed::{build_corpus, train_word2vec, EmbeddingModel, W2VHyper};
use crate::error::{Error, Result};
use crate::eval::{split_workload, TargetTransform};
use crate::nn::{
    predict_normalized, train_model, ArchConfig, CompactQuery, Dataset, EpochStats, ModelParams,
    TrainConfig, TrainOutcome,
};
use crate::otp::{build_otp_tree, build_vocabularies, FeatureLayout, OtpTree, Vocab};
use crate::plan::{QueryTrace, Workload};
use crate::sampler::{
    encode_query_compact, full_tree_sample, sample_subtrees, select_top_k, QuerySample,
    SamplerConfig,
};
use crate::util::parallel_map;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub sampler: SamplerConfig,
    /// Full-tree degenerate mode: one unsampled sub-tree per query (K=1).
    pub full_tree: bool,
    pub p_f: usize,
    pub window: usize,
    pub min_count: usize,
    pub w2v: W2VHyper,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub split_ratios: [usize; 3],
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.p_f == 0 || self.window == 0 {
            return Err(Error::InvalidConfig("p_f and window must be positive".into()));
        }
        Ok(())
    }

    pub fn keep(&self) -> usize {
        if self.full_tree {
            1
        } else {
            self.sampler.keep
        }
    }
}

/// Everything needed to score new queries.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub embedder: EmbeddingModel,
    pub transform: TargetTransform,
    pub sampler: SamplerConfig,
    pub full_tree: bool,
    pub meta: TrainMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub split_ratios: [usize; 3],
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
}

/// Sample (or pass through whole) and encode one trace.
pub fn encode_trace(
    trace: &QueryTrace,
    vocab: &Vocab,
    embedder: &EmbeddingModel,
    sampler: &SamplerConfig,
    full_tree: bool,
) -> Result<CompactQuery> {
    let tree = build_otp_tree(&trace.root)?;
    encode_tree(&tree, vocab, embedder, sampler, full_tree)
}

fn encode_tree(
    tree: &OtpTree,
    vocab: &Vocab,
    embedder: &EmbeddingModel,
    sampler: &SamplerConfig,
    full_tree: bool,
) -> Result<CompactQuery> {
    let query = if full_tree {
        QuerySample { subtrees: vec![full_tree_sample(tree)] }
    } else {
        let samples = sample_subtrees(tree, sampler)?;
        select_top_k(samples, sampler.keep)
    };
    encode_query_compact(&query, tree, vocab, embedder)
}

/// Encode a whole split in parallel (deterministic output order).
pub fn encode_traces(
    traces: &[QueryTrace],
    vocab: &Vocab,
    embedder: &EmbeddingModel,
    sampler: &SamplerConfig,
    full_tree: bool,
) -> Result<Vec<CompactQuery>> {
    parallel_map(traces, |t| encode_trace(t, vocab, embedder, sampler, full_tree))
        .into_iter()
        .collect()
}

fn make_dataset(
    traces: &[QueryTrace],
    vocab: &Vocab,
    embedder: &EmbeddingModel,
    sampler: &SamplerConfig,
    full_tree: bool,
    transform: &TargetTransform,
) -> Result<Dataset> {
    Ok(Dataset {
        queries: encode_traces(traces, vocab, embedder, sampler, full_tree)?,
        targets: traces.iter().map(|t| transform.apply(t.total_cpu_min)).collect(),
    })
}

pub struct TrainedPipeline {
    pub bundle: ModelBundle,
    pub history: Vec<EpochStats>,
    /// The splits used, for downstream evaluation.
    pub splits: (Workload, Workload, Workload),
}

/// Run the full training pipeline on a labeled workload.
pub fn train_pipeline(workload: Workload, config: &PipelineConfig) -> Result<TrainedPipeline> {
    config.validate()?;
    let seed = config.seed;
    let (train, val, test) =
        split_workload(workload, config.split_ratios, seed, None)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig("train and validation splits must be nonempty".into()));
    }

    let train_targets: Vec<f64> = train.traces.iter().map(|t| t.total_cpu_min).collect();
    let transform = TargetTransform::fit(&train_targets)?;

    let corpus = build_corpus(&train);
    let mut embedder = train_word2vec(
        &corpus,
        config.p_f,
        config.window,
        config.min_count,
        &config.w2v,
        crate::util::mix64(seed, 0x77_32_76),
    )?;
    let vocab = build_vocabularies(&train)?;

    // Global fallback over the training PRED nodes.
    let train_trees: Vec<OtpTree> = train
        .traces
        .iter()
        .map(|t| build_otp_tree(&t.root))
        .collect::<Result<_>>()?;
    embedder.finalize_global_fallback(train_trees.iter().flat_map(|t| t.predicates()));

    let train_ds = make_dataset(&train.traces, &vocab, &embedder, &config.sampler, config.full_tree, &transform)?;
    let val_ds = make_dataset(&val.traces, &vocab, &embedder, &config.sampler, config.full_tree, &transform)?;

    let layout = FeatureLayout::new(&vocab, config.p_f);
    let params = ModelParams::init(
        &config.arch,
        layout.total(),
        config.keep(),
        crate::util::mix64(seed, 0x1417),
    )?;
    let train_cfg = TrainConfig { seed, ..config.train.clone() };
    let TrainOutcome { params, history, best_epoch, best_val_loss } =
        train_model(params, &train_ds, &val_ds, &train_cfg)?;

    let bundle = ModelBundle {
        params,
        vocab,
        embedder,
        transform,
        sampler: config.sampler,
        full_tree: config.full_tree,
        meta: TrainMeta {
            seed,
            split_ratios: config.split_ratios,
            best_epoch,
            epochs_run: history.len(),
            best_val_loss,
        },
    };
    Ok(TrainedPipeline { bundle, history, splits: (train, val, test) })
}

/// Predict total CPU minutes for each trace with a trained bundle.
pub fn predict_workload(bundle: &ModelBundle, traces: &[QueryTrace]) -> Result<Vec<f64>> {
    let queries = encode_traces(
        traces,
        &bundle.vocab,
        &bundle.embedder,
        &bundle.sampler,
        bundle.full_tree,
    )?;
    let normalized = predict_normalized(&bundle.params, &queries, 64)?;
    Ok(normalized.into_iter().map(|p| bundle.transform.invert(p)).collect())
}

/// Wall-clock seconds per training epoch, averaged over `repetitions` after
/// one warmup epoch.
pub fn epoch_timing_bench(
    workload: &Workload,
    arch: &ArchConfig,
    sampler: &SamplerConfig,
    full_tree: bool,
    p_f: usize,
    batch_size: usize,
    repetitions: usize,
) -> Result<f64> {
    if repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be >= 1".into()));
    }
    if workload.len() < 2 {
        return Err(Error::InvalidConfig("bench needs at least two traces".into()));
    }
    let vocab = build_vocabularies(workload)?;
    let corpus = build_corpus(workload);
    let hyper = W2VHyper { epochs: 1, ..W2VHyper::default() };
    let embedder = match train_word2vec(&corpus, p_f, 5, 1, &hyper, 0) {
        Ok(m) => m,
        // Predicate-free workloads still bench the convolution stack.
        Err(Error::EmptyCorpus) => {
            EmbeddingModel::from_parts(p_f, 5, 1, vec![], vec![0.0; p_f])
        }
        Err(e) => return Err(e),
    };
    let targets: Vec<f64> = workload.traces.iter().map(|t| t.total_cpu_min).collect();
    let transform = TargetTransform::fit(&targets)?;
    let dataset =
        make_dataset(&workload.traces, &vocab, &embedder, sampler, full_tree, &transform)?;

    let layout = FeatureLayout::new(&vocab, p_f);
    let keep = if full_tree { 1 } else { sampler.keep };
    let mut params = ModelParams::init(arch, layout.total(), keep, 7)?;
    let cfg = TrainConfig { batch_size, max_epochs: 1, ..TrainConfig::default() };
    let mut optimizer = crate::nn::Adam::new(cfg.learning_rate, &mut params);

    let mut times = Vec::with_capacity(repetitions);
    for epoch in 0..=repetitions {
        let start = Instant::now();
        crate::nn::run_training_epoch(&mut params, &mut optimizer, &dataset, &cfg, epoch)?;
        let elapsed = start.elapsed().as_secs_f64();
        if epoch > 0 {
            times.push(elapsed);
        }
    }
    Ok(times.iter().sum::<f64>() / times.len() as f64)
}
