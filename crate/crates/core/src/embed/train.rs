//! Corpus construction and skip-gram training with negative sampling.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{tokenize_predicate, EmbeddingModel};
use crate::error::{Error, Result};
use crate::plan::{PlanNode, Workload};

/// One sentence per query: all of the query's predicate tokens in plan
/// (depth-first) order.
#[derive(Debug, Clone, Default)]
pub struct TokenCorpus {
    pub sentences: Vec<Vec<String>>,
    pub token_counts: HashMap<String, usize>,
}

impl TokenCorpus {
    pub fn from_sentences(sentences: Vec<Vec<String>>) -> Self {
        let mut token_counts = HashMap::new();
        for sentence in &sentences {
            for token in sentence {
                *token_counts.entry(token.clone()).or_insert(0) += 1;
            }
        }
        TokenCorpus { sentences, token_counts }
    }
}

pub fn build_corpus(workload: &Workload) -> TokenCorpus {
    let sentences = workload
        .traces
        .iter()
        .map(|t| query_sentence(&t.root))
        .collect();
    TokenCorpus::from_sentences(sentences)
}

fn query_sentence(root: &PlanNode) -> Vec<String> {
    let mut tokens = Vec::new();
    for node in root.iter_nodes() {
        if let Some(pred) = &node.predicate {
            tokens.extend(tokenize_predicate(pred));
        }
    }
    tokens
}

/// Skip-gram hyper-parameters the toolkit would otherwise default.
#[derive(Debug, Clone)]
pub struct W2VHyper {
    pub epochs: usize,
    pub initial_lr: f64,
    pub negatives: usize,
    /// Noise distribution is proportional to count^noise_power.
    pub noise_power: f64,
}

impl Default for W2VHyper {
    fn default() -> Self {
        W2VHyper { epochs: 5, initial_lr: 0.025, negatives: 5, noise_power: 0.75 }
    }
}

/// Skip-gram with negative sampling. Single-threaded and a pure function of
/// (corpus, hyper-parameters, seed); two runs produce identical vectors.
pub fn train_word2vec(
    corpus: &TokenCorpus,
    p_f: usize,
    window: usize,
    min_count: usize,
    hyper: &W2VHyper,
    seed: u64,
) -> Result<EmbeddingModel> {
    if p_f == 0 || window == 0 {
        return Err(Error::InvalidConfig("p_f and window must be positive".into()));
    }
    // Vocabulary: tokens at or above min_count, most frequent first.
    let mut vocab: Vec<(String, usize)> = corpus
        .token_counts
        .iter()
        .filter(|(_, &c)| c >= min_count)
        .map(|(t, &c)| (t.clone(), c))
        .collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if vocab.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let index: HashMap<&str, usize> =
        vocab.iter().enumerate().map(|(i, (t, _))| (t.as_str(), i)).collect();

    // Cumulative noise distribution over count^noise_power.
    let mut noise_cdf = Vec::with_capacity(vocab.len());
    let mut acc = 0.0;
    for (_, count) in &vocab {
        acc += (*count as f64).powf(hyper.noise_power);
        noise_cdf.push(acc);
    }
    let noise_total = acc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input: Vec<Vec<f64>> = (0..vocab.len())
        .map(|_| {
            (0..p_f)
                .map(|_| (rng.random::<f64>() - 0.5) / p_f as f64)
                .collect()
        })
        .collect();
    let mut output: Vec<Vec<f64>> = vec![vec![0.0; p_f]; vocab.len()];

    let sentence_ids: Vec<Vec<usize>> = corpus
        .sentences
        .iter()
        .map(|s| s.iter().filter_map(|t| index.get(t.as_str()).copied()).collect())
        .collect();
    let words_per_epoch: usize = sentence_ids.iter().map(Vec::len).sum();
    let total_words = (words_per_epoch * hyper.epochs).max(1);

    let mut processed = 0usize;
    let mut grad_acc = vec![0.0; p_f];
    for _ in 0..hyper.epochs {
        for sentence in &sentence_ids {
            let lr = hyper.initial_lr
                * (1.0 - processed as f64 / total_words as f64).max(1e-4);
            processed += sentence.len();
            for (pos, &center) in sentence.iter().enumerate() {
                let reach = rng.random_range(1..=window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(sentence.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = sentence[ctx_pos];
                    grad_acc.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=hyper.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let draw = sample_noise(&noise_cdf, noise_total, &mut rng);
                            if draw == context {
                                continue;
                            }
                            (draw, 0.0)
                        };
                        let score: f64 = input[center]
                            .iter()
                            .zip(output[target].iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        let g = (label - sigmoid(score)) * lr;
                        for i in 0..p_f {
                            grad_acc[i] += g * output[target][i];
                            output[target][i] += g * input[center][i];
                        }
                    }
                    for i in 0..p_f {
                        input[center][i] += grad_acc[i];
                    }
                }
            }
        }
    }

    let entries = vocab
        .into_iter()
        .enumerate()
        .map(|(i, (token, _))| (token, std::mem::take(&mut input[i])))
        .collect();
    Ok(EmbeddingModel::from_parts(p_f, window, min_count, entries, vec![0.0; p_f]))
}

fn sample_noise(cdf: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let x = rng.random::<f64>() * total;
    cdf.partition_point(|&c| c <= x).min(cdf.len() - 1)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
