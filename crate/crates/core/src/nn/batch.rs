//! Batch assembly. Real sub-trees from every query in the batch are packed
//! into one row matrix so each convolution layer is a single set of matrix
//! multiplies; padding sub-trees are never materialized since their pooled
//! vector is zero by construction.

use ndarray::Array2;

pub use crate::sampler::{CompactQuery, CompactSubTree};

/// Encoded queries plus normalized targets in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub queries: Vec<CompactQuery>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// One packed sub-tree: rows [base_row, base_row + len] of the batch matrix,
/// where base_row is that sub-tree's reserved zero row.
#[derive(Debug, Clone, Copy)]
pub struct Span {
    pub query: usize,
    pub slot: usize,
    pub base_row: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// (R, F) where R is the total packed row count.
    pub rows: Array2<f64>,
    /// Global row index of each row's left/right child; rows without a
    /// child point at their own sub-tree's base row.
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    /// Base rows, forced to zero after every convolution layer.
    pub zero_rows: Vec<usize>,
    pub spans: Vec<Span>,
    /// Votes per span, indexed like the span's node rows (0 = first node).
    pub votes: Vec<Vec<bool>>,
    pub n_queries: usize,
    pub keep: usize,
    pub targets: Option<Vec<f64>>,
}

impl Batch {
    pub fn pack(queries: &[&CompactQuery], targets: Option<Vec<f64>>) -> Self {
        assert!(!queries.is_empty(), "empty batch");
        let keep = queries[0].keep;
        let f = queries[0].feature_dim;
        if let Some(t) = &targets {
            assert_eq!(t.len(), queries.len());
        }
        let total_rows: usize = queries
            .iter()
            .flat_map(|q| q.subtrees.iter())
            .map(|s| s.rows.nrows())
            .sum();
        let mut rows = Array2::zeros((total_rows, f));
        let mut left = vec![0usize; total_rows];
        let mut right = vec![0usize; total_rows];
        let mut zero_rows = Vec::new();
        let mut spans = Vec::new();
        let mut votes = Vec::new();
        let mut cursor = 0usize;
        for (qi, query) in queries.iter().enumerate() {
            assert_eq!(query.keep, keep, "inconsistent K in batch");
            assert_eq!(query.feature_dim, f, "inconsistent F in batch");
            for sub in &query.subtrees {
                let base = cursor;
                let len = sub.node_count();
                rows.slice_mut(ndarray::s![base..base + len + 1, ..])
                    .assign(&sub.rows);
                for i in 0..=len {
                    // Local slot 0 is the base row.
                    let (l, r) = if i == 0 {
                        (0, 0)
                    } else {
                        (sub.left[i - 1], sub.right[i - 1])
                    };
                    left[base + i] = base + l;
                    right[base + i] = base + r;
                }
                zero_rows.push(base);
                spans.push(Span { query: qi, slot: sub.slot, base_row: base, len });
                votes.push(sub.votes.clone());
                cursor += len + 1;
            }
        }
        Batch {
            rows,
            left,
            right,
            zero_rows,
            spans,
            votes,
            n_queries: queries.len(),
            keep,
            targets,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingModel;
    use crate::otp::{build_otp_tree, build_vocabularies, Vocab};
    use crate::plan::{generate_synthetic_workload, SynthConfig};
    use crate::sampler::{encode_query_compact, sample_subtrees, select_top_k, SamplerConfig};

    fn tiny_embedder(p_f: usize) -> EmbeddingModel {
        EmbeddingModel::from_parts(p_f, 5, 10, vec![], vec![0.3; p_f])
    }

    #[test]
    fn pack_indexes_stay_in_span() {
        let config = SynthConfig { count: 8, ..Default::default() };
        let w = generate_synthetic_workload(&config, 21).unwrap();
        let vocab: Vocab = build_vocabularies(&w).unwrap();
        let embedder = tiny_embedder(4);
        let sampler = SamplerConfig::new(15, 3, 5).unwrap();
        let compacts: Vec<CompactQuery> = w
            .traces
            .iter()
            .map(|t| {
                let tree = build_otp_tree(&t.root).unwrap();
                let samples = sample_subtrees(&tree, &sampler).unwrap();
                let q = select_top_k(samples, sampler.keep);
                encode_query_compact(&q, &tree, &vocab, &embedder).unwrap()
            })
            .collect();
        let refs: Vec<&CompactQuery> = compacts.iter().collect();
        let batch = Batch::pack(&refs, None);
        assert_eq!(batch.n_queries, 8);
        assert_eq!(batch.spans.len(), batch.votes.len());
        for (span, votes) in batch.spans.iter().zip(&batch.votes) {
            assert_eq!(votes.len(), span.len);
            for i in 0..=span.len {
                let row = span.base_row + i;
                for idx in [batch.left[row], batch.right[row]] {
                    assert!(idx >= span.base_row && idx <= span.base_row + span.len);
                }
            }
            // Base row is zero.
            assert!(batch
                .rows
                .row(span.base_row)
                .iter()
                .all(|&x| x == 0.0));
        }
        let packed_rows: usize = batch.spans.iter().map(|s| s.len + 1).sum();
        assert_eq!(packed_rows, batch.rows.nrows());
    }
}
