//! Sub-tree sampling: decomposes an O-T-P tree into sub-trees of at most N
//! typed nodes with per-node vote masks.
//!
//! Starting at the tree root, a sub-tree is grown breadth first one depth at
//! a time. If the whole remaining subtree fits within N nodes it is emitted
//! with every vote set. Otherwise growth stops at the last depth D-1 that
//! fits: nodes at depths 0..=D-C-1 vote (their C-level convolution context
//! is fully inside the sub-tree), deeper nodes are context only, and the
//! nodes at depth D-C become roots of future sub-trees. Voted nodes across
//! all sub-trees partition the original tree.

use std::collections::{HashMap, VecDeque};

use ndarray::{Array2, Array3};

use crate::embed::EmbeddingModel;
use crate::error::{Error, Result};
use crate::otp::{encode_node, FeatureLayout, NodeId, OtpKind, OtpTree, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Max typed nodes per sub-tree (N). Sentinels do not count.
    pub max_nodes: usize,
    /// Convolution layer count (C) the votes must stay valid for.
    pub conv_layers: usize,
    /// Sub-trees kept per query (K).
    pub keep: usize,
}

impl SamplerConfig {
    pub fn new(max_nodes: usize, conv_layers: usize, keep: usize) -> Result<Self> {
        let config = SamplerConfig { max_nodes, conv_layers, keep };
        config.validate()?;
        Ok(config)
    }

    /// Requires N >= 2^(C+1) - 1; equality is admitted with a warning since
    /// the reference configuration (N=15, C=3) sits exactly on the bound.
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers == 0 || self.keep == 0 {
            return Err(Error::InvalidConfig("C and K must be >= 1".into()));
        }
        let bound = (1usize << (self.conv_layers + 1)) - 1;
        if self.max_nodes < bound {
            return Err(Error::InvalidConfig(format!(
                "N={} is below 2^(C+1)-1={} for C={}",
                self.max_nodes, bound, self.conv_layers
            )));
        }
        if self.max_nodes == bound {
            log::warn!(
                "N={} equals the 2^(C+1)-1 bound for C={}; every incomplete sub-tree will vote only its root region",
                self.max_nodes,
                self.conv_layers
            );
        }
        Ok(())
    }
}

/// One decomposed sub-tree: nodes in breadth-first order, child slots, and
/// the vote mask. Child slots use the tensor convention: node `i` sits at
/// slot `i + 1`, absent or out-of-sample children point to slot 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubTreeSample {
    pub nodes: Vec<NodeId>,
    pub left_idx: Vec<usize>,
    pub right_idx: Vec<usize>,
    pub votes: Vec<bool>,
}

impl SubTreeSample {
    fn new(tree: &OtpTree, nodes: Vec<NodeId>, votes: Vec<bool>) -> Self {
        debug_assert_eq!(nodes.len(), votes.len());
        let slot_of: HashMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(i, &id)| (id, i + 1)).collect();
        let slot = |child: Option<NodeId>| {
            child.and_then(|c| slot_of.get(&c).copied()).unwrap_or(0)
        };
        let mut left_idx = Vec::with_capacity(nodes.len());
        let mut right_idx = Vec::with_capacity(nodes.len());
        for &id in &nodes {
            let node = tree.node(id);
            left_idx.push(slot(node.left));
            right_idx.push(slot(node.right));
        }
        SubTreeSample { nodes, left_idx, right_idx, votes }
    }

    /// Zero-padding sample: no nodes, no votes.
    pub fn empty() -> Self {
        SubTreeSample {
            nodes: Vec::new(),
            left_idx: Vec::new(),
            right_idx: Vec::new(),
            votes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn vote_count(&self) -> usize {
        self.votes.iter().filter(|&&v| v).count()
    }
}

/// All nodes down to `depth` levels below `root`, inclusive, breadth first.
pub fn get_nodes(tree: &OtpTree, root: NodeId, depth: usize) -> Vec<NodeId> {
    bfs_levels(tree, root, Some(depth)).concat()
}

fn bfs_levels(tree: &OtpTree, root: NodeId, max_depth: Option<usize>) -> Vec<Vec<NodeId>> {
    let mut levels = vec![vec![root]];
    loop {
        if let Some(d) = max_depth {
            if levels.len() > d {
                break;
            }
        }
        let next = expand_level(tree, levels.last().expect("nonempty"));
        if next.is_empty() {
            break;
        }
        levels.push(next);
    }
    levels
}

fn expand_level(tree: &OtpTree, level: &[NodeId]) -> Vec<NodeId> {
    let mut next = Vec::new();
    for &id in level {
        let node = tree.node(id);
        next.extend(node.left.iter().copied());
        next.extend(node.right.iter().copied());
    }
    next
}

/// Decompose a tree into vote-masked sub-trees, FIFO over sub-tree roots.
pub fn sample_subtrees(tree: &OtpTree, config: &SamplerConfig) -> Result<Vec<SubTreeSample>> {
    config.validate()?;
    let n = config.max_nodes;
    let c = config.conv_layers;
    let mut out = Vec::new();
    let mut queue = VecDeque::from([tree.root]);
    while let Some(sub_root) = queue.pop_front() {
        // Grow one level at a time until the node count would exceed N or
        // the subtree is exhausted.
        let mut levels = vec![vec![sub_root]];
        let mut count = 1usize;
        let mut complete = false;
        loop {
            if count > n {
                break;
            }
            let next = expand_level(tree, levels.last().expect("nonempty"));
            if next.is_empty() {
                complete = true;
                break;
            }
            count += next.len();
            levels.push(next);
        }
        if complete {
            let nodes = levels.concat();
            let votes = vec![true; nodes.len()];
            out.push(SubTreeSample::new(tree, nodes, votes));
        } else {
            // Levels now reach the overflowing depth D; the sample keeps
            // depths 0..=D-1, votes stop at D-C-1, and the nodes at depth
            // D-C seed future sub-trees.
            let d = levels.len() - 1;
            debug_assert!(d >= c + 1, "guaranteed by N >= 2^(C+1)-1");
            let frontier = std::mem::take(&mut levels[d - c]);
            let eligible: usize = levels[..d - c].iter().map(Vec::len).sum();
            levels.truncate(d);
            levels[d - c] = frontier.clone();
            let nodes = levels.concat();
            let mut votes = vec![false; nodes.len()];
            votes[..eligible].iter_mut().for_each(|v| *v = true);
            out.push(SubTreeSample::new(tree, nodes, votes));
            queue.extend(frontier);
        }
    }
    Ok(out)
}

/// Degenerate full-tree mode: the whole tree as one all-voting sample.
pub fn full_tree_sample(tree: &OtpTree) -> SubTreeSample {
    let nodes = bfs_levels(tree, tree.root, None).concat();
    let votes = vec![true; nodes.len()];
    SubTreeSample::new(tree, nodes, votes)
}

/// Exactly K sub-trees per query, padded with empty samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySample {
    pub subtrees: Vec<SubTreeSample>,
}

/// Keep the first K samples in emission order; pad when fewer, truncate
/// (logging the dropped vote share) when more.
pub fn select_top_k(samples: Vec<SubTreeSample>, keep: usize) -> QuerySample {
    let total_votes: usize = samples.iter().map(SubTreeSample::vote_count).sum();
    let mut subtrees = samples;
    if subtrees.len() > keep {
        let dropped: usize = subtrees[keep..].iter().map(SubTreeSample::vote_count).sum();
        log::debug!(
            "truncating {} sub-trees; dropping {:.1}% of voted nodes",
            subtrees.len() - keep,
            100.0 * dropped as f64 / total_votes.max(1) as f64
        );
        subtrees.truncate(keep);
    }
    while subtrees.len() < keep {
        subtrees.push(SubTreeSample::empty());
    }
    QuerySample { subtrees }
}

/// Materialized tensors for one query: slot 0 of every sub-tree is the
/// reserved zero row and node `i` occupies slot `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTensor {
    /// (K, N+1, F)
    pub features: Array3<f64>,
    /// (K, N+1), values in [0, N]
    pub left_idx: Array2<usize>,
    pub right_idx: Array2<usize>,
    /// (K, N+1)
    pub votes: Array2<u8>,
}

impl QueryTensor {
    pub fn element_count(&self) -> (usize, usize, usize) {
        (self.features.len(), self.left_idx.len() + self.right_idx.len(), self.votes.len())
    }
}

/// Compact encoding of one real (non-padding) sub-tree: row 0 is the zero
/// row, node `i` occupies row `i + 1`, child indices are row-local.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactSubTree {
    /// Position of this sub-tree among the query's K slots.
    pub slot: usize,
    /// (len + 1, F)
    pub rows: Array2<f64>,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub votes: Vec<bool>,
}

impl CompactSubTree {
    pub fn node_count(&self) -> usize {
        self.rows.nrows() - 1
    }
}

/// Encoded query: only the real sub-trees, plus the configured K so that
/// padding slots can be reconstructed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactQuery {
    pub keep: usize,
    pub feature_dim: usize,
    pub subtrees: Vec<CompactSubTree>,
}

/// Encode a query's sub-trees. Predicate encodings use the query itself as
/// out-of-vocabulary context.
pub fn encode_query_compact(
    query: &QuerySample,
    tree: &OtpTree,
    vocab: &Vocab,
    embedder: &EmbeddingModel,
) -> Result<CompactQuery> {
    let layout = FeatureLayout::new(vocab, embedder.p_f());
    let f = layout.total();
    let pred_vectors = encode_query_preds(query, tree, embedder);
    let mut subtrees = Vec::new();
    for (slot, sample) in query.subtrees.iter().enumerate() {
        if sample.is_empty() {
            continue;
        }
        let mut rows = Array2::zeros((sample.len() + 1, f));
        for (i, &id) in sample.nodes.iter().enumerate() {
            let node = tree.node(id);
            let row = match node.kind {
                OtpKind::Pred => {
                    let mut v = vec![0.0; f];
                    v[layout.pred_offset()..layout.pred_offset() + layout.p_f]
                        .copy_from_slice(&pred_vectors[&id]);
                    v
                }
                _ => encode_node(Some(node), vocab, embedder)?,
            };
            for (j, x) in row.into_iter().enumerate() {
                rows[(i + 1, j)] = x;
            }
        }
        subtrees.push(CompactSubTree {
            slot,
            rows,
            left: sample.left_idx.clone(),
            right: sample.right_idx.clone(),
            votes: sample.votes.clone(),
        });
    }
    Ok(CompactQuery { keep: query.subtrees.len(), feature_dim: f, subtrees })
}

/// Materialize the padded (K, N+1, ...) tensors from the compact encoding.
pub fn to_tensor(
    query: &QuerySample,
    tree: &OtpTree,
    vocab: &Vocab,
    embedder: &EmbeddingModel,
    max_nodes: usize,
) -> Result<QueryTensor> {
    for sample in &query.subtrees {
        if sample.len() > max_nodes {
            return Err(Error::SampleTooLarge { got: sample.len(), limit: max_nodes });
        }
    }
    let compact = encode_query_compact(query, tree, vocab, embedder)?;
    let k = compact.keep;
    let f = compact.feature_dim;
    let slots = max_nodes + 1;
    let mut features = Array3::zeros((k, slots, f));
    let mut left_idx = Array2::zeros((k, slots));
    let mut right_idx = Array2::zeros((k, slots));
    let mut votes = Array2::zeros((k, slots));
    for sub in &compact.subtrees {
        let s = sub.slot;
        for i in 0..sub.node_count() {
            for j in 0..f {
                features[(s, i + 1, j)] = sub.rows[(i + 1, j)];
            }
            left_idx[(s, i + 1)] = sub.left[i];
            right_idx[(s, i + 1)] = sub.right[i];
            votes[(s, i + 1)] = u8::from(sub.votes[i]);
        }
    }
    Ok(QueryTensor { features, left_idx, right_idx, votes })
}

/// Context-aware encodings for every PRED node reachable from the kept
/// sub-trees, keyed by node id.
fn encode_query_preds(
    query: &QuerySample,
    tree: &OtpTree,
    embedder: &EmbeddingModel,
) -> HashMap<NodeId, Vec<f64>> {
    let mut pred_ids: Vec<NodeId> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for sample in &query.subtrees {
        for &id in &sample.nodes {
            if tree.node(id).kind == OtpKind::Pred && seen.insert(id) {
                pred_ids.push(id);
            }
        }
    }
    let preds: Vec<&crate::plan::PredicateExpr> = pred_ids
        .iter()
        .map(|&id| tree.node(id).predicate.as_ref().expect("PRED node has predicate"))
        .collect();
    let encodings = embedder.encode_query_predicates(&preds);
    pred_ids.into_iter().zip(encodings).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::otp::{build_otp_tree, random_opr_tree};
    use crate::plan::PlanNode;

    fn chain_tree(len: usize) -> OtpTree {
        // Straight chain: node i's left child is i+1.
        let nodes = (0..len)
            .map(|i| crate::otp::OtpNode {
                kind: OtpKind::Opr,
                label: format!("op{i}"),
                predicate: None,
                left: (i + 1 < len).then_some(i + 1),
                right: None,
            })
            .collect();
        OtpTree { nodes, root: 0 }
    }

    fn complete_tree(depth: usize) -> OtpTree {
        // Heap layout: node i has children 2i+1 and 2i+2.
        let n = (1usize << (depth + 1)) - 1;
        let nodes = (0..n)
            .map(|i| crate::otp::OtpNode {
                kind: OtpKind::Opr,
                label: format!("op{i}"),
                predicate: None,
                left: (2 * i + 1 < n).then_some(2 * i + 1),
                right: (2 * i + 2 < n).then_some(2 * i + 2),
            })
            .collect();
        OtpTree { nodes, root: 0 }
    }

    #[test]
    fn get_nodes_examples() {
        let chain = chain_tree(40);
        assert_eq!(get_nodes(&chain, 0, 0), vec![0]);
        assert_eq!(get_nodes(&chain, 0, 5).len(), 6);
        let complete = complete_tree(3);
        assert_eq!(get_nodes(&complete, 0, 2).len(), 7);
    }

    #[test]
    fn config_bound_is_validated() {
        assert!(SamplerConfig::new(14, 3, 1).is_err());
        assert!(SamplerConfig::new(15, 3, 1).is_ok());
        assert!(SamplerConfig::new(32, 3, 1).is_ok());
        assert!(SamplerConfig::new(0, 0, 0).is_err());
    }

    #[test]
    fn small_tree_fits_in_one_sample() {
        let mut plan = PlanNode::new("join");
        plan.children.push(PlanNode::scan("scan", "A"));
        plan.children.push(PlanNode::scan("scan", "B"));
        let tree = build_otp_tree(&plan).unwrap(); // 5 typed nodes
        let config = SamplerConfig::new(15, 3, 1).unwrap();
        let samples = sample_subtrees(&tree, &config).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].len(), 5);
        assert!(samples[0].votes.iter().all(|&v| v));
    }

    #[test]
    fn complete_31_tree_n15_c1() {
        let tree = complete_tree(4); // 31 nodes
        let config = SamplerConfig::new(15, 1, 9).unwrap();
        let samples = sample_subtrees(&tree, &config).unwrap();
        assert_eq!(samples.len(), 9);
        assert_eq!(samples[0].len(), 15);
        assert_eq!(samples[0].vote_count(), 7);
        assert!(samples[0].votes[..7].iter().all(|&v| v));
        assert!(samples[0].votes[7..].iter().all(|&v| !v));
        for s in &samples[1..] {
            assert_eq!(s.len(), 3);
            assert_eq!(s.vote_count(), 3);
        }
        let total: usize = samples.iter().map(SubTreeSample::vote_count).sum();
        assert_eq!(total, 31);
    }

    #[test]
    fn chain_40_n15_c3() {
        let tree = chain_tree(40);
        let config = SamplerConfig::new(15, 3, 9).unwrap();
        let samples = sample_subtrees(&tree, &config).unwrap();
        assert_eq!(samples.len(), 4);
        for (i, expected_root) in [(0usize, 0usize), (1, 12), (2, 24)] {
            assert_eq!(samples[i].len(), 15);
            assert_eq!(samples[i].vote_count(), 12);
            assert_eq!(samples[i].nodes[0], expected_root);
        }
        assert_eq!(samples[3].len(), 4);
        assert_eq!(samples[3].nodes[0], 36);
        assert_eq!(samples[3].vote_count(), 4);
        let total: usize = samples.iter().map(SubTreeSample::vote_count).sum();
        assert_eq!(total, 40);
    }

    #[test]
    fn top_k_pads_and_truncates() {
        let tree = chain_tree(5);
        let config = SamplerConfig::new(15, 3, 3).unwrap();
        let samples = sample_subtrees(&tree, &config).unwrap();
        assert_eq!(samples.len(), 1);
        let q = select_top_k(samples, 3);
        assert_eq!(q.subtrees.len(), 3);
        assert!(!q.subtrees[0].is_empty());
        assert!(q.subtrees[1].is_empty() && q.subtrees[2].is_empty());

        let tree = complete_tree(4);
        let config = SamplerConfig::new(15, 1, 5).unwrap();
        let samples = sample_subtrees(&tree, &config).unwrap();
        let first_five: Vec<_> = samples[..5].to_vec();
        let q = select_top_k(samples, 5);
        assert_eq!(q.subtrees, first_five);
    }

    #[test]
    fn vote_partition_and_size_bound_on_random_trees() {
        let mut checked = 0usize;
        for seed in 0..60u64 {
            let size = 1 + (seed as usize * 7) % 120;
            let tree = random_opr_tree(size, seed);
            for (n, c) in [(15, 1), (15, 2), (15, 3), (32, 1), (32, 2), (32, 3)] {
                let config = SamplerConfig::new(n, c, 1).unwrap();
                let samples = sample_subtrees(&tree, &config).unwrap();
                let mut votes_seen = vec![0usize; tree.typed_node_count()];
                for s in &samples {
                    assert!(s.len() <= n, "sample of {} exceeds N={}", s.len(), n);
                    for (&id, &v) in s.nodes.iter().zip(&s.votes) {
                        if v {
                            votes_seen[id] += 1;
                        }
                    }
                }
                assert!(votes_seen.iter().all(|&v| v == 1), "vote partition violated");
                checked += 1;
            }
        }
        assert_eq!(checked, 360);
    }

    #[test]
    fn voted_nodes_have_complete_context() {
        for seed in 0..25u64 {
            let tree = random_opr_tree(80 + (seed as usize * 13) % 200, seed);
            let config = SamplerConfig::new(15, 3, 1).unwrap();
            for s in sample_subtrees(&tree, &config).unwrap() {
                let in_sample: std::collections::HashSet<_> = s.nodes.iter().copied().collect();
                for (&id, &vote) in s.nodes.iter().zip(&s.votes) {
                    if !vote {
                        continue;
                    }
                    // Every descendant within C levels must be in-sample.
                    for desc in get_nodes(&tree, id, config.conv_layers) {
                        assert!(in_sample.contains(&desc));
                    }
                }
            }
        }
    }

    #[test]
    fn tensor_shapes_and_padding() {
        let tree = complete_tree(4);
        let config = SamplerConfig::new(15, 1, 9).unwrap();
        let samples = sample_subtrees(&tree, &config).unwrap();
        let q = select_top_k(samples, 9);
        let vocab = Vocab::from_lists(
            (0..31).map(|i| format!("op{i}")).collect(),
            vec!["A".into()],
        );
        let embedder = EmbeddingModel::from_parts(4, 5, 10, vec![], vec![0.1; 4]);
        let t = to_tensor(&q, &tree, &vocab, &embedder, 15).unwrap();
        assert_eq!(t.features.dim(), (9, 16, 31 + 4 + 2));
        assert_eq!(t.left_idx.dim(), (9, 16));
        // Slot 0 is all zero in every sub-tree.
        for s in 0..9 {
            assert!(t.features.slice(ndarray::s![s, 0, ..]).iter().all(|&x| x == 0.0));
        }
        // A leaf keeps sentinel child slots.
        let leaf_slot = q.subtrees[1].len(); // last node of a 3-node sample
        assert_eq!(t.left_idx[(1, leaf_slot)], 0);
        assert_eq!(t.right_idx[(1, leaf_slot)], 0);
    }

    #[test]
    fn oversized_sample_is_rejected_by_tensorize() {
        let tree = chain_tree(10);
        let q = QuerySample { subtrees: vec![full_tree_sample(&tree)] };
        let vocab = Vocab::from_lists((0..10).map(|i| format!("op{i}")).collect(), vec![]);
        let embedder = EmbeddingModel::from_parts(2, 5, 10, vec![], vec![0.0; 2]);
        assert!(matches!(
            to_tensor(&q, &tree, &vocab, &embedder, 4),
            Err(Error::SampleTooLarge { .. })
        ));
    }

    #[test]
    fn full_tree_sample_votes_everything() {
        let tree = random_opr_tree(23, 3);
        let s = full_tree_sample(&tree);
        assert_eq!(s.len(), 23);
        assert_eq!(s.vote_count(), 23);
    }
}
