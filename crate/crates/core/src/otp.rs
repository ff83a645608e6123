//! Recasts logical plans into Operator-Table-Predicate binary trees and
//! produces per-node feature vectors in the [OPR | PRED | TBL] layout.
//!
//! Recast rules per plan node:
//! - leaf scan: OPR with a TBL left child; a pushed-down predicate becomes
//!   the PRED right child, otherwise the right child is the empty sentinel
//! - single-child node: OPR with the recast child on the left and a PRED
//!   right child when a predicate exists
//! - two-child node: OPR over both recast children; a predicate here has no
//!   slot in the binary layout and is not materialized
//!
//! Empty sentinels are virtual: they exist only as absent child references
//! and materialize as the zero row in tensors, so they never count toward
//! node budgets.

use std::collections::{BTreeSet, HashMap};

use crate::embed::EmbeddingModel;
use crate::error::{Error, Result};
use crate::plan::{PlanNode, PredicateExpr, Workload};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtpKind {
    Opr,
    Pred,
    Tbl,
}

/// One typed node; PRED and TBL nodes are always leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct OtpNode {
    pub kind: OtpKind,
    /// Operator name, predicate handle, or table name.
    pub label: String,
    pub predicate: Option<PredicateExpr>,
    pub left: Option<NodeId>,
    pub right: Option<NodeId>,
}

/// Arena-backed O-T-P tree; child links index into `nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct OtpTree {
    pub nodes: Vec<OtpNode>,
    pub root: NodeId,
}

impl OtpTree {
    pub fn node(&self, id: NodeId) -> &OtpNode {
        &self.nodes[id]
    }

    /// OPR + PRED + TBL nodes; sentinels are not stored.
    pub fn typed_node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Fresh traversal count from the root, for invariant checks.
    pub fn recount(&self) -> usize {
        let mut seen = 0;
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            seen += 1;
            let n = &self.nodes[id];
            stack.extend(n.left.iter().copied());
            stack.extend(n.right.iter().copied());
        }
        seen
    }

    /// All predicates owned by PRED nodes, in node-id order.
    pub fn predicates(&self) -> impl Iterator<Item = &PredicateExpr> {
        self.nodes.iter().filter_map(|n| n.predicate.as_ref())
    }
}

fn predicate_handle(pred: &PredicateExpr) -> String {
    match pred {
        PredicateExpr::Clause { raw_text, .. } => raw_text.clone(),
        PredicateExpr::Conjunction { kind, children } => {
            let label = match kind {
                crate::plan::ConjKind::And => "and",
                crate::plan::ConjKind::Or => "or",
            };
            format!("{label}({})", children.len())
        }
    }
}

/// Recast a binarized plan into an O-T-P tree. Deterministic: the same plan
/// produces an identical tree, with nodes stored in creation order.
pub fn build_otp_tree(root: &PlanNode) -> Result<OtpTree> {
    let mut nodes: Vec<OtpNode> = Vec::new();

    enum Patch {
        Left(NodeId),
        Right(NodeId),
    }

    let mut stack: Vec<(&PlanNode, Option<Patch>)> = vec![(root, None)];
    while let Some((plan, patch)) = stack.pop() {
        let id = nodes.len();
        nodes.push(OtpNode {
            kind: OtpKind::Opr,
            label: plan.op_name.clone(),
            predicate: None,
            left: None,
            right: None,
        });
        match patch {
            Some(Patch::Left(p)) => nodes[p].left = Some(id),
            Some(Patch::Right(p)) => nodes[p].right = Some(id),
            None => {}
        }

        if plan.is_join_kind() && plan.children.len() != 2 {
            return Err(Error::JoinArity(plan.op_name.clone()));
        }
        match plan.children.len() {
            0 => {
                let table = plan
                    .table
                    .as_ref()
                    .ok_or_else(|| Error::LeafWithoutTable(plan.op_name.clone()))?;
                let tbl_id = nodes.len();
                nodes.push(OtpNode {
                    kind: OtpKind::Tbl,
                    label: table.clone(),
                    predicate: None,
                    left: None,
                    right: None,
                });
                nodes[id].left = Some(tbl_id);
                if let Some(pred) = &plan.predicate {
                    let pred_id = nodes.len();
                    nodes.push(pred_node(pred));
                    nodes[id].right = Some(pred_id);
                }
            }
            1 => {
                if let Some(pred) = &plan.predicate {
                    let pred_id = nodes.len();
                    nodes.push(pred_node(pred));
                    nodes[id].right = Some(pred_id);
                }
                stack.push((&plan.children[0], Some(Patch::Left(id))));
            }
            2 => {
                stack.push((&plan.children[1], Some(Patch::Right(id))));
                stack.push((&plan.children[0], Some(Patch::Left(id))));
            }
            n => {
                return Err(Error::Shape(format!(
                    "plan node {:?} has {n} children; binarize first",
                    plan.op_name
                )))
            }
        }
    }
    Ok(OtpTree { nodes, root: 0 })
}

fn pred_node(pred: &PredicateExpr) -> OtpNode {
    OtpNode {
        kind: OtpKind::Pred,
        label: predicate_handle(pred),
        predicate: Some(pred.clone()),
        left: None,
        right: None,
    }
}

/// Closed operator vocabulary and open table vocabulary (with a reserved
/// UNK slot for tables unseen at training time).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    operators: Vec<String>,
    tables: Vec<String>,
    op_index: HashMap<String, usize>,
    table_index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_lists(operators: Vec<String>, tables: Vec<String>) -> Self {
        let op_index = operators.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let table_index = tables.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { operators, tables, op_index, table_index }
    }

    pub fn operators(&self) -> &[String] {
        &self.operators
    }

    pub fn tables(&self) -> &[String] {
        &self.tables
    }

    pub fn operator_count(&self) -> usize {
        self.operators.len()
    }

    /// Table slots include the trailing UNK slot.
    pub fn table_slot_count(&self) -> usize {
        self.tables.len() + 1
    }

    pub fn unk_table_index(&self) -> usize {
        self.tables.len()
    }

    /// Operators form a closed set; unknown names are a hard error.
    pub fn op_id(&self, name: &str) -> Result<usize> {
        self.op_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownOperator(name.to_string()))
    }

    /// Unseen tables map to the UNK slot.
    pub fn table_id(&self, name: &str) -> usize {
        self.table_index.get(name).copied().unwrap_or(self.tables.len())
    }
}

/// Collect sorted operator and table vocabularies from a training workload.
pub fn build_vocabularies(workload: &Workload) -> Result<Vocab> {
    if workload.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    let mut ops = BTreeSet::new();
    let mut tables = BTreeSet::new();
    for trace in &workload.traces {
        for node in trace.root.iter_nodes() {
            ops.insert(node.op_name.clone());
            if let Some(t) = &node.table {
                tables.insert(t.clone());
            }
        }
    }
    Ok(Vocab::from_lists(ops.into_iter().collect(), tables.into_iter().collect()))
}

/// Per-node feature vector layout: [OPR one-hot | PRED embedding | TBL one-hot].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub operators: usize,
    pub p_f: usize,
    pub table_slots: usize,
}

impl FeatureLayout {
    pub fn new(vocab: &Vocab, p_f: usize) -> Self {
        FeatureLayout {
            operators: vocab.operator_count(),
            p_f,
            table_slots: vocab.table_slot_count(),
        }
    }

    pub fn total(&self) -> usize {
        self.operators + self.p_f + self.table_slots
    }

    pub fn opr_offset(&self) -> usize {
        0
    }

    pub fn pred_offset(&self) -> usize {
        self.operators
    }

    pub fn tbl_offset(&self) -> usize {
        self.operators + self.p_f
    }
}

/// Encode one typed node (or the empty sentinel as `None`) into the
/// [OPR | PRED | TBL] feature vector.
pub fn encode_node(
    node: Option<&OtpNode>,
    vocab: &Vocab,
    embedder: &EmbeddingModel,
) -> Result<Vec<f64>> {
    let layout = FeatureLayout::new(vocab, embedder.p_f());
    let mut feature = vec![0.0; layout.total()];
    let Some(node) = node else {
        return Ok(feature);
    };
    match node.kind {
        OtpKind::Opr => {
            feature[layout.opr_offset() + vocab.op_id(&node.label)?] = 1.0;
        }
        OtpKind::Pred => {
            let pred = node.predicate.as_ref().ok_or_else(|| {
                Error::Shape(format!("PRED node {:?} without predicate", node.label))
            })?;
            let enc = embedder.encode_predicate(pred);
            feature[layout.pred_offset()..layout.pred_offset() + layout.p_f]
                .copy_from_slice(&enc);
        }
        OtpKind::Tbl => {
            feature[layout.tbl_offset() + vocab.table_id(&node.label)] = 1.0;
        }
    }
    Ok(feature)
}

/// Seeded random binary tree of OPR nodes, mixing chain-like and bushy
/// shapes. Used by sampler property tests and convolution oracles.
pub fn random_opr_tree(node_count: usize, seed: u64) -> OtpTree {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = node_count.max(1);
    let mut nodes: Vec<OtpNode> = Vec::with_capacity(n);
    nodes.push(OtpNode {
        kind: OtpKind::Opr,
        label: "op".into(),
        predicate: None,
        left: None,
        right: None,
    });
    // Open slots: (node, is_left_free, is_right_free) tracked as entries.
    let mut open: Vec<NodeId> = vec![0];
    while nodes.len() < n {
        let pick = if rng.random::<f64>() < 0.5 {
            open.len() - 1
        } else {
            rng.random_range(0..open.len())
        };
        let parent = open[pick];
        let id = nodes.len();
        nodes.push(OtpNode {
            kind: OtpKind::Opr,
            label: "op".into(),
            predicate: None,
            left: None,
            right: None,
        });
        let fill_left = if nodes[parent].left.is_none() && nodes[parent].right.is_none() {
            rng.random::<bool>()
        } else {
            nodes[parent].left.is_none()
        };
        if fill_left {
            nodes[parent].left = Some(id);
        } else {
            nodes[parent].right = Some(id);
        }
        if nodes[parent].left.is_some() && nodes[parent].right.is_some() {
            open.swap_remove(pick);
        }
        open.push(id);
    }
    OtpTree { nodes, root: 0 }
}
