//! Logical plan data model: predicate expressions, operator trees, query
//! traces and workload-level statistics.
//!
//! Plans are trees, not DAGs. Ingestion duplicates shared sub-plans and
//! left-deep binarizes nodes with more than two children, so downstream
//! consumers may assume every node has at most two children.

mod clause;
mod io;
mod synth;

pub use clause::parse_clause;
pub use io::{
    parse_workload, parse_workload_jsonl, parse_workload_with, serialize_workload,
    workload_to_jsonl_string, ParseOptions,
};
pub use synth::{generate_synthetic_workload, SynthConfig};

use crate::error::{Error, Result};

/// Conjunction kind for predicate trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConjKind {
    And,
    Or,
}

/// A filter/join condition: either a single clause or an AND/OR conjunction
/// over child predicates.
#[derive(Debug, Clone, PartialEq)]
pub enum PredicateExpr {
    Clause {
        /// Original clause text, preserved for serialization round trips.
        raw_text: String,
        /// Lower-cased column references; dotted paths are kept intact.
        column_tokens: Vec<String>,
        /// Comparison operator, or empty when the clause did not match the
        /// minimal grammar.
        comparison_op: String,
        /// Literal value text, or empty for unparseable clauses.
        value_text: String,
    },
    Conjunction {
        kind: ConjKind,
        children: Vec<PredicateExpr>,
    },
}

impl PredicateExpr {
    pub fn and(children: Vec<PredicateExpr>) -> Self {
        PredicateExpr::Conjunction { kind: ConjKind::And, children }
    }

    pub fn or(children: Vec<PredicateExpr>) -> Self {
        PredicateExpr::Conjunction { kind: ConjKind::Or, children }
    }
}

// Predicate trees from hostile inputs can nest arbitrarily deep; drop them
// without recursing.
impl Drop for PredicateExpr {
    fn drop(&mut self) {
        let mut queue = Vec::new();
        if let PredicateExpr::Conjunction { children, .. } = self {
            queue.append(children);
        }
        while let Some(mut expr) = queue.pop() {
            if let PredicateExpr::Conjunction { children, .. } = &mut expr {
                queue.append(children);
            }
        }
    }
}

/// One node of a logical plan tree.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanNode {
    /// Operator name, e.g. `scan`, `filter`, `project`, `hash_join`.
    pub op_name: String,
    /// Scanned table; set only on leaves.
    pub table: Option<String>,
    pub predicate: Option<PredicateExpr>,
    pub children: Vec<PlanNode>,
}

impl PlanNode {
    pub fn new(op_name: impl Into<String>) -> Self {
        PlanNode { op_name: op_name.into(), table: None, predicate: None, children: Vec::new() }
    }

    pub fn scan(op_name: impl Into<String>, table: impl Into<String>) -> Self {
        let mut node = PlanNode::new(op_name);
        node.table = Some(table.into());
        node
    }

    /// Join-kind operators are classified by name and must end up with
    /// exactly two children.
    pub fn is_join_kind(&self) -> bool {
        self.op_name.to_ascii_lowercase().contains("join")
    }

    /// Iterator over all nodes, preorder, without recursion.
    pub fn iter_nodes(&self) -> impl Iterator<Item = &PlanNode> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let node = stack.pop()?;
            stack.extend(node.children.iter().rev());
            Some(node)
        })
    }
}

// Deep left-deep chains would otherwise recurse on drop.
impl Drop for PlanNode {
    fn drop(&mut self) {
        let mut queue = std::mem::take(&mut self.children);
        while let Some(mut node) = queue.pop() {
            queue.append(&mut node.children);
        }
    }
}

/// A single executed query: its plan plus the measured cost label.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    pub query_id: String,
    pub root: PlanNode,
    /// Total CPU time in minutes; finite and positive.
    pub total_cpu_min: f64,
}

/// A set of query traces with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub traces: Vec<QueryTrace>,
    pub source_tag: String,
}

impl Workload {
    pub fn new(traces: Vec<QueryTrace>, source_tag: impl Into<String>) -> Self {
        Workload { traces, source_tag: source_tag.into() }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Distinct table names scanned anywhere in the workload.
    pub fn table_set(&self) -> std::collections::BTreeSet<String> {
        let mut tables = std::collections::BTreeSet::new();
        for trace in &self.traces {
            for node in trace.root.iter_nodes() {
                if let Some(t) = &node.table {
                    tables.insert(t.clone());
                }
            }
        }
        tables
    }
}

/// Size statistics for one plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanStats {
    pub node_count: usize,
    /// Largest root-to-leaf distance in edges.
    pub max_depth: usize,
}

/// Node count and maximum depth of a plan tree.
pub fn plan_stats(root: &PlanNode) -> PlanStats {
    let mut node_count = 0;
    let mut max_depth = 0;
    let mut stack = vec![(root, 0usize)];
    while let Some((node, depth)) = stack.pop() {
        node_count += 1;
        max_depth = max_depth.max(depth);
        stack.extend(node.children.iter().map(|c| (c, depth + 1)));
    }
    PlanStats { node_count, max_depth }
}

/// Share of queries and of total CPU time held by the top `percentile` of
/// traces when ranked by plan node count.
pub fn workload_distribution(
    workload: &Workload,
    percentile: f64,
) -> Result<(f64, f64)> {
    if workload.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::InvalidConfig(format!(
            "percentile must be in (0, 100), got {percentile}"
        )));
    }
    let n = workload.len();
    let mut ranked: Vec<(usize, f64)> = workload
        .traces
        .iter()
        .map(|t| (plan_stats(&t.root).node_count, t.total_cpu_min))
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0));
    let k = ((percentile / 100.0 * n as f64).round() as usize).clamp(1, n);
    let total: f64 = ranked.iter().map(|(_, c)| c).sum();
    let top: f64 = ranked[..k].iter().map(|(_, c)| c).sum();
    Ok((k as f64 / n as f64, top / total))
}
