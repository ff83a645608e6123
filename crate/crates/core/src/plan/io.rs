//! Workload ingestion and serialization.
//!
//! Wire format: JSON Lines, UTF-8, LF line endings. One object per line:
//! `{"query_id": str, "total_cpu_min": number, "root": node}` where
//! `node = {"op": str, "table": str?, "predicate": pred?, "children": [node...]}`
//! and `pred = {"and": [pred...]} | {"or": [pred...]} | {"clause": str}`.
//!
//! Plans can be chains thousands of nodes deep, so parsing runs on a worker
//! thread with an oversized stack and serialization is iterative.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::{parse_clause, ConjKind, PlanNode, PredicateExpr, QueryTrace, Workload};
use crate::error::{Error, Result};

const DEEP_PARSE_STACK: usize = 256 << 20;

#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// Traces with `total_cpu_min` outside this range are dropped at
    /// ingestion. `None` disables the filter.
    pub cost_filter: Option<(f64, f64)>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { cost_filter: Some((1.0, 60.0)) }
    }
}

/// Parse a workload file with the default cost filter of [1, 60] minutes.
pub fn parse_workload(path: impl AsRef<Path>) -> Result<Workload> {
    parse_workload_with(path, &ParseOptions::default())
}

pub fn parse_workload_with(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<Workload> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path)?;
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_workload_jsonl(&content, opts, &tag)
}

/// Parse workload records from an in-memory JSON Lines string.
pub fn parse_workload_jsonl(content: &str, opts: &ParseOptions, tag: &str) -> Result<Workload> {
    let traces = std::thread::scope(|scope| {
        std::thread::Builder::new()
            .name("workload-parse".into())
            .stack_size(DEEP_PARSE_STACK)
            .spawn_scoped(scope, || parse_lines(content, opts))
            .expect("spawn parse worker")
            .join()
            .expect("parse worker panicked")
    })?;
    Ok(Workload::new(traces, tag))
}

fn parse_lines(content: &str, opts: &ParseOptions) -> Result<Vec<QueryTrace>> {
    let mut traces = Vec::new();
    let mut seen_ids = HashSet::new();
    for (idx, raw_line) in content.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let value = deserialize_unbounded(raw_line, line)?;
        let trace = trace_from_value(&value, line)?;
        if !seen_ids.insert(trace.query_id.clone()) {
            return Err(Error::DuplicateQueryId { id: trace.query_id, line });
        }
        if let Some((lo, hi)) = opts.cost_filter {
            if trace.total_cpu_min < lo || trace.total_cpu_min > hi {
                continue;
            }
        }
        traces.push(trace);
    }
    Ok(traces)
}

fn deserialize_unbounded(line_text: &str, line: usize) -> Result<Value> {
    let mut de = serde_json::Deserializer::from_str(line_text);
    de.disable_recursion_limit();
    Value::deserialize(&mut de).map_err(|e| Error::Schema { line, message: e.to_string() })
}

fn schema_err(line: usize, message: impl Into<String>) -> Error {
    Error::Schema { line, message: message.into() }
}

fn trace_from_value(value: &Value, line: usize) -> Result<QueryTrace> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema_err(line, "record is not a JSON object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "query_id" | "total_cpu_min" | "root") {
            return Err(schema_err(line, format!("unknown field {key:?}")));
        }
    }
    let query_id = obj
        .get("query_id")
        .and_then(Value::as_str)
        .ok_or_else(|| schema_err(line, "field query_id: missing or not a string"))?
        .to_string();
    let total_cpu_min = obj
        .get("total_cpu_min")
        .and_then(Value::as_f64)
        .ok_or_else(|| schema_err(line, "field total_cpu_min: missing or not a number"))?;
    if !total_cpu_min.is_finite() || total_cpu_min <= 0.0 {
        return Err(schema_err(
            line,
            format!("field total_cpu_min: must be finite and positive, got {total_cpu_min}"),
        ));
    }
    let root_value = obj
        .get("root")
        .ok_or_else(|| schema_err(line, "field root: missing"))?;
    let root = plan_from_value(root_value, line)?;
    Ok(QueryTrace { query_id, root, total_cpu_min })
}

fn plan_from_value(value: &Value, line: usize) -> Result<PlanNode> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema_err(line, "plan node is not a JSON object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "op" | "table" | "predicate" | "children") {
            return Err(schema_err(line, format!("unknown plan node field {key:?}")));
        }
    }
    let op_name = obj
        .get("op")
        .and_then(Value::as_str)
        .ok_or_else(|| schema_err(line, "field op: missing or not a string"))?
        .to_string();
    let table = match obj.get("table") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(schema_err(line, "field table: not a string")),
    };
    let predicate = match obj.get("predicate") {
        None | Some(Value::Null) => None,
        Some(v) => Some(pred_from_value(v, line)?),
    };
    let mut children = Vec::new();
    match obj.get("children") {
        None => {}
        Some(Value::Array(items)) => {
            for item in items {
                children.push(plan_from_value(item, line)?);
            }
        }
        Some(_) => return Err(schema_err(line, "field children: not an array")),
    }
    if table.is_some() && !children.is_empty() {
        return Err(schema_err(line, "node with table set must have zero children"));
    }
    Ok(PlanNode { children: binarize_children(children, &op_name), op_name, table, predicate })
}

fn pred_from_value(value: &Value, line: usize) -> Result<PredicateExpr> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema_err(line, "predicate is not a JSON object"))?;
    if obj.len() != 1 {
        return Err(schema_err(line, "predicate must have exactly one of: and, or, clause"));
    }
    let (key, inner) = obj.iter().next().expect("len checked");
    match key.as_str() {
        "clause" => {
            let text = inner
                .as_str()
                .ok_or_else(|| schema_err(line, "field clause: not a string"))?;
            Ok(parse_clause(text))
        }
        "and" | "or" => {
            let items = inner
                .as_array()
                .ok_or_else(|| schema_err(line, format!("field {key}: not an array")))?;
            if items.is_empty() {
                return Err(schema_err(line, format!("field {key}: conjunction needs >= 1 child")));
            }
            let children = items
                .iter()
                .map(|v| pred_from_value(v, line))
                .collect::<Result<Vec<_>>>()?;
            let kind = if key == "and" { ConjKind::And } else { ConjKind::Or };
            Ok(PredicateExpr::Conjunction { kind, children })
        }
        other => Err(schema_err(line, format!("unknown predicate field {other:?}"))),
    }
}

/// Left-deep binarization: fold surplus children pairwise under copies of
/// the parent operator. Copies carry neither table nor predicate.
fn binarize_children(mut children: Vec<PlanNode>, op_name: &str) -> Vec<PlanNode> {
    if children.len() <= 2 {
        return children;
    }
    let last = children.pop().expect("len > 2");
    let mut iter = children.into_iter();
    let a = iter.next().expect("len > 2");
    let b = iter.next().expect("len > 2");
    let mut acc = copy_of(op_name, a, b);
    for next in iter {
        acc = copy_of(op_name, acc, next);
    }
    vec![acc, last]
}

fn copy_of(op_name: &str, left: PlanNode, right: PlanNode) -> PlanNode {
    PlanNode {
        op_name: op_name.to_string(),
        table: None,
        predicate: None,
        children: vec![left, right],
    }
}

/// Serialize a workload back to its JSON Lines form.
pub fn workload_to_jsonl_string(workload: &Workload) -> String {
    let mut out = String::new();
    for trace in &workload.traces {
        write_trace(&mut out, trace);
        out.push('\n');
    }
    out
}

pub fn serialize_workload(workload: &Workload, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, workload_to_jsonl_string(workload))?;
    Ok(())
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn write_trace(out: &mut String, trace: &QueryTrace) {
    let cost = serde_json::to_string(&trace.total_cpu_min).expect("finite float");
    let _ = write!(out, "{{\"query_id\":{},\"total_cpu_min\":{},\"root\":", json_str(&trace.query_id), cost);
    write_plan(out, &trace.root);
    out.push('}');
}

enum WriteItem<'a> {
    Node(&'a PlanNode),
    Pred(&'a PredicateExpr),
    Lit(&'static str),
}

/// Iterative plan writer; deep chains must not recurse.
fn write_plan(out: &mut String, root: &PlanNode) {
    let mut stack = vec![WriteItem::Node(root)];
    while let Some(item) = stack.pop() {
        match item {
            WriteItem::Lit(text) => out.push_str(text),
            WriteItem::Node(node) => {
                let _ = write!(out, "{{\"op\":{}", json_str(&node.op_name));
                if let Some(table) = &node.table {
                    let _ = write!(out, ",\"table\":{}", json_str(table));
                }
                stack.push(WriteItem::Lit("]}"));
                for (i, child) in node.children.iter().enumerate().rev() {
                    stack.push(WriteItem::Node(child));
                    if i > 0 {
                        stack.push(WriteItem::Lit(","));
                    }
                }
                stack.push(WriteItem::Lit(",\"children\":["));
                if let Some(pred) = &node.predicate {
                    stack.push(WriteItem::Pred(pred));
                    stack.push(WriteItem::Lit(",\"predicate\":"));
                }
            }
            WriteItem::Pred(pred) => match pred {
                PredicateExpr::Clause { raw_text, .. } => {
                    let _ = write!(out, "{{\"clause\":{}}}", json_str(raw_text));
                }
                PredicateExpr::Conjunction { kind, children } => {
                    let key = match kind {
                        ConjKind::And => "and",
                        ConjKind::Or => "or",
                    };
                    let _ = write!(out, "{{\"{key}\":[");
                    stack.push(WriteItem::Lit("]}"));
                    for (i, child) in children.iter().enumerate().rev() {
                        stack.push(WriteItem::Pred(child));
                        if i > 0 {
                            stack.push(WriteItem::Lit(","));
                        }
                    }
                }
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_filter() -> ParseOptions {
        ParseOptions { cost_filter: None }
    }

    #[test]
    fn empty_input_gives_empty_workload() {
        let w = parse_workload_jsonl("", &ParseOptions::default(), "t").unwrap();
        assert_eq!(w.len(), 0);
    }

    #[test]
    fn single_scan_record() {
        let line = r#"{"query_id":"q1","total_cpu_min":2.0,"root":{"op":"scan","table":"T","children":[]}}"#;
        let w = parse_workload_jsonl(line, &ParseOptions::default(), "t").unwrap();
        assert_eq!(w.len(), 1);
        let root = &w.traces[0].root;
        assert_eq!(root.table.as_deref(), Some("T"));
        assert!(root.children.is_empty());
    }

    #[test]
    fn negative_cost_is_schema_violation() {
        let line = r#"{"query_id":"q1","total_cpu_min":-1.0,"root":{"op":"scan","table":"T"}}"#;
        let err = parse_workload_jsonl(line, &ParseOptions::default(), "t").unwrap_err();
        match err {
            Error::Schema { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("total_cpu_min"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected_with_line() {
        let text = concat!(
            r#"{"query_id":"q1","total_cpu_min":2.0,"root":{"op":"scan","table":"T"}}"#,
            "\n",
            r#"{"query_id":"q1","total_cpu_min":3.0,"root":{"op":"scan","table":"T"}}"#,
        );
        match parse_workload_jsonl(text, &ParseOptions::default(), "t").unwrap_err() {
            Error::DuplicateQueryId { id, line } => {
                assert_eq!(id, "q1");
                assert_eq!(line, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"query_id":"q1","total_cpu_min":2.0,"root":{"op":"scan","table":"T"}}"#,
            "\nnot json\n",
        );
        match parse_workload_jsonl(text, &ParseOptions::default(), "t").unwrap_err() {
            Error::Schema { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cost_filter_drops_out_of_range_records() {
        let text = concat!(
            r#"{"query_id":"q1","total_cpu_min":0.5,"root":{"op":"scan","table":"T"}}"#,
            "\n",
            r#"{"query_id":"q2","total_cpu_min":30.0,"root":{"op":"scan","table":"T"}}"#,
            "\n",
            r#"{"query_id":"q3","total_cpu_min":75.0,"root":{"op":"scan","table":"T"}}"#,
        );
        let filtered = parse_workload_jsonl(text, &ParseOptions::default(), "t").unwrap();
        assert_eq!(filtered.len(), 1);
        assert_eq!(filtered.traces[0].query_id, "q2");
        let unfiltered = parse_workload_jsonl(text, &no_filter(), "t").unwrap();
        assert_eq!(unfiltered.len(), 3);
    }

    #[test]
    fn table_with_children_is_rejected() {
        let line = r#"{"query_id":"q1","total_cpu_min":2.0,"root":{"op":"scan","table":"T","children":[{"op":"scan","table":"U"}]}}"#;
        assert!(matches!(
            parse_workload_jsonl(line, &ParseOptions::default(), "t"),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn wide_node_is_left_deep_binarized() {
        let line = r#"{"query_id":"q1","total_cpu_min":2.0,"root":{"op":"union","children":[{"op":"scan","table":"A"},{"op":"scan","table":"B"},{"op":"scan","table":"C"},{"op":"scan","table":"D"}]}}"#;
        let w = parse_workload_jsonl(line, &ParseOptions::default(), "t").unwrap();
        let root = &w.traces[0].root;
        assert_eq!(root.children.len(), 2);
        assert_eq!(root.children[1].table.as_deref(), Some("D"));
        let inner = &root.children[0];
        assert_eq!(inner.op_name, "union");
        assert_eq!(inner.children.len(), 2);
        assert_eq!(inner.children[1].table.as_deref(), Some("C"));
        let innermost = &inner.children[0];
        assert_eq!(innermost.children[0].table.as_deref(), Some("A"));
        assert_eq!(innermost.children[1].table.as_deref(), Some("B"));
    }

    #[test]
    fn deep_chain_round_trips() {
        let mut node = PlanNode::scan("scan", "t0");
        for i in 0..3000 {
            let mut parent = PlanNode::new("project");
            if i % 7 == 0 {
                parent.predicate = Some(parse_clause("a.b > 1"));
            }
            parent.children.push(node);
            node = parent;
        }
        let w = Workload::new(
            vec![QueryTrace { query_id: "deep".into(), root: node, total_cpu_min: 5.0 }],
            "t",
        );
        let text = workload_to_jsonl_string(&w);
        let parsed = parse_workload_jsonl(&text, &no_filter(), "t").unwrap();
        assert_eq!(parsed, w);
    }

    #[test]
    fn predicates_round_trip() {
        let pred = PredicateExpr::and(vec![
            parse_clause("x > 1"),
            PredicateExpr::or(vec![parse_clause("y < 2"), parse_clause("z = 3")]),
        ]);
        let mut root = PlanNode::new("filter");
        root.predicate = Some(pred);
        root.children.push(PlanNode::scan("scan", "T"));
        let w = Workload::new(
            vec![QueryTrace { query_id: "q".into(), root, total_cpu_min: 4.0 }],
            "t",
        );
        let text = workload_to_jsonl_string(&w);
        assert!(text.contains(r#""and":[{"clause":"x > 1"}"#));
        let parsed = parse_workload_jsonl(&text, &no_filter(), "t").unwrap();
        assert_eq!(parsed, w);
    }
}
