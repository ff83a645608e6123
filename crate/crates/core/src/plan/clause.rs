//! Minimal predicate clause grammar: `column (.column)* COMPARISON value`.
//!
//! Anything that does not match is kept as a clause whose column tokens are
//! the whitespace-split non-numeric, non-quoted tokens of the raw text.

use super::PredicateExpr;

const SYMBOL_OPS: [&str; 7] = ["<=", ">=", "!=", "<>", "=", "<", ">"];
const KEYWORD_OPS: [&str; 2] = ["like", "in"];

/// Parse one clause string into a `PredicateExpr::Clause`. Never fails; the
/// fallback keeps the raw text with best-effort column tokens.
pub fn parse_clause(raw: &str) -> PredicateExpr {
    if let Some((lhs, op, rhs)) = split_comparison(raw) {
        if let Some(column) = parse_column_path(lhs) {
            let value = rhs.trim();
            if !value.is_empty() {
                return PredicateExpr::Clause {
                    raw_text: raw.to_string(),
                    column_tokens: vec![column],
                    comparison_op: op,
                    value_text: value.to_string(),
                };
            }
        }
    }
    PredicateExpr::Clause {
        raw_text: raw.to_string(),
        column_tokens: fallback_tokens(raw),
        comparison_op: String::new(),
        value_text: String::new(),
    }
}

/// Locate the earliest comparison operator and split around it.
fn split_comparison(raw: &str) -> Option<(&str, String, &str)> {
    let bytes = raw.as_bytes();
    let mut best: Option<(usize, usize, String)> = None; // (start, len, op)
    for op in SYMBOL_OPS {
        if let Some(pos) = raw.find(op) {
            // Longest operator wins at equal position: the ops are ordered
            // two-char first, so first match at the lowest position is right
            // unless a later op starts earlier.
            match &best {
                Some((p, _, _)) if *p <= pos => {}
                _ => best = Some((pos, op.len(), op.to_string())),
            }
        }
    }
    let lower = raw.to_ascii_lowercase();
    for kw in KEYWORD_OPS {
        let mut search_from = 0;
        while let Some(rel) = lower[search_from..].find(kw) {
            let pos = search_from + rel;
            let before_ok = pos > 0 && bytes[pos - 1].is_ascii_whitespace();
            let after = pos + kw.len();
            let after_ok = after < bytes.len() && bytes[after].is_ascii_whitespace();
            if before_ok && after_ok {
                match &best {
                    Some((p, _, _)) if *p <= pos => {}
                    _ => best = Some((pos, kw.len(), kw.to_string())),
                }
                break;
            }
            search_from = after;
        }
    }
    let (pos, len, op) = best?;
    Some((&raw[..pos], op, &raw[pos + len..]))
}

/// `ident(.ident)*` where ident is `[A-Za-z_][A-Za-z0-9_]*`; returns the
/// lower-cased dotted path.
fn parse_column_path(lhs: &str) -> Option<String> {
    let lhs = lhs.trim();
    if lhs.is_empty() {
        return None;
    }
    for part in lhs.split('.') {
        let mut chars = part.chars();
        match chars.next() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return None,
        }
        if !chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return None;
        }
    }
    Some(lhs.to_ascii_lowercase())
}

fn fallback_tokens(raw: &str) -> Vec<String> {
    raw.split_whitespace()
        .filter(|t| !is_numeric(t) && !is_quoted(t))
        .map(|t| t.to_ascii_lowercase())
        .collect()
}

fn is_numeric(token: &str) -> bool {
    token.parse::<f64>().is_ok()
}

fn is_quoted(token: &str) -> bool {
    token.starts_with('\'') || token.starts_with('"')
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clause_parts(raw: &str) -> (Vec<String>, String, String) {
        match &parse_clause(raw) {
            PredicateExpr::Clause { column_tokens, comparison_op, value_text, .. } => {
                (column_tokens.clone(), comparison_op.clone(), value_text.clone())
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn dotted_column_and_symbol_op() {
        let (cols, op, value) = clause_parts("a.lat >= 1.3");
        assert_eq!(cols, vec!["a.lat"]);
        assert_eq!(op, ">=");
        assert_eq!(value, "1.3");
    }

    #[test]
    fn glued_operator() {
        let (cols, op, value) = clause_parts("orders.amount<=250");
        assert_eq!(cols, vec!["orders.amount"]);
        assert_eq!(op, "<=");
        assert_eq!(value, "250");
    }

    #[test]
    fn keyword_operator_case_insensitive() {
        let (cols, op, value) = clause_parts("city LIKE 'sin%'");
        assert_eq!(cols, vec!["city"]);
        assert_eq!(op, "like");
        assert_eq!(value, "'sin%'");
    }

    #[test]
    fn in_list() {
        let (cols, op, value) = clause_parts("status in (1, 2, 3)");
        assert_eq!(cols, vec!["status"]);
        assert_eq!(op, "in");
        assert_eq!(value, "(1, 2, 3)");
    }

    #[test]
    fn unparseable_falls_back_to_token_split() {
        let (cols, op, value) = clause_parts("ds IS NOT NULL");
        assert_eq!(cols, vec!["ds", "is", "not", "null"]);
        assert_eq!(op, "");
        assert_eq!(value, "");
    }

    #[test]
    fn fallback_drops_numbers_and_quoted_literals() {
        let (cols, _, _) = clause_parts("x BETWEEN 1 AND 'z'");
        assert_eq!(cols, vec!["x", "between", "and"]);
    }

    #[test]
    fn operator_inside_quoted_value_is_not_split_twice() {
        let (cols, op, value) = clause_parts("name = 'a>b'");
        assert_eq!(cols, vec!["name"]);
        assert_eq!(op, "=");
        assert_eq!(value, "'a>b'");
    }

    #[test]
    fn column_case_is_normalized() {
        let (cols, _, _) = clause_parts("Orders.AMOUNT > 10");
        assert_eq!(cols, vec!["orders.amount"]);
    }
}
