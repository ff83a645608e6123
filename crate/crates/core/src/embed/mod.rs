//! Learned predicate embedding.
//!
//! A skip-gram model is trained over predicate tokens with literal values
//! stripped, leaving columns and comparison operators. Predicate trees are
//! encoded bottom-up: a clause is the mean of its token vectors, AND pools
//! children element-wise with MIN, OR with MAX. Out-of-vocabulary predicates
//! fall back through a tier hierarchy: other predicate encodings in the same
//! query, then the query's known token vectors, then a global mean.

mod train;

pub use train::{build_corpus, train_word2vec, TokenCorpus, W2VHyper};

use std::collections::HashMap;

use crate::plan::{ConjKind, PredicateExpr};

/// Strip values and conjunction labels; keep column tokens and comparison
/// operators in clause order.
pub fn tokenize_predicate(pred: &PredicateExpr) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut stack = vec![pred];
    while let Some(p) = stack.pop() {
        match p {
            PredicateExpr::Clause { column_tokens, comparison_op, .. } => {
                tokens.extend(column_tokens.iter().cloned());
                if !comparison_op.is_empty() {
                    tokens.push(comparison_op.clone());
                }
            }
            PredicateExpr::Conjunction { children, .. } => {
                stack.extend(children.iter().rev());
            }
        }
    }
    tokens
}

/// Trained token embedding with fallback state for unseen predicates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    p_f: usize,
    window: usize,
    min_count: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<Vec<f64>>,
    global_fallback: Vec<f64>,
}

impl EmbeddingModel {
    pub fn from_parts(
        p_f: usize,
        window: usize,
        min_count: usize,
        entries: Vec<(String, Vec<f64>)>,
        global_fallback: Vec<f64>,
    ) -> Self {
        assert!(entries.iter().all(|(_, v)| v.len() == p_f));
        assert_eq!(global_fallback.len(), p_f);
        let tokens: Vec<String> = entries.iter().map(|(t, _)| t.clone()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let vectors = entries.into_iter().map(|(_, v)| v).collect();
        EmbeddingModel { p_f, window, min_count, tokens, index, vectors, global_fallback }
    }

    pub fn p_f(&self) -> usize {
        self.p_f
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn global_fallback(&self) -> &[f64] {
        &self.global_fallback
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vectors[i].as_slice())
    }

    /// Context-free predicate encoding. Clauses with no known token fall
    /// back to the global mean; pooling is total over all children.
    pub fn encode_predicate(&self, pred: &PredicateExpr) -> Vec<f64> {
        self.encode_with_clause_fallback(pred, Some(&self.global_fallback))
            .unwrap_or_else(|| self.global_fallback.clone())
    }

    /// Encoding used while computing the global fallback itself: clauses
    /// and predicates without any known token are skipped rather than
    /// substituted.
    pub(crate) fn encode_known_only(&self, pred: &PredicateExpr) -> Option<Vec<f64>> {
        self.encode_with_clause_fallback(pred, None)
    }

    fn encode_with_clause_fallback(
        &self,
        pred: &PredicateExpr,
        clause_fallback: Option<&[f64]>,
    ) -> Option<Vec<f64>> {
        match pred {
            PredicateExpr::Clause { .. } => self
                .encode_clause(pred)
                .or_else(|| clause_fallback.map(|v| v.to_vec())),
            PredicateExpr::Conjunction { kind, children } => {
                let encoded: Vec<Vec<f64>> = children
                    .iter()
                    .filter_map(|c| self.encode_with_clause_fallback(c, clause_fallback))
                    .collect();
                if encoded.is_empty() {
                    return None;
                }
                Some(match kind {
                    ConjKind::And => pool_min(&encoded),
                    ConjKind::Or => pool_max(&encoded),
                })
            }
        }
    }

    fn encode_clause(&self, clause: &PredicateExpr) -> Option<Vec<f64>> {
        let tokens = tokenize_predicate(clause);
        let known: Vec<&[f64]> = tokens.iter().filter_map(|t| self.vector(t)).collect();
        if known.is_empty() {
            return None;
        }
        let mut mean = vec![0.0; self.p_f];
        for v in &known {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x;
            }
        }
        let n = known.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Some(mean)
    }

    /// Encode every predicate of one query, applying the fallback hierarchy
    /// with the query itself as context.
    pub fn encode_query_predicates(&self, preds: &[&PredicateExpr]) -> Vec<Vec<f64>> {
        // Tier-2 vector: mean over all known token occurrences in the query.
        let mut tier2_sum = vec![0.0; self.p_f];
        let mut tier2_n = 0usize;
        for pred in preds {
            for token in tokenize_predicate(pred) {
                if let Some(v) = self.vector(&token) {
                    for (s, x) in tier2_sum.iter_mut().zip(v.iter()) {
                        *s += x;
                    }
                    tier2_n += 1;
                }
            }
        }
        let tier2: Option<Vec<f64>> = (tier2_n > 0).then(|| {
            tier2_sum.iter().map(|s| s / tier2_n as f64).collect()
        });
        let clause_fallback: &[f64] = tier2.as_deref().unwrap_or(&self.global_fallback);

        // Predicates with at least one known token are encoded directly,
        // with zero-known clauses filled by the tier-2/3 vector. The rest
        // go through the out-of-vocabulary hierarchy below.
        let first_pass: Vec<Option<Vec<f64>>> = preds
            .iter()
            .map(|p| {
                let has_known =
                    tokenize_predicate(p).iter().any(|t| self.vector(t).is_some());
                has_known
                    .then(|| self.encode_with_clause_fallback(p, Some(clause_fallback)))
                    .flatten()
            })
            .collect();
        let known_encodings: Vec<Vec<f64>> =
            first_pass.iter().flatten().cloned().collect();
        let known_tokens = collect_known_tokens(self, preds);

        first_pass
            .into_iter()
            .map(|enc| match enc {
                Some(v) => v,
                None => encode_oov(&known_encodings, &known_tokens, self),
            })
            .collect()
    }

    /// Mean of the known-only encodings over the given training predicates.
    pub fn finalize_global_fallback<'a>(
        &mut self,
        preds: impl Iterator<Item = &'a PredicateExpr>,
    ) {
        let mut sum = vec![0.0; self.p_f];
        let mut n = 0usize;
        for pred in preds {
            if let Some(v) = self.encode_known_only(pred) {
                for (s, x) in sum.iter_mut().zip(v.iter()) {
                    *s += x;
                }
                n += 1;
            }
        }
        if n > 0 {
            self.global_fallback = sum.into_iter().map(|s| s / n as f64).collect();
        }
    }

    /// Plain-text export, one `token<TAB>v1 v2 ... vPf` line per token.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        for (token, vector) in self.tokens.iter().zip(self.vectors.iter()) {
            out.push_str(token);
            out.push('\t');
            for (i, x) in vector.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.tokens
            .iter()
            .zip(self.vectors.iter())
            .map(|(t, v)| (t.as_str(), v.as_slice()))
    }
}

fn collect_known_tokens(model: &EmbeddingModel, preds: &[&PredicateExpr]) -> Vec<String> {
    preds
        .iter()
        .flat_map(|p| tokenize_predicate(p))
        .filter(|t| model.vector(t).is_some())
        .collect()
}

/// Fallback hierarchy for a predicate with no known token of its own:
/// mean of the query's other predicate encodings, then the mean of the
/// query's known token vectors, then the global fallback.
pub fn encode_oov(
    query_context: &[Vec<f64>],
    known_tokens: &[String],
    model: &EmbeddingModel,
) -> Vec<f64> {
    if !query_context.is_empty() {
        return mean_of(query_context.iter().map(|v| v.as_slice()), model.p_f);
    }
    let vectors: Vec<&[f64]> = known_tokens.iter().filter_map(|t| model.vector(t)).collect();
    if !vectors.is_empty() {
        return mean_of(vectors.into_iter(), model.p_f);
    }
    model.global_fallback.clone()
}

fn mean_of<'a>(vectors: impl Iterator<Item = &'a [f64]>, p_f: usize) -> Vec<f64> {
    let mut sum = vec![0.0; p_f];
    let mut n = 0usize;
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += x;
        }
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    sum
}

fn pool_min(rows: &[Vec<f64>]) -> Vec<f64> {
    pool_with(rows, f64::min)
}

fn pool_max(rows: &[Vec<f64>]) -> Vec<f64> {
    pool_with(rows, f64::max)
}

fn pool_with(rows: &[Vec<f64>], f: fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = rows[0].clone();
    for row in &rows[1..] {
        for (o, x) in out.iter_mut().zip(row.iter()) {
            *o = f(*o, *x);
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}
