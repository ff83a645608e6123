//! Seeded synthetic workload generator for desk-scale experiments.
//!
//! Plan sizes follow a log-normal distribution with an explicit "monster"
//! spike: a `tail_frac` fraction of queries draw their size from a second
//! log-normal centered at `tail_size_median` nodes. Together these produce
//! the long-tail shape of real OLAP traces, where the top percentile of
//! plans is far larger than the median and carries a disproportionate share
//! of the total cost.
//!
//! The planted cost label is a documented function of plan features, so a
//! model can in principle learn it from the encoded plan alone:
//!
//! ```text
//! size(nc) = SIZE_EXP_LO  * ln(min(nc, KNEE_LO))
//!          + SIZE_EXP_MID * ln(clamp(nc, KNEE_LO, KNEE_HI) / KNEE_LO)
//!          + SIZE_EXP_HI  * ln(max(nc, KNEE_HI) / KNEE_HI)
//! ln cost = ln(BASE_SCALE) + size(node_count)
//!         + mean over distinct scanned tables of table_bias(t)
//!         + CLAUSE_OP_WEIGHT * mean clause-operator score
//!         + AGG_BONUS  if the plan contains an aggregate
//!         + SORT_BONUS if the plan contains a sort
//!         + Normal(0, noise_sigma)
//! cost = clamp(exp(ln cost), 1, 60) minutes
//! ```
//!
//! The size curve is steep below `KNEE_LO` nodes, gentle through the mid
//! band, and steep again past `KNEE_HI`, which only tail-spike plans reach;
//! their raw cost overshoots the cap so they cluster at 60 minutes. Very
//! large plans are built as join towers (join probability rises once the
//! remaining node budget exceeds `JOIN_TOWER_BUDGET`), the classic shape of
//! wide fan-in ETL queries, so a plan's upper region reflects its scale.
//! `table_bias(t)` is a fixed pseudo-random value in [-1.1, 1.1] per table
//! index, so scanning "expensive" tables raises cost in a way invisible to
//! any size-only baseline. Clause-operator scores make equality filters
//! cheaper than range filters (a crude selectivity proxy).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use super::{parse_clause, PlanNode, PredicateExpr, QueryTrace, Workload};
use crate::error::{Error, Result};

pub const BASE_SCALE: f64 = 0.0070;
pub const SIZE_EXP_LO: f64 = 1.6;
pub const SIZE_EXP_MID: f64 = 0.45;
pub const SIZE_EXP_HI: f64 = 3.0;
pub const KNEE_LO: f64 = 45.0;
pub const KNEE_HI: f64 = 1200.0;
pub const JOIN_TOWER_BUDGET: usize = 400;
pub const JOIN_TOWER_PROB: f64 = 0.9;
pub const TABLE_BIAS_RANGE: f64 = 2.2;
pub const CLAUSE_OP_WEIGHT: f64 = 0.5;
pub const AGG_BONUS: f64 = 0.18;
pub const SORT_BONUS: f64 = 0.10;
pub const COST_FLOOR_MIN: f64 = 1.0;
pub const COST_CAP_MIN: f64 = 60.0;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub count: usize,
    /// Number of distinct tables in the pool.
    pub table_pool: usize,
    /// Predicate columns available per table.
    pub columns_per_table: usize,
    /// ln of the median plan node count.
    pub size_log_mean: f64,
    /// Log-normal sigma of plan node counts; larger values fatten the tail.
    pub size_log_sigma: f64,
    /// Hard cap on plan node count.
    pub max_nodes: usize,
    /// Probability that a unary operator is a filter.
    pub filter_prob: f64,
    /// Probability that an internal expansion is a join.
    pub join_prob: f64,
    /// Fraction of queries drawn from the tail-spike size distribution.
    pub tail_frac: f64,
    /// Median plan size of tail-spike queries, in nodes.
    pub tail_size_median: f64,
    /// Sigma of the log-normal noise on the planted cost.
    pub noise_sigma: f64,
    pub source_tag: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 1000,
            table_pool: 24,
            columns_per_table: 6,
            size_log_mean: 18f64.ln(),
            size_log_sigma: 1.0,
            max_nodes: 4000,
            filter_prob: 0.45,
            join_prob: 0.35,
            tail_frac: 0.013,
            tail_size_median: 3200.0,
            noise_sigma: 0.08,
            source_tag: "synthetic".into(),
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.table_pool == 0 || self.columns_per_table == 0 {
            return Err(Error::InvalidConfig("table and column pools must be positive".into()));
        }
        if self.max_nodes == 0 {
            return Err(Error::InvalidConfig("max_nodes must be positive".into()));
        }
        if !(self.size_log_sigma > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("sigmas must be positive".into()));
        }
        for (name, p) in [
            ("filter_prob", self.filter_prob),
            ("join_prob", self.join_prob),
            ("tail_frac", self.tail_frac),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.tail_size_median >= 1.0) {
            return Err(Error::InvalidConfig("tail_size_median must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic in (config, seed): per-query RNG streams are derived from
/// the seed and the query index only.
pub fn generate_synthetic_workload(config: &SynthConfig, seed: u64) -> Result<Workload> {
    config.validate()?;
    let mut traces = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
        traces.push(generate_trace(config, i, &mut rng));
    }
    Ok(Workload::new(traces, config.source_tag.clone()))
}

fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 over the (seed, index) pair
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fixed per-table cost bias in [-TABLE_BIAS_RANGE/2, TABLE_BIAS_RANGE/2].
fn table_bias(table_idx: usize) -> f64 {
    let h = mix(0x7461_626c, table_idx as u64);
    ((h >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * TABLE_BIAS_RANGE
}

fn clause_op_score(op: &str) -> f64 {
    match op {
        "=" => -0.35,
        "in" => -0.15,
        ">" | "<" | ">=" | "<=" => -0.10,
        "like" => -0.05,
        _ => 0.0,
    }
}

enum ShapeKind {
    Scan { table: usize, pred: Option<PredicateExpr> },
    Unary { op: &'static str, pred: Option<PredicateExpr> },
    Join,
}

struct ShapeNode {
    kind: ShapeKind,
    children: Vec<usize>,
}

fn generate_trace(config: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> QueryTrace {
    let size_dist = LogNormal::new(config.size_log_mean, config.size_log_sigma)
        .expect("validated sigma");
    let body_size = size_dist.sample(rng);
    let raw_size = if rng.random::<f64>() < config.tail_frac {
        let tail_dist =
            LogNormal::new(config.tail_size_median.ln(), 0.25).expect("fixed sigma");
        tail_dist.sample(rng)
    } else {
        body_size
    };
    let target = (raw_size.round() as usize).clamp(1, config.max_nodes);

    // Queries touch a small "home" set of tables, like templated workloads do.
    let home_count = rng.random_range(1..=4.min(config.table_pool));
    let mut home_tables = Vec::with_capacity(home_count);
    while home_tables.len() < home_count {
        let t = rng.random_range(0..config.table_pool);
        if !home_tables.contains(&t) {
            home_tables.push(t);
        }
    }

    let shape = build_shape(config, target, &home_tables, rng);
    let root = materialize(&shape);

    let cost = planted_cost(&root, target, config, rng);
    QueryTrace {
        query_id: format!("{}-{index:06}", config.source_tag),
        root,
        total_cpu_min: cost,
    }
}

fn build_shape(
    config: &SynthConfig,
    budget: usize,
    home_tables: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<ShapeNode> {
    let mut arena: Vec<ShapeNode> = Vec::with_capacity(budget);
    let mut stack: Vec<(usize, Option<usize>)> = vec![(budget, None)];
    while let Some((budget, parent)) = stack.pop() {
        let idx = arena.len();
        let join_prob = if budget > JOIN_TOWER_BUDGET {
            JOIN_TOWER_PROB
        } else {
            config.join_prob
        };
        let kind = if budget <= 1 {
            let table = home_tables[rng.random_range(0..home_tables.len())];
            let pred = (rng.random::<f64>() < 0.25)
                .then(|| random_predicate(config, home_tables, rng));
            ShapeKind::Scan { table, pred }
        } else if budget >= 3 && rng.random::<f64>() < join_prob {
            // Skewed split: favors left-deep shapes with occasional bushiness.
            let u: f64 = rng.random();
            let left = 1 + (u * u * (budget - 2) as f64).floor() as usize;
            let right = budget - 1 - left;
            stack.push((right, Some(idx)));
            stack.push((left, Some(idx)));
            ShapeKind::Join
        } else {
            let op = if rng.random::<f64>() < config.filter_prob {
                "filter"
            } else {
                match rng.random_range(0..10) {
                    0..=4 => "project",
                    5..=7 => "aggregate",
                    _ => "sort",
                }
            };
            let pred = (op == "filter").then(|| random_predicate(config, home_tables, rng));
            stack.push((budget - 1, Some(idx)));
            ShapeKind::Unary { op, pred }
        };
        arena.push(ShapeNode { kind, children: Vec::new() });
        if let Some(p) = parent {
            arena[p].children.push(idx);
        }
    }
    arena
}

/// Children sit at larger indices than their parent, so a reverse walk
/// materializes leaves first without recursion.
fn materialize(shape: &[ShapeNode]) -> PlanNode {
    let mut slots: Vec<Option<PlanNode>> = (0..shape.len()).map(|_| None).collect();
    for idx in (0..shape.len()).rev() {
        let entry = &shape[idx];
        let children: Vec<PlanNode> = entry
            .children
            .iter()
            .map(|&c| slots[c].take().expect("child materialized"))
            .collect();
        let node = match &entry.kind {
            ShapeKind::Scan { table, pred } => PlanNode {
                op_name: "scan".into(),
                table: Some(table_name(*table)),
                predicate: pred.clone(),
                children,
            },
            ShapeKind::Unary { op, pred } => PlanNode {
                op_name: (*op).into(),
                table: None,
                predicate: pred.clone(),
                children,
            },
            ShapeKind::Join => PlanNode {
                op_name: "join".into(),
                table: None,
                predicate: None,
                children,
            },
        };
        slots[idx] = Some(node);
    }
    slots[0].take().expect("root materialized")
}

pub(crate) fn table_name(idx: usize) -> String {
    format!("tab{idx:02}")
}

fn column_name(table: usize, col: usize) -> String {
    format!("tab{table:02}.c{col}")
}

fn random_clause(config: &SynthConfig, home_tables: &[usize], rng: &mut ChaCha8Rng) -> PredicateExpr {
    let table = home_tables[rng.random_range(0..home_tables.len())];
    let col = column_name(table, rng.random_range(0..config.columns_per_table));
    let raw = match rng.random_range(0..8) {
        0 | 1 => format!("{col} = {}", rng.random_range(0..500)),
        2 => format!("{col} in ({}, {})", rng.random_range(0..100), rng.random_range(100..200)),
        3 => format!("{col} like 'v{}%'", rng.random_range(0..40)),
        4 => format!("{col} >= {:.2}", rng.random::<f64>() * 100.0),
        5 => format!("{col} <= {:.2}", rng.random::<f64>() * 100.0),
        6 => format!("{col} > {}", rng.random_range(0..1000)),
        _ => format!("{col} < {}", rng.random_range(0..1000)),
    };
    parse_clause(&raw)
}

fn random_predicate(
    config: &SynthConfig,
    home_tables: &[usize],
    rng: &mut ChaCha8Rng,
) -> PredicateExpr {
    match rng.random_range(0..10) {
        0..=4 => random_clause(config, home_tables, rng),
        5..=7 => {
            let n = rng.random_range(2..=4);
            PredicateExpr::and((0..n).map(|_| random_clause(config, home_tables, rng)).collect())
        }
        8 => {
            let n = rng.random_range(2..=3);
            PredicateExpr::or((0..n).map(|_| random_clause(config, home_tables, rng)).collect())
        }
        _ => PredicateExpr::and(vec![
            random_clause(config, home_tables, rng),
            PredicateExpr::or(vec![
                random_clause(config, home_tables, rng),
                random_clause(config, home_tables, rng),
            ]),
        ]),
    }
}

fn planted_cost(
    root: &PlanNode,
    node_count: usize,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut tables = std::collections::BTreeSet::new();
    let mut clause_scores = Vec::new();
    let mut has_agg = false;
    let mut has_sort = false;
    for node in root.iter_nodes() {
        if let Some(t) = &node.table {
            tables.insert(t.clone());
        }
        match node.op_name.as_str() {
            "aggregate" => has_agg = true,
            "sort" => has_sort = true,
            _ => {}
        }
        if let Some(pred) = &node.predicate {
            collect_clause_scores(pred, &mut clause_scores);
        }
    }
    let table_term = if tables.is_empty() {
        0.0
    } else {
        tables
            .iter()
            .map(|name| {
                let idx: usize = name.trim_start_matches("tab").parse().unwrap_or(0);
                table_bias(idx)
            })
            .sum::<f64>()
            / tables.len() as f64
    };
    let clause_term = if clause_scores.is_empty() {
        0.0
    } else {
        CLAUSE_OP_WEIGHT * clause_scores.iter().sum::<f64>() / clause_scores.len() as f64
    };
    let noise = if config.noise_sigma > 0.0 {
        Normal::new(0.0, config.noise_sigma).expect("validated sigma").sample(rng)
    } else {
        0.0
    };
    let nc = node_count as f64;
    let size_term = SIZE_EXP_LO * nc.min(KNEE_LO).ln()
        + SIZE_EXP_MID * (nc.clamp(KNEE_LO, KNEE_HI) / KNEE_LO).ln()
        + SIZE_EXP_HI * (nc.max(KNEE_HI) / KNEE_HI).ln();
    let ln_cost = BASE_SCALE.ln()
        + size_term
        + table_term
        + clause_term
        + if has_agg { AGG_BONUS } else { 0.0 }
        + if has_sort { SORT_BONUS } else { 0.0 }
        + noise;
    ln_cost.exp().clamp(COST_FLOOR_MIN, COST_CAP_MIN)
}

fn collect_clause_scores(pred: &PredicateExpr, out: &mut Vec<f64>) {
    let mut stack = vec![pred];
    while let Some(p) = stack.pop() {
        match p {
            PredicateExpr::Clause { comparison_op, .. } => out.push(clause_op_score(comparison_op)),
            PredicateExpr::Conjunction { children, .. } => stack.extend(children.iter()),
        }
    }
}
