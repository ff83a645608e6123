//! Target transforms, dataset splitting, the log-binning baseline, and the
//! accuracy / provisioning / footprint / cost / drift reports.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::otp::build_vocabularies;
use crate::plan::{plan_stats, QueryTrace, Workload};

/// Log transformation followed by min-max normalization, fitted on training
/// targets so every training value maps into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetTransform {
    pub min_log: f64,
    pub max_log: f64,
}

impl TargetTransform {
    pub fn fit(targets: &[f64]) -> Result<Self> {
        if targets.len() < 2 {
            return Err(Error::DegenerateTargets("need at least 2 training targets".into()));
        }
        let mut min_log = f64::INFINITY;
        let mut max_log = f64::NEG_INFINITY;
        for &y in targets {
            if !(y > 0.0 && y.is_finite()) {
                return Err(Error::DegenerateTargets(format!("target {y} not positive finite")));
            }
            min_log = min_log.min(y.ln());
            max_log = max_log.max(y.ln());
        }
        if max_log <= min_log {
            return Err(Error::DegenerateTargets("all training targets are equal".into()));
        }
        Ok(TargetTransform { min_log, max_log })
    }

    /// Normalized target in [0, 1]; out-of-range inference targets clamp.
    pub fn apply(&self, minutes: f64) -> f64 {
        ((minutes.ln() - self.min_log) / (self.max_log - self.min_log)).clamp(0.0, 1.0)
    }

    /// Exact inverse of `apply` on [0, 1].
    pub fn invert(&self, normalized: f64) -> f64 {
        (self.min_log + normalized * (self.max_log - self.min_log)).exp()
    }

    pub fn min_minutes(&self) -> f64 {
        self.min_log.exp()
    }

    pub fn max_minutes(&self) -> f64 {
        self.max_log.exp()
    }
}

/// Seeded train/validation/test split. With a group key, all traces of a
/// group land in the same split.
pub fn split_workload(
    workload: Workload,
    ratios: [usize; 3],
    seed: u64,
    group_key: Option<&dyn Fn(&QueryTrace) -> String>,
) -> Result<(Workload, Workload, Workload)> {
    if workload.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    if ratios.iter().any(|&r| r == 0) {
        return Err(Error::InvalidConfig("split ratios must be positive".into()));
    }
    let tag = workload.source_tag.clone();
    let n = workload.len();
    let whole: usize = ratios.iter().sum();
    let cut1 = n * ratios[0] / whole;
    let cut2 = n * (ratios[0] + ratios[1]) / whole;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::util::mix64(seed, 0x5911_7000));

    let mut buckets: Vec<Vec<QueryTrace>> = vec![Vec::new(), Vec::new(), Vec::new()];
    match group_key {
        None => {
            let mut traces = workload.traces;
            traces.shuffle(&mut rng);
            for (i, trace) in traces.into_iter().enumerate() {
                let split = if i < cut1 {
                    0
                } else if i < cut2 {
                    1
                } else {
                    2
                };
                buckets[split].push(trace);
            }
        }
        Some(key) => {
            let mut group_order: Vec<String> = Vec::new();
            let mut groups: std::collections::HashMap<String, Vec<QueryTrace>> =
                std::collections::HashMap::new();
            for trace in workload.traces {
                let g = key(&trace);
                if !groups.contains_key(&g) {
                    group_order.push(g.clone());
                }
                groups.entry(g).or_default().push(trace);
            }
            if group_order.len() < 3 {
                return Err(Error::InvalidConfig(format!(
                    "{} groups cannot fill 3 splits",
                    group_order.len()
                )));
            }
            group_order.shuffle(&mut rng);
            let mut split = 0usize;
            let mut assigned = 0usize;
            let cuts = [cut1, cut2, n];
            for (gi, g) in group_order.iter().enumerate() {
                let remaining_groups = group_order.len() - gi;
                let remaining_splits = 2 - split;
                let traces = groups.remove(g).expect("group present");
                assigned += traces.len();
                buckets[split].extend(traces);
                // Advance once the split's share is filled, keeping enough
                // groups in reserve so no split ends up empty.
                while split < 2
                    && (assigned >= cuts[split] || remaining_groups - 1 <= remaining_splits - (2 - split))
                {
                    split += 1;
                }
            }
        }
    }
    let mut parts = buckets.into_iter();
    let train = Workload::new(parts.next().unwrap(), tag.clone());
    let val = Workload::new(parts.next().unwrap(), tag.clone());
    let test = Workload::new(parts.next().unwrap(), tag);
    Ok((train, val, test))
}

/// Naive baseline: queries are bucketed by plan node count into B bins with
/// log-scaled edges; prediction is the bin's mean training cost.
#[derive(Debug, Clone, PartialEq)]
pub struct LogBinModel {
    pub bins: usize,
    ln_lo: f64,
    ln_hi: f64,
    bin_means: Vec<Option<f64>>,
    global_mean: f64,
}

pub fn log_binning_fit(train: &Workload, bins: usize) -> Result<LogBinModel> {
    if bins < 1 {
        return Err(Error::InvalidConfig("B must be >= 1".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    let counts: Vec<f64> = train
        .traces
        .iter()
        .map(|t| plan_stats(&t.root).node_count as f64)
        .collect();
    let ln_lo = counts.iter().fold(f64::INFINITY, |a, &c| a.min(c.ln()));
    let ln_hi = counts.iter().fold(f64::NEG_INFINITY, |a, &c| a.max(c.ln()));
    let mut model = LogBinModel {
        bins,
        ln_lo,
        // Half-open upper edge so the max count falls in the last bin.
        ln_hi: ln_hi + 1e-9,
        bin_means: vec![None; bins],
        global_mean: 0.0,
    };
    let mut sums = vec![0.0; bins];
    let mut counts_per = vec![0usize; bins];
    let mut total = 0.0;
    for (c, trace) in counts.iter().zip(&train.traces) {
        let idx = model.bin_index(*c);
        sums[idx] += trace.total_cpu_min;
        counts_per[idx] += 1;
        total += trace.total_cpu_min;
    }
    for i in 0..bins {
        if counts_per[i] > 0 {
            model.bin_means[i] = Some(sums[i] / counts_per[i] as f64);
        }
    }
    model.global_mean = total / train.len() as f64;
    Ok(model)
}

impl LogBinModel {
    fn bin_index(&self, node_count: f64) -> usize {
        if self.ln_hi <= self.ln_lo {
            return 0;
        }
        let t = (node_count.ln() - self.ln_lo) / (self.ln_hi - self.ln_lo);
        ((t * self.bins as f64).floor() as isize).clamp(0, self.bins as isize - 1) as usize
    }

    /// Strictly increasing bin edges in node-count units.
    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins)
            .map(|i| {
                (self.ln_lo + (self.ln_hi - self.ln_lo) * i as f64 / self.bins as f64).exp()
            })
            .collect()
    }

    pub fn predict(&self, trace: &QueryTrace) -> f64 {
        let idx = self.bin_index(plan_stats(&trace.root).node_count as f64);
        if let Some(mean) = self.bin_means[idx] {
            return mean;
        }
        // Empty bin: nearest populated bin by edge distance, lower index on
        // ties; global mean when nothing is populated.
        let nearest = self
            .bin_means
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.map(|v| (i, v)))
            .min_by_key(|(i, _)| (i.abs_diff(idx), *i));
        nearest.map_or(self.global_mean, |(_, v)| v)
    }
}

/// Mean squared error in minutes squared.
pub fn mse_minutes(preds: &[f64], actuals: &[f64]) -> Result<f64> {
    if preds.len() != actuals.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "mse needs equal nonempty lengths, got {} and {}",
            preds.len(),
            actuals.len()
        )));
    }
    let n = preds.len() as f64;
    Ok(preds
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        / n)
}

/// Aggregate over/under provisioning percentages. Each side is normalized
/// by the actual CPU time of its own query group; an empty group reports 0.
pub fn provisioning_report(preds: &[f64], actuals: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != actuals.len() || preds.is_empty() {
        return Err(Error::Shape("provisioning needs equal nonempty lengths".into()));
    }
    let mut over_excess = 0.0;
    let mut over_actual = 0.0;
    let mut under_deficit = 0.0;
    let mut under_actual = 0.0;
    for (&p, &a) in preds.iter().zip(actuals) {
        if p > a {
            over_excess += p - a;
            over_actual += a;
        } else if p < a {
            under_deficit += a - p;
            under_actual += a;
        }
    }
    let over = if over_actual > 0.0 { 100.0 * over_excess / over_actual } else { 0.0 };
    let under = if under_actual > 0.0 { 100.0 * under_deficit / under_actual } else { 0.0 };
    Ok((over, under))
}

/// Per-batch element counts for the sub-tree configuration against a
/// full-tree reference padded to the largest tree in the workload.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintReport {
    /// Typed node count of the largest tree.
    pub max_typed_nodes: usize,
    pub feature_width: usize,
    pub batch_size: usize,
    pub sub_features: usize,
    pub sub_indices: usize,
    pub sub_votes: usize,
    pub full_features: usize,
    pub full_indices: usize,
    pub full_votes: usize,
    /// Feature-array reduction: full / sub.
    pub reduction_factor: f64,
}

pub fn footprint_report(
    workload: &Workload,
    max_nodes: usize,
    keep: usize,
    batch_size: usize,
    p_f: usize,
) -> Result<FootprintReport> {
    if workload.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    if max_nodes == 0 || keep == 0 || batch_size == 0 {
        return Err(Error::InvalidConfig("footprint config must be positive".into()));
    }
    let vocab = build_vocabularies(workload)?;
    let feature_width = vocab.operator_count() + p_f + vocab.table_slot_count();
    let mut max_typed = 0usize;
    for trace in &workload.traces {
        let tree = crate::otp::build_otp_tree(&trace.root)?;
        max_typed = max_typed.max(tree.typed_node_count());
    }
    let full_slots = max_typed + 1;
    let sub_slots = keep * (max_nodes + 1);
    let report = FootprintReport {
        max_typed_nodes: max_typed,
        feature_width,
        batch_size,
        sub_features: batch_size * sub_slots * feature_width,
        sub_indices: 2 * batch_size * sub_slots,
        sub_votes: batch_size * sub_slots,
        full_features: batch_size * full_slots * feature_width,
        full_indices: 2 * batch_size * full_slots,
        full_votes: batch_size * full_slots,
        reduction_factor: (full_slots * feature_width) as f64
            / (sub_slots * feature_width) as f64,
    };
    Ok(report)
}

/// Training cost at an hourly rate: epochs x epoch_seconds at `rate` $/h.
pub fn cost_projection(epoch_seconds: f64, epochs: usize, hourly_rate_usd: f64) -> f64 {
    epochs as f64 * epoch_seconds / 3600.0 * hourly_rate_usd
}

/// Percentage of tables in the future window that the reference window has
/// never seen.
pub fn table_drift(reference: &Workload, future: &Workload) -> Result<f64> {
    if reference.is_empty() || future.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    let known = reference.table_set();
    let upcoming = future.table_set();
    if upcoming.is_empty() {
        return Err(Error::InvalidConfig("future window scans no tables".into()));
    }
    let unseen = upcoming.difference(&known).count();
    Ok(100.0 * unseen as f64 / upcoming.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{generate_synthetic_workload, PlanNode, SynthConfig};

    fn trace(id: &str, len: usize, cost: f64) -> QueryTrace {
        let mut node = PlanNode::scan("scan", "t");
        for _ in 1..len {
            let mut parent = PlanNode::new("project");
            parent.children.push(node);
            node = parent;
        }
        QueryTrace { query_id: id.into(), root: node, total_cpu_min: cost }
    }

    #[test]
    fn transform_endpoints_and_midpoint() {
        let t = TargetTransform::fit(&[1.0, 60.0]).unwrap();
        assert_eq!(t.apply(1.0), 0.0);
        assert_eq!(t.apply(60.0), 1.0);
        let mid = 60f64.sqrt();
        assert!((t.apply(mid) - 0.5).abs() < 1e-12);
        assert!((t.min_minutes() - 1.0).abs() < 1e-12);
        assert!((t.max_minutes() - 60.0).abs() < 1e-9);
    }

    #[test]
    fn transform_round_trips() {
        let t = TargetTransform::fit(&[1.5, 4.0, 33.0]).unwrap();
        for y in [1.5, 2.0, 10.0, 33.0] {
            let rel = (t.invert(t.apply(y)) - y).abs() / y;
            assert!(rel < 1e-9);
        }
        // Out-of-range inference targets clamp.
        assert_eq!(t.apply(0.5), 0.0);
        assert_eq!(t.apply(100.0), 1.0);
    }

    #[test]
    fn transform_rejects_degenerate_targets() {
        assert!(TargetTransform::fit(&[5.0]).is_err());
        assert!(TargetTransform::fit(&[5.0, 5.0]).is_err());
        assert!(TargetTransform::fit(&[5.0, -1.0]).is_err());
    }

    #[test]
    fn split_counts_8_1_1() {
        let traces = (0..10).map(|i| trace(&format!("q{i}"), 3, 2.0)).collect();
        let w = Workload::new(traces, "t");
        let (train, val, test) = split_workload(w, [8, 1, 1], 7, None).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_seeded() {
        let make = || {
            Workload::new((0..40).map(|i| trace(&format!("q{i}"), 3, 2.0)).collect(), "t")
        };
        let a = split_workload(make(), [8, 1, 1], 5, None).unwrap();
        let b = split_workload(make(), [8, 1, 1], 5, None).unwrap();
        assert_eq!(a, b);
        let c = split_workload(make(), [8, 1, 1], 6, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn grouped_split_never_straddles() {
        let mut traces = Vec::new();
        for g in 0..10 {
            for j in 0..3 {
                traces.push(trace(&format!("g{g}-{j}"), 3, 2.0));
            }
        }
        let w = Workload::new(traces, "t");
        let key = |t: &QueryTrace| t.query_id.split('-').next().unwrap().to_string();
        let (train, val, test) = split_workload(w, [8, 1, 1], 3, Some(&key)).unwrap();
        let sets: Vec<std::collections::BTreeSet<String>> = [&train, &val, &test]
            .iter()
            .map(|w| w.traces.iter().map(|t| key(t)).collect())
            .collect();
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert!(sets[i].is_disjoint(&sets[j]), "group in two splits");
            }
        }
        assert!(!val.is_empty() && !test.is_empty());
        assert_eq!(train.len() + val.len() + test.len(), 30);
    }

    #[test]
    fn grouped_split_needs_three_groups() {
        let traces = (0..6).map(|i| trace(&format!("g{}-{i}", i % 2), 3, 2.0)).collect();
        let w = Workload::new(traces, "t");
        let key = |t: &QueryTrace| t.query_id.split('-').next().unwrap().to_string();
        assert!(split_workload(w, [8, 1, 1], 3, Some(&key)).is_err());
    }

    #[test]
    fn single_bin_predicts_global_mean() {
        let w = Workload::new(
            vec![trace("a", 2, 4.0), trace("b", 8, 6.0), trace("c", 40, 14.0)],
            "t",
        );
        let model = log_binning_fit(&w, 1).unwrap();
        let pred = model.predict(&trace("q", 100, 1.0));
        assert!((pred - 8.0).abs() < 1e-12);
    }

    #[test]
    fn two_bins_predict_their_means() {
        let w = Workload::new(
            vec![
                trace("a", 2, 4.0),
                trace("b", 3, 6.0),
                trace("c", 90, 18.0),
                trace("d", 100, 22.0),
            ],
            "t",
        );
        let model = log_binning_fit(&w, 2).unwrap();
        assert!((model.predict(&trace("q", 2, 0.0)) - 5.0).abs() < 1e-12);
        assert!((model.predict(&trace("q", 95, 0.0)) - 20.0).abs() < 1e-12);
        let edges = model.edges();
        assert_eq!(edges.len(), 3);
        assert!(edges.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn empty_bins_fall_back_to_nearest() {
        let w = Workload::new(
            vec![trace("a", 2, 4.0), trace("b", 1000, 30.0)],
            "t",
        );
        let model = log_binning_fit(&w, 10).unwrap();
        // Mid-size plans sit in empty bins; the nearest populated bin wins.
        let pred = model.predict(&trace("q", 3, 0.0));
        assert!((pred - 4.0).abs() < 1e-12);
        let pred = model.predict(&trace("q", 700, 0.0));
        assert!((pred - 30.0).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_minutes(&[3.0, 5.0], &[3.0, 5.0]).unwrap(), 0.0);
        assert_eq!(mse_minutes(&[5.0, 7.0], &[3.0, 5.0]).unwrap(), 4.0);
        assert!(mse_minutes(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn provisioning_examples() {
        assert_eq!(provisioning_report(&[4.0, 9.0], &[4.0, 9.0]).unwrap(), (0.0, 0.0));
        let (over, under) = provisioning_report(&[10.0, 5.0], &[8.0, 10.0]).unwrap();
        assert!((over - 25.0).abs() < 1e-12);
        assert!((under - 50.0).abs() < 1e-12);
    }

    #[test]
    fn provisioning_sides_partition_mispredictions() {
        let preds = [1.0, 5.0, 5.0, 9.0];
        let actuals = [2.0, 5.0, 3.0, 4.0];
        let mut over_n = 0;
        let mut under_n = 0;
        for (p, a) in preds.iter().zip(&actuals) {
            if p > a {
                over_n += 1;
            } else if p < a {
                under_n += 1;
            }
        }
        assert_eq!(over_n + under_n, 3);
        let (over, under) = provisioning_report(&preds, &actuals).unwrap();
        assert!(over > 0.0 && under > 0.0);
    }

    #[test]
    fn footprint_formula_matches_brute_force_count() {
        let config = SynthConfig { count: 12, ..Default::default() };
        let w = generate_synthetic_workload(&config, 13).unwrap();
        let p_f = 4;
        let report = footprint_report(&w, 15, 9, 2, p_f).unwrap();

        // Brute force: materialize the tensors and count the elements.
        let vocab = build_vocabularies(&w).unwrap();
        let embedder =
            crate::embed::EmbeddingModel::from_parts(p_f, 5, 10, vec![], vec![0.2; p_f]);
        let sampler = crate::sampler::SamplerConfig::new(15, 3, 9).unwrap();
        let mut sub_features = 0usize;
        let mut sub_indices = 0usize;
        let mut full_features = 0usize;
        for trace in w.traces.iter().take(2) {
            let tree = crate::otp::build_otp_tree(&trace.root).unwrap();
            let samples = crate::sampler::sample_subtrees(&tree, &sampler).unwrap();
            let q = crate::sampler::select_top_k(samples, 9);
            let t = crate::sampler::to_tensor(&q, &tree, &vocab, &embedder, 15).unwrap();
            let (f, i, _) = t.element_count();
            sub_features += f;
            sub_indices += i;
            let full = crate::sampler::QuerySample {
                subtrees: vec![crate::sampler::full_tree_sample(&tree)],
            };
            let ft = crate::sampler::to_tensor(
                &full,
                &tree,
                &vocab,
                &embedder,
                report.max_typed_nodes,
            )
            .unwrap();
            full_features += ft.element_count().0;
        }
        assert_eq!(report.sub_features, sub_features);
        assert_eq!(report.sub_indices, sub_indices);
        assert_eq!(report.full_features, full_features);
        let expected =
            report.full_features as f64 / report.sub_features as f64;
        assert!((report.reduction_factor - expected).abs() < 1e-12);
    }

    #[test]
    fn cost_projection_examples() {
        assert_eq!(cost_projection(600.0, 0, 4.23), 0.0);
        let c = cost_projection(600.0, 49, 4.23);
        assert!((c - 34.54).abs() < 0.01, "got {c}");
    }

    #[test]
    fn drift_examples() {
        let a = Workload::new(vec![trace("a", 2, 2.0)], "t");
        assert_eq!(table_drift(&a, &a).unwrap(), 0.0);
        let mut traces = Vec::new();
        for i in 0..10 {
            let mut t = trace(&format!("q{i}"), 1, 2.0);
            t.root.table = Some(format!("t{i}"));
            traces.push(t);
        }
        let reference = Workload::new(traces.clone(), "t");
        let mut future_traces = traces;
        future_traces[0].root.table = Some("brand_new".into());
        let future = Workload::new(future_traces, "t");
        let drift = table_drift(&reference, &future).unwrap();
        assert!((drift - 10.0).abs() < 1e-12);
    }
}
