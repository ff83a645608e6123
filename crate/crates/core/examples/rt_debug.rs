use prestroid::embed::W2VHyper;
use prestroid::eval::*;
use prestroid::nn::{ArchConfig, TrainConfig};
use prestroid::pipeline::*;
use prestroid::plan::{generate_synthetic_workload, plan_stats, SynthConfig};
use prestroid::sampler::SamplerConfig;

fn main() {
    let synth = SynthConfig { count: 2000, ..Default::default() };
    let w = generate_synthetic_workload(&synth, 7).unwrap();
    let config = PipelineConfig {
        sampler: SamplerConfig::new(15, 3, 5).unwrap(),
        full_tree: false,
        p_f: 32,
        window: 5,
        min_count: 10,
        w2v: W2VHyper::default(),
        arch: ArchConfig::small(),
        train: TrainConfig { max_epochs: 100, patience: 10, learning_rate: 1e-3, ..Default::default() },
        split_ratios: [8, 1, 1],
        seed: 7,
    };
    let out = train_pipeline(w, &config).unwrap();
    let (train, val, _) = &out.splits;
    let logbin = log_binning_fit(train, 20).unwrap();
    let actuals: Vec<f64> = val.traces.iter().map(|t| t.total_cpu_min).collect();
    let lb_preds: Vec<f64> = val.traces.iter().map(|t| logbin.predict(t)).collect();
    let model_preds = predict_workload(&out.bundle, &val.traces).unwrap();

    // error decomposition by actual-cost band
    let bands = [(1.0, 1.01), (1.01, 3.0), (3.0, 8.0), (8.0, 20.0), (20.0, 59.9), (59.9, 61.0)];
    for (lo, hi) in bands {
        let mut m_se = 0.0; let mut l_se = 0.0; let mut n = 0usize;
        let mut nc_min = usize::MAX; let mut nc_max = 0usize;
        for ((t, &a), (&mp, &lp)) in val.traces.iter().zip(&actuals).zip(model_preds.iter().zip(&lb_preds)) {
            if a >= lo && a < hi {
                m_se += (mp - a) * (mp - a);
                l_se += (lp - a) * (lp - a);
                n += 1;
                let nc = plan_stats(&t.root).node_count;
                nc_min = nc_min.min(nc); nc_max = nc_max.max(nc);
            }
        }
        if n > 0 {
            println!("cost [{lo:5.1},{hi:5.1}): n {n:3} nc [{nc_min},{nc_max}] | model SSE {m_se:8.1} logbin SSE {l_se:8.1}");
        }
    }
    let m = mse_minutes(&model_preds, &actuals).unwrap();
    let l = mse_minutes(&lb_preds, &actuals).unwrap();
    println!("total: model {m:.2} logbin {l:.2} ratio {:.3} (epochs {})", m / l, out.history.len());
}
