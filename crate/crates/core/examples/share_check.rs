use prestroid::plan::*;
fn main() {
    let config = SynthConfig { count: 2000, ..Default::default() };
    let mut worst = f64::MAX;
    for seed in 0u64..12 {
        let w = generate_synthetic_workload(&config, seed).unwrap();
        let mut ncs: Vec<usize> = w.traces.iter().map(|t| plan_stats(&t.root).node_count).collect();
        ncs.sort_unstable();
        let (_, share) = workload_distribution(&w, 1.0).unwrap();
        let ratio = ncs[ncs.len()-1] as f64 / ncs[ncs.len()/2] as f64;
        assert!(ratio >= 20.0);
        if share < worst { worst = share; }
    }
    println!("worst share over 12 seeds: {worst:.3}");
}
