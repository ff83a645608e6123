//! Sub-tree/full-tree convolution equivalence: the layer-3 features of every
//! voted node, computed inside its own sub-tree, must equal the same node's
//! features computed on the whole tree.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prestroid::nn::{tree_conv_layer, Activation, ConvLayer};
use prestroid::otp::{random_opr_tree, NodeId, OtpTree};
use prestroid::sampler::{full_tree_sample, sample_subtrees, SamplerConfig, SubTreeSample};

fn random_layers(dims: &[usize], rng: &mut ChaCha8Rng) -> Vec<ConvLayer> {
    dims.windows(2)
        .map(|w| {
            let (cin, cout) = (w[0], w[1]);
            let mut mat =
                || Array2::from_shape_fn((cout, cin), |_| rng.random::<f64>() * 2.0 - 1.0);
            ConvLayer {
                w_t: mat(),
                w_l: mat(),
                w_r: mat(),
                b: Array1::from_shape_fn(cout, |_| rng.random::<f64>() * 2.0 - 1.0),
            }
        })
        .collect()
}

/// Run the conv stack over one sample slab; returns per-node rows keyed by
/// node id.
fn conv_over_sample(
    tree: &OtpTree,
    sample: &SubTreeSample,
    node_features: &[Vec<f64>],
    layers: &[ConvLayer],
) -> Vec<(NodeId, Vec<f64>)> {
    let f = node_features[0].len();
    let slots = sample.len() + 1;
    let mut features = Array2::zeros((slots, f));
    let mut left = vec![0usize; slots];
    let mut right = vec![0usize; slots];
    for (i, &id) in sample.nodes.iter().enumerate() {
        for (j, &x) in node_features[id].iter().enumerate() {
            features[(i + 1, j)] = x;
        }
        left[i + 1] = sample.left_idx[i];
        right[i + 1] = sample.right_idx[i];
    }
    let mut x = features;
    for layer in layers {
        x = tree_conv_layer(&x, &left, &right, layer, Activation::Relu);
    }
    sample
        .nodes
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, x.row(i + 1).to_vec()))
        .collect()
}

#[test]
fn voted_nodes_match_full_tree_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let f = 6;
    let dims = [f, 8, 8, 8];
    let mut worst: f64 = 0.0;
    for case in 0..60u64 {
        let size = 5 + (case as usize * 17) % 290;
        let tree = random_opr_tree(size, 1000 + case);
        let node_features: Vec<Vec<f64>> = (0..tree.typed_node_count())
            .map(|_| (0..f).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let layers = random_layers(&dims, &mut rng);

        let full = conv_over_sample(&tree, &full_tree_sample(&tree), &node_features, &layers);
        let full_rows: std::collections::HashMap<NodeId, Vec<f64>> = full.into_iter().collect();

        let config = SamplerConfig::new(15, 3, 1).unwrap();
        let samples = sample_subtrees(&tree, &config).unwrap();
        for sample in &samples {
            let rows = conv_over_sample(&tree, sample, &node_features, &layers);
            for ((id, row), &vote) in rows.iter().zip(&sample.votes) {
                if !vote {
                    continue;
                }
                let reference = &full_rows[id];
                for (a, b) in row.iter().zip(reference) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    assert!(worst < 1e-6, "max abs diff {worst}");
}
