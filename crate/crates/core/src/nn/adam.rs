//! Adam with bias correction over the model's canonical tensor order.

use super::model::ModelGrads;
use super::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &mut ModelParams) -> Self {
        let sizes: Vec<usize> = params.param_slices_mut().iter().map(|s| s.len()).collect();
        Adam {
            learning_rate,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelGrads) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let grad_slices = grads.slices();
        let mut param_slices = params.param_slices_mut();
        assert_eq!(grad_slices.len(), param_slices.len());
        for ((p, g), (m, v)) in param_slices
            .iter_mut()
            .zip(grad_slices)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let arch = ArchConfig {
            conv_channels: [2, 2, 2],
            dense_units: [2, 2],
            dropout_rate: 0.0,
            use_batchnorm: false,
        };
        let mut params = ModelParams::init(&arch, 3, 1, 0).unwrap();
        let before = params.conv[0].w_t[(0, 0)];
        let mut opt = Adam::new(0.01, &mut params);
        // Synthetic gradient: 1.0 everywhere. With bias correction the
        // first Adam step is exactly -lr * sign(g).
        let mut grads = params.clone();
        for slice in grads.param_slices_mut() {
            slice.fill(1.0);
        }
        let grads = crate::nn::model::ModelGrads {
            conv: grads
                .conv
                .iter()
                .map(|l| crate::nn::model::ConvGradSet {
                    w_t: l.w_t.clone(),
                    w_l: l.w_l.clone(),
                    w_r: l.w_r.clone(),
                    b: l.b.clone(),
                })
                .collect(),
            dense1: crate::nn::model::DenseGradSet {
                w: grads.dense1.w.clone(),
                b: grads.dense1.b.clone(),
            },
            dense2: crate::nn::model::DenseGradSet {
                w: grads.dense2.w.clone(),
                b: grads.dense2.b.clone(),
            },
            output: crate::nn::model::DenseGradSet {
                w: grads.output.w.clone(),
                b: grads.output.b.clone(),
            },
            bn1: None,
            bn2: None,
        };
        opt.step(&mut params, &grads);
        let after = params.conv[0].w_t[(0, 0)];
        let delta = before - after;
        assert!((delta - 0.01).abs() < 1e-9, "delta {delta}");
    }
}
