use crate::model::ModelParams;

/// Adam with a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let grads = grads.tensors();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(&grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, VelocityModel};
    use crate::world::WorldSpec;

    #[test]
    fn first_step_moves_each_parameter_by_lr_against_gradient_sign() {
        let m = VelocityModel::new(&WorldSpec::default(), ModelConfig::default(), 0).unwrap();
        let mut params = m.params.clone();
        let mut grads = params.zeros_like();
        grads.trunk.output.bias[0] = 3.0;
        grads.trunk.output.bias[1] = -0.5;
        let mut opt = Adam::new(&params, 0.01);
        opt.step(&mut params, &grads);
        assert!((params.trunk.output.bias[0] + 0.01).abs() < 1e-9);
        assert!((params.trunk.output.bias[1] - 0.01).abs() < 1e-9);
        assert_eq!(params.trunk.layers, m.params.trunk.layers);
    }
}
