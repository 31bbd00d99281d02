//! Adaptive moment estimation with bias correction, over the flat parameter
//! views. Fixed rate, no schedule.

use crate::model::params::Params;

pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Params<f32>,
    v: Params<f32>,
}

impl Adam {
    pub fn new(template: &Params<f32>, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: template.zeros_like(),
            v: template.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (mut p_slices, _) = params.named_slices_mut();
        let (g_slices, _) = grads.named_slices();
        let (mut m_slices, _) = self.m.named_slices_mut();
        let (mut v_slices, _) = self.v.named_slices_mut();
        for i in 0..p_slices.len() {
            let p = &mut p_slices[i];
            let g = &g_slices[i];
            let m = &mut m_slices[i];
            let v = &mut v_slices[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    #[test]
    fn adam_moves_parameters_against_gradient() {
        let cfg = ModelConfig {
            vocab_size: 8,
            d_model: 8,
            num_layers: 1,
            num_heads: 2,
            max_len: 4,
            dropout: 0.0,
            feature_dim: 4,
            seed: 1,
        };
        let mut model = Model::<f32>::init(&cfg).unwrap();
        let before = model.params.to_flat();
        let mut grads = model.params.zeros_like();
        {
            let (mut gs, _) = grads.named_slices_mut();
            gs[0][0] = 1.0;
        }
        let mut opt = Adam::new(&model.params, 1e-2);
        opt.step(&mut model.params, &grads);
        let after = model.params.to_flat();
        assert!(after[0] < before[0], "positive gradient must decrease the parameter");
        // Untouched coordinates stay put.
        assert_eq!(before[1], after[1]);
    }
}
