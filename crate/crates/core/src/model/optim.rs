use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParameters, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm cap; non-positive disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 1.0 }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ModelParameters<T>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|x| {
            let x = x.to_f64().unwrap();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from(max_norm / norm).unwrap();
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ModelParameters<T>,
    pub v: ModelParameters<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, model: &ModelConfig) -> Self {
        Self { config, step: 0, m: ModelParameters::zeros(model), v: ModelParameters::zeros(model) }
    }

    /// Clips, then applies one bias-corrected update. Returns the unclipped norm.
    pub fn update(&mut self, params: &mut ModelParameters<T>, grads: &mut ModelParameters<T>) -> f64 {
        let norm = clip_grad_norm(grads, self.config.clip);
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2) = (T::from(c.beta1).unwrap(), T::from(c.beta2).unwrap());
        let (lr, eps) = (T::from(lr).unwrap(), T::from(c.eps).unwrap());
        let one = T::one();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 1, d_e: 4, d_ff: 4, n_heads: 1, vocab_size: 3, ..Default::default() }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = ModelParameters::<f64>::zeros(&cfg());
        g.tok_emb[0] = 3.0;
        g.lnf_bias[1] = 4.0;
        let norm = clip_grad_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((g.tok_emb[0] - 0.6).abs() < 1e-12);
        assert!((g.lnf_bias[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ModelParameters::<f64>::zeros(&cfg());
        let mut g = ModelParameters::<f64>::zeros(&cfg());
        g.tok_emb[2] = 0.5;
        g.tok_emb[3] = -0.01;
        let mut opt = Adam::new(AdamConfig::default(), &cfg());
        opt.update(&mut p, &mut g);
        assert!((p.tok_emb[2] + 1e-3).abs() < 1e-8);
        assert!((p.tok_emb[3] - 1e-3).abs() < 1e-6);
        assert_eq!(p.tok_emb[0], 0.0);
    }
}
