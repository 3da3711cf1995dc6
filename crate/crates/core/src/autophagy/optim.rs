//! AdamW with decoupled weight decay and global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: first and second moments per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            ..Default::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients stored on `params`. Parameters without
    /// a gradient are left untouched. Weight decay multiplies parameters by
    /// `1 − lr·wd` before the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::config("optimizer bound to a different parameter list"));
        }
        if params.iter().filter_map(Tensor::grad).flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.steps += 1;
        let c = &self.cfg;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w = *w * decay - c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients by `max_norm / ‖g‖` when the global L2 norm `‖g‖`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(params: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = params
        .iter()
        .filter_map(Tensor::grad)
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(data: Vec<f64>, grad: Vec<f64>) -> Tensor {
        let mut t = Tensor::new(vec![data.len()], data).unwrap().requiring_grad();
        t.accumulate_grad(&grad).unwrap();
        t
    }

    #[test]
    fn clipping_examples() {
        let mut p = [with_grad(vec![0.0, 0.0], vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut p, 1.0).unwrap(), 5.0);
        let g = p[0].grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut p = [with_grad(vec![0.0], vec![0.5])];
        clip_global_norm(&mut p, 1.0).unwrap();
        assert_eq!(p[0].grad().unwrap(), &[0.5]);
        let mut p = [with_grad(vec![0.0], vec![f64::NAN])];
        assert!(clip_global_norm(&mut p, 1.0).is_err());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = [with_grad(vec![1.0, -2.0], vec![0.3, -7.0])];
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&mut p).unwrap();
        // Bias-corrected first step is lr · sign(g) up to eps.
        assert!((p[0].data()[0] - (1.0 - 3e-4)).abs() < 1e-10);
        assert!((p[0].data()[1] - (-2.0 + 3e-4)).abs() < 1e-10);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = [with_grad(vec![2.0], vec![0.0])];
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut p).unwrap();
        assert!((p[0].data()[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = [with_grad(vec![1.0], vec![f64::INFINITY])];
        assert!(matches!(AdamW::default().step(&mut p), Err(Error::NonFinite(_))));
    }
}
