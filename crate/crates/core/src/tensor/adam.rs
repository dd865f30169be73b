use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moment buffers are sized on construction and
/// must keep matching the parameter list they were built for.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. A zero gradient leaves the
    /// corresponding parameter (and its moments) unchanged.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::vector(&[1.0, -2.0, 0.5])];
        let g = vec![Tensor::vector(&[3.0, -0.01, 0.0])];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        adam.step(&mut p, &g).unwrap();
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - -1.9).abs() < 1e-5);
        assert_eq!(d[2], 0.5, "zero gradient leaves the parameter untouched");
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut p = vec![Tensor::vector(&[0.0])];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..200 {
            let w = p[0].data()[0];
            let g = vec![Tensor::vector(&[2.0 * (w - 3.0)])];
            adam.step(&mut p, &g).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 0.1, "w = {}", p[0].data()[0]);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut p = vec![Tensor::vector(&[0.0, 1.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &[Tensor::vector(&[0.0])]).is_err());
        assert_eq!(adam.steps(), 0);
    }
}
