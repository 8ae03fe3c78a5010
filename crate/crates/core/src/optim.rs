//! Flat-vector optimizers applied identically on every worker.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// Adam denominator fuzz.
    pub eps: f64,
    /// SGD momentum; 0 disables the velocity buffer.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.0,
        }
    }
}

/// Optimizer state over one flat parameter vector.
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, param_len: usize) -> Self {
        let m_len = match cfg.kind {
            OptimizerKind::Adam => param_len,
            OptimizerKind::Sgd if cfg.momentum != 0.0 => param_len,
            OptimizerKind::Sgd => 0,
        };
        let v_len = match cfg.kind {
            OptimizerKind::Adam => param_len,
            OptimizerKind::Sgd => 0,
        };
        Optimizer {
            cfg,
            step: 0,
            m: vec![0.0; m_len],
            v: vec![0.0; v_len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `params` and `grads` must have the
    /// length the optimizer was created with.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "param/grad length mismatch");
        self.step += 1;
        let lr = self.cfg.learning_rate;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                if self.cfg.momentum != 0.0 {
                    let mu = self.cfg.momentum;
                    for i in 0..params.len() {
                        self.m[i] = mu * self.m[i] + grads[i];
                        params[i] -= lr * self.m[i];
                    }
                } else {
                    for i in 0..params.len() {
                        params[i] -= lr * grads[i];
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                let bc1 = 1.0 - b1.powi(self.step as i32);
                let bc2 = 1.0 - b2.powi(self.step as i32);
                for i in 0..params.len() {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgd(lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: lr,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(sgd(0.1), 1);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0]);
        assert!((p[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude_and_sign() {
        // closed form: m_hat = g, v_hat = g^2, update = lr * g/(|g| + eps)
        let cfg = OptimizerConfig::default();
        let lr = cfg.learning_rate;
        for &g in &[3.0, -0.2, 1e-3] {
            let mut opt = Optimizer::new(cfg.clone(), 1);
            let mut p = vec![0.0];
            opt.step(&mut p, &[g]);
            let expected = -lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15, "g={g}");
            assert_eq!(p[0].signum(), -g.signum());
            assert!((p[0].abs() - lr).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = vec![1.5, -2.5];
        let mut opt = Optimizer::new(sgd(0.1), 2);
        opt.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, vec![1.5, -2.5]);

        let mut opt = Optimizer::new(OptimizerConfig::default(), 2);
        let mut p = vec![1.5, -2.5];
        opt.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, vec![1.5, -2.5]);
    }
}
