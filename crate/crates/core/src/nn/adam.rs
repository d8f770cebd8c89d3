//! Adam optimizer with L2 weight decay folded into the gradient.

use super::layers::ParamStore;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> bool {
        self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
    }
}

/// First/second moment state for one parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    cfg: OptimizerConfig,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: OptimizerConfig) -> Self {
        assert!(cfg.validate(), "invalid optimizer configuration");
        Self {
            m: store.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: store.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            t: 0,
            cfg,
        }
    }

    /// One update step; `grads` must be in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), store.params.len(), "gradient count mismatch");
        self.t += 1;
        let t = self.t as f64;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (i, p) in store.params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, x) in p.data.iter_mut().enumerate() {
                let g = grads[i][j] + c.weight_decay * *x;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", 1, 1, vec![5.0]);
        let mut adam = Adam::new(
            &store,
            OptimizerConfig {
                learning_rate: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..200 {
            let x = store.params[0].data[0];
            adam.step(&mut store, &[vec![2.0 * x]]);
        }
        assert!(store.params[0].data[0].abs() < 1e-2);
    }

    #[test]
    fn default_config_matches_training_setup() {
        let c = OptimizerConfig::default();
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.beta2, 0.98);
        assert_eq!(c.epsilon, 1e-8);
        assert_eq!(c.weight_decay, 5e-4);
        assert!(c.validate());
    }
}
