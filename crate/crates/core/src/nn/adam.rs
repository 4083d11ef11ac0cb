use serde::{Deserialize, Serialize};

use super::mlp::{Dense, Gradients, Mlp};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected adaptive moment estimation, one instance per network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(mlp: &Mlp, config: AdamConfig) -> Self {
        let zeros = || Gradients::zeros_like(mlp).layers;
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Non-finite gradients leave the network
    /// untouched and return an error.
    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) -> Result<()> {
        check_dim("adam layers", self.m.len(), grads.layers.len())?;
        check_dim("network layers", mlp.layers().len(), grads.layers.len())?;
        for (g, m) in grads.layers.iter().zip(&self.m) {
            if g.weight.dim() != m.weight.dim() || g.bias.dim() != m.bias.dim() {
                return Err(Error::Dimension {
                    context: "adam gradient shape",
                    expected: m.weight.len(),
                    got: g.weight.len(),
                });
            }
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        };
        for (((layer, g), m), v) in mlp
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, g), m), v) in layer
                .weight
                .iter_mut()
                .zip(g.weight.iter())
                .zip(m.weight.iter_mut())
                .zip(v.weight.iter_mut())
            {
                update(p, *g, m, v);
            }
            for (((p, g), m), v) in layer
                .bias
                .iter_mut()
                .zip(g.bias.iter())
                .zip(m.bias.iter_mut())
                .zip(v.bias.iter_mut())
            {
                update(p, *g, m, v);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Head};
    use ndarray::array;

    fn scalar_net(w: f64) -> Mlp {
        let layer = Dense {
            weight: array![[w]],
            bias: array![0.0],
        };
        Mlp::from_layers(vec![layer], Activation::Tanh, Head::Identity).unwrap()
    }

    fn grad_of(w_grad: f64) -> Gradients {
        Gradients {
            layers: vec![Dense {
                weight: array![[w_grad]],
                bias: array![0.0],
            }],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar_net(0.7);
        let mut adam = Adam::new(&net, AdamConfig::default());
        adam.step(&mut net, &grad_of(0.0)).unwrap();
        assert_eq!(net.params_flat(), vec![0.7, 0.0]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        // m̂ = g and v̂ = g² after bias correction, so Δ = −lr·g/(|g| + ε).
        let mut net = scalar_net(1.0);
        let mut adam = Adam::new(&net, AdamConfig::with_lr(0.01));
        adam.step(&mut net, &grad_of(2.5)).unwrap();
        let expected = 1.0 - 0.01 * 2.5 / (2.5 + 1e-8);
        assert!((net.params_flat()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut net = scalar_net(1.0);
        let mut adam = Adam::new(&net, AdamConfig::with_lr(0.01));
        let mut converged_at = None;
        for i in 0..2000 {
            let w = net.params_flat()[0];
            adam.step(&mut net, &grad_of(2.0 * w)).unwrap();
            if net.params_flat()[0].abs() < 1e-2 && converged_at.is_none() {
                converged_at = Some(i);
            }
        }
        assert!(converged_at.is_some());
        assert!(net.params_flat()[0].abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut net = scalar_net(0.3);
        let mut adam = Adam::new(&net, AdamConfig::default());
        assert!(matches!(adam.step(&mut net, &grad_of(f64::NAN)), Err(Error::NonFinite(_))));
        assert_eq!(net.params_flat()[0], 0.3);
        assert_eq!(adam.steps_taken(), 0);
    }
}
