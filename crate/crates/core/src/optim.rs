use log::warn;

use crate::param::Parameter;

/// Bias-corrected ADAM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// One update of every parameter that holds a gradient. Gradients are
    /// cleared afterwards; parameters without one are skipped with a warning.
    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            let Some(grad) = p.grad() else {
                warn!("adam: parameter {} has no gradient, skipped", p.name());
                continue;
            };
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let mut data = p.data().to_vec();
            for (i, g) in grad.iter().enumerate() {
                let m = self.beta1 * p.adam_m[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.adam_v[i] + (1.0 - self.beta2) * g * g;
                p.adam_m[i] = m;
                p.adam_v[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.set_data(data).expect("adam keeps the parameter size");
        }
    }
}
