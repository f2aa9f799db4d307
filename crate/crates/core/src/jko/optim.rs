//! AdamW with decoupled weight decay and cosine annealing with warm restarts.

use crate::field::{FieldGradient, VelocityField};

/// Learning-rate schedule (eta_max, eta_min, T_0, T_max).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrainingSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    /// Iterations until each restart (no period doubling).
    pub t0: usize,
    /// Total optimizer iterations.
    pub t_max: usize,
}

impl TrainingSchedule {
    /// eta(t) = eta_min + (eta_max - eta_min)(1 + cos(pi t_cur / T_0)) / 2,
    /// restarting every T_0 iterations.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        let t_cur = (iter % self.t0) as f64;
        self.eta_min
            + 0.5 * (self.eta_max - self.eta_min)
                * (1.0 + (std::f64::consts::PI * t_cur / self.t0 as f64).cos())
    }
}

/// AdamW state: first/second moment accumulators, step counter, decoupled
/// weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(field: &VelocityField) -> Self {
        OptimizerState {
            m: vec![0.0; field.n_params()],
            v: vec![0.0; field.n_params()],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One decoupled-weight-decay Adam update at the given learning rate.
    pub fn step(&mut self, field: &mut VelocityField, grad: &FieldGradient, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let params = field.params_mut();
        for k in 0..params.len() {
            let g = grad.data[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[k] / bc1;
            let vhat = self.v[k] / bc2;
            params[k] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[k]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cosine_schedule_endpoints_and_restart() {
        let s = TrainingSchedule {
            eta_max: 1e-2,
            eta_min: 1e-3,
            t0: 20,
            t_max: 100,
        };
        assert_relative_eq!(s.learning_rate(0), 1e-2);
        assert_relative_eq!(s.learning_rate(20), 1e-2); // restart
        assert_relative_eq!(s.learning_rate(10), 0.5 * (1e-2 + 1e-3));
        assert!(s.learning_rate(19) > s.learning_rate(10) - 1e-2);
        assert!(s.learning_rate(19) < s.learning_rate(10));
    }

    #[test]
    fn adamw_descends_quadratic() {
        // minimize |p|^2 on the final bias parameters
        let mut field = VelocityField::zeros(2, 2, 4);
        let n = field.n_params();
        field.params_mut()[n - 1] = 1.0;
        field.params_mut()[n - 2] = -2.0;
        let mut opt = OptimizerState::new(&field);
        let schedule = TrainingSchedule {
            eta_max: 2e-2,
            eta_min: 1e-5,
            t0: 1500,
            t_max: 1500,
        };
        for t in 0..1500 {
            let mut grad = FieldGradient::zeros_like(&field);
            for k in 0..n {
                grad.data[k] = 2.0 * field.params()[k];
            }
            opt.step(&mut field, &grad, schedule.learning_rate(t));
        }
        assert!(field.params()[n - 1].abs() < 5e-3, "{}", field.params()[n - 1]);
        assert!(field.params()[n - 2].abs() < 5e-3, "{}", field.params()[n - 2]);
    }
}
