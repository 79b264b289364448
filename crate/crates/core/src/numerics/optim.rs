use std::collections::HashMap;

use super::{NumericsError, Tensor};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    /// β₂ = 0.95 as in the LightningDiT recipe.
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Starts a new step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Replaces `param` with its updated value (a fresh trainable leaf).
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<(), NumericsError> {
        if grad.len() != param.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "adamw",
                lhs: param.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let n = param.numel();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut data = param.to_vec();
        for i in 0..n {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
        }
        *param = Tensor::param(data, param.shape())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = Tensor::param(vec![3.0, -2.0], &[2]).unwrap();
        let mut opt = AdamW::new(0.1);
        for _ in 0..500 {
            let loss = x.square().sum();
            let g = crate::numerics::gradients(&loss).unwrap().get_or_zeros(&x);
            opt.begin_step();
            opt.update("x", &mut x, &g).unwrap();
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{:?}", x.data());
    }

    #[test]
    fn zero_gradient_leaves_fresh_param_unchanged() {
        let mut x = Tensor::param(vec![1.5], &[1]).unwrap();
        let mut opt = AdamW::new(0.1);
        opt.begin_step();
        opt.update("x", &mut x, &[0.0]).unwrap();
        assert_eq!(x.data(), &[1.5]);
    }
}
