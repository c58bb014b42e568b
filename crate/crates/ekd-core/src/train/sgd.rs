//! SGD with momentum and weight decay, plus the step learning-rate schedule.

use crate::error::{EkdError, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

use super::TrainConfig;

/// Learning rate at `epoch`: the initial rate times the decay factor once
/// per listed decay epoch that has been reached. Piecewise constant and
/// non-increasing.
pub fn lr_at(epoch: u32, config: &TrainConfig) -> f64 {
    let decays = config
        .lr_decay_epochs
        .iter()
        .filter(|&&e| e <= epoch)
        .count();
    config.lr_initial * config.lr_decay_factor.powi(decays as i32)
}

/// Per-parameter velocity state for one stream's optimizer.
///
/// Update rule: `v <- momentum * v + (grad + weight_decay * param)`,
/// then `param <- param - lr * v`. Weight decay skips parameters flagged
/// as decay-exempt (batch-norm scale/shift).
#[derive(Debug, Clone)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<f32>>,
}

impl SgdState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Param<f32>],
        grads: &[Tensor<f32>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(EkdError::Contract(format!(
                "sgd_step: {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(EkdError::Contract(
                "sgd_step: parameter set changed size mid-run".into(),
            ));
        }
        let momentum = self.momentum as f32;
        let lr = lr as f32;
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if grad.shape() != param.value.shape() {
                return Err(EkdError::Contract(format!(
                    "sgd_step: grad shape {:?} does not match param {} {:?}",
                    grad.shape(),
                    param.name,
                    param.value.shape()
                )));
            }
            let wd = if param.decay {
                self.weight_decay as f32
            } else {
                0.0
            };
            for ((p, g), v) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(vel.data_mut())
            {
                *v = momentum * *v + (*g + wd * *p);
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32) -> Param<f32> {
        Param {
            name: "w".into(),
            value: Tensor::from_vec(vec![1], vec![v]).unwrap(),
            decay: true,
        }
    }

    fn grad(v: f32) -> Tensor<f32> {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn vanilla_step() {
        let mut p = param(0.0);
        let mut sgd = SgdState::new(0.0, 0.0);
        sgd.step(&mut [&mut p], &[grad(1.0)], 0.1).unwrap();
        assert!((p.value.data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn two_momentum_steps_hand_iterated() {
        // momentum 0.9, lr 0.1, constant grad 1 from 0:
        // v1 = 1, p = -0.1; v2 = 1.9, p = -0.29
        let mut p = param(0.0);
        let mut sgd = SgdState::new(0.9, 0.0);
        sgd.step(&mut [&mut p], &[grad(1.0)], 0.1).unwrap();
        sgd.step(&mut [&mut p], &[grad(1.0)], 0.1).unwrap();
        assert!((p.value.data()[0] + 0.29).abs() < 1e-6, "{}", p.value.data()[0]);
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut p = param(0.7);
        let mut sgd = SgdState::new(0.9, 0.0);
        for _ in 0..3 {
            sgd.step(&mut [&mut p], &[grad(0.0)], 0.1).unwrap();
        }
        assert_eq!(p.value.data()[0], 0.7);
    }

    #[test]
    fn decay_exempt_param_sees_no_weight_decay() {
        let mut p = param(1.0);
        p.decay = false;
        let mut sgd = SgdState::new(0.0, 0.5);
        sgd.step(&mut [&mut p], &[grad(0.0)], 0.1).unwrap();
        assert_eq!(p.value.data()[0], 1.0);
        let mut q = param(1.0);
        let mut sgd2 = SgdState::new(0.0, 0.5);
        sgd2.step(&mut [&mut q], &[grad(0.0)], 0.1).unwrap();
        assert!((q.value.data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn grad_count_mismatch_is_contract_error() {
        let mut p = param(0.0);
        let mut sgd = SgdState::new(0.0, 0.0);
        assert!(sgd.step(&mut [&mut p], &[], 0.1).is_err());
    }
}
