//! Momentum SGD and Adam, the two update rules used for training.

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerSpec {
    SgdMomentum {
        lr: f32,
        momentum: f32,
        weight_decay: f32,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

impl OptimizerSpec {
    pub fn sgd(lr: f32, momentum: f32) -> Self {
        OptimizerSpec::SgdMomentum {
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn adam(lr: f32, weight_decay: f32) -> Self {
        OptimizerSpec::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn lr(&self) -> f32 {
        match self {
            OptimizerSpec::SgdMomentum { lr, .. } | OptimizerSpec::Adam { lr, .. } => *lr,
        }
    }

    pub fn set_lr(&mut self, new_lr: f32) {
        match self {
            OptimizerSpec::SgdMomentum { lr, .. } | OptimizerSpec::Adam { lr, .. } => *lr = new_lr,
        }
    }
}

enum Slot {
    Sgd {
        velocity: Vec<f32>,
    },
    Adam {
        m: Vec<f32>,
        v: Vec<f32>,
        t: u64,
    },
}

/// One optimizer instance per model; slots are keyed by the parameter's
/// position in the model's canonical visit order and allocated lazily.
pub struct Optimizer {
    pub spec: OptimizerSpec,
    slots: Vec<Option<Slot>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Optimizer {
            spec,
            slots: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        index: usize,
        param: &mut Tensor,
        grad: &[f32],
    ) -> Result<(), TensorError> {
        if grad.len() != param.numel() {
            return Err(TensorError::OptimizerShape {
                state: vec![grad.len()],
                param: param.shape().to_vec(),
            });
        }
        if self.slots.len() <= index {
            self.slots.resize_with(index + 1, || None);
        }
        let n = param.numel();
        match self.spec {
            OptimizerSpec::SgdMomentum {
                lr,
                momentum,
                weight_decay,
            } => {
                let slot = self.slots[index].get_or_insert_with(|| Slot::Sgd {
                    velocity: vec![0.0; n],
                });
                let Slot::Sgd { velocity } = slot else {
                    return Err(TensorError::OptimizerShape {
                        state: vec![0],
                        param: param.shape().to_vec(),
                    });
                };
                if velocity.len() != n {
                    return Err(TensorError::OptimizerShape {
                        state: vec![velocity.len()],
                        param: param.shape().to_vec(),
                    });
                }
                let p = param.data_mut();
                for i in 0..n {
                    let g = grad[i] + weight_decay * p[i];
                    velocity[i] = momentum * velocity[i] + g;
                    p[i] -= lr * velocity[i];
                }
            }
            OptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let slot = self.slots[index].get_or_insert_with(|| Slot::Adam {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                });
                let Slot::Adam { m, v, t } = slot else {
                    return Err(TensorError::OptimizerShape {
                        state: vec![0],
                        param: param.shape().to_vec(),
                    });
                };
                if m.len() != n {
                    return Err(TensorError::OptimizerShape {
                        state: vec![m.len()],
                        param: param.shape().to_vec(),
                    });
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                let p = param.data_mut();
                for i in 0..n {
                    let g = grad[i] + weight_decay * p[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_momentum_is_plain_descent() {
        let mut opt = Optimizer::new(OptimizerSpec::sgd(0.1, 0.0));
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        opt.step(0, &mut p, &[0.5, -1.0]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 + 0.1]);
    }

    #[test]
    fn sgd_momentum_matches_scalar_recurrence() {
        // v_{t} = mu v_{t-1} + g; p_{t} = p_{t-1} - lr v_t, with g = 1 fixed
        let (mu, lr) = (0.9f32, 0.1f32);
        let mut opt = Optimizer::new(OptimizerSpec::sgd(lr, mu));
        let mut p = Tensor::scalar(0.0);
        let (mut vo, mut po) = (0.0f32, 0.0f32);
        for _ in 0..3 {
            opt.step(0, &mut p, &[1.0]).unwrap();
            vo = mu * vo + 1.0;
            po -= lr * vo;
        }
        assert!((p.item() - po).abs() < 1e-7, "{} vs {}", p.item(), po);
    }

    #[test]
    fn adam_constant_gradient_approaches_signed_lr_step() {
        let lr = 0.01f32;
        let mut opt = Optimizer::new(OptimizerSpec::adam(lr, 0.0));
        let mut p = Tensor::scalar(0.0);
        let mut prev = 0.0f32;
        let mut last_step = 0.0f32;
        for _ in 0..500 {
            opt.step(0, &mut p, &[3.0]).unwrap();
            last_step = prev - p.item();
            prev = p.item();
        }
        // bias-corrected limit: step size -> lr * sign(g)
        assert!((last_step - lr).abs() < 1e-4, "step {last_step}");
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let mut opt = Optimizer::new(OptimizerSpec::sgd(0.1, 0.9));
        let mut p = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        assert!(opt.step(0, &mut p, &[1.0]).is_err());
    }
}
