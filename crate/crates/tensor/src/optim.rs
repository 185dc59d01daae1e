//! Parameter update rules: Adadelta for support-set adaptation and SGD with
//! momentum for backbone pretraining.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Per-parameter Adadelta state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    /// Running average of squared gradients.
    pub accum_grad_sq: Tensor,
    /// Running average of squared updates.
    pub accum_update_sq: Tensor,
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdadeltaState {
    /// Fresh state (zero accumulators) for a parameter of `shape`.
    pub fn new(shape: &[usize], rho: f64, eps: f64, lr: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(TensorError::invalid("adadelta", format!("rho {rho} not in (0,1)")));
        }
        if !(eps > 0.0) {
            return Err(TensorError::invalid("adadelta", format!("eps {eps} must be positive")));
        }
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(TensorError::invalid("adadelta", format!("invalid lr {lr}")));
        }
        Ok(AdadeltaState {
            accum_grad_sq: Tensor::zeros(shape.to_vec()),
            accum_update_sq: Tensor::zeros(shape.to_vec()),
            rho,
            eps,
            lr,
        })
    }

    /// Defaults `rho = 0.9`, `eps = 1e-6`.
    pub fn with_lr(shape: &[usize], lr: f64) -> Result<Self> {
        Self::new(shape, 0.9, 1e-6, lr)
    }
}

/// One Adadelta update of `param` in place.
///
/// A gradient containing NaN or infinity is rejected before anything is
/// modified.
pub fn adadelta_step(param: &mut Tensor, grad: &Tensor, state: &mut AdadeltaState) -> Result<()> {
    if param.shape() != grad.shape() || state.accum_grad_sq.shape() != param.shape() {
        return Err(TensorError::shape(
            "adadelta_step",
            format!("{:?}", param.shape()),
            grad.shape(),
        ));
    }
    if !grad.is_finite() {
        return Err(TensorError::NonFinite("adadelta_step gradient"));
    }
    let (rho, eps, lr) = (state.rho, state.eps, state.lr);
    let p = param.data_mut();
    let eg = state.accum_grad_sq.data_mut();
    let ex = state.accum_update_sq.data_mut();
    for (k, &g) in grad.data().iter().enumerate() {
        eg[k] = rho * eg[k] + (1.0 - rho) * g * g;
        let delta = -((ex[k] + eps).sqrt() / (eg[k] + eps).sqrt()) * g;
        ex[k] = rho * ex[k] + (1.0 - rho) * delta * delta;
        p[k] += lr * delta;
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Tensor,
}

impl SgdMomentum {
    pub fn new(shape: &[usize], momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: Tensor::zeros(shape.to_vec()),
        }
    }

    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() || self.velocity.shape() != param.shape() {
            return Err(TensorError::shape(
                "sgd_step",
                format!("{:?}", param.shape()),
                grad.shape(),
            ));
        }
        if !grad.is_finite() {
            return Err(TensorError::NonFinite("sgd_step gradient"));
        }
        let p = param.data_mut();
        let v = self.velocity.data_mut();
        for (k, &g) in grad.data().iter().enumerate() {
            let g = g + self.weight_decay * p[k];
            v[k] = self.momentum * v[k] + g;
            p[k] -= lr * v[k];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::scalar(0.0);
        let mut s = AdadeltaState::new(&[], 0.9, 1e-6, 1.0).unwrap();
        adadelta_step(&mut p, &Tensor::scalar(1.0), &mut s).unwrap();
        let expect = -(1e-6f64).sqrt() / (0.1f64 + 1e-6).sqrt();
        assert!((p.item() - expect).abs() < 1e-18);
        assert!((p.item() + 3.1623e-3).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_param_and_decays_accumulators() {
        let mut p = Tensor::new([2], vec![1.5, -2.0]).unwrap();
        let before = p.clone();
        let mut s = AdadeltaState::with_lr(&[2], 1.0).unwrap();
        s.accum_grad_sq = Tensor::full([2], 4.0);
        s.accum_update_sq = Tensor::full([2], 2.0);
        adadelta_step(&mut p, &Tensor::zeros([2]), &mut s).unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(s.accum_grad_sq.data(), &[3.6, 3.6]);
        assert_eq!(s.accum_update_sq.data(), &[1.8, 1.8]);
    }

    #[test]
    fn second_step_is_larger() {
        let mut p = Tensor::scalar(0.0);
        let mut s = AdadeltaState::with_lr(&[], 1.0).unwrap();
        adadelta_step(&mut p, &Tensor::scalar(1.0), &mut s).unwrap();
        let first = p.item().abs();
        adadelta_step(&mut p, &Tensor::scalar(1.0), &mut s).unwrap();
        let second = p.item().abs() - first;
        assert!(second > first, "{second} <= {first}");
    }

    #[test]
    fn zero_lr_updates_accumulators_only() {
        let mut p = Tensor::scalar(0.25);
        let mut s = AdadeltaState::with_lr(&[], 0.0).unwrap();
        adadelta_step(&mut p, &Tensor::scalar(-3.0), &mut s).unwrap();
        assert_eq!(p.item(), 0.25);
        assert!(s.accum_grad_sq.item() > 0.0 && s.accum_update_sq.item() > 0.0);
    }

    #[test]
    fn nan_gradient_rejected_without_mutation() {
        let mut p = Tensor::scalar(1.0);
        let mut s = AdadeltaState::with_lr(&[], 1.0).unwrap();
        let before = s.clone();
        assert!(adadelta_step(&mut p, &Tensor::scalar(f64::NAN), &mut s).is_err());
        assert_eq!(p.item(), 1.0);
        assert_eq!(s, before);
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(AdadeltaState::new(&[1], 1.0, 1e-6, 1.0).is_err());
        assert!(AdadeltaState::new(&[1], 0.9, 0.0, 1.0).is_err());
        assert!(AdadeltaState::new(&[1], 0.9, 1e-6, -1.0).is_err());
    }

    #[test]
    fn sgd_zero_lr_is_noop() {
        let mut p = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let mut opt = SgdMomentum::new(&[2], 0.9, 7e-4);
        opt.step(&mut p, &Tensor::ones([2]), 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
    }
}
