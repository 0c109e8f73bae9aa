//! SGD with heavy-ball momentum, L2 weight decay and a cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

impl Schedule {
    /// Learning rate at step `t` of `total`.
    pub fn lr(self, t: usize, total: usize, lr0: f64) -> f64 {
        match self {
            Schedule::Cosine => cosine_lr(t, total, lr0),
            Schedule::Constant => lr0,
        }
    }
}

/// `0.5·lr0·(1 + cos(π t / T))`; `T = 0` yields `lr0`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = t.min(total) as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}

/// One in-place update of a single tensor:
/// `v ← μv + (g + λp)`, `p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    velocity: &mut Tensor<T>,
    grad: &Tensor<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    param.expect_same_shape(grad, "sgd_update")?;
    param.expect_same_shape(velocity, "sgd_update")?;
    for ((p, v), &g) in param
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut().iter_mut())
        .zip(grad.data())
    {
        *v = momentum * *v + (g + weight_decay * *p);
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Applies [`sgd_step`] to every parameter. `grads` follows the parameter
/// order of `params`.
pub fn sgd_update<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for (p, g) in params.iter_mut().zip(grads) {
        sgd_step(&mut p.value, &mut p.momentum, g, lr, mu, wd)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-16);
        assert_eq!(Schedule::Constant.lr(70, 100, 0.3), 0.3);
    }

    #[test]
    fn plain_and_null_steps() {
        let mut p = Tensor::from_vec([2], vec![1.0f64, -2.0]).unwrap();
        let mut v = Tensor::zeros([2]);
        let g = Tensor::from_vec([2], vec![0.5, 0.25]).unwrap();
        sgd_step(&mut p, &mut v, &g, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);

        let mut p = Tensor::from_vec([1], vec![3.0f64]).unwrap();
        let mut v = Tensor::zeros([1]);
        sgd_step(&mut p, &mut v, &Tensor::zeros([1]), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::<f64>::zeros([2]);
        let mut v = Tensor::zeros([2]);
        assert!(sgd_step(&mut p, &mut v, &Tensor::zeros([3]), 0.1, 0.9, 0.0).is_err());
    }
}
