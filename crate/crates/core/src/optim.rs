//! Momentum SGD for model weights.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub velocity: Option<Vec<f32>>,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value,
            velocity: None,
            grad: None,
        }
    }
}

/// `v <- momentum * v + grad + wd * w; w <- w - lr * v`, then clears grads.
///
/// Every parameter must have a gradient; nothing is updated otherwise.
pub fn sgd_step(params: &mut [Parameter], cfg: SgdConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        if grad.shape() != p.value.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                lhs: p.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let velocity = p.velocity.get_or_insert_with(|| vec![0.0; grad.numel()]);
        for ((w, v), g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(grad.data())
        {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= cfg.lr * *v;
        }
    }
    Ok(())
}
