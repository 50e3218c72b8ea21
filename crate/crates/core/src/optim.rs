//! SGD with classic (heavy-ball) momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// `buf = momentum * buf + grad + weight_decay * param; param -= lr * buf`, then
/// zeroes every gradient.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves parameters and buffers untouched.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    for p in params.iter() {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {} at element {i} ({})", p.name, p.grad[i]),
            });
        }
    }
    for p in params.iter_mut() {
        let values = p.value.data_mut();
        for ((w, g), buf) in values.iter_mut().zip(p.grad.iter_mut()).zip(p.momentum.iter_mut()) {
            *buf = momentum * *buf + *g + weight_decay * *w;
            *w -= lr * *buf;
            *g = 0.0;
        }
    }
    Ok(())
}
