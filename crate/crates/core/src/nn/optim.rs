use serde::{Deserialize, Serialize};

use super::tensor::Real;
use super::Weights;
use crate::error::{Error, Result};
use super::tensor::Tensor;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<T: Real>(weights: &mut Weights<T>, grads: &[Tensor<T>], opt: &Adam) -> Result<()> {
    if grads.len() != weights.params.len() || grads.iter().zip(&weights.params).any(|(g, p)| g.shape() != p.shape()) {
        return Err(Error::Shape("gradients do not match parameters".into()));
    }
    weights.step += 1;
    let t = weights.step as f64;
    let c1 = T::of(1.0 / (1.0 - opt.beta1.powf(t)));
    let c2 = T::of(1.0 / (1.0 - opt.beta2.powf(t)));
    let (b1, b2) = (T::of(opt.beta1), T::of(opt.beta2));
    let (lr, eps) = (T::of(opt.lr), T::of(opt.eps));
    for (((p, m), v), g) in weights
        .params
        .iter_mut()
        .zip(weights.adam_m.iter_mut())
        .zip(weights.adam_v.iter_mut())
        .zip(grads)
    {
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= lr * (*m * c1) / ((*v * c2).sqrt() + eps);
        }
    }
    Ok(())
}
