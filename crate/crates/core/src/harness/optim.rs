//! Adam, AdamW and plain SGD over named parameters.

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::{Scalar, Tensor};

use super::config::{OptimizerConfig, OptimizerKind};

/// Optimizer with its moment estimates. SGD keeps the moments at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub cfg: OptimizerConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Params<T>,
    pub v: Params<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: &Params<T>) -> Self {
        let mut m = Params::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Optimizer { cfg, step: 0, v: m.clone(), m }
    }

    /// Applies one update given gradients for every parameter.
    pub fn update(&mut self, params: &mut Params<T>, grads: &Params<T>) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let lr = c.lr;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::Contract(format!("gradient shape mismatch for {name}")));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            let (b1, b2, eps, wd) = (T::c(c.beta1), T::c(c.beta2), T::c(c.eps), T::c(c.weight_decay));
            let (one, lr_t) = (T::one(), T::c(lr));
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                match c.kind {
                    OptimizerKind::Sgd => {
                        *pi = *pi - lr_t * (gi + wd * *pi);
                    }
                    OptimizerKind::Adam | OptimizerKind::AdamW => {
                        let gi = if c.kind == OptimizerKind::Adam { gi + wd * *pi } else { gi };
                        if c.kind == OptimizerKind::AdamW {
                            *pi = *pi - lr_t * wd * *pi;
                        }
                        m[i] = b1 * m[i] + (one - b1) * gi;
                        v[i] = b2 * v[i] + (one - b2) * gi * gi;
                        let mhat = m[i] / T::c(bc1);
                        let vhat = v[i] / T::c(bc2);
                        *pi = *pi - lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
