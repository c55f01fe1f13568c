//! Learning-rate schedule, AdamW and global-norm clipping.

use std::f64::consts::PI;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::transformer::ParamStore;

/// Linear warmup from 0 to `init_lr`, cosine decay to `min_lr` at
/// `max_iters`, then flat.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_iters as f64;
    let it = iter as f64;
    if iter < cfg.warmup_iters {
        return cfg.init_lr * it / warm;
    }
    if iter >= cfg.max_iters {
        return cfg.min_lr;
    }
    let progress = (it - warm) / (cfg.max_iters as f64 - warm);
    let coeff = 0.5 * (1.0 + (PI * progress).cos());
    cfg.min_lr + coeff * (cfg.init_lr - cfg.min_lr)
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update. Weight decay is decoupled and applies to 2-D tensors only.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, cfg: &TrainConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::dim("adamw", &[grads.len()], &[params.len()]));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensors()[i].shape() {
                return Err(Error::dim("adamw", g.shape(), params.tensors()[i].shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.names()[i])));
            }
        }
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let decay = if params.tensors()[i].shape().len() == 2 {
                cfg.weight_decay
            } else {
                0.0
            };
            let p = &mut params.tensors_mut()[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let wj = w.as_f64();
                *w = T::from_f64(wj - lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * wj));
            }
        }
        Ok(())
    }
}
