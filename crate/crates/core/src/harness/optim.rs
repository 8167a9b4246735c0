use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{invalid, Result};
use crate::numerics::{Scalar, Tensor};

/// Decoupled-weight-decay Adam over a flat list of tensors.
#[derive(Clone, Debug)]
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Tensors that receive weight decay, by position.
    decay: Vec<bool>,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(shapes: &[&[usize]], decay: Vec<bool>, betas: (f64, f64), eps: f64, weight_decay: f64) -> Result<Self> {
        if shapes.len() != decay.len() {
            return Err(invalid("adamw", "one decay flag per tensor"));
        }
        Ok(Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            decay,
            m: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            t: 0,
        })
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`:
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid("adamw", "parameter count changed"));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - Float::powi(b1, self.t as i32);
        let c2 = 1.0 - Float::powi(b2, self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(invalid("adamw", "gradient shape differs from parameter"));
            }
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((x, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gj = gj.as_f64();
                let mn = b1 * mj.as_f64() + (1.0 - b1) * gj;
                let vn = b2 * vj.as_f64() + (1.0 - b2) * gj * gj;
                *mj = S::of(mn);
                *vj = S::of(vn);
                let xo = x.as_f64();
                let upd = (mn / c1) / (Float::sqrt(vn / c2) + self.eps) + wd * xo;
                *x = S::of(xo - lr * upd);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|x| x.as_f64() * x.as_f64()).sum();
    let norm = Float::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = S::of(max_norm / norm);
        for g in grads {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
