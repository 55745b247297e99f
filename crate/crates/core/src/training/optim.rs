use crate::error::{Error, Result};
use crate::foundation::{ParamSet, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

impl AdamW {
    pub fn new(params: &ParamSet<f32>, lr: f64, betas: [f64; 2], weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas[0],
            beta2: betas[1],
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Apply update number `t` (1-based).
    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], t: u64) -> Result<()> {
        if grads.len() != params.len() || !self.m.same_layout(params) {
            return Err(Error::InvalidArgument("gradient layout does not match parameters".into()));
        }
        let c1 = (1.0 - self.beta1.powi(t as i32)) as f32;
        let c2 = (1.0 - self.beta2.powi(t as i32)) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (lr, wd, eps) = (self.lr as f32, self.weight_decay as f32, ADAM_EPS as f32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = self.m.get_mut(i).data_mut();
            let v = self.v.get_mut(i).data_mut();
            if g.numel() != p.len() {
                return Err(Error::shape("adamw", &[g.numel()], &[p.len()]));
            }
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p[j]);
            }
        }
        Ok(())
    }
}

/// `ema ← ρ·ema + (1 − ρ)·θ`.
pub fn ema_update(ema: &mut ParamSet<f32>, params: &ParamSet<f32>, decay: f64) {
    let rho = decay as f32;
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = rho * *a + (1.0 - rho) * b;
        }
    }
}
