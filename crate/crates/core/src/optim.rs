//! AdamW with decoupled weight decay.

use crate::error::{invalid, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
    /// Decay applies to matrices and kernels only (rank ≥ 2).
    decay: Vec<bool>,
    trainable: Vec<bool>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let shapes: Vec<&Tensor> = params.iter().map(|(_, _, t)| t).collect();
        AdamW {
            cfg,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
            decay: shapes.iter().map(|t| t.ndim() >= 2).collect(),
            trainable: vec![true; shapes.len()],
        }
    }

    /// Marks which parameters receive updates; the rest stay fixed.
    pub fn set_trainable(&mut self, trainable: Vec<bool>) -> Result<()> {
        if trainable.len() != self.m.len() {
            return Err(invalid!("{} flags for {} parameters", trainable.len(), self.m.len()));
        }
        self.trainable = trainable;
        Ok(())
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(invalid!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(invalid!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            let decay = if self.decay[i] { 1.0 - lr * weight_decay } else { 1.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let upd = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *x = *x * decay - lr * upd;
            }
        }
        Ok(())
    }

    /// Moments as named tensors, for checkpointing.
    pub fn export(&self, params: &ParamStore, out: &mut ParamStore) {
        for (i, (_, name, _)) in params.iter().enumerate() {
            out.push(format!("optim.m.{name}"), self.m[i].clone());
            out.push(format!("optim.v.{name}"), self.v[i].clone());
        }
    }

    pub fn import(&mut self, params: &ParamStore, src: &ParamStore, t: u64) -> Result<()> {
        for (i, (_, name, p)) in params.iter().enumerate() {
            for (slot, key) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let full = format!("optim.{key}.{name}");
                let id = src.id(&full).ok_or_else(|| invalid!("checkpoint lacks {full}"))?;
                if src.get(id).shape() != p.shape() {
                    return Err(invalid!("{full} has shape {:?}", src.get(id).shape()));
                }
                *slot = src.get(id).clone();
            }
        }
        self.t = t;
        Ok(())
    }
}
