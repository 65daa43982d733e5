//! Adam with L2 weight decay and the warmup/step learning-rate schedule.

use crate::model::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 8e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug)]
pub struct Adam<S> {
    pub cfg: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new<T: Scalar>(params: &Params<T>, cfg: AdamConfig) -> Self {
        let m = params.tensors.iter().map(|t| vec![S::zero(); t.numel()]).collect();
        let v = params.tensors.iter().map(|t| vec![S::zero(); t.numel()]).collect();
        Adam { cfg, m, v, t: 0 }
    }

    /// One update over all parameters; entries with no gradient are skipped
    /// but their moment buffers still exist.
    pub fn step(&mut self, params: &mut Params<S>, grads: &[Option<&[S]>], lr: f64) {
        self.t += 1;
        let b1 = S::of_f64(self.cfg.beta1);
        let b2 = S::of_f64(self.cfg.beta2);
        let eps = S::of_f64(self.cfg.eps);
        let wd = S::of_f64(self.cfg.weight_decay);
        let bc1 = S::of_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = S::of_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = S::of_f64(lr);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let p = &mut params.tensors[i].data;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            debug_assert_eq!(g.len(), p.len());
            for j in 0..p.len() {
                let gj = g[j] + wd * p[j];
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Moment buffers and step counter as named tensors for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = vec![("opt.t".to_string(), Tensor::scalar(S::of_usize(self.t as usize)))];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("opt.m.{i}"), Tensor::from_fn(&[m.len()], |j| m[j])));
            out.push((format!("opt.v.{i}"), Tensor::from_fn(&[v.len()], |j| v[j])));
        }
        out
    }

    pub fn import_state(&mut self, records: &[(String, Tensor<S>)]) {
        for (name, t) in records {
            if name == "opt.t" {
                self.t = t.item().as_f64() as u64;
            } else if let Some(i) = name.strip_prefix("opt.m.").and_then(|s| s.parse::<usize>().ok()) {
                if i < self.m.len() && t.numel() == self.m[i].len() {
                    self.m[i].copy_from_slice(&t.data);
                }
            } else if let Some(i) = name.strip_prefix("opt.v.").and_then(|s| s.parse::<usize>().ok()) {
                if i < self.v.len() && t.numel() == self.v[i].len() {
                    self.v[i].copy_from_slice(&t.data);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base_lr: 8e-4, warmup_epochs: 10, milestones: vec![30, 50], gamma: 0.1 }
    }
}

impl LrSchedule {
    /// Linear warmup from 0 over `warmup_epochs`, then step decay by `gamma`
    /// at each milestone. `epoch` is 0-based.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = if self.warmup_epochs > 0 && epoch < self.warmup_epochs {
            self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            self.base_lr
        };
        for &m in &self.milestones {
            if epoch >= m {
                lr *= self.gamma;
            }
        }
        lr
    }
}
