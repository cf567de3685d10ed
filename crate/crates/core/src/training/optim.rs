use std::collections::BTreeMap;

use crate::encoders::ParamStore;
use crate::substrate::{Real, Tensor};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at `total`.
pub fn warmup_cosine(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay. Moments are created on first use, so
/// parameters that never receive a gradient are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Update count per parameter.
    pub steps: BTreeMap<String, u64>,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            steps: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Biases and layer-norm gains are not decayed.
    fn decays(name: &str) -> bool {
        !(name.ends_with(".bias") || name.ends_with(".gain"))
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) {
        let (b1, b2) = (self.beta1, self.beta2);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let c1 = 1.0 - b1.powi(*t as i32);
            let c2 = 1.0 - b2.powi(*t as i32);
            let decay = if Self::decays(name) {
                self.weight_decay
            } else {
                0.0
            };
            let (b1t, b2t) = (T::c(b1), T::c(b2));
            let (ib1, ib2) = (T::c(1.0 - b1), T::c(1.0 - b2));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1t * *mv + ib1 * gv;
                *vv = b2t * *vv + ib2 * gv * gv;
                let mhat = mv.f64() / c1;
                let vhat = vv.f64() / c2;
                let update = mhat / (vhat.sqrt() + self.eps) + decay * pv.f64();
                *pv = *pv - T::c(lr * update);
            }
        }
    }
}
