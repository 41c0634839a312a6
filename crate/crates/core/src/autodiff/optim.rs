//! Adaptive-moment optimizer over a [`ParamStore`].

use super::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f32>,
    /// Linear learning-rate ramp over the first `warmup` steps.
    pub warmup: u32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: Some(1.0), warmup: 0 }
    }
}

/// Add `grads` into `acc` slot by slot (for multi-sample batches).
pub fn accumulate_grads(acc: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>) {
    if acc.is_empty() {
        *acc = grads;
        return;
    }
    for (slot, g) in acc.iter_mut().zip(grads) {
        match (slot.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *slot = Some(g),
            _ => {}
        }
    }
}

/// Multiply every present gradient by `s`.
pub fn scale_grads(grads: &mut [Option<Tensor>], s: f32) {
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u32,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = |p: &ParamStore| p.ids().map(|id| vec![0.0; p.get(id).numel()]).collect();
        Adam { m: zeros(params), v: zeros(params), cfg, step: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Global L2 norm of the gradients that are present.
    pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
        grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let clip = match self.cfg.grad_clip {
            Some(max) => {
                let norm = Self::grad_norm(grads);
                if norm > max as f64 { (max as f64 / norm) as f32 } else { 1.0 }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.cfg.lr * (self.step as f32 / self.cfg.warmup.max(1) as f32).min(1.0);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &gr), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let gr = gr * clip;
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&ps, AdamConfig { lr: 0.1, grad_clip: None, ..Default::default() });
        for _ in 0..300 {
            let g = ps.get(id).scale(2.0);
            opt.step(&mut ps, &[Some(g)]);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2), "{:?}", ps.get(id));
    }
}
