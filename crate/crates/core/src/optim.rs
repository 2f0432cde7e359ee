//! Adam with global-norm clipping and non-finite gradient rejection.

use bbdm_tensor::{Element, Gradients, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its L2 norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: None }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

/// Outcome of one optimizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let ok = config.lr > 0.0
            && (0.0..1.0).contains(&config.beta1)
            && (0.0..1.0).contains(&config.beta2)
            && config.eps > 0.0
            && config.grad_clip.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::invalid(format!("invalid optimizer settings {config:?}")));
        }
        Ok(Adam { config, m: Vec::new(), v: Vec::new(), step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to `params` using gradients of the variables in
    /// `bound`. Parameters without a gradient are treated as having zero
    /// gradient.
    pub fn step<E: Element>(
        &mut self,
        params: &mut ParamStore<E>,
        bound: &Bound<'_, E>,
        grads: &Gradients<E>,
    ) -> Result<StepStats> {
        let mut flat = Vec::with_capacity(params.len());
        for (name, var) in bound.iter() {
            if params.get(name).is_none() {
                return Err(Error::invalid(format!("unknown parameter {name:?}")));
            }
            flat.push(grads.get(&var).cloned());
        }
        if flat.len() != params.len() || !bound.iter().map(|(n, _)| n).eq(params.names()) {
            return Err(Error::invalid("bound parameters do not match the store"));
        }
        self.apply(params, &flat)
    }

    /// Update from per-parameter gradients in store order. Nothing is
    /// modified if any gradient is non-finite.
    pub fn apply<E: Element>(&mut self, params: &mut ParamStore<E>, grads: &[Option<Tensor<E>>]) -> Result<StepStats> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let mut sq = 0.0;
        for ((name, p), g) in params.iter().zip(grads) {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::invalid(format!("gradient shape mismatch for {name:?}")));
            }
            for &x in g.data() {
                let x = x.as_f64();
                if !x.is_finite() {
                    return Err(Error::Diverged {
                        step: self.step as usize,
                        reason: format!("non-finite gradient for {name}"),
                    });
                }
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        let scale = match self.config.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = g.as_ref().map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j].as_f64() * scale);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let upd = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *w = E::from_f64_lossy(w.as_f64() - upd);
            }
        }
        Ok(StepStats { grad_norm: norm, clipped: scale < 1.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bbdm_tensor::{Graph, Tensor};

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_f64(vec![2], &[3.0, -2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, grad_clip: None, ..AdamConfig::default() }).unwrap();
        for _ in 0..500 {
            let g = Graph::new();
            let b = p.bind(&g, true);
            let loss = b.get("w").unwrap().square().unwrap().sum().unwrap();
            let grads = g.backward(loss).unwrap();
            opt.step(&mut p, &b, &grads).unwrap();
        }
        assert!(p.get("w").unwrap().data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_f64(vec![1], &[1.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.01, grad_clip: None, ..AdamConfig::default() }).unwrap();
        let g = Graph::new();
        let b = p.bind(&g, true);
        let grads = g.backward(b.get("w").unwrap().scale(5.0).unwrap().sum().unwrap()).unwrap();
        opt.step(&mut p, &b, &grads).unwrap();
        assert!((p.get("w").unwrap().item() - 0.99).abs() < 1e-9);
    }

    #[test]
    fn hand_example_and_nan_rejection() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_f64(vec![1], &[0.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }).unwrap();
        opt.apply(&mut p, &[Some(Tensor::from_f64(vec![1], &[1.0]).unwrap())]).unwrap();
        assert!((p.get("w").unwrap().item() + 0.1).abs() < 1e-6);
        let before = p.clone();
        let bad = Tensor::from_f64(vec![1], &[f64::NAN]).unwrap();
        assert!(matches!(opt.apply(&mut p, &[Some(bad)]), Err(Error::Diverged { .. })));
        assert_eq!(p, before);
        assert_eq!(opt.steps_taken(), 1);
        for _ in 0..10 {
            opt.apply(&mut p, &[Some(Tensor::from_f64(vec![1], &[0.0]).unwrap())]).unwrap();
        }
        let mut q = before.clone();
        let mut fresh = Adam::new(AdamConfig::default()).unwrap();
        for _ in 0..10 {
            fresh.apply(&mut q, &[None]).unwrap();
        }
        assert_eq!(q, before);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }).is_err());
        assert!(Adam::new(AdamConfig { beta1: 1.0, ..AdamConfig::default() }).is_err());
    }
}
