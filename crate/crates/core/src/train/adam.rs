use rainforge_tensor::{Gradients, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// `(0.99, 0.99)`; `(0.9, 0.999)` is the more common choice.
    fn default() -> Self {
        AdamConfig { beta1: 0.99, beta2: 0.99, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with per-parameter moments in visiting order.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update to every parameter of `module`. Fails without
    /// modifying anything if a gradient is missing or non-finite.
    pub fn update<M: Module<T>>(&mut self, module: &mut M, grads: &Gradients<T>, lr: f64) -> Result<()> {
        let mut problem: Option<String> = None;
        let mut shapes = Vec::new();
        module.visit("", &mut |name, p| {
            shapes.push(p.shape().to_vec());
            if problem.is_some() {
                return;
            }
            match grads.param(p) {
                None => problem = Some(format!("missing gradient for {name}")),
                Some(g) if !g.all_finite() => problem = Some(format!("non-finite gradient for {name}")),
                Some(_) => {}
            }
        });
        if let Some(msg) = problem {
            return Err(Error::Optimizer(msg));
        }
        if self.m.is_empty() {
            self.m = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != shapes.len() || self.m.iter().zip(&shapes).any(|(m, s)| m.shape() != s.as_slice()) {
            return Err(Error::Config("optimizer state does not match the parameters".into()));
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
        let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (ic1, ic2, lr) = (T::of(1.0 / c1), T::of(1.0 / c2), T::of(lr));
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |_, p| {
            let g = grads.param(p).expect("checked above");
            let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mhat = *m * ic1;
                let vhat = *v * ic2;
                *w -= lr * mhat / (vhat.sqrt() + e);
            }
            i += 1;
        });
        Ok(())
    }
}
