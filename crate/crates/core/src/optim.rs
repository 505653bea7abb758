//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamGroup, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(alloc::format!(
                "momentum betas must lie in [0, 1), got {}, {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub spec: OptimizerSpec,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(spec: OptimizerSpec, params: &ParamStore<F>) -> Self {
        let zeros = || params.params.iter().map(|p| vec![F::zero(); p.value.len()]).collect();
        Self {
            spec,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of the parameters whose group is in `groups`.
    ///
    /// `θ ← θ·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`, with `λ = 0` for parameters
    /// flagged as decay-exempt. Gradients are checked for finiteness
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Grads<F>, lr: f64, groups: &[ParamGroup]) -> Result<()> {
        for (p, g) in params.params.iter().zip(&grads.tensors) {
            if groups.contains(&p.group) && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let s = &self.spec;
        let t = self.step as i32;
        let b1 = F::from_f64(s.beta1);
        let b2 = F::from_f64(s.beta2);
        let one_b1 = F::from_f64(1.0 - s.beta1);
        let one_b2 = F::from_f64(1.0 - s.beta2);
        let bc1 = F::from_f64(1.0 - libm::pow(s.beta1, t as f64));
        let bc2 = F::from_f64(1.0 - libm::pow(s.beta2, t as f64));
        let eps = F::from_f64(s.eps);
        let lr_f = F::from_f64(lr);
        for (i, (p, g)) in params.params.iter_mut().zip(&grads.tensors).enumerate() {
            if !groups.contains(&p.group) {
                continue;
            }
            let decay = if p.decay { F::one() - F::from_f64(lr * s.weight_decay) } else { F::one() };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.value[j] = p.value[j] * decay - lr_f * (m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}
