use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::model::ModelWeights;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (norm gains are left alone).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr >= 0.0) || !betas_ok || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid AdamW settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Moment buffers and step count.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, moments: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Starts a new optimizer step; every [`OptimState::update`] until the next
    /// call shares its bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Bias-corrected AdamW update of one named parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Contract("update before begin_step".into()));
        }
        if param.shape() != grad.shape() {
            return Err(shape_err!("parameter {name} {:?} vs gradient {:?}", param.shape(), grad.shape()));
        }
        let c = &self.config;
        let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
        });
        if mo.m.shape() != param.shape() {
            return Err(shape_err!("moment buffer for {name} is {:?}, parameter {:?}", mo.m.shape(), param.shape()));
        }
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = if param.rank() >= 2 { c.lr * c.weight_decay } else { 0.0 };
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= decay * *p + c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }

    /// One step over every parameter that received a gradient.
    pub fn step_model(&mut self, weights: &mut ModelWeights, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.begin_step();
        for (name, g) in grads {
            let p = weights.get_mut(name)?;
            self.update(name, p, g)?;
        }
        Ok(())
    }
}
