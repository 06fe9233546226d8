use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// Named parameter tensors. With tied embeddings the LM head has no slot of
/// its own: it reads `embed` transposed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ModelWeights {
    /// Checks the map against `cfg`: every required name exactly once, no
    /// extras, every shape as derived.
    pub fn new(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let w = Self { tensors: tensors.into_iter().map(|(k, v)| (k, Arc::new(v))).collect() };
        w.validate(cfg)?;
        Ok(w)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.tensor_shapes();
        for (name, shape) in &expected {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing weight {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err!("weight {name} is {:?}, config expects {:?}", t.shape(), shape));
            }
        }
        if self.tensors.len() != expected.len() {
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|k| !expected.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::Config(format!("unexpected weights {extra:?}")));
        }
        Ok(())
    }

    /// Random initialization: unit norm gains, `N(0, 1/fan_in)` projections,
    /// residual-output projections further shrunk by `1/√(2·n_layers)`.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let residual = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.tensor_shapes() {
            let t = if shape.len() == 1 {
                Tensor::ones(&shape)
            } else if name == "embed" {
                Tensor::randn(&shape, 1.0 / (cfg.d_model as f64).sqrt(), rng)
            } else {
                let mut std = 1.0 / (shape[0] as f64).sqrt();
                if name.ends_with(".wo") || name.ends_with(".w_down") {
                    std *= residual;
                }
                Tensor::randn(&shape, std, rng)
            };
            tensors.insert(name, Arc::new(t));
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .map(Arc::as_ref)
            .ok_or_else(|| Error::Config(format!("no weight named {name}")))
    }

    pub(crate) fn shared(&self, name: &str) -> Result<Arc<Tensor>> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no weight named {name}")))
    }

    /// Mutable access; copies the storage first if it is shared.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Config(format!("no weight named {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }
}
