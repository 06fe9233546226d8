use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// Keys and values for one layer, one row per past position.
///
/// Keys are kept after QK-Norm but before any rotation; the position scheme
/// (plain RoPE or chunk-remapped) is applied when they are read.
#[derive(Clone, Debug)]
pub struct LayerKv {
    width: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl LayerKv {
    pub fn new(width: usize) -> Self {
        Self { width, keys: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.keys.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keys(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), self.width], self.keys.clone())
    }

    pub fn values(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), self.width], self.values.clone())
    }

    pub fn append(&mut self, keys: &Tensor, values: &Tensor) -> Result<()> {
        if keys.shape() != values.shape() || keys.rank() != 2 || keys.shape()[1] != self.width {
            return Err(shape_err!(
                "cache width {} cannot take keys {:?} / values {:?}",
                self.width,
                keys.shape(),
                values.shape()
            ));
        }
        self.keys.extend_from_slice(keys.data());
        self.values.extend_from_slice(values.data());
        Ok(())
    }
}

/// Per-session cache of past keys and values for every layer.
#[derive(Clone, Debug)]
pub struct KvCache {
    layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn new(n_layers: usize, kv_width: usize) -> Self {
        Self { layers: (0..n_layers).map(|_| LayerKv::new(kv_width)).collect() }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of positions already processed.
    pub fn past_len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn layer(&self, i: usize) -> &LayerKv {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerKv {
        &mut self.layers[i]
    }
}
