use std::collections::HashSet;
use std::ops::Range;

use crate::error::{Error, Result};

/// One named, shaped segment of a parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Layer {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Segmentation of a flat parameter vector into contiguous named layers.
///
/// Layers appear in serialization order and tile `0..total_len` without gaps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMap {
    layers: Vec<Layer>,
    total_len: usize,
}

impl LayerMap {
    /// Builds a map from `(name, shape)` pairs, assigning contiguous offsets.
    pub fn new<S: Into<String>>(specs: impl IntoIterator<Item = (S, Vec<usize>)>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut seen = HashSet::new();
        let mut offset = 0usize;
        for (name, shape) in specs {
            let name = name.into();
            if name.is_empty() {
                return Err(Error::InvalidLayout("empty layer name".into()));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidLayout(format!("duplicate layer name {name:?}")));
            }
            if shape.is_empty() || shape.iter().any(|&d| d == 0) {
                return Err(Error::InvalidLayout(format!(
                    "layer {name:?} has invalid shape {shape:?}"
                )));
            }
            let layer = Layer {
                name,
                shape,
                offset,
            };
            offset += layer.numel();
            layers.push(layer);
        }
        if layers.is_empty() {
            return Err(Error::InvalidLayout("layer map has no layers".into()));
        }
        Ok(LayerMap {
            layers,
            total_len: offset,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.layers.iter().map(Layer::range)
    }
}
