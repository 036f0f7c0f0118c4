//! Double-precision parameter store mirroring the weight schema.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::config::{tensor_schema, ModelConfig, MIX_NAMES};
use crate::model::{Tensor, WeightSet};

/// Tensors in schema order. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub tensors: Vec<Vec<f64>>,
}

impl Params {
    pub fn zeros(config: &ModelConfig) -> Self {
        let schema = tensor_schema(config);
        let tensors = schema.iter().map(|(_, s)| vec![0.0; s.iter().product()]).collect();
        let (names, shapes) = schema.into_iter().unzip();
        Self { config: *config, names, shapes, tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            tensors: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn from_weights(w: &WeightSet) -> Self {
        let mut p = Self::zeros(w.config());
        for (dst, (_, t)) in p.tensors.iter_mut().zip(w.iter()) {
            *dst = t.data.iter().map(|&v| v as f64).collect();
        }
        p
    }

    /// Rounds to single precision for export.
    pub fn to_weights(&self) -> Result<WeightSet> {
        let named = self
            .names
            .iter()
            .zip(&self.shapes)
            .zip(&self.tensors)
            .map(|((n, s), t)| (n.clone(), Tensor::new(s.clone(), t.iter().map(|&v| v as f32).collect())))
            .collect();
        WeightSet::from_tensors(named)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.tensors[self.index_of(name).unwrap_or_else(|| panic!("no tensor `{name}`"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        let i = self.index_of(name).unwrap_or_else(|| panic!("no tensor `{name}`"));
        &mut self.tensors[i]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(Vec::as_slice))
    }

    /// Default initialization for training from scratch.
    ///
    /// Projection matrices are uniform in `±0.1/√d_model`, the embedding is
    /// `N(0, 0.02²)`, normalization gains are one, mixing coefficients are one
    /// half, and biases (decay, rate and value generators included) are zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.1 / (config.d_model as f64).sqrt();
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mixes: Vec<String> = MIX_NAMES.iter().map(|m| format!("att.{m}")).chain(["ffn.x_k".into()]).collect();
        for ((name, shape), t) in p.names.iter().zip(&p.shapes).zip(p.tensors.iter_mut()) {
            let leaf = name.split_once("blocks.").map_or(name.as_str(), |(_, rest)| {
                rest.split_once('.').map_or(rest, |(_, leaf)| leaf)
            });
            if name == "emb.weight" {
                t.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            } else if shape.len() == 2 && leaf != "att.r_k" {
                t.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            } else if leaf.ends_with(".weight") {
                t.fill(1.0);
            } else if mixes.iter().any(|m| m == leaf) {
                t.fill(0.5);
            } else if leaf == "att.k_k" || leaf == "att.k_a" {
                t.fill(1.0);
            }
        }
        p
    }

    /// Tensor index lookup for one block.
    pub(crate) fn block_slots(&self, layer: usize) -> HashMap<&'static str, usize> {
        BLOCK_LEAVES
            .iter()
            .map(|&leaf| {
                let name = format!("blocks.{layer}.{leaf}");
                (leaf, self.index_of(&name).unwrap_or_else(|| panic!("no tensor `{name}`")))
            })
            .collect()
    }
}

pub(crate) const BLOCK_LEAVES: [&str; 33] = [
    "ln1.weight",
    "ln1.bias",
    "ln2.weight",
    "ln2.bias",
    "att.x_r",
    "att.x_w",
    "att.x_k",
    "att.x_v",
    "att.x_a",
    "att.x_g",
    "att.w0",
    "att.w1",
    "att.w2",
    "att.a0",
    "att.a1",
    "att.a2",
    "att.v0",
    "att.v1",
    "att.v2",
    "att.g1",
    "att.g2",
    "att.k_k",
    "att.k_a",
    "att.r_k",
    "att.receptance.weight",
    "att.key.weight",
    "att.value.weight",
    "att.output.weight",
    "att.ln_x.weight",
    "att.ln_x.bias",
    "ffn.x_k",
    "ffn.key.weight",
    "ffn.value.weight",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_leaves_cover_schema() {
        let cfg = ModelConfig::micro(1, 8, 16, 12, 2, 2);
        let p = Params::zeros(&cfg);
        let per_block = p.names.iter().filter(|n| n.starts_with("blocks.0.")).count();
        assert_eq!(BLOCK_LEAVES.len(), per_block);
        assert_eq!(p.block_slots(0).len(), per_block);
    }

    #[test]
    fn init_is_seeded_and_weights_round_trip() {
        let cfg = ModelConfig::micro(2, 8, 16, 12, 2, 2);
        let a = Params::init(&cfg, 1);
        assert_eq!(a, Params::init(&cfg, 1));
        assert_ne!(a, Params::init(&cfg, 2));
        assert!(a.get("blocks.1.ln2.weight").iter().all(|&v| v == 1.0));
        assert!(a.get("blocks.1.att.w0").iter().all(|&v| v == 0.0));
        assert!(a.get("blocks.0.att.x_g").iter().all(|&v| v == 0.5));
        let bound = 0.1 / 8f64.sqrt();
        assert!(a.get("head.weight").iter().all(|v| v.abs() <= bound));
        let w = a.to_weights().unwrap();
        let back = Params::from_weights(&w);
        for (x, y) in a.tensors.iter().flatten().zip(back.tensors.iter().flatten()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
}
