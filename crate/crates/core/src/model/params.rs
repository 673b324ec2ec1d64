//! Parameter naming, layout and storage.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The eight per-layer encoder components, in the order of the reference
/// Fisher ranking (most informative first).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "output.LayerNorm")]
    OutputLayerNorm,
    #[serde(rename = "attention.output.LayerNorm")]
    AttentionOutputLayerNorm,
    #[serde(rename = "attention.output.dense")]
    AttentionOutputDense,
    #[serde(rename = "attention.self.value")]
    AttentionValue,
    #[serde(rename = "output.dense")]
    OutputDense,
    #[serde(rename = "attention.self.query")]
    AttentionQuery,
    #[serde(rename = "intermediate.dense")]
    IntermediateDense,
    #[serde(rename = "attention.self.key")]
    AttentionKey,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::OutputLayerNorm,
        Component::AttentionOutputLayerNorm,
        Component::AttentionOutputDense,
        Component::AttentionValue,
        Component::OutputDense,
        Component::AttentionQuery,
        Component::IntermediateDense,
        Component::AttentionKey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::OutputLayerNorm => "output.LayerNorm",
            Component::AttentionOutputLayerNorm => "attention.output.LayerNorm",
            Component::AttentionOutputDense => "attention.output.dense",
            Component::AttentionValue => "attention.self.value",
            Component::OutputDense => "output.dense",
            Component::AttentionQuery => "attention.self.query",
            Component::IntermediateDense => "intermediate.dense",
            Component::AttentionKey => "attention.self.key",
        }
    }

    pub fn is_layer_norm(self) -> bool {
        matches!(
            self,
            Component::OutputLayerNorm | Component::AttentionOutputLayerNorm
        )
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown component `{s}`")))
    }
}

/// Weight or bias half of a parameter pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    Bias,
}

/// Where an encoder-layer path sits: `(layer, component, role)`.
pub fn classify_path(path: &str) -> Option<(usize, Component, Role)> {
    let rest = path.strip_prefix("encoder.layer.")?;
    let (layer, rest) = rest.split_once('.')?;
    let layer = layer.parse().ok()?;
    let (component, role) = rest.rsplit_once('.')?;
    let role = match role {
        "weight" => Role::Weight,
        "bias" => Role::Bias,
        _ => return None,
    };
    Some((layer, component.parse().ok()?, role))
}

pub fn is_head_path(path: &str) -> bool {
    path.starts_with("classifier.")
}

pub fn is_bias_path(path: &str) -> bool {
    path.ends_with(".bias")
}

pub fn is_layer_norm_path(path: &str) -> bool {
    path.contains(".LayerNorm.")
}

/// Ordering key: numeric path segments are zero-padded so that
/// `encoder.layer.2` sorts before `encoder.layer.10`.
pub fn path_sort_key(path: &str) -> String {
    path.split('.')
        .map(|seg| {
            if !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_digit()) {
                format!("{seg:0>10}")
            } else {
                seg.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(".")
}

pub fn layer_path(layer: usize, component: Component, role: Role) -> String {
    let suffix = match role {
        Role::Weight => "weight",
        Role::Bias => "bias",
    };
    format!("encoder.layer.{layer}.{}.{suffix}", component.name())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub path: String,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered set of parameter paths and shapes, without values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamLayout {
    /// Builds a layout from arbitrary entries, sorting them canonically.
    pub fn new(mut entries: Vec<ParamEntry>) -> Result<Self> {
        entries.sort_by_cached_key(|e| path_sort_key(&e.path));
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.path.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate path `{}`", e.path)));
            }
        }
        Ok(Self { entries, index })
    }

    /// Every path and shape the encoder defined by `config` owns.
    pub fn for_config(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let m = config.intermediate;
        let mut entries = Vec::new();
        let mut push = |path: String, shape: Vec<usize>| entries.push(ParamEntry { path, shape });
        push("embeddings.word".into(), vec![config.vocab_size, h]);
        push("embeddings.position".into(), vec![config.max_positions, h]);
        push("embeddings.token_type".into(), vec![config.type_vocab, h]);
        push("embeddings.LayerNorm.weight".into(), vec![h]);
        push("embeddings.LayerNorm.bias".into(), vec![h]);
        for layer in 0..config.num_layers {
            for component in Component::ALL {
                let (out, inp) = match component {
                    Component::OutputLayerNorm | Component::AttentionOutputLayerNorm => (h, 0),
                    Component::IntermediateDense => (m, h),
                    Component::OutputDense => (h, m),
                    _ => (h, h),
                };
                let wshape = if inp == 0 { vec![out] } else { vec![out, inp] };
                push(layer_path(layer, component, Role::Weight), wshape);
                push(layer_path(layer, component, Role::Bias), vec![out]);
            }
        }
        push("pooler.dense.weight".into(), vec![h, h]);
        push("pooler.dense.bias".into(), vec![h]);
        let outputs = config.head.outputs();
        push("classifier.weight".into(), vec![outputs, h]);
        push("classifier.bias".into(), vec![outputs]);
        Self::new(entries)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, path: &str) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn entry(&self, path: &str) -> Option<&ParamEntry> {
        self.position(path).map(|i| &self.entries[i])
    }

    /// Total scalar count.
    pub fn numel(&self) -> u64 {
        self.entries.iter().map(|e| e.numel() as u64).sum()
    }
}

/// Parameter values aligned with a [`ParamLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree {
    layout: ParamLayout,
    tensors: Vec<Tensor>,
}

impl ParamTree {
    /// Pairs each path with its tensor. Order is canonicalized.
    pub fn from_tensors(pairs: Vec<(String, Tensor)>) -> Result<Self> {
        let entries = pairs
            .iter()
            .map(|(p, t)| ParamEntry {
                path: p.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let layout = ParamLayout::new(entries)?;
        let mut by_path: HashMap<String, Tensor> = pairs.into_iter().collect();
        let tensors = layout
            .entries()
            .iter()
            .map(|e| by_path.remove(&e.path).expect("path present"))
            .collect();
        Ok(Self { layout, tensors })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.layout.position(path).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.layout.position(path).map(|i| &mut self.tensors[i])
    }

    pub fn require(&self, path: &str) -> Result<&Tensor> {
        self.get(path).ok_or_else(|| Error::UnknownPath(path.to_string()))
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    /// Paths and tensors in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layout
            .entries()
            .iter()
            .map(|e| e.path.as_str())
            .zip(&self.tensors)
    }

    pub fn numel(&self) -> u64 {
        self.layout.numel()
    }

    /// Replaces an existing tensor of the same shape, or inserts a new path
    /// (re-canonicalizing order) when the shape or path is new.
    pub fn set(&mut self, path: &str, tensor: Tensor) -> Result<()> {
        if let Some(i) = self.layout.position(path) {
            if self.tensors[i].shape() == tensor.shape() {
                self.tensors[i] = tensor;
                return Ok(());
            }
        }
        let mut pairs: Vec<(String, Tensor)> = self
            .iter()
            .filter(|(p, _)| *p != path)
            .map(|(p, t)| (p.to_string(), t.clone()))
            .collect();
        pairs.push((path.to_string(), tensor));
        *self = Self::from_tensors(pairs)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Head;

    #[test]
    fn classify_round_trips_every_component() {
        for c in Component::ALL {
            for role in [Role::Weight, Role::Bias] {
                let p = layer_path(7, c, role);
                assert_eq!(classify_path(&p), Some((7, c, role)));
            }
        }
        assert_eq!(classify_path("pooler.dense.weight"), None);
        assert_eq!(classify_path("embeddings.LayerNorm.bias"), None);
        assert_eq!(classify_path("encoder.layer.x.output.dense.bias"), None);
    }

    #[test]
    fn output_layer_norm_is_not_attention_layer_norm() {
        assert_eq!(
            classify_path("encoder.layer.0.attention.output.LayerNorm.bias").map(|c| c.1),
            Some(Component::AttentionOutputLayerNorm)
        );
        assert_eq!(
            classify_path("encoder.layer.0.output.LayerNorm.bias").map(|c| c.1),
            Some(Component::OutputLayerNorm)
        );
    }

    #[test]
    fn layers_sort_numerically() {
        let mut cfg = ModelConfig::bert_large_cased(Head::Classification { num_labels: 2 });
        cfg.num_layers = 12;
        let layout = ParamLayout::for_config(&cfg).unwrap();
        let layers: Vec<usize> = layout
            .entries()
            .iter()
            .filter_map(|e| classify_path(&e.path).map(|c| c.0))
            .collect();
        assert!(layers.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(layers.last(), Some(&11));
    }

    #[test]
    fn component_name_parse() {
        for c in Component::ALL {
            assert_eq!(c.name().parse::<Component>().unwrap(), c);
        }
        assert!("LayerNorm".parse::<Component>().is_err());
    }
}
