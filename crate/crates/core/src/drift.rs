//! How far parameters move during fine-tuning.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::format::fmt_real;
use crate::model::params::{classify_path, Component};
use crate::model::ParamTree;

/// Mean absolute per-element change, `(1/n) sum |fine_i - pre_i|`.
pub fn change_d(pre: &[f64], fine: &[f64]) -> Result<f64> {
    if pre.len() != fine.len() {
        return Err(Error::shape("change_D", format!("{} vs {} elements", pre.len(), fine.len())));
    }
    if pre.is_empty() {
        return Err(Error::Empty("change_D vectors"));
    }
    Ok(l1(pre, fine) / pre.len() as f64)
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (y - x).abs()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distances {
    /// Number of elements that differ.
    pub l0: usize,
    /// Sum of absolute differences.
    pub l1: f64,
}

pub fn distances(v1: &[f64], v2: &[f64]) -> Result<Distances> {
    distances_with_tolerance(v1, v2, 0.0)
}

/// As [`distances`], counting an element toward L0 only when it differs by
/// more than `tol`.
pub fn distances_with_tolerance(v1: &[f64], v2: &[f64], tol: f64) -> Result<Distances> {
    if v1.len() != v2.len() {
        return Err(Error::shape("distances", format!("{} vs {} elements", v1.len(), v2.len())));
    }
    Ok(Distances {
        l0: v1.iter().zip(v2).filter(|(a, b)| (*a - *b).abs() > tol).count(),
        l1: l1(v1, v2),
    })
}

/// Drift per `(layer, component)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftTable {
    /// `values[layer][component index in Component::ALL]`.
    pub values: Vec<[f64; 8]>,
}

impl DriftTable {
    pub fn get(&self, layer: usize, c: Component) -> f64 {
        self.values[layer][component_index(c)]
    }

    /// `layer,component,D`, layers ascending, components in ranking order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,component,D\n");
        for (layer, row) in self.values.iter().enumerate() {
            for (c, v) in Component::ALL.iter().zip(row) {
                writeln!(out, "{layer},{},{}", c.name(), fmt_real(*v)).unwrap();
            }
        }
        out
    }
}

pub(crate) fn component_index(c: Component) -> usize {
    Component::ALL.iter().position(|&x| x == c).unwrap()
}

/// Drift of every encoder-layer component between two trees with identical
/// paths and shapes. Weight and bias of a component are concatenated.
pub fn drift_heatmap(pre: &ParamTree, fine: &ParamTree) -> Result<DriftTable> {
    if pre.layout() != fine.layout() {
        let describe = |t: &ParamTree| {
            t.layout()
                .entries()
                .iter()
                .map(|e| (e.path.clone(), e.shape.clone()))
                .collect::<BTreeSet<_>>()
        };
        let (a, b) = (describe(pre), describe(fine));
        let mut differing: Vec<&str> = a.symmetric_difference(&b).map(|(p, _)| p.as_str()).collect();
        differing.dedup();
        return Err(Error::TreeMismatch(format!("differing paths: {differing:?}")));
    }
    let layers = pre
        .iter()
        .filter_map(|(p, _)| classify_path(p).map(|(l, _, _)| l + 1))
        .max()
        .unwrap_or(0);
    let mut sums = vec![[0.0f64; 8]; layers];
    let mut counts = vec![[0usize; 8]; layers];
    for ((path, a), (_, b)) in pre.iter().zip(fine.iter()) {
        if let Some((layer, c, _)) = classify_path(path) {
            let ci = component_index(c);
            sums[layer][ci] += l1(a.data(), b.data());
            counts[layer][ci] += a.numel();
        }
    }
    let mut values = vec![[0.0f64; 8]; layers];
    for layer in 0..layers {
        for ci in 0..8 {
            if counts[layer][ci] == 0 {
                return Err(Error::TreeMismatch(format!(
                    "layer {layer} has no {} parameters",
                    Component::ALL[ci]
                )));
            }
            values[layer][ci] = sums[layer][ci] / counts[layer][ci] as f64;
        }
    }
    Ok(DriftTable { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Head, ModelConfig};
    use crate::model::encoder::build_model;

    #[test]
    fn change_d_hand_values() {
        assert_eq!(change_d(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(change_d(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(change_d(&[], &[]).is_err());
        assert!(change_d(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn distances_hand_values() {
        assert_eq!(
            distances(&[1.0, 2.0, 3.0], &[1.0, 5.0, 3.0]).unwrap(),
            Distances { l0: 1, l1: 3.0 }
        );
        assert_eq!(distances(&[4.0; 3], &[4.0; 3]).unwrap(), Distances { l0: 0, l1: 0.0 });
        let shifted = [1.25, 2.25, 3.25, 4.25];
        assert_eq!(
            distances(&[1.0, 2.0, 3.0, 4.0], &shifted).unwrap(),
            Distances { l0: 4, l1: 1.0 }
        );
        let d = distances_with_tolerance(&[1.0, 2.0], &[1.0 + 1e-12, 2.5], 1e-9).unwrap();
        assert_eq!(d.l0, 1);
    }

    #[test]
    fn single_component_perturbation() {
        let cfg = ModelConfig {
            vocab_size: 7,
            hidden: 4,
            num_layers: 5,
            num_heads: 2,
            intermediate: 8,
            max_positions: 6,
            type_vocab: 2,
            eps: 1e-12,
            head: Head::Classification { num_labels: 2 },
        };
        let pre = build_model(&cfg, 5).unwrap();
        assert!(drift_heatmap(&pre, &pre).unwrap().values.iter().flatten().all(|&v| v == 0.0));
        let mut fine = pre.clone();
        for role in ["weight", "bias"] {
            let t = fine.get_mut(&format!("encoder.layer.3.output.LayerNorm.{role}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        let table = drift_heatmap(&pre, &fine).unwrap();
        let nonzero: Vec<(usize, usize)> = table
            .values
            .iter()
            .enumerate()
            .flat_map(|(l, row)| row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(move |(c, _)| (l, c)))
            .collect();
        assert_eq!(nonzero, vec![(3, 0)]);
        assert_eq!(table.get(3, Component::OutputLayerNorm), 0.5);
        assert!(table.to_csv().starts_with("layer,component,D\n0,output.LayerNorm,0.0000000000000000e0\n"));
    }

    #[test]
    fn mismatched_trees_rejected() {
        let mut cfg = ModelConfig::bert_large_cased(Head::Regression);
        cfg.vocab_size = 5;
        cfg.hidden = 4;
        cfg.num_heads = 1;
        cfg.intermediate = 4;
        cfg.max_positions = 4;
        cfg.num_layers = 1;
        let a = build_model(&cfg, 0).unwrap();
        cfg.num_layers = 2;
        let b = build_model(&cfg, 0).unwrap();
        assert!(matches!(drift_heatmap(&a, &b), Err(Error::TreeMismatch(_))));
    }
}
