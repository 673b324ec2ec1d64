//! Empirical Fisher information, component summaries and layer heat maps.
//!
//! The Fisher value of an element is the mean over samples of its squared
//! per-sample gradient of `log p(y | x)` at the true label.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::container::{expect_version, Reader, Writer};
use crate::data::Dataset;
use crate::drift::component_index;
use crate::error::{Error, Result};
use crate::format::fmt_real;
use crate::model::params::{classify_path, is_head_path, Component, Role};
use crate::model::{ModelConfig, ParamLayout, ParamTree, Selection, Selector};
use crate::objective::negative_log_likelihood;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LNTFISH\0";
const VERSION: u32 = 1;

/// Samples per reduction chunk. Fixed so the summation order, and therefore
/// every bit of the result, does not depend on the thread count.
const CHUNK: usize = 8;

/// Per-element Fisher values over the paths touched by a scope.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherMap {
    pub task: String,
    /// Samples actually averaged over.
    pub samples: usize,
    /// Samples requested; larger than `samples` when clamped to the dataset.
    pub requested: usize,
    pub seed: u64,
    values: ParamTree,
}

impl FisherMap {
    pub fn new(task: impl Into<String>, samples: usize, requested: usize, seed: u64, values: ParamTree) -> Result<Self> {
        if let Some((p, _)) = values.iter().find(|(_, t)| t.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite())) {
            return Err(Error::InvalidArgument(format!("Fisher values of `{p}` must be finite and non-negative")));
        }
        Ok(Self {
            task: task.into(),
            samples,
            requested,
            seed,
            values,
        })
    }

    pub fn clamped(&self) -> bool {
        self.samples < self.requested
    }

    pub fn values(&self) -> &ParamTree {
        &self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        self.values.layout()
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.values.get(path)
    }

    /// Sum over every stored element.
    pub fn total(&self) -> f64 {
        self.values.iter().map(|(_, t)| t.sum()).sum()
    }

    pub fn write<W: Write>(&self, out: W) -> Result<W> {
        let mut w = Writer::new(out, MAGIC, VERSION)?;
        w.str(&self.task)?;
        w.u64(self.samples as u64)?;
        w.u64(self.requested as u64)?;
        w.u64(self.seed)?;
        w.u64(self.values.layout().len() as u64)?;
        for (path, t) in self.values.iter() {
            w.str(path)?;
            w.shape(t.shape())?;
            w.f64s(t.data())?;
        }
        w.finish()
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let (mut r, version) = Reader::new(input, MAGIC)?;
        expect_version(version, VERSION, "Fisher map")?;
        let task = r.str()?;
        let samples = r.u64()? as usize;
        let requested = r.u64()? as usize;
        let seed = r.u64()?;
        let n = r.u64()? as usize;
        let mut pairs = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let path = r.str()?;
            let shape = r.shape()?;
            let data = r.f64s(shape.iter().product())?;
            pairs.push((path, Tensor::new(shape, data)?));
        }
        r.finish()?;
        Self::new(task, samples, requested, seed, ParamTree::from_tensors(pairs)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Zero tensors for every path touched by `scope`.
fn zero_tree(params: &ParamTree, scope: &Selection) -> Result<ParamTree> {
    ParamTree::from_tensors(
        scope
            .touched_paths()
            .map(|(i, p)| (p.to_string(), Tensor::zeros(params.tensor_at(i).shape())))
            .collect(),
    )
}

/// Adds the squared gradient of sample `j` into `acc`, restricted to `scope`.
fn accumulate<F>(acc: &mut ParamTree, params: &ParamTree, scope: &Selection, nll: &F, j: usize) -> Result<()>
where
    F: Fn(&mut Graph, usize) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = nll(&mut g, j)?;
    if !g.value(loss).is_finite() {
        return Err(Error::Diverged(format!("non-finite log-likelihood at sample {j}")));
    }
    let grads = g.backward(loss)?;
    for (i, path) in scope.touched_paths() {
        let Some(grad) = grads.get(path) else { continue };
        let set = scope.set(i);
        let slot = acc.get_mut(path).expect("accumulator covers scope");
        debug_assert_eq!(grad.shape(), params.tensor_at(i).shape());
        for (k, (a, d)) in slot.data_mut().iter_mut().zip(grad.data()).enumerate() {
            if set.contains(k) {
                *a += d * d;
            }
        }
    }
    Ok(())
}

fn add_into(acc: &mut ParamTree, other: &ParamTree) {
    for i in 0..other.layout().len() {
        let src = other.tensor_at(i).data();
        for (a, b) in acc.tensor_at_mut(i).data_mut().iter_mut().zip(src) {
            *a += b;
        }
    }
}

/// Fisher values of `params` over the elements of `scope`, averaging the
/// squared gradients of `nll(graph, j)` for `j` in `0..n`. `nll` must record
/// `-log p(y_j | x_j)` with every parameter named by its path.
///
/// Elements outside `scope` on touched paths are stored as zero.
pub fn fisher_values<F>(params: &ParamTree, scope: &Selection, n: usize, nll: F) -> Result<ParamTree>
where
    F: Fn(&mut Graph, usize) -> Result<NodeId> + Sync,
{
    if n == 0 {
        return Err(Error::Empty("Fisher samples"));
    }
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let partials = starts
        .par_iter()
        .map(|&start| {
            let mut acc = zero_tree(params, scope)?;
            for j in start..(start + CHUNK).min(n) {
                accumulate(&mut acc, params, scope, &nll, j)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = zero_tree(params, scope)?;
    for p in &partials {
        add_into(&mut total, p);
    }
    let inv = 1.0 / n as f64;
    for i in 0..total.layout().len() {
        total.tensor_at_mut(i).data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(total)
}

/// Empirical Fisher of the encoder on the first `max_samples` samples of
/// `data`, in dataset order. A request beyond the dataset size is clamped and
/// the clamp is visible through [`FisherMap::clamped`]. The task head is
/// left out so that maps of different tasks share one layout.
pub fn estimate_fisher(
    params: &ParamTree,
    config: &ModelConfig,
    data: &Dataset,
    task: &str,
    scope: &Selector,
    max_samples: usize,
    seed: u64,
) -> Result<FisherMap> {
    if data.is_empty() {
        return Err(Error::Empty("Fisher dataset"));
    }
    if max_samples == 0 {
        return Err(Error::InvalidArgument("Fisher sample count must be positive".into()));
    }
    let selection = scope.resolve(params.layout())?;
    let n = max_samples.min(data.len());
    let values = fisher_values(params, &selection, n, |g, j| {
        negative_log_likelihood(g, params, config, &data.samples[j])
    })?;
    let encoder = values
        .iter()
        .filter(|(p, _)| !is_head_path(p))
        .map(|(p, t)| (p.to_string(), t.clone()))
        .collect();
    FisherMap::new(task, n, max_samples, seed, ParamTree::from_tensors(encoder)?)
}

/// Mean Fisher per encoder component, pooled over all layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub task: String,
    /// Indexed like [`Component::ALL`].
    pub mean: [f64; 8],
    /// `mean` divided by its sum; all zero when the sum is zero.
    pub normalized: [f64; 8],
}

impl ComponentSummary {
    pub fn get(&self, c: Component) -> f64 {
        self.mean[component_index(c)]
    }

    pub fn normalized(&self, c: Component) -> f64 {
        self.normalized[component_index(c)]
    }
}

/// Number of encoder layers present among `paths`, checking that every
/// layer below the highest one has `want(component, role)` paths.
fn covered_layers<'a>(
    paths: impl Iterator<Item = &'a str>,
    want: impl Fn(Component, Role) -> bool,
    expected_per_layer: usize,
) -> Result<usize> {
    let mut per_layer: Vec<usize> = Vec::new();
    for p in paths {
        if let Some((layer, c, role)) = classify_path(p) {
            if want(c, role) {
                if per_layer.len() <= layer {
                    per_layer.resize(layer + 1, 0);
                }
                per_layer[layer] += 1;
            }
        }
    }
    if per_layer.is_empty() {
        return Err(Error::InvalidArgument("Fisher map covers no encoder layer".into()));
    }
    if let Some(layer) = per_layer.iter().position(|&c| c != expected_per_layer) {
        return Err(Error::InvalidArgument(format!(
            "Fisher map covers {} of {expected_per_layer} expected paths in layer {layer}",
            per_layer[layer]
        )));
    }
    Ok(per_layer.len())
}

/// Pools every element of each component across layers. The map must cover
/// every encoder-layer path.
pub fn summarize_components(fisher: &FisherMap) -> Result<ComponentSummary> {
    covered_layers(fisher.values.iter().map(|(p, _)| p), |_, _| true, 16)?;
    let mut sums = [0.0; 8];
    let mut counts = [0usize; 8];
    for (path, t) in fisher.values.iter() {
        if let Some((_, c, _)) = classify_path(path) {
            sums[component_index(c)] += t.sum();
            counts[component_index(c)] += t.numel();
        }
    }
    let mut mean = [0.0; 8];
    for i in 0..8 {
        mean[i] = sums[i] / counts[i] as f64;
    }
    let total: f64 = mean.iter().sum();
    let normalized = if total > 0.0 { mean.map(|m| m / total) } else { [0.0; 8] };
    Ok(ComponentSummary {
        task: fisher.task.clone(),
        mean,
        normalized,
    })
}

/// Components by descending normalized Fisher summed across tasks; ties go to
/// the lexicographically smaller name.
pub fn rank_components(summaries: &[ComponentSummary]) -> Vec<(Component, f64)> {
    let mut totals: Vec<(Component, f64)> = Component::ALL
        .iter()
        .map(|&c| (c, summaries.iter().map(|s| s.normalized(c)).sum()))
        .collect();
    totals.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.name().cmp(b.0.name())));
    totals
}

/// `rank,component,score` with one row per component.
pub fn ranking_csv(ranking: &[(Component, f64)]) -> String {
    let mut out = String::from("rank,component,score\n");
    for (i, (c, v)) in ranking.iter().enumerate() {
        writeln!(out, "{},{},{}", i + 1, c.name(), fmt_real(*v)).unwrap();
    }
    out
}

/// Element-wise sum of the maps, each first divided by its own total. A map
/// with zero total contributes nothing. All maps must share a layout.
pub fn normalized_sum(maps: &[&FisherMap]) -> Result<ParamTree> {
    let first = maps.first().ok_or(Error::Empty("Fisher maps"))?;
    let mut acc = first.values.clone();
    for i in 0..acc.layout().len() {
        acc.tensor_at_mut(i).data_mut().fill(0.0);
    }
    for m in maps {
        if m.layout() != first.layout() {
            return Err(Error::TreeMismatch(format!(
                "Fisher maps `{}` and `{}` cover different parameters",
                first.task, m.task
            )));
        }
        let total = m.total();
        if total == 0.0 {
            continue;
        }
        for i in 0..acc.layout().len() {
            let src = m.values.tensor_at(i).data();
            for (a, v) in acc.tensor_at_mut(i).data_mut().iter_mut().zip(src) {
                *a += v / total;
            }
        }
    }
    Ok(acc)
}

/// Per-layer sums of output-LayerNorm Fisher, weight and bias separately.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerHeatmap {
    /// `(weight_sum, bias_sum)` per layer.
    pub rows: Vec<(f64, f64)>,
}

impl LayerHeatmap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,weight_sum,bias_sum\n");
        for (layer, (w, b)) in self.rows.iter().enumerate() {
            writeln!(out, "{layer},{},{}", fmt_real(*w), fmt_real(*b)).unwrap();
        }
        out
    }
}

/// Heat map of the output LayerNorm of every layer in `values`.
pub fn layer_heatmap(values: &ParamTree) -> Result<LayerHeatmap> {
    let is_target = |c: Component, _| c == Component::OutputLayerNorm;
    let layers = covered_layers(values.iter().map(|(p, _)| p), is_target, 2)?;
    let mut rows = vec![(0.0, 0.0); layers];
    for (path, t) in values.iter() {
        if let Some((layer, Component::OutputLayerNorm, role)) = classify_path(path) {
            match role {
                Role::Weight => rows[layer].0 = t.sum(),
                Role::Bias => rows[layer].1 = t.sum(),
            }
        }
    }
    Ok(LayerHeatmap { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::layer_path;

    fn tree(pairs: &[(&str, Vec<f64>)]) -> ParamTree {
        ParamTree::from_tensors(
            pairs
                .iter()
                .map(|(p, v)| (p.to_string(), Tensor::vector(v)))
                .collect(),
        )
        .unwrap()
    }

    fn full_encoder_map(layers: usize, value: impl Fn(Component) -> f64) -> FisherMap {
        let mut pairs = Vec::new();
        for l in 0..layers {
            for c in Component::ALL {
                for role in [Role::Weight, Role::Bias] {
                    pairs.push((layer_path(l, c, role), Tensor::full(&[3], value(c))));
                }
            }
        }
        FisherMap::new("t", 1, 1, 0, ParamTree::from_tensors(pairs).unwrap()).unwrap()
    }

    #[test]
    fn single_sample_is_squared_gradient() {
        let params = tree(&[("w", vec![3.0, -1.0]), ("unused", vec![5.0])]);
        let scope = Selector::all().resolve(params.layout()).unwrap();
        let f = fisher_values(&params, &scope, 1, |g, _| {
            let w = g.param("w", params.require("w")?.clone());
            let _ = g.param("unused", params.require("unused")?.clone());
            let t = g.constant(Tensor::vector(&[1.0, 1.0]));
            g.mse(w, t)
        })
        .unwrap();
        // d/dw mean((w - 1)^2) = (w - 1)
        assert_eq!(f.require("w").unwrap().data(), &[4.0, 4.0]);
        assert_eq!(f.require("unused").unwrap().data(), &[0.0]);
    }

    #[test]
    fn out_of_scope_elements_stay_zero() {
        let params = tree(&[("w", vec![3.0, -1.0]), ("v", vec![1.0])]);
        let scope: Selector = "w".parse().unwrap();
        let scope = scope.resolve(params.layout()).unwrap();
        let f = fisher_values(&params, &scope, 3, |g, j| {
            let w = g.param("w", params.require("w")?.clone());
            let s = g.sum(w);
            Ok(g.scale(s, j as f64))
        })
        .unwrap();
        assert!(f.get("v").is_none());
        // gradients j for j = 0, 1, 2: mean of squares 5/3
        assert!((f.require("w").unwrap().data()[0] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let map = FisherMap::new("rte", 4, 9, 3, tree(&[("a", vec![0.5, 1e-300]), ("b", vec![2.0])])).unwrap();
        assert!(map.clamped());
        let bytes = map.write(Vec::new()).unwrap();
        assert_eq!(FisherMap::read(bytes.as_slice()).unwrap(), map);
        assert_eq!(map.write(Vec::new()).unwrap(), bytes);
        assert!(FisherMap::read(&bytes[..bytes.len() - 1]).is_err());
        assert!(FisherMap::new("x", 1, 1, 0, tree(&[("a", vec![-1.0])])).is_err());
    }

    #[test]
    fn uniform_summary_is_an_eighth() {
        let s = summarize_components(&full_encoder_map(3, |_| 2.5)).unwrap();
        for c in Component::ALL {
            assert_eq!(s.get(c), 2.5);
            assert!((s.normalized(c) - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_component_ranks_first() {
        let only = |c: Component| if c == Component::OutputLayerNorm { 1.0 } else { 0.0 };
        let s = summarize_components(&full_encoder_map(2, only)).unwrap();
        assert_eq!(s.normalized(Component::OutputLayerNorm), 1.0);
        assert_eq!(rank_components(&[s])[0].0, Component::OutputLayerNorm);
    }

    #[test]
    fn ranking_ignores_task_scale() {
        let shape_a = |c: Component| 1.0 + component_index(c) as f64;
        let shape_b = |c: Component| 9.0 - component_index(c) as f64 * 0.5;
        let a = summarize_components(&full_encoder_map(2, shape_a)).unwrap();
        let b = summarize_components(&full_encoder_map(2, shape_b)).unwrap();
        let a_big = summarize_components(&full_encoder_map(2, |c| 1000.0 * shape_a(c))).unwrap();
        let order = |r: Vec<(Component, f64)>| r.into_iter().map(|(c, _)| c).collect::<Vec<_>>();
        assert_eq!(order(rank_components(&[a, b.clone()])), order(rank_components(&[a_big, b])));
    }

    #[test]
    fn ties_break_by_name() {
        let s = summarize_components(&full_encoder_map(1, |_| 1.0)).unwrap();
        let names: Vec<&str> = rank_components(&[s]).iter().map(|(c, _)| c.name()).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        assert_eq!(names, sorted);
    }

    #[test]
    fn missing_component_is_an_error() {
        let mut map = full_encoder_map(2, |_| 1.0);
        let pairs = map
            .values
            .iter()
            .filter(|(p, _)| !p.contains("intermediate"))
            .map(|(p, t)| (p.to_string(), t.clone()))
            .collect();
        map.values = ParamTree::from_tensors(pairs).unwrap();
        assert!(summarize_components(&map).is_err());
    }

    #[test]
    fn heatmap_counts_elements() {
        let mut pairs = Vec::new();
        for l in 0..24 {
            for role in [Role::Weight, Role::Bias] {
                pairs.push((layer_path(l, Component::OutputLayerNorm, role), Tensor::ones(&[1024])));
            }
        }
        let h = layer_heatmap(&ParamTree::from_tensors(pairs.clone()).unwrap()).unwrap();
        assert_eq!(h.rows, vec![(1024.0, 1024.0); 24]);
        assert!(h.to_csv().starts_with("layer,weight_sum,bias_sum\n0,1.0240000000000000e3,1.0240000000000000e3\n"));
        pairs.retain(|(p, _)| !p.starts_with("encoder.layer.5."));
        assert!(layer_heatmap(&ParamTree::from_tensors(pairs).unwrap()).is_err());
    }

    #[test]
    fn normalized_sum_per_task() {
        let a = FisherMap::new("a", 1, 1, 0, tree(&[("p", vec![2.0, 0.0])])).unwrap();
        let b = FisherMap::new("b", 1, 1, 0, tree(&[("p", vec![0.0, 8.0])])).unwrap();
        let s = normalized_sum(&[&a, &b]).unwrap();
        assert_eq!(s.require("p").unwrap().data(), &[1.0, 1.0]);
    }
}
