//! Finite-difference verification of backward gradients.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::model::ParamTree;

/// Elements checked per tensor at most; larger tensors are sampled.
pub const MAX_CHECKED_PER_TENSOR: usize = 64;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter path.
    pub per_param: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }

    /// Paths whose error is at or above the tolerance.
    pub fn failures(&self) -> Vec<(&str, f64)> {
        self.per_param
            .iter()
            .filter(|(_, &e)| e >= self.tolerance)
            .map(|(p, &e)| (p.as_str(), e))
            .collect()
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares backward gradients of the scalar loss produced by `build` with
/// five-point central differences (error `O(step^4)`), on every parameter of
/// `params`.
pub fn grad_check<F>(build: F, params: &ParamTree, step: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<NodeId>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |p: &ParamTree| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).data()[0])
    };
    let analytic = {
        let mut g = Graph::new();
        let loss = build(&mut g, params)?;
        g.backward(loss)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut per_param = BTreeMap::new();
    for i in 0..params.layout().len() {
        let path = params.layout().entries()[i].path.clone();
        let numel = params.tensor_at(i).numel();
        let indices: Vec<usize> = if numel <= MAX_CHECKED_PER_TENSOR {
            (0..numel).collect()
        } else {
            let mut v = rand::seq::index::sample(&mut rng, numel, MAX_CHECKED_PER_TENSOR).into_vec();
            v.sort_unstable();
            v
        };
        let grad = analytic.get(&path);
        let mut worst: f64 = 0.0;
        for j in indices {
            let original = params.tensor_at(i).data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                probe.tensor_at_mut(i).data_mut()[j] = original + offset;
                eval(&probe)
            };
            let (up2, up, down, down2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            probe.tensor_at_mut(i).data_mut()[j] = original;
            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
            let a = grad.map_or(0.0, |t| t.data()[j]);
            worst = worst.max(relative_error(a, numeric));
        }
        per_param.insert(path, worst);
    }
    Ok(GradCheckReport { per_param, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tree(pairs: &[(&str, Tensor)]) -> ParamTree {
        ParamTree::from_tensors(pairs.iter().map(|(p, t)| (p.to_string(), t.clone())).collect()).unwrap()
    }

    #[test]
    fn linear_model_quadratic_loss_is_near_exact() {
        let params = tree(&[("w", Tensor::vector(&[0.7, -1.3]))]);
        let x = Tensor::matrix(&[&[1.0, 2.0], &[-0.5, 3.0], &[2.0, 0.25]]).unwrap();
        let y = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let report = grad_check(
            |g, p| {
                let xn = g.constant(x.clone());
                let w = g.param("w", p.require("w")?.reshaped(vec![1, 2])?);
                let pred = g.linear(xn, w, None)?;
                let t = g.constant(y.clone());
                g.mse(pred, t)
            },
            &params,
            1e-5,
            1e-7,
            0,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.per_param);
    }

    #[test]
    fn constant_loss_reports_zero() {
        let params = tree(&[("p", Tensor::vector(&[1.0, 2.0, 3.0]))]);
        let report = grad_check(
            |g, p| {
                let _ = g.param("p", p.require("p")?.clone());
                Ok(g.constant(Tensor::scalar(4.2)))
            },
            &params,
            1e-5,
            1e-12,
            0,
        )
        .unwrap();
        assert_eq!(report.max_error(), 0.0);
    }

    #[test]
    fn zero_tolerance_flags_roundoff() {
        let params = tree(&[("p", Tensor::vector(&[0.3, -0.8]))]);
        let report = grad_check(
            |g, p| {
                let x = g.param("p", p.require("p")?.clone());
                let y = g.gelu(x);
                let y = g.tanh(y);
                Ok(g.sum(y))
            },
            &params,
            1e-5,
            0.0,
            0,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().len(), 1);
        assert!(report.max_error() < 1e-8);
    }
}
