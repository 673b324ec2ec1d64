//! Task losses and predictions on top of the encoder.

use crate::autodiff::{Graph, NodeId};
use crate::data::{encode_batch, Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_metric, Labels, MetricKind, MetricValue, Predictions};
use crate::model::config::{Head, ModelConfig};
use crate::model::{forward_batch, predict, ParamTree};
use crate::tensor::Tensor;

fn class_labels(samples: &[&Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match s.label {
            Label::Class(c) => Ok(c),
            Label::Value(_) => Err(Error::InvalidArgument("real-valued label for a classification head".into())),
        })
        .collect()
}

fn value_labels(samples: &[&Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| match s.label {
            Label::Value(v) => Ok(v),
            Label::Class(_) => Err(Error::InvalidArgument("class label for a regression head".into())),
        })
        .collect()
}

/// Mean training loss over `samples`: cross-entropy for classification heads,
/// squared error for the regression head.
pub fn batch_loss(g: &mut Graph, params: &ParamTree, config: &ModelConfig, samples: &[&Sample]) -> Result<NodeId> {
    let input = encode_batch(samples)?;
    let logits = forward_batch(g, params, config, &input)?;
    match config.head {
        Head::Classification { .. } => g.cross_entropy(logits, &class_labels(samples)?),
        Head::Regression => {
            let y = g.constant(Tensor::new(vec![samples.len(), 1], value_labels(samples)?)?);
            g.mse(logits, y)
        }
    }
}

/// `-log p(y | x)` of one sample up to a constant. The regression likelihood
/// is a unit-variance Gaussian, so the loss is half the squared error.
pub fn negative_log_likelihood(g: &mut Graph, params: &ParamTree, config: &ModelConfig, sample: &Sample) -> Result<NodeId> {
    let loss = batch_loss(g, params, config, &[sample])?;
    Ok(match config.head {
        Head::Classification { .. } => loss,
        Head::Regression => g.scale(loss, 0.5),
    })
}

/// Model outputs over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Outputs {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// Argmax classes (lowest index on ties) or regression values, computed in
/// batches of `batch_size`.
pub fn predict_dataset(params: &ParamTree, config: &ModelConfig, data: &Dataset, batch_size: usize) -> Result<Outputs> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut classes = Vec::new();
    let mut values = Vec::new();
    let refs: Vec<&Sample> = data.samples.iter().collect();
    for chunk in refs.chunks(batch_size) {
        let logits = predict(params, config, &encode_batch(chunk)?)?;
        let width = logits.last_dim();
        for row in logits.data().chunks(width) {
            match config.head {
                Head::Classification { .. } => {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    classes.push(best);
                }
                Head::Regression => values.push(row[0]),
            }
        }
    }
    Ok(match config.head {
        Head::Classification { .. } => Outputs::Classes(classes),
        Head::Regression => Outputs::Values(values),
    })
}

/// Scores `outputs` against the labels of `data`.
pub fn score_outputs(metric: MetricKind, outputs: &Outputs, data: &Dataset) -> Result<MetricValue> {
    let refs: Vec<&Sample> = data.samples.iter().collect();
    match outputs {
        Outputs::Classes(p) => {
            let labels = class_labels(&refs)?;
            let partitions: Option<Vec<bool>> = refs.iter().map(|s| s.matched).collect();
            evaluate_metric(
                metric,
                &Predictions::Classes(p),
                &Labels::Classes {
                    labels: &labels,
                    partitions: partitions.as_deref(),
                },
            )
        }
        Outputs::Values(p) => {
            let labels = value_labels(&refs)?;
            evaluate_metric(metric, &Predictions::Values(p), &Labels::Values(&labels))
        }
    }
}

pub fn evaluate(params: &ParamTree, config: &ModelConfig, data: &Dataset, metric: MetricKind, batch_size: usize) -> Result<MetricValue> {
    score_outputs(metric, &predict_dataset(params, config, data, batch_size)?, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthKind, SynthUri};
    use crate::model::build_model;

    fn config(head: Head) -> ModelConfig {
        ModelConfig {
            vocab_size: crate::data::TOY_VOCAB_SIZE,
            hidden: 8,
            num_layers: 1,
            num_heads: 2,
            intermediate: 16,
            max_positions: 16,
            type_vocab: 2,
            eps: 1e-12,
            head,
        }
    }

    #[test]
    fn regression_likelihood_is_half_squared_error() {
        let cfg = config(Head::Regression);
        let params = build_model(&cfg, 1).unwrap();
        let ds = synthesize(&SynthUri {
            kind: SynthKind::PairReg,
            seed: 2,
            n: 1,
        });
        let s = &ds.samples[0];
        let Outputs::Values(v) = predict_dataset(&params, &cfg, &ds, 4).unwrap() else {
            panic!("expected values")
        };
        let Label::Value(y) = s.label else { panic!() };
        let mut g = Graph::new();
        let nll = negative_log_likelihood(&mut g, &params, &cfg, s).unwrap();
        assert!((g.value(nll).data()[0] - 0.5 * (v[0] - y).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn batched_prediction_matches_single() {
        let cfg = config(Head::Classification { num_labels: 2 });
        let params = build_model(&cfg, 4).unwrap();
        let ds = synthesize(&SynthUri {
            kind: SynthKind::Single,
            seed: 5,
            n: 9,
        });
        let a = predict_dataset(&params, &cfg, &ds, 4).unwrap();
        let b = predict_dataset(&params, &cfg, &ds, 1).unwrap();
        assert_eq!(a, b);
        assert!(predict_dataset(&params, &cfg, &ds, 0).is_err());
    }

    #[test]
    fn label_kind_must_match_head() {
        let cfg = config(Head::Classification { num_labels: 2 });
        let params = build_model(&cfg, 4).unwrap();
        let ds = synthesize(&SynthUri {
            kind: SynthKind::PairReg,
            seed: 5,
            n: 2,
        });
        let mut g = Graph::new();
        let refs: Vec<&Sample> = ds.samples.iter().collect();
        assert!(batch_loss(&mut g, &params, &cfg, &refs).is_err());
    }
}
