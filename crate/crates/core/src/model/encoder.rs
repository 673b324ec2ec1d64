//! Initialization and forward pass of the encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Head, ModelConfig};
use super::params::{classify_path, layer_path, Component, ParamLayout, ParamTree, Role};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// A padded batch of token sequences, all `[batch, seq]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub batch: usize,
    pub seq: usize,
    pub token_ids: Vec<usize>,
    pub type_ids: Vec<usize>,
    /// `true` for positions that may be attended to.
    pub attention_mask: Vec<bool>,
}

impl EncoderInput {
    pub fn new(
        batch: usize,
        seq: usize,
        token_ids: Vec<usize>,
        type_ids: Vec<usize>,
        attention_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = batch * seq;
        if batch == 0 || seq == 0 || token_ids.len() != n || type_ids.len() != n || attention_mask.len() != n {
            return Err(Error::shape(
                "encoder input",
                format!(
                    "{batch}x{seq} with {} tokens, {} types, {} mask flags",
                    token_ids.len(),
                    type_ids.len(),
                    attention_mask.len()
                ),
            ));
        }
        Ok(Self {
            batch,
            seq,
            token_ids,
            type_ids,
            attention_mask,
        })
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect()
}

fn init_tensor(path: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel = shape.iter().product();
    if path.contains(".LayerNorm.weight") {
        Tensor::ones(shape)
    } else if path.ends_with(".bias") {
        Tensor::zeros(shape)
    } else {
        Tensor::from_parts(shape.to_vec(), truncated_normal(rng, numel))
    }
}

/// Fresh parameters for `config`: truncated normal (std 0.02, cut at two
/// standard deviations) for weight matrices and embeddings, zeros for biases,
/// ones for LayerNorm weights.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ParamTree> {
    let layout = ParamLayout::for_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = layout
        .entries()
        .iter()
        .map(|e| (e.path.clone(), init_tensor(&e.path, &e.shape, &mut rng)))
        .collect();
    ParamTree::from_tensors(pairs)
}

/// Replaces the task head with a freshly initialized one, returning the
/// adjusted config. The head stream is seeded independently of the body.
pub fn reinit_head(params: &mut ParamTree, config: &ModelConfig, head: Head, seed: u64) -> Result<ModelConfig> {
    let mut cfg = config.clone();
    cfg.head = head;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
    let w = Tensor::from_parts(vec![head.outputs(), cfg.hidden], truncated_normal(&mut rng, head.outputs() * cfg.hidden));
    params.set("classifier.weight", w)?;
    params.set("classifier.bias", Tensor::zeros(&[head.outputs()]))?;
    Ok(cfg)
}

/// Checks that `params` holds exactly the paths and shapes `config` defines.
pub fn check_params(params: &ParamTree, config: &ModelConfig) -> Result<()> {
    let expected = ParamLayout::for_config(config)?;
    if &expected != params.layout() {
        let missing: Vec<&str> = expected
            .entries()
            .iter()
            .filter(|e| params.layout().entry(&e.path) != Some(e))
            .map(|e| e.path.as_str())
            .collect();
        return Err(Error::TreeMismatch(format!(
            "parameters do not match config; first differing paths: {:?}",
            &missing[..missing.len().min(5)]
        )));
    }
    Ok(())
}

/// Leaf handles for one forward pass.
struct Leaves<'a> {
    params: &'a ParamTree,
}

impl Leaves<'_> {
    fn get(&self, g: &mut Graph, path: &str) -> Result<NodeId> {
        let t = self.params.require(path)?;
        Ok(g.param(path, t.clone()))
    }

    fn layer(&self, g: &mut Graph, layer: usize, c: Component) -> Result<(NodeId, NodeId)> {
        Ok((
            self.get(g, &layer_path(layer, c, Role::Weight))?,
            self.get(g, &layer_path(layer, c, Role::Bias))?,
        ))
    }
}

/// Records the encoder on `g` and returns the logits node, `[batch, outputs]`.
pub fn forward_batch(g: &mut Graph, params: &ParamTree, config: &ModelConfig, input: &EncoderInput) -> Result<NodeId> {
    let (b, s, h) = (input.batch, input.seq, config.hidden);
    if s > config.max_positions {
        return Err(Error::OutOfRange {
            what: "positions",
            index: s,
            bound: config.max_positions,
        });
    }
    if let Some(&bad) = input.token_ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::OutOfRange {
            what: "vocabulary",
            index: bad,
            bound: config.vocab_size,
        });
    }
    if let Some(&bad) = input.type_ids.iter().find(|&&t| t >= config.type_vocab) {
        return Err(Error::OutOfRange {
            what: "token types",
            index: bad,
            bound: config.type_vocab,
        });
    }
    let p = Leaves { params };
    let heads = config.num_heads;

    let word = p.get(g, "embeddings.word")?;
    let pos = p.get(g, "embeddings.position")?;
    let typ = p.get(g, "embeddings.token_type")?;
    let we = g.embedding(word, &input.token_ids)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let pe = g.embedding(pos, &positions)?;
    let te = g.embedding(typ, &input.type_ids)?;
    let x = g.add(we, pe)?;
    let x = g.add(x, te)?;
    let lw = p.get(g, "embeddings.LayerNorm.weight")?;
    let lb = p.get(g, "embeddings.LayerNorm.bias")?;
    let mut x = g.layer_norm(x, lw, lb, config.eps)?;

    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    for layer in 0..config.num_layers {
        let (qw, qb) = p.layer(g, layer, Component::AttentionQuery)?;
        let (kw, kb) = p.layer(g, layer, Component::AttentionKey)?;
        let (vw, vb) = p.layer(g, layer, Component::AttentionValue)?;
        let q = g.linear(x, qw, Some(qb))?;
        let k = g.linear(x, kw, Some(kb))?;
        let v = g.linear(x, vw, Some(vb))?;
        let q = g.split_heads(q, b, s, heads)?;
        let k = g.split_heads(k, b, s, heads)?;
        let v = g.split_heads(v, b, s, heads)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, scale);
        let scores = g.mask_keys(scores, &input.attention_mask, heads)?;
        let probs = g.softmax(scores)?;
        let ctx = g.batch_matmul(probs, v, false)?;
        let ctx = g.merge_heads(ctx, b, s, heads)?;

        let (ow, ob) = p.layer(g, layer, Component::AttentionOutputDense)?;
        let attn = g.linear(ctx, ow, Some(ob))?;
        let attn = g.add(attn, x)?;
        let (aw, ab) = p.layer(g, layer, Component::AttentionOutputLayerNorm)?;
        let attn = g.layer_norm(attn, aw, ab, config.eps)?;

        let (iw, ib) = p.layer(g, layer, Component::IntermediateDense)?;
        let inter = g.linear(attn, iw, Some(ib))?;
        let inter = g.gelu(inter);
        let (dw, db) = p.layer(g, layer, Component::OutputDense)?;
        let out = g.linear(inter, dw, Some(db))?;
        let out = g.add(out, attn)?;
        let (nw, nb) = p.layer(g, layer, Component::OutputLayerNorm)?;
        x = g.layer_norm(out, nw, nb, config.eps)?;
    }
    debug_assert_eq!(g.value(x).shape(), &[b * s, h]);

    let first: Vec<usize> = (0..b).map(|i| i * s).collect();
    let cls = g.gather_rows(x, &first)?;
    let pw = p.get(g, "pooler.dense.weight")?;
    let pb = p.get(g, "pooler.dense.bias")?;
    let pooled = g.linear(cls, pw, Some(pb))?;
    let pooled = g.tanh(pooled);
    let cw = p.get(g, "classifier.weight")?;
    let cb = p.get(g, "classifier.bias")?;
    g.linear(pooled, cw, Some(cb))
}

/// Logits for a batch without recording gradients for later use.
pub fn predict(params: &ParamTree, config: &ModelConfig, input: &EncoderInput) -> Result<Tensor> {
    let mut g = Graph::new();
    let logits = forward_batch(&mut g, params, config, input)?;
    Ok(g.value(logits).clone())
}

/// Closed-form scalar count of the encoder defined by `config`.
pub fn closed_form_count(config: &ModelConfig) -> u64 {
    let (v, p, t) = (config.vocab_size as u64, config.max_positions as u64, config.type_vocab as u64);
    let (h, m, l) = (config.hidden as u64, config.intermediate as u64, config.num_layers as u64);
    let c = config.head.outputs() as u64;
    let embeddings = (v + p + t) * h + 2 * h;
    let attention = 4 * (h * h + h) + 2 * h;
    let ffn = (h * m + m) + (m * h + h) + 2 * h;
    embeddings + l * (attention + ffn) + (h * h + h) + (c * h + c)
}

/// Encoder layer of a path, if any.
pub fn layer_of(path: &str) -> Option<usize> {
    classify_path(path).map(|(l, _, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            hidden: 8,
            num_layers: 2,
            num_heads: 2,
            intermediate: 16,
            max_positions: 16,
            type_vocab: 2,
            eps: 1e-12,
            head: Head::Classification { num_labels: 2 },
        }
    }

    fn input(rows: &[[usize; 4]], mask: &[[bool; 4]]) -> EncoderInput {
        EncoderInput::new(
            rows.len(),
            4,
            rows.iter().flatten().copied().collect(),
            vec![0; rows.len() * 4],
            mask.iter().flatten().copied().collect(),
        )
        .unwrap()
    }

    #[test]
    fn tiny_count_matches_closed_form_and_enumeration() {
        let cfg = tiny_config();
        let params = build_model(&cfg, 0).unwrap();
        let enumerated: u64 = params.iter().map(|(_, t)| t.numel() as u64).sum();
        // embeddings: (V + P + T) h + 2h
        // per layer: 4 (h^2 + h) + 2h + (h m + m) + (m h + h) + 2h
        // pooler h^2 + h, head 2h + 2
        let golden = (11 + 16 + 2) * 8 + 16 + 2 * (4 * 72 + 16 + 144 + 136 + 16) + 72 + 18;
        assert_eq!(golden, 1_538);
        assert_eq!(enumerated, golden);
        assert_eq!(closed_form_count(&cfg), golden);
    }

    #[test]
    fn init_rules() {
        let params = build_model(&tiny_config(), 3).unwrap();
        for (path, t) in params.iter() {
            if path.contains("output.LayerNorm.weight") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{path}");
            }
            if path.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{path}");
            }
            if path.ends_with("dense.weight") || path.starts_with("embeddings.word") {
                assert!(t.data().iter().all(|v| v.abs() <= 0.04), "{path}");
                assert!(t.data().iter().any(|&v| v != 0.0), "{path}");
            }
        }
        assert_eq!(build_model(&tiny_config(), 3).unwrap(), params);
        assert_ne!(build_model(&tiny_config(), 4).unwrap(), params);
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let cfg = tiny_config();
        let params = build_model(&cfg, 1).unwrap();
        let x = input(&[[1, 5, 7, 2], [1, 5, 7, 2]], &[[true; 4], [true; 4]]);
        let out = predict(&params, &cfg, &x).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data()[..2], out.data()[2..]);
    }

    #[test]
    fn padding_mask_changes_logits() {
        let cfg = tiny_config();
        let params = build_model(&cfg, 1).unwrap();
        let masked = input(&[[1, 5, 7, 0]], &[[true, true, true, false]]);
        let attended = input(&[[1, 5, 7, 0]], &[[true; 4]]);
        let a = predict(&params, &cfg, &masked).unwrap();
        let b = predict(&params, &cfg, &attended).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-9, "diff {diff}");
    }

    #[test]
    fn padding_beyond_mask_is_inert() {
        let cfg = tiny_config();
        let params = build_model(&cfg, 1).unwrap();
        let short = EncoderInput::new(1, 3, vec![1, 5, 7], vec![0; 3], vec![true; 3]).unwrap();
        let padded = input(&[[1, 5, 7, 9]], &[[true, true, true, false]]);
        let a = predict(&params, &cfg, &short).unwrap();
        let b = predict(&params, &cfg, &padded).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let cfg = tiny_config();
        let params = build_model(&cfg, 1).unwrap();
        let x = input(&[[1, 11, 7, 2]], &[[true; 4]]);
        assert!(matches!(predict(&params, &cfg, &x), Err(Error::OutOfRange { .. })));
        let long = EncoderInput::new(1, 17, vec![1; 17], vec![0; 17], vec![true; 17]).unwrap();
        assert!(predict(&params, &cfg, &long).is_err());
    }

    #[test]
    fn regression_head_outputs_one_column() {
        let mut cfg = tiny_config();
        cfg.head = Head::Regression;
        let params = build_model(&cfg, 1).unwrap();
        let x = input(&[[1, 5, 7, 2], [1, 3, 3, 2], [1, 4, 2, 2]], &[[true; 4]; 3]);
        assert_eq!(predict(&params, &cfg, &x).unwrap().shape(), &[3, 1]);
    }

    #[test]
    fn reinit_head_resizes_classifier() {
        let cfg = tiny_config();
        let mut params = build_model(&cfg, 1).unwrap();
        let body_before = params.require("pooler.dense.weight").unwrap().clone();
        let cfg2 = reinit_head(&mut params, &cfg, Head::Classification { num_labels: 5 }, 9).unwrap();
        check_params(&params, &cfg2).unwrap();
        assert!(check_params(&params, &cfg).is_err());
        assert_eq!(params.require("classifier.weight").unwrap().shape(), &[5, 8]);
        assert_eq!(params.require("pooler.dense.weight").unwrap(), &body_before);
    }
}
