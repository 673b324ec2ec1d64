use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Task head attached to the pooled first-token representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Classification { num_labels: usize },
    /// Single scalar output trained with squared error.
    Regression,
}

impl Head {
    pub fn outputs(&self) -> usize {
        match self {
            Head::Classification { num_labels } => *num_labels,
            Head::Regression => 1,
        }
    }
}

/// Parses `classification:<n>` or `regression`.
impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "regression" {
            return Ok(Head::Regression);
        }
        s.strip_prefix("classification:")
            .and_then(|n| n.parse().ok())
            .filter(|&n| n >= 2)
            .map(|num_labels| Head::Classification { num_labels })
            .ok_or_else(|| Error::Config(format!("expected classification:<n> (n >= 2) or regression, got `{s}`")))
    }
}

/// Encoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    pub eps: f64,
    pub head: Head,
}

pub const DEFAULT_EPS: f64 = 1e-12;

impl ModelConfig {
    /// Shape of the 24-layer, 1024-wide cased encoder.
    pub fn bert_large_cased(head: Head) -> Self {
        Self {
            vocab_size: 28996,
            hidden: 1024,
            num_layers: 24,
            num_heads: 16,
            intermediate: 4096,
            max_positions: 512,
            type_vocab: 2,
            eps: DEFAULT_EPS,
            head,
        }
    }

    /// Two-layer, 32-wide encoder over the synthetic vocabulary.
    pub fn toy(head: Head) -> Self {
        Self {
            vocab_size: crate::data::TOY_VOCAB_SIZE,
            hidden: 32,
            num_layers: 2,
            num_heads: 4,
            intermediate: 64,
            max_positions: 16,
            type_vocab: 2,
            eps: DEFAULT_EPS,
            head,
        }
    }

    /// Looks up a named preset.
    pub fn preset(name: &str, head: Head) -> Result<Self> {
        match name {
            "bert-large-cased" => Ok(Self::bert_large_cased(head)),
            "bert-base-cased" => Ok(Self {
                vocab_size: 28996,
                hidden: 768,
                num_layers: 12,
                num_heads: 12,
                intermediate: 3072,
                max_positions: 512,
                type_vocab: 2,
                eps: DEFAULT_EPS,
                head,
            }),
            "toy" => Ok(Self::toy(head)),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("intermediate", self.intermediate),
            ("max_positions", self.max_positions),
            ("type_vocab", self.type_vocab),
            ("head outputs", self.head.outputs()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }
}
