//! Labeled datasets: TSV ingestion, the toy vocabulary and seeded
//! synthetic tasks.
//!
//! Synthetic sentences are five content tokens. Every content token carries a
//! topic (one of four) and a polarity (positive or negative). A sentence has a
//! dominant topic (four of its five tokens) and a sign (the majority
//! polarity). The generated tasks are functions of these latent factors:
//!
//! | URI kind    | input  | target                                            |
//! |-------------|--------|---------------------------------------------------|
//! | `single`    | A      | sign of A                                         |
//! | `pairclass` | A, B   | A and B share their dominant topic                |
//! | `pairreg`   | A, B   | `(4 [topics match] + 2 [signs match] + [A positive]) / 7` |
//! | `pretrain`  | A (, B)| 40-way joint label over topics and signs          |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::model::config::Head;
use crate::model::EncoderInput;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;

const TOPICS: [&str; 4] = ["sport", "food", "tech", "music"];
const POLARITIES: [&str; 2] = ["good", "bad"];
const VARIANTS: usize = 4;
const FIRST_CONTENT: usize = 4;
const SENTENCE_LEN: usize = 5;
const DOMINANT_COUNT: usize = 4;

/// Size of the toy vocabulary: four specials plus 4 topics x 2 polarities x 4 variants.
pub const TOY_VOCAB_SIZE: usize = FIRST_CONTENT + TOPICS.len() * POLARITIES.len() * VARIANTS;
const SINGLE_PRETRAIN_CLASSES: usize = TOPICS.len() * 2;
/// Classes of the `pretrain` task: 4 x 2 single-sentence labels (topic, sign)
/// plus 4 x 2 x 2 x 2 pair labels (topic of A, same topic, sign of A, sign of B).
pub const PRETRAIN_CLASSES: usize = SINGLE_PRETRAIN_CLASSES + TOPICS.len() * 8;

/// Token id of a content word.
pub fn content_token(topic: usize, positive: bool, variant: usize) -> usize {
    FIRST_CONTENT + topic * POLARITIES.len() * VARIANTS + usize::from(!positive) * VARIANTS + variant
}

/// `(topic, positive)` of a content token.
pub fn token_factors(id: usize) -> Option<(usize, bool)> {
    if !(FIRST_CONTENT..TOY_VOCAB_SIZE).contains(&id) {
        return None;
    }
    let k = id - FIRST_CONTENT;
    Some((k / (POLARITIES.len() * VARIANTS), (k / VARIANTS) % 2 == 0))
}

pub fn toy_word(id: usize) -> String {
    match id {
        PAD => "[PAD]".into(),
        CLS => "[CLS]".into(),
        SEP => "[SEP]".into(),
        UNK => "[UNK]".into(),
        _ => match token_factors(id) {
            Some((t, pos)) => {
                let v = (id - FIRST_CONTENT) % VARIANTS;
                format!("{}_{}{v}", TOPICS[t], POLARITIES[usize::from(!pos)])
            }
            None => "[UNK]".into(),
        },
    }
}

/// Maps a toy word to its id; unknown words map to `[UNK]`.
pub fn toy_token(word: &str) -> usize {
    (0..TOY_VOCAB_SIZE).find(|&id| toy_word(id) == word).unwrap_or(UNK)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SingleClassification,
    PairClassification,
    PairRegression,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SingleClassification => "single",
            TaskKind::PairClassification => "pairclass",
            TaskKind::PairRegression => "pairreg",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TaskKind::SingleClassification),
            "pairclass" => Ok(TaskKind::PairClassification),
            "pairreg" => Ok(TaskKind::PairRegression),
            _ => Err(Error::InvalidArgument(format!(
                "unknown task kind `{s}` (expected single, pairclass or pairreg)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    /// Integer labels `0..n`.
    Classes(usize),
    /// Real labels within `[lo, hi]`.
    Range(f64, f64),
}

/// Task description: input form, metric and label domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub metric: MetricKind,
    pub labels: LabelSpace,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind, metric: MetricKind, labels: LabelSpace) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            kind,
            metric,
            labels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The conventional metric for `kind` with binary labels or a `[0, 1]` range.
    pub fn default_for(name: impl Into<String>, kind: TaskKind) -> Self {
        let (metric, labels) = match kind {
            TaskKind::PairRegression => (MetricKind::Spearman, LabelSpace::Range(0.0, 1.0)),
            _ => (MetricKind::Accuracy, LabelSpace::Classes(2)),
        };
        Self {
            name: name.into(),
            kind,
            metric,
            labels,
        }
    }

    /// Task spec matching a synthetic URI kind.
    pub fn for_synthetic(name: impl Into<String>, kind: SynthKind) -> Self {
        match kind {
            SynthKind::Single => Self::default_for(name, TaskKind::SingleClassification),
            SynthKind::PairClass => Self::default_for(name, TaskKind::PairClassification),
            SynthKind::PairReg => Self::default_for(name, TaskKind::PairRegression),
            SynthKind::Pretrain => Self {
                name: name.into(),
                kind: TaskKind::PairClassification,
                metric: MetricKind::Accuracy,
                labels: LabelSpace::Classes(PRETRAIN_CLASSES),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let regression = self.kind == TaskKind::PairRegression;
        if regression != self.metric.is_regression() {
            return Err(Error::InvalidArgument(format!(
                "metric {} does not fit a {} task",
                self.metric, self.kind
            )));
        }
        match (regression, self.labels) {
            (true, LabelSpace::Range(lo, hi)) if lo < hi => Ok(()),
            (false, LabelSpace::Classes(n)) if n >= 2 => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "label space {:?} does not fit a {} task",
                self.labels, self.kind
            ))),
        }
    }

    pub fn head(&self) -> Head {
        match self.labels {
            LabelSpace::Classes(n) => Head::Classification { num_labels: n },
            LabelSpace::Range(..) => Head::Regression,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub first: Vec<usize>,
    pub second: Option<Vec<usize>>,
    pub label: Label,
    /// MNLI-style partition flag: `Some(true)` for matched examples.
    pub matched: Option<bool>,
}

impl Sample {
    fn encoded_len(&self) -> usize {
        2 + self.first.len() + self.second.as_ref().map_or(0, |s| s.len() + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Longest encoded sequence, `[CLS] A [SEP] (B [SEP])`.
    pub fn max_seq_len(&self) -> usize {
        self.samples.iter().map(Sample::encoded_len).max().unwrap_or(0)
    }
}

/// Encodes samples as `[CLS] A [SEP] B [SEP]`, padded to the longest one.
pub fn encode_batch(samples: &[&Sample]) -> Result<EncoderInput> {
    let seq = samples.iter().map(|s| s.encoded_len()).max().unwrap_or(0);
    let mut tokens = Vec::with_capacity(samples.len() * seq);
    let mut types = Vec::with_capacity(samples.len() * seq);
    let mut mask = Vec::with_capacity(samples.len() * seq);
    for s in samples {
        let start = tokens.len();
        tokens.push(CLS);
        tokens.extend_from_slice(&s.first);
        tokens.push(SEP);
        types.resize(tokens.len(), 0);
        if let Some(b) = &s.second {
            tokens.extend_from_slice(b);
            tokens.push(SEP);
            types.resize(tokens.len(), 1);
        }
        mask.resize(tokens.len(), true);
        tokens.resize(start + seq, PAD);
        types.resize(start + seq, 0);
        mask.resize(start + seq, false);
    }
    EncoderInput::new(samples.len(), seq, tokens, types, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Single,
    PairClass,
    PairReg,
    Pretrain,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(SynthKind::Single),
            "pairclass" => Ok(SynthKind::PairClass),
            "pairreg" => Ok(SynthKind::PairReg),
            "pretrain" => Ok(SynthKind::Pretrain),
            _ => Err(Error::InvalidArgument(format!("unknown synthetic kind `{s}`"))),
        }
    }
}

/// Parsed `synth://<kind>/<seed>/<n>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthUri {
    pub kind: SynthKind,
    pub seed: u64,
    pub n: usize,
}

impl SynthUri {
    pub fn parse(uri: &str) -> Option<Result<Self>> {
        let rest = uri.strip_prefix("synth://")?;
        let parts: Vec<&str> = rest.split('/').collect();
        let bad = || Error::InvalidArgument(format!("expected synth://<kind>/<seed>/<n>, got `{uri}`"));
        Some((|| {
            let [kind, seed, n] = parts[..] else {
                return Err(bad());
            };
            Ok(Self {
                kind: kind.parse()?,
                seed: seed.parse().map_err(|_| bad())?,
                n: n.parse().map_err(|_| bad())?,
            })
        })())
    }
}

/// A sentence with the given dominant topic and sign.
fn sentence(rng: &mut ChaCha8Rng, topic: usize, positive: bool) -> Vec<usize> {
    let mut topics = vec![topic; DOMINANT_COUNT];
    while topics.len() < SENTENCE_LEN {
        let other = (topic + rng.gen_range(1..TOPICS.len())) % TOPICS.len();
        topics.push(other);
    }
    topics.shuffle(rng);
    let majority = rng.gen_range(SENTENCE_LEN / 2 + 1..=SENTENCE_LEN);
    let n_positive = if positive { majority } else { SENTENCE_LEN - majority };
    let mut polarity: Vec<bool> = (0..SENTENCE_LEN).map(|i| i < n_positive).collect();
    polarity.shuffle(rng);
    topics
        .into_iter()
        .zip(polarity)
        .map(|(t, p)| content_token(t, p, rng.gen_range(0..VARIANTS)))
        .collect()
}

fn other_topic(rng: &mut ChaCha8Rng, topic: usize) -> usize {
    (topic + rng.gen_range(1..TOPICS.len())) % TOPICS.len()
}

pub fn synthesize(uri: &SynthUri) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(uri.seed);
    let samples = (0..uri.n)
        .map(|_| {
            let ta = rng.gen_range(0..TOPICS.len());
            let sa = rng.gen_bool(0.5);
            let a = sentence(&mut rng, ta, sa);
            let (second, label) = match uri.kind {
                SynthKind::Single => (None, Label::Class(usize::from(sa))),
                SynthKind::PairClass | SynthKind::PairReg => {
                    let same = rng.gen_bool(0.5);
                    let tb = if same { ta } else { other_topic(&mut rng, ta) };
                    let sb = rng.gen_bool(0.5);
                    let b = sentence(&mut rng, tb, sb);
                    let label = if uri.kind == SynthKind::PairClass {
                        Label::Class(usize::from(same))
                    } else {
                        let level = 4 * usize::from(same) + 2 * usize::from(sa == sb) + usize::from(sa);
                        Label::Value(level as f64 / 7.0)
                    };
                    (Some(b), label)
                }
                SynthKind::Pretrain => {
                    if rng.gen_bool(0.5) {
                        (None, Label::Class(ta * 2 + usize::from(sa)))
                    } else {
                        let same = rng.gen_bool(0.5);
                        let tb = if same { ta } else { other_topic(&mut rng, ta) };
                        let sb = rng.gen_bool(0.5);
                        let b = sentence(&mut rng, tb, sb);
                        let joint = ((ta * 2 + usize::from(same)) * 2 + usize::from(sa)) * 2 + usize::from(sb);
                        (Some(b), Label::Class(SINGLE_PRETRAIN_CLASSES + joint))
                    }
                }
            };
            Sample {
                first: a,
                second,
                label,
                matched: None,
            }
        })
        .collect();
    Dataset { samples }
}

fn parse_label(raw: &str, task: &TaskSpec, line: usize) -> Result<Label> {
    let err = |message: String| Error::Data { line, message };
    match task.labels {
        LabelSpace::Classes(n) => {
            let v: usize = raw
                .trim()
                .parse()
                .map_err(|_| err(format!("label `{raw}` is not one of 0..{n}")))?;
            if v >= n {
                return Err(err(format!("label {v} is not one of 0..{n}")));
            }
            Ok(Label::Class(v))
        }
        LabelSpace::Range(lo, hi) => {
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| err(format!("label `{raw}` is not a number")))?;
            if !(lo..=hi).contains(&v) {
                return Err(err(format!("label {v} is outside [{lo}, {hi}]")));
            }
            Ok(Label::Value(v))
        }
    }
}

fn parse_ids(raw: &str, line: usize) -> Result<Vec<usize>> {
    raw.split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::Data {
                line,
                message: format!("token id `{t}` is not a non-negative integer"),
            })
        })
        .collect()
}

fn parse_words(raw: &str) -> Vec<usize> {
    raw.split_whitespace().map(toy_token).collect()
}

/// Reads a tab-separated file with a header row.
///
/// Columns: `sentence1` (toy words) or `tokens` (space-separated ids), optional
/// `sentence2` / `tokens2`, `label`, and optional `partition`
/// (`matched` / `mismatched`). Line numbers in errors count the header as 1.
pub fn read_tsv<R: std::io::Read>(input: R, task: &TaskSpec) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .from_reader(input);
    let header_err = |message: String| Error::Data { line: 1, message };
    let headers = reader
        .headers()
        .map_err(|e| header_err(e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (first_col, first_ids) = match (col("sentence1"), col("tokens")) {
        (Some(c), _) => (c, false),
        (None, Some(c)) => (c, true),
        _ => return Err(header_err("need a `sentence1` or `tokens` column".into())),
    };
    let second = col("sentence2").map(|c| (c, false)).or(col("tokens2").map(|c| (c, true)));
    let label_col = col("label").ok_or_else(|| header_err("need a `label` column".into()))?;
    let partition_col = col("partition");
    let wants_pair = task.kind != TaskKind::SingleClassification;
    if wants_pair && second.is_none() {
        return Err(header_err(format!("a {} task needs a second sentence column", task.kind)));
    }

    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let fallback_line = i + 2;
        let record = record.map_err(|e| Error::Data {
            line: e.position().map_or(fallback_line, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(fallback_line, |p| p.line() as usize);
        let field = |c: usize| -> Result<&str> {
            record.get(c).ok_or_else(|| Error::Data {
                line,
                message: format!("missing column {}", headers.get(c).unwrap_or("?")),
            })
        };
        let text = |c: usize, ids: bool| -> Result<Vec<usize>> {
            let raw = field(c)?;
            let v = if ids { parse_ids(raw, line)? } else { parse_words(raw) };
            if v.is_empty() {
                return Err(Error::Data {
                    line,
                    message: format!("empty `{}`", headers.get(c).unwrap_or("?")),
                });
            }
            Ok(v)
        };
        let first = text(first_col, first_ids)?;
        let second = match (second, wants_pair) {
            (Some((c, ids)), true) => Some(text(c, ids)?),
            _ => None,
        };
        let label = parse_label(field(label_col)?, task, line)?;
        let matched = match partition_col {
            None => None,
            Some(c) => match field(c)? {
                "matched" => Some(true),
                "mismatched" => Some(false),
                other => {
                    return Err(Error::Data {
                        line,
                        message: format!("partition `{other}` is neither matched nor mismatched"),
                    })
                }
            },
        };
        samples.push(Sample {
            first,
            second,
            label,
            matched,
        });
    }
    Ok(Dataset { samples })
}

/// Loads a TSV file or a `synth://` URI. Labels are checked against `task`.
pub fn load_dataset(source: &str, task: &TaskSpec) -> Result<Dataset> {
    if let Some(uri) = SynthUri::parse(source) {
        let ds = synthesize(&uri?);
        for (i, s) in ds.samples.iter().enumerate() {
            let ok = match (s.label, task.labels) {
                (Label::Class(c), LabelSpace::Classes(n)) => c < n,
                (Label::Value(v), LabelSpace::Range(lo, hi)) => (lo..=hi).contains(&v),
                _ => false,
            };
            if !ok {
                return Err(Error::Data {
                    line: i + 1,
                    message: format!("synthetic label {:?} does not fit task {}", s.label, task.name),
                });
            }
        }
        return Ok(ds);
    }
    let file = std::fs::File::open(Path::new(source))?;
    read_tsv(std::io::BufReader::new(file), task)
}
