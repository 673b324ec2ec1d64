//! Named parameter selections.
//!
//! A [`Selector`] is a union of terms, written as a `+`-separated string:
//!
//! | term               | elements                                          |
//! |--------------------|---------------------------------------------------|
//! | `all`              | every parameter                                   |
//! | `bias-all`         | every `*.bias` tensor, embeddings and pooler too  |
//! | `layernorm-all`    | every LayerNorm weight and bias                   |
//! | `head`             | `classifier.weight` and `classifier.bias`         |
//! | component name     | that component in every encoder layer             |
//! | `random(k,seed)`   | `k` distinct non-head elements, uniformly drawn   |
//! | anything else      | glob over full paths, e.g. `pooler.*`             |

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{classify_path, is_bias_path, is_head_path, is_layer_norm_path, Component, ParamLayout};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SelectorTerm {
    All,
    BiasAll,
    LayerNormAll,
    Head,
    Component(Component),
    Random { k: usize, seed: u64 },
    Glob(String),
}

impl fmt::Display for SelectorTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectorTerm::All => f.write_str("all"),
            SelectorTerm::BiasAll => f.write_str("bias-all"),
            SelectorTerm::LayerNormAll => f.write_str("layernorm-all"),
            SelectorTerm::Head => f.write_str("head"),
            SelectorTerm::Component(c) => f.write_str(c.name()),
            SelectorTerm::Random { k, seed } => write!(f, "random({k},{seed})"),
            SelectorTerm::Glob(g) => f.write_str(g),
        }
    }
}

impl FromStr for SelectorTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "" => return Err(Error::InvalidArgument("empty selector term".into())),
            "all" => SelectorTerm::All,
            "bias-all" => SelectorTerm::BiasAll,
            "layernorm-all" => SelectorTerm::LayerNormAll,
            "head" => SelectorTerm::Head,
            _ => {
                if let Ok(c) = s.parse::<Component>() {
                    SelectorTerm::Component(c)
                } else if let Some(args) = s.strip_prefix("random(").and_then(|r| r.strip_suffix(')')) {
                    let bad = || Error::InvalidArgument(format!("expected random(k,seed), got `{s}`"));
                    let (k, seed) = args.split_once(',').ok_or_else(bad)?;
                    SelectorTerm::Random {
                        k: k.trim().parse().map_err(|_| bad())?,
                        seed: seed.trim().parse().map_err(|_| bad())?,
                    }
                } else {
                    glob::Pattern::new(s)
                        .map_err(|e| Error::InvalidArgument(format!("bad glob `{s}`: {e}")))?;
                    SelectorTerm::Glob(s.to_string())
                }
            }
        })
    }
}

/// Union of selector terms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selector {
    pub terms: Vec<SelectorTerm>,
}

impl Selector {
    pub fn new(terms: Vec<SelectorTerm>) -> Self {
        Self { terms }
    }

    pub fn all() -> Self {
        Self::new(vec![SelectorTerm::All])
    }

    pub fn component(c: Component) -> Self {
        Self::new(vec![SelectorTerm::Component(c)])
    }

    /// Adds the task head to the union.
    pub fn with_head(mut self) -> Self {
        if !self.terms.contains(&SelectorTerm::Head) {
            self.terms.push(SelectorTerm::Head);
        }
        self
    }

    pub fn resolve(&self, layout: &ParamLayout) -> Result<Selection> {
        let mut sel = Selection::empty(layout);
        for term in &self.terms {
            sel.union_with(&resolve_term(term, layout)?);
        }
        Ok(sel)
    }

    pub fn count(&self, layout: &ParamLayout) -> Result<u64> {
        Ok(self.resolve(layout)?.count())
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(|t| t.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let terms = s.split('+').map(str::parse).collect::<Result<Vec<_>>>()?;
        Ok(Self { terms })
    }
}

/// Selected elements of one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ElementSet {
    All,
    /// Sorted, unique flat indices.
    Some(Vec<usize>),
}

impl ElementSet {
    pub fn none() -> Self {
        ElementSet::Some(Vec::new())
    }

    fn count(&self, len: usize) -> usize {
        match self {
            ElementSet::All => len,
            ElementSet::Some(v) => v.len(),
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        match self {
            ElementSet::All => true,
            ElementSet::Some(v) => v.binary_search(&i).is_ok(),
        }
    }

    fn union(&self, other: &ElementSet, len: usize) -> ElementSet {
        match (self, other) {
            (ElementSet::All, _) | (_, ElementSet::All) => ElementSet::All,
            (ElementSet::Some(a), ElementSet::Some(b)) => {
                let mut merged = Vec::with_capacity(a.len() + b.len());
                let (mut i, mut j) = (0, 0);
                while i < a.len() || j < b.len() {
                    let next = match (a.get(i), b.get(j)) {
                        (Some(&x), Some(&y)) if x == y => {
                            i += 1;
                            j += 1;
                            x
                        }
                        (Some(&x), Some(&y)) if x < y => {
                            i += 1;
                            x
                        }
                        (Some(_), Some(&y)) => {
                            j += 1;
                            y
                        }
                        (Some(&x), None) => {
                            i += 1;
                            x
                        }
                        (None, Some(&y)) => {
                            j += 1;
                            y
                        }
                        (None, None) => unreachable!(),
                    };
                    merged.push(next);
                }
                if merged.len() == len && len > 0 {
                    ElementSet::All
                } else {
                    ElementSet::Some(merged)
                }
            }
        }
    }
}

/// Element id: (position of the path in layout order, flat index).
pub type ElementId = (usize, usize);

/// Per-path element sets aligned with a layout. Iteration is in element-id
/// order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    paths: Vec<String>,
    lens: Vec<usize>,
    sets: Vec<ElementSet>,
}

impl Selection {
    pub fn empty(layout: &ParamLayout) -> Self {
        Self {
            paths: layout.entries().iter().map(|e| e.path.clone()).collect(),
            lens: layout.entries().iter().map(|e| e.numel()).collect(),
            sets: vec![ElementSet::none(); layout.len()],
        }
    }

    /// Builds a selection from per-path sets; paths must be in canonical
    /// order and every index below its path's length.
    pub(crate) fn from_parts(paths: Vec<String>, lens: Vec<usize>, sets: Vec<ElementSet>) -> Result<Self> {
        if paths.len() != lens.len() || lens.len() != sets.len() {
            return Err(Error::InvalidArgument("selection parts of different lengths".into()));
        }
        let mut normalized = Vec::with_capacity(sets.len());
        for ((path, &len), set) in paths.iter().zip(&lens).zip(sets) {
            normalized.push(match set {
                ElementSet::Some(v) => {
                    if v.windows(2).any(|w| w[0] >= w[1]) || v.last().is_some_and(|&i| i >= len) {
                        return Err(Error::InvalidArgument(format!(
                            "element indices of `{path}` must be sorted, unique and below {len}"
                        )));
                    }
                    if len > 0 && v.len() == len {
                        ElementSet::All
                    } else {
                        ElementSet::Some(v)
                    }
                }
                ElementSet::All => ElementSet::All,
            });
        }
        Ok(Self {
            paths,
            lens,
            sets: normalized,
        })
    }

    /// The same elements over `layout`. Paths missing from `self` are
    /// unselected; a shared path must have the same length in both.
    pub fn project(&self, layout: &ParamLayout) -> Result<Selection> {
        let mut out = Selection::empty(layout);
        for (i, path) in self.paths.iter().enumerate() {
            if self.count_at(i) == 0 {
                continue;
            }
            let j = layout.position(path).ok_or_else(|| Error::UnknownPath(path.clone()))?;
            if out.lens[j] != self.lens[i] {
                return Err(Error::TreeMismatch(format!(
                    "`{path}` has {} elements here but {} in the target",
                    self.lens[i], out.lens[j]
                )));
            }
            out.sets[j] = self.sets[i].clone();
        }
        Ok(out)
    }

    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.lens[i]
    }

    pub fn set(&self, i: usize) -> &ElementSet {
        &self.sets[i]
    }

    pub fn set_for(&self, path: &str) -> Option<&ElementSet> {
        self.paths.iter().position(|p| p == path).map(|i| &self.sets[i])
    }

    pub fn count(&self) -> u64 {
        self.sets
            .iter()
            .zip(&self.lens)
            .map(|(s, &l)| s.count(l) as u64)
            .sum()
    }

    pub fn count_at(&self, i: usize) -> usize {
        self.sets[i].count(self.lens[i])
    }

    pub fn contains(&self, (p, e): ElementId) -> bool {
        self.sets[p].contains(e)
    }

    pub fn union_with(&mut self, other: &Selection) {
        assert_eq!(self.paths, other.paths, "selections over different layouts");
        for i in 0..self.sets.len() {
            self.sets[i] = self.sets[i].union(&other.sets[i], self.lens[i]);
        }
    }

    /// Selected ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = ElementId> + '_ {
        self.sets.iter().enumerate().flat_map(move |(p, s)| {
            let it: Box<dyn Iterator<Item = usize>> = match s {
                ElementSet::All => Box::new(0..self.lens[p]),
                ElementSet::Some(v) => Box::new(v.iter().copied()),
            };
            it.map(move |e| (p, e))
        })
    }

    /// Paths with at least one selected element.
    pub fn touched_paths(&self) -> impl Iterator<Item = (usize, &str)> {
        self.paths
            .iter()
            .enumerate()
            .filter(|(i, _)| self.count_at(*i) > 0)
            .map(|(i, p)| (i, p.as_str()))
    }

    fn with_paths(layout: &ParamLayout, pred: impl Fn(&str) -> bool) -> Self {
        let mut sel = Self::empty(layout);
        for (i, e) in layout.entries().iter().enumerate() {
            if pred(&e.path) {
                sel.sets[i] = ElementSet::All;
            }
        }
        sel
    }
}

fn resolve_term(term: &SelectorTerm, layout: &ParamLayout) -> Result<Selection> {
    Ok(match term {
        SelectorTerm::All => Selection::with_paths(layout, |_| true),
        SelectorTerm::BiasAll => Selection::with_paths(layout, is_bias_path),
        SelectorTerm::LayerNormAll => Selection::with_paths(layout, is_layer_norm_path),
        SelectorTerm::Head => Selection::with_paths(layout, is_head_path),
        SelectorTerm::Component(c) => {
            Selection::with_paths(layout, |p| classify_path(p).is_some_and(|(_, pc, _)| pc == *c))
        }
        SelectorTerm::Glob(pattern) => {
            let pat = glob::Pattern::new(pattern)
                .map_err(|e| Error::InvalidArgument(format!("bad glob `{pattern}`: {e}")))?;
            let sel = Selection::with_paths(layout, |p| pat.matches(p));
            if sel.count() == 0 {
                return Err(Error::UnresolvedPattern(pattern.clone()));
            }
            sel
        }
        SelectorTerm::Random { k, seed } => random_selection(layout, *k, *seed)?,
    })
}

/// `k` distinct non-head elements drawn uniformly without replacement.
fn random_selection(layout: &ParamLayout, k: usize, seed: u64) -> Result<Selection> {
    let candidates: Vec<usize> = (0..layout.len())
        .filter(|&i| !is_head_path(&layout.entries()[i].path))
        .collect();
    // cumulative element offsets over candidate paths
    let mut offsets = Vec::with_capacity(candidates.len() + 1);
    offsets.push(0usize);
    for &i in &candidates {
        offsets.push(offsets.last().unwrap() + layout.entries()[i].numel());
    }
    let total = *offsets.last().unwrap();
    if k > total {
        return Err(Error::InvalidArgument(format!(
            "random({k},{seed}) exceeds the {total} non-head elements"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn = rand::seq::index::sample(&mut rng, total, k).into_vec();
    drawn.sort_unstable();

    let mut sel = Selection::empty(layout);
    let mut per_path: Vec<Vec<usize>> = vec![Vec::new(); candidates.len()];
    for g in drawn {
        let slot = offsets.partition_point(|&o| o <= g) - 1;
        per_path[slot].push(g - offsets[slot]);
    }
    for (slot, idx) in per_path.into_iter().enumerate() {
        let p = candidates[slot];
        sel.sets[p] = if !idx.is_empty() && idx.len() == sel.lens[p] {
            ElementSet::All
        } else {
            ElementSet::Some(idx)
        };
    }
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Head, ModelConfig};

    fn tiny() -> ParamLayout {
        ParamLayout::for_config(&ModelConfig {
            vocab_size: 11,
            hidden: 8,
            num_layers: 2,
            num_heads: 2,
            intermediate: 16,
            max_positions: 16,
            type_vocab: 2,
            eps: 1e-12,
            head: Head::Classification { num_labels: 2 },
        })
        .unwrap()
    }

    #[test]
    fn output_layer_norm_on_tiny_model() {
        let sel = Selector::component(Component::OutputLayerNorm).resolve(&tiny()).unwrap();
        assert_eq!(sel.count(), 2 * 2 * 8);
        assert_eq!(sel.ids().count(), 32);
    }

    #[test]
    fn random_is_seeded() {
        let layout = tiny();
        let a: Selector = "random(5,7)".parse().unwrap();
        let b: Selector = "random(5,8)".parse().unwrap();
        let ra: Vec<_> = a.resolve(&layout).unwrap().ids().collect();
        let ra2: Vec<_> = a.resolve(&layout).unwrap().ids().collect();
        let rb: Vec<_> = b.resolve(&layout).unwrap().ids().collect();
        assert_eq!(ra.len(), 5);
        assert_eq!(ra, ra2);
        assert_ne!(ra, rb);
    }

    #[test]
    fn random_never_picks_head() {
        let layout = tiny();
        let total_non_head = layout.numel() - (2 * 8 + 2);
        let s: Selector = format!("random({total_non_head},1)").parse().unwrap();
        let sel = s.resolve(&layout).unwrap();
        assert_eq!(sel.count(), total_non_head);
        assert_eq!(sel.set_for("classifier.weight"), Some(&ElementSet::none()));
        let too_many: Selector = format!("random({},1)", total_non_head + 1).parse().unwrap();
        assert!(too_many.resolve(&layout).is_err());
    }

    #[test]
    fn compound_collapses_duplicates() {
        let layout = tiny();
        let s: Selector = "output.LayerNorm+layernorm-all+encoder.layer.*.output.LayerNorm.*".parse().unwrap();
        // layernorm-all: embeddings + 2 per layer, each weight+bias of 8
        assert_eq!(s.count(&layout).unwrap(), (1 + 2 * 2) * 2 * 8);
    }

    #[test]
    fn unresolvable_glob_names_pattern() {
        let s: Selector = "decoder.*".parse().unwrap();
        match s.count(&tiny()) {
            Err(Error::UnresolvedPattern(p)) => assert_eq!(p, "decoder.*"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn display_round_trips() {
        let s: Selector = "bias-all+head+random(3,9)+pooler.*".parse().unwrap();
        assert_eq!(s.to_string().parse::<Selector>().unwrap(), s);
    }
}
