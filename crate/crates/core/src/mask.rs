//! Trainability masks: top-fraction selections by Fisher value, random and
//! whole-component masks, and their bitset file format.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{expect_version, Reader, Writer};
use crate::error::{Error, Result};
use crate::fisher::{normalized_sum, FisherMap};
use crate::model::{ElementId, ElementSet, ParamLayout, ParamTree, Selection, Selector};

const MAGIC: &[u8; 8] = b"LNTMASK\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Ranked by one task's Fisher values.
    Task { task: String },
    /// Ranked by the sum of per-task normalized Fisher values.
    Global,
    /// Global over every task except `excluded`.
    Cv { excluded: String },
    /// Uniformly drawn candidates.
    Random,
    /// Every candidate.
    FullComponent,
}

impl MaskMode {
    /// Mode as stored in mask files. A cross-validated mask is stored as the
    /// global mask it is.
    pub fn file_name(&self) -> &'static str {
        match self {
            MaskMode::Task { .. } => "task",
            MaskMode::Global | MaskMode::Cv { .. } => "global",
            MaskMode::Random => "random",
            MaskMode::FullComponent => "full-component",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskMode::Task { task } => write!(f, "task({task})"),
            MaskMode::Global => f.write_str("global"),
            MaskMode::Cv { excluded } => write!(f, "cv(-{excluded})"),
            MaskMode::Random => f.write_str("random"),
            MaskMode::FullComponent => f.write_str("full-component"),
        }
    }
}

/// A trainability mask with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub fraction: f64,
    /// Tasks whose Fisher values ranked the elements, in input order.
    pub sources: Vec<String>,
    pub seed: Option<u64>,
    pub selection: Selection,
}

/// `round_half_up(f * n)`, with `f = 0` selecting none and `f = 1` all.
pub fn selected_count(fraction: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} is outside [0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(n);
    }
    let x = fraction * n as f64;
    let whole = x.floor();
    let k = whole as usize + usize::from(x - whole >= 0.5);
    Ok(k.min(n))
}

/// Top `selected_count(fraction, n)` candidates by descending score, ties by
/// ascending element id.
fn top_fraction(scores: &ParamTree, candidates: &Selection, fraction: f64) -> Result<Selection> {
    let mut ranked: Vec<(f64, ElementId)> = candidates
        .ids()
        .map(|(p, e)| (scores.tensor_at(p).data()[e], (p, e)))
        .collect();
    let k = selected_count(fraction, ranked.len())?;
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    selection_of(scores.layout(), ranked[..k].iter().map(|&(_, id)| id))
}

fn selection_of(layout: &ParamLayout, ids: impl Iterator<Item = ElementId>) -> Result<Selection> {
    let mut per_path: Vec<Vec<usize>> = vec![Vec::new(); layout.len()];
    for (p, e) in ids {
        per_path[p].push(e);
    }
    for v in &mut per_path {
        v.sort_unstable();
    }
    Selection::from_parts(
        layout.entries().iter().map(|e| e.path.clone()).collect(),
        layout.entries().iter().map(|e| e.numel()).collect(),
        per_path.into_iter().map(ElementSet::Some).collect(),
    )
}

fn resolve_candidates(layout: &ParamLayout, candidates: &Selector) -> Result<Selection> {
    let sel = candidates.resolve(layout)?;
    if sel.count() == 0 {
        return Err(Error::Empty("mask candidates"));
    }
    Ok(sel)
}

/// Ranks the `candidates` elements of the Fisher maps and keeps the top
/// `fraction`. The maps must share one layout, which the mask then covers.
pub fn build_mask(mode: &MaskMode, fishers: &[FisherMap], candidates: &Selector, fraction: f64) -> Result<MaskSpec> {
    let first = fishers.first().ok_or(Error::Empty("Fisher maps"))?;
    if let Some(m) = fishers.iter().find(|m| m.layout() != first.layout()) {
        return Err(Error::TreeMismatch(format!(
            "Fisher maps `{}` and `{}` cover different parameters",
            first.task, m.task
        )));
    }
    let find = |name: &str| {
        fishers
            .iter()
            .find(|m| m.task == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no Fisher map for task `{name}`")))
    };
    let used: Vec<&FisherMap> = match mode {
        MaskMode::Task { task } => vec![find(task)?],
        MaskMode::Global => fishers.iter().collect(),
        MaskMode::Cv { excluded } => {
            find(excluded)?;
            let rest: Vec<&FisherMap> = fishers.iter().filter(|m| &m.task != excluded).collect();
            if rest.is_empty() {
                return Err(Error::InvalidArgument("a cross-validated mask needs at least two tasks".into()));
            }
            rest
        }
        MaskMode::Random | MaskMode::FullComponent => {
            return Err(Error::InvalidArgument(format!("{mode} masks are not ranked by Fisher values")))
        }
    };
    let cand = resolve_candidates(first.layout(), candidates)?;
    let scores = match mode {
        MaskMode::Task { .. } => used[0].values().clone(),
        _ => normalized_sum(&used)?,
    };
    Ok(MaskSpec {
        mode: mode.clone(),
        fraction,
        sources: used.iter().map(|m| m.task.clone()).collect(),
        seed: None,
        selection: top_fraction(&scores, &cand, fraction)?,
    })
}

/// `selected_count(fraction, n)` candidates drawn uniformly without replacement.
pub fn random_mask(layout: &ParamLayout, candidates: &Selector, fraction: f64, seed: u64) -> Result<MaskSpec> {
    let cand = resolve_candidates(layout, candidates)?;
    let ids: Vec<ElementId> = cand.ids().collect();
    let k = selected_count(fraction, ids.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, ids.len(), k);
    Ok(MaskSpec {
        mode: MaskMode::Random,
        fraction,
        sources: Vec::new(),
        seed: Some(seed),
        selection: selection_of(layout, picked.into_iter().map(|i| ids[i]))?,
    })
}

/// Every element of `candidates`.
pub fn full_component_mask(layout: &ParamLayout, candidates: &Selector) -> Result<MaskSpec> {
    Ok(MaskSpec {
        mode: MaskMode::FullComponent,
        fraction: 1.0,
        sources: Vec::new(),
        seed: None,
        selection: resolve_candidates(layout, candidates)?,
    })
}

fn bitset(set: &ElementSet, len: usize) -> Vec<u8> {
    let mut bytes = vec![0u8; len.div_ceil(8)];
    for i in 0..len {
        if set.contains(i) {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

impl MaskSpec {
    pub fn count(&self) -> u64 {
        self.selection.count()
    }

    /// Container: mode, fraction, sources, optional seed, then one bitset
    /// per path in flat element order, least significant bit first.
    pub fn write<W: Write>(&self, out: W) -> Result<W> {
        let mut w = Writer::new(out, MAGIC, VERSION)?;
        w.str(self.mode.file_name())?;
        w.f64s(&[self.fraction])?;
        w.u64(self.sources.len() as u64)?;
        for s in &self.sources {
            w.str(s)?;
        }
        w.u64(u64::from(self.seed.is_some()))?;
        w.u64(self.seed.unwrap_or(0))?;
        let paths = self.selection.paths();
        w.u64(paths.len() as u64)?;
        for (i, p) in paths.iter().enumerate() {
            let len = self.selection.len_of(i);
            w.str(p)?;
            w.u64(len as u64)?;
            w.bytes(&bitset(self.selection.set(i), len))?;
        }
        w.finish()
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let (mut r, version) = Reader::new(input, MAGIC)?;
        expect_version(version, VERSION, "mask")?;
        let mode_name = r.str()?;
        let fraction = r.f64s(1)?[0];
        let n_sources = r.u64()? as usize;
        let sources = (0..n_sources).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let has_seed = r.u64()? != 0;
        let seed = r.u64()?;
        let mode = match mode_name.as_str() {
            "task" => MaskMode::Task {
                task: sources
                    .first()
                    .cloned()
                    .ok_or_else(|| Error::Format("task mask without a source task".into()))?,
            },
            "global" => MaskMode::Global,
            "random" => MaskMode::Random,
            "full-component" => MaskMode::FullComponent,
            other => return Err(Error::Format(format!("unknown mask mode `{other}`"))),
        };
        let n = r.u64()? as usize;
        let (mut paths, mut lens, mut sets) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let path = r.str()?;
            let len = r.u64()? as usize;
            let bits = r.bytes()?;
            if bits.len() != len.div_ceil(8) {
                return Err(Error::Format(format!("bitset of `{path}` has {} bytes for {len} elements", bits.len())));
            }
            let idx: Vec<usize> = (0..len).filter(|&i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            paths.push(path);
            lens.push(len);
            sets.push(ElementSet::Some(idx));
        }
        r.finish()?;
        let selection = Selection::from_parts(paths, lens, sets).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            mode,
            fraction,
            sources,
            seed: has_seed.then_some(seed),
            selection,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
