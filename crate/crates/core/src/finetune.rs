//! Fine-tuning under a freeze plan with a learning-rate grid and best-epoch
//! selection on validation data.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::format::fmt_real;
use crate::fisher::FisherMap;
use crate::mask::{build_mask, full_component_mask, MaskMode, MaskSpec};
use crate::metrics::{MetricKind, MetricValue};
use crate::model::params::Component;
use crate::model::{ElementSet, ModelConfig, ParamLayout, ParamTree, Selection, Selector, SelectorTerm};
use crate::objective::{batch_loss, evaluate};

/// Which elements a run may update. The task head is always trainable.
#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    Full,
    /// Every bias term.
    BitFit,
    /// The output LayerNorm of every layer.
    LayerNorm,
    /// As many uniformly drawn non-head elements as [`Strategy::LayerNorm`] trains.
    Random { seed: u64 },
    /// A prebuilt mask.
    Mask(MaskSpec),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::BitFit => "bitfit",
            Strategy::LayerNorm => "layernorm",
            Strategy::Random { .. } => "random",
            Strategy::Mask(_) => "mask",
        }
    }

    pub fn is_parameter_efficient(&self) -> bool {
        !matches!(self, Strategy::Full)
    }

    /// Learning rates tried when none are given.
    pub fn default_grid(&self) -> Vec<f64> {
        if self.is_parameter_efficient() {
            vec![1e-4, 4e-4, 7e-4, 1e-3]
        } else {
            vec![1e-5, 2e-5, 3e-5, 5e-5]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_grid: Vec<f64>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamW,
    pub metric: MetricKind,
}

impl TrainConfig {
    /// Defaults: the strategy's grid, 20 epochs, batches of 16.
    pub fn new(strategy: &Strategy, metric: MetricKind, seed: u64) -> Self {
        Self {
            lr_grid: strategy.default_grid(),
            max_epochs: 20,
            batch_size: 16,
            eval_batch_size: 64,
            seed,
            optimizer: AdamW::default(),
            metric,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() {
            return Err(Error::InvalidArgument("learning-rate grid is empty".into()));
        }
        if let Some(lr) = self.lr_grid.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch sizes must be positive".into()));
        }
        Ok(())
    }
}

fn head_selection(layout: &ParamLayout) -> Result<Selection> {
    Selector::new(vec![SelectorTerm::Head]).resolve(layout)
}

/// The trainable elements of `strategy` over `layout`, head included.
pub fn make_freeze_plan(strategy: &Strategy, layout: &ParamLayout) -> Result<MaskSpec> {
    let component = |terms: Vec<SelectorTerm>| full_component_mask(layout, &Selector::new(terms).with_head());
    match strategy {
        Strategy::Full => component(vec![SelectorTerm::All]),
        Strategy::BitFit => component(vec![SelectorTerm::BiasAll]),
        Strategy::LayerNorm => component(vec![SelectorTerm::Component(Component::OutputLayerNorm)]),
        Strategy::Random { seed } => {
            let k = Selector::component(Component::OutputLayerNorm).count(layout)? as usize;
            let selector = Selector::new(vec![SelectorTerm::Random { k, seed: *seed }]).with_head();
            Ok(MaskSpec {
                mode: MaskMode::Random,
                fraction: 1.0,
                sources: Vec::new(),
                seed: Some(*seed),
                selection: selector.resolve(layout)?,
            })
        }
        Strategy::Mask(spec) => {
            let mut selection = spec.selection.project(layout)?;
            selection.union_with(&head_selection(layout)?);
            Ok(MaskSpec {
                selection,
                ..spec.clone()
            })
        }
    }
}

/// SHA-256 over the path names and bit patterns of every element outside
/// `trainable`, in element-id order.
pub fn frozen_checksum(params: &ParamTree, trainable: &Selection) -> Result<String> {
    if trainable.paths().len() != params.layout().len()
        || trainable.paths().iter().zip(params.layout().entries()).any(|(p, e)| *p != e.path)
    {
        return Err(Error::TreeMismatch("freeze plan does not cover these parameters".into()));
    }
    let mut hasher = Sha256::new();
    for (i, (path, t)) in params.iter().enumerate() {
        let set = trainable.set(i);
        if *set == ElementSet::All {
            continue;
        }
        hasher.update(path.as_bytes());
        hasher.update([0u8]);
        for (k, v) in t.data().iter().enumerate() {
            if !set.contains(k) {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Adaptive-moment state for the trainable elements of one run.
struct Optimizer {
    cfg: AdamW,
    lr: f64,
    step: i32,
    /// `(path index, trainable flat indices, first moments, second moments)`.
    slots: Vec<(usize, Vec<usize>, Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    fn new(cfg: AdamW, lr: f64, plan: &Selection) -> Self {
        let slots = plan
            .touched_paths()
            .map(|(i, _)| {
                let idx: Vec<usize> = match plan.set(i) {
                    ElementSet::All => (0..plan.len_of(i)).collect(),
                    ElementSet::Some(v) => v.clone(),
                };
                let n = idx.len();
                (i, idx, vec![0.0; n], vec![0.0; n])
            })
            .collect();
        Self {
            cfg,
            lr,
            step: 0,
            slots,
        }
    }

    /// One decoupled-weight-decay step. Elements outside the plan are never
    /// read or written.
    fn apply(&mut self, params: &mut ParamTree, grads: &crate::autodiff::GradientMap) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, idx, m, v) in &mut self.slots {
            let path = &params.layout().entries()[*i].path;
            let grad = grads.get(path).map(|t| t.data().to_vec());
            let data = params.tensor_at_mut(*i).data_mut();
            for (slot, &k) in idx.iter().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[k]);
                m[slot] = c.beta1 * m[slot] + (1.0 - c.beta1) * g;
                v[slot] = c.beta2 * v[slot] + (1.0 - c.beta2) * g * g;
                let update = (m[slot] / bc1) / ((v[slot] / bc2).sqrt() + c.eps);
                data[k] -= self.lr * (update + c.weight_decay * data[k]);
            }
        }
    }
}

/// Result of training at one learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub lr: f64,
    /// Validation metric after each completed epoch.
    pub metrics: Vec<MetricValue>,
    /// Why the cell stopped early, if it did.
    pub diverged: Option<String>,
    pub frozen_checksum_after: String,
}

/// One learning-rate cell together with its best-epoch parameters.
pub struct CellOutcome {
    pub report: CellReport,
    /// Parameters after the best epoch; `None` if no epoch completed.
    pub best: Option<(usize, ParamTree)>,
}

fn validation_metric(params: &ParamTree, config: &ModelConfig, data: &Dataset, tc: &TrainConfig) -> Result<MetricValue> {
    match evaluate(params, config, data, tc.metric, tc.eval_batch_size) {
        // constant predictions carry no rank information
        Err(Error::UndefinedMetric(_)) => Ok(MetricValue::Single(0.0)),
        other => other,
    }
}

/// Trains a private copy of `params` at one learning rate for
/// `tc.max_epochs` epochs, evaluating after every epoch. A non-finite loss
/// stops the cell and is recorded in the report.
pub fn train_cell(
    params: &ParamTree,
    config: &ModelConfig,
    tc: &TrainConfig,
    lr: f64,
    plan: &Selection,
    train: &Dataset,
    validation: &Dataset,
) -> Result<CellOutcome> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Empty("training or validation data"));
    }
    let mut current = params.clone();
    let mut opt = Optimizer::new(tc.optimizer, lr, plan);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(tc.max_epochs);
    let mut best: Option<(usize, ParamTree)> = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut diverged = None;
    'epochs: for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let mut g = Graph::new();
            let loss = match batch_loss(&mut g, &current, config, &batch) {
                Err(Error::Diverged(why)) => {
                    diverged = Some(format!("epoch {epoch}: {why}"));
                    break 'epochs;
                }
                other => other?,
            };
            if !g.value(loss).is_finite() {
                diverged = Some(format!("epoch {epoch}: non-finite loss"));
                break 'epochs;
            }
            let grads = g.backward(loss)?;
            opt.apply(&mut current, &grads);
        }
        if current.iter().any(|(_, t)| !t.is_finite()) {
            diverged = Some(format!("epoch {epoch}: non-finite parameters"));
            break;
        }
        let m = match validation_metric(&current, config, validation, tc) {
            Err(Error::Diverged(why)) => {
                diverged = Some(format!("epoch {epoch}: {why}"));
                break;
            }
            other => other?,
        };
        if m.score() > best_score {
            best_score = m.score();
            best = Some((epoch, current.clone()));
        }
        metrics.push(m);
    }
    Ok(CellOutcome {
        report: CellReport {
            lr,
            metrics,
            diverged,
            frozen_checksum_after: frozen_checksum(&current, plan)?,
        },
        best,
    })
}

/// Record of a grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub plan_mode: String,
    pub plan_fraction: f64,
    pub seed: u64,
    pub config: TrainConfig,
    pub trainable: u64,
    pub total: u64,
    pub best_lr: f64,
    /// 1-based.
    pub best_epoch: usize,
    pub best_metric: MetricValue,
    pub cells: Vec<CellReport>,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
    /// Not serialized, so reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// `lr,epoch,metric` for every completed epoch of every cell.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("lr,epoch,metric\n");
        for cell in &self.cells {
            for (e, m) in cell.metrics.iter().enumerate() {
                writeln!(out, "{},{},{}", fmt_real(cell.lr), e + 1, fmt_real(m.score())).unwrap();
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// True when every cell left the frozen elements untouched.
    pub fn frozen_intact(&self) -> bool {
        self.frozen_checksum_after == self.frozen_checksum_before
            && self.cells.iter().all(|c| c.frozen_checksum_after == self.frozen_checksum_before)
    }
}

/// Best `(cell, epoch)` by score; ties go to the smaller learning rate, then
/// the earlier epoch.
fn select_best(cells: &[CellReport]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for (ci, cell) in cells.iter().enumerate() {
        for (ei, m) in cell.metrics.iter().enumerate() {
            let better = match best {
                None => true,
                Some((bc, be)) => {
                    let (s, bs) = (m.score(), cells[bc].metrics[be].score());
                    s > bs || (s == bs && (cell.lr, ei) < (cells[bc].lr, be))
                }
            };
            if better {
                best = Some((ci, ei));
            }
        }
    }
    best
}

/// Trains one cell per learning rate (in parallel) and keeps the best
/// `(lr, epoch)`. Returns the report and the parameters of the best epoch.
pub fn grid_search(
    params: &ParamTree,
    config: &ModelConfig,
    tc: &TrainConfig,
    strategy: &Strategy,
    train: &Dataset,
    validation: &Dataset,
) -> Result<(RunReport, ParamTree)> {
    tc.validate()?;
    let started = Instant::now();
    let plan = make_freeze_plan(strategy, params.layout())?;
    let before = frozen_checksum(params, &plan.selection)?;
    let outcomes = tc
        .lr_grid
        .par_iter()
        .map(|&lr| train_cell(params, config, tc, lr, &plan.selection, train, validation))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(outcomes.len());
    let mut bests = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        cells.push(o.report);
        bests.push(o.best);
    }
    let (ci, ei) = select_best(&cells).ok_or_else(|| {
        Error::Diverged(format!("every learning rate of {:?} failed before its first epoch", tc.lr_grid))
    })?;
    let (epoch, best_params) = bests[ci].take().expect("a scored cell keeps its best epoch");
    debug_assert_eq!(epoch, ei + 1);
    let report = RunReport {
        strategy: strategy.name().to_string(),
        plan_mode: plan.mode.file_name().to_string(),
        plan_fraction: plan.fraction,
        seed: tc.seed,
        config: tc.clone(),
        trainable: plan.count(),
        total: params.numel(),
        best_lr: cells[ci].lr,
        best_epoch: ei + 1,
        best_metric: cells[ci].metrics[ei],
        frozen_checksum_before: before,
        frozen_checksum_after: frozen_checksum(&best_params, &plan.selection)?,
        cells,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((report, best_params))
}

/// Best validation result of a Fisher mask at one trainable fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub fraction: f64,
    pub report: RunReport,
}

/// Trains with a Fisher mask over `candidates` at each fraction in turn.
#[allow(clippy::too_many_arguments)]
pub fn sweep_fractions(
    params: &ParamTree,
    config: &ModelConfig,
    tc: &TrainConfig,
    mode: &MaskMode,
    fishers: &[FisherMap],
    candidates: &Selector,
    fractions: &[f64],
    train: &Dataset,
    validation: &Dataset,
) -> Result<Vec<SweepPoint>> {
    if fractions.is_empty() {
        return Err(Error::Empty("fraction list"));
    }
    fractions
        .iter()
        .map(|&f| {
            let spec = build_mask(mode, fishers, candidates, f)?;
            let (report, _) = grid_search(params, config, tc, &Strategy::Mask(spec), train, validation)?;
            Ok(SweepPoint { fraction: f, report })
        })
        .collect()
}

/// `f,trainable,lr,epoch,metric`, one row per fraction.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("f,trainable,lr,epoch,metric\n");
    for p in points {
        let r = &p.report;
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt_real(p.fraction),
            r.trainable,
            fmt_real(r.best_lr),
            r.best_epoch,
            fmt_real(r.best_metric.score())
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthKind, SynthUri, TOY_VOCAB_SIZE};
    use crate::model::{build_model, Head};

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: TOY_VOCAB_SIZE,
            hidden: 8,
            num_layers: 1,
            num_heads: 2,
            intermediate: 16,
            max_positions: 16,
            type_vocab: 2,
            eps: 1e-12,
            head: Head::Classification { num_labels: 2 },
        }
    }

    fn data(seed: u64, n: usize) -> Dataset {
        synthesize(&SynthUri {
            kind: SynthKind::Single,
            seed,
            n,
        })
    }

    fn quick(strategy: &Strategy) -> TrainConfig {
        TrainConfig {
            lr_grid: vec![1e-3, 1e-2],
            max_epochs: 2,
            ..TrainConfig::new(strategy, MetricKind::Accuracy, 3)
        }
    }

    #[test]
    fn bert_large_plan_counts() {
        let layout = ParamLayout::for_config(&ModelConfig::bert_large_cased(Head::Classification { num_labels: 2 })).unwrap();
        let count = |s: Strategy| make_freeze_plan(&s, &layout).unwrap().count();
        assert_eq!(count(Strategy::Full), 333_581_314);
        assert_eq!(count(Strategy::BitFit), 274_434);
        assert_eq!(count(Strategy::LayerNorm), 51_202);
    }

    #[test]
    fn random_plan_matches_layernorm_count() {
        let layout = ParamLayout::for_config(&config()).unwrap();
        let ln = make_freeze_plan(&Strategy::LayerNorm, &layout).unwrap().count();
        for seed in [0, 1, 99] {
            assert_eq!(make_freeze_plan(&Strategy::Random { seed }, &layout).unwrap().count(), ln);
        }
    }

    #[test]
    fn head_only_run_keeps_encoder() {
        let cfg = config();
        let params = build_model(&cfg, 1).unwrap();
        let empty = MaskSpec {
            mode: MaskMode::Global,
            fraction: 0.0,
            sources: vec![],
            seed: None,
            selection: Selection::empty(params.layout()),
        };
        let strategy = Strategy::Mask(empty);
        let (report, best) = grid_search(&params, &cfg, &quick(&strategy), &strategy, &data(1, 48), &data(2, 16)).unwrap();
        assert_eq!(report.trainable, 2 * 8 + 2);
        assert!(report.frozen_intact());
        for (path, t) in params.iter() {
            let same = best.require(path).unwrap() == t;
            assert_eq!(same, !path.starts_with("classifier."), "{path}");
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = config();
        let params = build_model(&cfg, 1).unwrap();
        let s = Strategy::LayerNorm;
        let run = || grid_search(&params, &cfg, &quick(&s), &s, &data(1, 40), &data(2, 16)).unwrap().0;
        let (a, b) = (run(), run());
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.metrics_csv().lines().count(), 1 + 2 * 2);
    }

    #[test]
    fn diverging_cell_is_recorded() {
        let cfg = config();
        let params = build_model(&cfg, 1).unwrap();
        let s = Strategy::Full;
        let tc = TrainConfig {
            lr_grid: vec![1e-3, 1e300],
            max_epochs: 2,
            ..TrainConfig::new(&s, MetricKind::Accuracy, 3)
        };
        let (report, _) = grid_search(&params, &cfg, &tc, &s, &data(1, 40), &data(2, 16)).unwrap();
        assert_eq!(report.best_lr, 1e-3);
        assert!(report.cells[1].diverged.is_some());
        let all_bad = TrainConfig {
            lr_grid: vec![1e300],
            ..tc
        };
        assert!(matches!(
            grid_search(&params, &cfg, &all_bad, &s, &data(1, 40), &data(2, 16)),
            Err(Error::Diverged(_))
        ));
    }

    #[test]
    fn full_fraction_sweep_matches_layernorm() {
        let cfg = config();
        let params = build_model(&cfg, 1).unwrap();
        let (train, val) = (data(1, 40), data(2, 16));
        let candidates = Selector::component(Component::OutputLayerNorm);
        let fisher =
            crate::fisher::estimate_fisher(&params, &cfg, &train, "t", &candidates, 40, 0).unwrap();
        let tc = quick(&Strategy::LayerNorm);
        let mode = MaskMode::Task { task: "t".into() };
        let points =
            sweep_fractions(&params, &cfg, &tc, &mode, &[fisher], &candidates, &[0.5, 1.0], &train, &val).unwrap();
        let (ln, _) = grid_search(&params, &cfg, &tc, &Strategy::LayerNorm, &train, &val).unwrap();
        assert_eq!(points[1].report.cells, ln.cells);
        assert_eq!(points[1].report.trainable, ln.trainable);
        assert!(points[0].report.trainable < ln.trainable);
        assert_eq!(sweep_csv(&points).lines().count(), 3);
    }

    #[test]
    fn best_cell_tie_breaks() {
        let cell = |lr: f64, m: &[f64]| CellReport {
            lr,
            metrics: m.iter().map(|&v| MetricValue::Single(v)).collect(),
            diverged: None,
            frozen_checksum_after: String::new(),
        };
        let cells = [cell(2e-5, &[0.5, 0.9]), cell(1e-5, &[0.9, 0.9]), cell(3e-5, &[0.95, 0.1])];
        assert_eq!(select_best(&cells), Some((2, 0)));
        assert_eq!(select_best(&cells[..2]), Some((1, 0)));
        assert_eq!(select_best(&[]), None);
    }
}
