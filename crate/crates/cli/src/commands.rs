//! Subcommand implementations. Each returns its artifacts instead of writing
//! them, so output writing happens in one place.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use lntune::data::{load_dataset, Dataset, LabelSpace, SynthUri, TaskSpec};
use lntune::drift::{distances, drift_heatmap};
use lntune::finetune::{grid_search, make_freeze_plan, sweep_csv, sweep_fractions, Strategy, TrainConfig};
use lntune::fisher::{
    estimate_fisher, layer_heatmap, normalized_sum, rank_components, ranking_csv, summarize_components, FisherMap,
};
use lntune::format::fmt_real;
use lntune::mask::{build_mask, MaskMode, MaskSpec};
use lntune::metrics::MetricKind;
use lntune::model::params::is_head_path;
use lntune::model::{
    build_model, load_checkpoint, reinit_head, write_checkpoint, Head, ModelConfig, ParamLayout, ParamTree, Selector,
};
use lntune::stats::kruskal_wallis;
use serde::Serialize;

use crate::cli::{self, MaskModeName, StrategyName};
use crate::manifest::{hash_input, FileHash};
use crate::settings::{resolve_seed, Settings};

const DEFAULT_FISHER_SAMPLES: usize = 1024;

/// A command-line mistake detected after parsing; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

/// What a command produced: text for standard output and named files.
#[derive(Default)]
pub struct Outcome {
    pub stdout: String,
    pub files: Vec<(String, Vec<u8>)>,
}

impl Outcome {
    fn file(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }
}

/// Everything a run records for its manifest besides the outputs.
pub struct Ctx {
    pub settings: Settings,
    pub env_seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Map<String, serde_json::Value>,
}

impl Ctx {
    pub fn new(settings: Settings, env_seed: Option<u64>) -> Self {
        Self {
            settings,
            env_seed,
            inputs: Vec::new(),
            seeds: BTreeMap::new(),
            config: serde_json::Map::new(),
        }
    }

    fn input(&mut self, source: &str) -> Result<()> {
        if !self.inputs.iter().any(|i| i.path == source) {
            self.inputs.push(hash_input(source)?);
        }
        Ok(())
    }

    fn seed(&mut self, name: &str, flag: Option<u64>) -> u64 {
        let seed = resolve_seed(flag, self.env_seed, &self.settings);
        self.seeds.insert(name.to_string(), seed);
        seed
    }

    fn record(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("config values serialize");
        self.config.insert(key.to_string(), v);
    }
}

fn task_spec(ctx: &mut Ctx, t: &cli::TaskArgs, sources: &[&str]) -> Result<TaskSpec> {
    let synth = sources.iter().find_map(|s| SynthUri::parse(s)).transpose()?;
    let mut spec = match (t.kind, synth) {
        (Some(kind), _) => TaskSpec::default_for(&t.task, kind),
        (None, Some(uri)) => TaskSpec::for_synthetic(&t.task, uri.kind),
        (None, None) => return usage("--kind is required when no synth:// source is given"),
    };
    if let Some(m) = t.metric {
        spec.metric = m;
    }
    if let Some(n) = t.labels {
        spec.labels = LabelSpace::Classes(n);
    }
    spec.validate()?;
    ctx.record("task", &spec);
    Ok(spec)
}

fn dataset(ctx: &mut Ctx, source: &str, task: &TaskSpec) -> Result<Dataset> {
    ctx.input(source)?;
    load_dataset(source, task).with_context(|| format!("loading {source}"))
}

fn selector(expr: &str) -> Result<Selector> {
    expr.parse().or_else(|e| usage(format!("bad selector `{expr}`: {e}")))
}

/// Loads a checkpoint, replacing its head when it does not fit `head`.
fn load_model(ctx: &mut Ctx, m: &cli::ModelArgs, head: Head) -> Result<(ModelConfig, ParamTree)> {
    ctx.input(&m.model)?;
    let (mut config, mut params) = load_checkpoint(&m.model).with_context(|| format!("loading {}", m.model))?;
    if config.head != head {
        let seed = m.head_seed.or(ctx.settings.head_seed).unwrap_or(0);
        ctx.seeds.insert("head".into(), seed);
        config = reinit_head(&mut params, &config, head, seed)?;
    }
    ctx.record("model", &config);
    Ok((config, params))
}

fn load_fishers(ctx: &mut Ctx, paths: &[String]) -> Result<Vec<FisherMap>> {
    paths
        .iter()
        .map(|p| {
            ctx.input(p)?;
            FisherMap::load(p).with_context(|| format!("loading {p}"))
        })
        .collect()
}

fn strategy_of(name: StrategyName, random_seed: u64, mask: Option<MaskSpec>) -> Result<Strategy> {
    Ok(match name {
        StrategyName::Full => Strategy::Full,
        StrategyName::Bitfit => Strategy::BitFit,
        StrategyName::Layernorm => Strategy::LayerNorm,
        StrategyName::Random => Strategy::Random { seed: random_seed },
        StrategyName::Mask => match mask {
            Some(spec) => Strategy::Mask(spec),
            None => return usage("the mask strategy needs --mask"),
        },
    })
}

fn train_config(ctx: &mut Ctx, strategy: &Strategy, metric: MetricKind, a: &cli::TrainArgs) -> Result<TrainConfig> {
    let seed = ctx.seed("train", a.seed);
    let s = &ctx.settings;
    let mut tc = TrainConfig::new(strategy, metric, seed);
    if let Some(grid) = &s.lr_grid {
        tc.lr_grid = grid.clone();
    }
    tc.max_epochs = a.epochs.or(s.epochs).unwrap_or(tc.max_epochs);
    tc.batch_size = a.batch_size.or(s.batch_size).unwrap_or(tc.batch_size);
    tc.eval_batch_size = s.eval_batch_size.unwrap_or(tc.eval_batch_size);
    tc.optimizer.beta1 = s.beta1.unwrap_or(tc.optimizer.beta1);
    tc.optimizer.beta2 = s.beta2.unwrap_or(tc.optimizer.beta2);
    tc.optimizer.eps = s.adam_eps.unwrap_or(tc.optimizer.eps);
    tc.optimizer.weight_decay = s.weight_decay.unwrap_or(tc.optimizer.weight_decay);
    if !a.lr.is_empty() {
        tc.lr_grid = a.lr.clone();
    }
    ctx.record("train", &tc);
    Ok(tc)
}

fn mask_mode(mode: MaskModeName, task: Option<&str>, exclude: Option<&str>) -> Result<MaskMode> {
    Ok(match mode {
        MaskModeName::Task => match task {
            Some(t) => MaskMode::Task { task: t.to_string() },
            None => return usage("task mode needs --task"),
        },
        MaskModeName::Global => MaskMode::Global,
        MaskModeName::Cv => match exclude {
            Some(t) => MaskMode::Cv { excluded: t.to_string() },
            None => return usage("cv mode needs --exclude"),
        },
    })
}

pub fn count_params(ctx: &mut Ctx, a: &cli::CountParams) -> Result<Outcome> {
    let config = ModelConfig::preset(&a.preset, a.head).or_else(|e| usage(e.to_string()))?;
    let layout = ParamLayout::for_config(&config)?;
    ctx.record("model", &config);
    let count = match a.strategy {
        Some(name) => {
            let seed = ctx.seed("random", a.seed);
            let strategy = strategy_of(name, seed, None)?;
            ctx.record("strategy", strategy.name());
            make_freeze_plan(&strategy, &layout)?.count()
        }
        None => {
            let sel = selector(a.selector.as_deref().unwrap_or("all"))?;
            ctx.record("selector", sel.to_string());
            sel.count(&layout)?
        }
    };
    Ok(Outcome {
        stdout: format!("{count}\n"),
        ..Outcome::default()
    })
}

pub fn init(ctx: &mut Ctx, a: &cli::Init) -> Result<Outcome> {
    let config = ModelConfig::preset(&a.preset, a.head).or_else(|e| usage(e.to_string()))?;
    let seed = ctx.seed("init", a.seed);
    ctx.record("model", &config);
    let params = build_model(&config, seed)?;
    let mut out = Outcome {
        stdout: format!("{} parameters\n", params.numel()),
        ..Outcome::default()
    };
    out.file(&a.output, write_checkpoint(Vec::new(), &config, &params)?);
    Ok(out)
}

pub fn fisher(ctx: &mut Ctx, a: &cli::Fisher) -> Result<Outcome> {
    let spec = task_spec(ctx, &a.task, &[&a.data])?;
    let data = dataset(ctx, &a.data, &spec)?;
    let (config, params) = load_model(ctx, &a.model, spec.head())?;
    let samples = a.samples.or(ctx.settings.fisher_samples).unwrap_or(DEFAULT_FISHER_SAMPLES);
    let scope = selector(&a.scope)?;
    let seed = ctx.seed("fisher", a.seed);
    ctx.record("fisher", serde_json::json!({ "samples": samples, "scope": scope.to_string() }));
    let map = estimate_fisher(&params, &config, &data, &spec.name, &scope, samples, seed)?;
    let mut out = Outcome {
        stdout: format!("{}: {} samples, total {}\n", map.task, map.samples, fmt_real(map.total())),
        ..Outcome::default()
    };
    out.file(format!("fisher-{}.bin", spec.name), map.write(Vec::new())?);
    Ok(out)
}

pub fn rank(ctx: &mut Ctx, a: &cli::RankComponents) -> Result<Outcome> {
    let maps = load_fishers(ctx, &a.fisher)?;
    let summaries = maps.iter().map(summarize_components).collect::<lntune::Result<Vec<_>>>()?;
    let ranking = rank_components(&summaries);
    let mut out = Outcome::default();
    for (i, (c, v)) in ranking.iter().enumerate() {
        writeln!(out.stdout, "{:>2}  {:<28} {:.6}", i + 1, c.name(), v).unwrap();
    }
    out.file("ranking.csv", ranking_csv(&ranking));
    Ok(out)
}

pub fn mask(ctx: &mut Ctx, a: &cli::Mask) -> Result<Outcome> {
    let mode = mask_mode(a.mode, a.task.as_deref(), a.exclude.as_deref())?;
    let candidates = selector(&a.candidates)?;
    let maps = load_fishers(ctx, &a.fisher)?;
    ctx.record(
        "mask",
        serde_json::json!({ "mode": mode.to_string(), "fraction": a.fraction, "candidates": candidates.to_string() }),
    );
    let spec = build_mask(&mode, &maps, &candidates, a.fraction)?;
    let mut out = Outcome {
        stdout: format!("{mode}: {} elements selected from {}\n", spec.count(), spec.sources.join(",")),
        ..Outcome::default()
    };
    out.file(&a.output, spec.write(Vec::new())?);
    Ok(out)
}

pub fn train(ctx: &mut Ctx, a: &cli::Train) -> Result<Outcome> {
    let spec = task_spec(ctx, &a.task, &[&a.train, &a.validation])?;
    let train = dataset(ctx, &a.train, &spec)?;
    let validation = dataset(ctx, &a.validation, &spec)?;
    let (config, params) = load_model(ctx, &a.model, spec.head())?;
    let mask = match &a.mask {
        Some(p) => {
            ctx.input(p)?;
            Some(MaskSpec::load(p).with_context(|| format!("loading {p}"))?)
        }
        None => None,
    };
    let random_seed = match a.strategy {
        StrategyName::Random => ctx.seed("random", a.random_seed.or(a.train_args.seed)),
        _ => 0,
    };
    let strategy = strategy_of(a.strategy, random_seed, mask)?;
    ctx.record("strategy", strategy.name());
    let tc = train_config(ctx, &strategy, spec.metric, &a.train_args)?;
    let (report, best) = grid_search(&params, &config, &tc, &strategy, &train, &validation)?;
    if !report.frozen_intact() {
        bail!("frozen elements changed during training");
    }
    let mut out = Outcome {
        stdout: format!(
            "{} on {}: {} {} at lr {} epoch {} ({} of {} elements trainable)\n",
            report.strategy,
            spec.name,
            spec.metric,
            report.best_metric.score(),
            report.best_lr,
            report.best_epoch,
            report.trainable,
            report.total
        ),
        ..Outcome::default()
    };
    out.file("report.json", report.to_json());
    out.file("metrics.csv", report.metrics_csv());
    out.file("model.ckpt", write_checkpoint(Vec::new(), &config, &best)?);
    Ok(out)
}

fn encoder_only(tree: &ParamTree) -> Result<ParamTree> {
    let kept = tree
        .iter()
        .filter(|(p, _)| !is_head_path(p))
        .map(|(p, t)| (p.to_string(), t.clone()))
        .collect();
    Ok(ParamTree::from_tensors(kept)?)
}

pub fn drift(ctx: &mut Ctx, a: &cli::Drift) -> Result<Outcome> {
    ctx.input(&a.pre)?;
    ctx.input(&a.fine)?;
    let (_, pre) = load_checkpoint(&a.pre).with_context(|| format!("loading {}", a.pre))?;
    let (_, fine) = load_checkpoint(&a.fine).with_context(|| format!("loading {}", a.fine))?;
    // heads are replaced per task and are not part of the comparison
    let (pre, fine) = (encoder_only(&pre)?, encoder_only(&fine)?);
    let table = drift_heatmap(&pre, &fine)?;
    let mut dist = String::from("path,l0,l1\n");
    for ((path, x), (_, y)) in pre.iter().zip(fine.iter()) {
        let d = distances(x.data(), y.data())?;
        writeln!(dist, "{path},{},{}", d.l0, fmt_real(d.l1)).unwrap();
    }
    let mut out = Outcome {
        stdout: format!("{} layers x 8 components\n", table.values.len()),
        ..Outcome::default()
    };
    out.file("drift.csv", table.to_csv());
    out.file("distances.csv", dist);
    Ok(out)
}

pub fn heatmap(ctx: &mut Ctx, a: &cli::Heatmap) -> Result<Outcome> {
    let maps = load_fishers(ctx, &a.fisher)?;
    let mut tables = Vec::new();
    for m in &maps {
        tables.push((m.task.clone(), layer_heatmap(m.values())?));
    }
    if maps.len() > 1 {
        let refs: Vec<&FisherMap> = maps.iter().collect();
        tables.push(("global".to_string(), layer_heatmap(&normalized_sum(&refs)?)?));
    }
    let mut out = Outcome::default();
    let mut columns = Vec::new();
    for (name, t) in &tables {
        out.file(format!("heatmap-{name}.csv"), t.to_csv());
        writeln!(out.stdout, "heatmap-{name}.csv").unwrap();
        columns.push((format!("{name} weight"), t.rows.iter().map(|r| r.0).collect()));
        columns.push((format!("{name} bias"), t.rows.iter().map(|r| r.1).collect()));
    }
    if a.svg {
        out.file("heatmap.svg", crate::svg::heatmap(&columns));
    }
    Ok(out)
}

fn read_values(path: &str) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split([',', ' ', '\t']).filter(|t| !t.is_empty()).collect();
        let parsed: Vec<Option<f64>> = tokens.iter().map(|t| t.parse().ok()).collect();
        if i == 0 && !parsed.is_empty() && parsed.iter().all(Option::is_none) {
            continue; // header
        }
        for (t, v) in tokens.iter().zip(parsed) {
            match v {
                Some(v) => values.push(v),
                None => bail!("{path}:{}: `{t}` is not a number", i + 1),
            }
        }
    }
    Ok(values)
}

pub fn kwtest(ctx: &mut Ctx, a: &cli::Kwtest) -> Result<Outcome> {
    let mut groups = Vec::new();
    for p in &a.groups {
        ctx.input(p)?;
        groups.push(read_values(p)?);
    }
    let refs: Vec<&[f64]> = groups.iter().map(Vec::as_slice).collect();
    let kw = kruskal_wallis(&refs)?;
    let mut out = Outcome {
        stdout: format!("H = {:.5}\ndf = {}\np = {:.5}\n", kw.h, kw.df, kw.p_value),
        ..Outcome::default()
    };
    out.file("kwtest.csv", format!("h,df,p\n{},{},{}\n", fmt_real(kw.h), kw.df, fmt_real(kw.p_value)));
    Ok(out)
}

pub fn sweep(ctx: &mut Ctx, a: &cli::SweepF) -> Result<Outcome> {
    let spec = task_spec(ctx, &a.task, &[&a.train, &a.validation])?;
    let mode = mask_mode(a.mode, Some(&spec.name), a.exclude.as_deref())?;
    let candidates = selector(&a.candidates)?;
    let train = dataset(ctx, &a.train, &spec)?;
    let validation = dataset(ctx, &a.validation, &spec)?;
    let (config, params) = load_model(ctx, &a.model, spec.head())?;
    let mut out = Outcome::default();
    let maps = if a.fisher.is_empty() {
        if a.mode != MaskModeName::Task {
            return usage("global and cv sweeps need --fisher maps");
        }
        let samples = a.samples.or(ctx.settings.fisher_samples).unwrap_or(DEFAULT_FISHER_SAMPLES);
        let seed = ctx.seed("fisher", None);
        ctx.record("fisher", serde_json::json!({ "samples": samples, "scope": candidates.to_string() }));
        let map = estimate_fisher(&params, &config, &train, &spec.name, &candidates, samples, seed)?;
        out.file(format!("fisher-{}.bin", spec.name), map.write(Vec::new())?);
        vec![map]
    } else {
        load_fishers(ctx, &a.fisher)?
    };
    ctx.record(
        "sweep",
        serde_json::json!({ "mode": mode.to_string(), "fractions": a.fractions, "candidates": candidates.to_string() }),
    );
    let tc = train_config(ctx, &Strategy::LayerNorm, spec.metric, &a.train_args)?;
    let points = sweep_fractions(
        &params,
        &config,
        &tc,
        &mode,
        &maps,
        &candidates,
        &a.fractions,
        &train,
        &validation,
    )?;
    let csv = sweep_csv(&points);
    out.stdout = csv.clone();
    out.file("sweep.csv", csv);
    Ok(out)
}
