mod cli;
mod commands;
mod manifest;
mod settings;
mod svg;

use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;

use cli::{Cli, Command};
use commands::{Ctx, Outcome, Usage};
use manifest::{hash_input, sha256_hex, FileHash, RunManifest};
use settings::Settings;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = settings::env_seed().and_then(|env| match &cli.command {
        Command::Replay(r) => replay(&r.manifest),
        _ => execute(cli, args, env).map(|_| ()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Usage("--threads must be positive".into()).into());
        }
        // a second configuration within one process (replay) keeps the first
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs one subcommand, writes its artifacts and manifest, and returns the
/// manifest.
fn execute(cli: Cli, args: Vec<String>, env_seed: Option<u64>) -> Result<RunManifest> {
    configure_threads(cli.threads)?;
    let settings = match &cli.config {
        Some(p) => Settings::load(p).map_err(|e| Usage(format!("{e:#}")))?,
        None => Settings::default(),
    };
    let mut ctx = Ctx::new(settings, env_seed);
    if let Some(p) = &cli.config {
        ctx.inputs.push(hash_input(&p.to_string_lossy())?);
    }
    let outcome: Outcome = match &cli.command {
        Command::CountParams(a) => commands::count_params(&mut ctx, a)?,
        Command::Init(a) => commands::init(&mut ctx, a)?,
        Command::Fisher(a) => commands::fisher(&mut ctx, a)?,
        Command::RankComponents(a) => commands::rank(&mut ctx, a)?,
        Command::Mask(a) => commands::mask(&mut ctx, a)?,
        Command::Train(a) => commands::train(&mut ctx, a)?,
        Command::Drift(a) => commands::drift(&mut ctx, a)?,
        Command::Heatmap(a) => commands::heatmap(&mut ctx, a)?,
        Command::Kwtest(a) => commands::kwtest(&mut ctx, a)?,
        Command::SweepF(a) => commands::sweep(&mut ctx, a)?,
        Command::Replay(_) => bail!(Usage("a manifest cannot replay a replay".into())),
    };

    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let mut outputs = vec![FileHash {
        path: "-".into(),
        sha256: Some(sha256_hex(outcome.stdout.as_bytes())),
    }];
    for (name, bytes) in &outcome.files {
        let path = cli.out_dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(FileHash {
            path: name.clone(),
            sha256: Some(sha256_hex(bytes)),
        });
    }
    print!("{}", outcome.stdout);

    let command = cli.command.name().to_string();
    let manifest = RunManifest {
        tool: "lntune".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.clone(),
        args,
        env_seed,
        seeds: ctx.seeds,
        config: serde_json::Value::Object(ctx.config),
        inputs: ctx.inputs,
        outputs,
    };
    let path = cli.out_dir.join(format!("{command}.manifest.json"));
    std::fs::write(&path, manifest.to_json()).with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

/// Re-runs a manifest after checking its inputs, then compares every output
/// hash with the recorded one.
fn replay(path: &Path) -> Result<()> {
    let recorded = RunManifest::load(path)?;
    for input in &recorded.inputs {
        let now = hash_input(&input.path)?;
        if now.sha256 != input.sha256 {
            bail!("input {} changed since the recorded run", input.path);
        }
    }
    let argv = std::iter::once("lntune".to_string()).chain(recorded.args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| Usage(format!("recorded arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        bail!(Usage("a manifest cannot replay a replay".into()));
    }
    let fresh = execute(cli, recorded.args.clone(), recorded.env_seed)?;
    let mut differing = Vec::new();
    for (a, b) in recorded.outputs.iter().zip(&fresh.outputs) {
        if a != b {
            differing.push(a.path.clone());
        }
    }
    if recorded.outputs.len() != fresh.outputs.len() {
        differing.push("<output list>".into());
    }
    if !differing.is_empty() {
        bail!("replay of {} differs in {}", recorded.command, differing.join(", "));
    }
    eprintln!("replayed {}: {} outputs identical", recorded.command, fresh.outputs.len());
    Ok(())
}
