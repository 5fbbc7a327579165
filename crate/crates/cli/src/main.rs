#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod manifest;
mod market;
mod report;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdg_core::checkpoint::{Checkpoint, CheckpointMeta};
use cdg_core::config::RunConfig;
use cdg_core::data::{self, AlignMode, CsvSchema};
use cdg_core::eval::{self, MarketKind, SyntheticMarket};
use cdg_core::rng::{self, Stream};
use cdg_core::trainer::{TrainError, Trainer};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::error::CliError;
use crate::manifest::{InputDigest, RunManifest};
use crate::market::{EvalData, Market};

#[derive(Parser, Debug)]
#[command(name = "cdg", version, about = "Train and evaluate categorical (CDG) and expected-value (CG) return models")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Align CSV price files and write a panel cache.
    Ingest {
        /// One CSV per asset; the file stem becomes the asset id.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "forward-fill")]
        align: Align,
        #[arg(long, default_value = "timestamp")]
        timestamp_col: String,
        #[arg(long, default_value = "close")]
        close_col: String,
    },
    /// Train a model. Config keys can be overridden with `--section.key=value`.
    Train {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, short, default_value = "run")]
        out: PathBuf,
        /// Validate the config and print it with all defaults resolved.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write evaluation reports for the held-out window.
    Eval {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short, default_value = "eval")]
        out: PathBuf,
        /// Only dump the estimated distributions at bar `t`.
        #[arg(long)]
        at: Option<usize>,
    },
    /// Generate a synthetic market with its analytic return descriptor.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 0.0)]
        c: f64,
        #[arg(long, default_value_t = 0.0)]
        mu: f64,
        #[arg(long, default_value_t = 0.01, allow_hyphen_values = true)]
        sigma: f64,
        /// Row-stochastic matrix, rows separated by `;`, e.g. "0.9,0.1;0.2,0.8".
        #[arg(long)]
        transition: Option<String>,
        /// Per-state rewards, e.g. "0.01,-0.01".
        #[arg(long, allow_hyphen_values = true)]
        rewards: Option<String>,
        #[arg(long, default_value_t = 10_000)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.9")]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 1e-3)]
        horizon_tol: f64,
        #[arg(long, short, default_value = "synth")]
        out: PathBuf,
    },
    /// Print checkpoint metadata.
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Align {
    Intersect,
    ForwardFill,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    Constant,
    IidGauss,
    TwoStateMrp,
}

/// Splits `--section.key=value` overrides from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    args.into_iter().partition(|a| {
        a.strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'))
    })
    .into_swap()
}

trait Swap {
    fn into_swap(self) -> Self;
}

impl<T> Swap for (T, T) {
    fn into_swap(self) -> Self {
        (self.1, self.0)
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CDG_LOG", "info"))
        .format_timestamp_secs()
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let res = match cli.cmd {
        Cmd::Ingest {
            paths,
            out,
            align,
            timestamp_col,
            close_col,
        } => ingest(&paths, &out, align, CsvSchema { timestamp: timestamp_col, close: close_col }),
        Cmd::Train { config, out, dry_run } => train(&config, &overrides, &out, dry_run, cli.threads),
        Cmd::Eval { config, checkpoint, out, at } => evaluate(&config, &overrides, &checkpoint, &out, at),
        Cmd::Synth {
            kind,
            c,
            mu,
            sigma,
            transition,
            rewards,
            length,
            seed,
            gammas,
            horizon_tol,
            out,
        } => parse_market(kind, c, mu, sigma, transition.as_deref(), rewards.as_deref(), seed)
            .and_then(|m| synth(&m, length, &gammas, horizon_tol, &out)),
        Cmd::Inspect { checkpoint } => inspect(&checkpoint),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn ingest(paths: &[PathBuf], out: &Path, align: Align, schema: CsvSchema) -> Result<(), CliError> {
    let series = paths
        .iter()
        .map(|p| data::load_csv(p, &schema))
        .collect::<Result<Vec<_>, _>>()?;
    let mode = match align {
        Align::Intersect => AlignMode::Intersect,
        Align::ForwardFill => AlignMode::ForwardFill,
    };
    let (panel, stats) = data::align_with_stats(&series, mode)?;
    data::write_panel_cache(&panel, out)?;
    let report = json!({
        "schema": "cdg-ingest/1",
        "cache": out,
        "assets": panel.assets,
        "align": mode,
        "rows_read": stats.rows_read,
        "rows_dropped": stats.rows_dropped,
        "filled": stats.filled,
        "grid_len": stats.grid_len,
    });
    emit(&serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn write_atomic(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn train(config: &Path, overrides: &[String], out: &Path, dry_run: bool, threads: Option<usize>) -> Result<(), CliError> {
    let cfg = RunConfig::from_file(config, overrides)?;
    if dry_run {
        return emit(cfg.to_toml().trim_end());
    }
    let resolved = cfg.to_toml();
    let config_hash = manifest::digest(resolved.as_bytes());
    let tc = cfg.train_config()?;
    let market = Market::load(&cfg)?;
    let tasks = market.tasks(&cfg)?;
    let assets = market.assets();
    let lags = market.lags();
    let inputs = market.input_digests()?;

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved.toml"), &resolved)?;
    let mut man = RunManifest {
        schema: manifest::MANIFEST_SCHEMA.into(),
        config_hash: config_hash.clone(),
        seed: tc.seed,
        code_version: env!("CARGO_PKG_VERSION").into(),
        inputs: inputs.into_iter().map(|(path, sha256)| InputDigest { path, sha256 }).collect(),
        threads,
        started_at: manifest::now(),
        finished_at: None,
        checkpoint: out.join("checkpoint.bin"),
        metrics: out.join("metrics.jsonl"),
        metrics_sha256: None,
        steps: 0,
    };
    let man_path = out.join("manifest.json");
    man.write(&man_path)?;

    let meta = CheckpointMeta {
        spec: tc.net_spec(0, 0),
        config: tc.clone(),
        tasks: tasks.clone(),
        lags,
        assets,
        synthetic: cfg.synthetic.clone(),
        config_hash,
    };
    let mut source = market.source(&cfg, tasks.clone())?;
    let mut trainer = Trainer::new(tc, source.feature_dim(), tasks.len())?;
    let meta = CheckpointMeta {
        spec: trainer.spec.clone(),
        ..meta
    };
    log::info!(
        "training {:?} model: {} heads, {} inputs, {} parameters",
        trainer.cfg.model,
        trainer.spec.heads,
        trainer.spec.input_dim,
        trainer.params.len()
    );

    let mut metrics = BufWriter::new(File::create(&man.metrics)?);
    let every = cfg.train.checkpoint_every;
    let ck_path = man.checkpoint.clone();
    trainer.run(source.as_mut(), |t, report| {
        let line = serde_json::to_string(report).map_err(|e| TrainError::Sink(e.to_string()))?;
        writeln!(metrics, "{line}").map_err(|e| TrainError::Sink(e.to_string()))?;
        if every > 0 && t.step % every == 0 {
            write_atomic(&Checkpoint::from_trainer(t, meta.clone()), &ck_path).map_err(|e| TrainError::Sink(e.to_string()))?;
            log::info!("step {}: loss {:.6e}, grad norm {:.3e}", t.step, report.batch_total, report.grad_norm);
        }
        Ok(())
    })?;
    metrics.flush()?;
    drop(metrics);
    write_atomic(&Checkpoint::from_trainer(&trainer, meta), &ck_path)?;

    man.finished_at = Some(manifest::now());
    man.metrics_sha256 = Some(manifest::file_digest(&man.metrics)?);
    man.steps = trainer.step;
    man.write(&man_path)?;
    log::info!("done after {} steps; checkpoint {}", trainer.step, ck_path.display());
    Ok(())
}

fn evaluate(config: &Path, overrides: &[String], checkpoint: &Path, out: &Path, at: Option<usize>) -> Result<(), CliError> {
    let cfg = RunConfig::from_file(config, overrides)?;
    let ck = Checkpoint::load(checkpoint)?;
    let market = Market::load(&cfg)?;
    match (&market, &ck.meta.synthetic) {
        (Market::Panel(p), None) => {
            if ck.meta.lags.as_ref() != Some(&p.lags) {
                return Err(CliError::Compat(format!(
                    "checkpoint lags {:?} differ from config lags {:?}",
                    ck.meta.lags.as_ref().map(|l| l.lags().to_vec()),
                    p.lags.lags()
                )));
            }
            if ck.meta.assets != p.panel.assets {
                return Err(CliError::Compat(format!(
                    "checkpoint assets {:?} differ from panel assets {:?}",
                    ck.meta.assets, p.panel.assets
                )));
            }
        }
        (Market::Synthetic(_), Some(_)) => {}
        _ => return Err(CliError::Compat("checkpoint and config disagree on synthetic vs panel data".into())),
    }
    let data = EvalData::from_market(market, &cfg)?;
    let dim = data.features.first().map_or(0, |f| f.len());
    if dim != ck.meta.spec.input_dim {
        return Err(CliError::Compat(format!(
            "checkpoint expects {} features, data provides {dim}",
            ck.meta.spec.input_dim
        )));
    }
    std::fs::create_dir_all(out)?;
    if let Some(t) = at {
        let path = report::dump_at(&ck, &data, t, out)?;
        emit(&path.display().to_string())?;
        return Ok(());
    }
    let summary = report::write_reports(&ck, &data, &cfg.eval, out)?;
    emit(&serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn parse_list(raw: &str) -> Result<Vec<f64>, CliError> {
    raw.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("`{x}`: {e}"))))
        .collect()
}

fn parse_market(
    kind: SynthKind,
    c: f64,
    mu: f64,
    sigma: f64,
    transition: Option<&str>,
    rewards: Option<&str>,
    seed: u64,
) -> Result<SyntheticMarket, CliError> {
    let kind = match kind {
        SynthKind::Constant => MarketKind::Constant { c },
        SynthKind::IidGauss => MarketKind::IidGauss { mu, sigma },
        SynthKind::TwoStateMrp => {
            let t = transition.ok_or_else(|| CliError::Usage("two-state-mrp needs --transition".into()))?;
            let r = rewards.ok_or_else(|| CliError::Usage("two-state-mrp needs --rewards".into()))?;
            MarketKind::TwoStateMrp {
                transition: t.split(';').map(parse_list).collect::<Result<_, _>>()?,
                rewards: parse_list(r)?,
            }
        }
    };
    let m = SyntheticMarket { kind, seed };
    m.validate()?;
    Ok(m)
}

fn synth(market: &SyntheticMarket, length: usize, gammas: &[f64], tol: f64, out: &Path) -> Result<(), CliError> {
    if length == 0 {
        return Err(eval::EvalError::BadParams("length must be >= 1".into()).into());
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(eval::EvalError::BadParams(format!("discount {g} not in (0, 1)")).into());
    }
    let series = eval::synth_generate(market, length, &mut rng::substream(market.seed, Stream::Synth))?;
    std::fs::create_dir_all(out)?;
    let series_path = out.join("series.csv");
    let mut f = BufWriter::new(File::create(&series_path)?);
    writeln!(f, "# schema: cdg-synth-series/1")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["timestamp", "close", "state", "reward"])?;
    for (t, p) in series.prices.iter().enumerate() {
        let r = if t == 0 { String::new() } else { series.rewards[t - 1].to_string() };
        w.write_record([(t as i64 * 60).to_string(), p.to_string(), series.states[t].to_string(), r])?;
    }
    w.flush()?;
    let analytic: Vec<_> = gammas
        .iter()
        .map(|&g| market.analytic(g, Some(eval::truncation_horizon(g, tol))))
        .collect();
    let descriptor = json!({
        "schema": "cdg-synth-oracle/1",
        "market": market,
        "length": length,
        "series": "series.csv",
        "series_sha256": manifest::file_digest(&series_path)?,
        "analytic": analytic,
    });
    std::fs::write(out.join("oracle.json"), serde_json::to_string_pretty(&descriptor)? + "\n")?;
    emit(&out.join("oracle.json").display().to_string())?;
    Ok(())
}

fn inspect(path: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(path)?;
    let info = json!({
        "format_version": cdg_core::checkpoint::VERSION,
        "step": ck.step,
        "n_params": ck.params.len(),
        "adam_t": ck.adam.t,
        "meta": ck.meta,
    });
    emit(&serde_json::to_string_pretty(&info)?)?;
    Ok(())
}
