//! Evaluation reports over the held-out window.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cdg_core::checkpoint::Checkpoint;
use cdg_core::config::EvalSection;
use cdg_core::distrib::CategoricalDist;
use cdg_core::env::{self, BaseTask, RewardKind, TaskKind};
use cdg_core::eval;
use cdg_core::trainer::{evaluate_heads, HeadOutput};
use serde::Serialize;

use crate::error::CliError;
use crate::market::EvalData;

pub const REPORT_VERSION: u32 = 1;

fn csv_out(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let mut f = BufWriter::new(File::create(dir.join(format!("{name}.csv")))?);
    writeln!(f, "# schema: cdg-{name}/{REPORT_VERSION}")?;
    Ok(csv::Writer::from_writer(f))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadSummary {
    pub task: String,
    pub gamma: f64,
    pub horizon: usize,
    pub n_estimates: usize,
    pub n_realized: usize,
    /// Steps without a full `horizon` lookahead.
    pub dropped: usize,
    pub mean_abs_error: Option<f64>,
    pub calibration_max_dev: Option<f64>,
    pub z_mean: Option<f64>,
    pub z_std: Option<f64>,
    pub z_degenerate: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencySummary {
    pub task: String,
    pub gamma_i: f64,
    pub gamma_j: f64,
    pub realized_max_abs: Option<f64>,
    pub estimate_max_abs: f64,
    pub estimate_mean_abs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema: String,
    pub checkpoint_step: u64,
    pub config_hash: String,
    pub window: [usize; 2],
    pub reward_kind: RewardKind,
    pub convention: cdg_core::CdfConvention,
    pub heads: Vec<HeadSummary>,
    pub gamma_consistency: Vec<ConsistencySummary>,
}

/// Worth path of `task` over the window and its one-step rewards.
fn worth_path(task: &BaseTask, data: &EvalData, kind: RewardKind) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let mut ts = task.initial_state();
    let mut worths = vec![ts.worth];
    let mut rewards = Vec::with_capacity(data.range.len());
    for t in data.range.start..data.range.end - 1 {
        let next = task.step(&ts, data.panel.row(t), data.panel.row(t + 1))?;
        rewards.push(env::reward(kind, ts.worth, next.worth)?);
        worths.push(next.worth);
        ts = next;
    }
    Ok((worths, rewards))
}

/// Price level the indicator is built on: the asset price, or the worth of an allocation.
fn level(task: &BaseTask, data: &EvalData, t: usize, worth: f64) -> f64 {
    match task.kind {
        TaskKind::SingleAsset { asset } => data.panel.close(t, asset),
        TaskKind::FixedAllocation { .. } => worth,
    }
}

fn head_outputs(ck: &Checkpoint, data: &EvalData, ts: &[usize]) -> Result<Vec<Vec<HeadOutput>>, CliError> {
    let feats: Vec<Vec<f64>> = ts.iter().map(|&t| data.features(t).to_vec()).collect();
    let mut out = Vec::with_capacity(feats.len());
    for chunk in feats.chunks(4096) {
        out.extend(evaluate_heads(&ck.meta.spec, &ck.params, &ck.meta.config.grids, chunk)?);
    }
    Ok(out)
}

/// Per-head dump of the estimate at bar `t`.
pub fn dump_at(ck: &Checkpoint, data: &EvalData, t: usize, dir: &Path) -> Result<PathBuf, CliError> {
    if !data.range.contains(&t) {
        return Err(CliError::Usage(format!(
            "--at {t} is outside the evaluation window {}..{}",
            data.range.start, data.range.end
        )));
    }
    let heads = head_outputs(ck, data, &[t])?.remove(0);
    let gammas = &ck.meta.config.gammas;
    let kind = ck.meta.config.reward_kind;
    let mut w = csv_out(dir, &format!("dist_at_{t}"))?;
    w.write_record(["t", "task", "gamma", "atom_index", "atom", "prob"])?;
    for (i, task) in ck.meta.tasks.iter().enumerate() {
        let scale = match kind {
            RewardKind::LogReturn => 1.0,
            RewardKind::CashReturn => {
                let (worths, _) = worth_path(task, data, kind)?;
                worths[t - data.range.start]
            }
        };
        for (j, gamma) in gammas.iter().enumerate() {
            let row = |k: String, atom: f64, p: f64| [t.to_string(), task.id.clone(), gamma.to_string(), k, (atom * scale).to_string(), p.to_string()];
            match &heads[i * gammas.len() + j] {
                HeadOutput::Dist(d) => {
                    for (k, p) in d.probs().iter().enumerate() {
                        w.write_record(row(k.to_string(), d.grid().atom(k), *p))?;
                    }
                }
                HeadOutput::Scalar(v) => w.write_record(row(String::new(), *v, 1.0))?,
            }
        }
    }
    w.flush()?;
    Ok(dir.join(format!("dist_at_{t}.csv")))
}

fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    Some((m, v.sqrt()))
}

/// Writes every report file into `dir` and returns the summary.
pub fn write_reports(ck: &Checkpoint, data: &EvalData, opts: &EvalSection, dir: &Path) -> Result<Summary, CliError> {
    let cfg = &ck.meta.config;
    let gammas = &cfg.gammas;
    let kind = cfg.reward_kind;
    let ts: Vec<usize> = data.range.clone().collect();
    let outputs = head_outputs(ck, data, &ts)?;

    let mut realized_w = csv_out(dir, "realized")?;
    realized_w.write_record(["t", "timestamp", "task", "gamma", "worth", "realized"])?;
    let mut est_w = csv_out(dir, "estimates")?;
    est_w.write_record(["t", "timestamp", "task", "gamma", "mean", "std", "level", "indicator", "realized", "z"])?;
    let mut cal_w = csv_out(dir, "calibration")?;
    cal_w.write_record(["task", "gamma", "percentile", "count", "n", "convention"])?;
    let mut hist_w = csv_out(dir, "zstat_hist")?;
    hist_w.write_record(["task", "gamma", "lo", "hi", "count", "normal_ref"])?;
    let mut curve_w = csv_out(dir, "gamma_curves")?;
    curve_w.write_record(["t", "timestamp", "task", "gamma", "mean", "std"])?;

    let mut heads = Vec::new();
    let mut consistency = Vec::new();
    for (i, task) in ck.meta.tasks.iter().enumerate() {
        let (worths, rewards) = worth_path(task, data, kind)?;
        // scale from the model's per-unit-worth outputs to the reported quantity
        let scale = |k: usize| match kind {
            RewardKind::LogReturn => 1.0,
            RewardKind::CashReturn => worths[k],
        };
        let mut realized_by_gamma = Vec::new();
        let mut estimates_by_gamma = Vec::new();
        for (j, &gamma) in gammas.iter().enumerate() {
            let h = i * gammas.len() + j;
            let horizon = eval::truncation_horizon(gamma, opts.horizon_tol);
            let realized = eval::realized_g(&rewards, gamma, horizon).unwrap_or_default();
            let mut z = Vec::new();
            let mut z_degenerate = 0;
            let mut abs_err = Vec::new();
            let mut dists: Vec<CategoricalDist> = Vec::new();
            let mut cal_realized = Vec::new();
            let mut means = Vec::with_capacity(ts.len());
            for (k, &t) in ts.iter().enumerate() {
                let out = &outputs[k][h];
                let s = scale(k);
                let mean = out.mean() * s;
                let std = out.std().map(|v| v * s);
                means.push(mean);
                let lvl = level(task, data, t, worths[k]);
                let ind = eval::indicator(lvl, mean, kind);
                let g = realized.get(k).copied();
                let zt = match (g, std) {
                    (Some(g), Some(sd)) => match eval::z_statistic(mean, g, sd) {
                        Ok(v) => Some(v),
                        Err(_) => {
                            z_degenerate += 1;
                            None
                        }
                    },
                    _ => None,
                };
                if let Some(g) = g {
                    abs_err.push((mean - g).abs());
                    realized_w.write_record([t.to_string(), data.panel.grid[t].to_string(), task.id.clone(), gamma.to_string(), worths[k].to_string(), g.to_string()])?;
                    if let HeadOutput::Dist(d) = out {
                        dists.push(d.clone());
                        cal_realized.push(g / s);
                    }
                }
                z.extend(zt);
                est_w.write_record([
                    t.to_string(),
                    data.panel.grid[t].to_string(),
                    task.id.clone(),
                    gamma.to_string(),
                    mean.to_string(),
                    opt(std),
                    lvl.to_string(),
                    ind.to_string(),
                    opt(g),
                    opt(zt),
                ])?;
            }
            let calibration = if dists.is_empty() {
                None
            } else {
                let rep = eval::percentile_counts(&dists, &cal_realized, &opts.percentiles, opts.convention)?;
                for (q, c) in rep.percentiles.iter().zip(&rep.counts) {
                    cal_w.write_record([task.id.clone(), gamma.to_string(), q.to_string(), c.to_string(), rep.n.to_string(), format!("{:?}", rep.convention).to_lowercase()])?;
                }
                Some(rep.percentiles.iter().zip(&rep.counts).map(|(q, c)| (q - c).abs()).fold(0.0, f64::max))
            };
            if !z.is_empty() {
                for b in eval::z_histogram(&z, opts.hist_bins, opts.hist_limit) {
                    hist_w.write_record([task.id.clone(), gamma.to_string(), b.lo.to_string(), b.hi.to_string(), b.count.to_string(), b.normal_ref.to_string()])?;
                }
            }
            let zs = mean_std(&z);
            heads.push(HeadSummary {
                task: task.id.clone(),
                gamma,
                horizon,
                n_estimates: ts.len(),
                n_realized: realized.len(),
                dropped: ts.len() - realized.len(),
                mean_abs_error: mean_std(&abs_err).map(|(m, _)| m),
                calibration_max_dev: calibration,
                z_mean: zs.map(|(m, _)| m),
                z_std: zs.map(|(_, s)| s),
                z_degenerate,
            });
            realized_by_gamma.push(realized);
            estimates_by_gamma.push(means);
        }

        // gamma curves, discounts in increasing order
        let mut order: Vec<usize> = (0..gammas.len()).collect();
        order.sort_by(|a, b| gammas[*a].total_cmp(&gammas[*b]));
        for (k, &t) in ts.iter().enumerate() {
            for &j in &order {
                let out = &outputs[k][i * gammas.len() + j];
                let s = scale(k);
                curve_w.write_record([t.to_string(), data.panel.grid[t].to_string(), task.id.clone(), gammas[j].to_string(), (out.mean() * s).to_string(), opt(out.std().map(|v| v * s))])?;
            }
        }

        for w in order.windows(2) {
            let (a, b) = (w[0], w[1]);
            let est = eval::gamma_consistency_residual(&estimates_by_gamma[a], &estimates_by_gamma[b], gammas[a], gammas[b])?;
            let n = realized_by_gamma[a].len().min(realized_by_gamma[b].len());
            let real = if n > 1 {
                let r = eval::gamma_consistency_residual(&realized_by_gamma[a][..n], &realized_by_gamma[b][..n], gammas[a], gammas[b])?;
                Some(r.iter().fold(0.0f64, |m, x| m.max(x.abs())))
            } else {
                None
            };
            consistency.push(ConsistencySummary {
                task: task.id.clone(),
                gamma_i: gammas[a],
                gamma_j: gammas[b],
                realized_max_abs: real,
                estimate_max_abs: est.iter().fold(0.0f64, |m, x| m.max(x.abs())),
                estimate_mean_abs: est.iter().map(|x| x.abs()).sum::<f64>() / est.len().max(1) as f64,
            });
        }
    }
    for w in [&mut realized_w, &mut est_w, &mut cal_w, &mut hist_w, &mut curve_w] {
        w.flush()?;
    }

    let summary = Summary {
        schema: format!("cdg-summary/{REPORT_VERSION}"),
        checkpoint_step: ck.step,
        config_hash: ck.meta.config_hash.clone(),
        window: [data.range.start, data.range.end],
        reward_kind: kind,
        convention: opts.convention,
        heads,
        gamma_consistency: consistency,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
