//! Base tasks and their worth dynamics; transition generation.
//!
//! A base task is a fixed strategy: either holding one asset, or a long-only
//! allocation that is reset to its target weights whenever the drifted weights
//! move further than a threshold (L1) away from it. Costs are charged at the
//! decision time on the L1 turnover.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AlignedPanel, FeatureMatrix, State};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("non-positive price")]
    NonPositivePrice,
    #[error("non-positive worth {0}")]
    NonPositiveWorth(f64),
    #[error("transaction costs wipe out the worth (cost factor {0})")]
    WorthWipeout(f64),
    #[error("invalid base task `{id}`: {reason}")]
    BadTask { id: String, reason: String },
    #[error("episode window {start}..{end} is outside the usable range {lo}..{hi}")]
    WindowOutOfRange {
        start: usize,
        end: usize,
        lo: usize,
        hi: usize,
    },
    #[error("invalid discount {0}")]
    BadGamma(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    SingleAsset { asset: usize },
    FixedAllocation { weights: Vec<f64>, threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTask {
    pub id: String,
    #[serde(flatten)]
    pub kind: TaskKind,
    /// Proportional transaction cost plus slippage.
    #[serde(default)]
    pub cost_rate: f64,
}

impl BaseTask {
    pub fn single(id: impl Into<String>, asset: usize) -> Self {
        Self {
            id: id.into(),
            kind: TaskKind::SingleAsset { asset },
            cost_rate: 0.0,
        }
    }

    pub fn allocation(
        id: impl Into<String>,
        weights: Vec<f64>,
        threshold: f64,
        cost_rate: f64,
    ) -> Result<Self, EnvError> {
        let task = Self {
            id: id.into(),
            kind: TaskKind::FixedAllocation { weights, threshold },
            cost_rate,
        };
        task.validate(None)?;
        Ok(task)
    }

    /// Checks task parameters. With `n_assets`, also the asset references.
    pub fn validate(&self, n_assets: Option<usize>) -> Result<(), EnvError> {
        let bad = |reason: String| EnvError::BadTask {
            id: self.id.clone(),
            reason,
        };
        if !(0.0..1.0).contains(&self.cost_rate) {
            return Err(bad(format!("cost rate {} not in [0, 1)", self.cost_rate)));
        }
        match &self.kind {
            TaskKind::SingleAsset { asset } => {
                if let Some(n) = n_assets {
                    if *asset >= n {
                        return Err(bad(format!("asset {asset} out of {n}")));
                    }
                }
            }
            TaskKind::FixedAllocation { weights, threshold } => {
                if weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(bad("negative weight".into()));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(bad(format!("weights sum to {sum}")));
                }
                if !(*threshold >= 0.0) {
                    return Err(bad(format!("threshold {threshold} < 0")));
                }
                if let Some(n) = n_assets {
                    if weights.len() != n {
                        return Err(bad(format!("{} weights for {n} assets", weights.len())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Worth 1, invested at the target allocation.
    pub fn initial_state(&self) -> TaskState {
        match &self.kind {
            TaskKind::SingleAsset { .. } => TaskState {
                worth: 1.0,
                adjusted: Vec::new(),
            },
            TaskKind::FixedAllocation { weights, .. } => TaskState {
                worth: 1.0,
                adjusted: weights.clone(),
            },
        }
    }

    /// Advances the task over one bar.
    pub fn step(&self, ts: &TaskState, prices_t: &[f64], prices_next: &[f64]) -> Result<TaskState, EnvError> {
        match &self.kind {
            TaskKind::SingleAsset { asset } => step_single(ts, prices_t[*asset], prices_next[*asset]),
            TaskKind::FixedAllocation { .. } => step_portfolio(self, ts, prices_t, prices_next),
        }
    }
}

/// Worth and drifted ("adjusted") weights of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub worth: f64,
    pub adjusted: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    LogReturn,
    CashReturn,
}

pub fn step_single(ts: &TaskState, z_t: f64, z_next: f64) -> Result<TaskState, EnvError> {
    if !(z_t > 0.0 && z_next > 0.0) {
        return Err(EnvError::NonPositivePrice);
    }
    Ok(TaskState {
        worth: ts.worth * (z_next / z_t),
        adjusted: ts.adjusted.clone(),
    })
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Target weights when the L1 drift exceeds the threshold, otherwise the drifted weights.
pub fn rebalance_decision(task: &BaseTask, adjusted: &[f64]) -> Vec<f64> {
    match &task.kind {
        TaskKind::FixedAllocation { weights, threshold } => {
            if l1(adjusted, weights) > *threshold {
                weights.clone()
            } else {
                adjusted.to_vec()
            }
        }
        TaskKind::SingleAsset { .. } => adjusted.to_vec(),
    }
}

/// One bar of a long-only allocation: decide, pay costs on the turnover, grow.
pub fn step_portfolio(
    task: &BaseTask,
    ts: &TaskState,
    prices_t: &[f64],
    prices_next: &[f64],
) -> Result<TaskState, EnvError> {
    if prices_t.iter().chain(prices_next).any(|z| !(*z > 0.0)) {
        return Err(EnvError::NonPositivePrice);
    }
    let position = rebalance_decision(task, &ts.adjusted);
    let cost_factor = 1.0 - task.cost_rate * l1(&position, &ts.adjusted);
    if !(cost_factor > 0.0) {
        return Err(EnvError::WorthWipeout(cost_factor));
    }
    let grown: Vec<f64> = position
        .iter()
        .zip(prices_t.iter().zip(prices_next))
        .map(|(p, (z, zn))| p * (zn / z))
        .collect();
    let growth: f64 = grown.iter().sum();
    Ok(TaskState {
        worth: ts.worth * cost_factor * growth,
        adjusted: grown.iter().map(|g| g / growth).collect(),
    })
}

pub fn reward(kind: RewardKind, w_prev: f64, w_now: f64) -> Result<f64, EnvError> {
    match kind {
        RewardKind::LogReturn => {
            if !(w_prev > 0.0 && w_now > 0.0) {
                return Err(EnvError::NonPositiveWorth(w_prev.min(w_now)));
            }
            Ok((w_now / w_prev).ln())
        }
        RewardKind::CashReturn => Ok(w_now - w_prev),
    }
}

/// `r_1 + gamma r_2 + ... + gamma^{n-1} r_n`.
pub fn nstep_aggregate(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// An n-step transition for all tasks and discounts.
///
/// `rewards` is row-major `[task x gamma]`; `s.worth_snapshot[i]` and
/// `s_next.worth_snapshot[i]` are the worths of task `i` at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: State,
    pub rewards: Vec<f64>,
    pub n_gammas: usize,
    pub s_next: State,
    pub n: usize,
    pub terminal: bool,
}

impl Transition {
    #[inline]
    pub fn reward(&self, task: usize, gamma: usize) -> f64 {
        self.rewards[task * self.n_gammas + gamma]
    }

    pub fn worths(&self, task: usize) -> (f64, f64) {
        (self.s.worth_snapshot[task], self.s_next.worth_snapshot[task])
    }

    pub fn n_tasks(&self) -> usize {
        self.s.worth_snapshot.len()
    }
}

/// Prices and features indexed by bar.
pub trait MarketView {
    fn n_assets(&self) -> usize;
    /// Number of bars.
    fn len(&self) -> usize;
    /// First bar with valid features.
    fn first_feature(&self) -> usize;
    fn prices(&self, t: usize) -> &[f64];
    fn features(&self, t: usize) -> Vec<f64>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A panel with precomputed features.
pub struct PanelView<'a> {
    pub panel: &'a AlignedPanel,
    pub features: &'a FeatureMatrix,
}

impl MarketView for PanelView<'_> {
    fn n_assets(&self) -> usize {
        self.panel.n_assets()
    }
    fn len(&self) -> usize {
        self.panel.len()
    }
    fn first_feature(&self) -> usize {
        self.features.first()
    }
    fn prices(&self, t: usize) -> &[f64] {
        self.panel.row(t)
    }
    fn features(&self, t: usize) -> Vec<f64> {
        self.features.row(t).to_vec()
    }
}

/// Episode length bounds in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeBounds {
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for EpisodeBounds {
    fn default() -> Self {
        Self {
            min_len: 500,
            max_len: 1000,
        }
    }
}

/// Generates the transitions of one episode covering bars `start..=start + len`.
///
/// Worth starts at 1 for every task. The transition at bar `t` carries the
/// n-step rewards `r_{t+1..=t+n}` aggregated per discount and the state at `t + n`.
/// The last transition is flagged terminal.
pub fn gen_transitions<V: MarketView + ?Sized>(
    view: &V,
    tasks: &[BaseTask],
    reward_kind: RewardKind,
    gammas: &[f64],
    n: usize,
    start: usize,
    len: usize,
) -> Result<Vec<Transition>, EnvError> {
    let hi = view.len();
    let lo = view.first_feature();
    if n == 0 || len < n || start < lo || start + len >= hi {
        return Err(EnvError::WindowOutOfRange {
            start,
            end: start + len,
            lo,
            hi,
        });
    }
    if let Some(g) = gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(EnvError::BadGamma(*g));
    }
    for task in tasks {
        task.validate(Some(view.n_assets()))?;
    }

    // worth paths and one-step rewards, indexed [task][k]
    let mut worths = vec![Vec::with_capacity(len + 1); tasks.len()];
    let mut step_rewards = vec![Vec::with_capacity(len); tasks.len()];
    for (i, task) in tasks.iter().enumerate() {
        let mut ts = task.initial_state();
        worths[i].push(ts.worth);
        for k in 0..len {
            let next = task.step(&ts, view.prices(start + k), view.prices(start + k + 1))?;
            step_rewards[i].push(reward(reward_kind, ts.worth, next.worth)?);
            worths[i].push(next.worth);
            ts = next;
        }
    }

    let n_trans = len - n + 1;
    let mut out = Vec::with_capacity(n_trans);
    let mut cur = view.features(start);
    for k in 0..n_trans {
        let next = view.features(start + k + n);
        let mut rewards = Vec::with_capacity(tasks.len() * gammas.len());
        for r in &step_rewards {
            for &g in gammas {
                rewards.push(nstep_aggregate(&r[k..k + n], g));
            }
        }
        out.push(Transition {
            s: State {
                t: start + k,
                features: cur,
                worth_snapshot: worths.iter().map(|w| w[k]).collect(),
            },
            rewards,
            n_gammas: gammas.len(),
            s_next: State {
                t: start + k + n,
                features: next.clone(),
                worth_snapshot: worths.iter().map(|w| w[k + n]).collect(),
            },
            n,
            terminal: k + 1 == n_trans,
        });
        cur = if n == 1 { next } else { view.features(start + k + 1) };
    }
    Ok(out)
}

/// Draws a uniform start and length inside `range` and generates the episode.
/// The length is shortened when the range cannot fit `bounds.min_len`.
#[allow(clippy::too_many_arguments)]
pub fn sample_episode<V: MarketView + ?Sized, R: Rng + ?Sized>(
    view: &V,
    tasks: &[BaseTask],
    reward_kind: RewardKind,
    gammas: &[f64],
    n: usize,
    range: Range<usize>,
    bounds: EpisodeBounds,
    rng: &mut R,
) -> Result<Vec<Transition>, EnvError> {
    let lo = range.start.max(view.first_feature());
    let hi = range.end.min(view.len());
    let available = hi.saturating_sub(lo + 1);
    if available < n.max(1) {
        return Err(EnvError::WindowOutOfRange {
            start: lo,
            end: hi,
            lo: view.first_feature(),
            hi: view.len(),
        });
    }
    let max_len = bounds.max_len.min(available).max(1);
    let min_len = bounds.min_len.min(max_len).max(n);
    let len = rng.random_range(min_len..=max_len);
    let start = rng.random_range(lo..=hi - 1 - len);
    gen_transitions(view, tasks, reward_kind, gammas, n, start, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureOptions, LagSpec};
    use proptest::prelude::*;

    fn unit() -> TaskState {
        TaskState {
            worth: 100.0,
            adjusted: Vec::new(),
        }
    }

    #[test]
    fn single_asset_steps() {
        assert_eq!(step_single(&unit(), 100.0, 101.0).unwrap().worth, 101.0);
        assert_eq!(step_single(&unit(), 100.0, 100.0).unwrap().worth, 100.0);
        let w = TaskState {
            worth: 50.0,
            adjusted: vec![],
        };
        assert!((step_single(&w, 200.0, 190.0).unwrap().worth - 47.5).abs() < 1e-12);
        assert_eq!(step_single(&unit(), 0.0, 1.0), Err(EnvError::NonPositivePrice));
    }

    #[test]
    fn rebalance_rule() {
        let p0 = vec![0.5, 0.5];
        let loose = BaseTask::allocation("a", p0.clone(), 0.3, 0.0).unwrap();
        let tight = BaseTask::allocation("b", p0.clone(), 0.1, 0.0).unwrap();
        let always = BaseTask::allocation("c", p0.clone(), 0.0, 0.0).unwrap();
        assert_eq!(rebalance_decision(&tight, &p0), p0);
        // drift 0.2 in L1
        assert_eq!(rebalance_decision(&tight, &[0.6, 0.4]), p0);
        assert_eq!(rebalance_decision(&loose, &[0.6, 0.4]), vec![0.6, 0.4]);
        assert_eq!(rebalance_decision(&always, &[0.5000001, 0.4999999]), p0);
    }

    #[test]
    fn portfolio_steps() {
        let task = BaseTask::allocation("p", vec![0.5, 0.5], 0.0, 0.0).unwrap();
        let ts = task.initial_state();
        let next = step_portfolio(&task, &ts, &[1.0, 1.0], &[1.01, 1.01]).unwrap();
        assert!((next.worth - 1.01).abs() < 1e-15);
        assert!((next.adjusted[0] - 0.5).abs() < 1e-15);

        let next = step_portfolio(&task, &ts, &[1.0, 1.0], &[1.1, 1.0]).unwrap();
        assert!((next.worth - 1.05).abs() < 1e-15);
        assert!((next.adjusted[0] - 0.523810).abs() < 1e-6);
        assert!((next.adjusted[1] - 0.476190).abs() < 1e-6);

        let costly = BaseTask::allocation("q", vec![0.5, 0.5], 0.0, 0.001).unwrap();
        let held = TaskState {
            worth: 2.0,
            adjusted: vec![1.0, 0.0],
        };
        let next = step_portfolio(&costly, &held, &[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert!((next.worth - 0.999 * 2.0).abs() < 1e-15);
        assert_eq!(next.adjusted, vec![0.5, 0.5]);
    }

    #[test]
    fn wipeout_and_bad_tasks() {
        let task = BaseTask {
            id: "x".into(),
            kind: TaskKind::FixedAllocation {
                weights: vec![0.0, 1.0],
                threshold: 0.0,
            },
            cost_rate: 0.6,
        };
        let held = TaskState {
            worth: 1.0,
            adjusted: vec![1.0, 0.0],
        };
        assert!(matches!(
            step_portfolio(&task, &held, &[1.0, 1.0], &[1.0, 1.0]),
            Err(EnvError::WorthWipeout(_))
        ));
        assert!(BaseTask::allocation("y", vec![0.5, 0.6], 0.0, 0.0).is_err());
        assert!(BaseTask::allocation("y", vec![1.0, 0.0], 0.0, 1.0).is_err());
        assert!(BaseTask::single("z", 3).validate(Some(2)).is_err());
    }

    #[test]
    fn rewards_and_aggregation() {
        let e = std::f64::consts::E;
        assert!((reward(RewardKind::LogReturn, 100.0, e * 100.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(reward(RewardKind::LogReturn, 3.0, 3.0).unwrap(), 0.0);
        assert_eq!(reward(RewardKind::CashReturn, 100.0, 101.0).unwrap(), 1.0);
        assert!(reward(RewardKind::LogReturn, 0.0, 1.0).is_err());

        assert_eq!(nstep_aggregate(&[1.0, 1.0, 1.0], 0.5), 1.75);
        assert_eq!(nstep_aggregate(&[0.37], 0.99), 0.37);
        assert!((nstep_aggregate(&[2.0, -1.0], 0.9) - 1.1).abs() < 1e-15);
        assert!((nstep_aggregate(&[0.01, 0.02, 0.03], 0.5) - 0.0275).abs() < 1e-15);
    }

    fn panel_view(prices: &[f64]) -> (AlignedPanel, FeatureMatrix) {
        let panel = AlignedPanel::from_prices("x", prices).unwrap();
        let fm = FeatureMatrix::build(&panel, &LagSpec::new(vec![1]).unwrap(), FeatureOptions::default()).unwrap();
        (panel, fm)
    }

    #[test]
    fn transitions_one_step() {
        let prices: Vec<f64> = (0..20).map(|i| 100.0 * (1.0 + 0.01 * (i % 3) as f64)).collect();
        let (panel, fm) = panel_view(&prices);
        let view = PanelView {
            panel: &panel,
            features: &fm,
        };
        let tasks = [BaseTask::single("x", 0)];
        let tr = gen_transitions(&view, &tasks, RewardKind::LogReturn, &[0.5, 0.9], 1, 1, 10).unwrap();
        assert_eq!(tr.len(), 10);
        for t in &tr {
            assert_eq!(t.reward(0, 0), t.reward(0, 1));
            let expected = (prices[t.s.t + 1] / prices[t.s.t]).ln();
            assert!((t.reward(0, 0) - expected).abs() < 1e-12);
            assert_eq!(t.s_next.t, t.s.t + 1);
        }
        assert!(tr.last().unwrap().terminal);
        assert!(!tr[0].terminal);
        assert_eq!(tr[0].s.worth_snapshot, vec![1.0]);

        let flat = vec![7.0; 30];
        let (panel, fm) = panel_view(&flat);
        let view = PanelView {
            panel: &panel,
            features: &fm,
        };
        let tasks = [
            BaseTask::single("x", 0),
            BaseTask::allocation("p", vec![1.0], 0.0, 0.0).unwrap(),
        ];
        let tr = gen_transitions(&view, &tasks, RewardKind::LogReturn, &[0.9], 1, 1, 20).unwrap();
        assert!(tr.iter().all(|t| t.rewards.iter().all(|r| *r == 0.0)));
    }

    #[test]
    fn transitions_n_step() {
        let mut prices = vec![1.0];
        for r in [0.01, 0.02, 0.03, 0.0, 0.0] {
            let last = *prices.last().unwrap();
            prices.push(last * f64::exp(r));
        }
        let (panel, fm) = panel_view(&prices);
        let view = PanelView {
            panel: &panel,
            features: &fm,
        };
        let tr = gen_transitions(&view, &[BaseTask::single("x", 0)], RewardKind::LogReturn, &[0.5], 3, 1, 4).unwrap();
        // first transition starts at bar 1 → rewards (0.02, 0.03, 0.0)
        assert_eq!(tr.len(), 2);
        assert!((tr[0].reward(0, 0) - (0.02 + 0.5 * 0.03)).abs() < 1e-12);
        assert_eq!(tr[0].s_next.t, 4);
        assert_eq!(tr[0].n, 3);
        let tr = gen_transitions(&view, &[BaseTask::single("x", 0)], RewardKind::LogReturn, &[0.5], 3, 0, 3);
        assert!(matches!(tr, Err(EnvError::WindowOutOfRange { .. })));
    }

    #[test]
    fn episodes_respect_range() {
        let prices: Vec<f64> = (0..3000).map(|i| 50.0 + (i as f64 * 0.01).sin()).collect();
        let (panel, fm) = panel_view(&prices);
        let view = PanelView {
            panel: &panel,
            features: &fm,
        };
        let mut rng = crate::rng::substream(3, crate::rng::Stream::Env);
        for _ in 0..20 {
            let tr = sample_episode(
                &view,
                &[BaseTask::single("x", 0)],
                RewardKind::CashReturn,
                &[0.9],
                2,
                0..2000,
                EpisodeBounds::default(),
                &mut rng,
            )
            .unwrap();
            assert!((499..=999).contains(&tr.len()));
            assert!(tr.last().unwrap().s_next.t < 2000);
            assert!(tr[0].s.t >= 1);
        }
    }

    fn price_path() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.5f64..2.0, 3), 2..60)
    }

    proptest! {
        #[test]
        fn worth_positive_and_simplex_closed(path in price_path(), delta in 0.0f64..0.4, c in 0.0f64..0.5) {
            let task = BaseTask::allocation("p", vec![0.2, 0.3, 0.5], c, delta).unwrap();
            let mut ts = task.initial_state();
            for w in path.windows(2) {
                ts = step_portfolio(&task, &ts, &w[0], &w[1]).unwrap();
                prop_assert!(ts.worth > 0.0);
                let s: f64 = ts.adjusted.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(ts.adjusted.iter().all(|p| *p >= 0.0));
            }
        }

        #[test]
        fn zero_cost_single_matches_unit_portfolio(path in price_path(), k in 0usize..3) {
            let single = BaseTask::single("s", k);
            let mut weights = vec![0.0; 3];
            weights[k] = 1.0;
            let port = BaseTask::allocation("p", weights, 0.0, 0.0).unwrap();
            let (mut a, mut b) = (single.initial_state(), port.initial_state());
            for w in path.windows(2) {
                a = single.step(&a, &w[0], &w[1]).unwrap();
                b = port.step(&b, &w[0], &w[1]).unwrap();
                prop_assert_eq!(a.worth.to_bits(), b.worth.to_bits());
            }
        }

        #[test]
        fn nstep_recursion(r in prop::collection::vec(-1.0f64..1.0, 2..12), gamma in 0.0f64..1.0) {
            let lhs = nstep_aggregate(&r, gamma);
            let rhs = r[0] + gamma * nstep_aggregate(&r[1..], gamma);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn cash_log_equivalence_at_unit_worth(w in 0.01f64..10.0) {
            let log = reward(RewardKind::LogReturn, 1.0, w).unwrap();
            let cash = reward(RewardKind::CashReturn, 1.0, w).unwrap();
            prop_assert!((cash - (log.exp() - 1.0)).abs() < 1e-12);
        }
    }
}
