//! Interaction / learning loop for CDG (categorical) and CG (expected value) models.
//!
//! Head `h = i * J + j` of the network estimates task `i` under discount
//! `gammas[j]`. A learning step samples a prioritized batch, builds the
//! per-head targets from the target network evaluated at `s_next`, weights
//! the per-sample losses with the importance weights, takes one Adam step,
//! refreshes the sampled priorities and soft-updates the target network.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AlignedPanel, FeatureMatrix};
use crate::distrib::{cross_entropy, CategoricalDist, DistribError, SupportGrid, LOG_EPS};
use crate::env::{self, BaseTask, EnvError, EpisodeBounds, MarketView, PanelView, RewardKind, Transition};
use crate::eval::{synth_generate, EvalError, MarketKind, SyntheticMarket};
use crate::net::{Activation, Adam, HeadKind, InitScheme, NetError, NetSpec, Params, TargetNet};
use crate::replay::{AnnealSchedule, PrioBuffer, ReplayError};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("expected {expected} heads, got {got}")]
    HeadCountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Distrib(#[from] DistribError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Sink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Categorical distribution per head.
    #[default]
    Cdg,
    /// Expected value per head.
    Cg,
}

/// How per-head losses combine into the per-sample loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityMode {
    /// Per-sample loss.
    #[default]
    Loss,
    /// Mean absolute TD error over heads (CG only; CDG falls back to the loss).
    TdError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub gammas: Vec<f64>,
    /// One support per discount (CDG only).
    pub grids: Vec<SupportGrid>,
    pub n_atoms: usize,
    pub n_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached linearly after `lr_decay_steps` learning steps.
    pub lr_end: f64,
    pub lr_decay_steps: u64,
    pub tau: f64,
    pub reward_kind: RewardKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init: InitScheme,
    pub buffer_capacity: usize,
    pub prio_epsilon: f64,
    pub anneal: AnnealSchedule,
    pub priority: PriorityMode,
    pub head_aggregation: HeadAggregation,
    pub min_buffer_fill: usize,
    /// Learning steps between two generated episodes.
    pub learn_steps_per_episode: usize,
    pub epochs: usize,
    pub episode: EpisodeBounds,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let grid = SupportGrid::new(-0.5, 0.5, 51).expect("valid default grid");
        Self {
            model: ModelKind::Cdg,
            gammas: vec![0.9],
            grids: vec![grid],
            n_atoms: 51,
            n_steps: 1,
            batch_size: 512,
            lr: 1e-5,
            lr_end: 1e-5,
            lr_decay_steps: 20_000,
            tau: 0.02,
            reward_kind: RewardKind::LogReturn,
            hidden: vec![256, 256],
            activation: Activation::Relu,
            init: InitScheme::FanIn,
            buffer_capacity: 80_000,
            prio_epsilon: 1e-6,
            anneal: AnnealSchedule::default(),
            priority: PriorityMode::Loss,
            head_aggregation: HeadAggregation::Mean,
            min_buffer_fill: 5000,
            learn_steps_per_episode: 50,
            epochs: 400,
            episode: EpisodeBounds::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.gammas.is_empty() {
            return bad("at least one discount is required".into());
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return bad(format!("discount {g} not in (0, 1)"));
        }
        if self.n_steps == 0 {
            return bad("n_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} not in (0, 1]", self.tau));
        }
        if !(self.lr >= 0.0 && self.lr_end >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.model == ModelKind::Cdg {
            if self.grids.len() != self.gammas.len() {
                return bad(format!("{} grids for {} discounts", self.grids.len(), self.gammas.len()));
            }
            if self.grids.iter().any(|g| g.n_atoms() != self.n_atoms) {
                return bad("all grids must share n_atoms".into());
            }
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity smaller than batch_size".into());
        }
        if self.episode.min_len == 0 || self.episode.min_len > self.episode.max_len {
            return bad("episode lengths must satisfy 1 <= min <= max".into());
        }
        Ok(())
    }

    pub fn net_spec(&self, input_dim: usize, n_tasks: usize) -> NetSpec {
        NetSpec {
            input_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            heads: n_tasks * self.gammas.len(),
            head_kind: match self.model {
                ModelKind::Cdg => HeadKind::Categorical { n_atoms: self.n_atoms },
                ModelKind::Cg => HeadKind::Scalar,
            },
        }
    }

    /// Learning rate after `step` learning steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        let frac = if self.lr_decay_steps == 0 {
            1.0
        } else {
            (step as f64 / self.lr_decay_steps as f64).min(1.0)
        };
        self.lr + (self.lr_end - self.lr) * frac
    }
}

/// Shape and discounting shared by the per-sample loss functions.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    pub gammas: &'a [f64],
    pub grids: &'a [SupportGrid],
    pub reward_kind: RewardKind,
    pub n_steps: usize,
    pub aggregation: HeadAggregation,
}

impl LossSpec<'_> {
    fn head_weight(&self, heads: usize) -> f64 {
        match self.aggregation {
            HeadAggregation::Mean => 1.0 / heads as f64,
            HeadAggregation::Sum => 1.0,
        }
    }

    /// Discount applied to the bootstrap after `n_steps` rewards.
    pub fn bootstrap_discount(&self, j: usize) -> f64 {
        self.gammas[j].powi(self.n_steps as i32)
    }
}

/// Per-sample loss pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    pub per_head: Vec<f64>,
    pub total: f64,
    /// Gradient of `total` with respect to the network outputs for `s`.
    pub upstream: Vec<f64>,
    /// Mean absolute TD error over heads (CG) or the total loss (CDG).
    pub priority_signal: f64,
}

/// Cross-entropy of the online heads against the projected target distributions.
///
/// `online` and `target_next` are flat output rows (`heads * n_atoms`).
pub fn cdg_sample_loss(
    online: &[f64],
    target_next: &[f64],
    tr: &Transition,
    spec: &LossSpec<'_>,
) -> Result<SampleLoss, TrainError> {
    let n_gammas = spec.gammas.len();
    let heads = tr.n_tasks() * n_gammas;
    let n_atoms = spec.grids.first().map(|g| g.n_atoms()).unwrap_or(0);
    if online.len() != heads * n_atoms || target_next.len() != online.len() || tr.n_gammas != n_gammas {
        return Err(TrainError::HeadCountMismatch {
            expected: heads * n_atoms,
            got: online.len(),
        });
    }
    let hw = spec.head_weight(heads);
    let mut per_head = Vec::with_capacity(heads);
    let mut upstream = vec![0.0; online.len()];
    for i in 0..tr.n_tasks() {
        let (w_t, w_next) = tr.worths(i);
        for j in 0..n_gammas {
            let h = i * n_gammas + j;
            let span = h * n_atoms..(h + 1) * n_atoms;
            let grid = &spec.grids[j];
            let r = tr.reward(i, j);
            let disc = spec.bootstrap_discount(j);
            let m = match spec.reward_kind {
                RewardKind::LogReturn => grid.project(&target_next[span.clone()], r, disc),
                RewardKind::CashReturn => grid.project_worth(&target_next[span.clone()], r, w_t, w_next, disc)?,
            };
            let p = &online[span.clone()];
            per_head.push(cross_entropy(&m, p));
            for ((u, mk), pk) in upstream[span].iter_mut().zip(&m).zip(p) {
                if *pk >= LOG_EPS {
                    *u = -hw * mk / pk;
                }
            }
        }
    }
    let total = hw * per_head.iter().sum::<f64>();
    Ok(SampleLoss {
        per_head,
        total,
        upstream,
        priority_signal: total,
    })
}

/// Squared TD error per head. With cash rewards the values are fractions of
/// worth: `(f(s) w_t - r - gamma^n f~(s') w_{t+n})^2`.
pub fn cg_sample_loss(
    online: &[f64],
    target_next: &[f64],
    tr: &Transition,
    spec: &LossSpec<'_>,
) -> Result<SampleLoss, TrainError> {
    let n_gammas = spec.gammas.len();
    let heads = tr.n_tasks() * n_gammas;
    if online.len() != heads || target_next.len() != heads || tr.n_gammas != n_gammas {
        return Err(TrainError::HeadCountMismatch {
            expected: heads,
            got: online.len(),
        });
    }
    let hw = spec.head_weight(heads);
    let mut per_head = Vec::with_capacity(heads);
    let mut upstream = vec![0.0; heads];
    let mut abs_td = 0.0;
    for i in 0..tr.n_tasks() {
        let (w_t, w_next) = match spec.reward_kind {
            RewardKind::LogReturn => (1.0, 1.0),
            RewardKind::CashReturn => tr.worths(i),
        };
        for j in 0..n_gammas {
            let h = i * n_gammas + j;
            let err = online[h] * w_t - tr.reward(i, j) - spec.bootstrap_discount(j) * target_next[h] * w_next;
            per_head.push(err * err);
            upstream[h] = hw * 2.0 * err * w_t;
            abs_td += err.abs();
        }
    }
    let total = hw * per_head.iter().sum::<f64>();
    Ok(SampleLoss {
        per_head,
        total,
        upstream,
        priority_signal: abs_td / heads as f64,
    })
}

/// Metrics of one learning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    /// `sum_b w_b L_b`.
    pub batch_total: f64,
    /// Unweighted batch mean of each head's loss.
    pub per_head: Vec<f64>,
    pub sample_totals: Vec<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub buffer_len: usize,
}

/// Produces episodes of transitions.
pub trait TransitionSource {
    fn feature_dim(&self) -> usize;
    fn n_tasks(&self) -> usize;
    fn episode(&mut self, rng: &mut Rng) -> Result<Vec<Transition>, TrainError>;
}

/// Episodes drawn from the training range of a price panel.
pub struct PanelSource {
    pub panel: AlignedPanel,
    pub features: FeatureMatrix,
    pub tasks: Vec<BaseTask>,
    pub reward_kind: RewardKind,
    pub gammas: Vec<f64>,
    pub n_steps: usize,
    pub range: Range<usize>,
    pub bounds: EpisodeBounds,
}

impl TransitionSource for PanelSource {
    fn feature_dim(&self) -> usize {
        self.features.dim()
    }

    fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn episode(&mut self, rng: &mut Rng) -> Result<Vec<Transition>, TrainError> {
        let view = PanelView {
            panel: &self.panel,
            features: &self.features,
        };
        Ok(env::sample_episode(
            &view,
            &self.tasks,
            self.reward_kind,
            &self.gammas,
            self.n_steps,
            self.range.clone(),
            self.bounds,
            rng,
        )?)
    }
}

/// A freshly generated synthetic path per episode, held by a single-asset task.
///
/// Features are `[1.0]` for state-free markets and a one-hot state vector for MRPs.
pub struct SyntheticSource {
    pub market: SyntheticMarket,
    pub reward_kind: RewardKind,
    pub gammas: Vec<f64>,
    pub n_steps: usize,
    pub bounds: EpisodeBounds,
}

struct SynthView {
    prices: Vec<f64>,
    states: Vec<usize>,
    n_states: usize,
    one_hot: bool,
}

impl MarketView for SynthView {
    fn n_assets(&self) -> usize {
        1
    }
    fn len(&self) -> usize {
        self.prices.len()
    }
    fn first_feature(&self) -> usize {
        0
    }
    fn prices(&self, t: usize) -> &[f64] {
        std::slice::from_ref(&self.prices[t])
    }
    fn features(&self, t: usize) -> Vec<f64> {
        if self.one_hot {
            let mut f = vec![0.0; self.n_states];
            f[self.states[t]] = 1.0;
            f
        } else {
            vec![1.0]
        }
    }
}

impl SyntheticSource {
    fn one_hot(&self) -> bool {
        matches!(self.market.kind, MarketKind::TwoStateMrp { .. })
    }
}

impl TransitionSource for SyntheticSource {
    fn feature_dim(&self) -> usize {
        if self.one_hot() {
            self.market.n_states()
        } else {
            1
        }
    }

    fn n_tasks(&self) -> usize {
        1
    }

    fn episode(&mut self, rng: &mut Rng) -> Result<Vec<Transition>, TrainError> {
        use rand::Rng as _;
        let len = rng.random_range(self.bounds.min_len.max(self.n_steps)..=self.bounds.max_len.max(self.n_steps));
        let series = synth_generate(&self.market, len, rng)?;
        let view = SynthView {
            prices: series.prices,
            states: series.states,
            n_states: self.market.n_states(),
            one_hot: self.one_hot(),
        };
        let task = BaseTask::single("synthetic", 0);
        Ok(env::gen_transitions(
            &view,
            std::slice::from_ref(&task),
            self.reward_kind,
            &self.gammas,
            self.n_steps,
            0,
            len,
        )?)
    }
}

/// The learner state: networks and optimizer, plus the replay buffer.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub spec: NetSpec,
    pub params: Params,
    pub target: TargetNet,
    pub adam: Adam,
    pub buffer: PrioBuffer<Transition>,
    pub step: u64,
    pub n_tasks: usize,
    pub env_rng: Rng,
    pub buffer_rng: Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, input_dim: usize, n_tasks: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        if n_tasks == 0 {
            return Err(TrainError::Config("at least one base task is required".into()));
        }
        let spec = cfg.net_spec(input_dim, n_tasks);
        spec.validate()?;
        let params = spec.init(cfg.init, &mut rng::substream(cfg.seed, Stream::NetInit));
        let (alpha, beta) = cfg.anneal.at(0);
        let buffer = PrioBuffer::new(cfg.buffer_capacity, alpha, beta, cfg.prio_epsilon)?;
        Ok(Self {
            target: TargetNet::new(&params, cfg.tau),
            adam: Adam::new(params.len()),
            env_rng: rng::substream(cfg.seed, Stream::Env),
            buffer_rng: rng::substream(cfg.seed, Stream::Buffer),
            params,
            buffer,
            step: 0,
            n_tasks,
            spec,
            cfg,
        })
    }

    fn loss_spec(&self) -> LossSpec<'_> {
        LossSpec {
            gammas: &self.cfg.gammas,
            grids: &self.cfg.grids,
            reward_kind: self.cfg.reward_kind,
            n_steps: self.cfg.n_steps,
            aggregation: self.cfg.head_aggregation,
        }
    }

    pub fn push(&mut self, tr: Transition) -> Result<u64, TrainError> {
        if tr.n_tasks() != self.n_tasks || tr.n_gammas != self.cfg.gammas.len() {
            return Err(TrainError::HeadCountMismatch {
                expected: self.n_tasks * self.cfg.gammas.len(),
                got: tr.rewards.len(),
            });
        }
        if tr.s.features.len() != self.spec.input_dim {
            return Err(NetError::DimMismatch {
                expected: self.spec.input_dim,
                got: tr.s.features.len(),
            }
            .into());
        }
        Ok(self.buffer.push(tr))
    }

    /// Generates one episode and pushes its transitions.
    pub fn collect_episode<S: TransitionSource + ?Sized>(&mut self, source: &mut S) -> Result<usize, TrainError> {
        let episode = source.episode(&mut self.env_rng)?;
        let n = episode.len();
        for tr in episode {
            self.push(tr)?;
        }
        Ok(n)
    }

    fn stack(&self, rows: impl Iterator<Item = Vec<f64>>, n: usize) -> Array2<f64> {
        let dim = self.spec.input_dim;
        let flat: Vec<f64> = rows.flatten().collect();
        Array2::from_shape_vec((n, dim), flat).expect("feature rows share the input dimension")
    }

    /// One prioritized learning step.
    pub fn learn_step(&mut self) -> Result<LossReport, TrainError> {
        self.buffer.anneal(&self.cfg.anneal, self.step);
        let batch = self.buffer.sample(self.cfg.batch_size, &mut self.buffer_rng)?;
        let n = batch.items.len();
        let x = self.stack(batch.items.iter().map(|t| t.s.features.clone()), n);
        let x_next = self.stack(batch.items.iter().map(|t| t.s_next.features.clone()), n);
        let cache = self.spec.forward(&self.params, x.view())?;
        let target_out = self.spec.forward(&self.target.params, x_next.view())?.output;

        let out_dim = self.spec.output_dim();
        let mut upstream = Array2::<f64>::zeros((n, out_dim));
        let mut per_head = vec![0.0; self.spec.heads];
        let mut sample_totals = Vec::with_capacity(n);
        let mut priorities = Vec::with_capacity(n);
        let mut batch_total = 0.0;
        let spec = self.loss_spec();
        for (b, tr) in batch.items.iter().enumerate() {
            let online = cache.output.row(b);
            let target = target_out.row(b);
            let (online, target) = (
                online.as_slice().expect("row-major"),
                target.as_slice().expect("row-major"),
            );
            let loss = match self.cfg.model {
                ModelKind::Cdg => cdg_sample_loss(online, target, tr, &spec)?,
                ModelKind::Cg => cg_sample_loss(online, target, tr, &spec)?,
            };
            let w = batch.weights[b];
            for (u, g) in upstream.row_mut(b).iter_mut().zip(&loss.upstream) {
                *u = w * g;
            }
            for (acc, l) in per_head.iter_mut().zip(&loss.per_head) {
                *acc += l / n as f64;
            }
            batch_total += w * loss.total;
            priorities.push(match (self.cfg.priority, self.cfg.model) {
                (PriorityMode::TdError, ModelKind::Cg) => loss.priority_signal,
                _ => loss.total,
            });
            sample_totals.push(loss.total);
        }
        let grad = self.spec.backward(&self.params, &cache, upstream.view())?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let lr = self.cfg.lr_at(self.step);
        self.adam.step(&mut self.params, &grad, lr)?;
        self.buffer.update_priorities(&batch.indices, &priorities)?;
        self.target.soft_update(&self.params)?;
        self.step += 1;
        Ok(LossReport {
            step: self.step,
            batch_total,
            per_head,
            sample_totals,
            grad_norm,
            lr,
            alpha: self.buffer.alpha(),
            beta: self.buffer.beta(),
            buffer_len: self.buffer.len(),
        })
    }

    /// Fills the buffer to `min_buffer_fill`, then alternates one episode with
    /// `learn_steps_per_episode` learning steps for `epochs` rounds.
    pub fn run<S, F>(&mut self, source: &mut S, mut on_step: F) -> Result<(), TrainError>
    where
        S: TransitionSource + ?Sized,
        F: FnMut(&Trainer, &LossReport) -> Result<(), TrainError>,
    {
        if source.feature_dim() != self.spec.input_dim {
            return Err(NetError::DimMismatch {
                expected: self.spec.input_dim,
                got: source.feature_dim(),
            }
            .into());
        }
        let fill = self
            .cfg
            .min_buffer_fill
            .max(self.cfg.batch_size)
            .min(self.cfg.buffer_capacity);
        while self.buffer.len() < fill {
            if self.collect_episode(source)? == 0 {
                return Err(TrainError::Config("source produced an empty episode".into()));
            }
        }
        for _ in 0..self.cfg.epochs {
            self.collect_episode(source)?;
            for _ in 0..self.cfg.learn_steps_per_episode {
                let report = self.learn_step()?;
                on_step(self, &report)?;
            }
        }
        Ok(())
    }

    /// Head outputs of the online network for a batch of feature rows.
    pub fn evaluate(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<HeadOutput>>, TrainError> {
        evaluate_heads(&self.spec, &self.params, &self.cfg.grids, features)
    }
}

/// One head's estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Dist(CategoricalDist),
    Scalar(f64),
}

impl HeadOutput {
    pub fn mean(&self) -> f64 {
        match self {
            HeadOutput::Dist(d) => d.mean(),
            HeadOutput::Scalar(v) => *v,
        }
    }

    pub fn std(&self) -> Option<f64> {
        match self {
            HeadOutput::Dist(d) => Some(d.std()),
            HeadOutput::Scalar(_) => None,
        }
    }
}

/// Deterministic forward pass; one `Vec<HeadOutput>` (all heads) per state.
///
/// `grids[h % grids.len()]` is the support of head `h` for categorical heads.
pub fn evaluate_heads(
    spec: &NetSpec,
    params: &Params,
    grids: &[SupportGrid],
    features: &[Vec<f64>],
) -> Result<Vec<Vec<HeadOutput>>, TrainError> {
    if features.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(f) = features.iter().find(|f| f.len() != spec.input_dim) {
        return Err(NetError::DimMismatch {
            expected: spec.input_dim,
            got: f.len(),
        }
        .into());
    }
    let x = Array2::from_shape_vec(
        (features.len(), spec.input_dim),
        features.iter().flatten().copied().collect(),
    )
    .expect("checked dims");
    let out = spec.forward(params, x.view())?.output;
    let width = spec.head_kind.width();
    out.rows()
        .into_iter()
        .map(|row| {
            (0..spec.heads)
                .map(|h| {
                    let head = row.slice(ndarray::s![h * width..(h + 1) * width]);
                    Ok(match spec.head_kind {
                        HeadKind::Scalar => HeadOutput::Scalar(head[0]),
                        HeadKind::Categorical { .. } => {
                            let grid = grids[h % grids.len()];
                            HeadOutput::Dist(CategoricalDist::new(grid, head.to_vec())?)
                        }
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::State;

    fn transition(rewards: Vec<f64>, n_tasks: usize, worths: (f64, f64)) -> Transition {
        let n_gammas = rewards.len() / n_tasks;
        Transition {
            s: State {
                t: 0,
                features: vec![1.0],
                worth_snapshot: vec![worths.0; n_tasks],
            },
            rewards,
            n_gammas,
            s_next: State {
                t: 1,
                features: vec![1.0],
                worth_snapshot: vec![worths.1; n_tasks],
            },
            n: 1,
            terminal: false,
        }
    }

    fn spec<'a>(gammas: &'a [f64], grids: &'a [SupportGrid]) -> LossSpec<'a> {
        LossSpec {
            gammas,
            grids,
            reward_kind: RewardKind::LogReturn,
            n_steps: 1,
            aggregation: HeadAggregation::Mean,
        }
    }

    #[test]
    fn cdg_self_consistent_point_mass_has_zero_loss() {
        let grid = SupportGrid::new(-1.0, 1.0, 21).unwrap();
        // point mass at 0 is a fixed point of r = 0 for any gamma
        let mut p = vec![0.0; 21];
        p[10] = 1.0;
        let tr = transition(vec![0.0], 1, (1.0, 1.0));
        let l = cdg_sample_loss(&p, &p, &tr, &spec(&[0.7], &[grid])).unwrap();
        assert!(l.total.abs() < 1e-12);
    }

    #[test]
    fn cdg_uniform_online_against_point_mass() {
        let grid = SupportGrid::new(-1.0, 1.0, 51).unwrap();
        let u = vec![1.0 / 51.0; 51];
        let mut p = vec![0.0; 51];
        p[25] = 1.0;
        let tr = transition(vec![0.0], 1, (1.0, 1.0));
        let l = cdg_sample_loss(&u, &p, &tr, &spec(&[0.9], &[grid])).unwrap();
        assert!((l.total - 51f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cdg_gamma_zero_collapses_to_reward() {
        let grid = SupportGrid::new(0.0, 2.0, 3).unwrap();
        let u = vec![1.0 / 3.0; 3];
        let tr = transition(vec![0.25], 1, (1.0, 1.0));
        // gamma = 0 is outside the training range but well defined for the loss
        let l = cdg_sample_loss(&u, &u, &tr, &spec(&[0.0], &[grid])).unwrap();
        // m = (0.75, 0.25, 0): the atoms bracketing r
        let expected = -(0.75 * (1.0f64 / 3.0).ln() + 0.25 * (1.0f64 / 3.0).ln());
        assert!((l.total - expected).abs() < 1e-12);
        assert_eq!(l.upstream[2], 0.0);
    }

    #[test]
    fn cdg_head_count_mismatch() {
        let grid = SupportGrid::new(-1.0, 1.0, 5).unwrap();
        let tr = transition(vec![0.0, 0.0], 1, (1.0, 1.0));
        let err = cdg_sample_loss(&[0.2; 5], &[0.2; 5], &tr, &spec(&[0.9, 0.5], &[grid, grid]));
        assert!(matches!(err, Err(TrainError::HeadCountMismatch { .. })));
    }

    #[test]
    fn cg_examples() {
        let grids = [];
        let s = spec(&[0.5], &grids);
        let tr = transition(vec![0.5], 1, (1.0, 1.0));
        assert_eq!(cg_sample_loss(&[1.0], &[1.0], &tr, &s).unwrap().total, 0.0);
        let s0 = spec(&[0.0], &grids);
        let tr = transition(vec![1.0], 1, (1.0, 1.0));
        assert_eq!(cg_sample_loss(&[0.0], &[123.0], &tr, &s0).unwrap().total, 1.0);
        assert!(matches!(
            cg_sample_loss(&[0.0, 0.0], &[0.0, 0.0], &tr, &s0),
            Err(TrainError::HeadCountMismatch { .. })
        ));
    }

    #[test]
    fn cg_cash_reparametrization() {
        let grids = [];
        let mut s = spec(&[0.5], &grids);
        s.reward_kind = RewardKind::CashReturn;
        // f(s) w_t - r - gamma f(s') w' = 0.3*2 - 0.1 - 0.5*0.4*2.5 = 0
        let tr = transition(vec![0.1], 1, (2.0, 2.5));
        let l = cg_sample_loss(&[0.3], &[0.4], &tr, &s).unwrap();
        assert!(l.total.abs() < 1e-24);
    }

    #[test]
    fn n_step_bootstrap_uses_gamma_power() {
        let grids = [];
        let mut s = spec(&[0.5], &grids);
        s.n_steps = 3;
        assert_eq!(s.bootstrap_discount(0), 0.125);
        let tr = transition(vec![1.0], 1, (1.0, 1.0));
        // V = r + 0.125 * 8 = 2
        assert!(cg_sample_loss(&[2.0], &[8.0], &tr, &s).unwrap().total.abs() < 1e-24);
    }

    #[test]
    fn loss_invariant_under_head_permutation() {
        let grid = SupportGrid::new(-1.0, 1.0, 7).unwrap();
        let grids = [grid, grid];
        let s = spec(&[0.9, 0.9], &grids);
        let a: Vec<f64> = (0..7).map(|k| (k + 1) as f64 / 28.0).collect();
        let b: Vec<f64> = (0..7).map(|k| (7 - k) as f64 / 28.0).collect();
        let t1: Vec<f64> = a.iter().chain(&b).copied().collect();
        let t2: Vec<f64> = b.iter().chain(&a).copied().collect();
        let online = vec![1.0 / 7.0; 14];
        let l1 = cdg_sample_loss(&online, &t1, &transition(vec![0.1, -0.2], 1, (1.0, 1.0)), &s).unwrap();
        let l2 = cdg_sample_loss(&online, &t2, &transition(vec![-0.2, 0.1], 1, (1.0, 1.0)), &s).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.gammas = vec![1.0];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.gammas = vec![0.9, 0.99];
        assert!(c.validate().is_err(), "grid count must follow gammas");
        let mut c = TrainConfig::default();
        c.n_steps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lr_schedule() {
        let mut c = TrainConfig::default();
        c.lr = 1e-2;
        c.lr_end = 1e-4;
        assert_eq!(c.lr_at(0), 1e-2);
        assert!((c.lr_at(20_000) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at(40_000) - 1e-4).abs() < 1e-18);
    }
}
