//! Run configuration file.
//!
//! TOML with the sections `[data]` (or `[synthetic]`), `[tasks]`, `[gammas]`,
//! `[grid]`, `[net]`, `[replay]`, `[train]` and `[eval]`. Only `[gammas]` is
//! mandatory; every other key has a default.
//!
//! ```toml
//! [gammas]
//! values = [0.9, 0.99]
//!
//! [grid]
//! n_atoms = 51
//! groups = [{ gammas = [0.99], v_min = -2.0, v_max = 2.0 }]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AlignMode, CsvSchema, DataError, FeatureOptions, LagSpec};
use crate::distrib::{CdfConvention, SupportGrid};
use crate::env::{BaseTask, EpisodeBounds, RewardKind};
use crate::eval::SyntheticMarket;
use crate::net::{Activation, InitScheme};
use crate::replay::AnnealSchedule;
use crate::trainer::{HeadAggregation, ModelKind, PriorityMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("missing [{0}] section")]
    MissingSection(&'static str),
    #[error("[{section}]: {message}")]
    Invalid { section: &'static str, message: String },
    #[error("bad override `{0}`: expected --section.key=value")]
    BadOverride(String),
}

fn invalid(section: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        section,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// CSV files, one asset each.
    pub paths: Vec<PathBuf>,
    /// Panel cache written by `ingest`; takes precedence over `paths`.
    pub cache: Option<PathBuf>,
    pub align: AlignMode,
    pub columns: CsvSchema,
    pub bars_per_day: usize,
    /// Bar lags; defaults to the standard bar lags plus the day lags.
    pub lags: Option<Vec<usize>>,
    pub divide_by_lag: bool,
    /// Z-score features with statistics of the training range.
    pub standardize: bool,
    pub test_bars: usize,
    /// Bars discarded between train and test; defaults to the largest lag.
    pub gap_bars: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            paths: Vec::new(),
            cache: None,
            align: AlignMode::ForwardFill,
            columns: CsvSchema::default(),
            bars_per_day: 1440,
            lags: None,
            divide_by_lag: false,
            standardize: false,
            test_bars: 10_000,
            gap_bars: None,
        }
    }
}

impl DataSection {
    pub fn lag_spec(&self) -> Result<LagSpec, DataError> {
        match &self.lags {
            Some(l) => LagSpec::new(l.clone()),
            None => Ok(LagSpec::default_for(self.bars_per_day)),
        }
    }

    pub fn feature_options(&self) -> FeatureOptions {
        FeatureOptions {
            divide_by_lag: self.divide_by_lag,
        }
    }

    pub fn gap(&self, lags: &LagSpec) -> usize {
        self.gap_bars.unwrap_or(lags.max_lag())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksSection {
    pub reward: RewardKind,
    /// Empty means one single-asset task per asset.
    pub list: Vec<BaseTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammasSection {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridGroup {
    pub gammas: Vec<f64>,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n_atoms: usize,
    /// Support of every discount not listed in a group.
    pub v_min: f64,
    pub v_max: f64,
    pub groups: Vec<GridGroup>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            n_atoms: 51,
            v_min: -1.0,
            v_max: 1.0,
            groups: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init: InitScheme,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            activation: Activation::Relu,
            init: InitScheme::FanIn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplaySection {
    pub capacity: usize,
    pub epsilon: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub anneal_steps: u64,
    pub priority: PriorityMode,
}

impl Default for ReplaySection {
    fn default() -> Self {
        let a = AnnealSchedule::default();
        Self {
            capacity: 80_000,
            epsilon: 1e-6,
            alpha_start: a.alpha0,
            alpha_end: a.alpha_end,
            beta_start: a.beta0,
            beta_end: a.beta_end,
            anneal_steps: a.steps,
            priority: PriorityMode::Loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub model: ModelKind,
    pub n_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Defaults to `lr` (no decay).
    pub lr_end: Option<f64>,
    pub lr_decay_steps: u64,
    pub tau: f64,
    pub head_sum: bool,
    pub min_buffer_fill: usize,
    pub learn_steps_per_episode: usize,
    pub epochs: usize,
    pub episode_min: usize,
    pub episode_max: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let ep = EpisodeBounds::default();
        Self {
            model: ModelKind::Cdg,
            n_steps: 1,
            batch_size: 512,
            lr: 1e-5,
            lr_end: None,
            lr_decay_steps: 20_000,
            tau: 0.02,
            head_sum: false,
            min_buffer_fill: 5000,
            learn_steps_per_episode: 50,
            epochs: 400,
            episode_min: ep.min_len,
            episode_max: ep.max_len,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `K` is the smallest integer with `gamma^K <= horizon_tol`.
    pub horizon_tol: f64,
    pub percentiles: Vec<f64>,
    pub convention: CdfConvention,
    pub hist_bins: usize,
    pub hist_limit: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            horizon_tol: 1e-3,
            percentiles: crate::eval::default_percentiles(),
            convention: CdfConvention::Step,
            hist_bins: 40,
            hist_limit: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    data: Option<DataSection>,
    #[serde(default)]
    synthetic: Option<SyntheticMarket>,
    #[serde(default)]
    tasks: TasksSection,
    #[serde(default)]
    gammas: Option<GammasSection>,
    #[serde(default)]
    grid: GridSection,
    #[serde(default)]
    net: NetSection,
    #[serde(default)]
    replay: ReplaySection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    eval: EvalSection,
}

/// A fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticMarket>,
    pub tasks: TasksSection,
    pub gammas: GammasSection,
    pub grid: GridSection,
    pub net: NetSection,
    pub replay: ReplaySection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::parse(&text, overrides)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Parses TOML text and applies `section.key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        let raw = if overrides.is_empty() {
            raw
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
            for ov in overrides {
                apply_override(&mut table, ov)?;
            }
            let merged = toml::to_string(&table).map_err(|e| ConfigError::BadOverride(e.to_string()))?;
            toml::from_str(&merged).map_err(|e| {
                let ConfigError::Parse { message, .. } = parse_error(&merged, &e) else {
                    unreachable!()
                };
                ConfigError::BadOverride(message)
            })?
        };
        let gammas = raw.gammas.ok_or(ConfigError::MissingSection("gammas"))?;
        let cfg = Self {
            data: raw.data.unwrap_or_default(),
            synthetic: raw.synthetic,
            tasks: raw.tasks,
            gammas,
            grid: raw.grid,
            net: raw.net,
            replay: raw.replay,
            train: raw.train,
            eval: raw.eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in self.data.paths.iter_mut().chain(self.data.cache.as_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.gammas.values;
        if g.is_empty() {
            return Err(invalid("gammas", "values must not be empty"));
        }
        if let Some(x) = g.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
            return Err(invalid("gammas", format!("{x} is not in (0, 1)")));
        }
        for (i, a) in g.iter().enumerate() {
            if g[..i].contains(a) {
                return Err(invalid("gammas", format!("{a} listed twice")));
            }
        }
        for grp in &self.grid.groups {
            if let Some(x) = grp.gammas.iter().find(|x| !g.contains(x)) {
                return Err(invalid("grid", format!("group discount {x} is not in [gammas]")));
            }
        }
        self.grids()?;
        if let Some(m) = &self.synthetic {
            m.validate().map_err(|e| invalid("synthetic", e.to_string()))?;
            if !self.data.paths.is_empty() || self.data.cache.is_some() {
                return Err(invalid("synthetic", "cannot be combined with data paths"));
            }
        }
        self.data.lag_spec().map_err(|e| invalid("data", e.to_string()))?;
        for t in &self.tasks.list {
            t.validate(None).map_err(|e| invalid("tasks", e.to_string()))?;
        }
        let r = &self.replay;
        for (name, x) in [
            ("alpha_start", r.alpha_start),
            ("alpha_end", r.alpha_end),
            ("beta_start", r.beta_start),
            ("beta_end", r.beta_end),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(invalid("replay", format!("{name} = {x} is not in [0, 1]")));
            }
        }
        if !(r.epsilon > 0.0) {
            return Err(invalid("replay", "epsilon must be positive"));
        }
        if !(self.eval.horizon_tol > 0.0 && self.eval.horizon_tol < 1.0) {
            return Err(invalid("eval", "horizon_tol must be in (0, 1)"));
        }
        if self.net.hidden.contains(&0) {
            return Err(invalid("net", "hidden widths must be positive"));
        }
        // remaining numeric checks live in TrainConfig::validate
        self.train_config().map(|_| ())
    }

    /// One support per discount, in `[gammas]` order.
    pub fn grids(&self) -> Result<Vec<SupportGrid>, ConfigError> {
        self.gammas
            .values
            .iter()
            .map(|g| {
                let (lo, hi) = self
                    .grid
                    .groups
                    .iter()
                    .find(|grp| grp.gammas.contains(g))
                    .map(|grp| (grp.v_min, grp.v_max))
                    .unwrap_or((self.grid.v_min, self.grid.v_max));
                SupportGrid::new(lo, hi, self.grid.n_atoms).map_err(|e| invalid("grid", e.to_string()))
            })
            .collect()
    }

    pub fn anneal(&self) -> AnnealSchedule {
        AnnealSchedule {
            alpha0: self.replay.alpha_start,
            beta0: self.replay.beta_start,
            alpha_end: self.replay.alpha_end,
            beta_end: self.replay.beta_end,
            steps: self.replay.anneal_steps,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let t = &self.train;
        let cfg = TrainConfig {
            model: t.model,
            gammas: self.gammas.values.clone(),
            grids: self.grids()?,
            n_atoms: self.grid.n_atoms,
            n_steps: t.n_steps,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_end: t.lr_end.unwrap_or(t.lr),
            lr_decay_steps: t.lr_decay_steps,
            tau: t.tau,
            reward_kind: self.tasks.reward,
            hidden: self.net.hidden.clone(),
            activation: self.net.activation,
            init: self.net.init,
            buffer_capacity: self.replay.capacity,
            prio_epsilon: self.replay.epsilon,
            anneal: self.anneal(),
            priority: self.replay.priority,
            head_aggregation: if t.head_sum {
                HeadAggregation::Sum
            } else {
                HeadAggregation::Mean
            },
            min_buffer_fill: t.min_buffer_fill,
            learn_steps_per_episode: t.learn_steps_per_episode,
            epochs: t.epochs,
            episode: EpisodeBounds {
                min_len: t.episode_min,
                max_len: t.episode_max,
            },
            seed: t.seed,
        };
        cfg.validate().map_err(|e| invalid("train", e.to_string()))?;
        Ok(cfg)
    }

    /// Resolved configuration as TOML, every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }
}

fn parse_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    ConfigError::Parse {
        line,
        column,
        message: e.message().trim().to_string(),
    }
}

/// Sets `section.key=value` in a parsed table. Values are read as TOML, falling back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let spec = spec.trim_start_matches("--");
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("at least two keys");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{path}: `{k}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
