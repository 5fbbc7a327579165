//! Turns the `[data]` or `[synthetic]` section into a trainable market.

use std::ops::Range;
use std::path::PathBuf;

use cdg_core::config::RunConfig;
use cdg_core::data::{self, AlignedPanel, FeatureMatrix, LagSpec};
use cdg_core::env::BaseTask;
use cdg_core::eval::{self, MarketKind, SyntheticMarket};
use cdg_core::rng::{self, Stream};
use cdg_core::trainer::{PanelSource, SyntheticSource, TransitionSource};

use crate::error::CliError;
use crate::manifest::file_digest;

pub struct PanelMarket {
    pub panel: AlignedPanel,
    pub features: FeatureMatrix,
    pub lags: LagSpec,
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub inputs: Vec<PathBuf>,
}

pub enum Market {
    Panel(PanelMarket),
    Synthetic(SyntheticMarket),
}

pub fn load_panel(cfg: &RunConfig) -> Result<(AlignedPanel, Vec<PathBuf>), CliError> {
    let d = &cfg.data;
    if let Some(cache) = &d.cache {
        return Ok((data::read_panel_cache(cache)?, vec![cache.clone()]));
    }
    if d.paths.is_empty() {
        return Err(CliError::Usage(
            "no market: set [data] paths or cache, or a [synthetic] section".into(),
        ));
    }
    let series = d
        .paths
        .iter()
        .map(|p| data::load_csv(p, &d.columns))
        .collect::<Result<Vec<_>, _>>()?;
    let (panel, stats) = data::align_with_stats(&series, d.align)?;
    log::info!(
        "aligned {} assets on {} bars (dropped {:?}, filled {:?})",
        panel.n_assets(),
        stats.grid_len,
        stats.rows_dropped,
        stats.filled
    );
    Ok((panel, d.paths.clone()))
}

impl Market {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        if let Some(m) = &cfg.synthetic {
            return Ok(Market::Synthetic(m.clone()));
        }
        let (panel, inputs) = load_panel(cfg)?;
        let lags = cfg.data.lag_spec()?;
        let (train, test) = data::split(panel.len(), cfg.data.test_bars, cfg.data.gap(&lags), lags.max_lag())?;
        let mut features = FeatureMatrix::build(&panel, &lags, cfg.data.feature_options())?;
        if cfg.data.standardize {
            features.standardize(train.clone());
        }
        Ok(Market::Panel(PanelMarket {
            panel,
            features,
            lags,
            train,
            test,
            inputs,
        }))
    }

    pub fn assets(&self) -> Vec<String> {
        match self {
            Market::Panel(p) => p.panel.assets.clone(),
            Market::Synthetic(_) => vec!["synthetic".into()],
        }
    }

    /// Configured tasks, or one single-asset task per asset.
    pub fn tasks(&self, cfg: &RunConfig) -> Result<Vec<BaseTask>, CliError> {
        let assets = self.assets();
        if let Market::Synthetic(_) = self {
            let single = cfg.tasks.list.is_empty()
                || matches!(cfg.tasks.list.as_slice(), [t] if matches!(t.kind, cdg_core::TaskKind::SingleAsset { asset: 0 }));
            if !single {
                return Err(CliError::Usage("synthetic markets support one single-asset task".into()));
            }
            return Ok(vec![BaseTask::single("synthetic", 0)]);
        }
        let tasks = if cfg.tasks.list.is_empty() {
            assets.iter().enumerate().map(|(i, a)| BaseTask::single(a.clone(), i)).collect()
        } else {
            cfg.tasks.list.clone()
        };
        for t in &tasks {
            t.validate(Some(assets.len()))?;
        }
        Ok(tasks)
    }

    pub fn lags(&self) -> Option<LagSpec> {
        match self {
            Market::Panel(p) => Some(p.lags.clone()),
            Market::Synthetic(_) => None,
        }
    }

    pub fn input_digests(&self) -> Result<Vec<(String, String)>, CliError> {
        match self {
            Market::Panel(p) => p
                .inputs
                .iter()
                .map(|f| Ok((f.display().to_string(), file_digest(f)?)))
                .collect(),
            Market::Synthetic(_) => Ok(Vec::new()),
        }
    }

    pub fn source(self, cfg: &RunConfig, tasks: Vec<BaseTask>) -> Result<Box<dyn TransitionSource>, CliError> {
        let tc = cfg.train_config()?;
        Ok(match self {
            Market::Panel(p) => Box::new(PanelSource {
                panel: p.panel,
                features: p.features,
                tasks,
                reward_kind: tc.reward_kind,
                gammas: tc.gammas,
                n_steps: tc.n_steps,
                range: p.train,
                bounds: tc.episode,
            }),
            Market::Synthetic(m) => Box::new(SyntheticSource {
                market: m,
                reward_kind: tc.reward_kind,
                gammas: tc.gammas,
                n_steps: tc.n_steps,
                bounds: tc.episode,
            }),
        })
    }
}

/// Prices and per-bar features over the evaluation window.
pub struct EvalData {
    pub panel: AlignedPanel,
    pub features: Vec<Vec<f64>>,
    /// Index of `features[0]` in the panel.
    pub offset: usize,
    pub range: Range<usize>,
}

impl EvalData {
    pub fn features(&self, t: usize) -> &[f64] {
        &self.features[t - self.offset]
    }

    pub fn from_market(market: Market, cfg: &RunConfig) -> Result<Self, CliError> {
        match market {
            Market::Panel(p) => {
                let features = p.test.clone().map(|t| p.features.row(t).to_vec()).collect();
                Ok(Self {
                    offset: p.test.start,
                    range: p.test,
                    panel: p.panel,
                    features,
                })
            }
            Market::Synthetic(m) => {
                let len = cfg.data.test_bars;
                let series = eval::synth_generate(&m, len, &mut rng::substream(m.seed, Stream::Synth))?;
                let one_hot = matches!(m.kind, MarketKind::TwoStateMrp { .. });
                let features = series
                    .states
                    .iter()
                    .map(|&s| {
                        if one_hot {
                            let mut f = vec![0.0; m.n_states()];
                            f[s] = 1.0;
                            f
                        } else {
                            vec![1.0]
                        }
                    })
                    .collect();
                Ok(Self {
                    panel: AlignedPanel::from_prices("synthetic", &series.prices)?,
                    features,
                    offset: 0,
                    range: 0..len + 1,
                })
            }
        }
    }
}
