#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Categorical distributional (CDG) and expected-value (CG) function learning
//! over a fixed set of trading strategies and several discount factors at once.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: price ingestion, multi-asset alignment, lagged return features and
//!   leak-free train/test splits.
//! - [`env`]: base tasks (fixed strategies), worth dynamics with transaction costs,
//!   rewards and n-step transition generation.
//! - [`distrib`]: fixed-support categorical distributions and the Bellman projection.
//! - [`net`]: a small multi-head MLP with reverse-mode gradients and Adam.
//! - [`replay`]: proportional prioritized replay on a sum tree.
//! - [`trainer`]: the interaction / learning loop for CDG and CG models.
//! - [`eval`]: realized returns and calibration, plus synthetic oracle markets.
//! - [`checkpoint`]: bit-exact binary checkpoints.
//! - [`config`]: the run configuration file.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distrib;
pub mod env;
pub mod eval;
pub mod net;
pub mod replay;
pub mod rng;
pub mod trainer;

pub use data::{AlignMode, AlignedPanel, LagSpec, PriceSeries, State};
pub use distrib::{CategoricalDist, CdfConvention, SupportGrid};
pub use env::{BaseTask, RewardKind, TaskKind, TaskState, Transition};
pub use net::{Activation, HeadKind, NetSpec, Params, TargetNet};
pub use replay::{PrioBuffer, SampledBatch};
pub use trainer::{LossReport, TrainConfig, Trainer};
