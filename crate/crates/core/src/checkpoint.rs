//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    b"CDGCKPT\0"
//! version  u32
//! meta     u64 length + JSON (CheckpointMeta)
//! params   u64 count + f64 * count
//! target   u64 count + f64 * count
//! adam     beta1, beta2, eps (f64), t (u64), m and v (u64 count + f64s each)
//! rng      env, buffer: seed [u8; 32], stream u64, word_pos u128
//! step     u64
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LagSpec;
use crate::env::BaseTask;
use crate::net::{Adam, NetSpec, Params, TargetNet};
use crate::rng::RngState;
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"CDGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    UnsupportedVersion(u32),
    #[error("malformed metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("checkpoint is inconsistent: {0}")]
    Corrupt(String),
}

/// Everything needed to rebuild the feature pipeline and network around the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: NetSpec,
    pub config: TrainConfig,
    pub tasks: Vec<BaseTask>,
    /// Present for panel-trained models.
    pub lags: Option<LagSpec>,
    pub assets: Vec<String>,
    /// Set for models trained on a synthetic market.
    pub synthetic: Option<crate::eval::SyntheticMarket>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Params,
    pub target: Params,
    pub adam: Adam,
    pub env_rng: RngState,
    pub buffer_rng: RngState,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, meta: CheckpointMeta) -> Self {
        Self {
            meta,
            params: trainer.params.clone(),
            target: trainer.target.params.clone(),
            adam: trainer.adam.clone(),
            env_rng: RngState::capture(&trainer.env_rng),
            buffer_rng: RngState::capture(&trainer.buffer_rng),
            step: trainer.step,
        }
    }

    /// Rebuilds a trainer in the saved state. The replay buffer starts empty.
    ///
    /// The replay buffer is not stored and starts empty.
    pub fn into_trainer(self) -> Result<Trainer, crate::trainer::TrainError> {
        let n_tasks = self.meta.tasks.len().max(1);
        let mut t = Trainer::new(self.meta.config.clone(), self.meta.spec.input_dim, n_tasks)?;
        if t.spec != self.meta.spec {
            return Err(crate::trainer::TrainError::Config(
                "network spec does not match the stored config".into(),
            ));
        }
        t.params = self.params;
        t.target = TargetNet {
            params: self.target,
            tau: self.meta.config.tau,
        };
        t.adam = self.adam;
        t.env_rng = self.env_rng.restore();
        t.buffer_rng = self.buffer_rng.restore();
        t.step = self.step;
        Ok(t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        put_u64(w, meta.len() as u64)?;
        w.write_all(&meta)?;
        put_f64s(w, &self.params.0)?;
        put_f64s(w, &self.target.0)?;
        for x in [self.adam.beta1, self.adam.beta2, self.adam.eps] {
            w.write_all(&x.to_le_bytes())?;
        }
        put_u64(w, self.adam.t)?;
        put_f64s(w, &self.adam.m)?;
        put_f64s(w, &self.adam.v)?;
        for s in [&self.env_rng, &self.buffer_rng] {
            w.write_all(&s.seed)?;
            put_u64(w, s.stream)?;
            w.write_all(&s.word_pos.to_le_bytes())?;
        }
        put_u64(w, self.step)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = get_u64(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let params = Params(get_f64s(r)?);
        let target = Params(get_f64s(r)?);
        let beta1 = get_f64(r)?;
        let beta2 = get_f64(r)?;
        let eps = get_f64(r)?;
        let t = get_u64(r)?;
        let m = get_f64s(r)?;
        let v = get_f64s(r)?;
        let env_rng = get_rng(r)?;
        let buffer_rng = get_rng(r)?;
        let step = get_u64(r)?;

        let n = meta.spec.n_params();
        if [params.len(), target.len(), m.len(), v.len()].iter().any(|&l| l != n) {
            return Err(CheckpointError::Corrupt(format!(
                "expected {n} parameters per vector"
            )));
        }
        Ok(Self {
            meta,
            params,
            target,
            adam: Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            },
            env_rng,
            buffer_rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn put_u64<W: Write>(w: &mut W, x: u64) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    put_u64(w, xs.len() as u64)?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    get_u64(r).map(f64::from_bits)
}

fn get_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>, CheckpointError> {
    let n = get_u64(r)? as usize;
    if n > (1 << 32) {
        return Err(CheckpointError::Corrupt(format!("vector length {n}")));
    }
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn get_rng<R: Read>(r: &mut R) -> io::Result<RngState> {
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let stream = get_u64(r)?;
    let mut wp = [0u8; 16];
    r.read_exact(&mut wp)?;
    Ok(RngState {
        seed,
        stream,
        word_pos: u128::from_le_bytes(wp),
    })
}
