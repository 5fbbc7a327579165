//! Fixed-support categorical distributions.
//!
//! A [`SupportGrid`] holds `n_atoms` equally spaced atoms on `[v_min, v_max]`.
//! The distributional Bellman target of a categorical distribution is computed
//! by moving every atom through `r + gamma z`, clipped to the support. Each
//! atom's probability is then split linearly between its two neighbours.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp applied to predicted probabilities inside [`cross_entropy`].
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistribError {
    #[error("bad support bounds: v_min={v_min}, v_max={v_max}, n_atoms={n_atoms}")]
    BadBounds { v_min: f64, v_max: f64, n_atoms: usize },
    #[error("worth must be positive, got w_t={w_t}, w_next={w_next}")]
    NonPositiveWorth { w_t: f64, w_next: f64 },
    #[error("probability vector of length {got} does not match {expected} atoms")]
    LengthMismatch { expected: usize, got: usize },
    #[error("not a probability vector (sum={sum}, min={min})")]
    NotNormalized { sum: f64, min: f64 },
}

/// Equally spaced atoms `z_i = v_min + i * dz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportGrid {
    v_min: f64,
    v_max: f64,
    n_atoms: usize,
    dz: f64,
}

impl SupportGrid {
    pub fn new(v_min: f64, v_max: f64, n_atoms: usize) -> Result<Self, DistribError> {
        if !(v_min.is_finite() && v_max.is_finite() && v_min < v_max && n_atoms >= 2) {
            return Err(DistribError::BadBounds { v_min, v_max, n_atoms });
        }
        Ok(Self {
            v_min,
            v_max,
            n_atoms,
            dz: (v_max - v_min) / (n_atoms - 1) as f64,
        })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    /// Distance between neighbouring atoms.
    pub fn dz(&self) -> f64 {
        self.dz
    }

    /// Location of atom `i`. The last atom is pinned to `v_max` exactly.
    #[inline]
    pub fn atom(&self, i: usize) -> f64 {
        if i + 1 == self.n_atoms {
            self.v_max
        } else {
            self.v_min + i as f64 * self.dz
        }
    }

    pub fn atoms(&self) -> Vec<f64> {
        (0..self.n_atoms).map(|i| self.atom(i)).collect()
    }

    /// Projects `p` (defined on this grid) through the affine map
    /// `z -> shift + scale * z` and back onto the grid.
    ///
    /// Atoms landing exactly on a grid point (`l == u`) keep their full mass.
    pub fn project_affine(&self, p: &[f64], shift: f64, scale: f64) -> Vec<f64> {
        debug_assert_eq!(p.len(), self.n_atoms);
        let mut m = vec![0.0; self.n_atoms];
        let top = (self.n_atoms - 1) as f64;
        for (j, &pj) in p.iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            let tz = (shift + scale * self.atom(j)).clamp(self.v_min, self.v_max);
            let b = ((tz - self.v_min) / self.dz).clamp(0.0, top);
            let l = b.floor();
            let u = b.ceil();
            let (li, ui) = (l as usize, u as usize);
            if li == ui {
                m[li] += pj;
            } else {
                m[li] += pj * (u - b);
                m[ui] += pj * (b - l);
            }
        }
        m
    }

    /// Standard distributional Bellman projection of `p` for reward `r` and discount `gamma`.
    pub fn project(&self, p: &[f64], r: f64, gamma: f64) -> Vec<f64> {
        self.project_affine(p, r, gamma)
    }

    /// Worth re-parametrized projection used with cash rewards:
    /// `Tz_j = r / w_t + gamma * (w_next / w_t) * z_j`.
    pub fn project_worth(
        &self,
        p: &[f64],
        r: f64,
        w_t: f64,
        w_next: f64,
        gamma: f64,
    ) -> Result<Vec<f64>, DistribError> {
        if !(w_t > 0.0 && w_next > 0.0) {
            return Err(DistribError::NonPositiveWorth { w_t, w_next });
        }
        Ok(self.project_affine(p, r / w_t, gamma * (w_next / w_t)))
    }

    /// Discretizes a continuous distribution given by its `cdf`: each atom gets
    /// the mass between the midpoints to its neighbours, tails go to the end atoms.
    pub fn discretize_with<F: Fn(f64) -> f64>(&self, cdf: F) -> Vec<f64> {
        let n = self.n_atoms;
        let mut edges = Vec::with_capacity(n + 1);
        edges.push(0.0);
        for i in 0..n - 1 {
            edges.push(cdf(self.atom(i) + 0.5 * self.dz));
        }
        edges.push(1.0);
        edges.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect()
    }
}

/// How [`CategoricalDist::cdf`] treats the mass of an atom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfConvention {
    /// Right-continuous step function; each atom is a point mass.
    #[default]
    Step,
    /// Step CDF evaluated at the atoms, linearly interpolated in between.
    Interpolated,
}

/// A probability vector over a [`SupportGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    grid: SupportGrid,
    p: Vec<f64>,
}

impl CategoricalDist {
    /// Tolerance on the total mass of a valid distribution.
    pub const SUM_TOL: f64 = 1e-6;

    pub fn new(grid: SupportGrid, p: Vec<f64>) -> Result<Self, DistribError> {
        if p.len() != grid.n_atoms() {
            return Err(DistribError::LengthMismatch {
                expected: grid.n_atoms(),
                got: p.len(),
            });
        }
        let sum: f64 = p.iter().sum();
        let min = p.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min >= 0.0) || (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(DistribError::NotNormalized { sum, min });
        }
        Ok(Self { grid, p })
    }

    pub fn uniform(grid: SupportGrid) -> Self {
        let n = grid.n_atoms();
        Self {
            grid,
            p: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(grid: SupportGrid, k: usize) -> Self {
        let mut p = vec![0.0; grid.n_atoms()];
        p[k] = 1.0;
        Self { grid, p }
    }

    pub fn grid(&self) -> &SupportGrid {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.p
    }

    /// Member vector of the Bellman target `r + gamma * Z`.
    pub fn project(&self, r: f64, gamma: f64) -> Vec<f64> {
        self.grid.project(&self.p, r, gamma)
    }

    pub fn project_worth(
        &self,
        r: f64,
        w_t: f64,
        w_next: f64,
        gamma: f64,
    ) -> Result<Vec<f64>, DistribError> {
        self.grid.project_worth(&self.p, r, w_t, w_next, gamma)
    }

    pub fn mean(&self) -> f64 {
        mean(&self.grid, &self.p)
    }

    pub fn variance(&self) -> f64 {
        variance(&self.grid, &self.p)
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    /// `P(Z <= x)`; 0 below the support and 1 at or above `v_max`.
    pub fn cdf(&self, x: f64, convention: CdfConvention) -> f64 {
        let g = &self.grid;
        if x < g.v_min() {
            return 0.0;
        }
        if x >= g.v_max() {
            return 1.0;
        }
        match convention {
            CdfConvention::Step => self
                .p
                .iter()
                .enumerate()
                .take_while(|(i, _)| g.atom(*i) <= x)
                .map(|(_, p)| p)
                .sum::<f64>()
                .min(1.0),
            CdfConvention::Interpolated => {
                let b = (x - g.v_min()) / g.dz();
                let k = (b.floor() as usize).min(g.n_atoms() - 2);
                let frac = (x - g.atom(k)) / g.dz();
                let below: f64 = self.p[..=k].iter().sum();
                (below + frac * self.p[k + 1]).clamp(0.0, 1.0)
            }
        }
    }
}

/// Expectation `sum_i p_i z_i`.
pub fn mean(grid: &SupportGrid, p: &[f64]) -> f64 {
    p.iter().enumerate().map(|(i, pi)| pi * grid.atom(i)).sum()
}

/// Second central moment over the atoms.
pub fn variance(grid: &SupportGrid, p: &[f64]) -> f64 {
    let mu = mean(grid, p);
    p.iter()
        .enumerate()
        .map(|(i, pi)| {
            let d = grid.atom(i) - mu;
            pi * d * d
        })
        .sum()
}

/// `-sum_i m_i ln max(p_i, LOG_EPS)`.
pub fn cross_entropy(m: &[f64], p: &[f64]) -> f64 {
    debug_assert_eq!(m.len(), p.len());
    -m.iter()
        .zip(p)
        .filter(|(mi, _)| **mi != 0.0)
        .map(|(mi, pi)| mi * pi.max(LOG_EPS).ln())
        .sum::<f64>()
}
