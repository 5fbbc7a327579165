//! Realized returns and calibration statistics, plus synthetic oracle markets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distrib::{CategoricalDist, CdfConvention};
use crate::env::RewardKind;

/// Estimates with a standard deviation below this are treated as point masses.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("window of {len} rewards is shorter than the horizon {horizon}")]
    WindowTooShort { len: usize, horizon: usize },
    #[error("degenerate sigma {0}")]
    DegenerateSigma(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("bad synthetic market parameters: {0}")]
    BadParams(String),
}

/// Smallest `K` with `gamma^K <= tol`.
pub fn truncation_horizon(gamma: f64, tol: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    if gamma >= 1.0 {
        return usize::MAX;
    }
    let k = (tol.ln() / gamma.ln()).ceil() as usize;
    // guard the boundary against rounding in the logs
    let mut k = k.max(1);
    while k > 1 && gamma.powi((k - 1) as i32) <= tol {
        k -= 1;
    }
    while gamma.powi(k as i32) > tol {
        k += 1;
    }
    k
}

/// Realized discounted returns.
///
/// `rewards[k]` is the reward received over bar `k -> k+1`. Returns `G_t` for
/// every `t` with a full `horizon`-step lookahead, i.e. `t in 0..=len-horizon`,
/// computed by the backward recursion `G_t = r_{t+1} + gamma G_{t+1}` seeded with 0
/// at the window end.
pub fn realized_g(rewards: &[f64], gamma: f64, horizon: usize) -> Result<Vec<f64>, EvalError> {
    let len = rewards.len();
    if len < horizon || horizon == 0 {
        return Err(EvalError::WindowTooShort { len, horizon });
    }
    let mut g = vec![0.0; len + 1];
    for t in (0..len).rev() {
        g[t] = rewards[t] + gamma * g[t + 1];
    }
    g.truncate(len - horizon + 1);
    Ok(g)
}

/// Price-level indicator built from a return estimate.
pub fn indicator(price: f64, estimate: f64, kind: RewardKind) -> f64 {
    match kind {
        RewardKind::LogReturn => price * estimate.exp(),
        RewardKind::CashReturn => price * (1.0 + estimate),
    }
}

/// `(G_hat - G_tilde) / sigma`.
pub fn z_statistic(g_hat: f64, g_tilde: f64, sigma: f64) -> Result<f64, EvalError> {
    if !(sigma > SIGMA_FLOOR) {
        return Err(EvalError::DegenerateSigma(sigma));
    }
    Ok((g_hat - g_tilde) / sigma)
}

/// Percentiles 5%, 10%, ..., 100%.
pub fn default_percentiles() -> Vec<f64> {
    (1..=20).map(|k| k as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub percentiles: Vec<f64>,
    /// Fraction of steps whose realization sits at or below the percentile.
    pub counts: Vec<f64>,
    pub n: usize,
    pub convention: CdfConvention,
}

/// For every `q`: fraction of `t` with `F_t(G_tilde_t) <= q`.
pub fn percentile_counts(
    dists: &[CategoricalDist],
    realized: &[f64],
    percentiles: &[f64],
    convention: CdfConvention,
) -> Result<CalibrationReport, EvalError> {
    if dists.len() != realized.len() {
        return Err(EvalError::LengthMismatch(dists.len(), realized.len()));
    }
    let levels: Vec<f64> = dists
        .iter()
        .zip(realized)
        .map(|(d, g)| d.cdf(*g, convention))
        .collect();
    let n = levels.len();
    let counts = percentiles
        .iter()
        .map(|q| {
            if n == 0 {
                0.0
            } else {
                levels.iter().filter(|l| **l <= *q).count() as f64 / n as f64
            }
        })
        .collect();
    Ok(CalibrationReport {
        percentiles: percentiles.to_vec(),
        counts,
        n,
        convention,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub gamma: f64,
    pub mean: f64,
    pub std: f64,
}

/// Mean and std of the estimated distribution for each discount, ordered by gamma.
pub fn gamma_curve(gammas: &[f64], dists: &[CategoricalDist]) -> Result<Vec<GammaPoint>, EvalError> {
    if gammas.len() != dists.len() {
        return Err(EvalError::LengthMismatch(gammas.len(), dists.len()));
    }
    let mut curve: Vec<GammaPoint> = gammas
        .iter()
        .zip(dists)
        .map(|(g, d)| GammaPoint {
            gamma: *g,
            mean: d.mean(),
            std: d.std(),
        })
        .collect();
    curve.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
    Ok(curve)
}

/// `(G_{t,i} - G_{t,j}) - (gamma_i G_{t+1,i} - gamma_j G_{t+1,j})` for consecutive `t`.
///
/// Both series must come from the same window; the reward `r_{t+1}` cancels, so
/// the residual vanishes on realized returns and measures inconsistency of model estimates.
pub fn gamma_consistency_residual(
    g_i: &[f64],
    g_j: &[f64],
    gamma_i: f64,
    gamma_j: f64,
) -> Result<Vec<f64>, EvalError> {
    if g_i.len() != g_j.len() {
        return Err(EvalError::LengthMismatch(g_i.len(), g_j.len()));
    }
    Ok((0..g_i.len().saturating_sub(1))
        .map(|t| (g_i[t] - g_j[t]) - (gamma_i * g_i[t + 1] - gamma_j * g_j[t + 1]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Expected count under a standard normal reference.
    pub normal_ref: f64,
}

/// Histogram of z statistics on `[-limit, limit]`; values outside land in the end bins.
pub fn z_histogram(z: &[f64], bins: usize, limit: f64) -> Vec<HistBin> {
    let width = 2.0 * limit / bins as f64;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|k| {
            let lo = -limit + k as f64 * width;
            let hi = lo + width;
            let mass = if k == 0 {
                std_normal_cdf(hi)
            } else if k + 1 == bins {
                1.0 - std_normal_cdf(lo)
            } else {
                std_normal_cdf(hi) - std_normal_cdf(lo)
            };
            HistBin {
                lo,
                hi,
                count: 0,
                normal_ref: mass * z.len() as f64,
            }
        })
        .collect();
    for v in z.iter().filter(|v| v.is_finite()) {
        let k = (((v + limit) / width).floor().max(0.0) as usize).min(bins - 1);
        out[k].count += 1;
    }
    out
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarketKind {
    /// I.i.d. normal log rewards.
    IidGauss { mu: f64, sigma: f64 },
    /// Markov reward process: reward `rewards[s]` on leaving state `s`, next state by `transition[s]`.
    TwoStateMrp {
        transition: Vec<Vec<f64>>,
        rewards: Vec<f64>,
    },
    Constant { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarket {
    #[serde(flatten)]
    pub kind: MarketKind,
    #[serde(default)]
    pub seed: u64,
}

/// A generated reward path with its single-asset prices.
///
/// `states` is all zeros except for MRP markets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSeries {
    pub rewards: Vec<f64>,
    pub prices: Vec<f64>,
    pub states: Vec<usize>,
}

/// Analytic description of `G` for one discount.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticReturn {
    pub gamma: f64,
    /// Infinite-horizon mean (per state for MRPs).
    pub mean: Vec<f64>,
    /// Infinite-horizon std when the distribution is known in closed form.
    pub std: Option<f64>,
    /// Mean truncated at `horizon` steps, when a horizon was requested.
    pub truncated_mean: Option<Vec<f64>>,
    pub horizon: Option<usize>,
}

impl SyntheticMarket {
    pub fn validate(&self) -> Result<(), EvalError> {
        match &self.kind {
            MarketKind::IidGauss { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite() && *sigma >= 0.0) {
                    return Err(EvalError::BadParams(format!("mu={mu}, sigma={sigma}")));
                }
            }
            MarketKind::Constant { c } => {
                if !c.is_finite() {
                    return Err(EvalError::BadParams(format!("c={c}")));
                }
            }
            MarketKind::TwoStateMrp { transition, rewards } => {
                let n = rewards.len();
                if n == 0 || transition.len() != n {
                    return Err(EvalError::BadParams("transition matrix must be square and match rewards".into()));
                }
                for row in transition {
                    let s: f64 = row.iter().sum();
                    if row.len() != n || row.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                        return Err(EvalError::BadParams(format!("row {row:?} is not stochastic")));
                    }
                }
                if rewards.iter().any(|r| !r.is_finite()) {
                    return Err(EvalError::BadParams("non-finite reward".into()));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        match &self.kind {
            MarketKind::TwoStateMrp { rewards, .. } => rewards.len(),
            _ => 1,
        }
    }

    /// Closed-form return description for `gamma`, optionally truncated at `horizon`.
    pub fn analytic(&self, gamma: f64, horizon: Option<usize>) -> AnalyticReturn {
        let geom = |k: Option<usize>| match k {
            Some(k) => (1.0 - gamma.powi(k as i32)) / (1.0 - gamma),
            None => 1.0 / (1.0 - gamma),
        };
        let (mean, std, truncated) = match &self.kind {
            MarketKind::IidGauss { mu, sigma } => (
                vec![mu * geom(None)],
                Some(sigma / (1.0 - gamma * gamma).sqrt()),
                horizon.map(|k| vec![mu * geom(Some(k))]),
            ),
            MarketKind::Constant { c } => (
                vec![c * geom(None)],
                Some(0.0),
                horizon.map(|k| vec![c * geom(Some(k))]),
            ),
            MarketKind::TwoStateMrp { transition, rewards } => {
                let v = mrp_values(transition, rewards, gamma);
                let truncated = horizon.map(|k| {
                    // V_K = sum_{i<K} (gamma P)^i R
                    let n = rewards.len();
                    let p = DMatrix::from_fn(n, n, |i, j| transition[i][j]);
                    let mut acc = DVector::zeros(n);
                    let mut term = DVector::from_column_slice(rewards);
                    for _ in 0..k {
                        acc += &term;
                        term = (&p * term) * gamma;
                    }
                    acc.iter().copied().collect()
                });
                (v, None, truncated)
            }
        };
        AnalyticReturn {
            gamma,
            mean,
            std,
            truncated_mean: truncated,
            horizon,
        }
    }
}

/// `V = (I - gamma P)^{-1} R`.
pub fn mrp_values(transition: &[Vec<f64>], rewards: &[f64], gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - gamma * transition[i][j]);
    let b = DVector::from_column_slice(rewards);
    a.lu()
        .solve(&b)
        .map(|v| v.iter().copied().collect())
        .unwrap_or_else(|| vec![f64::NAN; n])
}

/// Generates `length` rewards with prices `z_0 = 1, z_{t+1} = z_t e^{r_{t+1}}`.
pub fn synth_generate<R: Rng + ?Sized>(
    market: &SyntheticMarket,
    length: usize,
    rng: &mut R,
) -> Result<SynthSeries, EvalError> {
    market.validate()?;
    let mut rewards = Vec::with_capacity(length);
    let mut states = vec![0usize; length + 1];
    match &market.kind {
        MarketKind::IidGauss { mu, sigma } => {
            let normal = Normal::new(*mu, *sigma).map_err(|e| EvalError::BadParams(e.to_string()))?;
            rewards.extend((0..length).map(|_| normal.sample(rng)));
        }
        MarketKind::Constant { c } => rewards.resize(length, *c),
        MarketKind::TwoStateMrp { transition, rewards: rbar } => {
            states[0] = rng.random_range(0..rbar.len());
            for t in 0..length {
                let s = states[t];
                rewards.push(rbar[s]);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut next = rbar.len() - 1;
                for (k, p) in transition[s].iter().enumerate() {
                    acc += p;
                    if u < acc {
                        next = k;
                        break;
                    }
                }
                states[t + 1] = next;
            }
        }
    }
    let mut prices = Vec::with_capacity(length + 1);
    prices.push(1.0);
    for r in &rewards {
        let last = *prices.last().expect("non-empty");
        prices.push(last * r.exp());
    }
    Ok(SynthSeries { rewards, prices, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distrib::SupportGrid;
    use crate::rng::{substream, Stream};
    use proptest::prelude::*;

    #[test]
    fn realized_examples() {
        assert_eq!(realized_g(&[0.0; 10], 0.9, 3).unwrap(), vec![0.0; 8]);
        assert_eq!(realized_g(&[1.0, 2.0, 4.0], 0.5, 3).unwrap(), vec![3.0]);
        let long = realized_g(&vec![1.0; 200], 0.5, 100).unwrap();
        assert!((long[0] - 2.0).abs() < 1e-12);
        assert!(matches!(realized_g(&[1.0], 0.5, 3), Err(EvalError::WindowTooShort { .. })));
    }

    #[test]
    fn horizons() {
        assert_eq!(truncation_horizon(0.9, 1e-3), 66);
        assert_eq!(truncation_horizon(0.9975, 1e-3), 2760);
        assert_eq!(truncation_horizon(0.5, 0.25), 2);
    }

    #[test]
    fn indicator_and_z() {
        assert_eq!(indicator(42.0, 0.0, RewardKind::LogReturn), 42.0);
        assert!((indicator(100.0, 0.01, RewardKind::LogReturn) - 101.00501670841679).abs() < 1e-9);
        assert!((indicator(100.0, 0.01, RewardKind::CashReturn) - 101.0).abs() < 1e-12);
        assert_eq!(z_statistic(0.3, 0.3, 0.1).unwrap(), 0.0);
        assert!((z_statistic(0.1, 0.05, 0.05).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(z_statistic(0.1, 0.0, 0.0), Err(EvalError::DegenerateSigma(_))));
    }

    #[test]
    fn calibration_edge_cases() {
        let grid = SupportGrid::new(-1.0, 1.0, 21).unwrap();
        let below = vec![CategoricalDist::point_mass(grid, 0); 5];
        let rep = percentile_counts(&below, &[0.5; 5], &default_percentiles(), CdfConvention::Step).unwrap();
        assert!(rep.counts.iter().all(|c| *c == 0.0 || *c == 1.0));
        assert_eq!(*rep.counts.last().unwrap(), 1.0);
        // overshoot: cdf is 1 for every realization, only q = 1 counts them
        assert_eq!(rep.counts[..19].iter().sum::<f64>(), 0.0);
        assert!(percentile_counts(&below, &[0.5; 4], &[0.5], CdfConvention::Step).is_err());
    }

    #[test]
    fn gamma_curves() {
        let grid = SupportGrid::new(-1.0, 1.0, 21).unwrap();
        let d = CategoricalDist::point_mass(grid, 12);
        let curve = gamma_curve(&[0.99, 0.5, 0.9], &[d.clone(), d.clone(), d.clone()]).unwrap();
        assert_eq!(curve.iter().map(|p| p.gamma).collect::<Vec<_>>(), vec![0.5, 0.9, 0.99]);
        assert!(curve.iter().all(|p| p.mean == curve[0].mean));
        assert_eq!(gamma_curve(&[0.9], &[d]).unwrap().len(), 1);
    }

    #[test]
    fn constant_market_gamma_curve_increases() {
        let m = SyntheticMarket {
            kind: MarketKind::Constant { c: 0.01 },
            seed: 0,
        };
        let means: Vec<f64> = [0.5, 0.9, 0.99]
            .iter()
            .map(|g| m.analytic(*g, Some(100)).truncated_mean.unwrap()[0])
            .collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]));
        let rewards = synth_generate(&m, 300, &mut substream(0, Stream::Synth)).unwrap().rewards;
        let g = realized_g(&rewards, 0.9, 100).unwrap();
        assert!((g[0] - 0.01 * (1.0 - 0.9f64.powi(300)) / 0.1).abs() < 1e-12);
    }

    #[test]
    fn synthetic_oracles() {
        let zero = SyntheticMarket {
            kind: MarketKind::Constant { c: 0.0 },
            seed: 0,
        };
        let s = synth_generate(&zero, 50, &mut substream(1, Stream::Synth)).unwrap();
        assert!(s.rewards.iter().all(|r| *r == 0.0));
        assert!(s.prices.iter().all(|p| *p == 1.0));

        let gauss = SyntheticMarket {
            kind: MarketKind::IidGauss { mu: 0.0, sigma: 0.01 },
            seed: 0,
        };
        let a = gauss.analytic(0.9, None);
        assert!((a.std.unwrap() - 0.022942).abs() < 1e-6);

        let mrp = SyntheticMarket {
            kind: MarketKind::TwoStateMrp {
                transition: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                rewards: vec![1.0, 1.0],
            },
            seed: 0,
        };
        let v = mrp.analytic(0.5, None).mean;
        assert!((v[0] - 2.0).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);

        let bad = SyntheticMarket {
            kind: MarketKind::IidGauss { mu: 0.0, sigma: -1.0 },
            seed: 0,
        };
        assert!(matches!(synth_generate(&bad, 5, &mut substream(1, Stream::Synth)), Err(EvalError::BadParams(_))));
    }

    #[test]
    fn mrp_state_frequencies() {
        let mrp = SyntheticMarket {
            kind: MarketKind::TwoStateMrp {
                transition: vec![vec![0.9, 0.1], vec![0.3, 0.7]],
                rewards: vec![0.01, -0.02],
            },
            seed: 0,
        };
        let s = synth_generate(&mrp, 200_000, &mut substream(5, Stream::Synth)).unwrap();
        // stationary distribution (0.75, 0.25)
        let frac0 = s.states.iter().filter(|s| **s == 0).count() as f64 / s.states.len() as f64;
        assert!((frac0 - 0.75).abs() < 0.01);
        for t in 0..100 {
            assert_eq!(s.rewards[t], [0.01, -0.02][s.states[t]]);
        }
    }

    #[test]
    fn histogram_reference_mass() {
        let h = z_histogram(&[0.0, 0.1, -5.0, 7.0], 10, 3.0);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(h[0].count, 1);
        assert_eq!(h[9].count, 1);
        let total_ref: f64 = h.iter().map(|b| b.normal_ref).sum();
        assert!((total_ref - 4.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn realized_recursion_and_consistency(r in prop::collection::vec(-0.05f64..0.05, 30..120), gi in 0.0f64..0.99, gj in 0.0f64..0.99) {
            let k = 10;
            let a = realized_g(&r, gi, k).unwrap();
            let b = realized_g(&r, gj, k).unwrap();
            for t in 0..a.len() - 1 {
                prop_assert_eq!(a[t], r[t] + gi * a[t + 1]);
            }
            let res = gamma_consistency_residual(&a, &b, gi, gj).unwrap();
            prop_assert!(res.iter().all(|x| x.abs() <= 1e-10));
            let same = gamma_consistency_residual(&a, &a, gi, gi).unwrap();
            prop_assert!(same.iter().all(|x| x.abs() <= 1e-15));
        }

        #[test]
        fn calibration_monotone(ps in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 11), 1..30), xs in prop::collection::vec(-1.5f64..1.5, 30)) {
            let grid = SupportGrid::new(-1.0, 1.0, 11).unwrap();
            let dists: Vec<CategoricalDist> = ps.iter().map(|p| {
                let s: f64 = p.iter().sum();
                CategoricalDist::new(grid, p.iter().map(|v| v / s).collect()).unwrap()
            }).collect();
            let rep = percentile_counts(&dists, &xs[..dists.len()], &default_percentiles(), CdfConvention::Step).unwrap();
            prop_assert!(rep.counts.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*rep.counts.last().unwrap(), 1.0);
        }
    }
}
