//! Proportional prioritized experience replay.
//!
//! Items are stored in a FIFO ring. Each carries a raw priority `p_i`; the sum
//! tree holds `p_i^alpha` so that sampling draws slot `i` with probability
//! `P(i) = p_i^alpha / sum_k p_k^alpha`. When annealing changes `alpha` the tree
//! is rebuilt lazily on the next sample.
//!
//! The buffer is single-owner: it has no internal locking and is not `Sync`-safe
//! to mutate from several threads.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("buffer holds {have} samples, {need} requested")]
    NotEnoughSamples { have: usize, need: usize },
    #[error("index {0} is not (or no longer) in the buffer")]
    BadIndex(u64),
    #[error("{ids} indices but {losses} losses")]
    LengthMismatch { ids: usize, losses: usize },
    #[error("capacity must be positive")]
    BadCapacity,
}

/// Binary sum tree over a power-of-two number of leaves.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let mut k = self.leaves + i;
        self.nodes[k] = value;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Rebuilds every internal node from the leaves.
    pub fn rebuild(&mut self, values: impl IntoIterator<Item = f64>) {
        self.nodes.iter_mut().for_each(|v| *v = 0.0);
        for (i, v) in values.into_iter().enumerate() {
            self.nodes[self.leaves + i] = v;
        }
        for k in (1..self.leaves).rev() {
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative range contains `mass` in `[0, total)`.
    /// Never returns an empty leaf when `limit` bounds the occupied leaves.
    pub fn find(&self, mut mass: f64, limit: usize) -> usize {
        let mut k = 1;
        while k < self.leaves {
            let left = self.nodes[2 * k];
            if mass < left || self.nodes[2 * k + 1] <= 0.0 {
                k *= 2;
            } else {
                mass -= left;
                k = 2 * k + 1;
            }
        }
        // guard against drifting into an empty right-hand leaf through rounding
        (k - self.leaves).min(limit.saturating_sub(1))
    }
}

/// Linear schedules for the prioritization and correction exponents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub alpha0: f64,
    pub beta0: f64,
    pub alpha_end: f64,
    pub beta_end: f64,
    pub steps: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            alpha0: 0.75,
            beta0: 0.25,
            alpha_end: 0.0,
            beta_end: 1.0,
            steps: 20_000,
        }
    }
}

impl AnnealSchedule {
    pub fn constant(alpha: f64, beta: f64) -> Self {
        Self {
            alpha0: alpha,
            beta0: beta,
            alpha_end: alpha,
            beta_end: beta,
            steps: 1,
        }
    }

    /// `(alpha, beta)` after `step` learning steps.
    pub fn at(&self, step: u64) -> (f64, f64) {
        let frac = if self.steps == 0 {
            1.0
        } else {
            (step as f64 / self.steps as f64).min(1.0)
        };
        (
            self.alpha0 + (self.alpha_end - self.alpha0) * frac,
            self.beta0 + (self.beta_end - self.beta0) * frac,
        )
    }
}

/// A prioritized draw of `n_batch` items (with replacement).
#[derive(Debug, Clone)]
pub struct SampledBatch<T> {
    pub items: Vec<T>,
    pub indices: Vec<u64>,
    pub probabilities: Vec<f64>,
    /// `(n_B P(i))^-beta` before normalization.
    pub raw_weights: Vec<f64>,
    /// Raw weights divided by the batch maximum.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PrioBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    raw: Vec<f64>,
    tree: SumTree,
    pushed: u64,
    p_max: f64,
    alpha: f64,
    beta: f64,
    eps: f64,
    dirty: bool,
}

impl<T: Clone> PrioBuffer<T> {
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(capacity: usize, alpha: f64, beta: f64, eps: f64) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::BadCapacity);
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 20)),
            raw: Vec::with_capacity(capacity.min(1 << 20)),
            tree: SumTree::new(capacity),
            pushed: 0,
            p_max: 1.0,
            alpha,
            beta,
            eps,
            dirty: false,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    fn slot(&self, id: u64) -> Result<usize, ReplayError> {
        let oldest = self.pushed.saturating_sub(self.items.len() as u64);
        if id < oldest || id >= self.pushed {
            return Err(ReplayError::BadIndex(id));
        }
        Ok((id % self.capacity as u64) as usize)
    }

    /// Raw priority of a stored item.
    pub fn priority(&self, id: u64) -> Result<f64, ReplayError> {
        Ok(self.raw[self.slot(id)?])
    }

    pub fn get(&self, id: u64) -> Result<&T, ReplayError> {
        Ok(&self.items[self.slot(id)?])
    }

    /// Stores `item` with the largest priority seen so far, evicting the oldest
    /// item when full. Returns the item's index.
    pub fn push(&mut self, item: T) -> u64 {
        let id = self.pushed;
        let slot = (id % self.capacity as u64) as usize;
        if slot == self.items.len() {
            self.items.push(item);
            self.raw.push(self.p_max);
        } else {
            self.items[slot] = item;
            self.raw[slot] = self.p_max;
        }
        self.tree.set(slot, self.p_max.powf(self.alpha));
        self.pushed += 1;
        id
    }

    /// Sets `alpha` and `beta`; the tree is rebuilt on the next sample if `alpha` moved.
    pub fn set_exponents(&mut self, alpha: f64, beta: f64) {
        if alpha != self.alpha {
            self.alpha = alpha;
            self.dirty = true;
        }
        self.beta = beta;
    }

    pub fn anneal(&mut self, schedule: &AnnealSchedule, step: u64) {
        let (a, b) = schedule.at(step);
        self.set_exponents(a, b);
    }

    fn refresh(&mut self) {
        if self.dirty {
            let alpha = self.alpha;
            self.tree.rebuild(self.raw.iter().map(|p| p.powf(alpha)));
            self.dirty = false;
        }
    }

    /// Sum of `p_i^alpha` held by the tree.
    pub fn total_mass(&mut self) -> f64 {
        self.refresh();
        self.tree.total()
    }

    /// Sampling probability of a stored item under the current `alpha`.
    pub fn probability(&mut self, id: u64) -> Result<f64, ReplayError> {
        let slot = self.slot(id)?;
        self.refresh();
        Ok(self.tree.get(slot) / self.tree.total())
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, n_batch: usize, rng: &mut R) -> Result<SampledBatch<T>, ReplayError> {
        let uniforms: Vec<f64> = (0..n_batch).map(|_| rng.random::<f64>()).collect();
        self.sample_with_uniforms(&uniforms)
    }

    /// Deterministic draw: each `u` in `[0, 1)` selects the slot whose cumulative
    /// mass interval contains `u * total`.
    pub fn sample_with_uniforms(&mut self, uniforms: &[f64]) -> Result<SampledBatch<T>, ReplayError> {
        let need = uniforms.len();
        if self.items.len() < need || need == 0 {
            return Err(ReplayError::NotEnoughSamples {
                have: self.items.len(),
                need,
            });
        }
        self.refresh();
        let total = self.tree.total();
        let n_b = self.items.len() as f64;
        let oldest = self.pushed - self.items.len() as u64;
        let cap = self.capacity as u64;
        let mut batch = SampledBatch {
            items: Vec::with_capacity(need),
            indices: Vec::with_capacity(need),
            probabilities: Vec::with_capacity(need),
            raw_weights: Vec::with_capacity(need),
            weights: Vec::with_capacity(need),
        };
        for &u in uniforms {
            let slot = self.tree.find(u * total, self.items.len());
            let prob = self.tree.get(slot) / total;
            // map the slot back to its insertion index
            let offset = (slot as u64 + cap - oldest % cap) % cap;
            batch.indices.push(oldest + offset);
            batch.items.push(self.items[slot].clone());
            batch.probabilities.push(prob);
            batch.raw_weights.push((n_b * prob).powf(-self.beta));
        }
        let max_w = batch.raw_weights.iter().copied().fold(0.0, f64::max);
        batch.weights = batch.raw_weights.iter().map(|w| w / max_w).collect();
        Ok(batch)
    }

    /// Sets `p_i = loss_i + eps` for every index.
    pub fn update_priorities(&mut self, ids: &[u64], losses: &[f64]) -> Result<(), ReplayError> {
        if ids.len() != losses.len() {
            return Err(ReplayError::LengthMismatch {
                ids: ids.len(),
                losses: losses.len(),
            });
        }
        let slots = ids.iter().map(|id| self.slot(*id)).collect::<Result<Vec<_>, _>>()?;
        for (slot, loss) in slots.into_iter().zip(losses) {
            let p = loss.abs() + self.eps;
            self.raw[slot] = p;
            self.p_max = self.p_max.max(p);
            if !self.dirty {
                self.tree.set(slot, p.powf(self.alpha));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    #[test]
    fn push_priorities_and_fifo() {
        let mut b = PrioBuffer::new(2, 1.0, 1.0, 1e-6).unwrap();
        let a = b.push("a");
        assert_eq!(b.priority(a).unwrap(), 1.0);
        b.update_priorities(&[a], &[5.0]).unwrap();
        let c = b.push("c");
        assert!((b.priority(c).unwrap() - 5.000001).abs() < 1e-12);
        let d = b.push("d");
        assert!(matches!(b.get(a), Err(ReplayError::BadIndex(0))));
        assert_eq!(*b.get(c).unwrap(), "c");
        assert_eq!(*b.get(d).unwrap(), "d");
        assert!(matches!(b.update_priorities(&[a], &[1.0]), Err(ReplayError::BadIndex(0))));
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn zero_loss_keeps_positive_priority() {
        let mut b = PrioBuffer::new(4, 0.5, 0.5, 1e-6).unwrap();
        let i = b.push(1);
        b.update_priorities(&[i], &[0.0]).unwrap();
        assert_eq!(b.priority(i).unwrap(), 1e-6);
    }

    #[test]
    fn not_enough_samples() {
        let mut b = PrioBuffer::new(4, 0.5, 0.5, 1e-6).unwrap();
        b.push(1);
        let mut rng = substream(0, Stream::Buffer);
        assert!(matches!(b.sample(2, &mut rng), Err(ReplayError::NotEnoughSamples { have: 1, need: 2 })));
    }

    #[test]
    fn uniform_cases() {
        let mut rng = substream(0, Stream::Buffer);
        let mut b = PrioBuffer::new(8, 0.7, 0.4, 1e-6).unwrap();
        for i in 0..8 {
            b.push(i);
        }
        let batch = b.sample(8, &mut rng).unwrap();
        assert!(batch.probabilities.iter().all(|p| (p - 0.125).abs() < 1e-12));
        assert!(batch.weights.iter().all(|w| (w - 1.0).abs() < 1e-12));

        let ids: Vec<u64> = (0..8).collect();
        b.update_priorities(&ids, &[1.0, 9.0, 3.0, 0.1, 2.0, 2.0, 7.0, 5.0]).unwrap();
        b.set_exponents(0.0, 0.0);
        let batch = b.sample(8, &mut rng).unwrap();
        assert!(batch.probabilities.iter().all(|p| (p - 0.125).abs() < 1e-12));
        assert!(batch.weights.iter().all(|w| *w == 1.0));
    }

    #[test]
    fn anneal_schedule() {
        let s = AnnealSchedule::default();
        assert_eq!(s.at(0), (0.75, 0.25));
        assert_eq!(s.at(20_000), (0.0, 1.0));
        assert_eq!(s.at(50_000), (0.0, 1.0));
        let (a, b) = s.at(10_000);
        assert!((a - 0.375).abs() < 1e-15 && (b - 0.625).abs() < 1e-15);
    }

    #[test]
    fn indices_survive_wraparound() {
        let mut rng = substream(4, Stream::Buffer);
        let mut b = PrioBuffer::new(3, 1.0, 1.0, 1e-6).unwrap();
        for i in 0..7u64 {
            b.push(i);
        }
        for _ in 0..20 {
            let batch = b.sample(3, &mut rng).unwrap();
            for (id, item) in batch.indices.iter().zip(&batch.items) {
                assert_eq!(id, item);
                assert!((4..7).contains(id));
            }
        }
    }

    #[test]
    fn tree_find_boundaries() {
        let mut t = SumTree::new(3);
        t.rebuild([1.0, 3.0, 0.0]);
        assert_eq!(t.total(), 4.0);
        assert_eq!(t.find(0.0, 2), 0);
        assert_eq!(t.find(0.999, 2), 0);
        assert_eq!(t.find(1.0, 2), 1);
        assert_eq!(t.find(3.999, 2), 1);
    }
}
