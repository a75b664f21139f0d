//! Momentum model and feature queues.
//!
//! The momentum parameter set is an exponential moving average of the online
//! parameters (θ' ← μ·θ' + (1−μ)·θ) and never receives gradients. Two FIFO
//! queues cache the most recent momentum features as extra contrastive
//! candidates.

use crate::error::{Error, Result};
use crate::params::{zip_params_mut, Parameterized};
use crate::scalar::{as_f64, lit, Real};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MOMENTUM: f64 = 0.995;

/// Online parameters plus their momentum copy.
#[derive(Debug, Clone)]
pub struct MomentumPair<M> {
    pub online: M,
    pub momentum: M,
    mu: f64,
}

impl<M: Clone> MomentumPair<M> {
    /// The momentum set starts as an exact copy of the online set.
    pub fn new(online: M, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::Config(format!("momentum coefficient {mu} outside [0, 1]")));
        }
        let momentum = online.clone();
        Ok(MomentumPair { online, momentum, mu })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

impl<M> MomentumPair<M> {
    /// Rebuilds a pair from checkpointed halves.
    pub fn from_parts(online: M, momentum: M, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::Config(format!("momentum coefficient {mu} outside [0, 1]")));
        }
        Ok(MomentumPair { online, momentum, mu })
    }

    /// θ' ← μ·θ' + (1−μ)·θ elementwise over every parameter.
    pub fn step<T: Real>(&mut self) -> Result<()>
    where
        M: Parameterized<T>,
    {
        let mu = lit::<T>(self.mu);
        let one_m = T::one() - mu;
        zip_params_mut(&self.online, &mut self.momentum, &mut |_, on, m| {
            for (t, o) in m.data_mut().iter_mut().zip(on.data()) {
                *t = mu * *t + one_m * *o;
            }
        })
    }
}

/// Fixed-capacity FIFO of unit-norm feature rows, oldest evicted first.
///
/// Capacity 0 is a valid "queue off" configuration: pushes are accepted and
/// dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureQueue<T> {
    capacity: usize,
    width: usize,
    /// Ring storage, `len·width` elements once warm.
    buf: Vec<T>,
    /// Next write slot in `[0, capacity)`.
    cursor: usize,
    len: usize,
}

impl<T: Real> FeatureQueue<T> {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("feature queue width must be ≥ 1".into()));
        }
        Ok(FeatureQueue { capacity, width, buf: Vec::new(), cursor: 0, len: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::Shape {
                op: "queue_push",
                lhs: vec![self.width],
                rhs: vec![row.len()],
            });
        }
        let norm: f64 = row.iter().map(|x| as_f64(*x) * as_f64(*x)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "queue rows must be unit-norm, got ‖row‖ = {norm}"
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.buf.len() < self.capacity * self.width {
            self.buf.extend_from_slice(row);
        } else {
            self.buf[self.cursor * self.width..(self.cursor + 1) * self.width]
                .copy_from_slice(row);
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    pub fn push_rows(&mut self, rows: &Tensor<T>) -> Result<()> {
        let (n, _) = rows.dims2()?;
        for i in 0..n {
            self.push_row(rows.row(i))?;
        }
        Ok(())
    }

    /// Rows oldest-first.
    pub fn rows(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.len);
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        for i in 0..self.len {
            let slot = (start + i) % self.capacity.max(1);
            out.push(&self.buf[slot * self.width..(slot + 1) * self.width]);
        }
        out
    }

    /// Fills the queue to capacity with random unit-norm rows (the state it
    /// starts from before the first training step).
    pub fn fill_random<R: rand::Rng>(&mut self, rng: &mut R) -> Result<()> {
        for _ in 0..self.capacity {
            let mut row = Tensor::<T>::randn(&[self.width], T::one(), rng);
            crate::tensor::l2_normalize_slice(row.data_mut());
            self.push_row(row.data())?;
        }
        Ok(())
    }

    /// `len × width` tensor of the queue contents, oldest-first. Errors when
    /// empty (a 0-row matrix has no use downstream).
    pub fn as_tensor(&self) -> Result<Tensor<T>> {
        if self.is_empty() {
            return Err(Error::State("feature queue is empty".into()));
        }
        let mut data = Vec::with_capacity(self.len * self.width);
        for r in self.rows() {
            data.extend_from_slice(r);
        }
        Tensor::from_vec(vec![self.len, self.width], data)
    }
}
