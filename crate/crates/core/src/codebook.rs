//! Visual dictionary: a bank of `m` entries of width `c`, maintained by an
//! exponential moving average over the patch vectors assigned to each entry.
//!
//! The dictionary is deliberately not a tape parameter: entries update only
//! through [`Codebook::ema_update`], never by gradient. Lookups feed the tape
//! as constants (or as straight-through forward values).

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};
use crate::tensor::{cosine, Tensor};
use rand::Rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Codebook<T> {
    entries: Tensor<T>,
    gamma: T,
    /// Cumulative number of vectors ever assigned to each entry.
    usage: Vec<u64>,
    total_assignments: u64,
}

impl<T: Real> Codebook<T> {
    /// Seeded random unit-norm entries.
    pub fn new<R: Rng>(m: usize, c: usize, gamma: T, rng: &mut R) -> Result<Self> {
        if m == 0 || c == 0 {
            return Err(Error::Config(format!("codebook size {m}x{c} must be positive")));
        }
        if gamma < T::zero() || gamma >= T::one() {
            return Err(Error::Config(format!("codebook gamma {gamma} outside [0, 1)")));
        }
        let mut entries = Tensor::randn(&[m, c], T::one(), rng);
        for j in 0..m {
            crate::tensor::l2_normalize_slice(entries.row_mut(j));
        }
        Ok(Codebook {
            entries,
            gamma,
            usage: vec![0; m],
            total_assignments: 0,
        })
    }

    pub fn from_parts(
        entries: Tensor<T>,
        gamma: T,
        usage: Vec<u64>,
        total_assignments: u64,
    ) -> Result<Self> {
        let (m, _) = entries.dims2()?;
        if usage.len() != m {
            return Err(Error::Shape {
                op: "codebook usage",
                lhs: vec![m],
                rhs: vec![usage.len()],
            });
        }
        if usage.iter().sum::<u64>() != total_assignments {
            return Err(Error::State(
                "codebook usage does not sum to total assignments".into(),
            ));
        }
        Ok(Codebook { entries, gamma, usage, total_assignments })
    }

    pub fn m(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn entries(&self) -> &Tensor<T> {
        &self.entries
    }

    pub fn entry(&self, j: usize) -> &[T] {
        self.entries.row(j)
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn total_assignments(&self) -> u64 {
        self.total_assignments
    }

    /// Nearest entry by Euclidean distance; ties resolve to the lowest index.
    /// Distances are computed directly (no norm expansion) so results match a
    /// naive exhaustive scan bit for bit.
    pub fn quantize_one(&self, v: &[T]) -> usize {
        let c = self.c();
        debug_assert_eq!(v.len(), c);
        let mut best = 0usize;
        let mut best_d = T::infinity();
        for j in 0..self.m() {
            let row = self.entries.row(j);
            let mut d = T::zero();
            for i in 0..c {
                let diff = v[i] - row[i];
                d = d + diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    pub fn quantize(&self, vectors: &Tensor<T>) -> Result<Vec<usize>> {
        let (n, c) = vectors.dims2()?;
        if c != self.c() {
            return Err(Error::Shape {
                op: "quantize",
                lhs: vec![n, c],
                rhs: vec![self.m(), self.c()],
            });
        }
        Ok((0..n).map(|i| self.quantize_one(vectors.row(i))).collect())
    }

    /// Rows of the dictionary at the given assignments, e.g. as the forward
    /// value of a straight-through op.
    pub fn lookup_rows(&self, assignments: &[usize]) -> Result<Tensor<T>> {
        let c = self.c();
        let mut data = Vec::with_capacity(assignments.len() * c);
        for &j in assignments {
            if j >= self.m() {
                return Err(Error::Index(format!("codebook entry {j} out of {}", self.m())));
            }
            data.extend_from_slice(self.entries.row(j));
        }
        Tensor::from_vec(vec![assignments.len(), c], data)
    }

    /// `d̂_j = γ·d_j + (1−γ)·mean(assigned vectors)`. Entries that received
    /// no vectors this batch are left bit-identical.
    pub fn ema_update(&mut self, vectors: &Tensor<T>, assignments: &[usize]) -> Result<()> {
        let (n, c) = vectors.dims2()?;
        if c != self.c() || assignments.len() != n {
            return Err(Error::Shape {
                op: "ema_update",
                lhs: vec![n, c],
                rhs: vec![assignments.len(), self.c()],
            });
        }
        let m = self.m();
        let mut sums = vec![T::zero(); m * c];
        let mut counts = vec![0u64; m];
        for (i, &j) in assignments.iter().enumerate() {
            if j >= m {
                return Err(Error::Index(format!("assignment {j} out of {m}")));
            }
            counts[j] += 1;
            let row = vectors.row(i);
            for d in 0..c {
                sums[j * c + d] = sums[j * c + d] + row[d];
            }
        }
        for j in 0..m {
            if counts[j] == 0 {
                continue;
            }
            let inv_n = lit::<T>(1.0 / counts[j] as f64);
            let row = self.entries.row_mut(j);
            for d in 0..c {
                let mean = sums[j * c + d] * inv_n;
                row[d] = self.gamma * row[d] + (T::one() - self.gamma) * mean;
            }
            self.usage[j] += counts[j];
        }
        self.total_assignments += n as u64;
        Ok(())
    }

    /// The `k` entries most cosine-similar to entry `j`, self excluded,
    /// descending similarity, ties broken toward the lower index. `k` is
    /// clamped to `m − 1`.
    pub fn top_k_similar(&self, j: usize, k: usize) -> Result<Vec<(usize, T)>> {
        let m = self.m();
        if j >= m {
            return Err(Error::Index(format!("codebook entry {j} out of {m}")));
        }
        if m < 2 {
            return Err(Error::State("top_k_similar needs at least 2 entries".into()));
        }
        let mut sims: Vec<(usize, T)> = (0..m)
            .filter(|&i| i != j)
            .map(|i| (i, cosine(self.entries.row(i), self.entries.row(j))))
            .collect();
        sims.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite similarities")
                .then(a.0.cmp(&b.0))
        });
        sims.truncate(k.min(m - 1));
        Ok(sims)
    }
}
