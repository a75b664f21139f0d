//! Reverse-mode autodiff over a flat op arena.
//!
//! Ops are recorded in execution order, which is already a topological order,
//! so the backward sweep is a single reverse pass that visits every op exactly
//! once. Values are owned by the tape; `Var` is a copyable handle. Clearing or
//! dropping the tape frees all recorded intermediates.
//!
//! Gradients are accumulated only into nodes with `requires_grad`, which is
//! set on parameters and propagated through ops. Constants (data, masks,
//! momentum-encoder outputs, codebook rows) enter as non-gradient leaves, so
//! "no gradient flows into X" invariants are structural rather than relying
//! on callers to detach.

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    Scale { x: usize, k: T },
    AddRowBroadcast { mat: usize, row: usize },
    SumAll { x: usize },
    DivByScalarVar { x: usize, s: usize },
    SoftmaxLastDim { x: usize, temp: T },
    CrossEntropyRows { p: usize, y: usize },
    GatherRows { x: usize, ids: Vec<usize> },
    StraightThrough { x: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    ReplaceRows { x: usize, rows: Vec<(usize, Vec<T>)> },
    LayerNormRows { x: usize, gain: usize, bias: usize },
    Gelu { x: usize },
    Exp { x: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, mask: Option<Vec<bool>>, probs: Vec<T> },
    L2NormRows { x: usize },
}

struct Recorded<T> {
    op: Op<T>,
    out: usize,
}

pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Recorded<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.values.clear();
        self.requires.clear();
        self.grads.clear();
        self.ops.clear();
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    /// Number of gradient-carrying leaves registered so far. The trainer
    /// asserts this equals the online parameter count, which proves the
    /// momentum model never entered the tape as a trainable leaf.
    pub fn num_param_leaves(&self) -> usize {
        let mut is_op_output = vec![false; self.values.len()];
        for r in &self.ops {
            is_op_output[r.out] = true;
        }
        self.requires
            .iter()
            .zip(&is_op_output)
            .filter(|(req, out)| **req && !**out)
            .count()
    }

    /// Gradient-carrying leaves in creation order. A model bound with
    /// `trainable = true` creates these in its `visit` order, so index `i`
    /// here corresponds to the `i`-th visited parameter tensor.
    pub fn param_leaves(&self) -> Vec<Var> {
        let mut is_op_output = vec![false; self.values.len()];
        for r in &self.ops {
            is_op_output[r.out] = true;
        }
        (0..self.values.len())
            .filter(|&i| self.requires[i] && !is_op_output[i])
            .map(Var)
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, requires: bool) -> Var {
        self.values.push(value);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Non-gradient leaf: inputs, labels, masks, detached features.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false)
    }

    /// Gradient-carrying leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn record(&mut self, op: Op<T>, value: Tensor<T>, requires: bool) -> Var {
        let out = self.push(value, requires);
        self.ops.push(Recorded { op, out: out.0 });
        out
    }

    fn req2(&self, a: Var, b: Var) -> bool {
        self.requires[a.0] || self.requires[b.0]
    }

    // ---- ops ------------------------------------------------------------

    /// `op_a(A) · op_b(B)` where the flags select transposition.
    pub fn matmul_gen(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.values[a.0].dims2()?;
        let (br, bc) = self.values[b.0].dims2()?;
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(
            self.values[a.0].data(),
            (ar, ac),
            ta,
            self.values[b.0].data(),
            (br, bc),
            tb,
            &mut out,
        );
        let req = self.req2(a, b);
        Ok(self.record(
            Op::Matmul { a: a.0, b: b.0, ta, tb },
            Tensor::from_vec(vec![m, n], out)?,
            req,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_gen(a, b, false, false)
    }

    /// `A · Bᵀ`; the usual layout for similarity matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_gen(a, b, false, true)
    }

    fn zip_elementwise(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape {
                op,
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[b.0].shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "add")?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape().to_vec(), data)?;
        let req = self.req2(a, b);
        Ok(self.record(Op::Add { a: a.0, b: b.0 }, t, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "sub")?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| *x - *y)
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape().to_vec(), data)?;
        let req = self.req2(a, b);
        Ok(self.record(Op::Sub { a: a.0, b: b.0 }, t, req))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "mul_elem")?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape().to_vec(), data)?;
        let req = self.req2(a, b);
        Ok(self.record(Op::MulElem { a: a.0, b: b.0 }, t, req))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let data = self.values[x.0].data().iter().map(|v| *v * k).collect();
        let t = Tensor::from_vec(self.values[x.0].shape().to_vec(), data)?;
        let req = self.requires[x.0];
        Ok(self.record(Op::Scale { x: x.0, k }, t, req))
    }

    /// `mat[r, c] + row[c]`: bias addition.
    pub fn add_row_broadcast(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (r, c) = self.values[mat.0].dims2()?;
        if self.values[row.0].shape() != [c] && self.values[row.0].shape() != [1, c] {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                lhs: vec![r, c],
                rhs: self.values[row.0].shape().to_vec(),
            });
        }
        let rowv = self.values[row.0].data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(self.values[mat.0].data()[i * c + j] + rowv[j]);
            }
        }
        let t = Tensor::from_vec(vec![r, c], data)?;
        let req = self.req2(mat, row);
        Ok(self.record(Op::AddRowBroadcast { mat: mat.0, row: row.0 }, t, req))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0]
            .data()
            .iter()
            .fold(T::zero(), |acc, v| acc + *v);
        let req = self.requires[x.0];
        Ok(self.record(Op::SumAll { x: x.0 }, Tensor::scalar(s), req))
    }

    /// `x / s` with a scalar variable divisor (e.g. a learnable temperature).
    pub fn div_by_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.values[s.0].scalar_value()?;
        if sv == T::zero() {
            return Err(Error::Domain("division by zero scalar variable".into()));
        }
        let data = self.values[x.0].data().iter().map(|v| *v / sv).collect();
        let t = Tensor::from_vec(self.values[x.0].shape().to_vec(), data)?;
        let req = self.req2(x, s);
        Ok(self.record(Op::DivByScalarVar { x: x.0, s: s.0 }, t, req))
    }

    /// Row-wise `softmax(x / temp)` over the last dimension of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var, temp: T) -> Result<Var> {
        if temp <= T::zero() {
            return Err(Error::Domain(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let (r, c) = self.values[x.0].dims2()?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_row(self.values[x.0].row(i), temp, &mut data[i * c..(i + 1) * c]);
        }
        let t = Tensor::from_vec(vec![r, c], data)?;
        let req = self.requires[x.0];
        Ok(self.record(Op::SoftmaxLastDim { x: x.0, temp }, t, req))
    }

    /// Mean over rows of `−Σ_c y·ln(max(p, 1e-12))`. Accepts soft targets.
    pub fn cross_entropy_rows(&mut self, p: Var, y: Var) -> Result<Var> {
        self.zip_elementwise(p, y, "cross_entropy_rows")?;
        let (r, _) = self.values[p.0].dims2()?;
        let floor = lit::<T>(CE_FLOOR);
        let mut total = T::zero();
        for (pv, yv) in self.values[p.0].data().iter().zip(self.values[y.0].data()) {
            if *yv != T::zero() {
                total = total - *yv * pv.max(floor).ln();
            }
        }
        let mean = total / lit::<T>(r as f64);
        let req = self.req2(p, y);
        Ok(self.record(Op::CrossEntropyRows { p: p.0, y: y.0 }, Tensor::scalar(mean), req))
    }

    /// Selects rows by index; duplicates allowed (gradients accumulate).
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.values[x.0].dims2()?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Index(format!("gather_rows: row {id} out of {r}")));
            }
            data.extend_from_slice(self.values[x.0].row(id));
        }
        let t = Tensor::from_vec(vec![ids.len(), c], data)?;
        let req = self.requires[x.0];
        Ok(self.record(Op::GatherRows { x: x.0, ids: ids.to_vec() }, t, req))
    }

    /// Straight-through estimator: the forward value is `values` (typically
    /// quantized rows), the backward pass copies the output gradient into `x`
    /// unchanged.
    pub fn straight_through(&mut self, x: Var, values: Tensor<T>) -> Result<Var> {
        if self.values[x.0].shape() != values.shape() {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: self.values[x.0].shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        let req = self.requires[x.0];
        Ok(self.record(Op::StraightThrough { x: x.0 }, values, req))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, c) = self.values[parts[0].0].dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = self.values[p.0].dims2()?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, pc],
                });
            }
            rows += r;
            data.extend_from_slice(self.values[p.0].data());
        }
        let t = Tensor::from_vec(vec![rows, c], data)?;
        let req = parts.iter().any(|p| self.requires[p.0]);
        Ok(self.record(Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() }, t, req))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.values[x.0].dims2()?;
        if start + len > r {
            return Err(Error::Index(format!(
                "slice_rows: [{start}, {}) out of {r} rows",
                start + len
            )));
        }
        let data = self.values[x.0].data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::from_vec(vec![len, c], data)?;
        let req = self.requires[x.0];
        Ok(self.record(Op::SliceRows { x: x.0, start }, t, req))
    }

    /// Overwrites the given rows with constant data. Gradients flow only
    /// through rows that were kept.
    pub fn replace_rows(&mut self, x: Var, rows: Vec<(usize, Vec<T>)>) -> Result<Var> {
        let (r, c) = self.values[x.0].dims2()?;
        let mut seen = vec![false; r];
        for (idx, row) in &rows {
            if *idx >= r {
                return Err(Error::Index(format!("replace_rows: row {idx} out of {r}")));
            }
            if row.len() != c {
                return Err(Error::Shape {
                    op: "replace_rows",
                    lhs: vec![r, c],
                    rhs: vec![row.len()],
                });
            }
            if seen[*idx] {
                return Err(Error::Contract(format!("replace_rows: duplicate row {idx}")));
            }
            seen[*idx] = true;
        }
        let mut t = self.values[x.0].clone();
        for (idx, row) in &rows {
            t.row_mut(*idx).copy_from_slice(row);
        }
        let req = self.requires[x.0];
        Ok(self.record(Op::ReplaceRows { x: x.0, rows }, t, req))
    }

    /// Per-row LayerNorm with learnable gain and bias of width `c`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.values[x.0].dims2()?;
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.values[v.0].numel() != c {
                return Err(Error::Shape {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                    lhs: vec![r, c],
                    rhs: self.values[v.0].shape().to_vec(),
                });
            }
        }
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = self.values[x.0].row(i);
            let (mean, rstd) = row_moments(row);
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * rstd * self.values[gain.0].data()[j]
                    + self.values[bias.0].data()[j];
            }
        }
        let t = Tensor::from_vec(vec![r, c], data)?;
        let req = self.requires[x.0] || self.req2(gain, bias);
        Ok(self.record(Op::LayerNormRows { x: x.0, gain: gain.0, bias: bias.0 }, t, req))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.values[x.0].data().iter().map(|v| gelu_fwd(*v)).collect();
        let t = Tensor::from_vec(self.values[x.0].shape().to_vec(), data)?;
        let req = self.requires[x.0];
        Ok(self.record(Op::Gelu { x: x.0 }, t, req))
    }

    /// Elementwise `e^x`.
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data = self.values[x.0].data().iter().map(|v| v.exp()).collect();
        let t = Tensor::from_vec(self.values[x.0].shape().to_vec(), data)?;
        let req = self.requires[x.0];
        Ok(self.record(Op::Exp { x: x.0 }, t, req))
    }

    /// Fused multi-head scaled dot-product attention. `mask[j] = true`
    /// excludes key/value position `j` (its attention weight is exactly zero,
    /// so masked positions cannot influence any output row).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (sq, c) = self.values[q.0].dims2()?;
        let (sk, ck) = self.values[k.0].dims2()?;
        let (sv, cv) = self.values[v.0].dims2()?;
        if ck != c || cv != c || sv != sk {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![sq, c],
                rhs: vec![sk, ck, sv, cv],
            });
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "attention: {heads} heads do not divide width {c}"
            )));
        }
        if let Some(m) = mask {
            if m.len() != sk {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: vec![sk],
                    rhs: vec![m.len()],
                });
            }
            if m.iter().all(|&x| x) {
                return Err(Error::Domain("attention: all key positions masked".into()));
            }
        }
        let dh = c / heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); sq * c];
        let mut probs = vec![T::zero(); heads * sq * sk];
        let qd = self.values[q.0].data();
        let kd = self.values[k.0].data();
        let vd = self.values[v.0].data();
        let mut logits = vec![T::zero(); sk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..sq {
                let qrow = &qd[i * c + off..i * c + off + dh];
                let mut maxl = T::neg_infinity();
                for j in 0..sk {
                    if mask.is_some_and(|m| m[j]) {
                        continue;
                    }
                    let krow = &kd[j * c + off..j * c + off + dh];
                    let l = crate::tensor::dot(qrow, krow) * scale;
                    logits[j] = l;
                    maxl = maxl.max(l);
                }
                let mut denom = T::zero();
                for j in 0..sk {
                    if mask.is_some_and(|m| m[j]) {
                        continue;
                    }
                    let e = (logits[j] - maxl).exp();
                    probs[(h * sq + i) * sk + j] = e;
                    denom = denom + e;
                }
                let orow = &mut out[i * c + off..i * c + off + dh];
                for j in 0..sk {
                    let pj = probs[(h * sq + i) * sk + j] / denom;
                    probs[(h * sq + i) * sk + j] = pj;
                    if pj != T::zero() {
                        let vrow = &vd[j * c + off..j * c + off + dh];
                        for d in 0..dh {
                            orow[d] = orow[d] + pj * vrow[d];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(vec![sq, c], out)?;
        let req = self.requires[q.0] || self.requires[k.0] || self.requires[v.0];
        Ok(self.record(
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                mask: mask.map(|m| m.to_vec()),
                probs,
            },
            t,
            req,
        ))
    }

    /// Row-wise L2 normalization with a `max(‖x‖, 1e-12)` guard.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.values[x.0].dims2()?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = self.values[x.0].row(i);
            let denom = crate::tensor::dot(row, row).sqrt().max(lit(1e-12));
            for j in 0..c {
                data[i * c + j] = row[j] / denom;
            }
        }
        let t = Tensor::from_vec(vec![r, c], data)?;
        let req = self.requires[x.0];
        Ok(self.record(Op::L2NormRows { x: x.0 }, t, req))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a finite scalar loss. Gradients from any previous
    /// sweep are discarded first, so repeated calls are idempotent.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.values[loss.0].scalar_value()?;
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..self.ops.len()).rev() {
            let out = self.ops[idx].out;
            let go = match &self.grads[out] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_op(idx, &go)?;
        }
        Ok(())
    }

    fn acc(&mut self, node: usize, f: impl FnOnce(&mut [T])) {
        if !self.requires[node] {
            return;
        }
        let len = self.values[node].numel();
        let g = self.grads[node].get_or_insert_with(|| vec![T::zero(); len]);
        f(g);
    }

    fn backprop_op(&mut self, idx: usize, go: &[T]) -> Result<()> {
        // Ops are moved out and back to satisfy the borrow checker without
        // cloning saved buffers.
        let out = self.ops[idx].out;
        match &self.ops[idx].op {
            &Op::Matmul { a, b, ta, tb } => {
                let (ash, bsh) = (self.values[a].dims2()?, self.values[b].dims2()?);
                let osh = self.values[out].dims2()?;
                if self.requires[a] {
                    let mut da = vec![T::zero(); ash.0 * ash.1];
                    if !ta {
                        matmul_acc(go, osh, false, self.values[b].data(), bsh, !tb, &mut da);
                    } else {
                        matmul_acc(self.values[b].data(), bsh, tb, go, osh, true, &mut da);
                    }
                    self.acc(a, |g| acc_slice(g, &da));
                }
                if self.requires[b] {
                    let mut db = vec![T::zero(); bsh.0 * bsh.1];
                    if !tb {
                        matmul_acc(self.values[a].data(), ash, !ta, go, osh, false, &mut db);
                    } else {
                        matmul_acc(go, osh, true, self.values[a].data(), ash, ta, &mut db);
                    }
                    self.acc(b, |g| acc_slice(g, &db));
                }
            }
            &Op::Add { a, b } => {
                self.acc(a, |g| acc_slice(g, go));
                self.acc(b, |g| acc_slice(g, go));
            }
            &Op::Sub { a, b } => {
                self.acc(a, |g| acc_slice(g, go));
                self.acc(b, |g| {
                    for (gi, o) in g.iter_mut().zip(go) {
                        *gi = *gi - *o;
                    }
                });
            }
            &Op::MulElem { a, b } => {
                let bv = self.values[b].data().to_vec();
                self.acc(a, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + go[i] * bv[i];
                    }
                });
                let av = self.values[a].data().to_vec();
                self.acc(b, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + go[i] * av[i];
                    }
                });
            }
            &Op::Scale { x, k } => {
                self.acc(x, |g| {
                    for (gi, o) in g.iter_mut().zip(go) {
                        *gi = *gi + k * *o;
                    }
                });
            }
            &Op::AddRowBroadcast { mat, row } => {
                let (r, c) = self.values[mat].dims2()?;
                self.acc(mat, |g| acc_slice(g, go));
                self.acc(row, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] = g[j] + go[i * c + j];
                        }
                    }
                });
            }
            &Op::SumAll { x } => {
                let s = go[0];
                self.acc(x, |g| {
                    for gi in g {
                        *gi = *gi + s;
                    }
                });
            }
            &Op::DivByScalarVar { x, s } => {
                let sv = self.values[s].scalar_value()?;
                self.acc(x, |g| {
                    for (gi, o) in g.iter_mut().zip(go) {
                        *gi = *gi + *o / sv;
                    }
                });
                if self.requires[s] {
                    let mut ds = T::zero();
                    for (o, ov) in go.iter().zip(self.values[out].data()) {
                        ds = ds - *o * *ov;
                    }
                    ds = ds / sv;
                    self.acc(s, |g| g[0] = g[0] + ds);
                }
            }
            &Op::SoftmaxLastDim { x, temp } => {
                let (r, c) = self.values[out].dims2()?;
                let p = self.values[out].data().to_vec();
                self.acc(x, |g| {
                    for i in 0..r {
                        let mut s = T::zero();
                        for j in 0..c {
                            s = s + go[i * c + j] * p[i * c + j];
                        }
                        for j in 0..c {
                            let d = p[i * c + j] * (go[i * c + j] - s) / temp;
                            g[i * c + j] = g[i * c + j] + d;
                        }
                    }
                });
            }
            &Op::CrossEntropyRows { p, y } => {
                let (r, _) = self.values[p].dims2()?;
                let floor = lit::<T>(CE_FLOOR);
                let scale = go[0] / lit::<T>(r as f64);
                let yv = self.values[y].data().to_vec();
                let pv = self.values[p].data().to_vec();
                self.acc(p, |g| {
                    for i in 0..g.len() {
                        if yv[i] != T::zero() && pv[i] > floor {
                            g[i] = g[i] - scale * yv[i] / pv[i];
                        }
                    }
                });
                self.acc(y, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] - scale * pv[i].max(floor).ln();
                    }
                });
            }
            Op::GatherRows { x, ids } => {
                let x = *x;
                let ids = ids.clone();
                let (_, c) = self.values[x].dims2()?;
                self.acc(x, |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            g[id * c + j] = g[id * c + j] + go[i * c + j];
                        }
                    }
                });
            }
            &Op::StraightThrough { x } => {
                self.acc(x, |g| acc_slice(g, go));
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = self.values[p].numel();
                    self.acc(p, |g| acc_slice(g, &go[offset..offset + n]));
                    offset += n;
                }
            }
            &Op::SliceRows { x, start } => {
                let (_, c) = self.values[x].dims2()?;
                let begin = start * c;
                self.acc(x, |g| acc_slice(&mut g[begin..begin + go.len()], go));
            }
            Op::ReplaceRows { x, rows } => {
                let x = *x;
                let replaced: Vec<usize> = rows.iter().map(|(i, _)| *i).collect();
                let (_, c) = self.values[x].dims2()?;
                self.acc(x, |g| {
                    acc_slice(g, go);
                    // Contributions routed into replaced rows belong to the
                    // constant replacement, not to x: undo them.
                    for idx in replaced {
                        for j in 0..c {
                            g[idx * c + j] = g[idx * c + j] - go[idx * c + j];
                        }
                    }
                });
            }
            &Op::LayerNormRows { x, gain, bias } => {
                let (r, c) = self.values[x].dims2()?;
                let cf = lit::<T>(c as f64);
                let gainv = self.values[gain].data().to_vec();
                let xv = self.values[x].data().to_vec();
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let (mean, rstd) = row_moments(row);
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = go[i * c + j] * gainv[j];
                        dgain[j] = dgain[j] + go[i * c + j] * xhat;
                        dbias[j] = dbias[j] + go[i * c + j];
                        mean_dxhat = mean_dxhat + dxhat;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat / cf;
                    mean_dxhat_xhat = mean_dxhat_xhat / cf;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = go[i * c + j] * gainv[j];
                        dx[i * c + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.acc(x, |g| acc_slice(g, &dx));
                self.acc(gain, |g| acc_slice(g, &dgain));
                self.acc(bias, |g| acc_slice(g, &dbias));
            }
            &Op::Gelu { x } => {
                let xv = self.values[x].data().to_vec();
                self.acc(x, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + go[i] * gelu_grad(xv[i]);
                    }
                });
            }
            &Op::Exp { x } => {
                // d(e^x) = e^x, already computed as the output value.
                let ov = self.values[out].data().to_vec();
                self.acc(x, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + go[i] * ov[i];
                    }
                });
            }
            Op::Attention { q, k, v, heads, mask, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (sq, c) = self.values[q].dims2()?;
                let (sk, _) = self.values[k].dims2()?;
                let dh = c / heads;
                let scale = lit::<T>(1.0 / (dh as f64).sqrt());
                let mask = mask.clone();
                let probs = probs.clone();
                let qd = self.values[q].data().to_vec();
                let kd = self.values[k].data().to_vec();
                let vd = self.values[v].data().to_vec();
                let mut dq = vec![T::zero(); sq * c];
                let mut dk = vec![T::zero(); sk * c];
                let mut dv = vec![T::zero(); sk * c];
                let mut dp = vec![T::zero(); sk];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..sq {
                        let dout = &go[i * c + off..i * c + off + dh];
                        let prow = &probs[(h * sq + i) * sk..(h * sq + i) * sk + sk];
                        let mut s = T::zero();
                        for j in 0..sk {
                            if mask.as_ref().is_some_and(|m| m[j]) {
                                dp[j] = T::zero();
                                continue;
                            }
                            let vrow = &vd[j * c + off..j * c + off + dh];
                            dp[j] = crate::tensor::dot(dout, vrow);
                            for d in 0..dh {
                                dv[j * c + off + d] = dv[j * c + off + d] + prow[j] * dout[d];
                            }
                            s = s + dp[j] * prow[j];
                        }
                        for j in 0..sk {
                            let dl = prow[j] * (dp[j] - s) * scale;
                            if dl == T::zero() {
                                continue;
                            }
                            let krow = &kd[j * c + off..j * c + off + dh];
                            let qrow = &qd[i * c + off..i * c + off + dh];
                            for d in 0..dh {
                                dq[i * c + off + d] = dq[i * c + off + d] + dl * krow[d];
                                dk[j * c + off + d] = dk[j * c + off + d] + dl * qrow[d];
                            }
                        }
                    }
                }
                self.acc(q, |g| acc_slice(g, &dq));
                self.acc(k, |g| acc_slice(g, &dk));
                self.acc(v, |g| acc_slice(g, &dv));
            }
            &Op::L2NormRows { x } => {
                let (r, c) = self.values[x].dims2()?;
                let xv = self.values[x].data().to_vec();
                let ov = self.values[out].data().to_vec();
                self.acc(x, |g| {
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let orow = &ov[i * c..(i + 1) * c];
                        let gorow = &go[i * c..(i + 1) * c];
                        let denom = crate::tensor::dot(row, row).sqrt().max(lit(1e-12));
                        let proj = crate::tensor::dot(orow, gorow);
                        for j in 0..c {
                            g[i * c + j] = g[i * c + j] + (gorow[j] - orow[j] * proj) / denom;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

// ---- kernels --------------------------------------------------------------

fn acc_slice<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for i in 0..dst.len() {
        dst[i] = dst[i] + src[i];
    }
}

/// `out += op_a(A) · op_b(B)`, row-major. Loop orders keep the inner stride
/// contiguous for the NN and NT cases, which dominate both passes.
fn matmul_acc<T: Real>(
    a: &[T],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[T],
    (br, bc): (usize, usize),
    tb: bool,
    out: &mut [T],
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let arow = &a[i * ac..(i + 1) * ac];
                let orow = &mut out[i * n..(i + 1) * n];
                for (kk, &aik) in arow.iter().enumerate() {
                    let brow = &b[kk * bc..(kk + 1) * bc];
                    for j in 0..n {
                        orow[j] = orow[j] + aik * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * ac..(i + 1) * ac];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    let brow = &b[j * bc..(j + 1) * bc];
                    orow[j] = orow[j] + crate::tensor::dot(arow, brow);
                }
            }
        }
        (true, false) => {
            for kk in 0..k {
                let arow = &a[kk * ac..(kk + 1) * ac];
                let brow = &b[kk * bc..(kk + 1) * bc];
                for i in 0..m {
                    let aki = arow[i];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] = orow[j] + aki * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::zero();
                    let brow = &b[j * bc..(j + 1) * bc];
                    for kk in 0..k {
                        s = s + a[kk * ac + i] * brow[kk];
                    }
                    out[i * n + j] = out[i * n + j] + s;
                }
            }
        }
    }
}

fn softmax_row<T: Real>(logits: &[T], temp: T, out: &mut [T]) {
    let mut maxl = T::neg_infinity();
    for &l in logits {
        maxl = maxl.max(l / temp);
    }
    let mut denom = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l / temp - maxl).exp();
        *o = e;
        denom = denom + e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}

/// Population mean and reciprocal standard deviation of a row.
fn row_moments<T: Real>(row: &[T]) -> (T, T) {
    let n = lit::<T>(row.len() as f64);
    let mut mean = T::zero();
    for &x in row {
        mean = mean + x;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &x in row {
        var = var + (x - mean) * (x - mean);
    }
    var = var / n;
    let rstd = (var + lit(LN_EPS)).sqrt().recip();
    (mean, rstd)
}

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = lit::<T>(0.7978845608028654); // sqrt(2/pi)
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = lit::<T>(0.7978845608028654);
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
