//! Pretraining objectives: momentum-distilled image-text contrast, the
//! fine-grained matching loss over five pair types, and masked language
//! modeling, plus their unweighted sum.
//!
//! Loss values live on the [`Tape`]; everything that must not receive
//! gradients — momentum features, queue contents, distillation targets —
//! enters as precomputed constants.

use crate::data::Vocab;
use crate::encoder::LinearV;
use crate::error::{Error, Result};
use crate::scalar::{as_f64, lit, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const MLM_MASK_PROB: f64 = 0.15;
pub const TEMP_FLOOR: f64 = 1e-3;

// ---- distillation targets ---------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DistillTargets<T> {
    pub y_i2t: Tensor<T>,
    pub y_t2i: Tensor<T>,
}

/// `y = (1−α)·one_hot + α·momentum_probs`, rowwise.
pub fn distill_targets<T: Real>(
    one_hot: &Tensor<T>,
    momentum_probs: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("distillation weight {alpha} outside [0, 1]")));
    }
    let (b, k) = one_hot.dims2()?;
    if momentum_probs.shape() != [b, k] {
        return Err(Error::Shape {
            op: "distill_targets",
            lhs: one_hot.shape().to_vec(),
            rhs: momentum_probs.shape().to_vec(),
        });
    }
    for i in 0..b {
        let sum: f64 = momentum_probs.row(i).iter().map(|x| as_f64(*x)).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "momentum probability row {i} sums to {sum}, not 1"
            )));
        }
    }
    let a = lit::<T>(alpha);
    let one_m = T::one() - a;
    let data = one_hot
        .data()
        .iter()
        .zip(momentum_probs.data())
        .map(|(h, m)| one_m * *h + a * *m)
        .collect();
    Tensor::from_vec(one_hot.shape().to_vec(), data)
}

// ---- ITC --------------------------------------------------------------------

/// Row-stacks `batch` on top of the optional queue contents.
fn stack_candidates<T: Real>(batch: &Tensor<T>, queue: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (b, d) = batch.dims2()?;
    match queue {
        None => Ok(batch.clone()),
        Some(q) => {
            let (qn, qd) = q.dims2()?;
            if qd != d {
                return Err(Error::Shape {
                    op: "itc_candidates",
                    lhs: vec![b, d],
                    rhs: vec![qn, qd],
                });
            }
            let mut data = Vec::with_capacity((b + qn) * d);
            data.extend_from_slice(batch.data());
            data.extend_from_slice(q.data());
            Tensor::from_vec(vec![b + qn, d], data)
        }
    }
}

/// Values-domain row softmax of `x / temp` (used for momentum targets, which
/// never receive gradients).
fn softmax_rows_values<T: Real>(x: &Tensor<T>, temp: T) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let mx = row.iter().cloned().fold(row[0], |a, b| if b > a { b } else { a });
        let mut z = T::zero();
        let dst = out.row_mut(i);
        for (d, s) in dst.iter_mut().zip(row) {
            *d = ((*s - mx) / temp).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / z;
        }
    }
    Ok(out)
}

fn one_hot_rows<T: Real>(rows: usize, cols: usize, hot: impl Fn(usize) -> usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        t.row_mut(i)[hot(i)] = T::one();
    }
    t
}

/// Everything on the teacher side of the contrastive loss, computed in the
/// values domain and frozen: candidate features (momentum batch rows first,
/// queue rows behind) and the distillation targets. Recording these before a
/// step keeps the replayed loss a smooth function of the parameters — the
/// targets are detached pseudo-labels and must not move when τ does.
#[derive(Debug, Clone, PartialEq)]
pub struct ItcTargets<T> {
    pub cand_v: Tensor<T>,
    pub cand_t: Tensor<T>,
    pub y: DistillTargets<T>,
}

pub fn prepare_itc_targets<T: Real>(
    momentum_v: &Tensor<T>,
    momentum_t: &Tensor<T>,
    queue_v: Option<&Tensor<T>>,
    queue_t: Option<&Tensor<T>>,
    temp: T,
    alpha: f64,
) -> Result<ItcTargets<T>> {
    let (b, d) = momentum_v.dims2()?;
    if b == 0 {
        return Err(Error::State("itc targets for an empty batch".into()));
    }
    if momentum_t.shape() != [b, d] {
        return Err(Error::shape1("prepare_itc_targets", &[b, d]));
    }
    if temp <= T::zero() {
        return Err(Error::Domain(format!("temperature {temp} must be positive")));
    }
    let cand_t = stack_candidates(momentum_t, queue_t)?;
    let cand_v = stack_candidates(momentum_v, queue_v)?;
    let k = cand_t.dims2()?.0;
    let sim_m_i2t = matmul_nt_values(momentum_v, &cand_t)?;
    let sim_m_t2i = matmul_nt_values(momentum_t, &cand_v)?;
    let p_m_i2t = softmax_rows_values(&sim_m_i2t, temp)?;
    let p_m_t2i = softmax_rows_values(&sim_m_t2i, temp)?;
    let hot = one_hot_rows::<T>(b, k, |i| i);
    let y = DistillTargets {
        y_i2t: distill_targets(&hot, &p_m_i2t, alpha)?,
        y_t2i: distill_targets(&hot, &p_m_t2i, alpha)?,
    };
    Ok(ItcTargets { cand_v, cand_t, y })
}

/// Student side of the contrastive loss against frozen targets. Gradients
/// flow through the online features and the temperature only.
pub fn itc_loss_from_targets<T: Real>(
    tape: &mut Tape<T>,
    online_v: Var,
    online_t: Var,
    targets: &ItcTargets<T>,
    temp: Var,
) -> Result<Var> {
    let (b, d) = tape.value(online_v).dims2()?;
    if b == 0 {
        return Err(Error::State("itc_loss on an empty batch".into()));
    }
    if tape.value(online_t).shape() != [b, d] {
        return Err(Error::shape1("itc_loss", &[b, d]));
    }
    let (k, kd) = targets.cand_t.dims2()?;
    if kd != d || targets.cand_v.shape() != [k, d] || targets.y.y_i2t.shape() != [b, k] {
        return Err(Error::shape1("itc_loss targets", &[k, d]));
    }
    let temp_val = tape.value(temp).scalar_value()?;
    if temp_val <= T::zero() {
        return Err(Error::Domain(format!("temperature {temp_val} must be positive")));
    }
    let cand_t_var = tape.constant(targets.cand_t.clone());
    let cand_v_var = tape.constant(targets.cand_v.clone());
    let y_i2t = tape.constant(targets.y.y_i2t.clone());
    let y_t2i = tape.constant(targets.y.y_t2i.clone());
    let s_i2t = tape.matmul_nt(online_v, cand_t_var)?;
    let s_t2i = tape.matmul_nt(online_t, cand_v_var)?;
    let s_i2t = tape.div_by_scalar_var(s_i2t, temp)?;
    let s_t2i = tape.div_by_scalar_var(s_t2i, temp)?;
    let p_i2t = tape.softmax_rows(s_i2t, T::one())?;
    let p_t2i = tape.softmax_rows(s_t2i, T::one())?;
    let ce_i2t = tape.cross_entropy_rows(p_i2t, y_i2t)?;
    let ce_t2i = tape.cross_entropy_rows(p_t2i, y_t2i)?;
    let sum = tape.add(ce_i2t, ce_t2i)?;
    tape.scale(sum, lit::<T>(0.5))
}

/// Image-text contrastive loss with momentum distillation: prepares targets
/// from the current temperature value, then scores the online features
/// against them.
#[allow(clippy::too_many_arguments)]
pub fn itc_loss<T: Real>(
    tape: &mut Tape<T>,
    online_v: Var,
    online_t: Var,
    momentum_v: &Tensor<T>,
    momentum_t: &Tensor<T>,
    queue_v: Option<&Tensor<T>>,
    queue_t: Option<&Tensor<T>>,
    temp: Var,
    alpha: f64,
) -> Result<(Var, DistillTargets<T>)> {
    let (b, d) = tape.value(online_v).dims2()?;
    if momentum_v.shape() != [b, d] || momentum_t.shape() != [b, d] {
        return Err(Error::shape1("itc_loss", &[b, d]));
    }
    let temp_val = tape.value(temp).scalar_value()?;
    let targets =
        prepare_itc_targets(momentum_v, momentum_t, queue_v, queue_t, temp_val, alpha)?;
    let loss = itc_loss_from_targets(tape, online_v, online_t, &targets, temp)?;
    Ok((loss, targets.y))
}

/// Values-domain `a · bᵀ`.
fn matmul_nt_values<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    if ac != bc {
        return Err(Error::Shape { op: "matmul_nt_values", lhs: vec![ar, ac], rhs: vec![br, bc] });
    }
    let mut out = Tensor::zeros(&[ar, br]);
    for i in 0..ar {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = crate::tensor::dot(arow, b.row(j));
        }
    }
    Ok(out)
}

// ---- in-batch hard negatives -------------------------------------------------

/// Hard negative ids from a text-row × image-column similarity matrix:
/// for each text `i` the non-matching image `argmax_{j≠i} s[i][j]`, and for
/// each image `j` the non-matching text `argmax_{i≠j} s[i][j]`. Ties break
/// toward the lower index.
pub fn select_inbatch_negatives<T: Real>(s: &Tensor<T>) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, cols) = s.dims2()?;
    if b != cols {
        return Err(Error::Shape { op: "select_inbatch_negatives", lhs: vec![b], rhs: vec![cols] });
    }
    if b < 2 {
        return Err(Error::Contract(format!(
            "in-batch negatives need a batch of ≥ 2 pairs, got {b}"
        )));
    }
    let argmax_excl = |values: &dyn Fn(usize) -> T, skip: usize| -> usize {
        let mut best = usize::MAX;
        let mut best_v = T::neg_infinity();
        for idx in 0..b {
            if idx == skip {
                continue;
            }
            let v = values(idx);
            if best == usize::MAX || v > best_v {
                best = idx;
                best_v = v;
            }
        }
        best
    };
    let neg_image_for_text: Vec<usize> =
        (0..b).map(|i| argmax_excl(&|j| s.row(i)[j], i)).collect();
    let neg_text_for_image: Vec<usize> =
        (0..b).map(|j| argmax_excl(&|i| s.row(i)[j], j)).collect();
    Ok((neg_image_for_text, neg_text_for_image))
}

// ---- FGITM -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    /// The matched pair (I, T): label 1.
    Pos,
    /// (I, T^neg): in-batch hardest negative caption.
    TNeg,
    /// (I, T^fg): rule-perturbed caption.
    TFg,
    /// (I^neg, T): in-batch hardest negative image.
    INeg,
    /// (I^fg, T): token-replaced negative image.
    IFg,
}

pub const STAGE1_KINDS: [PairKind; 3] = [PairKind::Pos, PairKind::TNeg, PairKind::INeg];
pub const STAGE2_KINDS: [PairKind; 5] =
    [PairKind::Pos, PairKind::TNeg, PairKind::TFg, PairKind::INeg, PairKind::IFg];

/// Each group must hold either the three classic pairs or all five
/// fine-grained pairs, with exactly one positive.
pub fn validate_itm_groups(groups: &[Vec<PairKind>]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::Contract("fgitm_loss needs at least one group".into()));
    }
    for (gi, g) in groups.iter().enumerate() {
        let want: &[PairKind] = match g.len() {
            3 => &STAGE1_KINDS,
            5 => &STAGE2_KINDS,
            n => {
                return Err(Error::Contract(format!(
                    "group {gi} has {n} pairs, expected 3 or 5"
                )))
            }
        };
        for kind in want {
            if !g.contains(kind) {
                return Err(Error::Contract(format!("group {gi} is missing {kind:?}")));
            }
        }
        let positives = g.iter().filter(|k| **k == PairKind::Pos).count();
        if positives != 1 {
            return Err(Error::Contract(format!("group {gi} has {positives} positives")));
        }
    }
    Ok(())
}

/// Binary cross-entropy of the 2-way head over all scored pairs, uniform
/// mean. `joint_cls` holds one fused CLS row per pair, groups flattened in
/// order.
pub fn fgitm_loss<T: Real>(
    tape: &mut Tape<T>,
    itm_head: LinearV,
    joint_cls: Var,
    groups: &[Vec<PairKind>],
) -> Result<Var> {
    validate_itm_groups(groups)?;
    let total: usize = groups.iter().map(Vec::len).sum();
    let (rows, _) = tape.value(joint_cls).dims2()?;
    if rows != total {
        return Err(Error::Shape { op: "fgitm_loss", lhs: vec![total], rhs: vec![rows] });
    }
    // Class 1 = match, class 0 = mismatch.
    let mut labels = Tensor::<T>::zeros(&[total, 2]);
    let mut r = 0;
    for g in groups {
        for kind in g {
            let col = if *kind == PairKind::Pos { 1 } else { 0 };
            labels.row_mut(r)[col] = T::one();
            r += 1;
        }
    }
    let y = tape.constant(labels);
    let logits = itm_head.forward(tape, joint_cls)?;
    let p = tape.softmax_rows(logits, T::one())?;
    tape.cross_entropy_rows(p, y)
}

// ---- MLM ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MlmOutcome {
    /// Replaced with the MASK token (80%).
    Mask,
    /// Replaced with this uniformly drawn word token (10%).
    Random(u16),
    /// Left unchanged (10%).
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmMask {
    /// Token sequence after masking.
    pub input: Vec<u16>,
    /// `(caption position, true id, what happened)` per selected position.
    pub targets: Vec<(usize, u16, MlmOutcome)>,
}

/// Independently selects each non-special token with probability 15%, then
/// splits 80/10/10 into MASK / random word / unchanged. Random replacements
/// draw from word ids only, so the padding mask cannot be corrupted.
pub fn mlm_mask<R: Rng>(ids: &[u16], vocab: &Vocab, rng: &mut R) -> MlmMask {
    use crate::data::{FIRST_WORD, MASK};
    let mut input = ids.to_vec();
    let mut targets = Vec::new();
    for (pos, &id) in ids.iter().enumerate() {
        if vocab.is_special(id as usize) {
            continue;
        }
        if rng.gen::<f64>() >= MLM_MASK_PROB {
            continue;
        }
        let split = rng.gen::<f64>();
        let outcome = if split < 0.8 {
            input[pos] = MASK as u16;
            MlmOutcome::Mask
        } else if split < 0.9 {
            let w = rng.gen_range(FIRST_WORD..vocab.len()) as u16;
            input[pos] = w;
            MlmOutcome::Random(w)
        } else {
            MlmOutcome::Keep
        };
        targets.push((pos, id, outcome));
    }
    MlmMask { input, targets }
}

/// Mean cross-entropy of the vocabulary head at the masked positions.
/// `fusion_seq` is the fused `(1 + max_text_len) × c` sequence; caption
/// position `p` lives at row `1 + p`. Returns an exact 0 when nothing was
/// masked.
pub fn mlm_loss<T: Real>(
    tape: &mut Tape<T>,
    mlm_head: LinearV,
    fusion_seq: Var,
    targets: &[(usize, u16, MlmOutcome)],
    vocab_size: usize,
) -> Result<Var> {
    if targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let (rows, _) = tape.value(fusion_seq).dims2()?;
    let mut gather = Vec::with_capacity(targets.len());
    for &(pos, id, _) in targets {
        if 1 + pos >= rows {
            return Err(Error::Index(format!(
                "masked position {pos} outside fused sequence of {rows} rows"
            )));
        }
        if (id as usize) >= vocab_size {
            return Err(Error::Vocab(format!("target id {id} outside vocab {vocab_size}")));
        }
        gather.push(1 + pos);
    }
    let states = tape.gather_rows(fusion_seq, &gather)?;
    let logits = mlm_head.forward(tape, states)?;
    let p = tape.softmax_rows(logits, T::one())?;
    let y = one_hot_rows::<T>(targets.len(), vocab_size, |i| targets[i].1 as usize);
    let y = tape.constant(y);
    tape.cross_entropy_rows(p, y)
}

// ---- total -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub itc: f64,
    pub mlm: f64,
    pub itm: f64,
    pub total: f64,
}

/// Unweighted sum `L_itc + L_mlm + L_itm`; rejects non-finite parts by name.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    itc: Var,
    mlm: Var,
    itm: Var,
) -> Result<(Var, LossBreakdown)> {
    let mut parts = [0.0f64; 3];
    for (slot, (name, var)) in parts
        .iter_mut()
        .zip([("L_itc", itc), ("L_mlm", mlm), ("L_itm", itm)])
    {
        let v = as_f64(tape.value(var).scalar_value()?);
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        *slot = v;
    }
    let s = tape.add(itc, mlm)?;
    let total = tape.add(s, itm)?;
    let breakdown = LossBreakdown {
        itc: parts[0],
        mlm: parts[1],
        itm: parts[2],
        total: as_f64(tape.value(total).scalar_value()?),
    };
    Ok((total, breakdown))
}
