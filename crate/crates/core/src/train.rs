//! Two-stage training: step planning, loss assembly, the decoupled-decay
//! adaptive optimizer, learning-rate / distillation schedules, and the loop.
//!
//! Every discrete decision of a step (quantization assignments, token
//! replacements, caption perturbation choice, masking pattern, in-batch
//! negative ids, momentum features, queue snapshots) is recorded into a
//! [`StepPlan`] before the differentiable graph is built. Replaying a frozen
//! plan makes the step loss a smooth function of the parameters, which is
//! what allows finite-difference validation of the full gradient.

use crate::codebook::Codebook;
use crate::data::{TrainRecord, Vocab};
use crate::error::{Error, Result};
use crate::losses::{
    fgitm_loss, itc_loss_from_targets, mlm_loss, mlm_mask, prepare_itc_targets,
    select_inbatch_negatives, total_loss, ItcTargets, LossBreakdown, MlmMask, PairKind,
    STAGE1_KINDS, STAGE2_KINDS, TEMP_FLOOR,
};
use crate::model::{EncodedTextV, Model, ModelConfig, ModelV};
use crate::momentum::{FeatureQueue, MomentumPair};
use crate::negatives::{plan_nva, saliency, NvaConfig, NvaPlan};
use crate::params::Parameterized;
use crate::scalar::{as_f64, lit, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Global-norm gradient clip guarding the tiny-model regime.
pub const GRAD_CLIP_NORM: f64 = 1.0;

// RNG stream namespaces under the master seed. Dataset generation uses
// streams 0..n (one per record), so training streams live in high ranges.
pub(crate) const STREAM_MODEL_INIT: u64 = 0xD000_0000_0000_0000;
pub(crate) const STREAM_BOOK_INIT: u64 = 0xD000_0000_0000_0001;
pub(crate) const STREAM_QUEUE_V_INIT: u64 = 0xD000_0000_0000_0002;
pub(crate) const STREAM_QUEUE_T_INIT: u64 = 0xD000_0000_0000_0003;
pub(crate) const STREAM_EPOCH_BASE: u64 = 0xE000_0000_0000_0000;
pub(crate) const STREAM_STEP_BASE: u64 = 0xF000_0000_0000_0000;

/// An independent deterministic stream under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---- configuration -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Epochs with classic ITM pairs only.
    pub stage1_epochs: usize,
    /// Epochs with the fine-grained negative pairs added.
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    /// Momentum-model EMA coefficient μ.
    pub mu: f64,
    /// Peak distillation weight α.
    pub alpha_max: f64,
    /// Saliency blend λ.
    pub lambda: f64,
    /// Neighbor count for token replacement.
    pub k: usize,
    /// Fraction of local tokens replaced in a negative image.
    pub ratio: f64,
    /// Codebook EMA coefficient γ.
    pub gamma: f64,
    /// Feature queue capacity Q (0 disables the queues).
    pub queue_size: usize,
    /// Codebook entry count m.
    pub codebook_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            stage1_epochs: 15,
            stage2_epochs: 5,
            batch_size: 16,
            base_lr: 1e-4,
            final_lr: 1e-5,
            warmup_iters: 100,
            weight_decay: 0.02,
            mu: 0.995,
            alpha_max: 0.4,
            lambda: 0.5,
            k: 3,
            ratio: 0.3,
            gamma: 0.99,
            queue_size: 512,
            codebook_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.stage1_epochs + self.stage2_epochs == 0 {
            return Err(Error::Config("at least one training epoch required".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} too small: in-batch negatives need ≥ 2 pairs",
                self.batch_size
            )));
        }
        if !(self.base_lr > 0.0 && self.final_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.final_lr > self.base_lr {
            return Err(Error::Config(format!(
                "final lr {} exceeds base lr {}",
                self.final_lr, self.base_lr
            )));
        }
        if self.warmup_iters == 0 {
            return Err(Error::Config("warmup iters must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("momentum μ {} outside [0, 1]", self.mu)));
        }
        if !(0.0..=1.0).contains(&self.alpha_max) {
            return Err(Error::Config(format!("α_max {} outside [0, 1]", self.alpha_max)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("λ {} outside [0, 1]", self.lambda)));
        }
        if self.k == 0 {
            return Err(Error::Config("neighbor count k must be positive".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("replacement ratio {} outside (0, 1]", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("codebook γ {} outside [0, 1]", self.gamma)));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        Ok(())
    }

    pub fn nva(&self) -> NvaConfig {
        NvaConfig { lambda: self.lambda, ratio: self.ratio, k: self.k, ..NvaConfig::default() }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }
}

// ---- schedules ----------------------------------------------------------------

/// Step-indexed learning-rate and distillation-weight schedules, resolved
/// against a concrete dataset size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub warmup: u64,
    pub stage1_steps: u64,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, num_records: usize) -> Result<Schedule> {
        let steps_per_epoch = (num_records / cfg.batch_size) as u64;
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "dataset of {num_records} records yields no full batch of {}",
                cfg.batch_size
            )));
        }
        Ok(Schedule {
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.total_epochs() as u64,
            warmup: cfg.warmup_iters as u64,
            stage1_steps: steps_per_epoch * cfg.stage1_epochs as u64,
        })
    }

    /// Linear warmup from 0 to base over `warmup` steps, then cosine decay
    /// reaching `final_lr` at the last step.
    pub fn lr_at(&self, step: u64, cfg: &TrainConfig) -> f64 {
        if step < self.warmup {
            return cfg.base_lr * step as f64 / self.warmup as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        if last <= self.warmup {
            return if step >= last { cfg.final_lr } else { cfg.base_lr };
        }
        let prog = ((step - self.warmup) as f64 / (last - self.warmup) as f64).min(1.0);
        cfg.final_lr
            + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * prog).cos())
    }

    /// Linear 0 → α_max across the first epoch, constant afterwards.
    pub fn alpha_at(&self, step: u64, cfg: &TrainConfig) -> f64 {
        cfg.alpha_max * (step as f64 / self.steps_per_epoch as f64).min(1.0)
    }

    pub fn stage_at(&self, step: u64) -> u8 {
        if step < self.stage1_steps {
            1
        } else {
            2
        }
    }
}

// ---- optimizer ------------------------------------------------------------------

/// Adaptive moments with decoupled weight decay:
/// θ ← θ − lr·( m̂ / (√v̂ + ε) + wd·θ ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW<T> {
    pub names: Vec<String>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new<M: Parameterized<T>>(model: &M, weight_decay: f64) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        model.visit(&mut |name, t| {
            names.push(name.to_string());
            m.push(Tensor::zeros(t.shape()));
            v.push(Tensor::zeros(t.shape()));
        });
        AdamW { names, m, v, t: 0, weight_decay }
    }

    /// One optimizer step. `grads` must align with the model's visit order.
    /// Rejects the update if any resulting parameter is non-finite.
    pub fn step<M: Parameterized<T>>(
        &mut self,
        model: &mut M,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.names.len() {
            return Err(Error::State(format!(
                "optimizer has {} slots but got {} gradients",
                self.names.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = lit::<T>(ADAM_BETA1);
        let b2 = lit::<T>(ADAM_BETA2);
        let bc1 = lit::<T>(1.0 - ADAM_BETA1.powi(self.t as i32));
        let bc2 = lit::<T>(1.0 - ADAM_BETA2.powi(self.t as i32));
        let eps = lit::<T>(ADAM_EPS);
        let lr_t = lit::<T>(lr);
        let wd = lit::<T>(lr * self.weight_decay);
        let mut idx = 0;
        let mut bad: Option<String> = None;
        model.visit_mut(&mut |name, theta| {
            if bad.is_some() {
                idx += 1;
                return;
            }
            if idx >= self.names.len()
                || name != self.names[idx]
                || grads[idx].shape() != theta.shape()
            {
                bad = Some(format!("optimizer state drift at parameter {name}"));
                idx += 1;
                return;
            }
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let g = grads[idx].data();
            for (i, th) in theta.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *th = *th - lr_t * (mhat / (vhat.sqrt() + eps)) - wd * *th;
                if !th.is_finite() {
                    bad = Some(format!("non-finite parameter after update: {name}"));
                    break;
                }
            }
            idx += 1;
        });
        match bad {
            Some(msg) if msg.starts_with("non-finite") => Err(Error::NonFinite(msg)),
            Some(msg) => Err(Error::State(msg)),
            None => Ok(()),
        }
    }
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| as_f64(x) * as_f64(x))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = lit::<T>(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

// ---- step plan -------------------------------------------------------------------

/// How the straight-through bottleneck enters the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildMode {
    /// Exact quantized forward values (codebook entries, bit-exact).
    Train,
    /// `locals + frozen(v̂₀ − v₀)`: same gradient as the straight-through op
    /// and a smooth forward, so central finite differences see the gradient
    /// that training actually applies.
    FdCheck,
}

#[derive(Debug, Clone)]
pub struct PairPlan<T> {
    /// Codebook assignment per local token.
    pub assignments: Vec<usize>,
    /// Pre-quantization locals recorded at plan time (feeds the codebook EMA
    /// and the FdCheck offset).
    pub locals: Tensor<T>,
    pub mlm: MlmMask,
    /// Token-replacement plan; present only in stage 2.
    pub nva: Option<NvaPlan>,
    /// Index into the record's perturbed-caption list; stage 2 only.
    pub perturbed: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct StepPlan<T> {
    pub step: u64,
    pub stage: u8,
    pub alpha: f64,
    /// Record indices of the batch, in order.
    pub batch: Vec<usize>,
    pub pairs: Vec<PairPlan<T>>,
    pub neg_image_for_text: Vec<usize>,
    pub neg_text_for_image: Vec<usize>,
    /// Momentum-model projections of this batch, `B × d` (these rows join
    /// the queues after the step).
    pub momentum_v: Tensor<T>,
    pub momentum_t: Tensor<T>,
    /// Frozen contrastive candidates and distillation targets.
    pub itc: ItcTargets<T>,
}

/// `B × d` unit-norm projection of a CLS vector in the values domain.
pub(crate) fn project_values<T: Real>(lin: &crate::encoder::Linear<T>, x: &[T]) -> Result<Vec<T>> {
    let (fan_in, fan_out) = lin.w.dims2()?;
    if x.len() != fan_in {
        return Err(Error::Shape { op: "project_values", lhs: vec![fan_in], rhs: vec![x.len()] });
    }
    let mut out = lin.b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let wrow = lin.w.row(i);
        for j in 0..fan_out {
            out[j] = out[j] + xi * wrow[j];
        }
    }
    crate::tensor::l2_normalize_slice(&mut out);
    Ok(out)
}

/// Rebuilds the patch matrix of a record, checking it against the model
/// geometry.
pub fn patches_tensor<T: Real>(rec: &TrainRecord, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let want = cfg.num_patches * cfg.patch_feat;
    if rec.image.len() != want {
        return Err(Error::Shape {
            op: "patches_tensor",
            lhs: vec![cfg.num_patches, cfg.patch_feat],
            rhs: vec![rec.image.len()],
        });
    }
    Tensor::from_vec(
        vec![cfg.num_patches, cfg.patch_feat],
        rec.image.iter().map(|&x| lit::<T>(x)).collect(),
    )
}

/// Freezes every discrete decision of one training step.
#[allow(clippy::too_many_arguments)]
pub fn record_plan<T: Real>(
    online: &Model<T>,
    momentum: &Model<T>,
    book: &Codebook<T>,
    queue_v: &FeatureQueue<T>,
    queue_t: &FeatureQueue<T>,
    records: &[TrainRecord],
    batch: &[usize],
    vocab: &Vocab,
    nva_cfg: &NvaConfig,
    stage: u8,
    alpha: f64,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepPlan<T>> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::State("empty batch".into()));
    }
    let d = online.cfg.joint_dim;
    let mut online_v = Tensor::<T>::zeros(&[b, d]);
    let mut online_t = Tensor::<T>::zeros(&[b, d]);
    let mut momentum_v = Tensor::<T>::zeros(&[b, d]);
    let mut momentum_t = Tensor::<T>::zeros(&[b, d]);
    let mut pairs = Vec::with_capacity(b);
    for (i, &ri) in batch.iter().enumerate() {
        let rec = records
            .get(ri)
            .ok_or_else(|| Error::Index(format!("batch references record {ri}")))?;
        let patches = patches_tensor::<T>(rec, &online.cfg)?;
        let (v_cls, locals) = online.encode_image_values(&patches)?;
        let (t_cls, _) = online.encode_text_values(&rec.caption)?;
        let assignments = book.quantize(&locals)?;
        online_v.row_mut(i).copy_from_slice(&project_values(&online.proj_v, &v_cls)?);
        online_t.row_mut(i).copy_from_slice(&project_values(&online.proj_t, &t_cls)?);

        let (mv_cls, _) = momentum.encode_image_values(&patches)?;
        let (mt_cls, _) = momentum.encode_text_values(&rec.caption)?;
        momentum_v.row_mut(i).copy_from_slice(&project_values(&momentum.proj_v, &mv_cls)?);
        momentum_t.row_mut(i).copy_from_slice(&project_values(&momentum.proj_t, &mt_cls)?);

        let (nva, perturbed) = if stage >= 2 {
            let quantized = book.lookup_rows(&assignments)?;
            let scores = saliency(&t_cls, &v_cls, &quantized, lit::<T>(nva_cfg.lambda))?;
            let plan = plan_nva(book, &assignments, &scores, nva_cfg, rng)?;
            if rec.perturbed.is_empty() {
                return Err(Error::Contract(format!(
                    "record {ri} has no perturbed captions for stage 2"
                )));
            }
            let pi = rng.gen_range(0..rec.perturbed.len());
            (Some(plan), Some(pi))
        } else {
            (None, None)
        };
        let mlm = mlm_mask(&rec.caption, vocab, rng);
        pairs.push(PairPlan { assignments, locals, mlm, nva, perturbed });
    }

    // s[i][j] = similarity of text i and image j; diagonal holds the pairs.
    let mut s = Tensor::<T>::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            s.row_mut(i)[j] = crate::tensor::dot(online_t.row(i), online_v.row(j));
        }
    }
    let (neg_image_for_text, neg_text_for_image) = select_inbatch_negatives(&s)?;

    let snap = |q: &FeatureQueue<T>| -> Result<Option<Tensor<T>>> {
        if q.capacity() == 0 {
            Ok(None)
        } else {
            q.as_tensor().map(Some)
        }
    };
    let (qv, qt) = (snap(queue_v)?, snap(queue_t)?);
    let itc = prepare_itc_targets(
        &momentum_v,
        &momentum_t,
        qv.as_ref(),
        qt.as_ref(),
        online.temp(),
        alpha,
    )?;
    Ok(StepPlan {
        step,
        stage,
        alpha,
        batch: batch.to_vec(),
        pairs,
        neg_image_for_text,
        neg_text_for_image,
        momentum_v,
        momentum_t,
        itc,
    })
}

// ---- loss assembly -------------------------------------------------------------

pub struct StepForward {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Mean over positions pooled across sequences: Σ nᵢ·meanᵢ / Σ nᵢ.
fn pooled_mean<T: Real>(tape: &mut Tape<T>, parts: &[(Var, usize)]) -> Result<Var> {
    let total: usize = parts.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mut acc: Option<Var> = None;
    for &(v, n) in parts {
        if n == 0 {
            continue;
        }
        let w = tape.scale(v, lit::<T>(n as f64 / total as f64))?;
        acc = Some(match acc {
            None => w,
            Some(a) => tape.add(a, w)?,
        });
    }
    Ok(acc.expect("total > 0 implies at least one part"))
}

/// Builds the full step loss for a frozen plan. In `Train` mode quantized
/// tokens carry bit-exact codebook values through the straight-through op;
/// in `FdCheck` mode they are expressed as `locals + frozen offset`, which
/// has the same gradient and a smooth forward.
pub fn build_step_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    book: &Codebook<T>,
    records: &[TrainRecord],
    plan: &StepPlan<T>,
    mode: BuildMode,
) -> Result<StepForward> {
    let b = plan.batch.len();
    if plan.pairs.len() != b || plan.neg_image_for_text.len() != b {
        return Err(Error::State("step plan is internally inconsistent".into()));
    }
    let mv = model.bind(tape, true);
    let cfg = &model.cfg;
    let posemb = tape.constant(model.vision.posemb().clone());

    let mut v_cls_rows = Vec::with_capacity(b);
    let mut t_cls_rows = Vec::with_capacity(b);
    let mut pos_tokens = Vec::with_capacity(b);
    let mut neg_tokens: Vec<Option<Var>> = Vec::with_capacity(b);
    let mut enc_pos: Vec<EncodedTextV> = Vec::with_capacity(b);
    let mut enc_fg: Vec<Option<EncodedTextV>> = Vec::with_capacity(b);

    for (i, &ri) in plan.batch.iter().enumerate() {
        let rec = &records[ri];
        let pp = &plan.pairs[i];
        let patches = patches_tensor::<T>(rec, cfg)?;
        let pvar = tape.constant(patches);
        let seq = mv.vision.forward(tape, pvar)?;
        let (cls_row, locals) = ModelV::split_cls(tape, seq)?;
        let quantized = book.lookup_rows(&pp.assignments)?;
        let q_var = match mode {
            BuildMode::Train => tape.straight_through(locals, quantized)?,
            BuildMode::FdCheck => {
                if pp.locals.shape() != quantized.shape() {
                    return Err(Error::shape1("fd offset", quantized.shape()));
                }
                let off: Vec<T> = quantized
                    .data()
                    .iter()
                    .zip(pp.locals.data())
                    .map(|(q, l)| *q - *l)
                    .collect();
                let offc =
                    tape.constant(Tensor::from_vec(quantized.shape().to_vec(), off)?);
                tape.add(locals, offc)?
            }
        };
        let img_locals =
            if cfg.fusion_posemb { tape.add(q_var, posemb)? } else { q_var };
        pos_tokens.push(tape.concat_rows(&[cls_row, img_locals])?);

        neg_tokens.push(match &pp.nva {
            None => None,
            Some(nva) => {
                let mut repl = Vec::with_capacity(nva.selected.len());
                for &p in &nva.selected {
                    let r = nva.replacement_for(pp.assignments[p]).ok_or_else(|| {
                        Error::Contract(format!("no replacement for entry {}", pp.assignments[p]))
                    })?;
                    repl.push((p, book.entry(r).to_vec()));
                }
                let nq = tape.replace_rows(q_var, repl)?;
                let nl = tape.add(nq, posemb)?;
                Some(tape.concat_rows(&[cls_row, nl])?)
            }
        });

        let enc = mv.text.forward(tape, &rec.caption)?;
        t_cls_rows.push(tape.slice_rows(enc.seq, 0, 1)?);
        v_cls_rows.push(cls_row);
        enc_fg.push(match pp.perturbed {
            None => None,
            Some(pi) => {
                let toks = &rec
                    .perturbed
                    .get(pi)
                    .ok_or_else(|| {
                        Error::Index(format!("perturbation {pi} out of range for record {ri}"))
                    })?
                    .tokens;
                Some(mv.text.forward(tape, toks)?)
            }
        });
        enc_pos.push(enc);
    }

    // ITC over the CLS projections.
    let v_stack = tape.concat_rows(&v_cls_rows)?;
    let t_stack = tape.concat_rows(&t_cls_rows)?;
    let online_v = mv.project(tape, mv.proj_v, v_stack)?;
    let online_t = mv.project(tape, mv.proj_t, t_stack)?;
    let l_itc = itc_loss_from_targets(tape, online_v, online_t, &plan.itc, mv.temp)?;

    // Matching loss over grouped pairs.
    let kinds: &[PairKind] =
        if plan.stage >= 2 { &STAGE2_KINDS } else { &STAGE1_KINDS };
    let mut joint_rows = Vec::with_capacity(b * kinds.len());
    let mut groups = Vec::with_capacity(b);
    for i in 0..b {
        for &kind in kinds {
            let (enc, img) = match kind {
                PairKind::Pos => (&enc_pos[i], pos_tokens[i]),
                PairKind::TNeg => (&enc_pos[plan.neg_text_for_image[i]], pos_tokens[i]),
                PairKind::TFg => (
                    enc_fg[i].as_ref().ok_or_else(|| {
                        Error::State("stage-2 plan without perturbed caption".into())
                    })?,
                    pos_tokens[i],
                ),
                PairKind::INeg => (&enc_pos[i], pos_tokens[plan.neg_image_for_text[i]]),
                PairKind::IFg => (
                    &enc_pos[i],
                    neg_tokens[i].ok_or_else(|| {
                        Error::State("stage-2 plan without negative image".into())
                    })?,
                ),
            };
            let fused = mv.fusion.forward(tape, enc.seq, Some(img), &enc.mask)?;
            joint_rows.push(tape.slice_rows(fused, 0, 1)?);
        }
        groups.push(kinds.to_vec());
    }
    let joint = tape.concat_rows(&joint_rows)?;
    let l_itm = fgitm_loss(tape, mv.itm_head, joint, &groups)?;

    // MLM on the masked positive caption, conditioned on the positive image.
    let mut mlm_parts = Vec::with_capacity(b);
    for i in 0..b {
        let m = &plan.pairs[i].mlm;
        if m.targets.is_empty() {
            continue;
        }
        let encm = mv.text.forward(tape, &m.input)?;
        let fused = mv.fusion.forward(tape, encm.seq, Some(pos_tokens[i]), &encm.mask)?;
        let li = mlm_loss(tape, mv.mlm_head, fused, &m.targets, cfg.vocab_size)?;
        mlm_parts.push((li, m.targets.len()));
    }
    let l_mlm = pooled_mean(tape, &mlm_parts)?;

    let (total, breakdown) = total_loss(tape, l_itc, l_mlm, l_itm)?;
    Ok(StepForward { total, breakdown })
}

// ---- metrics --------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub alpha: f64,
    pub loss: LossBreakdown,
    pub temp: f64,
}

impl StepMetrics {
    /// One structured log line per step.
    pub fn line(&self) -> String {
        format!(
            "step={} L_itc={} L_mlm={} L_itm={} total={} temp={} alpha={} stage={} lr={}",
            self.step,
            self.loss.itc,
            self.loss.mlm,
            self.loss.itm,
            self.loss.total,
            self.temp,
            self.alpha,
            self.stage,
            self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    /// Newline-terminated concatenation of the per-step log lines.
    pub log: String,
    /// Set when training aborted on a non-finite loss; the trainer state is
    /// rolled back to just before the diverging step.
    pub diverged_at: Option<u64>,
}

// ---- trainer --------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub pair: MomentumPair<Model<T>>,
    pub book: Codebook<T>,
    pub queue_v: FeatureQueue<T>,
    pub queue_t: FeatureQueue<T>,
    pub opt: AdamW<T>,
    pub step: u64,
    /// Instrumentation: negative-image plans constructed so far. Stage 1
    /// must leave this at zero.
    pub nva_planned: u64,
    /// Instrumentation: codebook EMA applications (exactly one per step).
    pub book_updates: u64,
    vocab: Vocab,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), &mut stream_rng(cfg.seed, STREAM_MODEL_INIT))?;
        let vocab = Vocab::standard(cfg.model.vocab_size)?;
        let pair = MomentumPair::new(model, cfg.mu)?;
        let book = Codebook::new(
            cfg.codebook_size,
            cfg.model.embed_dim,
            lit::<T>(cfg.gamma),
            &mut stream_rng(cfg.seed, STREAM_BOOK_INIT),
        )?;
        let mut queue_v = FeatureQueue::new(cfg.queue_size, cfg.model.joint_dim)?;
        let mut queue_t = FeatureQueue::new(cfg.queue_size, cfg.model.joint_dim)?;
        queue_v.fill_random(&mut stream_rng(cfg.seed, STREAM_QUEUE_V_INIT))?;
        queue_t.fill_random(&mut stream_rng(cfg.seed, STREAM_QUEUE_T_INIT))?;
        let opt = AdamW::new(&pair.online, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            pair,
            book,
            queue_v,
            queue_t,
            opt,
            step: 0,
            nva_planned: 0,
            book_updates: 0,
            vocab,
        })
    }

    /// Reassembles a trainer from checkpointed parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        cfg: TrainConfig,
        pair: MomentumPair<Model<T>>,
        book: Codebook<T>,
        queue_v: FeatureQueue<T>,
        queue_t: FeatureQueue<T>,
        opt: AdamW<T>,
        step: u64,
        nva_planned: u64,
        book_updates: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::standard(cfg.model.vocab_size)?;
        Ok(Trainer {
            cfg,
            pair,
            book,
            queue_v,
            queue_t,
            opt,
            step,
            nva_planned,
            book_updates,
            vocab,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Plans and applies one optimizer step on the given batch.
    pub fn step_once(
        &mut self,
        records: &[TrainRecord],
        batch: &[usize],
        schedule: &Schedule,
    ) -> Result<StepMetrics> {
        let stage = schedule.stage_at(self.step);
        let alpha = schedule.alpha_at(self.step, &self.cfg);
        let lr = schedule.lr_at(self.step, &self.cfg);
        let mut rng = stream_rng(self.cfg.seed, STREAM_STEP_BASE | self.step);
        let nva_cfg = self.cfg.nva();
        let plan = record_plan(
            &self.pair.online,
            &self.pair.momentum,
            &self.book,
            &self.queue_v,
            &self.queue_t,
            records,
            batch,
            &self.vocab,
            &nva_cfg,
            stage,
            alpha,
            self.step,
            &mut rng,
        )?;
        self.nva_planned += plan.pairs.iter().filter(|p| p.nva.is_some()).count() as u64;

        let mut tape = Tape::new();
        let fwd =
            build_step_loss(&mut tape, &self.pair.online, &self.book, records, &plan, BuildMode::Train)?;
        // Every trainable leaf must be an online parameter: momentum features
        // and codebook entries enter only as constants.
        if tape.num_param_leaves() != self.pair.online.num_tensors() {
            return Err(Error::State(format!(
                "tape has {} parameter leaves but the model owns {} tensors",
                tape.num_param_leaves(),
                self.pair.online.num_tensors()
            )));
        }
        tape.backward(fwd.total)?;
        let mut grads: Vec<Tensor<T>> = Vec::with_capacity(self.opt.names.len());
        for leaf in tape.param_leaves() {
            let shape = tape.value(leaf).shape().to_vec();
            grads.push(match tape.grad(leaf) {
                Some(g) => Tensor::from_vec(shape, g.to_vec())?,
                None => Tensor::zeros(&shape),
            });
        }
        clip_global_norm(&mut grads, GRAD_CLIP_NORM);
        self.opt.step(&mut self.pair.online, &grads, lr)?;
        // τ stays above its floor (clamped in the log-space leaf).
        let temp = as_f64(self.pair.online.temp());
        if temp < TEMP_FLOOR {
            self.pair.online.log_temp.data_mut()[0] = lit::<T>(TEMP_FLOOR.ln());
        }

        // Codebook EMA: one application per optimizer step, after backward,
        // over every local token of the batch.
        let (n, c) = plan.pairs[0].locals.dims2()?;
        let mut all_locals = Tensor::<T>::zeros(&[n * plan.pairs.len(), c]);
        let mut all_assignments = Vec::with_capacity(n * plan.pairs.len());
        for (i, pp) in plan.pairs.iter().enumerate() {
            for r in 0..n {
                all_locals.row_mut(i * n + r).copy_from_slice(pp.locals.row(r));
            }
            all_assignments.extend_from_slice(&pp.assignments);
        }
        self.book.ema_update(&all_locals, &all_assignments)?;
        self.book_updates += 1;

        // Momentum model follows, and its features join the queues.
        self.pair.step::<T>()?;
        self.queue_v.push_rows(&plan.momentum_v)?;
        self.queue_t.push_rows(&plan.momentum_t)?;

        self.step += 1;
        Ok(StepMetrics {
            step: plan.step,
            stage,
            lr,
            alpha,
            loss: fwd.breakdown,
            temp: as_f64(self.pair.online.temp.data()[0]),
        })
    }

    /// Runs (or resumes) the two-stage loop over the dataset. On divergence
    /// the trainer rolls back to the state before the offending step and the
    /// outcome records the aborted step id.
    pub fn train(&mut self, records: &[TrainRecord]) -> Result<TrainOutcome> {
        let schedule = Schedule::new(&self.cfg, records.len())?;
        let spe = schedule.steps_per_epoch;
        let mut metrics = Vec::new();
        let mut log = String::new();
        let start_epoch = (self.step / spe) as usize;
        for epoch in start_epoch..self.cfg.total_epochs() {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.shuffle(&mut stream_rng(self.cfg.seed, STREAM_EPOCH_BASE | epoch as u64));
            let start_pos = if epoch == start_epoch { (self.step % spe) as usize } else { 0 };
            for (pos, batch) in order.chunks_exact(self.cfg.batch_size).enumerate() {
                if pos < start_pos {
                    continue;
                }
                let snapshot = self.clone();
                match self.step_once(records, batch, &schedule) {
                    Ok(m) => {
                        log.push_str(&m.line());
                        log.push('\n');
                        metrics.push(m);
                    }
                    Err(Error::NonFinite(what)) => {
                        let at = self.step;
                        *self = snapshot;
                        log.push_str(&format!("diverged step={at} ({what})\n"));
                        return Ok(TrainOutcome { metrics, log, diverged_at: Some(at) });
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(TrainOutcome { metrics, log, diverged_at: None })
    }
}
