//! The full model: vision tower, text tower, cross-attention fusion tower,
//! contrastive projection heads, matching head, masked-language head, and the
//! learnable contrastive temperature.
//!
//! Forward passes run on a [`Tape`]; evaluation uses the same code with the
//! parameters bound as constants, so train-time and eval-time numerics are
//! one implementation.

use crate::data::{CAPTION_LEN, CLS, PAD};
use crate::encoder::{Block, BlockV, FusionBlock, FusionBlockV, LayerNorm, LayerNormV, Linear,
                     LinearV};
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::posenc::{pos_embed_1d, pos_embed_2d};
use crate::scalar::{lit, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width c.
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Transformer layers per tower.
    pub num_layers: usize,
    /// Text positions after the CLS slot.
    pub max_text_len: usize,
    /// Image patches N (a perfect square: the grid).
    pub num_patches: usize,
    pub vocab_size: usize,
    /// Raw patch feature width f.
    pub patch_feat: usize,
    /// Contrastive projection width (also the queue row width).
    pub joint_dim: usize,
    /// Initial temperature τ.
    pub temp_init: f64,
    /// Add the 2-D positional embedding to the quantized tokens entering
    /// fusion for positive images as well (negatives always get it).
    pub fusion_posemb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            num_heads: 4,
            num_layers: 2,
            max_text_len: 16,
            num_patches: 16,
            vocab_size: 48,
            patch_feat: crate::data::PATCH_F,
            joint_dim: 16,
            temp_init: 0.07,
            fusion_posemb: true,
        }
    }
}

impl ModelConfig {
    pub fn grid_side(&self) -> usize {
        (self.num_patches as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by 4 for the 2-D positional embedding",
                self.embed_dim
            )));
        }
        let side = self.grid_side();
        if side * side != self.num_patches || self.num_patches == 0 {
            return Err(Error::Config(format!(
                "num_patches {} is not a perfect square",
                self.num_patches
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be ≥ 1".into()));
        }
        if self.max_text_len < CAPTION_LEN {
            return Err(Error::Config(format!(
                "max_text_len {} cannot hold a {CAPTION_LEN}-token caption",
                self.max_text_len
            )));
        }
        crate::data::Vocab::standard(self.vocab_size)?;
        if self.patch_feat == 0 || self.joint_dim == 0 {
            return Err(Error::Config("patch_feat and joint_dim must be ≥ 1".into()));
        }
        if !(self.temp_init.is_finite() && self.temp_init > 0.0) {
            return Err(Error::Config(format!("temp_init {} must be positive", self.temp_init)));
        }
        Ok(())
    }
}

// ---- towers ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct VisionTower<T> {
    pub patch_proj: Linear<T>,
    /// Learned CLS token, `1 × c`.
    pub cls: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_ln: LayerNorm<T>,
    /// Fixed 2-D sinusoidal grid embedding, `N × c` (not a parameter).
    posemb: Tensor<T>,
}

pub struct VisionTowerV {
    pub patch_proj: LinearV,
    pub cls: Var,
    pub blocks: Vec<BlockV>,
    pub final_ln: LayerNormV,
    pub posemb: Var,
    heads: usize,
}

impl<T: Real> VisionTower<T> {
    fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let side = cfg.grid_side();
        Ok(VisionTower {
            patch_proj: Linear::new(cfg.patch_feat, cfg.embed_dim, rng),
            cls: Tensor::randn(&[1, cfg.embed_dim], lit::<T>(crate::encoder::INIT_STD), rng),
            blocks: (0..cfg.num_layers).map(|_| Block::new(cfg.embed_dim, rng)).collect(),
            final_ln: LayerNorm::new(cfg.embed_dim),
            posemb: pos_embed_2d(side, side, cfg.embed_dim)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, heads: usize) -> VisionTowerV {
        VisionTowerV {
            patch_proj: self.patch_proj.bind(tape, trainable),
            cls: if trainable { tape.param(self.cls.clone()) } else { tape.constant(self.cls.clone()) },
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
            final_ln: self.final_ln.bind(tape, trainable),
            posemb: tape.constant(self.posemb.clone()),
            heads,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.patch_proj.visit("vision.patch_proj", f);
        f("vision.cls", &self.cls);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("vision.block{i}"), f);
        }
        self.final_ln.visit("vision.final_ln", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.patch_proj.visit_mut("vision.patch_proj", f);
        f("vision.cls", &mut self.cls);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("vision.block{i}"), f);
        }
        self.final_ln.visit_mut("vision.final_ln", f);
    }

    /// The grid positional embedding (shared with negative construction).
    pub fn posemb(&self) -> &Tensor<T> {
        &self.posemb
    }
}

impl VisionTowerV {
    /// `patches` is `N × f`; output is `(1+N) × c` with the CLS state first.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        let p = self.patch_proj.forward(tape, patches)?;
        let p = tape.add(p, self.posemb)?;
        let x = tape.concat_rows(&[self.cls, p])?;
        let mut x = x;
        for b in &self.blocks {
            x = b.forward(tape, x, self.heads, None)?;
        }
        self.final_ln.forward(tape, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextTower<T> {
    /// `vocab × c` token embedding.
    pub embedding: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_ln: LayerNorm<T>,
    /// Fixed 1-D sinusoidal embedding for `1 + max_text_len` positions.
    posemb: Tensor<T>,
}

pub struct TextTowerV {
    pub embedding: Var,
    pub blocks: Vec<BlockV>,
    pub final_ln: LayerNormV,
    pub posemb: Var,
    heads: usize,
    max_text_len: usize,
    vocab_size: usize,
}

impl<T: Real> TextTower<T> {
    fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(TextTower {
            embedding: Tensor::randn(
                &[cfg.vocab_size, cfg.embed_dim],
                lit::<T>(crate::encoder::INIT_STD),
                rng,
            ),
            blocks: (0..cfg.num_layers).map(|_| Block::new(cfg.embed_dim, rng)).collect(),
            final_ln: LayerNorm::new(cfg.embed_dim),
            posemb: pos_embed_1d(1 + cfg.max_text_len, cfg.embed_dim)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, cfg: &ModelConfig) -> TextTowerV {
        TextTowerV {
            embedding: if trainable {
                tape.param(self.embedding.clone())
            } else {
                tape.constant(self.embedding.clone())
            },
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
            final_ln: self.final_ln.bind(tape, trainable),
            posemb: tape.constant(self.posemb.clone()),
            heads: cfg.num_heads,
            max_text_len: cfg.max_text_len,
            vocab_size: cfg.vocab_size,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("text.embedding", &self.embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("text.block{i}"), f);
        }
        self.final_ln.visit("text.final_ln", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("text.embedding", &mut self.embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("text.block{i}"), f);
        }
        self.final_ln.visit_mut("text.final_ln", f);
    }
}

/// Encoded text: the `(1 + max_text_len) × c` state sequence and the key
/// mask hiding padded positions.
pub struct EncodedTextV {
    pub seq: Var,
    pub mask: Vec<bool>,
}

impl TextTowerV {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ids: &[u16]) -> Result<EncodedTextV> {
        if ids.len() > self.max_text_len {
            return Err(Error::Shape {
                op: "encode_text",
                lhs: vec![self.max_text_len],
                rhs: vec![ids.len()],
            });
        }
        let mut indices = Vec::with_capacity(1 + self.max_text_len);
        indices.push(CLS);
        for &id in ids {
            if id as usize >= self.vocab_size {
                return Err(Error::Vocab(format!(
                    "token id {id} out of range (vocab {})",
                    self.vocab_size
                )));
            }
            indices.push(id as usize);
        }
        indices.resize(1 + self.max_text_len, PAD);
        let mask: Vec<bool> = indices.iter().map(|&i| i == PAD).collect();
        let emb = tape.gather_rows(self.embedding, &indices)?;
        let mut x = tape.add(emb, self.posemb)?;
        for b in &self.blocks {
            x = b.forward(tape, x, self.heads, Some(&mask))?;
        }
        let seq = self.final_ln.forward(tape, x)?;
        Ok(EncodedTextV { seq, mask })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTower<T> {
    pub blocks: Vec<FusionBlock<T>>,
    pub final_ln: LayerNorm<T>,
}

pub struct FusionTowerV {
    pub blocks: Vec<FusionBlockV>,
    pub final_ln: LayerNormV,
    heads: usize,
}

impl<T: Real> FusionTower<T> {
    fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        FusionTower {
            blocks: (0..cfg.num_layers).map(|_| FusionBlock::new(cfg.embed_dim, rng)).collect(),
            final_ln: LayerNorm::new(cfg.embed_dim),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, heads: usize) -> FusionTowerV {
        FusionTowerV {
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
            final_ln: self.final_ln.bind(tape, trainable),
            heads,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("fusion.block{i}"), f);
        }
        self.final_ln.visit("fusion.final_ln", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("fusion.block{i}"), f);
        }
        self.final_ln.visit_mut("fusion.final_ln", f);
    }
}

impl FusionTowerV {
    /// Runs self-attention over the text states and cross-attention into the
    /// image tokens (row 0 of which is the unquantized CLS row). Returns the
    /// fused `(1 + max_text_len) × c` sequence.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        text_seq: Var,
        image_tokens: Option<Var>,
        mask: &[bool],
    ) -> Result<Var> {
        let mut x = text_seq;
        for b in &self.blocks {
            x = b.forward(tape, x, image_tokens, self.heads, Some(mask))?;
        }
        self.final_ln.forward(tape, x)
    }
}

// ---- full model ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub vision: VisionTower<T>,
    pub text: TextTower<T>,
    pub fusion: FusionTower<T>,
    /// Image CLS → joint space.
    pub proj_v: Linear<T>,
    /// Text CLS → joint space.
    pub proj_t: Linear<T>,
    /// Joint CLS → 2-way match logits.
    pub itm_head: Linear<T>,
    /// Fused token states → vocabulary logits.
    pub mlm_head: Linear<T>,
    /// Natural log of the learnable contrastive temperature τ (scalar).
    /// τ is optimized in log space: Adam steps are near-constant-magnitude
    /// regardless of gradient scale, so a direct-coordinate τ would walk to
    /// its clamp floor at one lr-unit per step whenever the gradient sign is
    /// consistent; multiplicative steps keep the walk proportional to τ.
    pub log_temp: Tensor<T>,
}

pub struct ModelV {
    pub vision: VisionTowerV,
    pub text: TextTowerV,
    pub fusion: FusionTowerV,
    pub proj_v: LinearV,
    pub proj_t: LinearV,
    pub itm_head: LinearV,
    pub mlm_head: LinearV,
    /// The temperature τ itself (`exp` of the log-space leaf).
    pub temp: Var,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let vision = VisionTower::new(&cfg, rng)?;
        let text = TextTower::new(&cfg, rng)?;
        let fusion = FusionTower::new(&cfg, rng);
        let proj_v = Linear::new(cfg.embed_dim, cfg.joint_dim, rng);
        let proj_t = Linear::new(cfg.embed_dim, cfg.joint_dim, rng);
        let itm_head = Linear::new(cfg.embed_dim, 2, rng);
        let mlm_head = Linear::new(cfg.embed_dim, cfg.vocab_size, rng);
        let log_temp = Tensor::scalar(lit::<T>(cfg.temp_init.ln()));
        Ok(Model { cfg, vision, text, fusion, proj_v, proj_t, itm_head, mlm_head, log_temp })
    }

    /// Current temperature τ.
    pub fn temp(&self) -> T {
        self.log_temp.data()[0].exp()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelV {
        // Leaf registration must follow `visit` order (log_temp last): the
        // optimizer pairs tape gradients with visited tensors positionally.
        let vision = self.vision.bind(tape, trainable, self.cfg.num_heads);
        let text = self.text.bind(tape, trainable, &self.cfg);
        let fusion = self.fusion.bind(tape, trainable, self.cfg.num_heads);
        let proj_v = self.proj_v.bind(tape, trainable);
        let proj_t = self.proj_t.bind(tape, trainable);
        let itm_head = self.itm_head.bind(tape, trainable);
        let mlm_head = self.mlm_head.bind(tape, trainable);
        let log_temp = if trainable {
            tape.param(self.log_temp.clone())
        } else {
            tape.constant(self.log_temp.clone())
        };
        let temp = tape.exp(log_temp).expect("exp preserves the scalar shape");
        ModelV { vision, text, fusion, proj_v, proj_t, itm_head, mlm_head, temp }
    }

    /// Value-level image encoding on a scratch tape: `(v_cls, locals)`.
    pub fn encode_image_values(&self, patches: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, false);
        let p = tape.constant(patches.clone());
        let seq = m.vision.forward(&mut tape, p)?;
        let v = tape.value(seq);
        let (rows, c) = v.dims2()?;
        let cls = v.row(0).to_vec();
        let mut locals = Tensor::zeros(&[rows - 1, c]);
        for i in 1..rows {
            locals.row_mut(i - 1).copy_from_slice(v.row(i));
        }
        Ok((cls, locals))
    }

    /// Value-level text encoding on a scratch tape: `(t_cls, locals)`.
    pub fn encode_text_values(&self, ids: &[u16]) -> Result<(Vec<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, false);
        let enc = m.text.forward(&mut tape, ids)?;
        let v = tape.value(enc.seq);
        let (rows, c) = v.dims2()?;
        let cls = v.row(0).to_vec();
        let mut locals = Tensor::zeros(&[rows - 1, c]);
        for i in 1..rows {
            locals.row_mut(i - 1).copy_from_slice(v.row(i));
        }
        Ok((cls, locals))
    }
}

impl<T: Real> Parameterized<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.vision.visit(f);
        self.text.visit(f);
        self.fusion.visit(f);
        self.proj_v.visit("proj_v", f);
        self.proj_t.visit("proj_t", f);
        self.itm_head.visit("itm_head", f);
        self.mlm_head.visit("mlm_head", f);
        f("log_temp", &self.log_temp);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.vision.visit_mut(f);
        self.text.visit_mut(f);
        self.fusion.visit_mut(f);
        self.proj_v.visit_mut("proj_v", f);
        self.proj_t.visit_mut("proj_t", f);
        self.itm_head.visit_mut("itm_head", f);
        self.mlm_head.visit_mut("mlm_head", f);
        f("log_temp", &mut self.log_temp);
    }
}

impl ModelV {
    /// Splits an encoded `(1+K) × c` sequence into its CLS row and locals.
    pub fn split_cls<T: Real>(tape: &mut Tape<T>, seq: Var) -> Result<(Var, Var)> {
        let (rows, _) = tape.value(seq).dims2()?;
        let cls = tape.slice_rows(seq, 0, 1)?;
        let locals = tape.slice_rows(seq, 1, rows - 1)?;
        Ok((cls, locals))
    }

    /// Projects CLS rows (`B × c`) into the unit-norm joint space (`B × d`).
    pub fn project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        proj: LinearV,
        cls_rows: Var,
    ) -> Result<Var> {
        let p = proj.forward(tape, cls_rows)?;
        tape.l2_normalize_rows(p)
    }
}
