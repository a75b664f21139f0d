//! Transformer building blocks: linear layers, layer norm, multi-head
//! attention, and the pre-norm encoder blocks used by the vision, text, and
//! fusion towers.
//!
//! Each block type comes in two forms: the parameter struct owning
//! [`Tensor`]s, and a lightweight `…V` mirror of tape [`Var`]s produced by
//! `bind`. Binding with `trainable = true` registers gradient leaves;
//! `trainable = false` registers constants (used for evaluation snapshots).

use crate::error::Result;
use crate::scalar::{lit, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Weight init std for all projections and embeddings.
pub const INIT_STD: f64 = 0.02;

fn bind_tensor<T: Real>(tape: &mut Tape<T>, t: &Tensor<T>, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

// ---- linear ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `fan_in × fan_out`.
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearV {
    pub w: Var,
    pub b: Var,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            w: Tensor::randn(&[fan_in, fan_out], lit::<T>(INIT_STD), rng),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> LinearV {
        LinearV {
            w: bind_tensor(tape, &self.w, trainable),
            b: bind_tensor(tape, &self.b, trainable),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl LinearV {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_row_broadcast(y, self.b)
    }
}

// ---- layer norm ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormV {
    pub gain: Var,
    pub bias: Var,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm { gain: Tensor::full(&[dim], T::one()), bias: Tensor::zeros(&[dim]) }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> LayerNormV {
        LayerNormV {
            gain: bind_tensor(tape, &self.gain, trainable),
            bias: bind_tensor(tape, &self.bias, trainable),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.gain"), &self.gain);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl LayerNormV {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm_rows(x, self.gain, self.bias)
    }
}

// ---- attention -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionV {
    pub wq: LinearV,
    pub wk: LinearV,
    pub wv: LinearV,
    pub wo: LinearV,
}

impl<T: Real> Attention<T> {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Attention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> AttentionV {
        AttentionV {
            wq: self.wq.bind(tape, trainable),
            wk: self.wk.bind(tape, trainable),
            wv: self.wv.bind(tape, trainable),
            wo: self.wo.bind(tape, trainable),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

impl AttentionV {
    /// `q_in` attends over `kv_in`; `mask[j] = true` hides key `j`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        q_in: Var,
        kv_in: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.wq.forward(tape, q_in)?;
        let k = self.wk.forward(tape, kv_in)?;
        let v = self.wv.forward(tape, kv_in)?;
        let a = tape.attention(q, k, v, heads, mask)?;
        self.wo.forward(tape, a)
    }
}

// ---- encoder block (self-attention + FFN) ----------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockV {
    pub ln1: LayerNormV,
    pub attn: AttentionV,
    pub ln2: LayerNormV,
    pub ffn1: LinearV,
    pub ffn2: LinearV,
}

impl<T: Real> Block<T> {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, rng),
            ln2: LayerNorm::new(dim),
            ffn1: Linear::new(dim, 4 * dim, rng),
            ffn2: Linear::new(4 * dim, dim, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BlockV {
        BlockV {
            ln1: self.ln1.bind(tape, trainable),
            attn: self.attn.bind(tape, trainable),
            ln2: self.ln2.bind(tape, trainable),
            ffn1: self.ffn1.bind(tape, trainable),
            ffn2: self.ffn2.bind(tape, trainable),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn1.visit(&format!("{prefix}.ffn1"), f);
        self.ffn2.visit(&format!("{prefix}.ffn2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn1.visit_mut(&format!("{prefix}.ffn1"), f);
        self.ffn2.visit_mut(&format!("{prefix}.ffn2"), f);
    }
}

impl BlockV {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, h, heads, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let h = self.ffn1.forward(tape, h)?;
        let h = tape.gelu(h)?;
        let f = self.ffn2.forward(tape, h)?;
        tape.add(x, f)
    }
}

// ---- fusion block (self-attention + cross-attention + FFN) -----------------

#[derive(Debug, Clone, PartialEq)]
pub struct FusionBlock<T> {
    pub ln1: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub ln_cross: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionBlockV {
    pub ln1: LayerNormV,
    pub self_attn: AttentionV,
    pub ln_cross: LayerNormV,
    pub cross_attn: AttentionV,
    pub ln2: LayerNormV,
    pub ffn1: LinearV,
    pub ffn2: LinearV,
}

impl<T: Real> FusionBlock<T> {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        FusionBlock {
            ln1: LayerNorm::new(dim),
            self_attn: Attention::new(dim, rng),
            ln_cross: LayerNorm::new(dim),
            cross_attn: Attention::new(dim, rng),
            ln2: LayerNorm::new(dim),
            ffn1: Linear::new(dim, 4 * dim, rng),
            ffn2: Linear::new(4 * dim, dim, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> FusionBlockV {
        FusionBlockV {
            ln1: self.ln1.bind(tape, trainable),
            self_attn: self.self_attn.bind(tape, trainable),
            ln_cross: self.ln_cross.bind(tape, trainable),
            cross_attn: self.cross_attn.bind(tape, trainable),
            ln2: self.ln2.bind(tape, trainable),
            ffn1: self.ffn1.bind(tape, trainable),
            ffn2: self.ffn2.bind(tape, trainable),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.ln_cross.visit(&format!("{prefix}.ln_cross"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn1.visit(&format!("{prefix}.ffn1"), f);
        self.ffn2.visit(&format!("{prefix}.ffn2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.ln_cross.visit_mut(&format!("{prefix}.ln_cross"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn1.visit_mut(&format!("{prefix}.ffn1"), f);
        self.ffn2.visit_mut(&format!("{prefix}.ffn2"), f);
    }
}

impl FusionBlockV {
    /// `image = None` skips the cross-attention sublayer entirely, which is
    /// forward-equivalent to attending over all-zero image tokens at init
    /// (zero biases make the cross term exactly zero).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        image: Option<Var>,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.self_attn.forward(tape, h, h, heads, mask)?;
        let mut x = tape.add(x, a)?;
        if let Some(img) = image {
            let h = self.ln_cross.forward(tape, x)?;
            let ca = self.cross_attn.forward(tape, h, img, heads, None)?;
            x = tape.add(x, ca)?;
        }
        let h = self.ln2.forward(tape, x)?;
        let h = self.ffn1.forward(tape, h)?;
        let h = tape.gelu(h)?;
        let f = self.ffn2.forward(tape, h)?;
        tape.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Block::<f64>::new(8, &mut rng);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let run = |block: &Block<f64>, x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let b = block.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let y = b.forward(&mut tape, xv, 2, None).unwrap();
            tape.value(y).clone()
        };
        let y1 = run(&block, &x);
        let y2 = run(&block, &x);
        assert_eq!(y1.shape(), &[5, 8]);
        assert_eq!(y1, y2, "same input and params must be bit-identical");
        assert!(y1.all_finite());
    }

    #[test]
    fn fusion_block_without_image_equals_zero_image_at_init() {
        // Zero-init output biases make the cross-attention term exactly zero
        // when the image tokens are all zeros.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = FusionBlock::<f64>::new(8, &mut rng);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let zeros = Tensor::zeros(&[3, 8]);
        let mut tape = Tape::<f64>::new();
        let b = block.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let zv = tape.constant(zeros);
        let with_zero_img = b.forward(&mut tape, xv, Some(zv), 2, None).unwrap();
        let without_img = b.forward(&mut tape, xv, None, 2, None).unwrap();
        let a = tape.value(with_zero_img);
        let b_ = tape.value(without_img);
        assert_eq!(a, b_);
    }

    #[test]
    fn attention_mask_hides_keys_from_all_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = Attention::<f64>::new(8, &mut rng);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        // Changing a masked row must not change any output row.
        let mut x2 = x.clone();
        for v in x2.row_mut(3) {
            *v += 10.0;
        }
        let mask = [false, false, false, true];
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let a = attn.bind(&mut tape, false);
            let xv = tape.constant(input.clone());
            let y = a.forward(&mut tape, xv, xv, 2, Some(&mask)).unwrap();
            tape.value(y).clone()
        };
        let y1 = run(&x);
        let y2 = run(&x2);
        for i in 0..3 {
            assert_eq!(y1.row(i), y2.row(i), "masked key leaked into row {i}");
        }
    }

    #[test]
    fn bind_trainable_controls_gradient_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear::<f64>::new(3, 2, &mut rng);
        let mut tape = Tape::new();
        lin.bind(&mut tape, true);
        assert_eq!(tape.num_param_leaves(), 2);
        lin.bind(&mut tape, false);
        assert_eq!(tape.num_param_leaves(), 2, "constant bind must not add leaves");
    }
}
