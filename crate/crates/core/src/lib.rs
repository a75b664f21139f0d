//! Fine-grained vision-language pretraining on procedurally generated grid
//! scenes.
//!
//! The model couples a small vision transformer and text transformer through a
//! multimodal fusion encoder. Patch features are quantized against an
//! EMA-updated visual dictionary; quantized patches flow through the fusion
//! encoder with straight-through gradients. Training combines momentum-
//! distilled image-text contrast, fine-grained image-text matching over
//! augmented negatives (token-replaced images, perturbed captions, in-batch
//! hard negatives), and masked language modeling.
//!
//! Numeric kernels are generic over the scalar type via [`scalar::Real`]
//! (`f32` / `f64`); the type aliases at the crate root pin the default `f64`
//! instantiation used by the trainer, evaluator, and CLI.

pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod momentum;
pub mod negatives;
pub mod params;
pub mod posenc;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Default scalar type for end-to-end training and evaluation.
pub type Scalar = f64;
pub type Tensor = tensor::Tensor<Scalar>;
pub type Tape = tape::Tape<Scalar>;
pub type Codebook = codebook::Codebook<Scalar>;
pub type FeatureQueue = momentum::FeatureQueue<Scalar>;
pub type Model = model::Model<Scalar>;
pub type Trainer = train::Trainer<Scalar>;
pub type Checkpoint = checkpoint::Checkpoint<Scalar>;
