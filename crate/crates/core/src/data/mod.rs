//! Procedurally generated fine-grained scenes: two attributed objects on a
//! grid, a one-sentence caption, and contrastive evaluation pairs whose
//! images and captions differ by exactly one attribute or relation.

mod dataset;
mod scene;
mod vocab;

pub use dataset::{
    applicable_contrasts, contrast_scene, emit_dataset, generate_scene, load_eval, load_train,
    make_eval_item, make_train_record, write_eval, write_train, ContrastRule, DataConfig,
    DatasetHeader, EvalItem, PerturbedCaption, TrainRecord, DATASET_FORMAT, DATASET_VERSION,
};
pub use scene::{render, Color, Object, Relation, Scene, Shape, Size, PATCH_F};
pub use vocab::{
    caption_tokens, parse_caption, Desc, ParsedCaption, Vocab, CAPTION_LEN, CLS, FIRST_WORD, MASK,
    PAD,
};
