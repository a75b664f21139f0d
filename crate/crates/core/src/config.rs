//! The key = value configuration text format.
//!
//! One assignment per line. `#` starts a comment (full-line or trailing),
//! blank lines are ignored, and whitespace around keys and values is
//! stripped. A later assignment to the same key overrides an earlier one, and
//! command-line setters override the file.
//!
//! Keys are namespaced by struct: bare keys set training fields, `model.*`
//! sets model geometry, and `data.*` sets synthetic-scene generation. Every
//! key is listed in [`template`], which renders the full format with its
//! default values. Unknown keys are configuration errors, not warnings.

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Everything the command line can configure: a training run plus the
/// synthetic-data generator.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Parse(format!("config key {key:?}: cannot parse value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse(format!(
            "config key {key:?}: expected true or false, got {value:?}"
        ))),
    }
}

impl FileConfig {
    /// Applies one assignment. The value is untrimmed text after `=`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "stage1_epochs" => t.stage1_epochs = parse_num(key, value)?,
            "stage2_epochs" => t.stage2_epochs = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "base_lr" => t.base_lr = parse_num(key, value)?,
            "final_lr" => t.final_lr = parse_num(key, value)?,
            "warmup_iters" => t.warmup_iters = parse_num(key, value)?,
            "weight_decay" => t.weight_decay = parse_num(key, value)?,
            "mu" => t.mu = parse_num(key, value)?,
            "alpha_max" => t.alpha_max = parse_num(key, value)?,
            "lambda" => t.lambda = parse_num(key, value)?,
            "k" => t.k = parse_num(key, value)?,
            "ratio" => t.ratio = parse_num(key, value)?,
            "gamma" => t.gamma = parse_num(key, value)?,
            "queue_size" => t.queue_size = parse_num(key, value)?,
            "codebook_size" => t.codebook_size = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "model.embed_dim" => t.model.embed_dim = parse_num(key, value)?,
            "model.num_heads" => t.model.num_heads = parse_num(key, value)?,
            "model.num_layers" => t.model.num_layers = parse_num(key, value)?,
            "model.max_text_len" => t.model.max_text_len = parse_num(key, value)?,
            "model.num_patches" => t.model.num_patches = parse_num(key, value)?,
            "model.vocab_size" => t.model.vocab_size = parse_num(key, value)?,
            "model.patch_feat" => t.model.patch_feat = parse_num(key, value)?,
            "model.joint_dim" => t.model.joint_dim = parse_num(key, value)?,
            "model.temp_init" => t.model.temp_init = parse_num(key, value)?,
            "model.fusion_posemb" => t.model.fusion_posemb = parse_bool(key, value)?,
            "data.grid_rows" => self.data.grid_rows = parse_num(key, value)?,
            "data.grid_cols" => self.data.grid_cols = parse_num(key, value)?,
            "data.noise_std" => self.data.noise_std = parse_num(key, value)?,
            "data.vocab_size" => self.data.vocab_size = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a whole config file on top of the defaults.
    pub fn from_text(text: &str) -> Result<FileConfig> {
        let mut cfg = FileConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every assignment in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("config line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies `key=value` setters (e.g. from repeated command-line flags).
    pub fn apply_settings(&mut self, settings: &[String]) -> Result<()> {
        for s in settings {
            let (key, value) = s.split_once('=').ok_or_else(|| {
                Error::Parse(format!("setting {s:?}: expected key=value"))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Checks that the dataset geometry a model will consume agrees with its
    /// configured input shape.
    pub fn validate_geometry(&self) -> Result<()> {
        let m = &self.train.model;
        if self.data.patches() != m.num_patches {
            return Err(Error::Config(format!(
                "data grid {}x{} yields {} patches, model expects {}",
                self.data.grid_rows,
                self.data.grid_cols,
                self.data.patches(),
                m.num_patches
            )));
        }
        if self.data.vocab_size != m.vocab_size {
            return Err(Error::Config(format!(
                "data vocabulary {} disagrees with model vocabulary {}",
                self.data.vocab_size, m.vocab_size
            )));
        }
        Ok(())
    }
}

/// The full format, rendered with default values; valid input for
/// [`FileConfig::from_text`].
pub fn template() -> String {
    let d = FileConfig::default();
    let t = &d.train;
    let m = &t.model;
    format!(
        "\
# Training configuration: key = value, one per line, # for comments.
# Later assignments override earlier ones; command-line --set overrides all.

# ---- schedule and optimizer ----
stage1_epochs = {}
stage2_epochs = {}
batch_size = {}
base_lr = {}
final_lr = {}
warmup_iters = {}
weight_decay = {}
seed = {}

# ---- objectives ----
mu = {}            # momentum-model EMA coefficient
alpha_max = {}       # distillation weight ceiling
lambda = {}          # saliency blend for negative visual augmentation
k = {}                 # neighbor candidates per dictionary entry
ratio = {}           # fraction of local tokens replaced per negative image
gamma = {}          # visual dictionary EMA decay
queue_size = {}
codebook_size = {}

# ---- model geometry ----
model.embed_dim = {}
model.num_heads = {}
model.num_layers = {}
model.max_text_len = {}
model.num_patches = {}
model.vocab_size = {}
model.patch_feat = {}
model.joint_dim = {}
model.temp_init = {}
model.fusion_posemb = {}

# ---- synthetic scenes ----
data.grid_rows = {}
data.grid_cols = {}
data.noise_std = {}
data.vocab_size = {}
",
        t.stage1_epochs,
        t.stage2_epochs,
        t.batch_size,
        t.base_lr,
        t.final_lr,
        t.warmup_iters,
        t.weight_decay,
        t.seed,
        t.mu,
        t.alpha_max,
        t.lambda,
        t.k,
        t.ratio,
        t.gamma,
        t.queue_size,
        t.codebook_size,
        m.embed_dim,
        m.num_heads,
        m.num_layers,
        m.max_text_len,
        m.num_patches,
        m.vocab_size,
        m.patch_feat,
        m.joint_dim,
        m.temp_init,
        m.fusion_posemb,
        d.data.grid_rows,
        d.data.grid_cols,
        d.data.noise_std,
        d.data.vocab_size,
    )
}
