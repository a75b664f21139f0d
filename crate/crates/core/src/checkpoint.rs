//! Versioned single-file training checkpoints.
//!
//! A checkpoint is a JSON document whose first two fields form the versioned
//! header. It carries everything mutable in a [`Trainer`]: both parameter
//! sets (online and momentum) in visit order, the optimizer moments, the
//! visual dictionary, the contrastive feature queues, the step counter, the
//! instrumentation counters, and an echo of the full config. RNG state is the
//! pair (master seed, next step): every random stream in training is derived
//! from those two values, so restoring them restores all randomness exactly.
//!
//! The resume contract: a trainer restored from a checkpoint continues with a
//! loss trace bit-identical to the uninterrupted run. JSON floats round-trip
//! losslessly (shortest-round-trip formatting on write, exact parse on read),
//! and all collections serialize in deterministic order, so same-seed runs
//! also produce byte-identical checkpoint files.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::momentum::{FeatureQueue, MomentumPair};
use crate::params::Parameterized;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::train::{stream_rng, AdamW, TrainConfig, Trainer, STREAM_MODEL_INIT};

pub const CHECKPOINT_FORMAT: &str = "fgvl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// RNG state under the derived-stream scheme: the master seed plus the step
/// the run will execute next. All per-epoch and per-step streams are pure
/// functions of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    pub next_step: u64,
}

/// Serialized trainer state. Field order is the file layout; `format` and
/// `version` come first so any reader can identify the container before
/// trusting the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub nva_planned: u64,
    pub book_updates: u64,
    /// Online parameters, `(name, tensor)` in visit order.
    pub online: Vec<(String, Tensor<T>)>,
    /// Momentum parameters, same order as `online`.
    pub momentum: Vec<(String, Tensor<T>)>,
    pub opt: AdamW<T>,
    pub book: Codebook<T>,
    pub queue_v: FeatureQueue<T>,
    pub queue_t: FeatureQueue<T>,
}

fn collect_params<T: Real, M: Parameterized<T>>(model: &M) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    model.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Overwrites `model`'s parameters from `saved`, requiring the exact same
/// names and shapes in the exact same order.
fn load_params<T: Real, M: Parameterized<T>>(
    model: &mut M,
    saved: &[(String, Tensor<T>)],
    which: &str,
) -> Result<()> {
    let mut i = 0;
    let mut err: Option<Error> = None;
    model.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match saved.get(i) {
            Some((sn, st)) if sn == name && st.shape() == t.shape() => *t = st.clone(),
            Some((sn, st)) => {
                err = Some(Error::State(format!(
                    "{which} parameter #{i} mismatch: checkpoint has {sn:?} {:?}, model expects {name:?} {:?}",
                    st.shape(),
                    t.shape()
                )))
            }
            None => {
                err = Some(Error::State(format!(
                    "{which} parameters truncated: checkpoint ends before {name:?}"
                )))
            }
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != saved.len() {
        return Err(Error::State(format!(
            "{which} parameters: checkpoint has {} tensors, model expects {i}",
            saved.len()
        )));
    }
    Ok(())
}

impl<T: Real + Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn from_trainer(tr: &Trainer<T>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: tr.cfg.clone(),
            step: tr.step,
            rng: RngState { master_seed: tr.cfg.seed, next_step: tr.step },
            nva_planned: tr.nva_planned,
            book_updates: tr.book_updates,
            online: collect_params(&tr.pair.online),
            momentum: collect_params(&tr.pair.momentum),
            opt: tr.opt.clone(),
            book: tr.book.clone(),
            queue_v: tr.queue_v.clone(),
            queue_t: tr.queue_t.clone(),
        }
    }

    /// Rebuilds a trainer, validating the header and every structural
    /// agreement between the config echo and the stored state.
    pub fn into_trainer(self) -> Result<Trainer<T>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!(
                "not a training checkpoint: format {:?}, expected {CHECKPOINT_FORMAT:?}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {} (this build reads {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let cfg = self.config;
        cfg.validate()?;
        if self.rng.master_seed != cfg.seed || self.rng.next_step != self.step {
            return Err(Error::State(format!(
                "rng state (seed {}, next step {}) disagrees with config seed {} / step counter {}",
                self.rng.master_seed, self.rng.next_step, cfg.seed, self.step
            )));
        }

        // Structure comes from the config echo; values come from the file.
        let mut online = Model::new(cfg.model.clone(), &mut stream_rng(cfg.seed, STREAM_MODEL_INIT))?;
        load_params(&mut online, &self.online, "online")?;
        let mut momentum = online.clone();
        load_params(&mut momentum, &self.momentum, "momentum")?;

        let expect_names = online.param_names();
        if self.opt.names != expect_names {
            return Err(Error::State(format!(
                "optimizer state names disagree with the model ({} vs {} tensors)",
                self.opt.names.len(),
                expect_names.len()
            )));
        }
        if self.opt.m.len() != expect_names.len() || self.opt.v.len() != expect_names.len() {
            return Err(Error::State("optimizer moment vectors truncated".into()));
        }
        let mut i = 0;
        let mut moment_err = None;
        online.visit(&mut |name, t| {
            if moment_err.is_none()
                && (self.opt.m[i].shape() != t.shape() || self.opt.v[i].shape() != t.shape())
            {
                moment_err = Some(format!("optimizer moments for {name:?} have the wrong shape"));
            }
            i += 1;
        });
        if let Some(msg) = moment_err {
            return Err(Error::State(msg));
        }
        if self.opt.weight_decay != cfg.weight_decay {
            return Err(Error::State(format!(
                "optimizer weight decay {} disagrees with config {}",
                self.opt.weight_decay, cfg.weight_decay
            )));
        }

        if self.book.m() != cfg.codebook_size || self.book.c() != cfg.model.embed_dim {
            return Err(Error::State(format!(
                "codebook is {}×{}, config says {}×{}",
                self.book.m(),
                self.book.c(),
                cfg.codebook_size,
                cfg.model.embed_dim
            )));
        }
        for (q, tag) in [(&self.queue_v, "visual"), (&self.queue_t, "textual")] {
            if q.capacity() != cfg.queue_size || q.width() != cfg.model.joint_dim {
                return Err(Error::State(format!(
                    "{tag} queue is {}×{}, config says {}×{}",
                    q.capacity(),
                    q.width(),
                    cfg.queue_size,
                    cfg.model.joint_dim
                )));
            }
        }

        let pair = MomentumPair::from_parts(online, momentum, cfg.mu)?;
        Trainer::from_parts(
            cfg,
            pair,
            self.book,
            self.queue_v,
            self.queue_t,
            self.opt,
            self.step,
            self.nva_planned,
            self.book_updates,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Convenience: snapshot `tr` to `path`.
pub fn save_trainer<T: Real + Serialize + DeserializeOwned>(
    tr: &Trainer<T>,
    path: &Path,
) -> Result<()> {
    Checkpoint::from_trainer(tr).save(path)
}

/// Convenience: restore a trainer from `path`.
pub fn load_trainer<T: Real + Serialize + DeserializeOwned>(path: &Path) -> Result<Trainer<T>> {
    Checkpoint::<T>::load(path)?.into_trainer()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_train_record, DataConfig, TrainRecord};
    use crate::train::{Schedule, STREAM_EPOCH_BASE};
    use rand::seq::SliceRandom;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.embed_dim = 16;
        cfg.model.num_heads = 2;
        cfg.model.num_layers = 1;
        cfg.model.joint_dim = 8;
        cfg.model.max_text_len = 10;
        cfg.stage1_epochs = 1;
        cfg.stage2_epochs = 1;
        cfg.batch_size = 2;
        cfg.warmup_iters = 4;
        cfg.queue_size = 6;
        cfg.codebook_size = 8;
        cfg.seed = 23;
        cfg
    }

    fn tiny_records(n: usize, seed: u64) -> Vec<TrainRecord> {
        let dc = DataConfig::default();
        (0..n as u64).map(|id| make_train_record(id, &dc, seed).unwrap()).collect()
    }

    /// Trains `steps` optimizer steps of the first epoch and returns the
    /// trainer plus the metric lines it produced.
    fn run_steps(tr: &mut Trainer<f64>, records: &[TrainRecord], steps: usize) -> Vec<String> {
        let schedule = Schedule::new(&tr.cfg, records.len()).unwrap();
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut stream_rng(tr.cfg.seed, STREAM_EPOCH_BASE));
        order
            .chunks_exact(tr.cfg.batch_size)
            .take(steps)
            .map(|b| tr.step_once(records, b, &schedule).unwrap().line())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact_and_byte_stable() {
        let records = tiny_records(4, 7);
        let mut tr = Trainer::<f64>::new(tiny_config()).unwrap();
        run_steps(&mut tr, &records, 2);

        let ck = Checkpoint::from_trainer(&tr);
        let json = ck.to_json().unwrap();
        let back = Checkpoint::<f64>::from_json(&json).unwrap();
        assert_eq!(back, ck, "JSON round-trip must be lossless");
        assert_eq!(back.to_json().unwrap(), json, "re-serialization must be byte-identical");

        let restored = back.into_trainer().unwrap();
        assert_eq!(restored.step, tr.step);
        assert_eq!(restored.nva_planned, tr.nva_planned);
        assert_eq!(restored.book_updates, tr.book_updates);
        assert_eq!(collect_params(&restored.pair.online), collect_params(&tr.pair.online));
        assert_eq!(collect_params(&restored.pair.momentum), collect_params(&tr.pair.momentum));
        assert_eq!(restored.opt, tr.opt);
        assert_eq!(restored.book, tr.book);
        assert_eq!(restored.queue_v, tr.queue_v);
        assert_eq!(restored.queue_t, tr.queue_t);
    }

    #[test]
    fn resume_from_file_reproduces_the_uninterrupted_trace() {
        let records = tiny_records(6, 9);

        let mut full = Trainer::<f64>::new(tiny_config()).unwrap();
        let full_out = full.train(&records).unwrap();

        // Interrupt after 2 steps, checkpoint to disk, restore, continue.
        let mut head = Trainer::<f64>::new(tiny_config()).unwrap();
        let mut lines = run_steps(&mut head, &records, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt.json");
        save_trainer(&head, &path).unwrap();
        drop(head);

        let mut resumed = load_trainer::<f64>(&path).unwrap();
        let tail = resumed.train(&records).unwrap();
        lines.extend(tail.log.lines().map(str::to_string));
        let joined = lines.join("\n") + "\n";
        assert_eq!(joined, full_out.log, "resumed trace must equal the uninterrupted one");

        // End states agree bitwise, not just the printed trace.
        assert_eq!(collect_params(&resumed.pair.online), collect_params(&full.pair.online));
        assert_eq!(resumed.book, full.book);
        assert_eq!(resumed.queue_v, full.queue_v);
        assert_eq!(resumed.opt, full.opt);
    }

    #[test]
    fn same_seed_runs_write_byte_identical_checkpoints() {
        let records = tiny_records(4, 11);
        let run = || {
            let mut tr = Trainer::<f64>::new(tiny_config()).unwrap();
            run_steps(&mut tr, &records, 2);
            Checkpoint::from_trainer(&tr).to_json().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn header_mismatches_are_rejected() {
        let records = tiny_records(4, 13);
        let mut tr = Trainer::<f64>::new(tiny_config()).unwrap();
        run_steps(&mut tr, &records, 1);
        let ck = Checkpoint::from_trainer(&tr);

        let mut wrong_format = ck.clone();
        wrong_format.format = "something-else".into();
        assert!(matches!(wrong_format.into_trainer(), Err(Error::Parse(_))));

        let mut wrong_version = ck.clone();
        wrong_version.version = CHECKPOINT_VERSION + 1;
        assert!(matches!(wrong_version.into_trainer(), Err(Error::Parse(_))));

        let mut wrong_rng = ck;
        wrong_rng.rng.next_step += 1;
        assert!(matches!(wrong_rng.into_trainer(), Err(Error::State(_))));
    }

    #[test]
    fn structural_drift_is_rejected() {
        let records = tiny_records(4, 17);
        let mut tr = Trainer::<f64>::new(tiny_config()).unwrap();
        run_steps(&mut tr, &records, 1);
        let ck = Checkpoint::from_trainer(&tr);

        // A renamed parameter.
        let mut renamed = ck.clone();
        renamed.online[0].0 = "bogus".into();
        assert!(matches!(renamed.into_trainer(), Err(Error::State(_))));

        // A reshaped parameter.
        let mut reshaped = ck.clone();
        let numel = reshaped.online[2].1.numel();
        reshaped.online[2].1 = Tensor::from_vec(vec![numel], vec![0.0; numel]).unwrap();
        assert!(matches!(reshaped.into_trainer(), Err(Error::State(_))));

        // A truncated parameter list.
        let mut truncated = ck.clone();
        truncated.online.pop();
        assert!(matches!(truncated.into_trainer(), Err(Error::State(_))));

        // A config echo that disagrees with the stored codebook.
        let mut wrong_cfg = ck.clone();
        wrong_cfg.config.codebook_size = 16;
        assert!(matches!(wrong_cfg.into_trainer(), Err(Error::State(_))));

        // Optimizer weight decay drifted from the config echo.
        let mut wrong_wd = ck;
        wrong_wd.opt.weight_decay += 0.5;
        assert!(matches!(wrong_wd.into_trainer(), Err(Error::State(_))));
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(Checkpoint::<f64>::from_json("{\"format\": \"fgvl-checkpoint\"").is_err());
        assert!(Checkpoint::<f64>::from_json("not json at all").is_err());
    }

    #[test]
    fn f32_checkpoints_round_trip() {
        let records = tiny_records(4, 19);
        let mut tr = Trainer::<f32>::new(tiny_config()).unwrap();
        let schedule = Schedule::new(&tr.cfg, records.len()).unwrap();
        tr.step_once(&records, &[0, 1], &schedule).unwrap();
        let ck = Checkpoint::from_trainer(&tr);
        let back = Checkpoint::<f32>::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let restored = back.into_trainer().unwrap();
        assert_eq!(collect_params(&restored.pair.online), collect_params(&tr.pair.online));
    }
}
