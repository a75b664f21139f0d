//! Dataset generation and serialization.
//!
//! Training records are (scene, rendered features, caption) triples with
//! precomputed caption perturbations. Evaluation items pair each scene with a
//! minimally contrasting one (one attribute exchanged between the objects, or
//! the cells swapped) so that each caption matches exactly one of the two
//! images — verified against scene metadata at construction time.
//!
//! Files are line-delimited JSON with a versioned header line. `serde_json`
//! prints floats in shortest round-trip form, so reload is lossless.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::scene::{render, Scene};
use crate::data::vocab::{caption_tokens, parse_caption, Vocab};
use crate::error::{Error, Result};
use crate::negatives::{applicable_rules, perturb_caption, PerturbRule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DATASET_FORMAT: &str = "fgvl-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub noise_std: f64,
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { grid_rows: 4, grid_cols: 4, noise_std: 0.05, vocab_size: 48 }
    }
}

impl DataConfig {
    pub fn patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches() < 2 {
            return Err(Error::Config(format!(
                "grid {}x{} cannot place two objects",
                self.grid_rows, self.grid_cols
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std {} invalid", self.noise_std)));
        }
        Vocab::standard(self.vocab_size)?;
        Ok(())
    }
}

pub fn generate_scene<R: Rng>(cfg: &DataConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    Ok(Scene::sample(cfg.grid_rows, cfg.grid_cols, rng))
}

/// A caption variant produced by one perturbation rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedCaption {
    pub rule: PerturbRule,
    pub tokens: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub id: u64,
    pub scene: Scene,
    /// Flattened `patches × PATCH_F` features, row-major.
    pub image: Vec<f64>,
    pub caption: Vec<u16>,
    /// One variant per perturbation rule applicable to the scene.
    pub perturbed: Vec<PerturbedCaption>,
}

/// How the contrasting scene of an eval item differs from the base scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContrastRule {
    ColorSwap,
    SizeSwap,
    ShapeSwap,
    /// Objects exchange cells; the relation is re-derived for the new layout.
    RelationFlip,
}

impl ContrastRule {
    pub const ALL: [ContrastRule; 4] = [
        ContrastRule::ColorSwap,
        ContrastRule::SizeSwap,
        ContrastRule::ShapeSwap,
        ContrastRule::RelationFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContrastRule::ColorSwap => "color-swap",
            ContrastRule::SizeSwap => "size-swap",
            ContrastRule::ShapeSwap => "shape-swap",
            ContrastRule::RelationFlip => "relation-flip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: u64,
    pub rule: ContrastRule,
    pub scenes: [Scene; 2],
    pub images: [Vec<f64>; 2],
    pub captions: [Vec<u16>; 2],
    /// Perturbations of caption 0, judged against scene 0.
    pub aro: Vec<PerturbedCaption>,
}

/// Contrast rules that yield a provably cross-mismatched scene pair.
///
/// Attribute swaps need that attribute to differ between the objects; a cell
/// swap needs the full (shape, color, size) descriptions to differ, otherwise
/// the caption matches both layouts.
pub fn applicable_contrasts(scene: &Scene) -> Vec<ContrastRule> {
    let [a, b] = &scene.objects;
    let mut rules = Vec::new();
    if a.color != b.color {
        rules.push(ContrastRule::ColorSwap);
    }
    if a.size != b.size {
        rules.push(ContrastRule::SizeSwap);
    }
    if a.shape != b.shape {
        rules.push(ContrastRule::ShapeSwap);
    }
    if (a.shape, a.color, a.size) != (b.shape, b.color, b.size) {
        rules.push(ContrastRule::RelationFlip);
    }
    rules
}

pub fn contrast_scene<R: Rng>(scene: &Scene, rule: ContrastRule, rng: &mut R) -> Result<Scene> {
    if !applicable_contrasts(scene).contains(&rule) {
        return Err(Error::RuleInapplicable(format!(
            "{} cannot contrast this scene",
            rule.name()
        )));
    }
    let mut out = *scene;
    match rule {
        ContrastRule::ColorSwap => {
            let tmp = out.objects[0].color;
            out.objects[0].color = out.objects[1].color;
            out.objects[1].color = tmp;
        }
        ContrastRule::SizeSwap => {
            let tmp = out.objects[0].size;
            out.objects[0].size = out.objects[1].size;
            out.objects[1].size = tmp;
        }
        ContrastRule::ShapeSwap => {
            let tmp = out.objects[0].shape;
            out.objects[0].shape = out.objects[1].shape;
            out.objects[1].shape = tmp;
        }
        ContrastRule::RelationFlip => out = scene.with_cells_swapped(rng),
    }
    Ok(out)
}

fn perturbations_for<R: Rng>(
    caption: &[u16],
    scene: &Scene,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Vec<PerturbedCaption>> {
    let mut out = Vec::new();
    for rule in applicable_rules(scene) {
        let p = perturb_caption(caption, scene, vocab, rule, rng)?;
        out.push(PerturbedCaption { rule, tokens: p.perturbed });
    }
    Ok(out)
}

/// Deterministic per-record RNG: one master seed, one ChaCha stream per id.
fn record_rng(master_seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(id);
    rng
}

pub fn make_train_record(id: u64, cfg: &DataConfig, master_seed: u64) -> Result<TrainRecord> {
    let vocab = Vocab::standard(cfg.vocab_size)?;
    let mut rng = record_rng(master_seed, id);
    let scene = generate_scene(cfg, &mut rng)?;
    let image = render(&scene, cfg.grid_rows, cfg.grid_cols, cfg.noise_std, &mut rng);
    let caption = caption_tokens(&scene, &vocab)?;
    let parsed = parse_caption(&caption, &vocab)?;
    if !parsed.holds_in(&scene) {
        return Err(Error::Contract("caption does not describe its scene".into()));
    }
    let perturbed = perturbations_for(&caption, &scene, &vocab, &mut rng)?;
    Ok(TrainRecord { id, scene, image, caption, perturbed })
}

pub fn make_eval_item(id: u64, cfg: &DataConfig, master_seed: u64) -> Result<EvalItem> {
    let vocab = Vocab::standard(cfg.vocab_size)?;
    let mut rng = record_rng(master_seed, id);
    loop {
        let base = generate_scene(cfg, &mut rng)?;
        let rules = applicable_contrasts(&base);
        if rules.is_empty() {
            // Identical twin objects admit no sound contrast; resample.
            continue;
        }
        let rule = rules[rng.gen_range(0..rules.len())];
        let other = contrast_scene(&base, rule, &mut rng)?;
        let scenes = [base, other];
        let captions = [
            caption_tokens(&scenes[0], &vocab)?,
            caption_tokens(&scenes[1], &vocab)?,
        ];
        // The defining property of the item, checked rather than assumed.
        for (ci, cap) in captions.iter().enumerate() {
            let parsed = parse_caption(cap, &vocab)?;
            for (si, scene) in scenes.iter().enumerate() {
                let want = ci == si;
                if parsed.holds_in(scene) != want {
                    return Err(Error::Contract(format!(
                        "eval item {id}: caption {ci} vs scene {si} expected match={want}"
                    )));
                }
            }
        }
        let images = [
            render(&scenes[0], cfg.grid_rows, cfg.grid_cols, cfg.noise_std, &mut rng),
            render(&scenes[1], cfg.grid_rows, cfg.grid_cols, cfg.noise_std, &mut rng),
        ];
        let aro = perturbations_for(&captions[0], &scenes[0], &vocab, &mut rng)?;
        return Ok(EvalItem { id, rule, scenes, images, captions, aro });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    /// "train" or "eval".
    pub kind: String,
    pub count: usize,
    pub seed: u64,
    pub config: DataConfig,
}

impl DatasetHeader {
    fn new(kind: &str, count: usize, seed: u64, config: &DataConfig) -> DatasetHeader {
        DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            kind: kind.into(),
            count,
            seed,
            config: config.clone(),
        }
    }

    fn check(&self, kind: &str) -> Result<()> {
        if self.format != DATASET_FORMAT {
            return Err(Error::Parse(format!("not a dataset file: format {:?}", self.format)));
        }
        if self.version != DATASET_VERSION {
            return Err(Error::Parse(format!(
                "unsupported dataset version {} (expected {DATASET_VERSION})",
                self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Parse(format!(
                "expected a {kind} dataset, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn write_lines<S: Serialize>(
    path: &Path,
    header: &DatasetHeader,
    records: &[S],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<D: for<'de> Deserialize<'de>>(
    path: &Path,
    kind: &str,
) -> Result<(DatasetHeader, Vec<D>)> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let head_line = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty dataset file", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&head_line)?;
    header.check(kind)?;
    let mut out = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    if out.len() != header.count {
        return Err(Error::Parse(format!(
            "{}: header promises {} records, found {}",
            path.display(),
            header.count,
            out.len()
        )));
    }
    Ok((header, out))
}

pub fn write_train(path: &Path, records: &[TrainRecord], seed: u64, cfg: &DataConfig) -> Result<()> {
    write_lines(path, &DatasetHeader::new("train", records.len(), seed, cfg), records)
}

pub fn load_train(path: &Path) -> Result<(DatasetHeader, Vec<TrainRecord>)> {
    read_lines(path, "train")
}

pub fn write_eval(path: &Path, items: &[EvalItem], seed: u64, cfg: &DataConfig) -> Result<()> {
    write_lines(path, &DatasetHeader::new("eval", items.len(), seed, cfg), items)
}

pub fn load_eval(path: &Path) -> Result<(DatasetHeader, Vec<EvalItem>)> {
    read_lines(path, "eval")
}

/// Generates `n` records, splits them `train_ratio` / rest, and writes
/// `train.jsonl` + `eval.jsonl` under `dir`. Record ids are globally unique
/// across the two splits (their RNG streams never collide).
pub fn emit_dataset(
    n: usize,
    train_ratio: f64,
    cfg: &DataConfig,
    master_seed: u64,
    dir: &Path,
) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::Config("dataset size must be ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(Error::Config(format!("train ratio {train_ratio} outside [0, 1]")));
    }
    cfg.validate()?;
    let n_train = (n as f64 * train_ratio).floor() as usize;
    let train: Vec<TrainRecord> = (0..n_train)
        .map(|i| make_train_record(i as u64, cfg, master_seed))
        .collect::<Result<_>>()?;
    let eval: Vec<EvalItem> = (n_train..n)
        .map(|i| make_eval_item(i as u64, cfg, master_seed))
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(dir)?;
    write_train(&dir.join("train.jsonl"), &train, master_seed, cfg)?;
    write_eval(&dir.join("eval.jsonl"), &eval, master_seed, cfg)?;
    Ok((train.len(), eval.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::PATCH_F;

    #[test]
    fn train_records_are_faithful_and_deterministic() {
        let cfg = DataConfig::default();
        let vocab = Vocab::standard(cfg.vocab_size).unwrap();
        for id in 0..200 {
            let r = make_train_record(id, &cfg, 7).unwrap();
            assert_eq!(r.image.len(), cfg.patches() * PATCH_F);
            let parsed = parse_caption(&r.caption, &vocab).unwrap();
            assert!(parsed.holds_in(&r.scene));
            assert_eq!(r.perturbed.len(), applicable_rules(&r.scene).len());
            for p in &r.perturbed {
                if let Ok(parsed) = parse_caption(&p.tokens, &vocab) {
                    assert!(!parsed.holds_in(&r.scene), "perturbation must be false");
                }
            }
            let again = make_train_record(id, &cfg, 7).unwrap();
            assert_eq!(r, again);
        }
        // Different master seed ⇒ different content (spot check).
        let a = make_train_record(0, &cfg, 7).unwrap();
        let b = make_train_record(0, &cfg, 8).unwrap();
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn eval_items_cross_mismatch_by_construction() {
        let cfg = DataConfig::default();
        let vocab = Vocab::standard(cfg.vocab_size).unwrap();
        for id in 0..300 {
            let item = make_eval_item(id, &cfg, 11).unwrap();
            for ci in 0..2 {
                let parsed = parse_caption(&item.captions[ci], &vocab).unwrap();
                for si in 0..2 {
                    assert_eq!(parsed.holds_in(&item.scenes[si]), ci == si);
                }
            }
            assert!(!item.aro.is_empty());
            for neg in &item.aro {
                if let Ok(parsed) = parse_caption(&neg.tokens, &vocab) {
                    assert!(!parsed.holds_in(&item.scenes[0]));
                }
            }
            assert_eq!(item.images[0].len(), cfg.patches() * PATCH_F);
        }
    }

    #[test]
    fn attribute_contrast_changes_exactly_two_caption_positions() {
        let cfg = DataConfig::default();
        let mut seen = 0;
        for id in 0..400 {
            let item = make_eval_item(id, &cfg, 3).unwrap();
            if matches!(item.rule, ContrastRule::RelationFlip) {
                continue;
            }
            let diff = item.captions[0]
                .iter()
                .zip(&item.captions[1])
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(diff, 2, "attribute swap must alter exactly two tokens");
            seen += 1;
        }
        assert!(seen > 50);
    }

    #[test]
    fn contrast_scene_rejects_inapplicable_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DataConfig::default();
        loop {
            let s = generate_scene(&cfg, &mut rng).unwrap();
            if s.objects[0].color == s.objects[1].color {
                assert!(matches!(
                    contrast_scene(&s, ContrastRule::ColorSwap, &mut rng),
                    Err(Error::RuleInapplicable(_))
                ));
                break;
            }
        }
    }

    #[test]
    fn emit_and_reload_round_trip_is_lossless() {
        let dir = std::env::temp_dir().join(format!("fgvl-ds-{}", std::process::id()));
        let cfg = DataConfig::default();
        let (nt, ne) = emit_dataset(100, 0.8, &cfg, 42, &dir).unwrap();
        assert_eq!((nt, ne), (80, 20));
        let (th, train) = load_train(&dir.join("train.jsonl")).unwrap();
        let (eh, eval) = load_eval(&dir.join("eval.jsonl")).unwrap();
        assert_eq!(th.count, 80);
        assert_eq!(eh.count, 20);
        assert_eq!(th.config, cfg);
        // No id overlap across splits.
        for r in &train {
            assert!(eval.iter().all(|e| e.id != r.id));
        }
        // Field-for-field equality against regeneration, floats included.
        for r in &train {
            assert_eq!(*r, make_train_record(r.id, &cfg, 42).unwrap());
        }
        for e in &eval {
            assert_eq!(*e, make_eval_item(e.id, &cfg, 42).unwrap());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loader_rejects_mismatched_files() {
        let dir = std::env::temp_dir().join(format!("fgvl-ds-bad-{}", std::process::id()));
        let cfg = DataConfig::default();
        emit_dataset(10, 0.5, &cfg, 1, &dir).unwrap();
        assert!(load_train(&dir.join("eval.jsonl")).is_err());
        assert!(load_eval(&dir.join("train.jsonl")).is_err());
        assert!(load_train(&dir.join("missing.jsonl")).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn config_validation() {
        let bad = DataConfig { grid_rows: 1, grid_cols: 1, ..DataConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DataConfig { noise_std: f64::NAN, ..DataConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DataConfig { vocab_size: 5, ..DataConfig::default() };
        assert!(bad.validate().is_err());
        assert!(emit_dataset(0, 0.8, &DataConfig::default(), 1, Path::new("/tmp")).is_err());
    }
}
