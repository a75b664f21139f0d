//! `fgvl` — command-line driver for synthetic-scene vision-language
//! pretraining: dataset generation, two-stage training, evaluation, and
//! inspection tools.
//!
//! Every command accepts `--config` (a key = value file; see the README for
//! the key reference), repeatable `--set key=value` overrides, and `--seed`.
//! Precedence: built-in defaults < `--config` < `--set` < `--seed`. All
//! randomness derives from the one master seed, so every command's primary
//! outputs are byte-identical under a fixed seed.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fgvl_core::checkpoint::{load_trainer, save_trainer};
use fgvl_core::config::FileConfig;
use fgvl_core::data::{emit_dataset, load_eval, load_train, TrainRecord, Vocab};
use fgvl_core::error::{Error, Result};
use fgvl_core::eval::{
    evaluate, AntiOracleScorer, ModelScorer, OracleScorer, RandomScorer, ScoreMode,
};
use fgvl_core::negatives::{plan_nva, replacement_distribution, saliency};
use fgvl_core::scalar::as_f64;
use fgvl_core::train::{patches_tensor, stream_rng, Trainer};

#[derive(Parser)]
#[command(
    name = "fgvl",
    version,
    about = "Fine-grained vision-language pretraining on synthetic grid scenes",
    propagate_version = true
)]
struct Cli {
    /// Configuration file (key = value lines; # comments).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set batch_size=8 (repeatable).
    #[arg(long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed; overrides the config file's `seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset: train.jsonl and eval.jsonl under a directory.
    GenData {
        /// Total number of records across both splits.
        #[arg(long)]
        n: usize,
        /// Output directory (created if missing).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Fraction of records in the train split.
        #[arg(long, default_value_t = 0.9)]
        train_ratio: f64,
    },
    /// Run two-stage pretraining and write a versioned checkpoint.
    Train {
        /// Training split (train.jsonl from gen-data).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Write the per-step metrics log here instead of stdout.
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
    },
    /// Score an eval set and print the report (human table + JSON record).
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Eval split (eval.jsonl from gen-data).
        #[arg(long, value_name = "FILE")]
        items: PathBuf,
        /// Which scorer produces pair scores.
        #[arg(long, value_enum, default_value_t = ScorerKind::ModelItm)]
        scorer: ScorerKind,
        /// Emit only the machine-readable JSON record.
        #[arg(long)]
        json: bool,
    },
    /// Audit the hard-negative image plan for one training record.
    MakeNegatives {
        /// Checkpoint providing the model and visual dictionary.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Training split holding the record.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Record index within the file.
        #[arg(long)]
        index: usize,
    },
    /// Print the visual dictionary: entries, usage histogram, cross-checked totals.
    InspectCodebook {
        /// Checkpoint holding the dictionary.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
    },
    /// Score one image/caption pair with both heads (ITM probability, ITC cosine).
    ScorePair {
        /// Checkpoint providing the model and visual dictionary.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Training split holding the image record.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Record index within the file.
        #[arg(long)]
        index: usize,
        /// Caption words (space-separated); defaults to the record's own caption.
        #[arg(long, value_name = "WORDS")]
        caption: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScorerKind {
    /// Matching probability from the fused joint CLS (default).
    ModelItm,
    /// Rescaled contrastive cosine similarity.
    ModelItc,
    /// Reads item metadata; perfect by construction.
    Oracle,
    /// The oracle inverted.
    AntiOracle,
    /// Seeded uniform scores (chance-rate calibration).
    Random,
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // exits 2 on usage errors, 0 on --help/--version
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Defaults < config file < --set < --seed.
fn load_config(config: &Option<PathBuf>, set: &[String], seed: Option<u64>) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    if let Some(path) = config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    cfg.apply_settings(set)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config, &cli.set, cli.seed)?;
    match cli.cmd {
        Cmd::GenData { n, out, train_ratio } => cmd_gen_data(&cfg, n, &out, train_ratio),
        Cmd::Train { data, out, log } => cmd_train(&cfg, &data, &out, log.as_deref()),
        Cmd::Eval { ckpt, items, scorer, json } => cmd_eval(&cfg, &ckpt, &items, scorer, json),
        Cmd::MakeNegatives { ckpt, data, index } => cmd_make_negatives(&cfg, &ckpt, &data, index),
        Cmd::InspectCodebook { ckpt } => cmd_inspect_codebook(&ckpt),
        Cmd::ScorePair { ckpt, data, index, caption } => {
            cmd_score_pair(&ckpt, &data, index, caption.as_deref())
        }
    }
}

fn cmd_gen_data(cfg: &FileConfig, n: usize, out: &Path, train_ratio: f64) -> Result<()> {
    let (n_train, n_eval) = emit_dataset(n, train_ratio, &cfg.data, cfg.train.seed, out)?;
    println!(
        "wrote {n_train} train records to {} and {n_eval} eval items to {}",
        out.join("train.jsonl").display(),
        out.join("eval.jsonl").display()
    );
    Ok(())
}

fn cmd_train(cfg: &FileConfig, data: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let (header, records) = load_train(data)?;
    // The model must consume exactly the geometry this dataset was rendered
    // with; fail here rather than at the first training step.
    FileConfig { train: cfg.train.clone(), data: header.config.clone() }.validate_geometry()?;

    let mut trainer = Trainer::<f64>::new(cfg.train.clone())?;
    let outcome = trainer.train(&records)?;

    save_trainer(&trainer, out)?;
    match log {
        Some(path) => {
            fs::write(path, &outcome.log)?;
            println!("trained {} steps; checkpoint {} log {}", outcome.metrics.len(), out.display(), path.display());
        }
        None => print!("{}", outcome.log),
    }
    if let Some(step) = outcome.diverged_at {
        return Err(Error::NonFinite(format!(
            "training loss at step {step}; aborted with the last-good checkpoint at {}",
            out.display()
        )));
    }
    Ok(())
}

fn cmd_eval(
    cfg: &FileConfig,
    ckpt: &Path,
    items_path: &Path,
    kind: ScorerKind,
    json: bool,
) -> Result<()> {
    let trainer = load_trainer::<f64>(ckpt)?;
    let (_, items) = load_eval(items_path)?;
    let model_scorer = |mode| ModelScorer::new(&trainer.pair.online, &trainer.book, mode);
    let report = match kind {
        ScorerKind::ModelItm => evaluate(&model_scorer(ScoreMode::ItmProbability)?, &items)?,
        ScorerKind::ModelItc => evaluate(&model_scorer(ScoreMode::ItcSimilarity)?, &items)?,
        ScorerKind::Oracle => evaluate(&OracleScorer, &items)?,
        ScorerKind::AntiOracle => evaluate(&AntiOracleScorer, &items)?,
        ScorerKind::Random => evaluate(&RandomScorer { seed: cfg.train.seed }, &items)?,
    };
    if json {
        println!("{}", report.to_json()?);
    } else {
        print!("{report}");
        println!("record: {}", report.to_json()?);
    }
    Ok(())
}

fn record_at<'a>(records: &'a [TrainRecord], index: usize, path: &Path) -> Result<&'a TrainRecord> {
    records.get(index).ok_or_else(|| {
        Error::Index(format!("record {index} of {} (file has {})", path.display(), records.len()))
    })
}

fn cmd_make_negatives(cfg: &FileConfig, ckpt: &Path, data: &Path, index: usize) -> Result<()> {
    let trainer = load_trainer::<f64>(ckpt)?;
    let (_, records) = load_train(data)?;
    let rec = record_at(&records, index, data)?;
    let model = &trainer.pair.online;
    let book = &trainer.book;
    let nva = trainer.cfg.nva();

    let patches = patches_tensor::<f64>(rec, &model.cfg)?;
    let (v_cls, locals) = model.encode_image_values(&patches)?;
    let (t_cls, _) = model.encode_text_values(&rec.caption)?;
    let assignments = book.quantize(&locals)?;
    let quantized = book.lookup_rows(&assignments)?;
    let scores = saliency(&t_cls, &v_cls, &quantized, nva.lambda)?;
    let mut rng = stream_rng(cfg.train.seed, 0);
    let plan = plan_nva(book, &assignments, &scores, &nva, &mut rng)?;

    println!(
        "record {index}: {} local tokens, replacing {} (ratio {}, k {}, lambda {}, seed {})",
        assignments.len(),
        plan.selected.len(),
        nva.ratio,
        nva.k,
        nva.lambda,
        cfg.train.seed
    );
    println!("assignments: {assignments:?}");
    println!("saliency: {:?}", scores.s);
    println!("selected indices (most salient): {:?}", plan.selected);
    println!("replacements per position:");
    for &p in &plan.selected {
        let original = assignments[p];
        let replacement = plan.replacement_for(original).ok_or_else(|| {
            Error::Contract(format!("no replacement recorded for entry {original}"))
        })?;
        println!("  position {p}: entry {original} -> {replacement}");
    }
    println!("sampling distributions (entry p=probability, * = drawn):");
    for &(original, replacement) in &plan.replacement_map {
        let dist = replacement_distribution(book, original, nva.k, nva.sampling)?;
        let rendered: Vec<String> = dist
            .iter()
            .map(|&(e, p)| {
                format!("{e} p={p:.4}{}", if e == replacement { "*" } else { "" })
            })
            .collect();
        println!("  entry {original}: {}", rendered.join(", "));
    }
    Ok(())
}

fn cmd_inspect_codebook(ckpt: &Path) -> Result<()> {
    let trainer = load_trainer::<f64>(ckpt)?;
    let book = &trainer.book;
    println!(
        "visual dictionary: {} entries x {} dims, gamma = {}, trained {} steps",
        book.m(),
        book.c(),
        book.gamma(),
        trainer.step
    );
    println!("{:>6}  {:>10}  {:>12}", "entry", "usage", "norm");
    let mut histogram_sum = 0u64;
    for j in 0..book.m() {
        let row = book.entry(j);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let usage = book.usage()[j];
        histogram_sum += usage;
        println!("{j:>6}  {usage:>10}  {norm:>12.6}");
    }
    let total = book.total_assignments();
    println!("total assignments = {total}; histogram sum = {histogram_sum}");
    if histogram_sum != total {
        return Err(Error::State(
            "usage histogram does not sum to total assignments".into(),
        ));
    }
    Ok(())
}

fn cmd_score_pair(ckpt: &Path, data: &Path, index: usize, caption: Option<&str>) -> Result<()> {
    let trainer = load_trainer::<f64>(ckpt)?;
    let (_, records) = load_train(data)?;
    let rec = record_at(&records, index, data)?;
    let model = &trainer.pair.online;
    let vocab = Vocab::standard(model.cfg.vocab_size)?;

    let tokens: Vec<u16> = match caption {
        Some(words) => words
            .split_whitespace()
            .map(|w| vocab.id(w).map(|id| id as u16))
            .collect::<Result<_>>()?,
        None => rec.caption.clone(),
    };
    let rendered: Vec<&str> =
        tokens.iter().map(|&id| vocab.word(id as usize)).collect::<Result<_>>()?;

    let scorer = ModelScorer::new(model, &trainer.book, ScoreMode::ItmProbability)?;
    let itm = scorer.itm_probability(&rec.image, &tokens)?;
    let itc = scorer.itc_cosine(&rec.image, &tokens)?;
    println!("record {index}, caption: {}", rendered.join(" "));
    println!("itm_probability = {}", as_f64(itm));
    println!("itc_cosine = {}", as_f64(itc));
    Ok(())
}
