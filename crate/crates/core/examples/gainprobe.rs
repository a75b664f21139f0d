//! Trains one directional-gain arm and dumps what the acceptance criterion
//! only aggregates: per-component loss trajectories and the raw score
//! quadruples behind the winoground-style metrics, to localize whether a
//! weak gain comes from optimization, saturation, or the scoring path.

use fgvl_core::data::{make_eval_item, make_train_record, DataConfig, EvalItem, TrainRecord};
use fgvl_core::eval::{evaluate, CaptionRef, ModelScorer, ScoreMode, Scorer};
use fgvl_core::train::{TrainConfig, Trainer};

fn main() {
    let stage2: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let stage1 = 20 - stage2;
    let dcfg = DataConfig::default();
    let records: Vec<TrainRecord> =
        (0..2_000).map(|i| make_train_record(i, &dcfg, 31_415).unwrap()).collect();
    let items: Vec<EvalItem> =
        (0..300).map(|i| make_eval_item(1_000_000 + i, &dcfg, 31_415).unwrap()).collect();

    let cfg = TrainConfig { stage1_epochs: stage1, stage2_epochs: stage2, seed: 101, ..TrainConfig::default() };
    let mut tr = Trainer::<f64>::new(cfg).unwrap();
    let out = tr.train(&records).unwrap();
    assert!(out.diverged_at.is_none());
    println!("== loss trajectory (every 250 steps) ==");
    for m in out.metrics.iter().step_by(250).chain(out.metrics.last()) {
        println!(
            "step {:4} stage {} | itc {:.4} mlm {:.4} itm {:.4} total {:.4} | temp {:.4} alpha {:.2} lr {:.2e}",
            m.step, m.stage, m.loss.itc, m.loss.mlm, m.loss.itm, m.loss.total, m.temp, m.alpha, m.lr
        );
    }

    let scorer = ModelScorer::new(&tr.pair.online, &tr.book, ScoreMode::ItmProbability).unwrap();
    println!("\n== raw match probabilities, first 8 items ==");
    println!("{:>4} {:>12} {:>12} {:>12} {:>12}  {}", "item", "s00", "s01", "s10", "s11", "aro truth vs perturbed");
    for it in items.iter().take(8) {
        let s = |img: usize, cap: CaptionRef| scorer.score(it, img, cap).unwrap();
        let s00 = s(0, CaptionRef::Item(0));
        let s01 = s(0, CaptionRef::Item(1));
        let s10 = s(1, CaptionRef::Item(0));
        let s11 = s(1, CaptionRef::Item(1));
        let aro: Vec<String> = (0..it.aro.len())
            .map(|p| format!("{:.6} ({})", s(0, CaptionRef::Perturbed(p)), it.aro[p].rule.name()))
            .collect();
        println!(
            "{:>4} {:>12.8} {:>12.8} {:>12.8} {:>12.8}  truth {:.6} vs {}",
            it.id - 1_000_000,
            s00,
            s01,
            s10,
            s11,
            s00,
            aro.join(", ")
        );
    }

    let report = evaluate(&scorer, &items).unwrap();
    println!("\n== report ({stage1}+{stage2}) ==\n{report}");

    let itc = ModelScorer::new(&tr.pair.online, &tr.book, ScoreMode::ItcSimilarity).unwrap();
    let r2 = evaluate(&itc, &items).unwrap();
    println!("\n== same model, contrastive-cosine scoring ==\n{r2}");
}
