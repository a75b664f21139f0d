//! Go/no-go acceptance suite.
//!
//! Ten criteria covering the numeric core, the visual dictionary, the
//! augmentation laws, training dynamics, and the evaluation harness. Each
//! criterion prints exactly one `PASS`/`FAIL` line; the test fails if any
//! criterion does. Run with
//!
//! ```text
//! cargo test -p fgvl-core --test acceptance -- --nocapture
//! ```
//!
//! to watch the lines as they complete (cargo shows captured output only on
//! failure). The directional-gain criterion trains six models end to end and
//! dominates the runtime (~15–20 minutes on one desktop core).

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fgvl_core::checkpoint::Checkpoint;
use fgvl_core::codebook::Codebook;
use fgvl_core::data::{
    make_eval_item, make_train_record, DataConfig, EvalItem, TrainRecord, Vocab, CLS, FIRST_WORD,
    MASK, PAD,
};
use fgvl_core::eval::{
    aro_style_accuracy, evaluate, winoground_metrics, ModelScorer, RandomScorer, ScoreMode,
};
use fgvl_core::losses::{mlm_mask, MlmOutcome};
use fgvl_core::model::{Model, ModelConfig};
use fgvl_core::momentum::{FeatureQueue, MomentumPair};
use fgvl_core::negatives::{
    construct_negative_image, plan_nva, replacement_distribution, NvaConfig, ReplacementSampling,
    SaliencyScores,
};
use fgvl_core::params::Parameterized;
use fgvl_core::tape::Tape;
use fgvl_core::tensor::Tensor;
use fgvl_core::train::{build_step_loss, record_plan, BuildMode, TrainConfig, Trainer};

// ---- harness ----------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let checks: [(&str, fn() -> Result<String, String>); 10] = [
        ("quantization matches the exhaustive nearest-entry oracle", c01_quantization_oracle),
        ("dictionary EMA matches the independent recurrence", c02_ema_oracle),
        ("straight-through gradients are bit-exact", c03_straight_through),
        ("analytic gradients match central finite differences", c04_finite_differences),
        ("negative-augmentation selection and replacement laws", c05_nva_laws),
        ("masking statistics match the 15% and 80/10/10 policy", c06_mlm_statistics),
        ("momentum EMA closed form and queue FIFO oracle", c07_momentum_and_queue),
        ("random scorer calibrates the evaluation metrics", c08_metric_calibration),
        ("fine-grained training beats the stage-1-only ablation", c09_directional_gain),
        ("same-seed training runs are byte-identical", c10_determinism),
    ];
    let mut lines = Vec::new();
    let mut all_ok = true;
    for (i, (name, check)) in checks.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let dt = fmt_dur(started.elapsed());
        let line = match outcome {
            Ok(Ok(detail)) => format!("criterion {:2} PASS [{dt:>8}] {name} — {detail}", i + 1),
            Ok(Err(detail)) => {
                all_ok = false;
                format!("criterion {:2} FAIL [{dt:>8}] {name} — {detail}", i + 1)
            }
            Err(panic) => {
                all_ok = false;
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "opaque panic".into());
                format!("criterion {:2} FAIL [{dt:>8}] {name} — panicked: {msg}", i + 1)
            }
        };
        println!("{line}");
        lines.push(line);
    }
    assert!(all_ok, "acceptance criteria failed:\n{}", lines.join("\n"));
}

fn fmt_dur(d: Duration) -> String {
    if d.as_secs() >= 1 {
        format!("{:.1}s", d.as_secs_f64())
    } else {
        format!("{}ms", d.as_millis())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn es<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- criterion 1: quantization vs exhaustive oracle -------------------------------

/// Independent nearest-entry search: squared Euclidean distance, strict
/// improvement only, so ties keep the lowest index.
fn oracle_nearest(entries: &Tensor<f64>, v: &[f64]) -> usize {
    let (m, c) = entries.dims2().unwrap();
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for j in 0..m {
        let row = entries.row(j);
        let mut d = 0.0;
        for i in 0..c {
            let diff = v[i] - row[i];
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn c01_quantization_oracle() -> Result<String, String> {
    let started = Instant::now();
    let (m, c) = (64usize, 16usize);
    let mut checked = 0usize;
    let mut tied_on_duplicate = 0usize;
    for book_seed in 0..10u64 {
        let mut r = rng(9_000 + book_seed);
        let mut entries = Tensor::<f64>::randn(&[m, c], 1.0, &mut r);
        // Entry 40 duplicates entry 7: every query resolves the tie between
        // them, and the winner must always be the lower index.
        let dup = entries.row(7).to_vec();
        entries.row_mut(40).copy_from_slice(&dup);
        let book = Codebook::from_parts(entries.clone(), 0.99, vec![0; m], 0).map_err(es)?;

        let mut queries: Vec<Vec<f64>> = (0..1000)
            .map(|_| Tensor::<f64>::randn(&[c], 1.0, &mut r).data().to_vec())
            .collect();
        // Exact hits on every entry row, including the duplicated pair.
        for j in 0..m {
            queries.push(entries.row(j).to_vec());
        }

        for q in &queries {
            let want = oracle_nearest(&entries, q);
            let got = book.quantize_one(q);
            if got != want {
                return Err(format!(
                    "codebook seed {book_seed}: quantize_one picked {got}, oracle picked {want}"
                ));
            }
            if want == 7 {
                tied_on_duplicate += 1;
            }
            checked += 1;
        }
        // The batched path must agree with the scalar path.
        let batch = Tensor::from_rows(&queries).map_err(es)?;
        let assignments = book.quantize(&batch).map_err(es)?;
        for (i, q) in queries.iter().enumerate() {
            if assignments[i] != book.quantize_one(q) {
                return Err(format!("batch/scalar disagreement at query {i}"));
            }
        }
        if assignments.contains(&40) {
            return Err("a tie against the duplicated entry resolved upward".into());
        }
    }
    let dt = started.elapsed();
    if dt > Duration::from_secs(5) {
        return Err(format!("took {dt:?}, budget is 5s"));
    }
    Ok(format!(
        "{checked} queries over 10 codebooks ({m}x{c}) agree exactly; \
         {tied_on_duplicate} resolved a duplicate-entry tie downward"
    ))
}

// ---- criterion 2: dictionary EMA vs independent recurrence ------------------------

fn c02_ema_oracle() -> Result<String, String> {
    let (m, c, gamma) = (16usize, 8usize, 0.97f64);
    let mut r = rng(2_020);
    let entries = Tensor::<f64>::randn(&[m, c], 1.0, &mut r);
    let mut book = Codebook::from_parts(entries.clone(), gamma, vec![0; m], 0).map_err(es)?;

    // Shadow state evolves by the recurrence written out longhand:
    // e_j <- gamma*e_j + (1-gamma)*mean(assigned vectors), skipped when no
    // vector was assigned to j.
    let mut shadow: Vec<Vec<f64>> = (0..m).map(|j| entries.row(j).to_vec()).collect();
    let mut shadow_usage = vec![0u64; m];
    let mut shadow_total = 0u64;

    let mut max_dev = 0.0f64;
    let mut skipped_checked = 0usize;
    for batch_no in 0..100 {
        let n = 1 + (batch_no % 13);
        let vectors = Tensor::<f64>::randn(&[n, c], 1.0, &mut r);
        let assignments = book.quantize(&vectors).map_err(es)?;

        let mut sums = vec![vec![0.0f64; c]; m];
        let mut counts = vec![0usize; m];
        for (i, &j) in assignments.iter().enumerate() {
            counts[j] += 1;
            for (d, s) in vectors.row(i).iter().zip(sums[j].iter_mut()) {
                *s += d;
            }
        }
        let before = book.entries().clone();
        book.ema_update(&vectors, &assignments).map_err(es)?;

        for j in 0..m {
            if counts[j] == 0 {
                // Untouched entries must keep their exact bit pattern.
                for (a, b) in before.row(j).iter().zip(book.entries().row(j)) {
                    if a.to_bits() != b.to_bits() {
                        return Err(format!("entry {j} moved in batch {batch_no} with no vectors"));
                    }
                }
                skipped_checked += 1;
                continue;
            }
            for d in 0..c {
                let mean = sums[j][d] / counts[j] as f64;
                shadow[j][d] = gamma * shadow[j][d] + (1.0 - gamma) * mean;
                let dev = (shadow[j][d] - book.entries().row(j)[d]).abs();
                max_dev = max_dev.max(dev);
            }
            shadow_usage[j] += counts[j] as u64;
        }
        shadow_total += n as u64;
    }
    if max_dev > 1e-10 {
        return Err(format!("max entry deviation {max_dev:.3e} exceeds 1e-10"));
    }
    if book.usage() != shadow_usage.as_slice() || book.total_assignments() != shadow_total {
        return Err("usage accounting disagrees with the shadow tallies".into());
    }
    Ok(format!(
        "100 batches: max entry deviation {max_dev:.2e} (<= 1e-10); \
         {skipped_checked} zero-count entries stayed bit-identical; usage tallies agree"
    ))
}

// ---- criterion 3: straight-through estimator --------------------------------------

/// Shared composite head: affine -> gelu -> softmax -> cross-entropy, plus a
/// quadratic side branch so the bottleneck output feeds two paths.
fn composite_grad(x_leaf_values: (Tensor<f64>, Option<Tensor<f64>>), seed: u64) -> Vec<u64> {
    let (locals, quantized) = x_leaf_values;
    let mut r = rng(7_000 + seed);
    let w = Tensor::<f64>::randn(&[6, 5], 0.5, &mut r);
    let b = Tensor::<f64>::randn(&[5], 0.5, &mut r);
    let mut one_hot = vec![0.0f64; 4 * 5];
    for row in 0..4 {
        one_hot[row * 5 + r.gen_range(0..5)] = 1.0;
    }
    let y = Tensor::from_vec(vec![4, 5], one_hot).unwrap();

    let mut tape = Tape::<f64>::new();
    let leaf = tape.param(locals);
    let x = match quantized {
        Some(q) => tape.straight_through(leaf, q).unwrap(),
        None => leaf,
    };
    let wv = tape.constant(w);
    let bv = tape.constant(b);
    let yv = tape.constant(y);
    let a = tape.matmul(x, wv).unwrap();
    let a = tape.add_row_broadcast(a, bv).unwrap();
    let g = tape.gelu(a).unwrap();
    let p = tape.softmax_rows(g, 1.0).unwrap();
    let ce = tape.cross_entropy_rows(p, yv).unwrap();
    let sq = tape.mul_elem(x, x).unwrap();
    let s = tape.sum_all(sq).unwrap();
    let s = tape.scale(s, 0.05).unwrap();
    let loss = tape.add(ce, s).unwrap();
    tape.backward(loss).unwrap();
    tape.grad(leaf).unwrap().iter().map(|g| g.to_bits()).collect()
}

fn c03_straight_through() -> Result<String, String> {
    for seed in 0..10u64 {
        let mut r = rng(3_000 + seed);
        let locals = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
        let quantized = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
        // Graph A: locals pass through the straight-through bottleneck that
        // substitutes the quantized values. Graph B: the quantized values are
        // themselves the parameter leaf. Downstream is identical, so the
        // gradients reaching the leaf must agree bit for bit.
        let through = composite_grad((locals, Some(quantized.clone())), seed);
        let direct = composite_grad((quantized, None), seed);
        if through != direct {
            return Err(format!("seed {seed}: gradient bit patterns diverge"));
        }
    }
    Ok("10 composite graphs: bottleneck gradients equal direct-value gradients bit for bit".into())
}

// ---- criterion 4: full finite-difference sweep -------------------------------------

fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            embed_dim: 16,
            num_heads: 2,
            num_layers: 1,
            joint_dim: 8,
            max_text_len: 10,
            ..ModelConfig::default()
        },
        batch_size: 2,
        warmup_iters: 4,
        queue_size: 6,
        codebook_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn c04_finite_differences() -> Result<String, String> {
    let started = Instant::now();
    let tr = Trainer::<f64>::new(tiny_train_config(1_234)).map_err(es)?;
    let dcfg = DataConfig::default();
    let records: Vec<TrainRecord> = (0..2)
        .map(|i| make_train_record(i, &dcfg, 77))
        .collect::<Result<_, _>>()
        .map_err(es)?;

    // A stage-2 step with distillation active exercises every loss term.
    let plan = record_plan(
        &tr.pair.online,
        &tr.pair.momentum,
        &tr.book,
        &tr.queue_v,
        &tr.queue_t,
        &records,
        &[0, 1],
        tr.vocab(),
        &tr.cfg.nva(),
        2,
        0.4,
        7,
        &mut rng(55),
    )
    .map_err(es)?;

    let grads_for = |mode: BuildMode| -> Result<Vec<Vec<f64>>, String> {
        let mut tape = Tape::<f64>::new();
        let fwd = build_step_loss(&mut tape, &tr.pair.online, &tr.book, &records, &plan, mode)
            .map_err(es)?;
        tape.backward(fwd.total).map_err(es)?;
        Ok(tape
            .param_leaves()
            .into_iter()
            .map(|leaf| match tape.grad(leaf) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(leaf).numel()],
            })
            .collect())
    };
    let analytic = grads_for(BuildMode::FdCheck)?;
    let train_mode = grads_for(BuildMode::Train)?;

    // The smooth check-mode graph must carry the same gradient the training
    // graph applies (they differ only by a frozen additive constant).
    let mut mode_gap = 0.0f64;
    for (a, b) in analytic.iter().zip(&train_mode) {
        for (&x, &y) in a.iter().zip(b) {
            mode_gap = mode_gap.max((x - y).abs() / x.abs().max(y.abs()).max(1e-8));
        }
    }
    if mode_gap > 1e-8 {
        return Err(format!("train/check-mode gradient gap {mode_gap:.3e} exceeds 1e-8"));
    }

    let eval_loss = |m: &Model<f64>| -> Result<f64, String> {
        let mut tape = Tape::<f64>::new();
        let fwd =
            build_step_loss(&mut tape, m, &tr.book, &records, &plan, BuildMode::FdCheck).map_err(es)?;
        Ok(tape.value(fwd.total).data()[0])
    };
    let nudged = |ti: usize, i: usize, h: f64| -> Model<f64> {
        let mut m = tr.pair.online.clone();
        let mut t = 0usize;
        m.visit_mut(&mut |_, ten| {
            if t == ti {
                ten.data_mut()[i] += h;
            }
            t += 1;
        });
        m
    };

    // Central differences at h = 1e-5 carry a rounding floor of about
    // eps * |loss| / (2h) ~ 1e-10, so gradients below ~1e-6 cannot be
    // resolved relatively no matter how correct the backward pass is (at
    // larger steps the same parameters agree with the analytic value to
    // five significant digits). Flooring the denominator at 1e-5 turns the
    // check into an absolute bound of 1e-9 for such near-dead parameters —
    // an order of magnitude above the noise, far below any real defect —
    // while gradients of measurable size still face the pure 1e-4 bar.
    let names = tr.pair.online.param_names();
    let h = 1e-5;
    let mut total_params = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (ti, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let f_plus = eval_loss(&nudged(ti, i, h))?;
            let f_minus = eval_loss(&nudged(ti, i, -h))?;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = g[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{i}]", names[ti]);
            }
            total_params += 1;
        }
    }
    if max_rel > 1e-4 {
        return Err(format!("max rel err {max_rel:.3e} at {worst} exceeds 1e-4"));
    }
    let dt = started.elapsed();
    if dt > Duration::from_secs(120) {
        return Err(format!("took {dt:?}, budget is 120s"));
    }
    Ok(format!(
        "all {total_params} parameters: max rel err {max_rel:.2e} (< 1e-4) at {worst}; \
         train/check-mode gradient gap {mode_gap:.1e}"
    ))
}

// ---- criterion 5: negative-augmentation laws ---------------------------------------

/// Independent top-count selection: sort by descending score, index ascending
/// on ties, take ceil(ratio*n), report ascending.
fn oracle_topk_scores(s: &[f64], ratio: f64) -> Vec<usize> {
    let n = s.len();
    let count = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let mut picked = order[..count].to_vec();
    picked.sort_unstable();
    picked
}

/// Independent cosine neighborhood: every other entry ranked by descending
/// cosine similarity (index ascending on ties), truncated to k.
fn oracle_neighbors(entries: &Tensor<f64>, j: usize, k: usize) -> Vec<usize> {
    let (m, c) = entries.dims2().unwrap();
    let norm = |row: &[f64]| row.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ej = entries.row(j);
    let nj = norm(ej);
    let mut sims: Vec<(usize, f64)> = (0..m)
        .filter(|&o| o != j)
        .map(|o| {
            let eo = entries.row(o);
            let dot: f64 = (0..c).map(|d| ej[d] * eo[d]).sum();
            (o, dot / (nj * norm(eo)))
        })
        .collect();
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    sims.truncate(k);
    sims.into_iter().map(|(o, _)| o).collect()
}

fn c05_nva_laws() -> Result<String, String> {
    let (m, c, n) = (32usize, 12usize, 16usize);
    let ncfg = NvaConfig {
        lambda: 0.5,
        ratio: 0.3,
        k: 3,
        sampling: ReplacementSampling::Softmax,
        posemb_all_rows: true,
    };
    let expected_count = 5; // ceil(0.3 * 16)
    let mut samples = 0usize;
    let mut row_checks = 0usize;
    for chunk in 0..10u64 {
        let mut r = rng(5_000 + chunk);
        let book =
            Codebook::from_parts(Tensor::<f64>::randn(&[m, c], 1.0, &mut r), 0.99, vec![0; m], 0)
                .map_err(es)?;
        for sample in 0..100usize {
            let assignments: Vec<usize> = (0..n).map(|_| r.gen_range(0..m)).collect();
            let mut s: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
            if sample % 3 == 0 {
                // Coarse quantization forces saliency ties regularly.
                for x in &mut s {
                    *x = (*x * 4.0).round() / 4.0;
                }
            }
            let scores = SaliencyScores { s_t: vec![0.0; n], s_v: vec![0.0; n], s: s.clone() };
            let plan = plan_nva(&book, &assignments, &scores, &ncfg, &mut r).map_err(es)?;

            if plan.selected.len() != expected_count {
                return Err(format!("selected {} tokens, expected {expected_count}", plan.selected.len()));
            }
            if plan.selected != oracle_topk_scores(&s, ncfg.ratio) {
                return Err(format!("selection disagrees with the top-score oracle: {:?}", plan.selected));
            }
            let mut seen = Vec::new();
            for &(h, rep) in &plan.replacement_map {
                if rep == h {
                    return Err(format!("entry {h} replaced by itself"));
                }
                if seen.contains(&h) {
                    return Err(format!("entry {h} appears twice in the replacement map"));
                }
                seen.push(h);
                let hood = oracle_neighbors(book.entries(), h, ncfg.k);
                if !hood.contains(&rep) {
                    return Err(format!("replacement {rep} for {h} outside its top-{} cosine set {hood:?}", ncfg.k));
                }
                // The audited distribution covers exactly that neighborhood
                // and sums to one.
                let dist = replacement_distribution(&book, h, ncfg.k, ncfg.sampling).map_err(es)?;
                let support: Vec<usize> = dist.iter().map(|(e, _)| *e).collect();
                let mass: f64 = dist.iter().map(|(_, p)| p).sum();
                if support != hood || (mass - 1.0).abs() > 1e-12 {
                    return Err(format!("sampling distribution for {h} is off: {dist:?}"));
                }
            }
            // Positions sharing an original entry share a replacement, and
            // every selected position has one.
            for &p in &plan.selected {
                let rep = plan
                    .replacement_for(assignments[p])
                    .ok_or_else(|| format!("no replacement planned for entry {}", assignments[p]))?;
                for &q in &plan.selected {
                    if assignments[q] == assignments[p]
                        && plan.replacement_for(assignments[q]) != Some(rep)
                    {
                        return Err(format!("positions {p} and {q} share entry {} but not a replacement", assignments[p]));
                    }
                }
            }
            samples += 1;

            if sample % 50 == 0 {
                // Constructed token rows (zero positional embedding) must be
                // exactly the dictionary rows the plan dictates.
                let quantized = book.lookup_rows(&assignments).map_err(es)?;
                let v_cls = Tensor::<f64>::randn(&[c], 1.0, &mut r).data().to_vec();
                let t_cls = Tensor::<f64>::randn(&[c], 1.0, &mut r).data().to_vec();
                let posemb = Tensor::<f64>::zeros(&[n, c]);
                let neg = construct_negative_image(
                    &v_cls, &t_cls, &quantized, &assignments, &book, &posemb, &ncfg, &mut r,
                )
                .map_err(es)?;
                if neg.tokens.row(0) != v_cls.as_slice() {
                    return Err("negative image altered the CLS row".into());
                }
                for i in 0..n {
                    let expect = if neg.plan.selected.binary_search(&i).is_ok() {
                        book.entry(neg.plan.replacement_for(assignments[i]).unwrap())
                    } else {
                        book.entry(assignments[i])
                    };
                    if neg.tokens.row(1 + i) != expect {
                        return Err(format!("negative image row {i} is not the planned entry"));
                    }
                }
                row_checks += 1;
            }
        }
    }
    Ok(format!(
        "{samples} samples: count/selection/neighborhood/consistency laws all hold; \
         {row_checks} constructed negatives matched their plans row-exactly"
    ))
}

// ---- criterion 6: masking statistics -----------------------------------------------

fn c06_mlm_statistics() -> Result<String, String> {
    let vocab = Vocab::standard(48).map_err(es)?;
    let mut r = rng(606);
    let (mut eligible, mut mask_ct, mut rand_ct, mut keep_ct) = (0usize, 0usize, 0usize, 0usize);
    let mut seq_no = 0usize;
    while eligible < 300_000 {
        let mut seq: Vec<u16> = vec![CLS as u16];
        let words = r.gen_range(4..=12);
        for _ in 0..words {
            seq.push(r.gen_range(FIRST_WORD..48) as u16);
        }
        if seq_no % 7 == 0 {
            // A literal mask token in the input must stay untouchable.
            seq.insert(2, MASK as u16);
        }
        while seq.len() < 16 {
            seq.push(PAD as u16);
        }
        seq_no += 1;
        eligible += seq.iter().filter(|&&id| !vocab.is_special(id as usize)).count();

        let mm = mlm_mask(&seq, &vocab, &mut r);
        let mut hit = vec![false; seq.len()];
        for &(pos, orig, ref outcome) in &mm.targets {
            hit[pos] = true;
            if vocab.is_special(orig as usize) {
                return Err(format!("special token {orig} selected at position {pos}"));
            }
            if seq[pos] != orig {
                return Err(format!("target at {pos} recorded id {orig}, input had {}", seq[pos]));
            }
            match *outcome {
                MlmOutcome::Mask => {
                    if mm.input[pos] != MASK as u16 {
                        return Err(format!("mask outcome at {pos} left id {}", mm.input[pos]));
                    }
                    mask_ct += 1;
                }
                MlmOutcome::Random(w) => {
                    if mm.input[pos] != w || vocab.is_special(w as usize) || w as usize >= 48 {
                        return Err(format!("random outcome at {pos} wrote id {w}"));
                    }
                    rand_ct += 1;
                }
                MlmOutcome::Keep => {
                    if mm.input[pos] != orig {
                        return Err(format!("keep outcome at {pos} changed the token"));
                    }
                    keep_ct += 1;
                }
            }
        }
        for (pos, (&a, &b)) in seq.iter().zip(&mm.input).enumerate() {
            if !hit[pos] && a != b {
                return Err(format!("unselected position {pos} changed from {a} to {b}"));
            }
        }
    }
    let selected = mask_ct + rand_ct + keep_ct;
    let rate = selected as f64 / eligible as f64;
    if (rate - 0.15).abs() > 0.005 {
        return Err(format!("selection rate {:.4} outside 15% +/- 0.5%", rate));
    }
    let (fm, fr, fk) = (
        mask_ct as f64 / selected as f64,
        rand_ct as f64 / selected as f64,
        keep_ct as f64 / selected as f64,
    );
    for (name, f, want) in [("mask", fm, 0.8), ("random", fr, 0.1), ("keep", fk, 0.1)] {
        if (f - want).abs() > 0.01 {
            return Err(format!("{name} fraction {f:.4} outside {want} +/- 0.01"));
        }
    }
    Ok(format!(
        "{eligible} eligible tokens: selection {:.2}% (15 +/- 0.5), split {:.1}/{:.1}/{:.1} \
         (80/10/10 +/- 1); specials never selected or altered",
        100.0 * rate,
        100.0 * fm,
        100.0 * fr,
        100.0 * fk
    ))
}

// ---- criterion 7: momentum EMA and feature queue ------------------------------------

struct One {
    w: Tensor<f64>,
}

impl Parameterized<f64> for One {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
        f("w", &self.w);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
        f("w", &mut self.w);
    }
}

fn c07_momentum_and_queue() -> Result<String, String> {
    // With the online weight pinned at 1 and the momentum copy starting at 0,
    // K updates of m <- mu*m + (1-mu)*w give exactly 1 - mu^K.
    let mu = 0.995f64;
    let mut pair = MomentumPair::from_parts(
        One { w: Tensor::from_vec(vec![1], vec![1.0]).map_err(es)? },
        One { w: Tensor::from_vec(vec![1], vec![0.0]).map_err(es)? },
        mu,
    )
    .map_err(es)?;
    let mut max_dev = 0.0f64;
    for k in 1..=100i32 {
        pair.step::<f64>().map_err(es)?;
        let got = pair.momentum.w.data()[0];
        let want = 1.0 - mu.powi(k);
        max_dev = max_dev.max((got - want).abs());
        if pair.online.w.data()[0] != 1.0 {
            return Err("momentum update touched the online weight".into());
        }
    }
    if max_dev > 1e-10 {
        return Err(format!("momentum deviates from 1 - mu^K by {max_dev:.3e}"));
    }

    // FIFO oracle: a bounded deque must agree with the ring buffer after
    // every push, including long after wraparound.
    let (cap, width) = (64usize, 8usize);
    let mut queue = FeatureQueue::<f64>::new(cap, width).map_err(es)?;
    let mut reference: VecDeque<Vec<f64>> = VecDeque::new();
    let mut r = rng(707);
    for push in 0..10_000usize {
        let mut row = Tensor::<f64>::randn(&[width], 1.0, &mut r).data().to_vec();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut row {
            *x /= norm;
        }
        queue.push_row(&row).map_err(es)?;
        reference.push_back(row);
        if reference.len() > cap {
            reference.pop_front();
        }
        if queue.len() != reference.len() {
            return Err(format!("length drift after push {push}"));
        }
        for (a, b) in queue.rows().iter().zip(&reference) {
            if a != &b.as_slice() {
                return Err(format!("row content drift after push {push}"));
            }
        }
    }
    // Contract checks: wrong width and non-unit rows are refused.
    if queue.push_row(&vec![0.5; width + 1]).is_ok() {
        return Err("queue accepted a row of the wrong width".into());
    }
    if queue.push_row(&vec![0.5; width]).is_ok() {
        return Err("queue accepted a non-unit row".into());
    }
    Ok(format!(
        "momentum matches 1 - mu^K to {max_dev:.1e} over 100 steps; \
         queue agreed with the FIFO oracle after each of 10000 pushes"
    ))
}

// ---- criterion 8: metric calibration -------------------------------------------------

fn c08_metric_calibration() -> Result<String, String> {
    let dcfg = DataConfig::default();
    let items: Vec<EvalItem> = (0..10_000)
        .map(|i| make_eval_item(i, &dcfg, 4_242))
        .collect::<Result<_, _>>()
        .map_err(es)?;
    let sc = RandomScorer { seed: 99 };

    let wino = winoground_metrics(&sc, &items).map_err(es)?;
    for (name, got, want) in [
        ("text", wino.text, 25.0),
        ("image", wino.image, 25.0),
        ("group", wino.group, 100.0 / 6.0),
    ] {
        if (got - want).abs() > 2.0 {
            return Err(format!("winoground {name} score {got:.2} outside {want:.2} +/- 2"));
        }
    }

    // Against one perturbation, a random scorer wins half the time.
    let mut single: Vec<EvalItem> = items.clone();
    for it in &mut single {
        it.aro.truncate(1);
    }
    let aro_one = aro_style_accuracy(&sc, &single).map_err(es)?;
    if (aro_one.overall - 50.0).abs() > 2.0 {
        return Err(format!("single-perturbation accuracy {:.2} outside 50 +/- 2", aro_one.overall));
    }
    // Every item carries exactly one order-shuffle perturbation, so that
    // rule's accuracy is an independent coin-flip estimate.
    let aro_full = aro_style_accuracy(&sc, &items).map_err(es)?;
    let shuffle = aro_full
        .by_rule
        .iter()
        .find(|ra| ra.rule == "order-shuffle")
        .and_then(|ra| ra.accuracy)
        .ok_or("no order-shuffle accuracy reported")?;
    if (shuffle - 50.0).abs() > 2.0 {
        return Err(format!("order-shuffle accuracy {shuffle:.2} outside 50 +/- 2"));
    }
    Ok(format!(
        "10000 items, random scorer: text {:.2} / image {:.2} (25 +/- 2), group {:.2} (16.7 +/- 2), \
         single-perturbation {:.2} and order-shuffle {:.2} (50 +/- 2)",
        wino.text, wino.image, wino.group, aro_one.overall, shuffle
    ))
}

// ---- criterion 9: directional gain ---------------------------------------------------

fn c09_directional_gain() -> Result<String, String> {
    let started = Instant::now();
    let dcfg = DataConfig::default();
    let records: Vec<TrainRecord> = (0..2_000)
        .map(|i| make_train_record(i, &dcfg, 31_415))
        .collect::<Result<_, _>>()
        .map_err(es)?;
    let items: Vec<EvalItem> = (0..300)
        .map(|i| make_eval_item(1_000_000 + i, &dcfg, 31_415))
        .collect::<Result<_, _>>()
        .map_err(es)?;

    let run = |seed: u64, stage1: usize, stage2: usize| -> Result<(f64, f64, f64), String> {
        let cfg = TrainConfig { stage1_epochs: stage1, stage2_epochs: stage2, seed, ..TrainConfig::default() };
        let mut tr = Trainer::<f64>::new(cfg).map_err(es)?;
        let out = tr.train(&records).map_err(es)?;
        if let Some(step) = out.diverged_at {
            return Err(format!("seed {seed} ({stage1}+{stage2} epochs) diverged at step {step}"));
        }
        let per_epoch = records.len() / tr.cfg.batch_size;
        let mean = |ms: &[fgvl_core::train::StepMetrics]| {
            ms.iter().map(|m| m.loss.total).sum::<f64>() / ms.len() as f64
        };
        let loss_ratio =
            mean(&out.metrics[out.metrics.len() - per_epoch..]) / mean(&out.metrics[..per_epoch]);
        let scorer =
            ModelScorer::new(&tr.pair.online, &tr.book, ScoreMode::ItmProbability).map_err(es)?;
        let report = evaluate(&scorer, &items).map_err(es)?;
        let attr = report
            .aro
            .by_rule
            .iter()
            .find(|ra| ra.rule == "attribute-swap")
            .and_then(|ra| ra.accuracy)
            .ok_or("no attribute-swap accuracy reported")?;
        eprintln!(
            "[acceptance 9] seed {seed} {stage1}+{stage2}: group {:.1}, attribute-swap {:.1}, \
             last/first epoch loss {:.2}, {:.0}s elapsed",
            report.winoground.group,
            attr,
            loss_ratio,
            started.elapsed().as_secs_f64()
        );
        Ok((report.winoground.group, attr, loss_ratio))
    };

    let seeds = [101u64, 202, 303];
    let (mut full_group, mut full_attr, mut abl_group, mut abl_attr) = (0.0, 0.0, 0.0, 0.0);
    let mut first_loss_ratio = None;
    for &seed in &seeds {
        let (g, a, ratio) = run(seed, 15, 5)?;
        full_group += g / seeds.len() as f64;
        full_attr += a / seeds.len() as f64;
        first_loss_ratio.get_or_insert(ratio);
        // Ablation: the same iteration budget spent entirely in stage 1, so
        // the model never sees a fine-grained negative.
        let (g, a, _) = run(seed, 20, 0)?;
        abl_group += g / seeds.len() as f64;
        abl_attr += a / seeds.len() as f64;
    }
    let dg = full_group - abl_group;
    let da = full_attr - abl_attr;
    let dt = started.elapsed();
    if dt > Duration::from_secs(1_800) {
        return Err(format!("took {dt:?}, budget is 30 minutes"));
    }
    if dg < 10.0 || da < 10.0 {
        return Err(format!(
            "gain too small: group {full_group:.1} vs {abl_group:.1} (d = {dg:+.1}), \
             attribute-swap {full_attr:.1} vs {abl_attr:.1} (d = {da:+.1})"
        ));
    }
    Ok(format!(
        "3 seeds: group {full_group:.1} vs {abl_group:.1} (d = {dg:+.1} >= 10), attribute-swap \
         {full_attr:.1} vs {abl_attr:.1} (d = {da:+.1} >= 10); last/first-epoch loss ratio {:.2}",
        first_loss_ratio.unwrap_or(f64::NAN)
    ))
}

// ---- criterion 10: bitwise determinism ----------------------------------------------

fn c10_determinism() -> Result<String, String> {
    let dcfg = DataConfig::default();
    let records: Vec<TrainRecord> = (0..6)
        .map(|i| make_train_record(i, &dcfg, 888))
        .collect::<Result<_, _>>()
        .map_err(es)?;
    let run = || -> Result<(String, String), String> {
        let mut tr = Trainer::<f64>::new(TrainConfig {
            stage1_epochs: 1,
            stage2_epochs: 1,
            seed: 777,
            ..tiny_train_config(777)
        })
        .map_err(es)?;
        let out = tr.train(&records).map_err(es)?;
        let json = Checkpoint::from_trainer(&tr).to_json().map_err(es)?;
        Ok((out.log, json))
    };
    let (log_a, ckpt_a) = run()?;
    let (log_b, ckpt_b) = run()?;
    if log_a != log_b {
        return Err("training logs differ between identical runs".into());
    }
    if ckpt_a != ckpt_b {
        return Err("serialized checkpoints differ between identical runs".into());
    }
    Ok(format!(
        "two identical runs: {} log bytes and {} checkpoint bytes match exactly",
        log_a.len(),
        ckpt_a.len()
    ))
}
