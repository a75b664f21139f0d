//! Probes the worst finite-difference disagreements of the stage-2 loss at
//! the acceptance-suite operating point: for the most suspect parameters,
//! prints the analytic gradient next to central differences at several step
//! sizes, to separate backward bugs (FD converges to a different value) from
//! cancellation noise on near-zero gradients (FD wanders around the analytic
//! value as h shrinks).

use fgvl_core::data::{make_train_record, DataConfig, TrainRecord};
use fgvl_core::model::{Model, ModelConfig};
use fgvl_core::params::Parameterized;
use fgvl_core::tape::Tape;
use fgvl_core::train::{build_step_loss, record_plan, BuildMode, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> TrainConfig {
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

fn main() {
    let tr = Trainer::<f64>::new(tiny(1_234)).unwrap();
    let dcfg = DataConfig::default();
    let records: Vec<TrainRecord> =
        (0..2).map(|i| make_train_record(i, &dcfg, 77).unwrap()).collect();
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
        &mut ChaCha8Rng::seed_from_u64(55),
    )
    .unwrap();

    let mut tape = Tape::<f64>::new();
    let fwd =
        build_step_loss(&mut tape, &tr.pair.online, &tr.book, &records, &plan, BuildMode::FdCheck)
            .unwrap();
    let loss0 = tape.value(fwd.total).data()[0];
    tape.backward(fwd.total).unwrap();
    let grads: Vec<Vec<f64>> = tape
        .param_leaves()
        .into_iter()
        .map(|leaf| match tape.grad(leaf) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(leaf).numel()],
        })
        .collect();
    let names = tr.pair.online.param_names();
    println!("loss at the operating point: {loss0:.6}");

    let eval_loss = |m: &Model<f64>| -> f64 {
        let mut tape = Tape::<f64>::new();
        let fwd = build_step_loss(&mut tape, m, &tr.book, &records, &plan, BuildMode::FdCheck).unwrap();
        tape.value(fwd.total).data()[0]
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

    // Pass 1: rank everything by the acceptance formula at h = 1e-5.
    let h0 = 1e-5;
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, g) in grads.iter().enumerate() {
        for (i, &an) in g.iter().enumerate() {
            let fd = (eval_loss(&nudged(ti, i, h0)) - eval_loss(&nudged(ti, i, -h0))) / (2.0 * h0);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            ranked.push((rel, ti, i));
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    println!("\nworst 12 by rel err at h=1e-5:");
    println!(
        "{:<38} {:>13} {:>13} {:>13} {:>13} {:>13} {:>9}",
        "parameter", "analytic", "fd@1e-3", "fd@1e-4", "fd@1e-5", "fd@1e-6", "rel@1e-5"
    );
    for &(rel, ti, i) in ranked.iter().take(12) {
        let an = grads[ti][i];
        let fd_at = |h: f64| (eval_loss(&nudged(ti, i, h)) - eval_loss(&nudged(ti, i, -h))) / (2.0 * h);
        println!(
            "{:<38} {:>13.6e} {:>13.6e} {:>13.6e} {:>13.6e} {:>13.6e} {:>9.3e}",
            format!("{}[{i}]", names[ti]),
            an,
            fd_at(1e-3),
            fd_at(1e-4),
            fd_at(1e-5),
            fd_at(1e-6),
            rel
        );
    }

    // How many parameters fail at each denominator floor / threshold combo.
    for floor in [1e-8f64, 1e-7, 1e-6] {
        let mut fails = 0usize;
        let mut worst = 0.0f64;
        for &(_, ti, i) in &ranked {
            let an = grads[ti][i];
            let fd = (eval_loss(&nudged(ti, i, h0)) - eval_loss(&nudged(ti, i, -h0))) / (2.0 * h0);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
            if rel > 1e-4 {
                fails += 1;
            }
            worst = worst.max(rel);
        }
        println!("floor {floor:>7.0e}: {fails} of {} fail 1e-4, worst {worst:.3e}", ranked.len());
    }
}
