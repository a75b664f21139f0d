use fgvl_core::data::{make_train_record, DataConfig};
use fgvl_core::params::Parameterized;
use fgvl_core::train::*;
use fgvl_core::tape::Tape;
use std::time::Instant;

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.model.embed_dim = 16;
    cfg.model.num_heads = 2;
    cfg.model.num_layers = 1;
    cfg.model.joint_dim = 8;
    cfg.model.max_text_len = 10;
    cfg.batch_size = 2;
    cfg.queue_size = 6;
    cfg.codebook_size = 8;
    let dc = DataConfig::default();
    let records: Vec<_> = (0..4u64).map(|i| make_train_record(i, &dc, 1).unwrap()).collect();
    let tr = Trainer::<f64>::new(cfg).unwrap();
    println!("params: {}", tr.pair.online.num_params());
    let plan = record_plan(&tr.pair.online, &tr.pair.momentum, &tr.book, &tr.queue_v, &tr.queue_t,
        &records, &[0, 3], tr.vocab(), &tr.cfg.nva(), 2, 0.25, 0,
        &mut stream_rng(1, 0xF000_0000_0000_0000)).unwrap();
    let t0 = Instant::now();
    let n = 200;
    for _ in 0..n {
        let mut t = Tape::new();
        let f = build_step_loss(&mut t, &tr.pair.online, &tr.book, &records, &plan, BuildMode::FdCheck).unwrap();
        std::hint::black_box(t.value(f.total).scalar_value().unwrap());
    }
    let per = t0.elapsed() / n;
    println!("{per:?} per eval; full suite ~{:?}", per * 2 * tr.pair.online.num_params() as u32);
}
