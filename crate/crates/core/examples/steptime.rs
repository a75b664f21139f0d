use fgvl_core::data::{make_train_record, DataConfig};
use fgvl_core::train::{Schedule, Trainer};
use std::time::Instant;

fn main() {
    let cfg = fgvl_core::train::TrainConfig::default();
    let dc = DataConfig::default();
    let records: Vec<_> = (0..64u64).map(|i| make_train_record(i, &dc, 1).unwrap()).collect();
    let mut tr = Trainer::<f64>::new(cfg).unwrap();
    let sched = Schedule::new(&tr.cfg, 2000).unwrap();
    // warm
    tr.step_once(&records, &(0..16).collect::<Vec<_>>(), &sched).unwrap();
    let t0 = Instant::now();
    let n = 10;
    for s in 0..n {
        let batch: Vec<usize> = (0..16).map(|i| (s * 16 + i) % 64).collect();
        tr.step_once(&records, &batch, &sched).unwrap();
    }
    let dt = t0.elapsed();
    println!("stage1: {:?} per step", dt / n as u32);
    // force stage 2 steps by jumping the counter near the end
    tr.step = sched.stage1_steps + 1;
    let t0 = Instant::now();
    for s in 0..n {
        let batch: Vec<usize> = (0..16).map(|i| (s * 16 + i) % 64).collect();
        tr.step_once(&records, &batch, &sched).unwrap();
    }
    println!("stage2: {:?} per step", t0.elapsed() / n as u32);
}
