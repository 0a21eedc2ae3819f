//! Quick training-throughput probe used while sizing the architecture.
use maskctrl::dataset::make_training_dataset;
use maskctrl::schedule::default_schedule;
use maskctrl::train::{train_toy_denoiser, TrainConfig};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let batch: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let data = make_training_dataset(64, 1).unwrap();
    let sched = default_schedule();
    let cfg = TrainConfig { steps: n, batch_size: batch, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let (_, report) = train_toy_denoiser(&data, &cfg, &sched).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{n} steps batch {batch}: {dt:.2}s total, {:.1} ms/step, first loss {:.3}, last {:.3}",
        dt * 1000.0 / n as f64,
        report.losses.first().unwrap(),
        report.losses.last().unwrap()
    );
}
