//! Pilot run for the ablation and lookback-sweep directional checks.
//! Prints per-variant averaged metrics and wall time.

use std::time::Instant;

use dualprompt_core::datagen;
use dualprompt_core::model::ModelConfig;
use dualprompt_core::pipeline::{self, TrainConfig};

fn main() {
    let series = datagen::generate(&datagen::suite_specs()[2]).expect("event-signal");
    let model_cfg = ModelConfig::default();
    let train_cfg = TrainConfig::default();

    let start = Instant::now();
    let report = pipeline::run_ablation(&series, &model_cfg, &train_cfg).expect("ablation");
    let elapsed = start.elapsed();
    println!("{}", pipeline::render_ablation_table(&report));
    println!("ablation wall time: {elapsed:.2?}");
    for row in &report.rows {
        let epochs: Vec<usize> = row.per_seed.iter().map(|s| s.stopped_epoch).collect();
        let best: Vec<usize> = row.per_seed.iter().map(|s| s.best_epoch).collect();
        println!("{:<8} stopped at {:?} best {:?}", row.variant.to_string(), epochs, best);
    }

    let start = Instant::now();
    let sweep = pipeline::sweep_lookback(&series, &model_cfg, &train_cfg, &[5, 15]).expect("sweep");
    println!("sweep wall time: {:.2?}", start.elapsed());
    for row in &sweep.rows {
        println!("lookback {:>3}  avg MSE {:.6}  avg MAE {:.6}", row.lookback, row.avg_mse, row.avg_mae);
    }
}
