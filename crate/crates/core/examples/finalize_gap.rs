//! Batch-average vs moving-average finalization on the reference task.
//!
//! cargo run --release --example finalize_gap -- [seed] [stat_momentum]

use snlab::inference::moving_average_finalize;
use snlab::trainer::{evaluate, finalize, make_dataset, train, DatasetSpec, ModelSpec, TrainConfig};

fn main() -> snlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map_or(0, |s| s.parse().expect("seed"));
    let momentum: f64 = args.get(1).map_or(0.1, |s| s.parse().expect("momentum"));
    let ds = make_dataset(&DatasetSpec {
        seed,
        ..DatasetSpec::default()
    })?;
    let spec = ModelSpec {
        momentum,
        ..ModelSpec::default()
    };
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let report = train(&spec, &ds, &cfg)?;
    let mut moving = report.model.clone();
    moving_average_finalize(&mut moving)?;
    println!("moving average: {:.4}", evaluate(&moving, &ds.eval)?);
    for batches in [4, 16, 64, 256] {
        let c = TrainConfig {
            finalize_batches: Some(batches),
            ..cfg.clone()
        };
        let m = finalize(&report.model, &ds, &c)?;
        println!("batch average over {batches:>3} batches: {:.4}", evaluate(&m, &ds.eval)?);
    }
    Ok(())
}
