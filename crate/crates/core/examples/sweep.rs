//! Batch-size sweep on the reference task, printing accuracy and mean BN ratio.
//!
//! cargo run --release --example sweep -- [epochs] [seeds] [norms...]

use std::time::Instant;

use snlab::trainer::{make_dataset, train, DatasetSpec, ModelSpec, NormKind, TrainConfig};

fn main() -> snlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let defaults = TrainConfig::default();
    let epochs: usize = args.first().map_or(defaults.epochs, |s| s.parse().expect("epochs"));
    let seeds: u64 = args.get(1).map_or(3, |s| s.parse().expect("seeds"));
    let norms: Vec<NormKind> = if args.len() > 2 {
        args[2..].iter().map(|s| NormKind::parse(s)).collect::<snlab::Result<_>>()?
    } else {
        vec![NormKind::Bn, NormKind::Sn]
    };
    for seed in 0..seeds {
        let ds = make_dataset(&DatasetSpec {
            seed,
            ..DatasetSpec::default()
        })?;
        for &norm in &norms {
            for batch in [32, 8, 2] {
                let cfg = TrainConfig {
                    batch_per_partition: batch,
                    epochs,
                    decay_epochs: vec![epochs * 7 / 10],
                    seed,
                    ..defaults.clone()
                };
                let spec = ModelSpec {
                    norm,
                    ..ModelSpec::default()
                };
                let t = Instant::now();
                let r = train(&spec, &ds, &cfg)?;
                println!(
                    "seed {seed} {:>4} batch {batch:>2}: eval {:.4} mean w_bn {} ({:.1}s)",
                    norm.name(),
                    r.final_eval_acc.unwrap_or(f64::NAN),
                    r.mean_bn_ratio().map_or("-".into(), |w| format!("{w:.3}")),
                    t.elapsed().as_secs_f64()
                );
            }
        }
    }
    Ok(())
}
