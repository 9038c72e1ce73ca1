//! Trains one variant on the synthetic task and prints test metrics.
//!
//! cargo run --release -p erfseg-core --example train_synthetic -- fpa 16 2 0

use std::time::Instant;

use erfseg::model::{build_unet, NetworkSpec, Variant};
use erfseg::train::{evaluate, gen_synthetic, train, SyntheticTaskConfig, TrainConfig, TrainState};

fn main() -> erfseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = args.first().map_or("unet", String::as_str).parse()?;
    let base: usize = args.get(1).map_or(16, |s| s.parse().unwrap());
    let epochs: usize = args.get(2).map_or(2, |s| s.parse().unwrap());
    let seed: u64 = args.get(3).map_or(0, |s| s.parse().unwrap());
    let data = gen_synthetic::<f32>(&SyntheticTaskConfig {
        n_train: 200,
        n_val: 28,
        n_test: 58,
        ..Default::default()
    })?;
    let spec = NetworkSpec::new(variant).with_base_channels(base);
    let (net, params) = build_unet::<f32>(&spec, seed)?;
    let count = params.count_params();
    let cfg = TrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    let start = Instant::now();
    let state = train(&net, &data, &cfg, TrainState::fresh(params), |s| {
        let r = s.curves.last().unwrap();
        println!(
            "epoch {:3} loss {:.4} val_iou {:.4} val_fn {:.4} ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.val_iou,
            r.val_fn,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    let report = evaluate(&net, &state.best_params, &data.test, count)?;
    println!("{variant} best epoch {}\n{report}", state.best_epoch);
    Ok(())
}
