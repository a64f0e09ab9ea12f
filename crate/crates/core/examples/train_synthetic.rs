//! Trains a box-only model on synthetic worlds, then tracks held-out worlds
//! and compares against greedy IoU association.
//!
//! cargo run --release --example train_synthetic -- [epochs] [checkpoint]

use std::env;

use tdlp::experiments::{iou_baseline, synthetic_split, track_and_evaluate};
use tdlp::eval::evaluate;
use tdlp::features::ModalitySpec;
use tdlp::model::{save_checkpoint, ModelConfig};
use tdlp::synth::WorldSpec;
use tdlp::tracker::TrackerConfig;
use tdlp::training::{train, TrainConfig, TrainOptions};

fn main() -> tdlp::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(15);
    let ckpt = args.next();

    let split = synthetic_split(&WorldSpec::default(), 16, 1, 4, 0)?;
    let cfg = ModelConfig::desk(vec![ModalitySpec::bbox()]);
    let pretrain = TrainConfig {
        epochs,
        seed: 1,
        ..TrainConfig::desk()
    };
    let outcome = train(&cfg, &split.data, &pretrain, &TrainConfig::finetune(), &TrainOptions { deterministic: true })?;

    let tracker = TrackerConfig::synthetic();
    let (report, _) = track_and_evaluate(&outcome.model, &split.test, &tracker)?;
    let baseline: Vec<_> = split
        .test
        .iter()
        .map(|(g, d)| Ok((g.clone(), iou_baseline(d, &tracker)?)))
        .collect::<tdlp::Result<_>>()?;
    let base = evaluate(&baseline);

    println!("{:<10} {:>7} {:>7} {:>7}", "", "HOTA", "IDF1", "IDSW");
    for (name, r) in [("model", &report.combined), ("iou", &base.combined)] {
        println!("{name:<10} {:>7.4} {:>7.4} {:>7}", r.hota, r.idf1, r.idsw);
    }
    if let Some(path) = ckpt {
        save_checkpoint(&outcome.model, &path)?;
        println!("saved {path}");
    }
    Ok(())
}
