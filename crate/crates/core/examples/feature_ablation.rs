//! Box-only, appearance-only and fused models on synthetic worlds with a
//! noisy appearance modality. Kept small so it finishes in a few minutes.

use tdlp::experiments::{ablation_csv, feature_ablation, modality_subsets, synthetic_split, AblationDataset};
use tdlp::features::ModalitySpec;
use tdlp::model::ModelConfig;
use tdlp::synth::WorldSpec;
use tdlp::tracker::TrackerConfig;
use tdlp::training::{TrainConfig, TrainOptions};

fn main() -> tdlp::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let world = WorldSpec {
        n_frames: 150,
        appearance_dim: 8,
        appearance_noise: 0.5,
        ..WorldSpec::default()
    };
    let ds = AblationDataset {
        name: "synthetic".into(),
        split: synthetic_split(&world, 4, 1, 2, 0)?,
    };
    let all = vec![ModalitySpec::bbox(), ModalitySpec::appearance(8)];
    let base = ModelConfig {
        embed_dim: 32,
        fused_dim: 64,
        head_hidden: 64,
        ..ModelConfig::desk(all.clone())
    };
    let pretrain = TrainConfig {
        epochs: 6,
        clips_per_epoch: 80,
        ..TrainConfig::desk()
    };
    let finetune = TrainConfig {
        epochs: 2,
        clips_per_epoch: 80,
        clip_length: 10,
        ..TrainConfig::finetune()
    };
    let rows = feature_ablation(
        &[ds],
        &modality_subsets(&all),
        &base,
        &pretrain,
        &finetune,
        &TrackerConfig::synthetic(),
        &TrainOptions { deterministic: true },
    )?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
