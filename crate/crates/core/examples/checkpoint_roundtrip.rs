//! Saves a freshly initialized model and checks the reloaded copy scores
//! identically.

use tdlp::features::ModalitySpec;
use tdlp::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use tdlp::synth::{simulate_scenario, MotionKind, MotionPattern, ScenarioSpec};

fn main() -> tdlp::Result<()> {
    let model = Model::init(ModelConfig::desk(vec![ModalitySpec::bbox()]), 1)?;
    let path = std::env::temp_dir().join("tdlp-example.ckpt");
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path)?;
    println!("{} parameters, {} bytes", model.params.num_scalars(), std::fs::metadata(&path).map_or(0, |m| m.len()));

    let out = simulate_scenario(&ScenarioSpec::default(), &MotionPattern::reference(MotionKind::Linear))?;
    let mut dets = out.negative_records();
    dets.push(out.positive_record());
    let a = model.score(&[out.track()], &dets)?;
    let b = back.score(&[out.track()], &dets)?;
    println!("scores {:?}", a.scores.data());
    println!("bit-identical after reload: {}", a == b);
    Ok(())
}
