//! Runs the 6 x 4 rank and threshold tests on a checkpoint, or on a randomly
//! initialized model when none is given.
//!
//! cargo run --release --example passfail_suite -- [checkpoint]

use tdlp::experiments::{operating_gate, passfail_suite, Method};
use tdlp::features::ModalitySpec;
use tdlp::model::{load_checkpoint, Head, Model, ModelConfig};
use tdlp::synth::ScenarioSpec;

fn main() -> tdlp::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path)?,
        None => Model::init(ModelConfig::desk(vec![ModalitySpec::bbox()]), 0)?,
    };
    let method = match model.config.head {
        Head::Link => Method::Tdlp,
        Head::Contrastive => Method::Ctdp,
    };
    let report = passfail_suite(&model, method, operating_gate(&model, 0.5), &ScenarioSpec::default())?;
    print!("{}", report.render());
    Ok(())
}
