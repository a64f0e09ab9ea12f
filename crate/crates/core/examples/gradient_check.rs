//! Compares analytic and finite-difference gradients of the link loss on a
//! tiny double-precision model.

use tdlp::features::{assemble_inputs, fit_standardizer, ModalitySpec};
use tdlp::io::{build_labels, sample_clip, AugmentSpec};
use tdlp::model::{ModelConfig, ParamStore};
use tdlp::synth::{generate_world, WorldSpec};
use tdlp::training::check_gradients;

fn main() -> tdlp::Result<()> {
    let cfg = ModelConfig::tiny(vec![ModalitySpec::bbox()]);
    let params = ParamStore::<f64>::init(&cfg, 7)?;

    let (gt, _) = generate_world(&WorldSpec {
        n_objects: 4,
        n_frames: 40,
        seed: 3,
        ..WorldSpec::default()
    })?;
    let clip = sample_clip(&gt, 20, 6, &AugmentSpec::none(), 1)?;
    let tracks = &clip.track_histories[..2];
    let dets = &clip.final_detections[..3];
    let stats = fit_standardizer([(tracks, dets)], &cfg.modalities, cfg.history_window)?;
    let inputs = assemble_inputs(tracks, dets, &cfg.modalities, Some(&stats), cfg.history_window)?;
    let labels = build_labels(tracks, dets);

    let report = check_gradients(&cfg, &params, &inputs, &labels, 10.0, 1e-5)?;
    for (name, err) in &report.entries {
        println!("{name:<40} {err:.2e}");
    }
    println!("worst {:.2e}: {}", report.worst(), if report.passed() { "ok" } else { "FAILED" });
    Ok(())
}
