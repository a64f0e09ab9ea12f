//! Runs the online tracker over one synthetic world, frame by frame.
//!
//! cargo run --example track_sequence -- [checkpoint]
//!
//! Without a checkpoint the tracker scores with IoU.

use tdlp::eval::evaluate;
use tdlp::model::load_checkpoint;
use tdlp::synth::{generate_world, WorldSpec};
use tdlp::tracker::{IouScorer, LinkScorer, Tracker, TrackerConfig};

fn main() -> tdlp::Result<()> {
    let (gt, dets) = generate_world(&WorldSpec {
        n_frames: 150,
        seed: 20_000,
        ..WorldSpec::default()
    })?;
    let model = std::env::args().nth(1).map(load_checkpoint).transpose()?;
    let scorer: &dyn LinkScorer = match &model {
        Some(m) => m,
        None => &IouScorer { greedy: false },
    };
    let cfg = TrackerConfig {
        link_threshold: if model.is_some() { 0.05 } else { 0.3 },
        ..TrackerConfig::synthetic()
    };

    let mut tracker = Tracker::new(cfg, scorer)?;
    let mut out = tdlp::io::SequenceData::new(gt.name.clone());
    for (&frame, recs) in &dets.frames {
        for r in tracker.step(frame, recs)? {
            out.push(r);
        }
        if frame % 30 == 0 {
            println!("frame {frame:>3}: {} live tracks", tracker.tracks().len());
        }
    }
    let r = evaluate(&[(gt, out)]).combined;
    println!("HOTA {:.4}  IDF1 {:.4}  MOTA {:.4}  IDSW {}", r.hota, r.idf1, r.mota.unwrap_or(f64::NAN), r.idsw);
    Ok(())
}
