//! Generates one synthetic world and writes it as MOT files.
//!
//! cargo run --example gen_world -- [out_dir] [seed]

use std::env;
use std::path::PathBuf;

use tdlp::io::{write_mot_sequence, SequenceData};
use tdlp::synth::{generate_world, WorldSpec};

fn main() -> tdlp::Result<()> {
    let mut args = env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| env::temp_dir().join("tdlp-world").display().to_string()));
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = WorldSpec {
        seed,
        ..WorldSpec::default()
    };
    let (gt, dets) = generate_world(&spec)?;
    std::fs::create_dir_all(&out).map_err(|e| tdlp::TdlpError::InvalidInput(e.to_string()))?;
    write_mot_sequence(&gt, out.join("gt.txt"))?;
    write_mot_sequence(&dets, out.join("det.txt"))?;

    let summary = |s: &SequenceData| (s.frames.len(), s.num_records());
    println!("objects:    {}", gt.identities().len());
    println!("gt:         {:?} (frames, boxes)", summary(&gt));
    println!("detections: {:?}", summary(&dets));
    println!(
        "dropped:    {:.1}%",
        100.0 * (1.0 - dets.num_records() as f64 / gt.num_records() as f64)
    );
    println!("written to {}", out.display());
    Ok(())
}
