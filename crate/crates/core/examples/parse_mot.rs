//! Reads MOT detections plus a per-detection feature file.

use std::fs;

use tdlp::io::{attach_modality, load_modality_features, parse_mot_file, MotKind};

fn main() -> tdlp::Result<()> {
    let dir = tempfile_dir();
    let det = dir.join("seq.txt");
    let feats = dir.join("seq.csv");
    fs::write(&det, "1,-1,10,20,30,60,0.9,-1,-1,-1\n1,-1,200,20,30,60,0.8,-1,-1,-1\n2,-1,12,21,30,60,0.95,-1,-1,-1\n")
        .unwrap();
    // frame, index within frame, feature values
    fs::write(&feats, "1,0,0.1,0.2\n1,1,0.9,0.8\n2,0,0.12,0.21\n").unwrap();

    let mut seq = parse_mot_file(&det, MotKind::Detections)?;
    let map = load_modality_features(&feats, "appearance", &seq)?;
    attach_modality(&mut seq, "appearance", &map)?;

    println!("sequence `{}`: {} frames, {} detections", seq.name, seq.frames.len(), seq.num_records());
    println!("modalities {:?}", seq.modalities()?);
    for r in seq.records() {
        println!("frame {} box {:?} conf {:.2} appearance {:?}", r.frame, r.bbox, r.conf, r.features["appearance"]);
    }
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join("tdlp-parse-example");
    fs::create_dir_all(&d).unwrap();
    d
}
