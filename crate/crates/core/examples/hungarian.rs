//! Gated assignment of a small link matrix.

use tdlp::assoc::{associate, hungarian_solve};
use tdlp::model::LinkMatrix;
use tdlp::tensor::Mat;

fn main() {
    let scores = Mat::from_rows(&[
        vec![0.90, 0.80, 0.05],
        vec![0.85, 0.10, 0.02],
        vec![0.01, 0.03, 0.04],
    ]);

    let cost = scores.map(|s| 1.0 - s);
    let m = hungarian_solve(&cost, None);
    println!("min-cost matching {:?}, cost {:.2}", m.pairs, m.total_cost);

    // The third track has nothing above the gate and stays unmatched.
    let gated = associate(&LinkMatrix { scores }, 0.5);
    for (t, d, s) in &gated.matches {
        println!("track {t} -> detection {d} (score {s:.2})");
    }
    println!("unmatched tracks {:?}, detections {:?}", gated.unmatched_tracks, gated.unmatched_detections);
}
