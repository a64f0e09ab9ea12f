//! HOTA, CLEAR and identity metrics on a hand-built pair of sequences.

use tdlp::eval::{evaluate, parse_metrics};
use tdlp::io::{BBox, DetectionRecord, SequenceData};

fn seq(name: &str, rows: &[(u32, i64, f64)]) -> SequenceData {
    let mut s = SequenceData::new(name);
    for &(f, id, x) in rows {
        s.push(DetectionRecord::new(f, id, BBox::new(x, 0.0, 10.0, 10.0), 1.0));
    }
    s
}

fn main() -> tdlp::Result<()> {
    let gt = seq("demo", &[(1, 1, 0.0), (1, 2, 50.0), (2, 1, 1.0), (2, 2, 49.0), (3, 1, 2.0), (3, 2, 48.0)]);
    // Identities swap on the last frame.
    let pred = seq("demo", &[(1, 7, 0.0), (1, 8, 50.0), (2, 7, 1.0), (2, 8, 49.0), (3, 8, 2.0), (3, 7, 48.0)]);

    let report = evaluate(&[(gt, pred)]);
    print!("{}", report.to_csv(&parse_metrics("hota,idf1,mota")?));
    Ok(())
}
