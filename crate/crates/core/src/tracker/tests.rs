use std::cell::RefCell;

use super::*;
use crate::io::BBox;

/// IoU scorer that records the confidences it was shown.
#[derive(Default)]
struct Spy {
    seen: RefCell<Vec<f64>>,
}

impl LinkScorer for Spy {
    fn score(&self, tracks: &[TrackHistory], detections: &[DetectionRecord]) -> Result<LinkMatrix> {
        self.seen.borrow_mut().extend(detections.iter().map(|d| d.conf));
        IouScorer::default().score(tracks, detections)
    }
}

fn det(frame: u32, x: f64, conf: f64) -> DetectionRecord {
    DetectionRecord::new(frame, -1, BBox::new(x, 100.0, 50.0, 100.0), conf)
}

/// Ids emitted per frame for a static object present on `present` frames.
fn trace(cfg: &TrackerConfig, frames: u32, present: impl Fn(u32) -> bool, conf: f64) -> Vec<Vec<i64>> {
    let scorer = IouScorer::default();
    let mut tracker = Tracker::new(cfg.clone(), &scorer).unwrap();
    (1..=frames)
        .map(|f| {
            let dets = if present(f) { vec![det(f, 100.0, conf)] } else { vec![] };
            tracker.step(f, &dets).unwrap().iter().map(|r| r.id).collect()
        })
        .collect()
}

fn presets() -> Vec<TrackerConfig> {
    vec![
        TrackerConfig::dancetrack(),
        TrackerConfig::sportsmot(),
        TrackerConfig::bee24(),
        TrackerConfig::mot17(),
    ]
}

#[test]
fn preset_values() {
    let d = TrackerConfig::dancetrack();
    assert_eq!(
        (d.det_threshold, d.link_threshold, d.init_hits, d.new_threshold, d.max_lost),
        (0.4, 0.015, 3, 0.9, 50)
    );
    let s = TrackerConfig::preset("SoccerNet").unwrap();
    assert_eq!((s.det_threshold, s.link_threshold, s.init_hits, s.new_threshold, s.max_lost), (0.1, 0.01, 1, 0.4, 150));
    let b = TrackerConfig::bee24();
    assert_eq!((b.det_threshold, b.link_threshold, b.init_hits, b.new_threshold, b.max_lost), (0.6, 0.65, 0, 0.6, 50));
    let m = TrackerConfig::mot17();
    assert_eq!((m.det_threshold, m.link_threshold, m.init_hits, m.new_threshold, m.max_lost), (0.5, 0.05, 1, 0.55, 50));
    assert!(TrackerConfig::preset("nope").is_err());
}

#[test]
fn low_confidence_detections_are_never_scored() {
    let spy = Spy::default();
    let mut tracker = Tracker::new(TrackerConfig::dancetrack(), &spy).unwrap();
    for f in 1..=5 {
        tracker.step(f, &[det(f, 100.0, 0.95), det(f, 800.0, 0.3)]).unwrap();
    }
    let seen = spy.seen.borrow();
    assert!(!seen.is_empty());
    assert!(seen.iter().all(|&c| c >= 0.4));
    assert_eq!(tracker.tracks().len(), 1);
}

#[test]
fn confirmation_waits_for_init_hits() {
    let out = trace(&TrackerConfig::dancetrack(), 6, |_| true, 0.95);
    assert_eq!(out, vec![vec![], vec![], vec![], vec![1], vec![1], vec![1]]);
    let out = trace(&TrackerConfig::mot17(), 3, |_| true, 0.95);
    assert_eq!(out, vec![vec![], vec![1], vec![1]]);
}

#[test]
fn zero_init_hits_emits_on_first_frame() {
    let out = trace(&TrackerConfig::bee24(), 3, |_| true, 0.95);
    assert_eq!(out, vec![vec![1], vec![1], vec![1]]);
}

#[test]
fn new_tracks_need_confident_detections() {
    // Passes the detection filter but not the initiation gate.
    let out = trace(&TrackerConfig::dancetrack(), 6, |_| true, 0.8);
    assert!(out.iter().all(Vec::is_empty));
    let out = trace(&TrackerConfig::bee24(), 3, |_| true, 0.6);
    assert_eq!(out[0], vec![1]);
}

#[test]
fn lost_tracks_survive_exactly_max_lost_frames() {
    for cfg in presets() {
        let warm = cfg.init_hits as u32 + 1;
        let gap = cfg.max_lost as u32;
        // Missing for `max_lost` frames: same identity afterwards.
        let out = trace(&cfg, warm + gap + 1, |f| f <= warm || f > warm + gap, 0.95);
        assert_eq!(out[warm as usize - 1], vec![1]);
        assert_eq!(out.last().unwrap(), &vec![1], "preset {cfg:?}");
        // One frame longer: the track is gone and a new one starts.
        let out = trace(&cfg, warm + gap + 2, |f| f <= warm || f > warm + gap + 1, 0.95);
        let last = out.last().unwrap();
        if cfg.init_hits == 0 {
            assert_eq!(last, &vec![2]);
        } else {
            assert!(last.is_empty());
            let longer = trace(&cfg, warm + gap + 1 + warm, |f| f <= warm || f > warm + gap + 1, 0.95);
            assert_eq!(longer.last().unwrap(), &vec![2], "preset {cfg:?}");
        }
    }
}

#[test]
fn tentative_tracks_die_on_first_miss() {
    let cfg = TrackerConfig::dancetrack();
    let scorer = IouScorer::default();
    let mut tracker = Tracker::new(cfg.clone(), &scorer).unwrap();
    tracker.step(1, &[det(1, 100.0, 0.95)]).unwrap();
    assert_eq!(tracker.tracks()[0].state, TrackState::Tentative);
    tracker.step(2, &[]).unwrap();
    assert!(tracker.tracks().is_empty());

    let lenient = TrackerConfig {
        tentative_dies_on_miss: false,
        ..cfg
    };
    let mut tracker = Tracker::new(lenient, &scorer).unwrap();
    tracker.step(1, &[det(1, 100.0, 0.95)]).unwrap();
    tracker.step(2, &[]).unwrap();
    assert_eq!(tracker.tracks().len(), 1);
    assert_eq!(tracker.tracks()[0].frames_since_update, 1);
}

#[test]
fn frames_must_increase() {
    let scorer = IouScorer::default();
    let mut tracker = Tracker::new(TrackerConfig::mot17(), &scorer).unwrap();
    tracker.step(5, &[]).unwrap();
    assert!(matches!(
        tracker.step(5, &[]),
        Err(TdlpError::NonMonotonicFrame { previous: 5, got: 5 })
    ));
    assert!(tracker.step(4, &[]).is_err());
}

#[test]
fn history_is_windowed_and_ordered() {
    let cfg = TrackerConfig {
        history_window: 4,
        ..TrackerConfig::bee24()
    };
    let scorer = IouScorer::default();
    let mut tracker = Tracker::new(cfg, &scorer).unwrap();
    for f in (1..=20).filter(|f| f % 3 != 0) {
        tracker.step(f, &[det(f, 100.0 + f as f64, 0.95)]).unwrap();
    }
    let t = &tracker.tracks()[0];
    assert_eq!(t.history.len(), 4);
    let frames: Vec<u32> = t.history.iter().map(|r| r.frame).collect();
    assert!(frames.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*frames.last().unwrap(), 20);
}

#[test]
fn empty_sequence_gives_empty_output() {
    let out = run_sequence(&SequenceData::new("empty"), &IouScorer::default(), &TrackerConfig::mot17()).unwrap();
    assert_eq!(out.num_records(), 0);
}

#[test]
fn output_ids_are_unique_and_never_reused() {
    let mut seq = SequenceData::new("two");
    for f in 1..=30u32 {
        seq.push(det(f, 100.0 + 2.0 * f as f64, 0.95));
        seq.push(det(f, 1000.0 - 2.0 * f as f64, 0.95));
    }
    // Object 2 vanishes for good; a third one appears later.
    for f in 31..=40u32 {
        seq.push(det(f, 160.0 + 2.0 * (f - 30) as f64, 0.95));
    }
    for f in 35..=40u32 {
        seq.push(det(f, 1500.0, 0.95));
    }
    let cfg = TrackerConfig {
        max_lost: 2,
        ..TrackerConfig::mot17()
    };
    let out = run_sequence(&seq, &IouScorer::default(), &cfg).unwrap();
    assert_eq!(out.identities().into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
    for recs in out.frames.values() {
        let mut ids: Vec<i64> = recs.iter().map(|r| r.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), recs.len());
    }
}

#[test]
fn greedy_and_optimal_assignment_can_differ() {
    let s = LinkMatrix {
        scores: crate::tensor::Mat::from_rows(&[vec![0.9, 0.8], vec![0.85, 0.1]]),
    };
    let greedy = IouScorer { greedy: true }.assign(&s, 0.05);
    assert_eq!(greedy.matches.iter().map(|m| (m.0, m.1)).collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
    let optimal = IouScorer { greedy: false }.assign(&s, 0.05);
    assert_eq!(optimal.matches.iter().map(|m| (m.0, m.1)).collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = TrackerConfig::dancetrack();
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(TrackerConfig::from_toml(&text).unwrap(), cfg);
    assert!(TrackerConfig::from_toml("det_threshold = 2.0\nlink_threshold = 0.1\ninit_hits = 1\nnew_threshold = 0.5\nmax_lost = 5\nhistory_window = 3").is_err());
}
