//! Online tracking-by-detection with learned association.
//!
//! Every frame: filter detections by confidence, score all live tracks
//! against the survivors, run gated assignment, then update the track
//! lifecycle. There is no motion model; lost tracks are scored like any
//! other and their histories stay frozen until they are matched again.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::assoc::{associate, AssignmentResult};
use crate::error::{Result, TdlpError};
use crate::io::{DetectionRecord, SequenceData, TrackHistory};
use crate::model::{LinkMatrix, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    /// Detections below this confidence are dropped before association.
    pub det_threshold: f64,
    /// A pair may be matched only when its score exceeds this gate.
    pub link_threshold: f64,
    /// Associations needed before a track is confirmed.
    pub init_hits: usize,
    /// Minimum confidence of a detection that starts a track.
    pub new_threshold: f64,
    /// Frames a track may go unmatched before it is removed.
    pub max_lost: usize,
    /// Observations kept per track.
    pub history_window: usize,
    /// Drop tentative tracks on their first miss.
    #[serde(default = "yes")]
    pub tentative_dies_on_miss: bool,
}

fn yes() -> bool {
    true
}

impl TrackerConfig {
    pub fn dancetrack() -> Self {
        TrackerConfig {
            det_threshold: 0.4,
            link_threshold: 0.015,
            init_hits: 3,
            new_threshold: 0.9,
            max_lost: 50,
            history_window: 30,
            tentative_dies_on_miss: true,
        }
    }

    /// Also used for SoccerNet.
    pub fn sportsmot() -> Self {
        TrackerConfig {
            det_threshold: 0.1,
            link_threshold: 0.01,
            init_hits: 1,
            new_threshold: 0.4,
            max_lost: 150,
            ..Self::dancetrack()
        }
    }

    pub fn bee24() -> Self {
        TrackerConfig {
            det_threshold: 0.6,
            link_threshold: 0.65,
            init_hits: 0,
            new_threshold: 0.6,
            max_lost: 50,
            ..Self::dancetrack()
        }
    }

    pub fn mot17() -> Self {
        TrackerConfig {
            det_threshold: 0.5,
            link_threshold: 0.05,
            init_hits: 1,
            new_threshold: 0.55,
            max_lost: 50,
            ..Self::dancetrack()
        }
    }

    /// Settings for the generated worlds, whose confidences never drop
    /// below 0.5 before noise.
    pub fn synthetic() -> Self {
        TrackerConfig {
            det_threshold: 0.3,
            link_threshold: 0.05,
            init_hits: 1,
            new_threshold: 0.5,
            max_lost: 30,
            ..Self::dancetrack()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "dancetrack" => Ok(Self::dancetrack()),
            "sportsmot" | "soccernet" => Ok(Self::sportsmot()),
            "bee24" => Ok(Self::bee24()),
            "mot17" | "mot20" | "motchallenge" => Ok(Self::mot17()),
            "synthetic" => Ok(Self::synthetic()),
            other => Err(TdlpError::Config(format!("unknown tracker preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (v, name) in [(self.det_threshold, "det_threshold"), (self.new_threshold, "new_threshold")] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TdlpError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        // cosine gates for contrastive scorers may be negative
        if !(-1.0..=1.0).contains(&self.link_threshold) {
            return Err(TdlpError::Config(format!(
                "link_threshold must lie in [-1, 1], got {}",
                self.link_threshold
            )));
        }
        if self.max_lost == 0 {
            return Err(TdlpError::Config("max_lost must be at least 1".into()));
        }
        if self.history_window == 0 {
            return Err(TdlpError::Config("history_window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrackerConfig = toml::from_str(text).map_err(|e| TdlpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackState {
    Tentative,
    Confirmed,
    Lost,
}

#[derive(Clone, Debug)]
pub struct Track {
    pub id: i64,
    pub state: TrackState,
    pub history: VecDeque<DetectionRecord>,
    pub hits: usize,
    pub frames_since_update: usize,
    /// Confidence of the detection that started the track.
    pub init_conf: f64,
    pub last_conf: f64,
}

impl Track {
    pub fn last(&self) -> &DetectionRecord {
        self.history.back().expect("tracks always hold an observation")
    }

    fn to_history(&self) -> TrackHistory {
        TrackHistory {
            id: self.id,
            observations: self.history.iter().cloned().collect(),
        }
    }

    fn push(&mut self, mut det: DetectionRecord, window: usize) {
        det.id = self.id;
        self.last_conf = det.conf;
        self.history.push_back(det);
        while self.history.len() > window {
            self.history.pop_front();
        }
    }
}

/// Scores tracks against detections. Higher means more likely linked.
pub trait LinkScorer {
    fn score(&self, tracks: &[TrackHistory], detections: &[DetectionRecord]) -> Result<LinkMatrix>;

    fn assign(&self, scores: &LinkMatrix, threshold: f64) -> AssignmentResult {
        associate(scores, threshold)
    }
}

impl LinkScorer for Model {
    fn score(&self, tracks: &[TrackHistory], detections: &[DetectionRecord]) -> Result<LinkMatrix> {
        Model::score(self, tracks, detections)
    }
}

/// Scores a pair by the IoU between the track's last box and the detection.
/// With `greedy`, pairs are taken in descending score order instead of by
/// optimal assignment.
#[derive(Clone, Copy, Debug, Default)]
pub struct IouScorer {
    pub greedy: bool,
}

impl LinkScorer for IouScorer {
    fn score(&self, tracks: &[TrackHistory], detections: &[DetectionRecord]) -> Result<LinkMatrix> {
        let mut out = LinkMatrix::empty(tracks.len(), detections.len());
        for (i, t) in tracks.iter().enumerate() {
            let last = t
                .last()
                .ok_or_else(|| TdlpError::InvalidInput(format!("track {} has no observations", t.id)))?;
            for (j, d) in detections.iter().enumerate() {
                out.scores.set(i, j, last.bbox.iou(&d.bbox));
            }
        }
        Ok(out)
    }

    fn assign(&self, scores: &LinkMatrix, threshold: f64) -> AssignmentResult {
        if !self.greedy {
            return associate(scores, threshold);
        }
        let s = &scores.scores;
        let (n, m) = s.shape();
        let mut pairs: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j, s.get(i, j))))
            .filter(|&(_, _, v)| v > threshold)
            .collect();
        pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        let mut row_used = vec![false; n];
        let mut col_used = vec![false; m];
        let mut matches = Vec::new();
        for (i, j, v) in pairs {
            if !row_used[i] && !col_used[j] {
                row_used[i] = true;
                col_used[j] = true;
                matches.push((i, j, v));
            }
        }
        matches.sort_by_key(|&(i, _, _)| i);
        AssignmentResult {
            matches,
            unmatched_tracks: (0..n).filter(|&i| !row_used[i]).collect(),
            unmatched_detections: (0..m).filter(|&j| !col_used[j]).collect(),
        }
    }
}

pub struct Tracker<'a, S: ?Sized> {
    pub config: TrackerConfig,
    scorer: &'a S,
    tracks: Vec<Track>,
    next_id: i64,
    last_frame: Option<u32>,
}

impl<'a, S: LinkScorer + ?Sized> Tracker<'a, S> {
    pub fn new(config: TrackerConfig, scorer: &'a S) -> Result<Self> {
        config.validate()?;
        Ok(Tracker {
            config,
            scorer,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
        })
    }

    /// Live tracks in creation order.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Advances to `frame` and returns the confirmed tracks updated on it,
    /// with track ids filled in.
    pub fn step(&mut self, frame: u32, detections: &[DetectionRecord]) -> Result<Vec<DetectionRecord>> {
        if let Some(previous) = self.last_frame {
            if frame <= previous {
                return Err(TdlpError::NonMonotonicFrame { previous, got: frame });
            }
        }
        self.last_frame = Some(frame);
        let cfg = &self.config;

        let dets: Vec<DetectionRecord> = detections
            .iter()
            .filter(|d| d.conf >= cfg.det_threshold)
            .map(|d| DetectionRecord { frame, ..d.clone() })
            .collect();
        let histories: Vec<TrackHistory> = self.tracks.iter().map(Track::to_history).collect();
        let result = if histories.is_empty() || dets.is_empty() {
            AssignmentResult {
                matches: Vec::new(),
                unmatched_tracks: (0..histories.len()).collect(),
                unmatched_detections: (0..dets.len()).collect(),
            }
        } else {
            let scores = self.scorer.score(&histories, &dets)?;
            self.scorer.assign(&scores, cfg.link_threshold)
        };

        for &(i, j, _) in &result.matches {
            let t = &mut self.tracks[i];
            t.push(dets[j].clone(), cfg.history_window);
            t.frames_since_update = 0;
            t.hits += 1;
            t.state = match t.state {
                TrackState::Tentative if t.hits >= cfg.init_hits && t.init_conf >= cfg.new_threshold => {
                    TrackState::Confirmed
                }
                TrackState::Tentative => TrackState::Tentative,
                _ => TrackState::Confirmed,
            };
        }

        let mut remove = vec![false; self.tracks.len()];
        for &i in &result.unmatched_tracks {
            let t = &mut self.tracks[i];
            t.frames_since_update += 1;
            if t.state == TrackState::Tentative {
                remove[i] = cfg.tentative_dies_on_miss || t.frames_since_update > cfg.max_lost;
            } else {
                t.state = TrackState::Lost;
                remove[i] = t.frames_since_update > cfg.max_lost;
            }
        }
        let mut k = 0;
        self.tracks.retain(|_| {
            k += 1;
            !remove[k - 1]
        });

        for &j in &result.unmatched_detections {
            let d = &dets[j];
            if d.conf < cfg.new_threshold {
                continue;
            }
            let mut t = Track {
                id: self.next_id,
                state: TrackState::Tentative,
                history: VecDeque::new(),
                hits: 0,
                frames_since_update: 0,
                init_conf: d.conf,
                last_conf: d.conf,
            };
            self.next_id += 1;
            t.push(d.clone(), cfg.history_window);
            if cfg.init_hits == 0 {
                t.state = TrackState::Confirmed;
            }
            self.tracks.push(t);
        }

        Ok(self
            .tracks
            .iter()
            .filter(|t| t.state == TrackState::Confirmed && t.frames_since_update == 0)
            .map(|t| t.last().clone())
            .collect())
    }
}

/// Tracks a whole sequence. Frames without detections between the first and
/// last frame still count as elapsed time.
pub fn run_sequence<S: LinkScorer + ?Sized>(
    detections: &SequenceData,
    scorer: &S,
    config: &TrackerConfig,
) -> Result<SequenceData> {
    let mut tracker = Tracker::new(config.clone(), scorer)?;
    let mut out = SequenceData::new(detections.name.clone());
    out.image_size = detections.image_size;
    out.fps = detections.fps;
    let (Some(first), Some(last)) = (detections.first_frame(), detections.last_frame()) else {
        return Ok(out);
    };
    for frame in first..=last {
        let dets = detections.frames.get(&frame).map(Vec::as_slice).unwrap_or(&[]);
        for r in tracker.step(frame, dets)? {
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
