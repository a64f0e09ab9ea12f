//! MOTChallenge text files, per-detection modality feature files, and
//! supervised clip sampling.
//!
//! MOT lines are `frame,id,bb_left,bb_top,bb_width,bb_height,conf,...` with at
//! least seven fields. Modality feature files are CSV rows
//! `frame,det_index,v0,v1,...` where `det_index` is the 0-based position of the
//! detection within its frame, in file order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdlpError};
use crate::tensor::Mat;

/// Axis-aligned box, top-left corner plus size, in pixels or normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }
}

/// One detected (or annotated) box.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub frame: u32,
    /// Ground-truth or track identity; `-1` means unlabeled.
    pub id: i64,
    pub bbox: BBox,
    pub conf: f64,
    pub features: BTreeMap<String, Vec<f64>>,
}

impl DetectionRecord {
    pub fn new(frame: u32, id: i64, bbox: BBox, conf: f64) -> Self {
        DetectionRecord {
            frame,
            id,
            bbox,
            conf,
            features: BTreeMap::new(),
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.id >= 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotKind {
    GroundTruth,
    Detections,
}

/// A whole sequence, grouped by frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceData {
    pub name: String,
    pub frames: BTreeMap<u32, Vec<DetectionRecord>>,
    pub image_size: Option<(f64, f64)>,
    pub fps: Option<f64>,
}

impl SequenceData {
    pub fn new(name: impl Into<String>) -> Self {
        SequenceData {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, record: DetectionRecord) {
        self.frames.entry(record.frame).or_default().push(record);
    }

    pub fn num_records(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &DetectionRecord> {
        self.frames.values().flatten()
    }

    pub fn first_frame(&self) -> Option<u32> {
        self.frames.keys().next().copied()
    }

    pub fn last_frame(&self) -> Option<u32> {
        self.frames.keys().next_back().copied()
    }

    pub fn identities(&self) -> BTreeSet<i64> {
        self.records().filter(|r| r.is_labeled()).map(|r| r.id).collect()
    }

    /// Modality names attached to the records, checked to be uniform.
    pub fn modalities(&self) -> Result<BTreeMap<String, usize>> {
        let mut it = self.records();
        let Some(first) = it.next() else {
            return Ok(BTreeMap::new());
        };
        let dims: BTreeMap<String, usize> =
            first.features.iter().map(|(k, v)| (k.clone(), v.len())).collect();
        for r in it {
            if r.features.len() != dims.len()
                || r.features.iter().any(|(k, v)| dims.get(k) != Some(&v.len()))
            {
                return Err(TdlpError::InvalidInput(format!(
                    "sequence `{}` has inconsistent modality features at frame {}",
                    self.name, r.frame
                )));
            }
        }
        Ok(dims)
    }

    pub fn strip_ids(&self) -> SequenceData {
        let mut out = self.clone();
        for r in out.frames.values_mut().flatten() {
            r.id = -1;
        }
        out
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> TdlpError {
    TdlpError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses MOT text. Returns the sequence and the number of rejected records.
pub fn parse_mot_str(
    text: &str,
    kind: MotKind,
    name: &str,
    origin: &Path,
) -> Result<(SequenceData, usize)> {
    let mut seq = SequenceData::new(name);
    let mut rejected = 0usize;
    let mut clamped = 0usize;
    let mut seen = BTreeSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 7 {
            return Err(parse_err(
                origin,
                lineno,
                format!("expected at least 7 fields, found {}", fields.len()),
            ));
        }
        let num = |i: usize, what: &str| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(origin, lineno, format!("invalid {what} `{}`", fields[i])))
        };
        let frame = num(0, "frame")?;
        if frame < 1.0 || frame.fract() != 0.0 || frame > u32::MAX as f64 {
            return Err(parse_err(origin, lineno, format!("frame must be a positive integer, got `{}`", fields[0])));
        }
        let id = num(1, "id")?;
        if id.fract() != 0.0 {
            return Err(parse_err(origin, lineno, format!("id must be an integer, got `{}`", fields[1])));
        }
        let (x, y, w, h) = (num(2, "bb_left")?, num(3, "bb_top")?, num(4, "bb_width")?, num(5, "bb_height")?);
        let mut conf = num(6, "conf")?;
        if w <= 0.0 || h <= 0.0 {
            rejected += 1;
            continue;
        }
        if !(0.0..=1.0).contains(&conf) {
            conf = conf.clamp(0.0, 1.0);
            clamped += 1;
        }
        let frame = frame as u32;
        let id = match kind {
            MotKind::GroundTruth => id as i64,
            MotKind::Detections => {
                if id < 0.0 {
                    -1
                } else {
                    id as i64
                }
            }
        };
        if id >= 0 && !seen.insert((frame, id)) {
            return Err(parse_err(origin, lineno, format!("duplicate id {id} in frame {frame}")));
        }
        seq.push(DetectionRecord::new(frame, id, BBox::new(x, y, w, h), conf));
    }
    if rejected > 0 {
        warn!("{}: rejected {rejected} record(s) with non-positive size", origin.display());
    }
    if clamped > 0 {
        warn!("{}: clamped {clamped} confidence value(s) into [0, 1]", origin.display());
    }
    Ok((seq, rejected))
}

/// Reads a MOTChallenge file. The sequence name is the file stem.
pub fn parse_mot_file(path: impl AsRef<Path>, kind: MotKind) -> Result<SequenceData> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TdlpError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(parse_mot_str(&text, kind, &name, path)?.0)
}

/// One MOT line with two-decimal fixed formatting.
pub fn format_mot_line(r: &DetectionRecord) -> String {
    format!(
        "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},-1,-1,-1",
        r.frame, r.id, r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h, r.conf
    )
}

pub fn format_mot(seq: &SequenceData) -> String {
    let mut out = String::new();
    for r in seq.records() {
        let _ = writeln!(out, "{}", format_mot_line(r));
    }
    out
}

/// Writes tracking output in MOTChallenge format.
pub fn write_mot_results(seq: &SequenceData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(bad) = seq.records().find(|r| r.id < 1 || r.bbox.w <= 0.0 || r.bbox.h <= 0.0) {
        return Err(TdlpError::InvalidInput(format!(
            "cannot write record with id {} and size {}x{} at frame {}",
            bad.id, bad.bbox.w, bad.bbox.h, bad.frame
        )));
    }
    fs::write(path, format_mot(seq)).map_err(|e| TdlpError::io(path, e))
}

/// Writes a sequence (ground truth or detections) without the id check.
pub fn write_mot_sequence(seq: &SequenceData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_mot(seq)).map_err(|e| TdlpError::io(path, e))
}

pub type FeatureMap = BTreeMap<(u32, usize), Vec<f64>>;

/// Reads a modality CSV and checks it against `seq`.
pub fn load_modality_features(
    path: impl AsRef<Path>,
    modality: &str,
    seq: &SequenceData,
) -> Result<FeatureMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TdlpError::io(path, e))?;
    parse_modality_str(&text, modality, seq, path)
}

pub fn parse_modality_str(text: &str, modality: &str, seq: &SequenceData, origin: &Path) -> Result<FeatureMap> {
    let mut map = FeatureMap::new();
    let mut dim: Option<usize> = None;
    let mut dangling = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("frame") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(parse_err(origin, lineno, "expected frame,det_index,v0,..."));
        }
        let frame: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(origin, lineno, format!("invalid frame `{}`", fields[0])))?;
        let det: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(origin, lineno, format!("invalid det_index `{}`", fields[1])))?;
        let values = fields[2..]
            .iter()
            .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| parse_err(origin, lineno, "invalid feature value"))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(TdlpError::DimensionMismatch {
                    expected: d,
                    found: values.len(),
                    context: format!("{modality} at {}:{lineno}", origin.display()),
                })
            }
            _ => {}
        }
        let exists = seq.frames.get(&frame).is_some_and(|f| det < f.len());
        if !exists {
            dangling.push(format!("({frame},{det})"));
            continue;
        }
        if map.insert((frame, det), values).is_some() {
            return Err(parse_err(origin, lineno, format!("duplicate entry for ({frame},{det})")));
        }
    }
    if !dangling.is_empty() {
        return Err(TdlpError::DanglingReference(format!(
            "{modality}: {} row(s) reference missing detections: {}",
            dangling.len(),
            dangling.join(" ")
        )));
    }
    if map.is_empty() {
        warn!("{}: modality `{modality}` file has no rows", origin.display());
    } else {
        let missing = seq.num_records() - map.len();
        if missing > 0 {
            warn!("{}: {missing} detection(s) lack `{modality}` features", origin.display());
        }
    }
    Ok(map)
}

/// Attaches a loaded feature map; every record must receive a vector.
pub fn attach_modality(seq: &mut SequenceData, modality: &str, features: &FeatureMap) -> Result<()> {
    let mut missing = Vec::new();
    for (&frame, recs) in seq.frames.iter_mut() {
        for (i, r) in recs.iter_mut().enumerate() {
            match features.get(&(frame, i)) {
                Some(v) => {
                    r.features.insert(modality.to_string(), v.clone());
                }
                None => missing.push(format!("({frame},{i})")),
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(TdlpError::InvalidInput(format!(
            "modality `{modality}` missing for {} detection(s): {}",
            missing.len(),
            missing.iter().take(10).cloned().collect::<Vec<_>>().join(" ")
        )))
    }
}

/// Writes a modality CSV for every record of `seq` carrying `modality`.
pub fn write_modality_features(seq: &SequenceData, modality: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (&frame, recs) in &seq.frames {
        for (i, r) in recs.iter().enumerate() {
            if let Some(v) = r.features.get(modality) {
                let _ = write!(out, "{frame},{i}");
                for x in v {
                    let _ = write!(out, ",{x}");
                }
                out.push('\n');
            }
        }
    }
    fs::write(path, out).map_err(|e| TdlpError::io(path, e))
}

/// Detector-noise simulation applied to training clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Uniform jitter amplitude as a fraction of box size.
    pub jitter: f64,
    /// Probability that an observation (history or final detection) is dropped.
    pub dropout: f64,
    /// Standard deviation of Gaussian confidence noise.
    #[serde(default)]
    pub conf_noise: f64,
    /// Per final detection, probability of adding an unlabeled distractor
    /// displaced by a quarter to one and a half box sizes. Half of the
    /// distractors also remove the detection they were copied from.
    #[serde(default)]
    pub distractors: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            jitter: 0.02,
            dropout: 0.1,
            conf_noise: 0.03,
            distractors: 0.2,
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        AugmentSpec {
            jitter: 0.0,
            dropout: 0.0,
            conf_noise: 0.0,
            distractors: 0.0,
        }
    }
}

/// A track's windowed observations, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackHistory {
    pub id: i64,
    pub observations: Vec<DetectionRecord>,
}

impl TrackHistory {
    pub fn last(&self) -> Option<&DetectionRecord> {
        self.observations.last()
    }
}

/// Supervised sample: histories over `[t - L, t - 1]`, detections at `t`, and
/// the link labels between them.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub frame: u32,
    pub clip_length: usize,
    pub track_histories: Vec<TrackHistory>,
    pub final_detections: Vec<DetectionRecord>,
    /// `labels[(i, j)] = 1` iff track `i` and detection `j` share an identity.
    pub labels: Mat<f64>,
}

impl ClipSample {
    pub fn num_tracks(&self) -> usize {
        self.track_histories.len()
    }

    pub fn num_detections(&self) -> usize {
        self.final_detections.len()
    }

    /// Column of the positive detection for each track, if any.
    pub fn positive_columns(&self) -> Vec<Option<usize>> {
        (0..self.labels.rows())
            .map(|i| (0..self.labels.cols()).find(|&j| self.labels.get(i, j) > 0.5))
            .collect()
    }
}

pub fn build_labels(tracks: &[TrackHistory], detections: &[DetectionRecord]) -> Mat<f64> {
    Mat::from_fn(tracks.len(), detections.len(), |i, j| {
        let d = &detections[j];
        if d.is_labeled() && d.id == tracks[i].id {
            1.0
        } else {
            0.0
        }
    })
}

fn augment_record(r: &DetectionRecord, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> DetectionRecord {
    let mut out = r.clone();
    if spec.jitter > 0.0 {
        let mut u = || rng.gen_range(-spec.jitter..=spec.jitter);
        let (w, h) = (r.bbox.w, r.bbox.h);
        out.bbox.x += u() * w;
        out.bbox.y += u() * h;
        out.bbox.w = (w * (1.0 + u())).max(w * 1e-3);
        out.bbox.h = (h * (1.0 + u())).max(h * 1e-3);
    }
    if spec.conf_noise > 0.0 {
        let n = Normal::new(0.0, spec.conf_noise).expect("positive std");
        out.conf = (out.conf + n.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

/// Samples the clip ending at frame `t` from ground truth.
pub fn sample_clip(
    gt: &SequenceData,
    t: u32,
    clip_length: usize,
    augment: &AugmentSpec,
    seed: u64,
) -> Result<ClipSample> {
    if clip_length == 0 {
        return Err(TdlpError::InvalidInput("clip length must be at least 1".into()));
    }
    let finals: Vec<&DetectionRecord> = gt
        .frames
        .get(&t)
        .map(|recs| recs.iter().filter(|r| r.is_labeled()).collect())
        .unwrap_or_default();
    if finals.is_empty() {
        return Err(TdlpError::InvalidInput(format!(
            "frame {t} has no labeled detections in `{}`",
            gt.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = t.saturating_sub(clip_length as u32).max(1);
    let mut histories: BTreeMap<i64, Vec<DetectionRecord>> = BTreeMap::new();
    for (_, recs) in gt.frames.range(start..t) {
        for r in recs.iter().filter(|r| r.is_labeled()) {
            if augment.dropout > 0.0 && rng.gen_bool(augment.dropout) {
                continue;
            }
            histories.entry(r.id).or_default().push(augment_record(r, augment, &mut rng));
        }
    }
    let mut final_detections = Vec::new();
    for r in finals {
        if augment.dropout > 0.0 && rng.gen_bool(augment.dropout) {
            continue;
        }
        final_detections.push(augment_record(r, augment, &mut rng));
    }
    if augment.distractors > 0.0 {
        let n = final_detections.len();
        let mut replaced = vec![false; n];
        for k in 0..n {
            if rng.gen_bool(augment.distractors) {
                let mut d = final_detections[k].clone();
                let r = rng.gen_range(0.25..1.5);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                d.bbox.x += r * a.cos() * d.bbox.w;
                d.bbox.y += r * a.sin() * d.bbox.h;
                d.id = -1;
                final_detections.push(d);
                // half the time the true detection is gone and the displaced
                // one is all the track gets to see
                replaced[k] = rng.gen_bool(0.5);
            }
        }
        let mut k = 0;
        final_detections.retain(|_| {
            k += 1;
            !replaced.get(k - 1).copied().unwrap_or(false)
        });
    }
    // Keep detection order independent of identity order.
    final_detections.shuffle(&mut rng);
    let track_histories: Vec<TrackHistory> = histories
        .into_iter()
        .map(|(id, observations)| TrackHistory { id, observations })
        .collect();
    let labels = build_labels(&track_histories, &final_detections);
    Ok(ClipSample {
        frame: t,
        clip_length,
        track_histories,
        final_detections,
        labels,
    })
}
