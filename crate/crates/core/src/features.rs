//! Geometric feature pipeline: min–max normalization, first-order temporal
//! differences, standardization, and assembly of per-modality model inputs.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdlpError};
use crate::io::{DetectionRecord, TrackHistory};
use crate::tensor::Mat;

/// Floor applied to fitted standard deviations.
pub const STD_EPS: f64 = 1e-6;
/// Ranges narrower than this normalize to the midpoint.
pub const DEGENERATE_RANGE: f64 = 1e-9;

/// Width of the bounding-box feature vector `(x, y, w, h, c)`.
pub const BBOX_DIM: usize = 5;
const BBOX_CONF: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModalityKind {
    Bbox,
    /// `points` keypoints laid out as `x, y[, conf]` per point.
    Keypoints { points: usize, with_conf: bool },
    Appearance { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
}

impl ModalitySpec {
    pub fn bbox() -> Self {
        ModalitySpec {
            name: "bbox".into(),
            kind: ModalityKind::Bbox,
        }
    }

    pub fn keypoints(points: usize, with_conf: bool) -> Self {
        ModalitySpec {
            name: "keypoints".into(),
            kind: ModalityKind::Keypoints { points, with_conf },
        }
    }

    pub fn appearance(dim: usize) -> Self {
        ModalitySpec {
            name: "appearance".into(),
            kind: ModalityKind::Appearance { dim },
        }
    }

    pub fn static_dim(&self) -> usize {
        match self.kind {
            ModalityKind::Bbox => BBOX_DIM,
            ModalityKind::Keypoints { points, with_conf } => points * if with_conf { 3 } else { 2 },
            ModalityKind::Appearance { dim } => dim,
        }
    }

    /// Width of the track motion features; zero for appearance.
    pub fn motion_dim(&self) -> usize {
        if self.is_geometric() {
            self.static_dim()
        } else {
            0
        }
    }

    pub fn is_geometric(&self) -> bool {
        !matches!(self.kind, ModalityKind::Appearance { .. })
    }

    fn raw_vector(&self, r: &DetectionRecord) -> Result<Vec<f64>> {
        match self.kind {
            ModalityKind::Bbox => Ok(vec![r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h, r.conf]),
            _ => {
                let v = r.features.get(&self.name).ok_or_else(|| {
                    TdlpError::InvalidInput(format!(
                        "detection at frame {} lacks modality `{}`",
                        r.frame, self.name
                    ))
                })?;
                if v.len() != self.static_dim() {
                    return Err(TdlpError::DimensionMismatch {
                        expected: self.static_dim(),
                        found: v.len(),
                        context: format!("modality `{}` at frame {}", self.name, r.frame),
                    });
                }
                Ok(v.clone())
            }
        }
    }
}

/// Per-dimension minimum and maximum of one population.
#[derive(Clone, Debug, PartialEq)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            for d in 0..dim {
                min[d] = min[d].min(row[d]);
                max[d] = max[d].max(row[d]);
            }
        }
        MinMax { min, max }
    }

    #[inline]
    pub fn scale(&self, v: f64, d: usize) -> f64 {
        let range = self.max[d] - self.min[d];
        if !(range >= DEGENERATE_RANGE) {
            0.5
        } else {
            (v - self.min[d]) / range
        }
    }
}

/// Min–max normalizes every column of one frame's vectors to `[0, 1]`.
/// Columns listed in `passthrough` (confidences) are copied unchanged and
/// degenerate columns map to `0.5`.
pub fn minmax_normalize_frame(rows: &[Vec<f64>], passthrough: &[usize]) -> Vec<Vec<f64>> {
    let Some(dim) = rows.first().map(Vec::len) else {
        return Vec::new();
    };
    let mm = MinMax::fit(rows.iter().map(Vec::as_slice), dim);
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(d, &v)| if passthrough.contains(&d) { v } else { mm.scale(v, d) })
                .collect()
        })
        .collect()
}

/// `(x_t - x_tau) / (t - tau)` against the previous observation; the first
/// observation gets zeros.
pub fn temporal_differences(frames: &[u32], values: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    assert_eq!(frames.len(), values.len(), "one frame stamp per observation");
    let mut out = Vec::with_capacity(values.len());
    for k in 0..values.len() {
        if k == 0 {
            out.push(vec![0.0; values[0].len()]);
            continue;
        }
        if frames[k] <= frames[k - 1] {
            return Err(TdlpError::InvalidInput(format!(
                "observation timestamps must increase: {} after {}",
                frames[k],
                frames[k - 1]
            )));
        }
        let gap = (frames[k] - frames[k - 1]) as f64;
        out.push(
            values[k]
                .iter()
                .zip(&values[k - 1])
                .map(|(a, b)| (a - b) / gap)
                .collect(),
        );
    }
    Ok(out)
}

/// Per-dimension mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            n += 1;
            for d in 0..dim {
                sum[d] += r[d];
            }
        }
        if n < 2 {
            return Err(TdlpError::InvalidInput(format!(
                "standardizer needs at least 2 samples, got {n}"
            )));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for r in &rows {
            for d in 0..dim {
                let c = r[d] - mean[d];
                sq[d] += c * c;
            }
        }
        let mut clamped = 0;
        let std = sq
            .iter()
            .map(|s| {
                let v = (s / n as f64).sqrt();
                if v < STD_EPS {
                    clamped += 1;
                    STD_EPS
                } else {
                    v
                }
            })
            .collect();
        if clamped > 0 {
            warn!("{clamped} feature dimension(s) have zero variance; std clamped to {STD_EPS}");
        }
        Ok(FeatureStats { mean, std })
    }

    pub fn apply(&self, row: &mut [f64]) {
        for (d, v) in row.iter_mut().enumerate() {
            *v = (*v - self.mean[d]) / self.std[d];
        }
    }
}

/// Standardization statistics of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub static_stats: FeatureStats,
    pub motion_stats: Option<FeatureStats>,
}

/// Standardization statistics keyed by modality name; stored in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub modalities: BTreeMap<String, ModalityStats>,
}

/// Inputs of one modality, tracks packed row-wise in history order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityInputs {
    /// `sum(track_lengths) x static_dim`.
    pub track_static: Mat<f64>,
    /// `sum(track_lengths) x motion_dim`; absent for appearance.
    pub track_motion: Option<Mat<f64>>,
    /// `M x static_dim`.
    pub detections: Mat<f64>,
}

/// Everything the network consumes for one association problem.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    /// Observation count of each track after windowing.
    pub track_lengths: Vec<usize>,
    pub num_detections: usize,
    /// One entry per modality, in configuration order.
    pub modalities: Vec<ModalityInputs>,
}

impl ModelInputs {
    pub fn num_tracks(&self) -> usize {
        self.track_lengths.len()
    }
}

/// Geometric features before standardization.
struct RawModality {
    track_static: Vec<Vec<f64>>,
    track_motion: Option<Vec<Vec<f64>>>,
    detections: Vec<Vec<f64>>,
}

fn windowed(tracks: &[TrackHistory], window: usize) -> Result<Vec<&[DetectionRecord]>> {
    tracks
        .iter()
        .map(|t| {
            if t.observations.is_empty() {
                return Err(TdlpError::InvalidInput(format!("track {} has no observations", t.id)));
            }
            let n = t.observations.len();
            Ok(&t.observations[n.saturating_sub(window.max(1))..])
        })
        .collect()
}

fn transform_modality(
    spec: &ModalitySpec,
    tracks: &[&[DetectionRecord]],
    detections: &[DetectionRecord],
) -> Result<RawModality> {
    let mut track_rows = Vec::new();
    for obs in tracks {
        for r in obs.iter() {
            track_rows.push(spec.raw_vector(r)?);
        }
    }
    let mut det_rows = detections
        .iter()
        .map(|r| spec.raw_vector(r))
        .collect::<Result<Vec<_>>>()?;
    if !spec.is_geometric() {
        return Ok(RawModality {
            track_static: track_rows,
            track_motion: None,
            detections: det_rows,
        });
    }

    // One population per association problem: every box the model sees.
    let dim = spec.static_dim();
    let population = track_rows.iter().chain(&det_rows).map(Vec::as_slice);
    let normalize: Box<dyn Fn(&mut Vec<f64>)> = match spec.kind {
        ModalityKind::Bbox => {
            let mm = MinMax::fit(population, dim);
            Box::new(move |row: &mut Vec<f64>| {
                for d in 0..BBOX_DIM {
                    if d != BBOX_CONF {
                        row[d] = mm.scale(row[d], d);
                    }
                }
            })
        }
        ModalityKind::Keypoints { points, with_conf } => {
            // keypoints share the box x/y statistics
            let mut boxes = Vec::new();
            for r in tracks.iter().flat_map(|o| o.iter()).chain(detections) {
                boxes.push(ModalitySpec::bbox().raw_vector(r)?);
            }
            let mm = MinMax::fit(boxes.iter().map(Vec::as_slice), BBOX_DIM);
            let stride = if with_conf { 3 } else { 2 };
            Box::new(move |row: &mut Vec<f64>| {
                for p in 0..points {
                    row[p * stride] = mm.scale(row[p * stride], 0);
                    row[p * stride + 1] = mm.scale(row[p * stride + 1], 1);
                }
            })
        }
        ModalityKind::Appearance { .. } => unreachable!(),
    };
    track_rows.iter_mut().for_each(|r| normalize(r));
    det_rows.iter_mut().for_each(|r| normalize(r));

    let mut motion = Vec::with_capacity(track_rows.len());
    let mut offset = 0;
    for obs in tracks {
        let frames: Vec<u32> = obs.iter().map(|r| r.frame).collect();
        let vals = &track_rows[offset..offset + obs.len()];
        motion.extend(temporal_differences(&frames, vals)?);
        offset += obs.len();
    }
    Ok(RawModality {
        track_static: track_rows,
        track_motion: Some(motion),
        detections: det_rows,
    })
}

fn to_mat(rows: Vec<Vec<f64>>, dim: usize) -> Mat<f64> {
    let n = rows.len();
    Mat::from_vec(n, dim, rows.into_iter().flatten().collect())
}

/// Builds the network inputs for `tracks` against `detections`.
///
/// Geometric modalities go through min–max normalization, temporal
/// differences (tracks only) and standardization, in that order. Appearance
/// vectors pass through untouched. Tracks keep their last `window`
/// observations.
pub fn assemble_inputs(
    tracks: &[TrackHistory],
    detections: &[DetectionRecord],
    modalities: &[ModalitySpec],
    stats: Option<&Standardizer>,
    window: usize,
) -> Result<ModelInputs> {
    let tracks = windowed(tracks, window)?;
    let mut out = Vec::with_capacity(modalities.len());
    for spec in modalities {
        let raw = transform_modality(spec, &tracks, detections)?;
        let RawModality {
            mut track_static,
            mut track_motion,
            mut detections,
        } = raw;
        if spec.is_geometric() {
            if let Some(st) = stats {
                let ms = st.modalities.get(&spec.name).ok_or_else(|| {
                    TdlpError::Config(format!("no standardization statistics for `{}`", spec.name))
                })?;
                for row in track_static.iter_mut().chain(detections.iter_mut()) {
                    ms.static_stats.apply(row);
                }
                if let (Some(motion), Some(mstats)) = (track_motion.as_mut(), ms.motion_stats.as_ref()) {
                    for row in motion.iter_mut() {
                        mstats.apply(row);
                    }
                }
            }
        }
        out.push(ModalityInputs {
            track_static: to_mat(track_static, spec.static_dim()),
            track_motion: track_motion.map(|m| to_mat(m, spec.motion_dim())),
            detections: to_mat(detections, spec.static_dim()),
        });
    }
    Ok(ModelInputs {
        track_lengths: tracks.iter().map(|t| t.len()).collect(),
        num_detections: detections.len(),
        modalities: out,
    })
}

/// Fits standardization statistics on a set of association problems.
pub fn fit_standardizer<'a>(
    problems: impl IntoIterator<Item = (&'a [TrackHistory], &'a [DetectionRecord])>,
    modalities: &[ModalitySpec],
    window: usize,
) -> Result<Standardizer> {
    let mut static_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); modalities.len()];
    let mut motion_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); modalities.len()];
    for (tracks, dets) in problems {
        let tracks = windowed(tracks, window)?;
        for (m, spec) in modalities.iter().enumerate() {
            if !spec.is_geometric() {
                continue;
            }
            let raw = transform_modality(spec, &tracks, dets)?;
            static_rows[m].extend(raw.track_static);
            static_rows[m].extend(raw.detections);
            if let Some(mo) = raw.track_motion {
                motion_rows[m].extend(mo);
            }
        }
    }
    let mut out = Standardizer::default();
    for (m, spec) in modalities.iter().enumerate() {
        if !spec.is_geometric() {
            continue;
        }
        let static_stats = FeatureStats::fit(static_rows[m].iter().map(Vec::as_slice), spec.static_dim())?;
        let motion_stats = Some(FeatureStats::fit(
            motion_rows[m].iter().map(Vec::as_slice),
            spec.motion_dim(),
        )?);
        out.modalities.insert(
            spec.name.clone(),
            ModalityStats {
                static_stats,
                motion_stats,
            },
        );
    }
    Ok(out)
}
