//! Tracking metrics: CLEAR MOT, IDF1 and HOTA.
//!
//! Each metric first reduces a sequence to counts; reports over several
//! sequences pool the counts before forming ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::assoc::hungarian_solve;
use crate::error::{Result, TdlpError};
use crate::io::{BBox, SequenceData};
use crate::tensor::Mat;

/// IoU threshold for CLEAR MOT and IDF1 matches.
pub const MATCH_IOU: f64 = 0.5;

/// Localization thresholds 0.05, 0.10, ..., 0.95.
pub fn hota_alphas() -> [f64; 19] {
    std::array::from_fn(|k| 0.05 * (k + 1) as f64)
}

/// Tolerance applied to the HOTA localization thresholds.
const ALPHA_EPS: f64 = f64::EPSILON;

/// Maximum-weight matching; pairs scoring zero are dropped.
fn max_weight_pairs(weights: &Mat<f64>) -> Vec<(usize, usize)> {
    if weights.rows() == 0 || weights.cols() == 0 {
        return Vec::new();
    }
    hungarian_solve(&weights.map(|w| -w), None)
        .pairs
        .into_iter()
        .filter(|&(i, j)| weights.get(i, j) > 0.0)
        .collect()
}

fn iou_matrix(gt: &[BBox], pred: &[BBox]) -> Mat<f64> {
    Mat::from_fn(gt.len(), pred.len(), |i, j| gt[i].iou(&pred[j]))
}

/// Matches ground-truth to predicted boxes, maximizing the summed IoU over
/// pairs with IoU at least `threshold`.
pub fn frame_match(gt: &[BBox], pred: &[BBox], threshold: f64) -> Vec<(usize, usize)> {
    let iou = iou_matrix(gt, pred);
    let w = iou.map(|v| if v >= threshold { v } else { 0.0 });
    max_weight_pairs(&w)
        .into_iter()
        .filter(|&(i, j)| iou.get(i, j) >= threshold)
        .collect()
}

/// Boxes and ids of one frame.
struct FrameObjects {
    ids: Vec<i64>,
    boxes: Vec<BBox>,
}

/// Frames of a ground-truth / prediction pair, aligned on the union of
/// their frame indices. Unlabeled ground-truth rows are ignored.
fn aligned_frames(gt: &SequenceData, pred: &SequenceData) -> Vec<(FrameObjects, FrameObjects)> {
    let frames: BTreeSet<u32> = gt.frames.keys().chain(pred.frames.keys()).copied().collect();
    let collect = |seq: &SequenceData, f: u32, labeled_only: bool| {
        let recs = seq.frames.get(&f).map(Vec::as_slice).unwrap_or(&[]);
        let recs = recs.iter().filter(|r| !labeled_only || r.is_labeled());
        let (ids, boxes) = recs.map(|r| (r.id, r.bbox)).unzip();
        FrameObjects { ids, boxes }
    };
    frames
        .into_iter()
        .map(|f| (collect(gt, f, true), collect(pred, f, false)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClearCounts {
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
}

impl ClearCounts {
    /// `None` when there is no ground truth.
    pub fn mota(&self) -> Option<f64> {
        (self.gt > 0).then(|| 1.0 - (self.fn_ + self.fp + self.idsw) as f64 / self.gt as f64)
    }

    pub fn merge(&mut self, o: &ClearCounts) {
        self.gt += o.gt;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.idsw += o.idsw;
    }
}

/// Bonus that makes a ground-truth object keep its previous prediction id
/// whenever that pair is still a valid match.
const CONTINUATION_BONUS: f64 = 1000.0;

pub fn compute_clearmot(gt: &SequenceData, pred: &SequenceData) -> ClearCounts {
    let mut c = ClearCounts::default();
    let mut last_match: BTreeMap<i64, i64> = BTreeMap::new();
    for (g, p) in aligned_frames(gt, pred) {
        let iou = iou_matrix(&g.boxes, &p.boxes);
        let w = Mat::from_fn(g.ids.len(), p.ids.len(), |i, j| {
            let v = iou.get(i, j);
            if v < MATCH_IOU {
                0.0
            } else if last_match.get(&g.ids[i]) == Some(&p.ids[j]) {
                v + CONTINUATION_BONUS
            } else {
                v
            }
        });
        let pairs = max_weight_pairs(&w);
        for &(i, j) in &pairs {
            if let Some(prev) = last_match.insert(g.ids[i], p.ids[j]) {
                c.idsw += usize::from(prev != p.ids[j]);
            }
        }
        c.gt += g.ids.len();
        c.tp += pairs.len();
        c.fn_ += g.ids.len() - pairs.len();
        c.fp += p.ids.len() - pairs.len();
    }
    c
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IdCounts {
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

impl IdCounts {
    pub fn idf1(&self) -> f64 {
        let denom = 2 * self.idtp + self.idfp + self.idfn;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.idtp as f64 / denom as f64
        }
    }

    pub fn merge(&mut self, o: &IdCounts) {
        self.idtp += o.idtp;
        self.idfp += o.idfp;
        self.idfn += o.idfn;
    }
}

fn index_of(ids: impl Iterator<Item = i64>) -> BTreeMap<i64, usize> {
    let set: BTreeSet<i64> = ids.collect();
    set.into_iter().enumerate().map(|(k, id)| (id, k)).collect()
}

/// Identity-level matching: each ground-truth identity is paired with at
/// most one predicted identity for the whole sequence, maximizing the number
/// of frames where the pair overlaps with IoU at least 0.5.
pub fn compute_idf1(gt: &SequenceData, pred: &SequenceData) -> IdCounts {
    let frames = aligned_frames(gt, pred);
    let gi = index_of(frames.iter().flat_map(|(g, _)| g.ids.iter().copied()));
    let pi = index_of(frames.iter().flat_map(|(_, p)| p.ids.iter().copied()));
    let mut overlap = Mat::<f64>::zeros(gi.len(), pi.len());
    let (mut n_gt, mut n_pred) = (0, 0);
    for (g, p) in &frames {
        n_gt += g.ids.len();
        n_pred += p.ids.len();
        for (a, gb) in g.boxes.iter().enumerate() {
            for (b, pb) in p.boxes.iter().enumerate() {
                if gb.iou(pb) >= MATCH_IOU {
                    let (r, c) = (gi[&g.ids[a]], pi[&p.ids[b]]);
                    overlap.set(r, c, overlap.get(r, c) + 1.0);
                }
            }
        }
    }
    let idtp: usize = max_weight_pairs(&overlap)
        .iter()
        .map(|&(r, c)| overlap.get(r, c) as usize)
        .sum();
    IdCounts {
        idtp,
        idfp: n_pred - idtp,
        idfn: n_gt - idtp,
    }
}

/// HOTA counts per localization threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct HotaCounts {
    pub tp: [f64; 19],
    pub fn_: [f64; 19],
    pub fp: [f64; 19],
    /// Sum over true positives of their association accuracy.
    pub ass_sum: [f64; 19],
}

impl Default for HotaCounts {
    fn default() -> Self {
        HotaCounts {
            tp: [0.0; 19],
            fn_: [0.0; 19],
            fp: [0.0; 19],
            ass_sum: [0.0; 19],
        }
    }
}

impl HotaCounts {
    pub fn det_a_at(&self, a: usize) -> f64 {
        self.tp[a] / (self.tp[a] + self.fn_[a] + self.fp[a]).max(1.0)
    }

    pub fn ass_a_at(&self, a: usize) -> f64 {
        self.ass_sum[a] / self.tp[a].max(1.0)
    }

    pub fn hota_at(&self, a: usize) -> f64 {
        (self.det_a_at(a) * self.ass_a_at(a)).sqrt()
    }

    fn mean(f: impl Fn(usize) -> f64) -> f64 {
        (0..19).map(f).sum::<f64>() / 19.0
    }

    pub fn det_a(&self) -> f64 {
        Self::mean(|a| self.det_a_at(a))
    }

    pub fn ass_a(&self) -> f64 {
        Self::mean(|a| self.ass_a_at(a))
    }

    pub fn hota(&self) -> f64 {
        Self::mean(|a| self.hota_at(a))
    }

    pub fn merge(&mut self, o: &HotaCounts) {
        for a in 0..19 {
            self.tp[a] += o.tp[a];
            self.fn_[a] += o.fn_[a];
            self.fp[a] += o.fp[a];
            self.ass_sum[a] += o.ass_sum[a];
        }
    }
}

/// Per-frame matching is weighted by a global alignment score between
/// identities, so pairs that overlap often across the sequence are
/// preferred; the matching is computed once per frame and then thresholded
/// at every alpha.
pub fn compute_hota(gt: &SequenceData, pred: &SequenceData) -> HotaCounts {
    let frames = aligned_frames(gt, pred);
    let gi = index_of(frames.iter().flat_map(|(g, _)| g.ids.iter().copied()));
    let pi = index_of(frames.iter().flat_map(|(_, p)| p.ids.iter().copied()));
    let (ng, np) = (gi.len(), pi.len());
    let mut potential = Mat::<f64>::zeros(ng, np);
    let mut gt_count = vec![0.0; ng];
    let mut pred_count = vec![0.0; np];
    let mut sims = Vec::with_capacity(frames.len());
    for (g, p) in &frames {
        let sim = iou_matrix(&g.boxes, &p.boxes);
        let row_sum: Vec<f64> = (0..sim.rows()).map(|i| sim.row(i).iter().sum()).collect();
        let col_sum: Vec<f64> = (0..sim.cols()).map(|j| (0..sim.rows()).map(|i| sim.get(i, j)).sum()).collect();
        for (a, &gid) in g.ids.iter().enumerate() {
            for (b, &pid) in p.ids.iter().enumerate() {
                let denom = row_sum[a] + col_sum[b] - sim.get(a, b);
                if denom > f64::EPSILON {
                    let (r, c) = (gi[&gid], pi[&pid]);
                    potential.set(r, c, potential.get(r, c) + sim.get(a, b) / denom);
                }
            }
        }
        for gid in &g.ids {
            gt_count[gi[gid]] += 1.0;
        }
        for pid in &p.ids {
            pred_count[pi[pid]] += 1.0;
        }
        sims.push(sim);
    }
    let global = Mat::from_fn(ng, np, |r, c| {
        let v = potential.get(r, c);
        let denom = gt_count[r] + pred_count[c] - v;
        if denom > 0.0 {
            v / denom
        } else {
            0.0
        }
    });

    let alphas = hota_alphas();
    let mut out = HotaCounts::default();
    let mut matches = vec![Mat::<f64>::zeros(ng, np); 19];
    for ((g, p), sim) in frames.iter().zip(&sims) {
        let score = Mat::from_fn(g.ids.len(), p.ids.len(), |a, b| {
            global.get(gi[&g.ids[a]], pi[&p.ids[b]]) * sim.get(a, b)
        });
        let pairs = max_weight_pairs(&score);
        for (k, &alpha) in alphas.iter().enumerate() {
            let kept: Vec<&(usize, usize)> = pairs.iter().filter(|&&(a, b)| sim.get(a, b) >= alpha - ALPHA_EPS).collect();
            let n = kept.len() as f64;
            out.tp[k] += n;
            out.fn_[k] += g.ids.len() as f64 - n;
            out.fp[k] += p.ids.len() as f64 - n;
            for &&(a, b) in &kept {
                let (r, c) = (gi[&g.ids[a]], pi[&p.ids[b]]);
                let v = matches[k].get(r, c);
                matches[k].set(r, c, v + 1.0);
            }
        }
    }
    for (k, m) in matches.iter().enumerate() {
        let mut s = 0.0;
        for r in 0..ng {
            for c in 0..np {
                let tpa = m.get(r, c);
                if tpa > 0.0 {
                    s += tpa * tpa / (gt_count[r] + pred_count[c] - tpa);
                }
            }
        }
        out.ass_sum[k] = s;
    }
    out
}

/// All counts of one sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceCounts {
    pub clear: ClearCounts,
    pub id: IdCounts,
    pub hota: HotaCounts,
}

impl SequenceCounts {
    pub fn merge(&mut self, o: &SequenceCounts) {
        self.clear.merge(&o.clear);
        self.id.merge(&o.id);
        self.hota.merge(&o.hota);
    }

    pub fn row(&self, seq: impl Into<String>) -> EvalRow {
        EvalRow {
            seq: seq.into(),
            hota: self.hota.hota(),
            det_a: self.hota.det_a(),
            ass_a: self.hota.ass_a(),
            mota: self.clear.mota(),
            idf1: self.id.idf1(),
            idsw: self.clear.idsw,
            fp: self.clear.fp,
            fn_: self.clear.fn_,
            gt: self.clear.gt,
        }
    }
}

pub fn evaluate_sequence(gt: &SequenceData, pred: &SequenceData) -> SequenceCounts {
    SequenceCounts {
        clear: compute_clearmot(gt, pred),
        id: compute_idf1(gt, pred),
        hota: compute_hota(gt, pred),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub seq: String,
    pub hota: f64,
    pub det_a: f64,
    pub ass_a: f64,
    pub mota: Option<f64>,
    pub idf1: f64,
    pub idsw: usize,
    pub fp: usize,
    pub fn_: usize,
    pub gt: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Hota,
    Idf1,
    Mota,
}

impl std::str::FromStr for Metric {
    type Err = TdlpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hota" => Ok(Metric::Hota),
            "idf1" => Ok(Metric::Idf1),
            "mota" | "clear" => Ok(Metric::Mota),
            other => Err(TdlpError::Config(format!("unknown metric `{other}`"))),
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<BTreeSet<Metric>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// Per-sequence rows plus the pooled `COMBINED` row.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sequences: Vec<EvalRow>,
    pub combined: EvalRow,
}

impl EvalReport {
    /// Fixed columns; metrics outside `metrics` are left blank.
    pub fn to_csv(&self, metrics: &BTreeSet<Metric>) -> String {
        let mut out = String::from("seq,HOTA,DetA,AssA,MOTA,IDF1,IDSW,FP,FN,GT\n");
        let has = |m| metrics.contains(&m);
        for r in self.sequences.iter().chain(std::iter::once(&self.combined)) {
            let f = |v: f64, on: bool| if on { format!("{v:.6}") } else { String::new() };
            let u = |v: usize, on: bool| if on { v.to_string() } else { String::new() };
            let mota = match (has(Metric::Mota), r.mota) {
                (true, Some(v)) => format!("{v:.6}"),
                _ => String::new(),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.seq,
                f(r.hota, has(Metric::Hota)),
                f(r.det_a, has(Metric::Hota)),
                f(r.ass_a, has(Metric::Hota)),
                mota,
                f(r.idf1, has(Metric::Idf1)),
                u(r.idsw, has(Metric::Mota)),
                u(r.fp, has(Metric::Mota)),
                u(r.fn_, has(Metric::Mota)),
                r.gt,
            )
            .unwrap();
        }
        out
    }
}

/// Evaluates `(ground truth, prediction)` pairs; sequences run in parallel.
pub fn evaluate(pairs: &[(SequenceData, SequenceData)]) -> EvalReport {
    let counts: Vec<SequenceCounts> = pairs.par_iter().map(|(g, p)| evaluate_sequence(g, p)).collect();
    let mut total = SequenceCounts::default();
    for c in &counts {
        total.merge(c);
    }
    EvalReport {
        sequences: counts.iter().zip(pairs).map(|(c, (g, _))| c.row(g.name.clone())).collect(),
        combined: total.row("COMBINED"),
    }
}
