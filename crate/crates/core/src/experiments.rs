//! Controlled single-track scenarios, gate calibration, the IoU baseline
//! and feature-subset ablations.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assoc::associate;
use crate::error::{Result, TdlpError};
use crate::eval::{evaluate, EvalReport};
use crate::features::ModalitySpec;
use crate::io::{AugmentSpec, DetectionRecord, SequenceData, TrackHistory};
use crate::model::{Head, LinkMatrix, Model, ModelConfig};
use crate::synth::{generate_world, simulate_scenario, MotionKind, MotionPattern, ScenarioOutput, ScenarioSpec, WorldSpec};
use crate::tracker::{run_sequence, IouScorer, LinkScorer, TrackerConfig};
use crate::training::{draw_clip, train, TrainConfig, TrainData, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tdlp,
    Ctdp,
}

impl Method {
    pub fn head(self) -> Head {
        match self {
            Method::Tdlp => Head::Link,
            Method::Ctdp => Head::Contrastive,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Tdlp => "TDLP",
            Method::Ctdp => "CTDP",
        })
    }
}

impl FromStr for Method {
    type Err = TdlpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tdlp" => Ok(Method::Tdlp),
            "ctdp" => Ok(Method::Ctdp),
            other => Err(TdlpError::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestKind {
    Rank,
    Threshold,
}

/// Positive must strictly outscore every negative.
pub fn rank_test(positive: f64, negatives: &[f64]) -> bool {
    negatives.iter().all(|&n| positive > n)
}

/// Every negative must stay at or below the gate.
pub fn threshold_test(negatives: &[f64], threshold: f64) -> bool {
    negatives.iter().all(|&n| n <= threshold)
}

/// Scores of one scenario under one negative configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellScores {
    /// Positive and negative scored together.
    pub positive: f64,
    pub negative: f64,
    /// The negative scored with the positive absent.
    pub negative_alone: f64,
}

fn score_one(scorer: &dyn LinkScorer, track: &TrackHistory, candidates: &[DetectionRecord]) -> Result<LinkMatrix> {
    let s = scorer.score(std::slice::from_ref(track), candidates)?;
    if s.shape() != (1, candidates.len()) {
        return Err(TdlpError::DimensionMismatch {
            expected: candidates.len(),
            found: s.shape().1,
            context: "scenario scores".into(),
        });
    }
    Ok(s)
}

/// Feeds the single track and the candidates through the full scorer, one
/// problem per negative configuration.
pub fn score_scenario(scorer: &dyn LinkScorer, out: &ScenarioOutput) -> Result<Vec<CellScores>> {
    let track = out.track();
    let pos = out.positive_record();
    out.negative_records()
        .into_iter()
        .map(|neg| {
            let both = score_one(scorer, &track, &[pos.clone(), neg.clone()])?;
            let alone = score_one(scorer, &track, std::slice::from_ref(&neg))?;
            Ok(CellScores {
                positive: both.scores.get(0, 0),
                negative: both.scores.get(0, 1),
                negative_alone: alone.scores.get(0, 0),
            })
        })
        .collect()
}

/// Six motion patterns by four negative configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct PassFailMatrix {
    pub kind: TestKind,
    pub method: Method,
    pub cells: [[bool; 4]; 6],
}

impl PassFailMatrix {
    pub fn passes(&self) -> usize {
        self.cells.iter().flatten().filter(|&&c| c).count()
    }

    pub fn render(&self) -> String {
        let title = match self.kind {
            TestKind::Rank => "rank test",
            TestKind::Threshold => "threshold test",
        };
        let mut s = format!("{} {} ({}/24 pass)\n", self.method, title, self.passes());
        writeln!(s, "{:<20}{:>6}{:>6}{:>6}{:>6}", "pattern", "n0", "n1", "n2", "n3").unwrap();
        for (kind, row) in MotionKind::ALL.iter().zip(&self.cells) {
            write!(s, "{:<20}", kind.label()).unwrap();
            for &c in row {
                write!(s, "{:>6}", if c { "pass" } else { "FAIL" }).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub rank: PassFailMatrix,
    pub threshold: PassFailMatrix,
    pub gate: f64,
    /// `scores[pattern][config]`.
    pub scores: Vec<Vec<CellScores>>,
}

impl SuiteReport {
    pub fn render(&self) -> String {
        let mut s = self.rank.render();
        s.push('\n');
        s.push_str(&self.threshold.render());
        writeln!(s, "gate: {}", self.gate).unwrap();
        writeln!(s, "\npattern,config,positive,negative,negative_alone").unwrap();
        for (kind, row) in MotionKind::ALL.iter().zip(&self.scores) {
            for (k, c) in row.iter().enumerate() {
                writeln!(
                    s,
                    "{},n{k},{:.6},{:.6},{:.6}",
                    kind.label(),
                    c.positive,
                    c.negative,
                    c.negative_alone
                )
                .unwrap();
            }
        }
        s
    }
}

/// Runs both tests over every pattern and negative configuration.
pub fn passfail_suite(
    scorer: &dyn LinkScorer,
    method: Method,
    gate: f64,
    spec: &ScenarioSpec,
) -> Result<SuiteReport> {
    if spec.negative_offsets.len() != 4 {
        return Err(TdlpError::Config(format!(
            "the suite needs 4 negative configurations, got {}",
            spec.negative_offsets.len()
        )));
    }
    let mut rank = [[false; 4]; 6];
    let mut thresh = [[false; 4]; 6];
    let mut scores = Vec::with_capacity(6);
    for (r, &kind) in MotionKind::ALL.iter().enumerate() {
        let out = simulate_scenario(spec, &MotionPattern::reference(kind))?;
        let cells = score_scenario(scorer, &out)?;
        for (c, cell) in cells.iter().enumerate() {
            rank[r][c] = rank_test(cell.positive, &[cell.negative]);
            thresh[r][c] = threshold_test(&[cell.negative_alone], gate);
        }
        scores.push(cells);
    }
    Ok(SuiteReport {
        rank: PassFailMatrix {
            kind: TestKind::Rank,
            method,
            cells: rank,
        },
        threshold: PassFailMatrix {
            kind: TestKind::Threshold,
            method,
            cells: thresh,
        },
        gate,
        scores,
    })
}

/// Gate a model is operated at: its calibrated value, else `fallback`.
pub fn operating_gate(model: &Model, fallback: f64) -> f64 {
    model.link_threshold.unwrap_or(fallback)
}

/// Final-frame association F1 on `problems` at `gate`.
pub fn association_f1(problems: &[(LinkMatrix, Vec<Option<usize>>)], gate: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (s, want) in problems {
        let a = associate(s, gate);
        let mut got = vec![None; want.len()];
        for &(i, j, _) in &a.matches {
            got[i] = Some(j);
        }
        for (g, w) in got.iter().zip(want) {
            match (g, w) {
                (Some(g), Some(w)) if g == w => tp += 1,
                (Some(_), Some(_)) => {
                    fp += 1;
                    fn_ += 1;
                }
                (Some(_), None) => fp += 1,
                (None, Some(_)) => fn_ += 1,
                (None, None) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Picks the gate maximizing final-frame association F1 on held-out clips.
/// Candidates sit halfway between consecutive distinct scores; ties keep
/// the lowest gate.
pub fn calibrate_gate(model: &Model, sequences: &[SequenceData], clips: usize, clip_length: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::with_capacity(clips);
    let mut all = Vec::new();
    for _ in 0..clips {
        let clip = draw_clip(sequences, clip_length, &AugmentSpec::none(), &mut rng)?;
        let s = model.score(&clip.track_histories, &clip.final_detections)?;
        all.extend_from_slice(s.scores.data());
        problems.push((s, clip.positive_columns()));
    }
    all.sort_by(f64::total_cmp);
    all.dedup();
    if all.is_empty() {
        return Err(TdlpError::InvalidInput("no scores to calibrate on".into()));
    }
    let mut candidates = vec![all[0] - 1e-6];
    // Subsample long score lists; the F1 curve is flat at this resolution.
    let stride = (all.len() / 400).max(1);
    for w in all.windows(2).step_by(stride) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for g in candidates {
        let f1 = association_f1(&problems, g);
        if f1 > best.0 {
            best = (f1, g);
        }
    }
    info!("calibrated gate {:.4} (F1 {:.4})", best.1, best.0);
    Ok(best.1)
}

/// IoU gate of the greedy baseline.
pub const BASELINE_IOU: f64 = 0.3;

/// Greedy IoU association with the same lifecycle as `cfg`.
pub fn iou_baseline(detections: &SequenceData, cfg: &TrackerConfig) -> Result<SequenceData> {
    let cfg = TrackerConfig {
        link_threshold: BASELINE_IOU,
        ..cfg.clone()
    };
    run_sequence(detections, &IouScorer { greedy: true }, &cfg)
}

/// Tracks every `(ground truth, detections)` pair and evaluates the output.
pub fn track_and_evaluate(
    scorer: &dyn LinkScorer,
    test: &[(SequenceData, SequenceData)],
    cfg: &TrackerConfig,
) -> Result<(EvalReport, Vec<SequenceData>)> {
    let outputs: Vec<SequenceData> = test
        .iter()
        .map(|(_, dets)| run_sequence(dets, scorer, cfg))
        .collect::<Result<_>>()?;
    let pairs: Vec<(SequenceData, SequenceData)> =
        test.iter().map(|(g, _)| g.clone()).zip(outputs.iter().cloned()).collect();
    Ok((evaluate(&pairs), outputs))
}

/// Ground truth for training and `(ground truth, detections)` test pairs.
#[derive(Clone, Debug)]
pub struct WorldSplit {
    pub data: TrainData,
    pub test: Vec<(SequenceData, SequenceData)>,
}

/// Seed stride between the train, validation and test blocks, so growing
/// one block never changes the worlds of another.
pub const SPLIT_SEED_STRIDE: u64 = 10_000;

/// Generates training, validation and test worlds. World `k` of block `b`
/// uses seed `seed + b * SPLIT_SEED_STRIDE + k`.
pub fn synthetic_split(base: &WorldSpec, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<WorldSplit> {
    let make = |block: u64, k: usize, tag: &str| -> Result<(SequenceData, SequenceData)> {
        let spec = WorldSpec {
            seed: seed.wrapping_add(block * SPLIT_SEED_STRIDE + k as u64),
            ..base.clone()
        };
        let (mut gt, mut dets) = generate_world(&spec)?;
        gt.name = format!("{tag}-{k:02}");
        dets.name = gt.name.clone();
        Ok((gt, dets))
    };
    let train = (0..n_train).map(|k| make(0, k, "train").map(|p| p.0)).collect::<Result<_>>()?;
    let val = (0..n_val).map(|k| make(1, k, "val").map(|p| p.0)).collect::<Result<_>>()?;
    let test = (0..n_test).map(|k| make(2, k, "test")).collect::<Result<_>>()?;
    Ok(WorldSplit {
        data: TrainData { train, val },
        test,
    })
}

/// A dataset for the ablation: training ground truth and test pairs whose
/// detections carry the modality features.
#[derive(Clone, Debug)]
pub struct AblationDataset {
    pub name: String,
    pub split: WorldSplit,
}

/// Single-modality subsets followed by the full set.
pub fn modality_subsets(all: &[ModalitySpec]) -> Vec<(String, Vec<ModalitySpec>)> {
    let mut out: Vec<(String, Vec<ModalitySpec>)> = all.iter().map(|m| (m.name.clone(), vec![m.clone()])).collect();
    out.push(("all".into(), all.to_vec()));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub dataset: String,
    pub subset: String,
    pub hota: f64,
    pub assa: f64,
    pub idf1: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("dataset,features,HOTA,AssA,IDF1\n");
    for r in rows {
        writeln!(s, "{},{},{:.6},{:.6},{:.6}", r.dataset, r.subset, r.hota, r.assa, r.idf1).unwrap();
    }
    s
}

fn check_modalities(seq: &SequenceData, specs: &[ModalitySpec]) -> Result<()> {
    let present = seq.modalities()?;
    for m in specs.iter().filter(|m| m.name != "bbox") {
        if !present.contains_key(&m.name) {
            return Err(TdlpError::InvalidInput(format!(
                "sequence `{}` has no `{}` features",
                seq.name, m.name
            )));
        }
    }
    Ok(())
}

/// Trains one model per subset with identical seeds and reports tracking
/// metrics on each dataset's test pairs.
pub fn feature_ablation(
    datasets: &[AblationDataset],
    subsets: &[(String, Vec<ModalitySpec>)],
    base: &ModelConfig,
    pretrain: &TrainConfig,
    finetune: &TrainConfig,
    tracker: &TrackerConfig,
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for ds in datasets {
        for (name, specs) in subsets {
            for seq in ds.split.data.train.iter().chain(ds.split.test.iter().map(|p| &p.1)) {
                check_modalities(seq, specs)?;
            }
            let cfg = ModelConfig {
                modalities: specs.clone(),
                ..base.clone()
            };
            info!("ablation: `{}` on {}", name, ds.name);
            let outcome = train(&cfg, &ds.split.data, pretrain, finetune, opts)?;
            let (report, _) = track_and_evaluate(&outcome.model, &ds.split.test, tracker)?;
            rows.push(AblationRow {
                dataset: ds.name.clone(),
                subset: name.clone(),
                hota: report.combined.hota,
                assa: report.combined.ass_a,
                idf1: report.combined.idf1,
            });
        }
    }
    Ok(rows)
}
