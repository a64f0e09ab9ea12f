//! Objectives, optimizer, schedule, the two-phase training loop and
//! finite-difference gradient verification.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assoc::associate;
use crate::autodiff::Tape;
use crate::error::{Result, TdlpError};
use crate::features::{assemble_inputs, fit_standardizer, ModelInputs, Standardizer};
use crate::io::{sample_clip, AugmentSpec, ClipSample, SequenceData};
use crate::model::{Graph, Head, LinkMatrix, Model, ModelConfig, ParamStore};
use crate::tensor::{Mat, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// All parameters train.
    Pretrain,
    /// Only fusion, joint interaction and head parameters train.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub pos_weight: f64,
    /// Clips drawn (fresh) per epoch.
    pub clips_per_epoch: usize,
    /// Clips whose gradients are summed into one optimizer step.
    pub clips_per_step: usize,
    /// Frames of history per clip.
    pub clip_length: usize,
    /// Held-out clips scored after every epoch.
    pub val_clips: usize,
    pub augment: AugmentSpec,
    pub seed: u64,
    /// Softmax temperature of the contrastive objective.
    pub temperature: f64,
}

impl TrainConfig {
    /// Per-modality pretraining with the published schedule.
    pub fn pretrain() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            learning_rate: 5e-2,
            weight_decay: 1e-2,
            warmup_epochs: 2,
            epochs: 30,
            clip_norm: 1.0,
            pos_weight: 10.0,
            clips_per_epoch: 200,
            clips_per_step: 4,
            clip_length: 50,
            val_clips: 50,
            augment: AugmentSpec::default(),
            seed: 0,
            temperature: 0.1,
        }
    }

    /// Multi-modal fine-tuning with the published schedule.
    pub fn finetune() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            learning_rate: 1e-5,
            weight_decay: 1e-3,
            warmup_epochs: 1,
            epochs: 10,
            ..TrainConfig::pretrain()
        }
    }

    /// Pretraining tuned for the small CPU model.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            warmup_epochs: 1,
            epochs: 60,
            clip_length: 10,
            ..TrainConfig::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TdlpError::Config(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.pos_weight >= 1.0) {
            return bad("pos_weight must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.epochs == 0 || self.clips_per_epoch == 0 || self.clips_per_step == 0 || self.clip_length == 0 {
            return bad("epochs, clips_per_epoch, clips_per_step and clip_length must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        let a = &self.augment;
        if !(a.jitter >= 0.0 && (0.0..1.0).contains(&a.dropout) && a.conf_noise >= 0.0 && (0.0..=1.0).contains(&a.distractors)) {
            return bad("augment needs jitter >= 0, dropout in [0, 1), conf_noise >= 0 and distractors in [0, 1]");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TdlpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TdlpError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.clips_per_epoch.div_ceil(self.clips_per_step)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Weighted binary cross-entropy summed over all pairs, from logits.
pub fn bce_link_loss(logits: &Mat<f64>, labels: &Mat<f64>, pos_weight: f64) -> Result<f64> {
    if logits.shape() != labels.shape() {
        return Err(TdlpError::DimensionMismatch {
            expected: labels.len(),
            found: logits.len(),
            context: "link logits vs labels".into(),
        });
    }
    Ok(logits
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&z, &y)| pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z))
        .sum())
}

/// Same loss evaluated directly on probabilities.
pub fn bce_link_loss_naive(scores: &LinkMatrix, labels: &Mat<f64>, pos_weight: f64) -> f64 {
    scores
        .scores
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&s, &y)| -(pos_weight * y * s.ln() + (1.0 - y) * (1.0 - s).ln()))
        .sum()
}

/// Track-to-detection InfoNCE over unit embeddings; rows without a positive
/// are skipped.
pub fn infonce_loss(tracks: &Mat<f64>, detections: &Mat<f64>, labels: &Mat<f64>, temperature: f64) -> f64 {
    let mut total = 0.0;
    let mut any = false;
    for i in 0..tracks.rows() {
        let Some(pos) = (0..labels.cols()).find(|&j| labels.get(i, j) > 0.5) else {
            continue;
        };
        any = true;
        let logits: Vec<f64> = (0..detections.rows())
            .map(|j| {
                let dot: f64 = tracks.row(i).iter().zip(detections.row(j)).map(|(a, b)| a * b).sum();
                dot / temperature
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        total += lse - logits[pos];
    }
    if !any {
        warn!("contrastive loss on a clip without positive pairs");
    }
    total
}

/// Linear warmup then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        let spe = cfg.steps_per_epoch();
        Schedule {
            lr_max: cfg.learning_rate,
            warmup_steps: cfg.warmup_epochs * spe,
            total_steps: cfg.epochs * spe,
        }
    }
}

pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.lr_max * step as f64 / s.warmup_steps as f64;
    }
    let decay = s.total_steps.saturating_sub(s.warmup_steps);
    if decay == 0 {
        return s.lr_max;
    }
    let p = ((step - s.warmup_steps) as f64 / decay as f64).min(1.0);
    0.5 * s.lr_max * (1.0 + (std::f64::consts::PI * p).cos())
}

/// AdamW moments for every trainable tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    m: BTreeMap<String, Mat<T>>,
    v: BTreeMap<String, Mat<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

/// Clips `grads` to the global norm, then applies one AdamW update. Returns
/// the pre-clipping gradient norm.
pub fn optimize_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Mat<T>>,
    state: &mut AdamState<T>,
    hyper: StepHyper,
) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(TdlpError::NonFiniteGradient(name.clone()));
        }
        sq += g.sum_sq().to_f64().unwrap();
    }
    let norm = sq.sqrt();
    let clip = if norm > hyper.clip_norm { hyper.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let f = T::from_f64_lossy;
    let (b1, b2) = (f(ADAM_BETA1), f(ADAM_BETA2));
    let (one, clip_t) = (T::one(), f(clip));
    let decay = f(1.0 - hyper.lr * hyper.weight_decay);
    let step_size = f(hyper.lr / bc1);
    let bc2_sqrt = f(bc2.sqrt());
    let eps = f(ADAM_EPS);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| TdlpError::Config(format!("gradient for unknown parameter `{name}`")))?;
        let (r, c) = g.shape();
        let m = state.m.entry(name.clone()).or_insert_with(|| Mat::zeros(r, c));
        let v = state.v.entry(name.clone()).or_insert_with(|| Mat::zeros(r, c));
        for k in 0..g.len() {
            let gk = g.data()[k] * clip_t;
            let mk = b1 * m.data()[k] + (one - b1) * gk;
            let vk = b2 * v.data()[k] + (one - b2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let pk = p.data()[k] * decay;
            p.data_mut()[k] = pk - step_size * mk / (vk.sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(norm)
}

/// Which parameters a phase updates.
pub fn is_trainable(phase: Phase, name: &str) -> bool {
    match phase {
        Phase::Pretrain => true,
        Phase::Finetune => ["fusion.", "joint.", "head.", "proj."].iter().any(|p| name.starts_with(p)),
    }
}

/// Training loss of one clip and the gradients of every trainable tensor.
pub fn loss_and_grads<T: Real>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    trainable: impl Fn(&str) -> bool,
    inputs: &ModelInputs,
    labels: &Mat<f64>,
    train: &TrainConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, BTreeMap<String, Mat<T>>)> {
    let mut tape = Tape::<T>::new();
    let mut g = Graph::new(&mut tape, cfg, params, &trainable, dropout_seed);
    let out = g.forward(inputs)?;
    let vars = g.vars().clone();
    let loss = match cfg.head {
        Head::Link => {
            let z = out.logits.expect("link head");
            tape.bce_with_logits(z, labels.cast(), T::from_f64_lossy(train.pos_weight))
        }
        Head::Contrastive => {
            let c = out.cosine.expect("contrastive head");
            let z = tape.scale(c, T::from_f64_lossy(1.0 / train.temperature));
            let targets: Vec<Option<usize>> = (0..labels.rows())
                .map(|i| (0..labels.cols()).find(|&j| labels.get(i, j) > 0.5))
                .collect();
            if targets.iter().all(Option::is_none) {
                warn!("contrastive loss on a clip without positive pairs");
            }
            tape.cross_entropy_rows(z, &targets)
        }
    };
    let value = tape.scalar(loss).to_f64().unwrap();
    let mut grads = tape.backward(loss);
    let mut out = BTreeMap::new();
    for (name, v) in vars {
        if trainable(&name) {
            let (r, c) = params.get(&name).unwrap().shape();
            out.insert(name, grads.take(v).unwrap_or_else(|| Mat::zeros(r, c)));
        }
    }
    Ok((value, out))
}

/// Ground-truth sequences to sample clips from.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<SequenceData>,
    /// Held-out sequences; validation falls back to `train` when empty.
    pub val: Vec<SequenceData>,
}

/// Draws a clip ending at a random frame of a random sequence.
pub fn draw_clip(
    sequences: &[SequenceData],
    clip_length: usize,
    augment: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ClipSample> {
    let usable: Vec<&SequenceData> = sequences
        .iter()
        .filter(|s| s.first_frame().is_some_and(|f| s.last_frame().unwrap() > f))
        .collect();
    if usable.is_empty() {
        return Err(TdlpError::InvalidInput("no sequence spans two frames".into()));
    }
    for _ in 0..64 {
        let seq = usable[rng.gen_range(0..usable.len())];
        let t = rng.gen_range(seq.first_frame().unwrap() + 1..=seq.last_frame().unwrap());
        let seed = rng.gen();
        let Ok(clip) = sample_clip(seq, t, clip_length, augment, seed) else {
            continue;
        };
        if clip.num_tracks() > 0 && clip.num_detections() > 0 {
            return Ok(clip);
        }
    }
    Err(TdlpError::InvalidInput("could not draw a non-empty clip".into()))
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub val_assoc_acc: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,step,loss,val_assoc_acc,val_loss,lr\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.epoch, r.step, r.loss, r.val_assoc_acc, r.val_loss, r.lr).unwrap();
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Sum clip gradients in a fixed order so runs are bit-reproducible.
    pub deterministic: bool,
}

/// Held-out association problems.
pub struct Validation {
    problems: Vec<(ModelInputs, Mat<f64>)>,
}

impl Validation {
    pub fn new(
        sequences: &[SequenceData],
        model: &ModelConfig,
        stats: &Standardizer,
        count: usize,
        clip_length: usize,
        augment: &AugmentSpec,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut problems = Vec::with_capacity(count);
        for _ in 0..count {
            let clip = draw_clip(sequences, clip_length, augment, &mut rng)?;
            let inputs = assemble_inputs(
                &clip.track_histories,
                &clip.final_detections,
                &model.modalities,
                Some(stats),
                model.history_window,
            )?;
            problems.push((inputs, clip.labels));
        }
        Ok(Validation { problems })
    }

    /// Share of tracks whose final-frame decision is right: matched to their
    /// own detection, or left unmatched when it is absent.
    pub fn accuracy(&self, model: &Model, gate: f64) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (inputs, labels) in &self.problems {
            let s = model.score_inputs(inputs)?;
            let a = associate(&s, gate);
            let mut got = vec![None; labels.rows()];
            for &(i, j, _) in &a.matches {
                got[i] = Some(j);
            }
            for (i, g) in got.iter().enumerate() {
                let want = (0..labels.cols()).find(|&j| labels.get(i, j) > 0.5);
                correct += usize::from(*g == want);
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
    }

    /// Mean training objective over the validation clips, without dropout.
    pub fn loss(&self, model: &Model, train: &TrainConfig) -> Result<f64> {
        let mut total = 0.0;
        for (inputs, labels) in &self.problems {
            total += loss_and_grads(&model.config, &model.params, |_| false, inputs, labels, train, None)?.0;
        }
        Ok(total / self.problems.len().max(1) as f64)
    }
}

/// Default decision gate during validation.
fn validation_gate(head: Head) -> f64 {
    match head {
        Head::Link => 0.5,
        Head::Contrastive => f64::NEG_INFINITY,
    }
}

/// Runs one phase on `params`, keeping the parameters of the epoch with the
/// best validation accuracy. Validation loss breaks ties.
pub fn train_phase(
    model: &ModelConfig,
    params: ParamStore<f32>,
    stats: &Standardizer,
    data: &TrainData,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(ParamStore<f32>, Vec<MetricsRow>)> {
    cfg.validate()?;
    model.validate()?;
    let val_source = if data.val.is_empty() { &data.train } else { &data.val };
    let validation = Validation::new(
        val_source,
        model,
        stats,
        cfg.val_clips,
        cfg.clip_length,
        &cfg.augment,
        cfg.seed ^ 0x5eed_0f_7a11,
    )?;
    let gate = validation_gate(model.head);
    let schedule = Schedule::new(cfg);
    let mut params = params;
    let mut state = AdamState::<f32>::default();
    let trainable = |n: &str| is_trainable(cfg.phase, n);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((f64, f64), ParamStore<f32>)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1_000_003 * (epoch as u64 + 1)));
        let mut clips = Vec::with_capacity(cfg.clips_per_epoch);
        for _ in 0..cfg.clips_per_epoch {
            let clip = draw_clip(&data.train, cfg.clip_length, &cfg.augment, &mut rng)?;
            let inputs = assemble_inputs(
                &clip.track_histories,
                &clip.final_detections,
                &model.modalities,
                Some(stats),
                model.history_window,
            )?;
            clips.push((inputs, clip.labels, rng.gen::<u64>()));
        }
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in clips.chunks(cfg.clips_per_step) {
            let run = |(inputs, labels, seed): &(ModelInputs, Mat<f64>, u64)| {
                loss_and_grads(model, &params, trainable, inputs, labels, cfg, Some(*seed))
            };
            let (loss, mut grads) = if opts.deterministic {
                let results: Vec<_> = batch.iter().map(run).collect::<Result<_>>()?;
                let mut it = results.into_iter();
                let (mut loss, mut grads) = it.next().expect("non-empty batch");
                for (l, g) in it {
                    loss += l;
                    add_grads(&mut grads, &g);
                }
                (loss, grads)
            } else {
                batch
                    .par_iter()
                    .map(run)
                    .try_reduce_with(|(l1, mut g1), (l2, g2)| {
                        add_grads(&mut g1, &g2);
                        Ok((l1 + l2, g1))
                    })
                    .expect("non-empty batch")?
            };
            if !loss.is_finite() {
                return Err(TdlpError::Diverged {
                    epoch,
                    step,
                    loss,
                });
            }
            let inv = 1.0 / batch.len() as f32;
            for g in grads.values_mut() {
                g.scale_in_place(inv);
            }
            step += 1;
            lr = lr_at(step, &schedule);
            optimize_step(
                &mut params,
                &grads,
                &mut state,
                StepHyper {
                    lr,
                    weight_decay: cfg.weight_decay,
                    clip_norm: cfg.clip_norm,
                },
            )?;
            epoch_loss += loss;
        }
        let current = Model::new(model.clone(), params.clone(), Some(stats.clone()))?;
        let acc = validation.accuracy(&current, gate)?;
        let val_loss = validation.loss(&current, cfg)?;
        let mean_loss = epoch_loss / cfg.clips_per_epoch as f64;
        info!("epoch {epoch}: loss {mean_loss:.4}, val acc {acc:.4}, val loss {val_loss:.4}, lr {lr:.2e}");
        rows.push(MetricsRow {
            epoch,
            step,
            loss: mean_loss,
            val_assoc_acc: acc,
            val_loss,
            lr,
        });
        let better = best
            .as_ref()
            .map_or(true, |((a, l), _)| acc > *a || (acc == *a && val_loss <= *l));
        if better {
            best = Some(((acc, val_loss), params.clone()));
        }
    }
    Ok((best.map(|(_, p)| p).unwrap_or(params), rows))
}

fn add_grads<T: Real>(into: &mut BTreeMap<String, Mat<T>>, other: &BTreeMap<String, Mat<T>>) {
    for (k, g) in other {
        into.get_mut(k).expect("same trainable set").add_assign(g);
    }
}

/// Fits feature statistics on clips drawn from the training sequences.
pub fn fit_stats(model: &ModelConfig, data: &TrainData, cfg: &TrainConfig) -> Result<Standardizer> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfea7);
    let clips: Vec<ClipSample> = (0..cfg.clips_per_epoch.max(20))
        .map(|_| draw_clip(&data.train, cfg.clip_length, &cfg.augment, &mut rng))
        .collect::<Result<_>>()?;
    fit_standardizer(
        clips
            .iter()
            .map(|c| (c.track_histories.as_slice(), c.final_detections.as_slice())),
        &model.modalities,
        model.history_window,
    )
}

/// Output of [`train`].
pub struct TrainOutcome {
    pub model: Model,
    /// Metrics of every phase run, in order, with the run name.
    pub metrics: Vec<(String, Vec<MetricsRow>)>,
}

/// Two-phase training: every modality branch is pretrained on its own, then
/// the multi-modal model starts from the branches and fine-tunes its fusion,
/// joint encoder and head. A single-modality model stops after pretraining.
pub fn train(
    model: &ModelConfig,
    data: &TrainData,
    pretrain: &TrainConfig,
    finetune: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    model.validate()?;
    let stats = fit_stats(model, data, pretrain)?;
    let mut metrics = Vec::new();
    let mut branches = Vec::with_capacity(model.modalities.len());
    for (k, spec) in model.modalities.iter().enumerate() {
        let single = ModelConfig {
            modalities: vec![spec.clone()],
            ..model.clone()
        };
        let init = ParamStore::init(&single, pretrain.seed.wrapping_add(k as u64))?;
        info!("pretraining `{}` branch", spec.name);
        let (params, rows) = train_phase(&single, init, &stats, data, pretrain, opts)?;
        metrics.push((format!("pretrain-{}", spec.name), rows));
        branches.push(params);
    }
    if model.modalities.len() == 1 {
        let params = branches.pop().unwrap();
        return Ok(TrainOutcome {
            model: Model::new(model.clone(), params, Some(stats))?,
            metrics,
        });
    }
    let params = merge_branches(model, &branches)?;
    info!("fine-tuning the fused model");
    let (params, rows) = train_phase(model, params, &stats, data, finetune, opts)?;
    metrics.push(("finetune".into(), rows));
    Ok(TrainOutcome {
        model: Model::new(model.clone(), params, Some(stats))?,
        metrics,
    })
}

/// Builds multi-modal parameters from single-modality branches. The first
/// branch supplies the joint encoder and head; fusion projections of the
/// other modalities start at zero so the initial output equals the first
/// branch's.
pub fn merge_branches(model: &ModelConfig, branches: &[ParamStore<f32>]) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::init(model, 0)?;
    let names: Vec<String> = out.names().map(str::to_string).collect();
    for name in names {
        let src = model
            .modalities
            .iter()
            .position(|m| name.starts_with(&format!("{}.", m.name)) || name == format!("fusion.{}.w", m.name));
        let value = match src {
            Some(k) if k > 0 && name.starts_with("fusion.") => {
                let (r, c) = out.get(&name).unwrap().shape();
                Some(Mat::zeros(r, c))
            }
            Some(k) => branches[k].get(&name).cloned(),
            None => branches[0].get(&name).cloned(),
        }
        .ok_or_else(|| TdlpError::Config(format!("branch lacks `{name}`")))?;
        out.insert(name, value);
    }
    Ok(out)
}

/// Per-tensor comparison of analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `(tensor, max relative error)` for every parameter tensor.
    pub entries: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| !(*e <= self.tolerance))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

/// Floor on the denominator of the relative error, for tensors whose
/// gradient vanishes identically.
const GRAD_FLOOR: f64 = 1e-5;

/// Central finite differences with `h = 1e-4 * max(1, |theta|)` of the link
/// loss for every scalar parameter.
pub fn numeric_gradients(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    inputs: &ModelInputs,
    labels: &Mat<f64>,
    pos_weight: f64,
) -> Result<BTreeMap<String, Mat<f64>>> {
    let loss = |p: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let mut g = Graph::new(&mut tape, cfg, p, |_| false, None);
        let out = g.forward(inputs)?;
        let z = out.logits.ok_or_else(|| TdlpError::Config("gradient check needs the link head".into()))?;
        bce_link_loss(tape.value(z), labels, pos_weight)
    };
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let base = params.get(&name).unwrap().clone();
        let mut g = Mat::zeros(base.rows(), base.cols());
        for k in 0..base.len() {
            let theta = base.data()[k];
            let h = 1e-4 * theta.abs().max(1.0);
            work.get_mut(&name).unwrap().data_mut()[k] = theta + h;
            let up = loss(&work)?;
            work.get_mut(&name).unwrap().data_mut()[k] = theta - h;
            let down = loss(&work)?;
            work.get_mut(&name).unwrap().data_mut()[k] = theta;
            g.data_mut()[k] = (up - down) / (2.0 * h);
        }
        out.insert(name, g);
    }
    Ok(out)
}

pub fn compare_gradients(
    analytic: &BTreeMap<String, Mat<f64>>,
    numeric: &BTreeMap<String, Mat<f64>>,
    tolerance: f64,
) -> GradReport {
    let entries = numeric
        .iter()
        .map(|(name, gn)| {
            let err = match analytic.get(name) {
                Some(ga) if ga.shape() == gn.shape() => {
                    let diff = ga.data().iter().zip(gn.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    diff / ga.max_abs().max(gn.max_abs()).max(GRAD_FLOOR)
                }
                _ => f64::INFINITY,
            };
            (name.clone(), err)
        })
        .collect();
    GradReport { entries, tolerance }
}

/// Verifies analytic gradients of the link loss against finite differences
/// in double precision. Dropout is disabled.
pub fn check_gradients(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    inputs: &ModelInputs,
    labels: &Mat<f64>,
    pos_weight: f64,
    tolerance: f64,
) -> Result<GradReport> {
    let cfg = ModelConfig {
        dropout: 0.0,
        head: Head::Link,
        ..cfg.clone()
    };
    let train = TrainConfig {
        pos_weight,
        ..TrainConfig::pretrain()
    };
    let (_, analytic) = loss_and_grads(&cfg, params, |_| true, inputs, labels, &train, None)?;
    let numeric = numeric_gradients(&cfg, params, inputs, labels, pos_weight)?;
    Ok(compare_gradients(&analytic, &numeric, tolerance))
}
