//! Synthetic motion: the six controlled single-track scenarios with their
//! four negative-detection configurations, and multi-object training worlds.
//!
//! All kinematics run in normalized image coordinates with the update
//! `x <- x + v; v <- v + a`.

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdlpError};
use crate::io::{BBox, DetectionRecord, SequenceData, TrackHistory};

pub const CONF_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Static,
    StaticConfDecay,
    Linear,
    LinearConfDecay,
    NonlinearAccel,
    NonlinearCurve,
}

impl MotionKind {
    pub const ALL: [MotionKind; 6] = [
        MotionKind::Static,
        MotionKind::StaticConfDecay,
        MotionKind::Linear,
        MotionKind::LinearConfDecay,
        MotionKind::NonlinearAccel,
        MotionKind::NonlinearCurve,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MotionKind::Static => "static",
            MotionKind::StaticConfDecay => "static conf decay",
            MotionKind::Linear => "linear",
            MotionKind::LinearConfDecay => "linear conf decay",
            MotionKind::NonlinearAccel => "nonlinear accel",
            MotionKind::NonlinearCurve => "nonlinear curve",
        }
    }
}

/// Per-frame velocity `(dx, dy)`, confidence change `dc` and acceleration
/// `(ax, ay)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionPattern {
    pub kind: MotionKind,
    pub dx: f64,
    pub dy: f64,
    pub dc: f64,
    pub ax: f64,
    pub ay: f64,
}

impl MotionPattern {
    /// Reference parameters of each controlled pattern.
    pub fn reference(kind: MotionKind) -> Self {
        let zero = MotionPattern {
            kind,
            dx: 0.0,
            dy: 0.0,
            dc: 0.0,
            ax: 0.0,
            ay: 0.0,
        };
        match kind {
            MotionKind::Static => zero,
            MotionKind::StaticConfDecay => MotionPattern { dc: -0.02, ..zero },
            MotionKind::Linear => MotionPattern {
                dx: 0.01,
                dy: 0.008,
                ..zero
            },
            MotionKind::LinearConfDecay => MotionPattern {
                dx: 0.003,
                dc: -0.01,
                ..zero
            },
            MotionKind::NonlinearAccel => MotionPattern {
                ax: 1e-4,
                ay: 5e-5,
                ..zero
            },
            MotionKind::NonlinearCurve => MotionPattern {
                dx: 0.002,
                ay: -3e-4,
                ..zero
            },
        }
    }

    fn is_finite(&self) -> bool {
        [self.dx, self.dy, self.dc, self.ax, self.ay].iter().all(|v| v.is_finite())
    }
}

/// Box plus confidence, `(x, y, w, h, c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub c: f64,
}

impl ScenarioBox {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }

    pub fn to_record(self, frame: u32, id: i64) -> DetectionRecord {
        DetectionRecord::new(frame, id, self.bbox(), self.c)
    }

    /// Clamps into the unit square and the confidence range. Returns whether
    /// the geometry had to move.
    fn clamp(&mut self) -> bool {
        let (x0, y0) = (self.x, self.y);
        self.w = self.w.clamp(1e-6, 1.0);
        self.h = self.h.clamp(1e-6, 1.0);
        self.x = self.x.clamp(0.0, 1.0 - self.w);
        self.y = self.y.clamp(0.0, 1.0 - self.h);
        self.c = self.c.clamp(CONF_FLOOR, 1.0);
        self.x != x0 || self.y != y0
    }
}

/// Five-component negative offset `(dx, dy, dw, dh, dc)`.
pub type Offset = [f64; 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub history_length: usize,
    pub base_box: ScenarioBox,
    pub negative_offsets: Vec<Offset>,
    pub offset_scale: f64,
}

impl ScenarioSpec {
    pub fn offsets_for_scale(s: f64) -> Vec<Offset> {
        vec![
            [s, s, s, s, 0.0],
            [s, 0.0, 0.0, 0.0, 0.0],
            [0.0, s, 0.0, 0.0, 0.0],
            [s / 2.0, s / 2.0, 0.0, 0.0, -5.0 * s],
        ]
    }
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        let s = 0.1;
        ScenarioSpec {
            history_length: 50,
            base_box: ScenarioBox {
                x: 0.30,
                y: 0.20,
                w: 0.05,
                h: 0.10,
                c: 0.95,
            },
            negative_offsets: Self::offsets_for_scale(s),
            offset_scale: s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOutput {
    pub history: Vec<ScenarioBox>,
    pub positive: ScenarioBox,
    pub negatives: Vec<ScenarioBox>,
    pub clamp_events: usize,
}

impl ScenarioOutput {
    /// History as a track observed on frames `1..=len`.
    pub fn track(&self) -> TrackHistory {
        TrackHistory {
            id: 1,
            observations: self
                .history
                .iter()
                .enumerate()
                .map(|(k, b)| b.to_record(k as u32 + 1, 1))
                .collect(),
        }
    }

    /// Frame on which the candidates appear.
    pub fn candidate_frame(&self) -> u32 {
        self.history.len() as u32 + 1
    }

    pub fn positive_record(&self) -> DetectionRecord {
        self.positive.to_record(self.candidate_frame(), -1)
    }

    pub fn negative_records(&self) -> Vec<DetectionRecord> {
        self.negatives
            .iter()
            .map(|n| n.to_record(self.candidate_frame(), -1))
            .collect()
    }
}

/// Runs `pattern` from the base box for `history_length` frames and produces
/// the continuation plus offset negatives.
pub fn simulate_scenario(spec: &ScenarioSpec, pattern: &MotionPattern) -> Result<ScenarioOutput> {
    if !pattern.is_finite() {
        return Err(TdlpError::InvalidInput("motion pattern has non-finite parameters".into()));
    }
    if spec.history_length == 0 {
        return Err(TdlpError::InvalidInput("history length must be positive".into()));
    }
    let b = spec.base_box;
    let (mut x, mut y) = (b.x, b.y);
    let (mut vx, mut vy) = (pattern.dx, pattern.dy);
    let mut clamp_events = 0;
    let mut states = Vec::with_capacity(spec.history_length + 1);
    for k in 0..=spec.history_length {
        let mut bx = ScenarioBox {
            x,
            y,
            w: b.w,
            h: b.h,
            c: b.c + pattern.dc * k as f64,
        };
        if bx.clamp() {
            clamp_events += 1;
        }
        states.push(bx);
        x += vx;
        y += vy;
        vx += pattern.ax;
        vy += pattern.ay;
    }
    let positive = states.pop().expect("history_length + 1 states");
    let negatives = spec
        .negative_offsets
        .iter()
        .map(|o| {
            let mut n = ScenarioBox {
                x: positive.x + o[0],
                y: positive.y + o[1],
                w: positive.w + o[2],
                h: positive.h + o[3],
                c: positive.c + o[4],
            };
            if n.clamp() {
                clamp_events += 1;
            }
            n
        })
        .collect();
    if clamp_events > 0 {
        debug!("{:?}: {clamp_events} box(es) clamped to the unit square", pattern.kind);
    }
    Ok(ScenarioOutput {
        history: states,
        positive,
        negatives,
        clamp_events,
    })
}

/// Multi-object synthetic sequence parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_objects: usize,
    pub n_frames: usize,
    /// `(width, height)` in pixels.
    pub image_size: (f64, f64),
    /// Mixture weights over [`MotionKind::ALL`].
    pub motion_weights: [f64; 6],
    /// Probability that a ground-truth box produces no detection.
    pub dropout: f64,
    /// Uniform box jitter as a fraction of box size; also the standard
    /// deviation of confidence noise.
    pub jitter: f64,
    /// Per-frame probability of steering two objects toward each other.
    pub crossing_rate: f64,
    /// Multiplier on the reference pattern speeds.
    pub speed: f64,
    /// Lower bound for decaying confidences.
    pub conf_floor: f64,
    /// Relative spread of per-object box sizes around a common mean. Near
    /// zero, min–max scaling blows box jitter up to the full unit range.
    #[serde(default = "default_size_spread")]
    pub size_spread: f64,
    /// Width of a synthetic `appearance` modality; zero disables it. Every
    /// object gets a random unit prototype and each box a noisy copy.
    #[serde(default)]
    pub appearance_dim: usize,
    /// Standard deviation of the per-box appearance noise.
    #[serde(default = "default_appearance_noise")]
    pub appearance_noise: f64,
    pub seed: u64,
}

fn default_size_spread() -> f64 {
    0.3
}

fn default_appearance_noise() -> f64 {
    0.3
}

/// Mixed into the seed of the appearance stream so that enabling the
/// modality leaves the motion and detection noise untouched.
const APPEARANCE_STREAM: u64 = 0x00A9_9EA7;

const MEAN_BOX: (f64, f64) = (0.045, 0.115);

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_objects: 8,
            n_frames: 300,
            image_size: (1920.0, 1080.0),
            motion_weights: [1.0; 6],
            dropout: 0.1,
            jitter: 0.03,
            crossing_rate: 0.02,
            speed: 1.0,
            conf_floor: 0.5,
            size_spread: default_size_spread(),
            appearance_dim: 0,
            appearance_noise: default_appearance_noise(),
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(TdlpError::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        rate(self.dropout, "dropout")?;
        rate(self.jitter, "jitter")?;
        rate(self.crossing_rate, "crossing_rate")?;
        if !(0.0..0.5).contains(&self.size_spread) {
            return Err(TdlpError::Config("size_spread must lie in [0, 0.5)".into()));
        }
        if !(CONF_FLOOR..=1.0).contains(&self.conf_floor) {
            return Err(TdlpError::Config(format!("conf_floor must lie in [{CONF_FLOOR}, 1]")));
        }
        if !(self.appearance_noise >= 0.0 && self.appearance_noise.is_finite()) {
            return Err(TdlpError::Config("appearance_noise must be non-negative".into()));
        }
        if self.n_objects == 0 || self.n_frames == 0 {
            return Err(TdlpError::Config("world needs at least one object and one frame".into()));
        }
        if self.image_size.0 <= 0.0 || self.image_size.1 <= 0.0 {
            return Err(TdlpError::Config("image size must be positive".into()));
        }
        if self.motion_weights.iter().any(|w| *w < 0.0) || self.motion_weights.iter().sum::<f64>() <= 0.0 {
            return Err(TdlpError::Config("motion weights must be non-negative with positive sum".into()));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(TdlpError::Config("speed must be positive".into()));
        }
        Ok(())
    }
}

const MAX_SPEED: f64 = 0.02;
const MARGIN: f64 = 0.02;

struct Agent {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    ax: f64,
    ay: f64,
    base_conf: f64,
    conf: f64,
    dc: f64,
    frames_left: usize,
}

fn sample_kind(weights: &[f64; 6], rng: &mut ChaCha8Rng) -> MotionKind {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (k, &w) in MotionKind::ALL.iter().zip(weights) {
        if u < w {
            return *k;
        }
        u -= w;
    }
    MotionKind::Static
}

fn signed(rng: &mut ChaCha8Rng, v: f64) -> f64 {
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

impl Agent {
    fn start_segment(&mut self, spec: &WorldSpec, rng: &mut ChaCha8Rng) {
        let kind = sample_kind(&spec.motion_weights, rng);
        let p = MotionPattern::reference(kind);
        let scale = spec.speed * rng.gen_range(0.5..1.5);
        match kind {
            MotionKind::Static | MotionKind::StaticConfDecay => {
                self.vx = 0.0;
                self.vy = 0.0;
            }
            MotionKind::Linear | MotionKind::LinearConfDecay => {
                self.vx = signed(rng, p.dx * scale);
                self.vy = signed(rng, p.dy * scale);
            }
            MotionKind::NonlinearCurve => {
                self.vx = signed(rng, p.dx * scale);
            }
            MotionKind::NonlinearAccel => {}
        }
        self.ax = signed(rng, p.ax * scale);
        self.ay = signed(rng, p.ay * scale);
        self.dc = p.dc;
        self.conf = self.base_conf;
        self.frames_left = rng.gen_range(30..90);
    }

    fn step(&mut self, floor: f64) {
        self.x += self.vx;
        self.y += self.vy;
        self.vx = (self.vx + self.ax).clamp(-MAX_SPEED, MAX_SPEED);
        self.vy = (self.vy + self.ay).clamp(-MAX_SPEED, MAX_SPEED);
        let (xmax, ymax) = (1.0 - MARGIN - self.w, 1.0 - MARGIN - self.h);
        if self.x < MARGIN {
            self.x = 2.0 * MARGIN - self.x;
            self.vx = self.vx.abs();
            self.ax = self.ax.abs();
        } else if self.x > xmax {
            self.x = 2.0 * xmax - self.x;
            self.vx = -self.vx.abs();
            self.ax = -self.ax.abs();
        }
        if self.y < MARGIN {
            self.y = 2.0 * MARGIN - self.y;
            self.vy = self.vy.abs();
            self.ay = self.ay.abs();
        } else if self.y > ymax {
            self.y = 2.0 * ymax - self.y;
            self.vy = -self.vy.abs();
            self.ay = -self.ay.abs();
        }
        self.conf = (self.conf + self.dc).clamp(floor, 1.0);
        self.frames_left = self.frames_left.saturating_sub(1);
    }
}

/// Generates a ground-truth sequence and the matching noisy detections.
pub fn generate_world(spec: &WorldSpec) -> Result<(SequenceData, SequenceData)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (iw, ih) = spec.image_size;
    let mut agents: Vec<Agent> = (0..spec.n_objects)
        .map(|_| {
            let s = spec.size_spread;
            let w = MEAN_BOX.0 * rng.gen_range(1.0 - s..=1.0 + s);
            let h = MEAN_BOX.1 * rng.gen_range(1.0 - s..=1.0 + s);
            let base_conf = rng.gen_range(0.7..1.0);
            let mut a = Agent {
                x: rng.gen_range(MARGIN..1.0 - MARGIN - w),
                y: rng.gen_range(MARGIN..1.0 - MARGIN - h),
                w,
                h,
                vx: 0.0,
                vy: 0.0,
                ax: 0.0,
                ay: 0.0,
                base_conf,
                conf: base_conf,
                dc: 0.0,
                frames_left: 0,
            };
            a.start_segment(spec, &mut rng);
            a
        })
        .collect();

    let mut app_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ APPEARANCE_STREAM);
    let prototypes: Vec<Vec<f64>> = (0..spec.n_objects)
        .map(|_| {
            let v: Vec<f64> = (0..spec.appearance_dim).map(|_| app_rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut appearance = |i: usize| -> Vec<f64> {
        prototypes[i]
            .iter()
            .map(|p| p + spec.appearance_noise * app_rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let name = format!("synth-{}", spec.seed);
    let mut gt = SequenceData::new(name.clone());
    let mut dets = SequenceData::new(name);
    gt.image_size = Some(spec.image_size);
    dets.image_size = Some(spec.image_size);
    let conf_noise = Normal::new(0.0, spec.jitter.max(1e-12)).expect("valid std");

    for f in 0..spec.n_frames {
        let frame = f as u32 + 1;
        if f > 0 {
            if agents.len() >= 2 && spec.crossing_rate > 0.0 && rng.gen_bool(spec.crossing_rate) {
                let mut idx: Vec<usize> = (0..agents.len()).collect();
                idx.shuffle(&mut rng);
                let (a, b) = (idx[0], idx[1]);
                let (ax, ay) = (agents[a].x, agents[a].y);
                let (bx, by) = (agents[b].x, agents[b].y);
                let speed = 0.01 * spec.speed;
                for (i, (tx, ty), (sx, sy)) in [(a, (bx, by), (ax, ay)), (b, (ax, ay), (bx, by))] {
                    let (dx, dy) = (tx - sx, ty - sy);
                    let n = (dx * dx + dy * dy).sqrt().max(1e-9);
                    let ag = &mut agents[i];
                    ag.vx = (speed * dx / n).clamp(-MAX_SPEED, MAX_SPEED);
                    ag.vy = (speed * dy / n).clamp(-MAX_SPEED, MAX_SPEED);
                    ag.ax = 0.0;
                    ag.ay = 0.0;
                    ag.frames_left = ((n / speed) as usize + 10).min(150);
                }
            }
            for ag in agents.iter_mut() {
                ag.step(spec.conf_floor);
                if ag.frames_left == 0 {
                    ag.start_segment(spec, &mut rng);
                }
            }
        }
        for (i, ag) in agents.iter().enumerate() {
            let gt_box = BBox::new(ag.x * iw, ag.y * ih, ag.w * iw, ag.h * ih);
            let mut rec = DetectionRecord::new(frame, i as i64 + 1, gt_box, ag.conf);
            if spec.appearance_dim > 0 {
                rec.features.insert("appearance".into(), appearance(i));
            }
            // noise draws happen unconditionally to keep streams aligned
            let dropped = rng.gen_bool(spec.dropout);
            let j: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0) * spec.jitter);
            let cn = conf_noise.sample(&mut rng);
            if !dropped {
                let mut det = rec.clone();
                det.id = -1;
                if spec.jitter > 0.0 {
                    det.bbox.x += j[0] * gt_box.w;
                    det.bbox.y += j[1] * gt_box.h;
                    det.bbox.w *= 1.0 + j[2];
                    det.bbox.h *= 1.0 + j[3];
                    det.conf = (det.conf + cn).clamp(CONF_FLOOR, 1.0);
                }
                dets.push(det);
            }
            gt.push(rec);
        }
        dets.frames.entry(frame).or_default();
    }
    Ok((gt, dets))
}
