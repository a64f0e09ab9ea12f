//! The link-prediction network and its contrastive variant.
//!
//! Pipeline per modality: static/motion token embedding, a temporal
//! transformer over each track history, and a per-modality interaction
//! encoder over tracks and detections together. Modalities are then fused by
//! bias-free projections and refined by a joint interaction encoder; a pair
//! head turns every (track, detection) couple into a link probability.

mod checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segment, Tape, Var};
use crate::error::{Result, TdlpError};
use crate::features::{assemble_inputs, ModalitySpec, ModelInputs, Standardizer};
use crate::io::{DetectionRecord, TrackHistory};
use crate::tensor::{Mat, Real};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Logits are clipped to this magnitude before the sigmoid so that scores stay
/// strictly inside `(0, 1)` in double precision.
const LOGIT_CLIP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Pairwise link head with a sigmoid output.
    Link,
    /// Projection head scored by cosine similarity.
    Contrastive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Encoder output at the most recent observation.
    Last,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub fused_dim: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub interaction_layers: usize,
    pub interaction_heads: usize,
    /// Feed-forward width as a multiple of the layer width.
    pub ffn_mult: usize,
    pub dropout: f64,
    pub modalities: Vec<ModalitySpec>,
    pub head_hidden: usize,
    /// Maximum number of past observations fed to the temporal encoder.
    pub history_window: usize,
    pub role_embeddings: bool,
    pub readout: Readout,
    pub head: Head,
}

impl ModelConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk(modalities: Vec<ModalitySpec>) -> Self {
        ModelConfig {
            embed_dim: 64,
            fused_dim: 128,
            temporal_layers: 2,
            temporal_heads: 4,
            interaction_layers: 2,
            interaction_heads: 4,
            ffn_mult: 2,
            dropout: 0.1,
            modalities,
            head_hidden: 128,
            history_window: 10,
            role_embeddings: true,
            readout: Readout::Last,
            head: Head::Link,
        }
    }

    /// Full-size configuration.
    pub fn paper(modalities: Vec<ModalitySpec>) -> Self {
        ModelConfig {
            embed_dim: 512,
            fused_dim: 1024,
            temporal_layers: 4,
            temporal_heads: 8,
            interaction_layers: 4,
            interaction_heads: 8,
            ffn_mult: 4,
            head_hidden: 1024,
            ..ModelConfig::desk(modalities)
        }
    }

    /// Minimal configuration for gradient checks.
    pub fn tiny(modalities: Vec<ModalitySpec>) -> Self {
        ModelConfig {
            embed_dim: 8,
            fused_dim: 8,
            temporal_layers: 1,
            temporal_heads: 2,
            interaction_layers: 1,
            interaction_heads: 2,
            ffn_mult: 2,
            dropout: 0.0,
            head_hidden: 8,
            history_window: 8,
            ..ModelConfig::desk(modalities)
        }
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TdlpError::Config(m));
        if self.embed_dim == 0 || self.fused_dim == 0 || self.head_hidden == 0 || self.ffn_mult == 0 {
            return bad("widths must be positive".into());
        }
        if self.temporal_heads == 0 || self.embed_dim % self.temporal_heads != 0 {
            return bad(format!(
                "temporal heads {} must divide embed_dim {}",
                self.temporal_heads, self.embed_dim
            ));
        }
        if self.interaction_heads == 0
            || self.embed_dim % self.interaction_heads != 0
            || self.fused_dim % self.interaction_heads != 0
        {
            return bad(format!(
                "interaction heads {} must divide embed_dim {} and fused_dim {}",
                self.interaction_heads, self.embed_dim, self.fused_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.history_window == 0 {
            return bad("history_window must be positive".into());
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if ["fusion", "joint", "head", "proj"].contains(&m.name.as_str()) || m.name.contains('.') {
                return bad(format!("modality name `{}` is reserved", m.name));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return bad(format!("duplicate modality `{}`", m.name));
            }
            if m.static_dim() == 0 {
                return bad(format!("modality `{}` has no features", m.name));
            }
        }
        Ok(())
    }

    pub fn modality(&self, name: &str) -> Option<&ModalitySpec> {
        self.modalities.iter().find(|m| m.name == name)
    }
}

fn linear_shapes(out: &mut Vec<(String, usize, usize)>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    out.push((format!("{prefix}.w"), fan_in, fan_out));
    if bias {
        out.push((format!("{prefix}.b"), 1, fan_out));
    }
}

fn ln_shapes(out: &mut Vec<(String, usize, usize)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.g"), 1, d));
    out.push((format!("{prefix}.b"), 1, d));
}

fn mlp_shapes(out: &mut Vec<(String, usize, usize)>, prefix: &str, fan_in: usize, d: usize) {
    linear_shapes(out, &format!("{prefix}.fc1"), fan_in, d, true);
    linear_shapes(out, &format!("{prefix}.fc2"), d, d, true);
    ln_shapes(out, &format!("{prefix}.ln"), d);
}

fn encoder_shapes(out: &mut Vec<(String, usize, usize)>, prefix: &str, layers: usize, d: usize, ffn: usize) {
    for l in 0..layers {
        let p = format!("{prefix}.layer{l}");
        ln_shapes(out, &format!("{p}.ln1"), d);
        for w in ["q", "k", "v", "o"] {
            linear_shapes(out, &format!("{p}.attn.w{w}"), d, d, true);
        }
        ln_shapes(out, &format!("{p}.ln2"), d);
        linear_shapes(out, &format!("{p}.ffn.fc1"), d, d * ffn, true);
        linear_shapes(out, &format!("{p}.ffn.fc2"), d * ffn, d, true);
    }
    ln_shapes(out, &format!("{prefix}.ln_out"), d);
}

/// Every parameter tensor of the architecture with its shape.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let (d, df) = (cfg.embed_dim, cfg.fused_dim);
    let mut out = Vec::new();
    for m in &cfg.modalities {
        let n = &m.name;
        mlp_shapes(&mut out, &format!("{n}.stat"), m.static_dim(), d);
        if m.is_geometric() {
            mlp_shapes(&mut out, &format!("{n}.mot"), m.motion_dim(), d);
        }
        encoder_shapes(&mut out, &format!("{n}.temporal"), cfg.temporal_layers, d, cfg.ffn_mult);
        if cfg.role_embeddings {
            out.push((format!("{n}.inter.role"), 2, d));
        }
        encoder_shapes(&mut out, &format!("{n}.inter"), cfg.interaction_layers, d, cfg.ffn_mult);
        out.push((format!("fusion.{n}.w"), d, df));
    }
    if cfg.role_embeddings {
        out.push(("joint.role".into(), 2, df));
    }
    encoder_shapes(&mut out, "joint", cfg.interaction_layers, df, cfg.ffn_mult);
    match cfg.head {
        Head::Link => {
            linear_shapes(&mut out, "head.fc1", 3 * df, cfg.head_hidden, true);
            ln_shapes(&mut out, "head.ln", cfg.head_hidden);
            linear_shapes(&mut out, "head.fc2", cfg.head_hidden, 1, true);
        }
        Head::Contrastive => linear_shapes(&mut out, "proj.fc", df, df, true),
    }
    out
}

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Mat<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// Random initialization: scaled normal weights, linear biases uniform in
    /// `±1/sqrt(fan_in)`, unit LayerNorm gains, zero LayerNorm shifts, small
    /// role embeddings.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = param_shapes(cfg);
        let fan_in: BTreeMap<&str, usize> = shapes.iter().map(|(n, r, _)| (n.as_str(), *r)).collect();
        let mut tensors = BTreeMap::new();
        for (name, r, c) in &shapes {
            let (r, c) = (*r, *c);
            let weight = name.strip_suffix(".b").map(|p| format!("{p}.w"));
            let m = if name.ends_with(".g") {
                Mat::filled(r, c, T::one())
            } else if let Some(&fi) = weight.as_deref().and_then(|w| fan_in.get(w)) {
                let bound = 1.0 / (fi as f64).sqrt();
                Mat::from_fn(r, c, |_, _| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            } else if name.ends_with(".b") {
                Mat::zeros(r, c)
            } else if name.ends_with(".role") {
                let dist = Normal::new(0.0, 0.02).unwrap();
                Mat::from_fn(r, c, |_, _| T::from_f64_lossy(dist.sample(&mut rng)))
            } else {
                let dist = Normal::new(0.0, (1.0 / r as f64).sqrt()).unwrap();
                Mat::from_fn(r, c, |_, _| T::from_f64_lossy(dist.sample(&mut rng)))
            };
            tensors.insert(name.clone(), m);
        }
        Ok(ParamStore { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Mat::all_finite)
    }

    /// Checks that names and shapes are exactly those of `cfg`.
    pub fn check_architecture(&self, cfg: &ModelConfig) -> Result<()> {
        let want = param_shapes(cfg);
        if want.len() != self.tensors.len() {
            return Err(TdlpError::Config(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for (name, r, c) in want {
            let m = self
                .tensors
                .get(&name)
                .ok_or_else(|| TdlpError::Config(format!("missing parameter `{name}`")))?;
            if m.shape() != (r, c) {
                return Err(TdlpError::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    m.shape(),
                    (r, c)
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal code of one position.
pub fn positional_code(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Positions counted backward from the most recent observation (which gets 0).
pub fn reversed_positions(len: usize) -> Vec<usize> {
    (0..len).rev().collect()
}

/// A forward pass under construction: a tape plus the parameter handles.
pub struct Graph<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    cfg: &'a ModelConfig,
    vars: BTreeMap<String, Var>,
    dropout: Option<ChaCha8Rng>,
}

/// Handles produced by [`Graph::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `N x M` pre-sigmoid link logits (link head only).
    pub logits: Option<Var>,
    /// `N x M` cosine similarities (contrastive head only).
    pub cosine: Option<Var>,
    /// Final track embeddings (unit-normalized for the contrastive head).
    pub tracks: Var,
    pub detections: Var,
}

impl<'a, T: Real> Graph<'a, T> {
    /// Records every parameter on `tape`; those rejected by `trainable` become
    /// constants. `dropout_seed` enables dropout.
    pub fn new(
        tape: &'a mut Tape<T>,
        cfg: &'a ModelConfig,
        params: &ParamStore<T>,
        trainable: impl Fn(&str) -> bool,
        dropout_seed: Option<u64>,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(name, m)| {
                let v = if trainable(name) {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Graph {
            tape,
            cfg,
            vars,
            dropout: dropout_seed.filter(|_| cfg.dropout > 0.0).map(ChaCha8Rng::seed_from_u64),
        }
    }

    /// Parameter handles by name.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TdlpError::Config(format!("missing parameter `{name}`")))
    }

    fn constant_f64(&mut self, m: &Mat<f64>) -> Var {
        self.tape.constant(m.cast())
    }

    fn check_width(&self, x: Var, want: usize, context: &str) -> Result<()> {
        let got = self.tape.value(x).cols();
        if got != want {
            return Err(TdlpError::DimensionMismatch {
                expected: want,
                found: got,
                context: context.into(),
            });
        }
        Ok(())
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        self.check_width(x, self.tape.value(w).rows(), prefix)?;
        let y = self.tape.matmul(x, w);
        match self.vars.get(&format!("{prefix}.b")) {
            Some(&b) => Ok(self.tape.add_row(y, b)),
            None => Ok(y),
        }
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.tape.layer_norm(x, g, b))
    }

    fn drop(&mut self, x: Var) -> Var {
        let p = self.cfg.dropout;
        let Some(rng) = self.dropout.as_mut() else {
            return x;
        };
        let (r, c) = self.tape.value(x).shape();
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask = Mat::from_fn(r, c, |_, _| if rng.gen::<f64>() < p { T::zero() } else { keep });
        self.tape.mul_const(x, mask)
    }

    /// Linear, SiLU, dropout, linear, LayerNorm. Normalizing right after the
    /// first projection would discard the scale of low-dimensional inputs.
    fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.tape.silu(h);
        let h = self.drop(h);
        let h = self.linear(h, &format!("{prefix}.fc2"))?;
        self.norm(h, &format!("{prefix}.ln"))
    }

    /// Pre-norm transformer encoder with a final LayerNorm.
    fn encoder(
        &mut self,
        x: Var,
        prefix: &str,
        layers: usize,
        heads: usize,
        segments: &[Segment],
        key_visible: Option<&[bool]>,
    ) -> Result<Var> {
        let mut x = x;
        for l in 0..layers {
            let p = format!("{prefix}.layer{l}");
            let h = self.norm(x, &format!("{p}.ln1"))?;
            let q = self.linear(h, &format!("{p}.attn.wq"))?;
            let k = self.linear(h, &format!("{p}.attn.wk"))?;
            let v = self.linear(h, &format!("{p}.attn.wv"))?;
            let a = self.tape.attention(q, k, v, heads, segments, key_visible);
            let a = self.linear(a, &format!("{p}.attn.wo"))?;
            let a = self.drop(a);
            x = self.tape.add(x, a);
            let h = self.norm(x, &format!("{p}.ln2"))?;
            let h = self.linear(h, &format!("{p}.ffn.fc1"))?;
            let h = self.tape.silu(h);
            let h = self.linear(h, &format!("{p}.ffn.fc2"))?;
            let h = self.drop(h);
            x = self.tape.add(x, h);
        }
        self.norm(x, &format!("{prefix}.ln_out"))
    }

    /// Token embedding: `f_stat(x)`, plus `f_mot(dx)` when motion is given.
    pub fn input_embed(&mut self, modality: &str, statics: Var, motion: Option<Var>) -> Result<Var> {
        let s = self.mlp(statics, &format!("{modality}.stat"))?;
        match motion {
            Some(m) => {
                let mo = self.mlp(m, &format!("{modality}.mot"))?;
                if self.tape.value(mo).shape() != self.tape.value(s).shape() {
                    return Err(TdlpError::InvalidInput(format!(
                        "`{modality}` static and motion row counts differ"
                    )));
                }
                Ok(self.tape.add(s, mo))
            }
            None => Ok(s),
        }
    }

    /// Encodes packed track histories (`lengths` rows each, oldest first) and
    /// reads one embedding per track.
    pub fn temporal_encode(
        &mut self,
        modality: &str,
        tokens: Var,
        lengths: &[usize],
        key_visible: Option<&[bool]>,
    ) -> Result<Var> {
        if lengths.iter().any(|&l| l == 0) {
            return Err(TdlpError::InvalidInput("empty track history".into()));
        }
        let total: usize = lengths.iter().sum();
        let d = self.cfg.embed_dim;
        if self.tape.value(tokens).rows() != total {
            return Err(TdlpError::DimensionMismatch {
                expected: total,
                found: self.tape.value(tokens).rows(),
                context: format!("`{modality}` history tokens"),
            });
        }
        let mut pe = Mat::zeros(total, d);
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            for (k, pos) in reversed_positions(len).into_iter().enumerate() {
                pe.row_mut(start + k).copy_from_slice(&positional_code(pos, d));
            }
            segments.push(Segment { start, len });
            start += len;
        }
        let pe = self.constant_f64(&pe);
        let x = self.tape.add(tokens, pe);
        let (layers, heads) = (self.cfg.temporal_layers, self.cfg.temporal_heads);
        let out = self.encoder(x, &format!("{modality}.temporal"), layers, heads, &segments, key_visible)?;
        Ok(match self.cfg.readout {
            Readout::Last => {
                let idx: Vec<usize> = segments.iter().map(|s| s.start + s.len - 1).collect();
                self.tape.gather_rows(out, &idx)
            }
            Readout::Mean => {
                let mut avg = Mat::zeros(lengths.len(), total);
                for (i, s) in segments.iter().enumerate() {
                    for k in 0..s.len {
                        avg.set(i, s.start + k, 1.0 / s.len as f64);
                    }
                }
                let avg = self.constant_f64(&avg);
                self.tape.matmul(avg, out)
            }
        })
    }

    /// Set encoder over `[tracks; detections]`; `prefix` is `"{modality}.inter"`
    /// or `"joint"`.
    pub fn interaction_encode(&mut self, prefix: &str, tracks: Var, detections: Var) -> Result<Var> {
        let n = self.tape.value(tracks).rows();
        let m = self.tape.value(detections).rows();
        let x = match (n, m) {
            (_, 0) => tracks,
            (0, _) => detections,
            _ => self.tape.concat_rows(&[tracks, detections]),
        };
        let x = if self.cfg.role_embeddings {
            let role = self.p(&format!("{prefix}.role"))?;
            let idx: Vec<usize> = (0..n + m).map(|i| usize::from(i >= n)).collect();
            let r = self.tape.gather_rows(role, &idx);
            self.tape.add(x, r)
        } else {
            x
        };
        let seg = [Segment { start: 0, len: n + m }];
        let (layers, heads) = (self.cfg.interaction_layers, self.cfg.interaction_heads);
        self.encoder(x, prefix, layers, heads, &seg, None)
    }

    /// `sum_m z^(m) W^(m)` over the configured modalities, in order.
    pub fn fuse_modalities(&mut self, tokens: &[(String, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for spec in &self.cfg.modalities {
            let z = tokens
                .iter()
                .find(|(n, _)| *n == spec.name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TdlpError::InvalidInput(format!("modality `{}` missing", spec.name)))?;
            let p = self.linear(z, &format!("fusion.{}", spec.name))?;
            acc = Some(match acc {
                Some(a) => self.tape.add(a, p),
                None => p,
            });
        }
        acc.ok_or_else(|| TdlpError::Config("no modalities".into()))
    }

    /// Pre-sigmoid link logits `N x M` from refined embeddings.
    pub fn link_logits(&mut self, tracks: Var, detections: Var) -> Result<Var> {
        let n = self.tape.value(tracks).rows();
        let m = self.tape.value(detections).rows();
        let ti: Vec<usize> = (0..n * m).map(|k| k / m).collect();
        let di: Vec<usize> = (0..n * m).map(|k| k % m).collect();
        let a = self.tape.gather_rows(tracks, &ti);
        let b = self.tape.gather_rows(detections, &di);
        let diff = self.tape.sub(a, b);
        let diff = self.tape.abs(diff);
        let v = self.tape.concat_cols(&[a, b, diff]);
        let h = self.linear(v, "head.fc1")?;
        let h = self.norm(h, "head.ln")?;
        let h = self.tape.silu(h);
        let h = self.drop(h);
        let z = self.linear(h, "head.fc2")?;
        Ok(self.tape.reshape(z, n, m))
    }

    /// Full forward pass on assembled inputs.
    pub fn forward(&mut self, inputs: &ModelInputs) -> Result<ForwardVars> {
        let cfg = self.cfg;
        if inputs.modalities.len() != cfg.modalities.len() {
            return Err(TdlpError::DimensionMismatch {
                expected: cfg.modalities.len(),
                found: inputs.modalities.len(),
                context: "modality count".into(),
            });
        }
        let (n, m) = (inputs.num_tracks(), inputs.num_detections);
        if n == 0 || m == 0 {
            return Err(TdlpError::InvalidInput(
                "forward needs at least one track and one detection".into(),
            ));
        }
        let mut fused_inputs = Vec::with_capacity(cfg.modalities.len());
        for (spec, mi) in cfg.modalities.iter().zip(&inputs.modalities) {
            let name = spec.name.as_str();
            let ts = self.constant_f64(&mi.track_static);
            let tm = mi.track_motion.as_ref().map(|x| self.constant_f64(x));
            if spec.is_geometric() != tm.is_some() {
                return Err(TdlpError::InvalidInput(format!("`{name}` motion features mismatch")));
            }
            let ds = self.constant_f64(&mi.detections);
            let trk_tokens = self.input_embed(name, ts, tm)?;
            let det_tokens = self.input_embed(name, ds, None)?;
            let z_trk = self.temporal_encode(name, trk_tokens, &inputs.track_lengths, None)?;
            let refined = self.interaction_encode(&format!("{name}.inter"), z_trk, det_tokens)?;
            fused_inputs.push((spec.name.clone(), refined));
        }
        let u = self.fuse_modalities(&fused_inputs)?;
        let ut = self.tape.slice_rows(u, 0, n);
        let ud = self.tape.slice_rows(u, n, m);
        let joint = self.interaction_encode("joint", ut, ud)?;
        let tracks = self.tape.slice_rows(joint, 0, n);
        let detections = self.tape.slice_rows(joint, n, m);
        match cfg.head {
            Head::Link => {
                let logits = self.link_logits(tracks, detections)?;
                Ok(ForwardVars {
                    logits: Some(logits),
                    cosine: None,
                    tracks,
                    detections,
                })
            }
            Head::Contrastive => {
                let pt = self.linear(tracks, "proj.fc")?;
                let pd = self.linear(detections, "proj.fc")?;
                let tracks = self.tape.row_normalize(pt);
                let detections = self.tape.row_normalize(pd);
                let cosine = self.tape.matmul_nt(tracks, detections);
                Ok(ForwardVars {
                    logits: None,
                    cosine: Some(cosine),
                    tracks,
                    detections,
                })
            }
        }
    }
}

/// Association scores between tracks (rows) and detections (columns). Link
/// heads give probabilities in `(0, 1)`; contrastive heads give cosines.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkMatrix {
    pub scores: Mat<f64>,
}

impl LinkMatrix {
    pub fn empty(n: usize, m: usize) -> Self {
        LinkMatrix { scores: Mat::zeros(n, m) }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.scores.shape()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLIP, LOGIT_CLIP);
    1.0 / (1.0 + (-z).exp())
}

/// A trained network ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub stats: Option<Standardizer>,
    /// Gate calibrated for contrastive scores, if any.
    pub link_threshold: Option<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParamStore<f32>, stats: Option<Standardizer>) -> Result<Self> {
        config.validate()?;
        params.check_architecture(&config)?;
        Ok(Model {
            config,
            params,
            stats,
            link_threshold: None,
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Model::new(config, params, None)
    }

    pub fn assemble(&self, tracks: &[TrackHistory], detections: &[DetectionRecord]) -> Result<ModelInputs> {
        assemble_inputs(
            tracks,
            detections,
            &self.config.modalities,
            self.stats.as_ref(),
            self.config.history_window,
        )
    }

    /// Scores assembled inputs in inference mode (no dropout).
    pub fn score_inputs(&self, inputs: &ModelInputs) -> Result<LinkMatrix> {
        let (n, m) = (inputs.num_tracks(), inputs.num_detections);
        if n == 0 || m == 0 {
            return Ok(LinkMatrix::empty(n, m));
        }
        let mut tape = Tape::<f32>::new();
        let mut g = Graph::new(&mut tape, &self.config, &self.params, |_| false, None);
        let out = g.forward(inputs)?;
        let scores = match (out.logits, out.cosine) {
            (Some(z), _) => tape.value(z).cast::<f64>().map(sigmoid),
            (_, Some(c)) => tape.value(c).cast::<f64>().map(|v| v.clamp(-1.0, 1.0)),
            _ => unreachable!("forward yields logits or cosines"),
        };
        if !scores.all_finite() {
            return Err(TdlpError::InvalidInput("non-finite link scores".into()));
        }
        Ok(LinkMatrix { scores })
    }

    pub fn score(&self, tracks: &[TrackHistory], detections: &[DetectionRecord]) -> Result<LinkMatrix> {
        if tracks.is_empty() || detections.is_empty() {
            return Ok(LinkMatrix::empty(tracks.len(), detections.len()));
        }
        let inputs = self.assemble(tracks, detections)?;
        self.score_inputs(&inputs)
    }
}
