use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use tdlp::eval::{evaluate, parse_metrics};
use tdlp::experiments::{
    ablation_csv, calibrate_gate, feature_ablation, modality_subsets, operating_gate, passfail_suite,
    synthetic_split, AblationDataset, Method, WorldSplit,
};
use tdlp::features::ModalitySpec;
use tdlp::io::{
    attach_modality, load_modality_features, parse_mot_file, write_modality_features, write_mot_results,
    write_mot_sequence, MotKind, SequenceData,
};
use tdlp::model::{load_checkpoint, save_checkpoint, ModelConfig};
use tdlp::synth::{generate_world, ScenarioSpec, WorldSpec};
use tdlp::tracker::{run_sequence, TrackerConfig};
use tdlp::training::{metrics_csv, train, TrainConfig, TrainData, TrainOptions};
use tdlp::{Result, TdlpError};

#[derive(Parser)]
#[command(name = "tdlp", version, about = "Track-detection link prediction for multi-object tracking")]
struct Cli {
    /// Base seed for data generation, initialization and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Fixed-order gradient reduction for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// TOML file with optional [model], [pretrain], [finetune], [tracker]
    /// and [world] tables; keys left out keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Track one detection file with a trained model.
    Track(TrackArgs),
    /// Score tracking output against ground truth.
    Eval(EvalArgs),
    /// Generate synthetic worlds in MOT format.
    GenData(GenArgs),
    /// Run the controlled pass/fail suite on a checkpoint.
    Synth(SynthArgs),
    /// Train one model per feature subset and compare tracking metrics.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Directory of ground-truth MOT files; synthetic worlds when absent.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Directory of validation ground truth.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Extra modality as `name=dir`, with one `<sequence>.csv` per sequence.
    #[arg(long = "modality", value_parser = parse_pair)]
    modalities: Vec<(String, PathBuf)>,
    #[arg(long, default_value = "tdlp")]
    method: Method,
    /// Per-epoch metrics log.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    train_worlds: usize,
    #[arg(long, default_value_t = 1)]
    val_worlds: usize,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Detections in MOT format.
    #[arg(long)]
    dets: PathBuf,
    /// Extra modality as `name=file`.
    #[arg(long = "modality", value_parser = parse_pair)]
    modalities: Vec<(String, PathBuf)>,
    /// Tracker preset the [tracker] table is applied on top of.
    #[arg(long, default_value = "mot17")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth directory: `<seq>.txt` files or `<seq>/gt/gt.txt`.
    #[arg(long)]
    gt: PathBuf,
    /// Prediction directory with one `<seq>.txt` per sequence.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value = "hota,idf1,mota")]
    metrics: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    /// Writes `gt/`, `det/`, optional `appearance/` and `manifest.toml`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    sequences: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "appendix-b")]
    suite: String,
    #[arg(long, default_value = "tdlp")]
    method: Method,
    #[arg(long)]
    ckpt: PathBuf,
    /// Rejection gate; defaults to the checkpoint's calibrated gate, else 0.5.
    #[arg(long)]
    gate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Modalities to ablate, comma separated (`bbox`, `appearance`).
    #[arg(long, value_delimiter = ',', default_value = "bbox,appearance")]
    features: Vec<String>,
    #[arg(long, default_value_t = 8)]
    train_worlds: usize,
    #[arg(long, default_value_t = 2)]
    test_worlds: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pair(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected name=path, got `{s}`"))?;
    if name.is_empty() || name == "bbox" {
        return Err(format!("invalid modality name `{name}`"));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: Option<toml::Table>,
    pretrain: Option<toml::Table>,
    finetune: Option<toml::Table>,
    tracker: Option<toml::Table>,
    world: Option<toml::Table>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text).map_err(|e| TdlpError::Config(format!("{}: {e}", path.display())))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> TdlpError {
    TdlpError::InvalidInput(format!("{}: {e}", path.display()))
}

fn merge(base: &mut toml::Table, patch: &toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Applies a partial table on top of `base`.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&toml::Table>, what: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| TdlpError::Config(format!("[{what}]: {e}")))?;
    if let Some(patch) = patch {
        merge(&mut table, patch);
    }
    table.try_into().map_err(|e| TdlpError::Config(format!("[{what}]: {e}")))
}

fn train_configs(cfg: &RunConfig, seed: u64) -> Result<(TrainConfig, TrainConfig)> {
    let mut pre: TrainConfig = overlay(&TrainConfig::desk(), cfg.pretrain.as_ref(), "pretrain")?;
    let mut fine: TrainConfig = overlay(&TrainConfig::finetune(), cfg.finetune.as_ref(), "finetune")?;
    pre.seed = seed;
    fine.seed = seed;
    pre.validate()?;
    fine.validate()?;
    Ok((pre, fine))
}

fn world_spec(cfg: &RunConfig, seed: u64) -> Result<WorldSpec> {
    let mut w: WorldSpec = overlay(&WorldSpec::default(), cfg.world.as_ref(), "world")?;
    w.seed = seed;
    w.validate()?;
    Ok(w)
}

/// Ground-truth or prediction files of a directory, keyed by sequence name.
fn mot_dir(dir: &Path, kind: MotKind) -> Result<BTreeMap<String, SequenceData>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let nested = path.join("gt").join("gt.txt");
        let (file, name) = if path.is_dir() && nested.is_file() {
            (nested, path.file_name().unwrap().to_string_lossy().into_owned())
        } else if path.extension().is_some_and(|e| e == "txt") {
            (path.clone(), path.file_stem().unwrap().to_string_lossy().into_owned())
        } else {
            continue;
        };
        let mut seq = parse_mot_file(&file, kind)?;
        seq.name = name.clone();
        out.insert(name, seq);
    }
    if out.is_empty() {
        return Err(TdlpError::InvalidInput(format!("no MOT files in {}", dir.display())));
    }
    Ok(out)
}

/// A modality spec for `name` features of width `dim`.
fn infer_modality(name: &str, dim: usize) -> ModalitySpec {
    let mut spec = if name.starts_with("keypoint") && dim % 3 == 0 {
        ModalitySpec::keypoints(dim / 3, true)
    } else if name.starts_with("keypoint") && dim % 2 == 0 {
        ModalitySpec::keypoints(dim / 2, false)
    } else {
        ModalitySpec::appearance(dim)
    };
    spec.name = name.to_string();
    spec
}

fn attach_dir(seqs: &mut [SequenceData], name: &str, dir: &Path) -> Result<()> {
    for seq in seqs {
        let file = dir.join(format!("{}.csv", seq.name));
        let feats = load_modality_features(&file, name, seq)?;
        attach_modality(seq, name, &feats)?;
    }
    Ok(())
}

fn model_config(cfg: &RunConfig, seqs: &[SequenceData], method: Method) -> Result<ModelConfig> {
    let mut modalities = vec![ModalitySpec::bbox()];
    if let Some(seq) = seqs.first() {
        for (name, dim) in seq.modalities()? {
            modalities.push(infer_modality(&name, dim));
        }
    }
    let model: ModelConfig = overlay(&ModelConfig::desk(modalities), cfg.model.as_ref(), "model")?;
    let model = model.with_head(method.head());
    model.validate()?;
    Ok(model)
}

fn run_train(cli: &Cli, args: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let (pre, fine) = train_configs(cfg, cli.seed)?;
    let data = match &args.gt {
        Some(dir) => {
            let mut train: Vec<SequenceData> = mot_dir(dir, MotKind::GroundTruth)?.into_values().collect();
            let mut val: Vec<SequenceData> = match &args.val {
                Some(v) => mot_dir(v, MotKind::GroundTruth)?.into_values().collect(),
                None => Vec::new(),
            };
            for (name, dir) in &args.modalities {
                attach_dir(&mut train, name, dir)?;
                attach_dir(&mut val, name, dir)?;
            }
            TrainData { train, val }
        }
        None => {
            if !args.modalities.is_empty() {
                warn!("--modality is ignored for synthetic training; set world.appearance_dim instead");
            }
            let world = world_spec(cfg, cli.seed)?;
            synthetic_split(&world, args.train_worlds, args.val_worlds, 0, cli.seed)?.data
        }
    };
    let model_cfg = model_config(cfg, &data.train, args.method)?;
    info!(
        "training {} on {} sequences with {:?}",
        args.method,
        data.train.len(),
        model_cfg.modalities.iter().map(|m| &m.name).collect::<Vec<_>>()
    );
    let opts = TrainOptions {
        deterministic: cli.deterministic,
    };
    let outcome = train(&model_cfg, &data, &pre, &fine, &opts)?;
    let mut model = outcome.model;
    if args.method == Method::Ctdp {
        let val = if data.val.is_empty() { &data.train } else { &data.val };
        let gate = calibrate_gate(&model, val, pre.val_clips.max(100), pre.clip_length, cli.seed)?;
        info!("calibrated cosine gate {gate:.4}");
        model.link_threshold = Some(gate);
    }
    save_checkpoint(&model, &args.out)?;
    if let Some(path) = &args.metrics {
        let mut text = String::new();
        for (run, rows) in &outcome.metrics {
            text.push_str(&format!("# {run}\n"));
            text.push_str(&metrics_csv(rows));
        }
        fs::write(path, text).map_err(|e| io_err(path, e))?;
    }
    info!("wrote {}", args.out.display());
    Ok(())
}

fn run_track(args: &TrackArgs, cfg: &RunConfig) -> Result<()> {
    let model = load_checkpoint(&args.ckpt)?;
    let mut tracker: TrackerConfig = overlay(&TrackerConfig::preset(&args.preset)?, cfg.tracker.as_ref(), "tracker")?;
    let explicit_gate = cfg.tracker.as_ref().is_some_and(|t| t.contains_key("link_threshold"));
    if !explicit_gate {
        tracker.link_threshold = operating_gate(&model, tracker.link_threshold);
    }
    tracker.validate()?;
    let mut dets = parse_mot_file(&args.dets, MotKind::Detections)?;
    for (name, path) in &args.modalities {
        let feats = load_modality_features(path, name, &dets)?;
        attach_modality(&mut dets, name, &feats)?;
    }
    let out = run_sequence(&dets, &model, &tracker)?;
    info!("{} frames, {} identities", out.frames.len(), out.identities().len());
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_mot_results(&out, &args.out)
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let metrics = parse_metrics(&args.metrics)?;
    let gt = mot_dir(&args.gt, MotKind::GroundTruth)?;
    let mut pairs = Vec::with_capacity(gt.len());
    for (name, g) in gt {
        let file = args.pred.join(format!("{name}.txt"));
        let pred = if file.is_file() {
            parse_mot_file(&file, MotKind::GroundTruth)?
        } else {
            warn!("no prediction for `{name}`; scoring it as empty");
            SequenceData::new(name.clone())
        };
        pairs.push((g, pred));
    }
    let report = evaluate(&pairs);
    let c = &report.combined;
    info!("HOTA {:.4}  IDF1 {:.4}  MOTA {:?}", c.hota, c.idf1, c.mota);
    fs::write(&args.out, report.to_csv(&metrics)).map_err(|e| io_err(&args.out, e))
}

fn run_gen(cli: &Cli, args: &GenArgs, cfg: &RunConfig) -> Result<()> {
    let base = world_spec(cfg, cli.seed)?;
    let (gt_dir, det_dir, app_dir) = (args.out.join("gt"), args.out.join("det"), args.out.join("appearance"));
    for d in [&gt_dir, &det_dir] {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    if base.appearance_dim > 0 {
        fs::create_dir_all(&app_dir).map_err(|e| io_err(&app_dir, e))?;
    }
    #[derive(Serialize)]
    struct Manifest {
        worlds: Vec<WorldSpec>,
    }
    let mut worlds = Vec::with_capacity(args.sequences);
    for k in 0..args.sequences {
        let spec = WorldSpec {
            seed: cli.seed.wrapping_add(k as u64),
            ..base.clone()
        };
        let (gt, dets) = generate_world(&spec)?;
        write_mot_sequence(&gt, gt_dir.join(format!("{}.txt", gt.name)))?;
        write_mot_sequence(&dets, det_dir.join(format!("{}.txt", dets.name)))?;
        if spec.appearance_dim > 0 {
            write_modality_features(&gt, "appearance", app_dir.join(format!("{}.csv", gt.name)))?;
            write_modality_features(&dets, "appearance", app_dir.join(format!("{}.det.csv", dets.name)))?;
        }
        worlds.push(spec);
    }
    let manifest = toml::to_string(&Manifest { worlds }).map_err(|e| TdlpError::Config(e.to_string()))?;
    let path = args.out.join("manifest.toml");
    fs::write(&path, manifest).map_err(|e| io_err(&path, e))?;
    info!("wrote {} sequences to {}", args.sequences, args.out.display());
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    if args.suite != "appendix-b" {
        return Err(TdlpError::Config(format!("unknown suite `{}`", args.suite)));
    }
    let model = load_checkpoint(&args.ckpt)?;
    if model.config.modalities.iter().any(|m| m.name != "bbox") {
        return Err(TdlpError::Config("the suite scores box-only models".into()));
    }
    if model.config.head != args.method.head() {
        warn!("checkpoint head {:?} does not match --method {}", model.config.head, args.method);
    }
    let gate = args.gate.unwrap_or_else(|| operating_gate(&model, 0.5));
    let report = passfail_suite(&model, args.method, gate, &ScenarioSpec::default())?;
    info!(
        "{}: rank {}/24, threshold {}/24",
        args.method,
        report.rank.passes(),
        report.threshold.passes()
    );
    fs::write(&args.out, report.render()).map_err(|e| io_err(&args.out, e))
}

fn run_ablate(cli: &Cli, args: &AblateArgs, cfg: &RunConfig) -> Result<()> {
    let mut world = world_spec(cfg, cli.seed)?;
    let mut all = Vec::new();
    for name in &args.features {
        match name.as_str() {
            "bbox" => all.push(ModalitySpec::bbox()),
            "appearance" => {
                if world.appearance_dim == 0 {
                    world.appearance_dim = 16;
                }
                all.push(ModalitySpec::appearance(world.appearance_dim));
            }
            other => return Err(TdlpError::Config(format!("synthetic worlds have no `{other}` features"))),
        }
    }
    let split: WorldSplit = synthetic_split(&world, args.train_worlds, 1, args.test_worlds, cli.seed)?;
    let base: ModelConfig = overlay(&ModelConfig::desk(all.clone()), cfg.model.as_ref(), "model")?;
    let (pre, fine) = train_configs(cfg, cli.seed)?;
    let tracker: TrackerConfig = overlay(&TrackerConfig::synthetic(), cfg.tracker.as_ref(), "tracker")?;
    tracker.validate()?;
    let ds = AblationDataset {
        name: "synthetic".into(),
        split,
    };
    let opts = TrainOptions {
        deterministic: cli.deterministic,
    };
    let rows = feature_ablation(&[ds], &modality_subsets(&all), &base, &pre, &fine, &tracker, &opts)?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    fs::write(&args.out, csv).map_err(|e| io_err(&args.out, e))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Train(a) => run_train(cli, a, &cfg),
        Command::Track(a) => run_track(a, &cfg),
        Command::Eval(a) => run_eval(a),
        Command::GenData(a) => run_gen(cli, a, &cfg),
        Command::Synth(a) => run_synth(a),
        Command::Ablate(a) => run_ablate(cli, a, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
