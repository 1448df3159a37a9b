//! Command-line operator surface: data generation, training, prediction,
//! evaluation, uncertainty reporting, and heatmap emission.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or validation
//! failure, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use seneva::encoder::EncoderConfig;
use seneva::evaluation::{
    self, heatmap, min_ade, min_fde, ood_report, MissRateKind, Region,
};
use seneva::mixture::MixtureConfig;
use seneva::sampling::{
    dense_grid, endpoint_distribution, predict_top_m, DEFAULT_GRID_RESOLUTION,
    DEFAULT_GRID_SIGMA, DEFAULT_IOU_THRESHOLD, DEFAULT_NMS_RADIUS,
};
use seneva::scene::{load_scene_file, save_scene_file, to_target_frame, Scene, SceneHeader};
use seneva::synthetic::{
    generate_dataset, generate_ood_split, GeneratorConfig, Geometry, OodParams,
};
use seneva::training::{
    load_checkpoint, save_checkpoint, train_resume, Adam, TrainConfig, TrainingError,
};

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<seneva::scene::SceneError> for CliError {
    fn from(e: seneva::scene::SceneError) -> Self {
        match e {
            seneva::scene::SceneError::Io(_) => CliError::io(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<seneva::synthetic::GeneratorError> for CliError {
    fn from(e: seneva::synthetic::GeneratorError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<seneva::training::CheckpointError> for CliError {
    fn from(e: seneva::training::CheckpointError) -> Self {
        match e {
            seneva::training::CheckpointError::Io(_) => CliError::io(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::NanLoss { .. } => CliError {
                code: EXIT_NUMERICAL,
                message: e.to_string(),
            },
            TrainingError::Scene(s) => s.into(),
            other => CliError::config(other.to_string()),
        }
    }
}

impl From<seneva::sampling::SamplingError> for CliError {
    fn from(e: seneva::sampling::SamplingError) -> Self {
        match e {
            seneva::sampling::SamplingError::SingularCovariance => CliError {
                code: EXIT_NUMERICAL,
                message: e.to_string(),
            },
            other => CliError::config(other.to_string()),
        }
    }
}

impl From<seneva::evaluation::EvaluationError> for CliError {
    fn from(e: seneva::evaluation::EvaluationError) -> Self {
        use seneva::evaluation::EvaluationError as E;
        match e {
            E::Sampling(s) => s.into(),
            E::Scene(s) => s.into(),
            other => CliError::config(other.to_string()),
        }
    }
}

impl From<seneva::encoder::EncoderError> for CliError {
    fn from(e: seneva::encoder::EncoderError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

// ----------------------------------------------------------------------
// Configuration file
// ----------------------------------------------------------------------

/// On-disk configuration: every section and field optional, unknown keys
/// rejected. Flags override file values; `SENEVA_SEED` overrides seeds.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    generator: GeneratorSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    mixture: MixtureSection,
    #[serde(default)]
    encoder: EncoderSection,
    #[serde(default)]
    sampling: SamplingSection,
    #[serde(default)]
    evaluation: EvaluationSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorSection {
    seed: Option<u64>,
    n_scenes: Option<usize>,
    h: Option<usize>,
    t: Option<usize>,
    step_seconds: Option<f64>,
    geometry: Option<Geometry>,
    mode_count: Option<usize>,
    mode_separation: Option<f64>,
    speed_min: Option<f64>,
    speed_max: Option<f64>,
    noise_std: Option<f64>,
    radius: Option<f64>,
    offset: Option<f64>,
    ood_radius: Option<f64>,
    ood_offset: Option<f64>,
    ood_separation: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    decay_step: Option<usize>,
    decay_rate: Option<f64>,
    alpha: Option<f64>,
    gamma_focal: Option<f64>,
    n_mc: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureSection {
    k: Option<usize>,
    d_v: Option<usize>,
    h: Option<usize>,
    d_hidden: Option<usize>,
    d_summary: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderSection {
    d_model: Option<usize>,
    subgraph_depth: Option<usize>,
    n_levels: Option<usize>,
    n_heads: Option<usize>,
    max_neighbors: Option<usize>,
    max_polylines: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplingSection {
    m: Option<usize>,
    radius: Option<f64>,
    iou_threshold: Option<f64>,
    resolution: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluationSection {
    mr: Option<String>,
    n_mc: Option<usize>,
}

fn load_file_config(path: Option<&PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::io(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::config(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("SENEVA_SEED") {
        Err(_) => Ok(None),
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::config(format!("SENEVA_SEED is not a u64: '{v}'"))),
    }
}

/// Fully merged, validated configuration echoed into output directories.
#[derive(Debug, Serialize)]
struct EffectiveConfig {
    generator: GeneratorConfig,
    train: TrainConfig,
    mixture: MixtureConfig,
    encoder: EncoderConfig,
    sampling: SamplingParams,
    evaluation: EvaluationParams,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct SamplingParams {
    m: usize,
    radius: f64,
    iou_threshold: f64,
    resolution: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EvaluationParams {
    mr: String,
    n_mc: usize,
}

fn merge_config(file: &FileConfig, env_seed: Option<u64>) -> Result<EffectiveConfig, CliError> {
    let g = &file.generator;
    let mut generator = GeneratorConfig::default();
    generator.seed = env_seed.or(g.seed).unwrap_or(generator.seed);
    generator.n_scenes = g.n_scenes.unwrap_or(generator.n_scenes);
    generator.h = g.h.unwrap_or(generator.h);
    generator.t = g.t.unwrap_or(generator.t);
    generator.step_seconds = g.step_seconds.unwrap_or(generator.step_seconds);
    generator.geometry = g.geometry.unwrap_or(generator.geometry);
    generator.mode_count = g.mode_count.unwrap_or(generator.mode_count);
    generator.mode_separation = g.mode_separation.unwrap_or(generator.mode_separation);
    generator.speed_range = (
        g.speed_min.unwrap_or(generator.speed_range.0),
        g.speed_max.unwrap_or(generator.speed_range.1),
    );
    generator.noise_std = g.noise_std.unwrap_or(generator.noise_std);
    generator.radius = g.radius.unwrap_or(generator.radius);
    generator.offset = g.offset.unwrap_or(generator.offset);
    let ood = OodParams {
        radius: g.ood_radius,
        offset: g.ood_offset,
        separation: g.ood_separation,
    };
    generator.ood_params = if ood.is_empty() { None } else { Some(ood) };

    let t = &file.train;
    let mut train = TrainConfig::default();
    train.epochs = t.epochs.unwrap_or(train.epochs);
    train.batch_size = t.batch_size.unwrap_or(train.batch_size);
    train.lr = t.lr.unwrap_or(train.lr);
    train.decay_step = t.decay_step.unwrap_or(train.decay_step);
    train.decay_rate = t.decay_rate.unwrap_or(train.decay_rate);
    train.alpha = t.alpha.unwrap_or(train.alpha);
    train.gamma_focal = t.gamma_focal.unwrap_or(train.gamma_focal);
    train.n_mc = t.n_mc.unwrap_or(train.n_mc);
    train.seed = env_seed.or(t.seed).unwrap_or(train.seed);

    let e = &file.encoder;
    let mut encoder = EncoderConfig::default();
    encoder.d_model = e.d_model.unwrap_or(encoder.d_model);
    encoder.subgraph_depth = e.subgraph_depth.unwrap_or(encoder.subgraph_depth);
    encoder.n_levels = e.n_levels.unwrap_or(encoder.n_levels);
    encoder.n_heads = e.n_heads.unwrap_or(encoder.n_heads);
    encoder.max_neighbors = e.max_neighbors.unwrap_or(encoder.max_neighbors);
    encoder.max_polylines = e.max_polylines.unwrap_or(encoder.max_polylines);

    let m = &file.mixture;
    let mut mixture = MixtureConfig::default();
    mixture.k = m.k.unwrap_or(mixture.k);
    mixture.d_v = m.d_v.unwrap_or(mixture.d_v);
    mixture.h = m.h.unwrap_or(mixture.h);
    mixture.d_hidden = m.d_hidden.unwrap_or(mixture.d_hidden);
    mixture.d_summary = m.d_summary.unwrap_or(mixture.d_summary);
    // The context feature is the encoder's target token.
    mixture.d_x = encoder.d_model;

    let s = &file.sampling;
    let sampling = SamplingParams {
        m: s.m.unwrap_or(6),
        radius: s.radius.unwrap_or(DEFAULT_NMS_RADIUS),
        iou_threshold: s.iou_threshold.unwrap_or(DEFAULT_IOU_THRESHOLD),
        resolution: s.resolution.unwrap_or(DEFAULT_GRID_RESOLUTION),
    };
    let evaluation = EvaluationParams {
        mr: file.evaluation.mr.clone().unwrap_or_else(|| "argoverse".into()),
        n_mc: file.evaluation.n_mc.unwrap_or(16),
    };
    evaluation
        .mr
        .parse::<MissRateKind>()
        .map_err(CliError::config)?;
    Ok(EffectiveConfig {
        generator,
        train,
        mixture,
        encoder,
        sampling,
        evaluation,
    })
}

/// Writes the effective configuration next to the command's outputs and
/// echoes it on stdout for provenance.
fn echo_config(cfg: &EffectiveConfig, out_dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CliError::config(format!("cannot serialize config: {e}")))?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("effective-config.toml"), &text)?;
    println!("effective configuration:\n{text}");
    Ok(())
}

fn out_dir_of(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

// ----------------------------------------------------------------------
// Command definitions
// ----------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "seneva", version, about = "Variational mixture trajectory prediction")]
struct Cli {
    /// Worker threads; 1 defines the reference (bit-exact) outputs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene files (in-distribution and OOD).
    MakeData(MakeDataArgs),
    /// Train a mixture model; writes a checkpoint and a metrics log.
    Train(TrainArgs),
    /// Predict top-M trajectories per scene.
    Predict(PredictArgs),
    /// Compute minADE/minFDE and a miss rate over a dataset.
    Evaluate(EvaluateArgs),
    /// Entropy-based uncertainty report grouped by geometry and OOD flag.
    UqReport(UqReportArgs),
    /// Emit an occupancy log-density grid for one scene.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the scene files.
    #[arg(long)]
    out: PathBuf,
    /// Total number of scenes (ID + OOD).
    #[arg(long)]
    n: Option<usize>,
    /// Fraction of scenes drawn from the OOD geometry split.
    #[arg(long, default_value_t = 0.0)]
    ood_frac: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    geometry: Option<Geometry>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene file to train on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (checkpoint, metrics log, effective config).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of mixture components.
    #[arg(long)]
    k: Option<usize>,
    /// Resume from a checkpoint that carries training state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    /// Output prediction file (JSON lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    m: Option<usize>,
    /// NMS suppression radius in meters.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    iou: Option<f64>,
    /// Candidate grid resolution in meters.
    #[arg(long)]
    resolution: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model to evaluate; mutually exclusive with --predictions.
    #[arg(long, conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Pre-computed prediction file from `predict`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    scenes: PathBuf,
    /// Miss-rate definition: interaction or argoverse.
    #[arg(long)]
    mr: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    resolution: Option<f64>,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UqReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    /// Monte-Carlo samples per scene.
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    /// Scene index within the file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    resolution: Option<f64>,
    /// Region bounds; derived from the endpoint distribution when omitted.
    #[arg(long)]
    x_min: Option<f64>,
    #[arg(long)]
    x_max: Option<f64>,
    #[arg(long)]
    y_min: Option<f64>,
    #[arg(long)]
    y_max: Option<f64>,
    /// Canonical text grid output.
    #[arg(long)]
    out: PathBuf,
    /// Optional grayscale PGM rendering of the same grid.
    #[arg(long)]
    raster: Option<PathBuf>,
}

// ----------------------------------------------------------------------
// Command implementations
// ----------------------------------------------------------------------

fn cmd_make_data(args: &MakeDataArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_ref())?;
    let mut cfg = merge_config(&file, env_seed()?)?;
    if let Some(seed) = args.seed {
        cfg.generator.seed = seed;
    }
    if let Some(geometry) = args.geometry {
        cfg.generator.geometry = geometry;
    }
    let n_total = args.n.unwrap_or(cfg.generator.n_scenes);
    if !(0.0..=1.0).contains(&args.ood_frac) {
        return Err(CliError::config(format!(
            "--ood-frac must be in [0, 1], got {}",
            args.ood_frac
        )));
    }
    let n_ood = (n_total as f64 * args.ood_frac).round() as usize;
    let n_id = n_total - n_ood;
    if n_ood > 0 && cfg.generator.ood_params.is_none() {
        return Err(CliError::config(
            "--ood-frac > 0 needs OOD overrides: set ood_radius, ood_offset, \
             or ood_separation in the [generator] config section",
        ));
    }
    cfg.generator.validate()?;
    echo_config(&cfg, &args.out)?;

    let header = SceneHeader {
        h: cfg.generator.h,
        t: cfg.generator.t,
        step_seconds: cfg.generator.step_seconds,
    };
    let mut id_cfg = cfg.generator.clone();
    id_cfg.n_scenes = n_id;
    let id_scenes = generate_dataset(&id_cfg)?;
    save_scene_file(&args.out.join("scenes_id.jsonl"), &header, &id_scenes)?;
    println!("wrote {} ID scenes to scenes_id.jsonl", id_scenes.len());

    if n_ood > 0 {
        let mut ood_cfg = cfg.generator.clone();
        ood_cfg.n_scenes = n_ood;
        let ood_scenes = generate_ood_split(&ood_cfg)?;
        save_scene_file(&args.out.join("scenes_ood.jsonl"), &header, &ood_scenes)?;
        println!("wrote {} OOD scenes to scenes_ood.jsonl", ood_scenes.len());
    }
    Ok(())
}

fn check_horizons(model_t: usize, model_h: usize, header: &SceneHeader) -> Result<(), CliError> {
    if model_t != header.t || model_h != header.h {
        return Err(CliError::config(format!(
            "horizon mismatch: checkpoint expects H={model_h}/T={model_t}, \
             scene file carries H={}/T={}",
            header.h, header.t
        )));
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_ref())?;
    let mut cfg = merge_config(&file, env_seed()?)?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.k {
        cfg.mixture.k = v;
    }
    cfg.train.validate().map_err(CliError::config)?;
    cfg.encoder.validate().map_err(CliError::config)?;

    let (header, scenes) = load_scene_file(&args.data)?;
    cfg.mixture.t = header.t;
    cfg.mixture.h = header.h;

    let (model, adam, start_epoch) = match &args.resume {
        None => {
            let model =
                seneva::mixture::MixtureModel::new(cfg.encoder, cfg.mixture, cfg.train.seed);
            let adam = Adam::new(&model.store);
            (model, adam, 0)
        }
        Some(path) => {
            let (model, state) = load_checkpoint(path)?;
            let (epoch, adam) = state.ok_or_else(|| {
                CliError::config(format!(
                    "checkpoint {} has no training state; cannot resume",
                    path.display()
                ))
            })?;
            check_horizons(model.mixture_cfg.t, model.mixture_cfg.h, &header)?;
            cfg.mixture = model.mixture_cfg;
            cfg.encoder = model.encoder_cfg;
            (model, adam, epoch)
        }
    };

    echo_config(&cfg, &args.out)?;
    println!(
        "training: K={} epochs={} (from {}) batch={} lr={} decay {}x every {} epochs \
         alpha={} gamma={} n_mc={} seed={}",
        cfg.mixture.k,
        cfg.train.epochs,
        start_epoch,
        cfg.train.batch_size,
        cfg.train.lr,
        cfg.train.decay_rate,
        cfg.train.decay_step,
        cfg.train.alpha,
        cfg.train.gamma_focal,
        cfg.train.n_mc,
        cfg.train.seed
    );

    let (model, adam, records) = train_resume(&scenes, &cfg.train, model, adam, start_epoch)?;

    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&ckpt, &model, Some((cfg.train.epochs, &adam)))?;
    let mut metrics = String::new();
    for r in &records {
        metrics.push_str(&serde_json::to_string(r).expect("serializable record"));
        metrics.push('\n');
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.6}  ll {:.6}  kl_v {:.6}  kl_z {:.6}  focal {:.6}",
            r.epoch, r.lr, r.total, r.term1, r.term2, r.term3, r.focal
        );
    }
    std::fs::write(args.out.join("metrics.jsonl"), metrics)?;
    println!("wrote checkpoint to {}", ckpt.display());
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_ref())?;
    let mut cfg = merge_config(&file, env_seed()?)?;
    apply_sampling_overrides(
        &mut cfg.sampling,
        args.m,
        args.radius,
        args.iou,
        args.resolution,
    );
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let (header, scenes) = load_scene_file(&args.scenes)?;
    check_horizons(model.mixture_cfg.t, model.mixture_cfg.h, &header)?;
    cfg.mixture = model.mixture_cfg;
    cfg.encoder = model.encoder_cfg;
    echo_config(&cfg, &out_dir_of(&args.out))?;

    let mut out = String::new();
    for (index, scene) in scenes.iter().enumerate() {
        let p = predict_top_m(
            &model,
            scene,
            cfg.sampling.m,
            cfg.sampling.radius,
            cfg.sampling.iou_threshold,
            cfg.sampling.resolution,
        )?;
        let record = serde_json::json!({
            "index": index,
            "trajectories": p.trajectories,
            "scores": p.scores,
            "component_of": p.component_of,
            "truncated": p.truncated,
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    std::fs::write(&args.out, out)?;
    println!(
        "wrote {} predictions ({} trajectories each) to {}",
        scenes.len(),
        cfg.sampling.m,
        args.out.display()
    );
    Ok(())
}

fn apply_sampling_overrides(
    s: &mut SamplingParams,
    m: Option<usize>,
    radius: Option<f64>,
    iou: Option<f64>,
    resolution: Option<f64>,
) {
    if let Some(v) = m {
        s.m = v;
    }
    if let Some(v) = radius {
        s.radius = v;
    }
    if let Some(v) = iou {
        s.iou_threshold = v;
    }
    if let Some(v) = resolution {
        s.resolution = v;
    }
}

#[derive(Deserialize)]
struct PredictionRecord {
    index: usize,
    trajectories: Vec<Vec<[f64; 2]>>,
}

/// Metrics over stored predictions, mirroring the model-side evaluator.
fn metrics_from_predictions(
    records: &[PredictionRecord],
    scenes: &[Scene],
    kind: MissRateKind,
    step_seconds: f64,
) -> Result<serde_json::Value, CliError> {
    if records.len() != scenes.len() {
        return Err(CliError::config(format!(
            "prediction file has {} records for {} scenes",
            records.len(),
            scenes.len()
        )));
    }
    let mut sum_ade = 0.0;
    let mut sum_fde = 0.0;
    let mut misses = 0usize;
    for r in records {
        let scene = scenes.get(r.index).ok_or_else(|| {
            CliError::config(format!("prediction index {} out of range", r.index))
        })?;
        let gt = scene
            .future
            .as_ref()
            .ok_or_else(|| CliError::config(format!("scene {} has no future", r.index)))?;
        sum_ade += min_ade(&r.trajectories, gt)?;
        sum_fde += min_fde(&r.trajectories, gt)?;
        let miss = match kind {
            MissRateKind::Argoverse => evaluation::is_miss_argoverse(&r.trajectories, gt)?,
            MissRateKind::Interaction => {
                let n = gt.len();
                let (a, b) = (gt[n.saturating_sub(2)], gt[n - 1]);
                let yaw = (b[1] - a[1]).atan2(b[0] - a[0]);
                let speed =
                    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt() / step_seconds;
                evaluation::is_miss_interaction(&r.trajectories, gt, yaw, speed)?
            }
        };
        if miss {
            misses += 1;
        }
    }
    let n = records.len() as f64;
    Ok(serde_json::json!({
        "min_ade": sum_ade / n,
        "min_fde": sum_fde / n,
        "miss_rate": misses as f64 / n,
        "n_scenes": records.len(),
    }))
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_ref())?;
    let mut cfg = merge_config(&file, env_seed()?)?;
    apply_sampling_overrides(
        &mut cfg.sampling,
        args.m,
        args.radius,
        args.iou,
        args.resolution,
    );
    if let Some(mr) = &args.mr {
        cfg.evaluation.mr = mr.clone();
    }
    let kind: MissRateKind = cfg.evaluation.mr.parse().map_err(CliError::config)?;
    let (header, scenes) = load_scene_file(&args.scenes)?;

    let report = match (&args.checkpoint, &args.predictions) {
        (Some(ckpt), None) => {
            let (model, _) = load_checkpoint(ckpt)?;
            check_horizons(model.mixture_cfg.t, model.mixture_cfg.h, &header)?;
            let r = evaluation::evaluate(
                &model,
                &scenes,
                cfg.sampling.m,
                cfg.sampling.radius,
                cfg.sampling.iou_threshold,
                cfg.sampling.resolution,
                kind,
                header.step_seconds,
            )?;
            serde_json::to_value(r).expect("serializable report")
        }
        (None, Some(preds)) => {
            let text = std::fs::read_to_string(preds)?;
            let records: Vec<PredictionRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::config(format!("bad prediction file: {e}")))?;
            metrics_from_predictions(&records, &scenes, kind, header.step_seconds)?
        }
        _ => {
            return Err(CliError::config(
                "evaluate needs exactly one of --checkpoint or --predictions",
            ))
        }
    };

    let text = serde_json::to_string_pretty(&report).expect("serializable report");
    println!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out, format!("{text}\n"))?;
    }
    Ok(())
}

fn cmd_uq_report(args: &UqReportArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_ref())?;
    let mut cfg = merge_config(&file, env_seed()?)?;
    if let Some(v) = args.n_mc {
        cfg.evaluation.n_mc = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let (header, scenes) = load_scene_file(&args.scenes)?;
    check_horizons(model.mixture_cfg.t, model.mixture_cfg.h, &header)?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.train.seed);
    let report = ood_report(&model, &scenes, cfg.evaluation.n_mc, &mut rng)?;

    println!("geometry      ood    n     mean        std");
    for g in &report.groups {
        println!(
            "{:<12}  {:<5}  {:<4}  {:>9.4}  {:>9.4}",
            g.geometry, g.ood, g.n_scenes, g.mean, g.std
        );
    }
    for c in &report.changes {
        println!(
            "{}: ID {:.4} -> OOD {:.4} ({:+.2}%)",
            c.geometry, c.id_mean, c.ood_mean, c.percent_change
        );
    }
    if !report.omitted.is_empty() {
        println!(
            "note: no ID/OOD comparison for {} (one split missing)",
            report.omitted.join(", ")
        );
    }
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report).expect("serializable report");
        std::fs::write(out, format!("{text}\n"))?;
    }
    Ok(())
}

fn cmd_heatmap(args: &HeatmapArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_ref())?;
    let cfg = merge_config(&file, env_seed()?)?;
    let resolution = args.resolution.unwrap_or(cfg.sampling.resolution);
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let (header, scenes) = load_scene_file(&args.scenes)?;
    check_horizons(model.mixture_cfg.t, model.mixture_cfg.h, &header)?;
    let scene = scenes.get(args.index).ok_or_else(|| {
        CliError::config(format!(
            "scene index {} out of range (file has {})",
            args.index,
            scenes.len()
        ))
    })?;

    let (norm, _) = to_target_frame(scene)?;
    let x = model.encoder.encode_scene_value(&model.store, &norm)?;
    let top_c = model.mixture_cfg.k.min(6);
    let dist = endpoint_distribution(&model, &x, top_c)?;

    let region = match (args.x_min, args.x_max, args.y_min, args.y_max) {
        (Some(x_min), Some(x_max), Some(y_min), Some(y_max)) => {
            if x_min >= x_max || y_min >= y_max {
                return Err(CliError::config("empty heatmap region"));
            }
            Region {
                x_min,
                x_max,
                y_min,
                y_max,
            }
        }
        (None, None, None, None) => {
            let grid = dense_grid(&dist, resolution, DEFAULT_GRID_SIGMA);
            let xs = grid.iter().map(|c| c.position[0]);
            let ys = grid.iter().map(|c| c.position[1]);
            Region {
                x_min: xs.clone().fold(f64::INFINITY, f64::min),
                x_max: xs.fold(f64::NEG_INFINITY, f64::max),
                y_min: ys.clone().fold(f64::INFINITY, f64::min),
                y_max: ys.fold(f64::NEG_INFINITY, f64::max),
            }
        }
        _ => {
            return Err(CliError::config(
                "provide all four of --x-min --x-max --y-min --y-max, or none",
            ))
        }
    };

    let hm = heatmap(&dist, region, resolution);
    let mut text = format!(
        "# region {} {} {} {}\n# resolution {}\n",
        hm.region.x_min, hm.region.x_max, hm.region.y_min, hm.region.y_max, hm.resolution
    );
    for i in 0..hm.nx {
        let row: Vec<String> = (0..hm.ny)
            .map(|j| format!("{:.6}", hm.values[i * hm.ny + j]))
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    std::fs::write(&args.out, text)?;
    println!(
        "wrote {}x{} heatmap to {}",
        hm.nx,
        hm.ny,
        args.out.display()
    );

    if let Some(raster) = &args.raster {
        let lo = hm.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = hm.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let mut pgm = format!("P2\n{} {}\n255\n", hm.ny, hm.nx);
        for i in 0..hm.nx {
            let row: Vec<String> = (0..hm.ny)
                .map(|j| {
                    let v = (hm.values[i * hm.ny + j] - lo) / span;
                    format!("{}", (v * 255.0).round() as u8)
                })
                .collect();
            pgm.push_str(&row.join(" "));
            pgm.push('\n');
        }
        std::fs::write(raster, pgm)?;
        println!("wrote raster to {}", raster.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_CONFIG);
    }
    let result = match &cli.command {
        Command::MakeData(args) => cmd_make_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::UqReport(args) => cmd_uq_report(args),
        Command::Heatmap(args) => cmd_heatmap(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
