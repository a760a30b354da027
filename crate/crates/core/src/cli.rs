//! Command-line front end: dataset synthesis, pretraining, fine-tuning,
//! evaluation, saliency export, the scaling benchmark, and the robustness
//! sweep. Every run is deterministic per `--seed`: repeating a command
//! reproduces its output files byte for byte.
//!
//! `--config` points at a key=value text file ('#' comments allowed);
//! recognized keys are grouped by prefix: `model.*` (architecture),
//! `train.*` (optimization), `augment.*` (train-time augmentation),
//! `synth.*` (dataset generator).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde_json::json;

use crate::bench::{render_csv, render_table, scaling_report};
use crate::data::{
    generate_synthetic, perturb, preprocess, read_manifest, read_volume, write_manifest,
    write_volume, AugmentConfig, ManifestEntry, Perturbation, SyntheticSpec,
    VolumeFile,
};
use crate::error::{Error, Result};
use crate::harness::{
    finetune, metrics, predict_scores, pretrain, stratified_kfold, Metrics, TrainConfig, TrainMode,
};
use crate::model::{
    apply_weights, encode_all, load_checkpoint, save_checkpoint, ClassifierHead, MaeConfig,
    MaeModel,
};
use crate::numcore::tape::{ParamStore, Tape};
use crate::numcore::tensor::Tensor;
use crate::saliency::{latent_to_spatial, normalize_for_display, render_slice, write_pgm};

#[derive(Parser, Debug)]
#[command(
    name = "voxmamba",
    version,
    about = "Bidirectional selective state-space masked autoencoder for 3D volumes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a labeled synthetic dataset (MV3D volumes + manifest).
    Synth(SynthCmd),
    /// Masked-reconstruction pretraining on a manifest of volumes.
    Pretrain(PretrainCmd),
    /// Supervised fine-tuning of a (possibly pretrained) encoder.
    Finetune(FinetuneCmd),
    /// Score a checkpoint on a manifest with per-fold metrics.
    Eval(EvalCmd),
    /// Export a saliency volume and orthogonal PGM slices.
    Saliency(SaliencyCmd),
    /// Analytic scaling table for the SSM and attention encoders.
    Bench(BenchCmd),
    /// Robustness sweep over rotations and bias fields.
    PerturbEval(PerturbEvalCmd),
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of volumes (classes alternate 0,1,0,1,…).
    #[arg(long, default_value_t = 400)]
    pub count: usize,
    /// Separability preset: "easy" or "hard".
    #[arg(long, default_value = "easy")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainCmd {
    /// Manifest of training volumes.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Checkpoint to start from; omitted = train from scratch.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Folds for the per-fold metric report.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SaliencyCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One MV3D volume to explain.
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overlay opacity (0 = anatomy only, 1 = saliency only).
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchCmd {
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "49,196,784,3136")]
    pub seq: String,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PerturbEvalCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Rotation angles in degrees.
    #[arg(long, default_value = "10,45,90")]
    pub rotations: String,
    /// Bias-field coefficient bounds.
    #[arg(long, default_value = "0.1,0.4,0.5")]
    pub bias_coefs: String,
    /// Rotation axis: 0 = z/H, 1 = y/W, 2 = x/L.
    #[arg(long, default_value_t = 0)]
    pub axis: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(c) => run_synth(c),
        Cmd::Pretrain(c) => run_pretrain(c),
        Cmd::Finetune(c) => run_finetune(c),
        Cmd::Eval(c) => run_eval(c),
        Cmd::Saliency(c) => run_saliency(c),
        Cmd::Bench(c) => run_bench(c),
        Cmd::PerturbEval(c) => run_perturb_eval(c),
    }
}

// ---------------------------------------------------------------------------
// config files

pub fn parse_kv_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, got {raw:?}",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    validate_keys(&map)?;
    Ok(map)
}

const KNOWN_KEYS: &[&str] = &[
    "model.enc_depth",
    "model.enc_dim",
    "model.dec_depth",
    "model.dec_dim",
    "model.patch",
    "model.channels",
    "model.volume",
    "model.mask_ratio",
    "model.norm_targets",
    "model.n_state",
    "train.epochs",
    "train.base_lr",
    "train.weight_decay",
    "train.batch_size",
    "train.warmup_epochs",
    "train.head_only",
    "augment.enabled",
    "augment.p_affine",
    "augment.max_rotate_deg",
    "augment.max_scale",
    "augment.p_noise",
    "augment.noise_sigma",
    "augment.p_gamma",
    "augment.gamma_lo",
    "augment.gamma_hi",
    "synth.dims",
    "synth.channels",
    "synth.center_spread",
    "synth.radius_lo",
    "synth.radius_hi",
    "synth.intensity0",
    "synth.intensity1",
    "synth.texture0",
    "synth.texture1",
    "synth.noise_sigma",
    "synth.task",
];

fn validate_keys(map: &HashMap<String, String>) -> Result<()> {
    let mut unknown: Vec<&str> = map
        .keys()
        .map(String::as_str)
        .filter(|k| !KNOWN_KEYS.contains(k))
        .collect();
    if unknown.is_empty() {
        return Ok(());
    }
    unknown.sort_unstable();
    Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
}

fn lookup<T: FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("config key {key} = {raw:?}: {e}"))),
    }
}

fn load_config(path: Option<&Path>) -> Result<HashMap<String, String>> {
    match path {
        Some(p) => parse_kv_file(p),
        None => Ok(HashMap::new()),
    }
}

fn model_config(map: &HashMap<String, String>) -> Result<MaeConfig> {
    let mut c = MaeConfig::desk();
    if let Some(v) = lookup(map, "model.enc_depth")? {
        c.enc_depth = v;
    }
    if let Some(v) = lookup(map, "model.enc_dim")? {
        c.enc_dim = v;
    }
    if let Some(v) = lookup(map, "model.dec_depth")? {
        c.dec_depth = v;
    }
    if let Some(v) = lookup(map, "model.dec_dim")? {
        c.dec_dim = v;
    }
    if let Some(v) = lookup(map, "model.patch")? {
        c.patch = v;
    }
    if let Some(v) = lookup(map, "model.channels")? {
        c.channels = v;
    }
    if let Some(v) = lookup::<usize>(map, "model.volume")? {
        c.volume = (v, v, v);
    }
    if let Some(v) = lookup(map, "model.mask_ratio")? {
        c.mask_ratio = v;
    }
    if let Some(v) = lookup(map, "model.norm_targets")? {
        c.norm_targets = v;
    }
    if let Some(v) = lookup(map, "model.n_state")? {
        c.n_state = v;
    }
    Ok(c)
}

fn train_config(map: &HashMap<String, String>, mode: TrainMode, seed: u64) -> Result<TrainConfig> {
    let mut c = match mode {
        TrainMode::Pretrain => TrainConfig::pretrain_desk(),
        TrainMode::Finetune => TrainConfig::finetune_desk(),
    };
    c.seed = seed;
    if let Some(v) = lookup(map, "train.epochs")? {
        c.epochs = v;
    }
    if let Some(v) = lookup(map, "train.base_lr")? {
        c.base_lr = v;
    }
    if let Some(v) = lookup(map, "train.weight_decay")? {
        c.weight_decay = v;
    }
    if let Some(v) = lookup(map, "train.batch_size")? {
        c.batch_size = v;
    }
    if let Some(v) = lookup(map, "train.warmup_epochs")? {
        c.warmup_epochs = v;
    }
    if let Some(v) = lookup(map, "train.head_only")? {
        c.head_only = v;
    }
    if lookup::<bool>(map, "augment.enabled")?.unwrap_or(false) {
        let mut a = AugmentConfig::default();
        if let Some(v) = lookup(map, "augment.p_affine")? {
            a.p_affine = v;
        }
        if let Some(v) = lookup(map, "augment.max_rotate_deg")? {
            a.max_rotate_deg = v;
        }
        if let Some(v) = lookup(map, "augment.max_scale")? {
            a.max_scale = v;
        }
        if let Some(v) = lookup(map, "augment.p_noise")? {
            a.p_noise = v;
        }
        if let Some(v) = lookup(map, "augment.noise_sigma")? {
            a.noise_sigma = v;
        }
        if let Some(v) = lookup(map, "augment.p_gamma")? {
            a.p_gamma = v;
        }
        if let Some(v) = lookup(map, "augment.gamma_lo")? {
            a.gamma_range.0 = v;
        }
        if let Some(v) = lookup(map, "augment.gamma_hi")? {
            a.gamma_range.1 = v;
        }
        // augment keys are in 0-255 intensity units; training volumes are
        // rescaled to [0, 1]
        c.augment = Some(a.for_value_max(1.0));
    }
    Ok(c)
}

fn synth_spec(
    map: &HashMap<String, String>,
    preset: &str,
    count: usize,
    seed: u64,
) -> Result<SyntheticSpec> {
    let mut spec = match preset {
        "easy" => SyntheticSpec::easy(count, seed),
        "hard" => SyntheticSpec::hard(count, seed),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected \"easy\" or \"hard\""
            )))
        }
    };
    if let Some(v) = lookup::<usize>(map, "synth.dims")? {
        spec.dims = (v, v, v);
    }
    if let Some(v) = lookup(map, "synth.channels")? {
        spec.channels = v;
    }
    if let Some(v) = lookup(map, "synth.center_spread")? {
        spec.lesion.center_spread = v;
    }
    if let Some(v) = lookup(map, "synth.radius_lo")? {
        spec.lesion.radius.0 = v;
    }
    if let Some(v) = lookup(map, "synth.radius_hi")? {
        spec.lesion.radius.1 = v;
    }
    if let Some(v) = lookup(map, "synth.intensity0")? {
        spec.lesion.intensity[0] = v;
    }
    if let Some(v) = lookup(map, "synth.intensity1")? {
        spec.lesion.intensity[1] = v;
    }
    if let Some(v) = lookup(map, "synth.texture0")? {
        spec.lesion.texture[0] = v;
    }
    if let Some(v) = lookup(map, "synth.texture1")? {
        spec.lesion.texture[1] = v;
    }
    if let Some(v) = lookup(map, "synth.noise_sigma")? {
        spec.noise_sigma = v;
    }
    if let Some(v) = lookup::<String>(map, "synth.task")? {
        spec.task = v;
    }
    Ok(spec)
}

// ---------------------------------------------------------------------------
// shared plumbing

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_loss_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Ready-to-train volume: center-of-mass crop to the model dims,
/// intensities rescaled to [0, 1].
fn prepare(volume: &Tensor, cfg: &MaeConfig) -> Result<Tensor> {
    let mut v = preprocess(volume, cfg.volume)?;
    v.data_mut().iter_mut().for_each(|x| *x /= 255.0);
    Ok(v)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_raw_dataset(manifest: &Path) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Config(format!("{}: empty manifest", manifest.display())));
    }
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut volumes = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for e in &entries {
        if e.label < 0 {
            return Err(Error::Config(format!("negative label for {}", e.path.display())));
        }
        volumes.push(read_volume(&resolve(&base, &e.path))?.voxels);
        labels.push(e.label as usize);
    }
    Ok((volumes, labels))
}

fn load_dataset(manifest: &Path, cfg: &MaeConfig) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let (raw, labels) = load_raw_dataset(manifest)?;
    let volumes = raw.iter().map(|v| prepare(v, cfg)).collect::<Result<Vec<_>>>()?;
    Ok((volumes, labels))
}

/// Rebuilds a model (and classifier head, when the checkpoint carries one)
/// from a checkpoint file.
fn load_model(
    path: &Path,
    seed: u64,
) -> Result<(MaeConfig, MaeModel, ParamStore, Option<ClassifierHead>)> {
    let (config, params) = load_checkpoint(path)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = MaeModel::init(config.clone(), &mut store, &mut rng)?;
    let head = params
        .iter()
        .find(|(n, _)| n == "head.w")
        .map(|(_, t)| t.shape().to_vec())
        .map(|s| ClassifierHead::init(&mut store, s[0], s[1], &mut rng));
    apply_weights(&mut store, &params)?;
    Ok((config, model, store, head))
}

fn num_classes(labels: &[usize]) -> usize {
    labels.iter().copied().max().unwrap_or(0) + 1
}

// ---------------------------------------------------------------------------
// subcommands

fn run_synth(c: SynthCmd) -> Result<()> {
    let map = load_config(c.config.as_deref())?;
    let spec = synth_spec(&map, &c.preset, c.count, c.seed)?;
    ensure_dir(&c.out_dir)?;
    let data = generate_synthetic(&spec);
    let mut entries = Vec::with_capacity(data.len());
    let mut per_class = [0usize; 2];
    for (i, (vol, label)) in data.iter().enumerate() {
        let name = format!("vol_{i:04}.mv3d");
        write_volume(&c.out_dir.join(&name), vol)?;
        per_class[(*label as usize).min(1)] += 1;
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            task: spec.task.clone(),
            label: *label,
        });
    }
    write_manifest(&c.out_dir.join("manifest.tsv"), &entries)?;
    write_json(
        &c.out_dir.join("synth_summary.json"),
        &json!({
            "count": spec.count,
            "preset": c.preset,
            "seed": c.seed,
            "dims": [spec.dims.0, spec.dims.1, spec.dims.2],
            "channels": spec.channels,
            "noise_sigma": spec.noise_sigma,
            "class_counts": per_class,
            "task": spec.task,
        }),
    )?;
    println!(
        "wrote {} volumes ({}/{} per class) to {}",
        data.len(),
        per_class[0],
        per_class[1],
        c.out_dir.display()
    );
    Ok(())
}

fn run_pretrain(c: PretrainCmd) -> Result<()> {
    let map = load_config(c.config.as_deref())?;
    let model_cfg = model_config(&map)?;
    let train_cfg = train_config(&map, TrainMode::Pretrain, c.seed)?;
    ensure_dir(&c.out_dir)?;
    let (volumes, _) = load_dataset(&c.data, &model_cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(c.seed);
    let mut store = ParamStore::new();
    let model = MaeModel::init(model_cfg.clone(), &mut store, &mut rng)?;
    let curve = pretrain(&mut store, &model, &volumes, &train_cfg)?;
    let ckpt = c.out_dir.join("pretrain.mvck");
    save_checkpoint(&ckpt, &model_cfg, &store)?;
    write_loss_csv(&c.out_dir.join("pretrain_loss.csv"), &curve)?;
    write_json(
        &c.out_dir.join("pretrain_summary.json"),
        &json!({
            "mode": "pretrain",
            "seed": c.seed,
            "volumes": volumes.len(),
            "epochs": train_cfg.epochs,
            "base_lr": train_cfg.base_lr,
            "weight_decay": train_cfg.weight_decay,
            "batch_size": train_cfg.batch_size,
            "params": store.scalar_count(),
            "first_loss": curve.first(),
            "final_loss": curve.last(),
            "checkpoint": "pretrain.mvck",
        }),
    )?;
    println!(
        "pretrained {} epochs on {} volumes; loss {:.6} -> {:.6}",
        train_cfg.epochs,
        volumes.len(),
        curve.first().unwrap_or(&f64::NAN),
        curve.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

fn run_finetune(c: FinetuneCmd) -> Result<()> {
    let map = load_config(c.config.as_deref())?;
    let train_cfg = train_config(&map, TrainMode::Finetune, c.seed)?;
    ensure_dir(&c.out_dir)?;
    let mut rng = ChaCha12Rng::seed_from_u64(c.seed);
    let (model_cfg, model, mut store) = match &c.init {
        Some(ckpt) => {
            let (cfg, model, store, head) = load_model(ckpt, c.seed)?;
            if head.is_some() {
                return Err(Error::Config(format!(
                    "{}: already fine-tuned (has a classifier head); start from a \
                     pretraining checkpoint or from scratch",
                    ckpt.display()
                )));
            }
            (cfg, model, store)
        }
        None => {
            let cfg = model_config(&map)?;
            let mut store = ParamStore::new();
            let model = MaeModel::init(cfg.clone(), &mut store, &mut rng)?;
            (cfg, model, store)
        }
    };
    let (volumes, labels) = load_dataset(&c.data, &model_cfg)?;
    let classes = num_classes(&labels);
    if classes < 2 {
        return Err(Error::Config("fine-tuning needs at least two classes".into()));
    }
    let head = ClassifierHead::init(&mut store, model_cfg.enc_dim, classes, &mut rng);
    let curve = finetune(&mut store, &model, &head, &volumes, &labels, &train_cfg)?;
    let ckpt = c.out_dir.join("finetune.mvck");
    save_checkpoint(&ckpt, &model_cfg, &store)?;
    write_loss_csv(&c.out_dir.join("finetune_loss.csv"), &curve)?;
    let scores = predict_scores(&store, &model, &head, &volumes)?;
    let train_metrics = metrics(&scores, &labels)?;
    write_json(
        &c.out_dir.join("finetune_summary.json"),
        &json!({
            "mode": "finetune",
            "seed": c.seed,
            "init": c.init.as_ref().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()),
            "volumes": volumes.len(),
            "classes": classes,
            "epochs": train_cfg.epochs,
            "base_lr": train_cfg.base_lr,
            "final_loss": curve.last(),
            "train_accuracy": train_metrics.accuracy,
            "train_f1": train_metrics.f1,
            "train_auc": train_metrics.auc,
            "checkpoint": "finetune.mvck",
        }),
    )?;
    println!(
        "fine-tuned {} epochs on {} volumes; train acc {:.3}, auc {:.3}",
        train_cfg.epochs,
        volumes.len(),
        train_metrics.accuracy,
        train_metrics.auc
    );
    Ok(())
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    json!({ "accuracy": m.accuracy, "f1": m.f1, "auc": m.auc })
}

fn run_eval(c: EvalCmd) -> Result<()> {
    let map = load_config(c.config.as_deref())?;
    validate_keys(&map)?;
    ensure_dir(&c.out_dir)?;
    let (model_cfg, model, mut store, head) = load_model(&c.checkpoint, c.seed)?;
    let (volumes, labels) = load_dataset(&c.data, &model_cfg)?;
    let head = match head {
        Some(h) => h,
        None => {
            // pretraining checkpoint: attach a fresh (untrained) head so the
            // pipeline still runs end to end; scores will be chance-level
            let mut rng = ChaCha12Rng::seed_from_u64(c.seed ^ 0x9e3779b97f4a7c15);
            ClassifierHead::init(&mut store, model_cfg.enc_dim, num_classes(&labels), &mut rng)
        }
    };
    let scores = predict_scores(&store, &model, &head, &volumes)?;
    let plan = stratified_kfold(&labels, c.folds, c.seed)?;
    let mut csv = String::from("fold,n,accuracy,f1,auc\n");
    let mut fold_json = Vec::new();
    for (f, fold) in plan.test_folds.iter().enumerate() {
        let fs: Vec<f64> = fold.iter().map(|&i| scores[i]).collect();
        let fl: Vec<usize> = fold.iter().map(|&i| labels[i]).collect();
        let m = metrics(&fs, &fl)?;
        let _ = writeln!(csv, "{f},{},{},{},{}", fold.len(), m.accuracy, m.f1, m.auc);
        fold_json.push(metrics_json(&m));
    }
    let overall = metrics(&scores, &labels)?;
    let _ = writeln!(
        csv,
        "overall,{},{},{},{}",
        labels.len(),
        overall.accuracy,
        overall.f1,
        overall.auc
    );
    fs::write(c.out_dir.join("eval_folds.csv"), &csv)?;
    write_json(
        &c.out_dir.join("eval_summary.json"),
        &json!({
            "checkpoint": c.checkpoint.file_name().unwrap_or_default().to_string_lossy(),
            "volumes": labels.len(),
            "folds": c.folds,
            "seed": c.seed,
            "per_fold": fold_json,
            "overall": metrics_json(&overall),
        }),
    )?;
    println!(
        "eval on {} volumes: acc {:.3}, f1 {:.3}, auc {:.3}",
        labels.len(),
        overall.accuracy,
        overall.f1,
        overall.auc
    );
    Ok(())
}

fn run_saliency(c: SaliencyCmd) -> Result<()> {
    let map = load_config(c.config.as_deref())?;
    validate_keys(&map)?;
    if !(0.0..=1.0).contains(&c.alpha) {
        return Err(Error::Domain(format!("alpha must be in [0, 1], got {}", c.alpha)));
    }
    ensure_dir(&c.out_dir)?;
    let (model_cfg, model, store, _) = load_model(&c.checkpoint, c.seed)?;
    let raw = read_volume(&c.volume)?;
    let prepared = prepare(&raw.voxels, &model_cfg)?;
    let mut shape = vec![1];
    shape.extend_from_slice(prepared.shape());
    let batch = Tensor::new(shape, prepared.data().to_vec())?;

    let mut tape = Tape::new();
    let features = encode_all(&mut tape, &store, &model, &batch)?;
    let latents = tape.value(features).clone();
    let mut sal = latent_to_spatial(&latents, model_cfg.patch, &model.geom)?;
    normalize_for_display(&mut sal);

    // saliency volume as a single-channel MV3D file
    let dims = sal.values.shape().to_vec(); // [1, 1, H, W, L]
    let vol = VolumeFile {
        voxels: Tensor::new(dims[1..].to_vec(), sal.values.data().to_vec())?,
        labels: vec![],
    };
    write_volume(&c.out_dir.join("saliency.mv3d"), &vol)?;

    let (h, w, l) = model_cfg.volume;
    let axis_names = ["h", "w", "l"];
    let mids = [h / 2, w / 2, l / 2];
    let mut written = Vec::new();
    for axis in 0..3 {
        let plain = render_slice(&sal, 0, axis, mids[axis], None)?;
        let name = format!("saliency_{}{}.pgm", axis_names[axis], mids[axis]);
        write_pgm(&c.out_dir.join(&name), &plain)?;
        written.push(name);
        let over = render_slice(&sal, 0, axis, mids[axis], Some((&batch, 0, c.alpha)))?;
        let name = format!("overlay_{}{}.pgm", axis_names[axis], mids[axis]);
        write_pgm(&c.out_dir.join(&name), &over)?;
        written.push(name);
    }
    let norm = sal.norm.as_ref().map(|n| n[0]);
    write_json(
        &c.out_dir.join("saliency_summary.json"),
        &json!({
            "checkpoint": c.checkpoint.file_name().unwrap_or_default().to_string_lossy(),
            "volume": c.volume.file_name().unwrap_or_default().to_string_lossy(),
            "alpha": c.alpha,
            "grid": [model.geom.grid.0, model.geom.grid.1, model.geom.grid.2],
            "patch": model_cfg.patch,
            "value_range_before_normalization": norm.map(|(lo, hi)| vec![lo, hi]),
            "files": written,
        }),
    )?;
    println!("wrote saliency volume and {} slices to {}", 6, c.out_dir.display());
    Ok(())
}

fn run_bench(c: BenchCmd) -> Result<()> {
    let mut seqs = Vec::new();
    for part in c.seq.split(',') {
        let t: usize = part
            .trim()
            .parse()
            .map_err(|e| Error::Config(format!("--seq entry {part:?}: {e}")))?;
        if t == 0 {
            return Err(Error::Config("--seq entries must be positive".into()));
        }
        seqs.push(t);
    }
    let rows = scaling_report(&seqs);
    let table = render_table(&rows);
    print!("{table}");
    if let Some(dir) = &c.out_dir {
        ensure_dir(dir)?;
        fs::write(dir.join("scaling.txt"), &table)?;
        fs::write(dir.join("scaling.csv"), render_csv(&rows))?;
    }
    Ok(())
}

fn parse_f64_list(raw: &str, what: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::Config(format!("{what} entry {s:?}: {e}")))
        })
        .collect()
}

fn run_perturb_eval(c: PerturbEvalCmd) -> Result<()> {
    let map = load_config(c.config.as_deref())?;
    validate_keys(&map)?;
    if c.axis > 2 {
        return Err(Error::Domain(format!("axis must be 0, 1, or 2, got {}", c.axis)));
    }
    ensure_dir(&c.out_dir)?;
    let rotations = parse_f64_list(&c.rotations, "--rotations")?;
    let bias_coefs = parse_f64_list(&c.bias_coefs, "--bias-coefs")?;
    let (model_cfg, model, store, head) = load_model(&c.checkpoint, c.seed)?;
    let head = head.ok_or_else(|| {
        Error::Config("perturb-eval needs a fine-tuned checkpoint with a classifier head".into())
    })?;
    let (raw, labels) = load_raw_dataset(&c.data)?;

    let mut sweep: Vec<(String, Option<Perturbation>)> = vec![("none".into(), None)];
    for &deg in &rotations {
        sweep.push((
            format!("rotation_{deg}"),
            Some(Perturbation::Rotation { degrees: deg, axis: c.axis }),
        ));
    }
    for (i, &coef) in bias_coefs.iter().enumerate() {
        sweep.push((
            format!("bias_{coef}"),
            Some(Perturbation::BiasField { coef, seed: c.seed.wrapping_add(i as u64 + 1) }),
        ));
    }

    let mut csv = String::from("perturbation,accuracy,f1,auc\n");
    let mut table = format!("{:<16} {:>9} {:>9} {:>9}\n", "perturbation", "acc", "f1", "auc");
    let mut rows_json = Vec::new();
    for (name, kind) in &sweep {
        let volumes: Vec<Tensor> = raw
            .iter()
            .map(|v| {
                let distorted = match kind {
                    None => v.clone(),
                    Some(k) => perturb(v, k),
                };
                prepare(&distorted, &model_cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = predict_scores(&store, &model, &head, &volumes)?;
        let m = metrics(&scores, &labels)?;
        let _ = writeln!(csv, "{name},{},{},{}", m.accuracy, m.f1, m.auc);
        let _ = writeln!(
            table,
            "{name:<16} {:>9.3} {:>9.3} {:>9.3}",
            m.accuracy, m.f1, m.auc
        );
        rows_json.push(json!({
            "perturbation": name,
            "accuracy": m.accuracy,
            "f1": m.f1,
            "auc": m.auc,
        }));
    }
    print!("{table}");
    fs::write(c.out_dir.join("perturb_report.csv"), &csv)?;
    fs::write(c.out_dir.join("perturb_report.txt"), &table)?;
    write_json(
        &c.out_dir.join("perturb_summary.json"),
        &json!({
            "checkpoint": c.checkpoint.file_name().unwrap_or_default().to_string_lossy(),
            "volumes": labels.len(),
            "axis": c.axis,
            "seed": c.seed,
            "rows": rows_json,
        }),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn tiny_model_config() -> String {
        "model.enc_depth = 1\nmodel.enc_dim = 8\nmodel.dec_depth = 1\nmodel.dec_dim = 8\n\
         model.patch = 2\nmodel.channels = 1\nmodel.volume = 4\nmodel.n_state = 2\n"
            .to_string()
    }

    #[test]
    fn kv_files_parse_and_reject_unknown_keys() {
        let d = dir();
        let p = d.path().join("c.cfg");
        fs::write(&p, "# comment\nmodel.enc_dim = 24   # tail comment\n\ntrain.epochs=3\n").unwrap();
        let map = parse_kv_file(&p).unwrap();
        assert_eq!(map.get("model.enc_dim").map(String::as_str), Some("24"));
        let cfg = model_config(&map).unwrap();
        assert_eq!(cfg.enc_dim, 24);
        let tc = train_config(&map, TrainMode::Pretrain, 9).unwrap();
        assert_eq!((tc.epochs, tc.seed), (3, 9));

        fs::write(&p, "model.typo = 1\n").unwrap();
        match parse_kv_file(&p) {
            Err(Error::Config(msg)) => assert!(msg.contains("model.typo"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        fs::write(&p, "train.epochs = banana\n").unwrap();
        let map = parse_kv_file(&p).unwrap();
        assert!(train_config(&map, TrainMode::Pretrain, 0).is_err());
        fs::write(&p, "no equals sign\n").unwrap();
        assert!(parse_kv_file(&p).is_err());
    }

    #[test]
    fn synth_writes_volumes_manifest_and_summary() {
        let d = dir();
        let out = d.path().join("ds");
        run(Cli::try_parse_from([
            "voxmamba", "synth", "--out-dir", out.to_str().unwrap(),
            "--count", "6", "--seed", "4",
        ]).unwrap()).unwrap();
        let entries = read_manifest(&out.join("manifest.tsv")).unwrap();
        assert_eq!(entries.len(), 6);
        for e in &entries {
            assert!(out.join(&e.path).exists());
        }
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("synth_summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["count"], 6);
        assert_eq!(summary["class_counts"][0], 3);
    }

    #[test]
    fn synth_same_seed_is_byte_identical() {
        let d = dir();
        let (a, b) = (d.path().join("a"), d.path().join("b"));
        for out in [&a, &b] {
            run(Cli::try_parse_from([
                "voxmamba", "synth", "--out-dir", out.to_str().unwrap(),
                "--count", "4", "--seed", "1",
            ]).unwrap()).unwrap();
        }
        for name in ["manifest.tsv", "synth_summary.json", "vol_0000.mv3d", "vol_0003.mv3d"] {
            assert_eq!(
                fs::read(a.join(name)).unwrap(),
                fs::read(b.join(name)).unwrap(),
                "{name} differs between identical runs"
            );
        }
    }

    #[test]
    fn pipeline_smoke_pretrain_finetune_eval_saliency_perturb() {
        let d = dir();
        let ds = d.path().join("ds");
        let cfgp = d.path().join("tiny.cfg");
        fs::write(
            &cfgp,
            format!(
                "{}train.epochs = 2\ntrain.batch_size = 4\ntrain.warmup_epochs = 1\n\
                 synth.dims = 8\nsynth.channels = 1\n",
                tiny_model_config()
            ),
        )
        .unwrap();
        let cfg = cfgp.to_str().unwrap();
        run(Cli::try_parse_from([
            "voxmamba", "synth", "--out-dir", ds.to_str().unwrap(),
            "--count", "8", "--seed", "2", "--config", cfg,
        ]).unwrap()).unwrap();
        let manifest = ds.join("manifest.tsv");

        let pre = d.path().join("pre");
        run(Cli::try_parse_from([
            "voxmamba", "pretrain", "--data", manifest.to_str().unwrap(),
            "--out-dir", pre.to_str().unwrap(), "--seed", "3", "--config", cfg,
        ]).unwrap()).unwrap();
        let pre_ckpt = pre.join("pretrain.mvck");
        assert!(pre_ckpt.exists() && pre.join("pretrain_loss.csv").exists());

        let ft = d.path().join("ft");
        run(Cli::try_parse_from([
            "voxmamba", "finetune", "--data", manifest.to_str().unwrap(),
            "--init", pre_ckpt.to_str().unwrap(),
            "--out-dir", ft.to_str().unwrap(), "--seed", "3", "--config", cfg,
        ]).unwrap()).unwrap();
        let ft_ckpt = ft.join("finetune.mvck");

        // fine-tuning twice from the same head-bearing checkpoint is rejected
        assert!(run(Cli::try_parse_from([
            "voxmamba", "finetune", "--data", manifest.to_str().unwrap(),
            "--init", ft_ckpt.to_str().unwrap(),
            "--out-dir", ft.to_str().unwrap(), "--config", cfg,
        ]).unwrap()).is_err());

        let ev = d.path().join("ev");
        run(Cli::try_parse_from([
            "voxmamba", "eval", "--data", manifest.to_str().unwrap(),
            "--checkpoint", ft_ckpt.to_str().unwrap(),
            "--out-dir", ev.to_str().unwrap(), "--folds", "2",
        ]).unwrap()).unwrap();
        let csv = fs::read_to_string(ev.join("eval_folds.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4); // header + 2 folds + overall

        // a pretraining checkpoint (no head) still evaluates, at chance level
        let ev2 = d.path().join("ev2");
        run(Cli::try_parse_from([
            "voxmamba", "eval", "--data", manifest.to_str().unwrap(),
            "--checkpoint", pre_ckpt.to_str().unwrap(),
            "--out-dir", ev2.to_str().unwrap(), "--folds", "2",
        ]).unwrap()).unwrap();

        let sal = d.path().join("sal");
        run(Cli::try_parse_from([
            "voxmamba", "saliency", "--checkpoint", ft_ckpt.to_str().unwrap(),
            "--volume", ds.join("vol_0000.mv3d").to_str().unwrap(),
            "--out-dir", sal.to_str().unwrap(),
        ]).unwrap()).unwrap();
        assert!(sal.join("saliency.mv3d").exists());
        assert_eq!(fs::read_dir(&sal).unwrap().filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension().map(|x| x == "pgm") == Some(true)).then_some(p)
        }).count(), 6);
        let vol = read_volume(&sal.join("saliency.mv3d")).unwrap();
        assert_eq!(vol.voxels.shape(), &[1, 4, 4, 4]);

        let pe = d.path().join("pe");
        run(Cli::try_parse_from([
            "voxmamba", "perturb-eval", "--data", manifest.to_str().unwrap(),
            "--checkpoint", ft_ckpt.to_str().unwrap(),
            "--out-dir", pe.to_str().unwrap(),
            "--rotations", "90", "--bias-coefs", "0.4",
        ]).unwrap()).unwrap();
        let report = fs::read_to_string(pe.join("perturb_report.csv")).unwrap();
        assert_eq!(report.lines().count(), 4); // header + none + rotation + bias
        assert!(report.contains("rotation_90") && report.contains("bias_0.4"));

        // perturb-eval refuses a checkpoint without a classifier head
        assert!(run(Cli::try_parse_from([
            "voxmamba", "perturb-eval", "--data", manifest.to_str().unwrap(),
            "--checkpoint", pre_ckpt.to_str().unwrap(),
            "--out-dir", pe.to_str().unwrap(),
        ]).unwrap()).is_err());
    }

    #[test]
    fn bench_table_prints_and_writes() {
        let d = dir();
        let out = d.path().join("bench");
        run(Cli::try_parse_from([
            "voxmamba", "bench", "--seq", "196,3136", "--out-dir", out.to_str().unwrap(),
        ]).unwrap()).unwrap();
        let txt = fs::read_to_string(out.join("scaling.txt")).unwrap();
        assert!(txt.contains("ssm") && txt.contains("attention") && txt.contains("ratio"));
        let csv = fs::read_to_string(out.join("scaling.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(run(Cli::try_parse_from(["voxmamba", "bench", "--seq", "0"]).unwrap()).is_err());
    }
}
