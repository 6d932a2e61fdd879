//! chirpscope — command-line workbench around the chirp-spectrogram ViT.
//!
//! Subcommands cover the whole workflow: `gen` synthesizes a labeled
//! dataset, `train` fits the regressor, `ablate` sweeps single-head
//! zero-ablations, `attn` dumps per-head attention overlays for one image,
//! `score` classifies heads by region semanticity, and `pipeline` chains
//! all five with desk-scale defaults under one output directory.
//!
//! Every subcommand is deterministic given its inputs and flags, and
//! re-running with identical arguments rewrites identical bytes. Errors
//! exit nonzero with a single `error: …` line on stderr.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use chirpscope_core::chirpgen::{load_manifest, make_dataset, GenConfig, GenRanges, Manifest};
use chirpscope_core::interp_ablation::{
    export_heatmap, export_histograms, export_summary, sweep_with_histograms,
};
use chirpscope_core::interp_attention::{dump_all, Aggregation};
use chirpscope_core::raster::Canvas;
use chirpscope_core::semanticity::{export_profiles, profile_heads, HeadLabel};
use chirpscope_core::train::{
    prepare, split_indices, train, write_loss_curve, OptimizerKind, TrainConfig, TrainScope,
};
use chirpscope_core::vit::{
    load_checkpoint, save_checkpoint, BlockStyle, Checkpoint, FfnActivation, ViTConfig,
};

/// Histogram bin count for predicted start times (fixed [0,1] domain).
const START_TIME_BINS: usize = 20;
/// Overlay blend weight used by `pipeline` and the score gallery.
const DEFAULT_ALPHA: f64 = 0.5;
/// Concentration threshold used by `pipeline`'s scoring stage.
const DEFAULT_TAU: f64 = 0.6;
/// Training epochs used by `pipeline` when `--epochs` is not given.
const PIPELINE_EPOCHS: usize = 6;

const CONFIG_SCHEMA: &str = "\
Config file: flat `key = value` lines; `#` comments and blank lines are
ignored. Unknown keys are errors. Every key is optional and overrides the
built-in desk default; flags override the file.

  model keys    image_size, channels, patch_size, width, layers, heads,
                ffn_dim, head_hidden, out_dim, lora_rank, lora_alpha,
                block_style (post_norm|pre_norm),
                ffn_activation (gelu|relu), ln_eps
  training keys batch_size, epochs, learning_rate,
                optimizer (adam|sgd), seed,
                trainable (lora_plus_head|all)";

const RANGES_SCHEMA: &str = "\
Ranges file: flat `key = value` lines; `#` comments and blank lines are
ignored. Unknown keys are errors. Keys set the sampling interval endpoints
for generated chirps and override the built-in defaults:

  start_time_min/_max   duration_min/_max   f_start_min/_max
  f_end_min/_max        amplitude_min/_max  noise_sigma_min/_max";

#[derive(Parser)]
#[command(
    name = "chirpscope",
    version,
    about = "Chirp-spectrogram ViT workbench: generate, train, ablate, inspect attention, score heads",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled chirp-spectrogram dataset (images + manifest).
    #[command(after_help = RANGES_SCHEMA)]
    Gen(GenArgs),
    /// Train the ViT regressor on a generated dataset.
    #[command(after_help = CONFIG_SCHEMA)]
    Train(TrainArgs),
    /// Sweep single-head zero-ablations on the held-out validation split.
    Ablate(AblateArgs),
    /// Dump per-head attention maps (CSV) and overlays (PNG) for one image.
    Attn(AttnArgs),
    /// Classify every head as monosemantic (task/distractor) or polysemantic.
    Score(ScoreArgs),
    /// Run gen → train → ablate → attn → score with desk defaults.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of images to generate.
    #[arg(long)]
    count: usize,
    /// Master seed; every image derives its own sub-seed from (seed, index).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for images and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Optional sampling-range overrides (flat key = value file).
    #[arg(long)]
    ranges_file: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (or explicit manifest path) from `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Optional flat key = value config file; defaults are the desk config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Epoch count; overrides the config file.
    #[arg(long)]
    epochs: Option<usize>,
    /// Where to write the trained checkpoint. `loss_curve.csv` is written
    /// next to it.
    #[arg(long)]
    out_ckpt: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Trained checkpoint from `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; the sweep evaluates the validation split.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for heatmap/histograms/summary artifacts.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AttnArgs {
    /// Trained checkpoint from `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; required with --image-index.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Index into the dataset manifest (needs --data). Mutually exclusive
    /// with --image-path.
    #[arg(long)]
    image_index: Option<usize>,
    /// Path to a PNG to inspect. Mutually exclusive with --image-index.
    #[arg(long)]
    image_path: Option<PathBuf>,
    /// Overlay blend weight in [0,1]; 0 reproduces the input image exactly.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Output directory for layer{l}_head{h}.{csv,png}.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Trained checkpoint from `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory to profile over (all images).
    #[arg(long)]
    data: PathBuf,
    /// Concentration threshold in (0.5, 1) exclusive.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Output directory for profiles.json and the overlay gallery.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Master seed for generation and training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Root output directory; stages write to data/, ckpt/, ablation/,
    /// attention/, semanticity/.
    #[arg(long)]
    out_dir: PathBuf,
    /// Dataset size.
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Training epochs (default: desk-scale preset).
    #[arg(long)]
    epochs: Option<usize>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                print!("{e}");
                return;
            }
            _ => {
                // Usage errors also go out as a single machine-parsable line.
                let text = e.render().to_string();
                let mut parts: Vec<&str> = Vec::new();
                for line in text.lines() {
                    let t = line.trim();
                    if t.starts_with("Usage:") {
                        break;
                    }
                    if !t.is_empty() {
                        parts.push(t);
                    }
                }
                let joined = parts.join(" ");
                let msg = joined.strip_prefix("error: ").unwrap_or(&joined);
                eprintln!("error: {msg} (run with --help for usage)");
                std::process::exit(2);
            }
        },
    };
    if let Err(e) = run(cli) {
        let msg = format!("{e:#}").replace('\n', "; ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Attn(a) => cmd_attn(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::Pipeline(a) => cmd_pipeline(a),
    }
}

/// Honors CHIRPSCOPE_WORKERS; otherwise the pool defaults to available
/// parallelism. All module reductions are index-ordered, so outputs do not
/// depend on the worker count.
fn init_workers() -> Result<()> {
    match std::env::var("CHIRPSCOPE_WORKERS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .map_err(|_| anyhow!("CHIRPSCOPE_WORKERS must be a positive integer, got {raw:?}"))?;
            if n == 0 {
                bail!("CHIRPSCOPE_WORKERS must be ≥ 1");
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("failed to configure worker pool")
        }
    }
}

fn open_manifest(path: &Path) -> Result<Manifest> {
    load_manifest(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

// ---------------------------------------------------------------------------
// Flat key = value files
// ---------------------------------------------------------------------------

/// Splits one non-comment line into a trimmed (key, value) pair.
fn split_kv(line: &str) -> Result<(&str, &str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| anyhow!("expected `key = value`, got {line:?}"))?;
    Ok((k.trim(), v.trim()))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("bad value for {key}: {value:?}"))
}

/// Applies a flat key = value document over the desk defaults.
fn parse_config_file(path: &Path) -> Result<(ViTConfig, TrainConfig)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut vit = ViTConfig::desk_default();
    let mut tc = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        apply_config_key(&mut vit, &mut tc, line)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
    }
    vit.validate()?;
    tc.validate()?;
    Ok((vit, tc))
}

fn apply_config_key(vit: &mut ViTConfig, tc: &mut TrainConfig, line: &str) -> Result<()> {
    let (key, value) = split_kv(line)?;
    match key {
        "image_size" => vit.image_size = parse_num(key, value)?,
        "channels" => vit.channels = parse_num(key, value)?,
        "patch_size" => vit.patch_size = parse_num(key, value)?,
        "width" => vit.width = parse_num(key, value)?,
        "layers" => vit.layers = parse_num(key, value)?,
        "heads" => vit.heads = parse_num(key, value)?,
        "ffn_dim" => vit.ffn_dim = parse_num(key, value)?,
        "head_hidden" => vit.head_hidden = parse_num(key, value)?,
        "out_dim" => vit.out_dim = parse_num(key, value)?,
        "lora_rank" => vit.lora_rank = parse_num(key, value)?,
        "lora_alpha" => vit.lora_alpha = parse_num(key, value)?,
        "ln_eps" => vit.ln_eps = parse_num(key, value)?,
        "block_style" => {
            vit.block_style = match value {
                "post_norm" => BlockStyle::PostNorm,
                "pre_norm" => BlockStyle::PreNorm,
                other => bail!("unknown block_style {other:?} (post_norm|pre_norm)"),
            }
        }
        "ffn_activation" => {
            vit.ffn_activation = match value {
                "gelu" => FfnActivation::Gelu,
                "relu" => FfnActivation::Relu,
                other => bail!("unknown ffn_activation {other:?} (gelu|relu)"),
            }
        }
        "batch_size" => tc.batch_size = parse_num(key, value)?,
        "epochs" => tc.epochs = parse_num(key, value)?,
        "learning_rate" => tc.learning_rate = parse_num(key, value)?,
        "seed" => tc.seed = parse_num(key, value)?,
        "optimizer" => {
            tc.optimizer = match value {
                "adam" => OptimizerKind::Adam,
                "sgd" => OptimizerKind::Sgd,
                other => bail!("unknown optimizer {other:?} (adam|sgd)"),
            }
        }
        "trainable" => {
            tc.trainable = match value {
                "lora_plus_head" => TrainScope::LoraPlusHead,
                "all" => TrainScope::All,
                other => bail!("unknown trainable scope {other:?} (lora_plus_head|all)"),
            }
        }
        other => bail!("unknown config key {other:?}"),
    }
    Ok(())
}

/// Applies a flat key = value document over the default sampling ranges.
fn parse_ranges_file(path: &Path) -> Result<GenRanges> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading ranges file {}", path.display()))?;
    let mut r = GenRanges::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        apply_ranges_key(&mut r, line)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
    }
    for (name, (lo, hi)) in [
        ("start_time", r.start_time),
        ("duration", r.duration),
        ("f_start", r.f_start),
        ("f_end", r.f_end),
        ("amplitude", r.amplitude),
        ("noise_sigma", r.noise_sigma),
    ] {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            bail!("range {name} must satisfy min ≤ max and be finite, got ({lo}, {hi})");
        }
    }
    Ok(r)
}

fn apply_ranges_key(r: &mut GenRanges, line: &str) -> Result<()> {
    let (key, value) = split_kv(line)?;
    let v: f64 = parse_num(key, value)?;
    match key {
        "start_time_min" => r.start_time.0 = v,
        "start_time_max" => r.start_time.1 = v,
        "duration_min" => r.duration.0 = v,
        "duration_max" => r.duration.1 = v,
        "f_start_min" => r.f_start.0 = v,
        "f_start_max" => r.f_start.1 = v,
        "f_end_min" => r.f_end.0 = v,
        "f_end_max" => r.f_end.1 = v,
        "amplitude_min" => r.amplitude.0 = v,
        "amplitude_max" => r.amplitude.1 = v,
        "noise_sigma_min" => r.noise_sigma.0 = v,
        "noise_sigma_max" => r.noise_sigma.1 = v,
        other => bail!("unknown ranges key {other:?}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen(a: GenArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut gen = GenConfig::default();
    if let Some(p) = &a.ranges_file {
        gen.ranges = parse_ranges_file(p)?;
    }
    let manifest = make_dataset(a.count, a.seed, &gen, &a.out)?;
    println!(
        "gen: {} images + manifest under {} in {:.1}s",
        manifest.entries.len(),
        a.out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let manifest = open_manifest(&a.data)?;
    let (vit, mut tc) = match &a.config {
        Some(p) => parse_config_file(p)?,
        None => (ViTConfig::desk_default(), TrainConfig::default()),
    };
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    run_training(&manifest, &vit, &tc, &a.out_ckpt)?;
    Ok(())
}

/// Trains, prints one line per epoch, and writes the checkpoint plus
/// `loss_curve.csv` beside it.
fn run_training(
    manifest: &Manifest,
    vit: &ViTConfig,
    tc: &TrainConfig,
    out_ckpt: &Path,
) -> Result<()> {
    let t0 = Instant::now();
    let result = train(manifest, vit, tc)?;
    for s in &result.curve {
        println!(
            "train: epoch {} train_mse={:.6e} val_mse={:.6e}",
            s.epoch, s.train_mse, s.val_mse
        );
    }
    if let Some(dir) = out_ckpt.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    save_checkpoint(out_ckpt, vit, &result.norm, &result.params)?;
    let curve_path = out_ckpt
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .join("loss_curve.csv");
    write_loss_curve(&curve_path, &result.curve)?;
    println!(
        "train: {} epochs in {:.1}s → {} (+ {})",
        result.curve.len().saturating_sub(1),
        t0.elapsed().as_secs_f64(),
        out_ckpt.display(),
        curve_path.display()
    );
    Ok(())
}

/// The validation indices of a manifest, with a clear error when the split
/// would be empty.
fn val_split(manifest: &Manifest) -> Result<Vec<usize>> {
    let (_, val) = split_indices(manifest.entries.len());
    if val.is_empty() {
        bail!("dataset too small: no validation images (need ≥ 2 total)");
    }
    Ok(val)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let t0 = Instant::now();
    let ckpt = open_checkpoint(&a.ckpt)?;
    let manifest = open_manifest(&a.data)?;
    let val = val_split(&manifest)?;
    let data = prepare(&manifest, &ckpt.config, &ckpt.norm, &val)?;
    let (report, hists) = sweep_with_histograms(&ckpt, &data, START_TIME_BINS)?;
    export_heatmap(&report, &a.out_dir)?;
    export_histograms(&hists, &a.out_dir)?;
    export_summary(&report, &a.out_dir)?;
    println!(
        "ablate: baseline val MSE {:.6e}; {}×{} sweep on {} images → {} in {:.1}s",
        report.baseline_loss,
        ckpt.config.layers,
        ckpt.config.heads,
        val.len(),
        a.out_dir.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_attn(a: AttnArgs) -> Result<()> {
    let ckpt = open_checkpoint(&a.ckpt)?;
    let img = match (a.image_index, &a.image_path) {
        (Some(_), Some(_)) | (None, None) => {
            bail!("pass exactly one of --image-index or --image-path")
        }
        (Some(i), None) => {
            let data = a
                .data
                .as_ref()
                .ok_or_else(|| anyhow!("--image-index requires --data"))?;
            let manifest = open_manifest(data)?;
            if i >= manifest.entries.len() {
                bail!(
                    "--image-index {i} out of range (dataset has {} images)",
                    manifest.entries.len()
                );
            }
            manifest.load_image(i)?
        }
        (None, Some(p)) => {
            Canvas::read_png(p).with_context(|| format!("reading image {}", p.display()))?
        }
    };
    dump_all(&ckpt, &img, a.alpha, Aggregation::ColumnMean, &a.out_dir)?;
    println!(
        "attn: {}×{} head maps (alpha={}) → {}",
        ckpt.config.layers,
        ckpt.config.heads,
        a.alpha,
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let t0 = Instant::now();
    let ckpt = open_checkpoint(&a.ckpt)?;
    let manifest = open_manifest(&a.data)?;
    let profiles = profile_heads(&ckpt, &manifest, None, a.tau)?;
    export_profiles(&ckpt, &manifest, &profiles, DEFAULT_ALPHA, &a.out_dir)?;
    print_score_summary(&profiles, manifest.entries.len(), a.tau, &a.out_dir, t0);
    Ok(())
}

fn print_score_summary(
    profiles: &[chirpscope_core::semanticity::HeadProfile],
    images: usize,
    tau: f64,
    out_dir: &Path,
    t0: Instant,
) {
    let (mut task, mut distractor, mut poly) = (0usize, 0usize, 0usize);
    for p in profiles {
        match p.label {
            HeadLabel::MonosemanticTask => task += 1,
            HeadLabel::MonosemanticDistractor(_) => distractor += 1,
            HeadLabel::Polysemantic => poly += 1,
        }
    }
    println!(
        "score: {} heads over {} images (tau={tau}): {task} task / {distractor} distractor / {poly} polysemantic → {} in {:.1}s",
        profiles.len(),
        images,
        out_dir.display(),
        t0.elapsed().as_secs_f64()
    );
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let t0 = Instant::now();
    let data_dir = a.out_dir.join("data");
    let ckpt_dir = a.out_dir.join("ckpt");

    let gen = GenConfig::default();
    let manifest = make_dataset(a.count, a.seed, &gen, &data_dir)?;
    println!(
        "pipeline[gen]: {} images in {:.1}s",
        manifest.entries.len(),
        t0.elapsed().as_secs_f64()
    );

    let vit = ViTConfig::desk_default();
    let tc = TrainConfig {
        seed: a.seed,
        epochs: a.epochs.unwrap_or(PIPELINE_EPOCHS),
        ..TrainConfig::default()
    };
    let ckpt_path = ckpt_dir.join("model.ckpt");
    run_training(&manifest, &vit, &tc, &ckpt_path)?;
    // Reload from disk so downstream stages see exactly what a standalone
    // invocation of each subcommand would.
    let ckpt = load_checkpoint(&ckpt_path)?;

    let ts = Instant::now();
    let val = val_split(&manifest)?;
    let data = prepare(&manifest, &ckpt.config, &ckpt.norm, &val)?;
    let (report, hists) = sweep_with_histograms(&ckpt, &data, START_TIME_BINS)?;
    let abl_dir = a.out_dir.join("ablation");
    export_heatmap(&report, &abl_dir)?;
    export_histograms(&hists, &abl_dir)?;
    export_summary(&report, &abl_dir)?;
    println!(
        "pipeline[ablate]: baseline val MSE {:.6e} over {} images in {:.1}s",
        report.baseline_loss,
        val.len(),
        ts.elapsed().as_secs_f64()
    );

    let ts = Instant::now();
    let img = manifest.load_image(val[0])?;
    dump_all(
        &ckpt,
        &img,
        DEFAULT_ALPHA,
        Aggregation::ColumnMean,
        &a.out_dir.join("attention"),
    )?;
    println!(
        "pipeline[attn]: maps for validation image {} in {:.1}s",
        val[0],
        ts.elapsed().as_secs_f64()
    );

    let ts = Instant::now();
    let profiles = profile_heads(&ckpt, &manifest, Some(&val), DEFAULT_TAU)?;
    let sem_dir = a.out_dir.join("semanticity");
    export_profiles(&ckpt, &manifest, &profiles, DEFAULT_ALPHA, &sem_dir)?;
    print_score_summary(&profiles, val.len(), DEFAULT_TAU, &sem_dir, ts);

    println!(
        "pipeline: done in {:.1}s; artifacts under {}",
        t0.elapsed().as_secs_f64(),
        a.out_dir.display()
    );
    Ok(())
}
