//! `vpseg`: synthetic data, training, streaming inference, evaluation,
//! checks and overlays.
//!
//! Every command that logs writes one JSON object per line. The exit code
//! is 0 on success; `check` also exits non-zero when any suite fails.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vpseg_core::check::run_checks;
use vpseg_core::checkpoint::{load_model, save_model};
use vpseg_core::config::RunConfig;
use vpseg_core::io::{
    contour_overlay, frame_file_name, is_clip_dir, list_pngs, list_subdirs, read_clip_dir, read_frame_png,
    read_mask_png, read_prob_png, write_clip_dir, write_frame_png, write_gray_png, FRAMES_DIR, MASKS_DIR,
};
use vpseg_core::metrics::{evaluate_dataset, format_table};
use vpseg_core::stream::StreamSession;
use vpseg_core::synth::gen_stream;
use vpseg_core::train::{stream_windows, train_with, TrainData};
use vpseg_core::Tensor;

/// Directory of per-frame predictions inside an inference output.
const PREDS_DIR: &str = "preds";
const AUDIT_FILE: &str = "audit.jsonl";

#[derive(Parser)]
#[command(name = "vpseg", version, about = "Streaming video segmentation with causal attention and dynamic references")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic labelled streams as clip directories.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Stream a clip (or a directory of clips) through a checkpoint.
    Infer(InferArgs),
    /// Score predictions against ground-truth masks.
    Eval(EvalArgs),
    /// Run the oracle and property suites.
    Check(CheckArgs),
    /// Draw prediction (green) and ground-truth (red) contours on frames.
    Overlay(OverlayArgs),
}

/// Config file plus flag overrides shared by `gen-data` and `train`.
#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// JSON run config; missing fields take the full-size defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the 64x64, C=8 settings instead of the full-size ones.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    clip_len: Option<usize>,
    #[arg(long)]
    references: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_clips: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    motion: Option<f64>,
    #[arg(long)]
    contrast: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    no_cma: bool,
    #[arg(long)]
    no_multiscale: bool,
    #[arg(long)]
    no_causal: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None if self.desk => RunConfig::desk_scale(),
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag {
                    c.$field = v;
                }
            )*};
        }
        set!(image_size => image_size, base_channels => base_channels, heads => num_heads,
             clip_len => clip_len, references => num_references, lr => learning_rate,
             weight_decay => weight_decay, epochs => epochs, batch_size => batch_size, seed => seed,
             train_clips => train_clips, motion => motion_amplitude, contrast => contrast, noise => noise_sigma);
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        c.ablation.no_cma |= self.no_cma;
        c.ablation.no_multiscale |= self.no_multiscale;
        c.ablation.no_causal |= self.no_causal;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of streams.
    #[arg(long, default_value_t = 4)]
    clips: usize,
    /// Frames per stream.
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Directory of labelled clip directories; synthetic clips when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSONL training log; stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip directory, bare directory of frame PNGs, or directory of clips.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep both references at frame 0.
    #[arg(long)]
    no_dmr: bool,
    /// Use the semantic slot for both reference positions.
    #[arg(long)]
    single_source: bool,
    #[arg(long)]
    semantic_cooldown: Option<usize>,
    #[arg(long)]
    confidence_cooldown: Option<usize>,
    /// Require the checkpoint to have been trained without aggregation.
    #[arg(long)]
    no_cma: bool,
    /// Require a single-scale checkpoint.
    #[arg(long)]
    no_multiscale: bool,
    /// Require a checkpoint trained without the causal mask.
    #[arg(long)]
    no_causal: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction directory (an `infer` output or bare PNGs).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth clip directory, bare mask directory, or directory of clips.
    #[arg(long)]
    gt: PathBuf,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
    /// Row label in the table.
    #[arg(long, default_value = "model")]
    name: String,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Clip directory or bare directory of frame PNGs.
    #[arg(long)]
    frames: PathBuf,
    /// Optional ground truth; a clip directory's masks are used by default.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", json!({ "event": "error", "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Infer(a) => infer(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Check(a) => return check(a),
        Command::Overlay(a) => overlay(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    if a.frames == 0 {
        bail!("--frames must be >= 1");
    }
    for i in 0..a.clips {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let synth = cfg.synth_config(seed);
        let (frames, masks): (Vec<_>, Vec<_>) = gen_stream(&synth, a.frames)?.unzip();
        let dir = a.out.join(format!("clip_{i:04}"));
        write_clip_dir(&dir, &frames, &masks, &json!({ "synth": synth, "frames": a.frames }))?;
        println!("{}", json!({ "event": "clip", "dir": dir, "seed": seed, "frames": a.frames }));
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(log, "{}", json!({ "event": "config", "config": cfg }))?;
    let clips = match &a.data {
        Some(dir) => {
            let mut clips = Vec::new();
            for d in clip_dirs(dir)? {
                let files = read_clip_dir(&d)?;
                let masks = files.masks.with_context(|| format!("{} has no masks", d.display()))?;
                clips.extend(stream_windows(&files.frames, &masks, cfg.clip_len, cfg.num_references)?);
            }
            Some(clips)
        }
        None => None,
    };
    let data = match &clips {
        Some(c) => TrainData::Clips(c),
        None => TrainData::Synthetic,
    };
    let summary = train_with(&cfg, data, &mut log)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_model(&summary.model, &a.out)?;
    writeln!(
        log,
        "{}",
        json!({ "event": "done", "steps": summary.steps, "checkpoint": a.out, "last": summary.last })
    )?;
    log.flush()?;
    Ok(())
}

/// Clip directories under `dir`, or `dir` itself when it is one.
fn clip_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if is_clip_dir(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let dirs: Vec<PathBuf> = list_subdirs(dir)?.into_iter().filter(|d| is_clip_dir(d)).collect();
    if dirs.is_empty() {
        bail!("{} holds no clip directories", dir.display());
    }
    Ok(dirs)
}

fn read_frames(dir: &Path) -> Result<Vec<Tensor>> {
    let dir = if is_clip_dir(dir) { dir.join(FRAMES_DIR) } else { dir.to_path_buf() };
    let paths = list_pngs(&dir)?;
    if paths.is_empty() {
        bail!("no frame PNGs in {}", dir.display());
    }
    Ok(paths.iter().map(|p| read_frame_png(p)).collect::<vpseg_core::Result<_>>()?)
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mc = &model.config;
    for (want, have, flag) in [
        (a.no_cma, !mc.use_cma, "--no-cma"),
        (a.no_multiscale, !mc.multiscale, "--no-multiscale"),
        (a.no_causal, !mc.causal, "--no-causal"),
    ] {
        if want && !have {
            bail!("{flag} given but the checkpoint was not trained that way");
        }
    }
    let mut opts = RunConfig::default().stream_options();
    opts.no_dmr = a.no_dmr;
    opts.single_source = a.single_source;
    if let Some(c) = a.semantic_cooldown {
        opts.semantic_cooldown = c;
    }
    if let Some(c) = a.confidence_cooldown {
        opts.confidence_cooldown = c;
    }
    // a directory of clips maps to one output directory per clip
    let jobs: Vec<(PathBuf, PathBuf)> = if is_clip_dir(&a.input) || !list_pngs(&a.input)?.is_empty() {
        vec![(a.input.clone(), a.out.clone())]
    } else {
        clip_dirs(&a.input)?
            .into_iter()
            .map(|d| {
                let name = d.file_name().expect("sub-directory").to_owned();
                (d, a.out.join(name))
            })
            .collect()
    };
    for (input, out) in jobs {
        let frames = read_frames(&input)?;
        std::fs::create_dir_all(out.join(PREDS_DIR))?;
        let mut audit = BufWriter::new(File::create(out.join(AUDIT_FILE))?);
        let mut session = StreamSession::new(&model, opts)?;
        let mut total_ms = 0.0;
        for f in &frames {
            let r = session.push(f)?;
            write_gray_png(&out.join(PREDS_DIR).join(frame_file_name(r.t)), &r.prob)?;
            let ms = r.latency.as_secs_f64() * 1e3;
            total_ms += ms;
            let line = json!({
                "t": r.t,
                "sem_frame": r.sem_frame,
                "conf_frame": r.conf_frame,
                "latency_ms": ms,
                "dmr": r.audit,
            });
            writeln!(audit, "{line}")?;
        }
        audit.flush()?;
        let n = frames.len() as f64;
        println!(
            "{}",
            json!({
                "event": "stream",
                "input": input,
                "out": out,
                "frames": frames.len(),
                "mean_latency_ms": total_ms / n,
                "fps": 1e3 * n / total_ms.max(f64::MIN_POSITIVE),
            })
        );
    }
    Ok(())
}

/// `preds/` of an inference output, `masks/` of a clip directory (ground
/// truth scored as a prediction), or the directory itself.
fn pred_dir(dir: &Path) -> PathBuf {
    [dir.join(PREDS_DIR), dir.join(MASKS_DIR)]
        .into_iter()
        .find(|p| p.is_dir())
        .unwrap_or_else(|| dir.to_path_buf())
}

fn mask_dir(dir: &Path) -> PathBuf {
    let p = dir.join(MASKS_DIR);
    if p.is_dir() {
        p
    } else {
        dir.to_path_buf()
    }
}

/// Paired `(prediction, mask)` frames of one clip.
fn load_pairs(pred: &Path, gt: &Path) -> Result<Vec<(Tensor, Tensor)>> {
    let preds = list_pngs(&pred_dir(pred))?;
    let masks = list_pngs(&mask_dir(gt))?;
    if preds.len() != masks.len() || preds.is_empty() {
        bail!(
            "{} predictions in {} but {} masks in {}",
            preds.len(),
            pred.display(),
            masks.len(),
            gt.display()
        );
    }
    preds
        .iter()
        .zip(&masks)
        .map(|(p, m)| Ok((read_prob_png(p)?, read_mask_png(m)?)))
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let single = is_clip_dir(&a.gt) || !list_pngs(&a.gt)?.is_empty();
    let clips: Vec<Vec<(Tensor, Tensor)>> = if single {
        vec![load_pairs(&a.pred, &a.gt)?]
    } else {
        clip_dirs(&a.gt)?
            .iter()
            .map(|g| load_pairs(&a.pred.join(g.file_name().expect("sub-directory")), g))
            .collect::<Result<_>>()?
    };
    let report = evaluate_dataset(clips)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", format_table(&[(a.name, report.metrics)]));
    }
    Ok(())
}

fn check(a: CheckArgs) -> Result<ExitCode> {
    let report = run_checks(a.seed);
    for s in &report.suites {
        println!("{}", serde_json::to_string(s)?);
    }
    println!("{}", json!({ "event": "summary", "passed": report.passed }));
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn overlay(a: OverlayArgs) -> Result<()> {
    let frames = read_frames(&a.frames)?;
    let preds = list_pngs(&pred_dir(&a.pred))?;
    if preds.len() != frames.len() {
        bail!("{} predictions for {} frames", preds.len(), frames.len());
    }
    let gt_dir = a.gt.clone().or_else(|| is_clip_dir(&a.frames).then(|| a.frames.clone()));
    let masks = match &gt_dir {
        Some(d) if mask_dir(d).is_dir() => {
            let m = list_pngs(&mask_dir(d))?;
            if m.len() != frames.len() {
                bail!("{} masks for {} frames", m.len(), frames.len());
            }
            Some(m.iter().map(|p| read_mask_png(p)).collect::<vpseg_core::Result<Vec<_>>>()?)
        }
        _ => None,
    };
    std::fs::create_dir_all(&a.out)?;
    for (i, (f, p)) in frames.iter().zip(&preds).enumerate() {
        let pred = read_prob_png(p)?;
        let img = contour_overlay(f, &pred, masks.as_ref().map(|m| &m[i]))?;
        write_frame_png(&a.out.join(frame_file_name(i)), &img)?;
    }
    println!("{}", json!({ "event": "overlay", "out": a.out, "frames": frames.len() }));
    Ok(())
}
