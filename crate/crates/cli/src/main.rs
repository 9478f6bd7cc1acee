use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use serde_json::Value;

use vfi_core::config::{PipelineConfig, Split};
use vfi_core::denoiser::Denoiser;
use vfi_core::pipeline::{repeat_previous_keyframe, run_ablation, run_inference, InferenceReport};
use vfi_core::scheduler::{error_csv, max_error, simulate_error, ErrorModel, GenerationPlan, PlanMode};
use vfi_core::train::{prepare_dit_example, DitTrainer, VaeTrainer};
use vfi_core::vae::ToyVae;
use vfi_core::video::{self, load_video, manifest_path, save_video, save_video_with_seed};
use vfi_core::FrameSequence;

#[derive(Parser, Debug)]
#[command(name = "vfi", version, about = "Chunked latent flow-matching video frame interpolation")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// Pipeline configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set training.vae.steps=100`.
    #[arg(long = "set", value_name = "PATH=JSON")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Causal,
    SkipConcat,
}

impl From<ModeArg> for PlanMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Causal => PlanMode::Causal,
            ModeArg::SkipConcat => PlanMode::SkipConcat,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train and eval corpora.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy codec on `<corpus>/train`.
    TrainVae {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/vae_state` when present.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Train the denoiser on latents of `<corpus>/train` from a frozen codec.
    TrainDit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Keep every `s`-th frame of a video, producing an interpolation input.
    Downsample {
        /// Video manifest (file or directory).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        s: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate a low-frame-rate video.
    Interpolate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Low-frame-rate manifest (file or directory).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        dit: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth manifest for per-frame PSNR.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        s: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sampling-order, decoder and conditioning ablations on `<corpus>/eval`.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        dit: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a generation plan as JSON.
    Plan {
        #[arg(long)]
        chunks: usize,
        #[arg(long, value_enum, default_value = "skip-concat")]
        mode: ModeArg,
        #[arg(long, default_value_t = 2)]
        period: usize,
    },
    /// Propagate per-chunk errors through both plans and write a CSV per plan.
    SimulateError {
        #[arg(long)]
        chunks: usize,
        #[arg(long, default_value_t = 1.0)]
        fresh: f64,
        #[arg(long)]
        transfer: f64,
        #[arg(long, default_value_t = 2)]
        period: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Usage and configuration problems exit with 1, everything else with 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<vfi_core::Error> for Failure {
    fn from(e: vfi_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| anyhow!("`{}` is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*key) {
                bail!("unknown config field `{path}`");
            }
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*key).ok_or_else(|| anyhow!("unknown config field `{path}`"))?;
    }
    unreachable!("split yields at least one part")
}

fn load_config(args: &ConfigArgs, extra: &[(&str, Value)]) -> std::result::Result<PipelineConfig, Failure> {
    let usage = |e: anyhow::Error| Failure::Usage(e);
    let base = match &args.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())).map_err(usage)?,
        None => "{}".to_string(),
    };
    let parsed: PipelineConfig =
        serde_json::from_str(&base).map_err(|e| usage(anyhow!("config parse: {e}")))?;
    let mut value = serde_json::to_value(&parsed).expect("config serializes");
    for o in &args.overrides {
        let (path, raw) = o.split_once('=').ok_or_else(|| usage(anyhow!("override `{o}` is not PATH=VALUE")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, path, v).map_err(usage)?;
    }
    for (path, v) in extra {
        set_path(&mut value, path, v.clone()).map_err(usage)?;
    }
    let cfg = PipelineConfig::from_json(&value.to_string()).map_err(|e| usage(e.into()))?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Clip directories under `dir`, sorted by name.
fn load_corpus(dir: &Path) -> anyhow::Result<Vec<FrameSequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(video::MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| load_video(&d.join(video::MANIFEST_FILE)).with_context(|| format!("loading {}", d.display())))
        .collect()
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData { cfg, out } => gen_data(&load_config(&cfg, &[])?, &out),
        Command::TrainVae { cfg, corpus, out, resume, checkpoint_every } => {
            train_vae(&load_config(&cfg, &[])?, &corpus, &out, resume, checkpoint_every)
        }
        Command::TrainDit { cfg, corpus, vae, out, resume, checkpoint_every } => {
            train_dit(&load_config(&cfg, &[])?, &corpus, &vae, &out, resume, checkpoint_every)
        }
        Command::Interpolate { cfg, input, vae, dit, out, gt, mode, s, seed } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(("inference.mode", serde_json::to_value(PlanMode::from(m)).expect("enum serializes")));
            }
            if let Some(s) = s {
                extra.push(("inference.s", Value::from(s)));
            }
            if let Some(seed) = seed {
                extra.push(("inference.seed", Value::from(seed)));
            }
            interpolate(&load_config(&cfg, &extra)?, &input, &vae, &dit, &out, gt.as_deref())
        }
        Command::Downsample { input, s, out } => {
            let video = load_video(&manifest_path(&input)).with_context(|| format!("loading {}", input.display()))?;
            let lq = video::downsample_temporal(&video, s).map_err(|e| Failure::Usage(e.into()))?;
            save_video(&lq, &out)?;
            info!("wrote {} of {} frames to {}", lq.len(), video.len(), out.display());
            Ok(())
        }
        Command::Ablate { cfg, corpus, vae, dit, out } => ablate(&load_config(&cfg, &[])?, &corpus, &vae, &dit, &out),
        Command::Plan { chunks, mode, period } => {
            let plan = GenerationPlan::build(mode.into(), chunks, period).map_err(|e| Failure::Usage(e.into()))?;
            println!("{}", plan.to_json());
            Ok(())
        }
        Command::SimulateError { chunks, fresh, transfer, period, out } => {
            let model = ErrorModel { fresh, transfer };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (name, mode) in [("causal", PlanMode::Causal), ("skip_concat", PlanMode::SkipConcat)] {
                let plan = GenerationPlan::build(mode, chunks, period).map_err(|e| Failure::Usage(e.into()))?;
                let errors = simulate_error(&plan, &model).map_err(|e| Failure::Usage(e.into()))?;
                let path = out.join(format!("{name}.csv"));
                fs::write(&path, error_csv(&errors)).with_context(|| format!("writing {}", path.display()))?;
                println!("{name}: max error {}", max_error(&errors));
            }
            Ok(())
        }
    }
}

fn gen_data(cfg: &PipelineConfig, out: &Path) -> CmdResult {
    let d = &cfg.data;
    for split in [Split::Train, Split::Eval] {
        let (name, count) = (split.name(), d.count(split));
        let dir = out.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        if count == 0 {
            warn!("{name} corpus is empty (count = 0)");
        }
        for i in 0..count {
            let clip = d.clip(split, i)?;
            save_video_with_seed(&clip, &dir.join(format!("clip_{i:04}")), Some(d.clip_seed(split, i)))?;
        }
        info!("wrote {count} {name} clips to {}", dir.display());
    }
    write_json(&out.join("config.json"), cfg)?;
    Ok(())
}

fn train_vae(cfg: &PipelineConfig, corpus: &Path, out: &Path, resume: bool, every: u64) -> CmdResult {
    let clips = load_corpus(&corpus.join("train"))?;
    if clips.is_empty() {
        return Err(Failure::Runtime(anyhow!("no training clips under {}", corpus.join("train").display())));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let state = out.join("vae_state");
    let mut trainer = if resume && state.with_extension("json").is_file() {
        let t = VaeTrainer::resume(&state)?;
        info!("resuming codec training at step {}", t.step);
        t
    } else {
        VaeTrainer::new(cfg.codec, cfg.training.vae)?
    };
    let start = Instant::now();
    trainer.run(&clips, |t| {
        if t.step % 100 == 0 {
            info!("codec step {} l1 {:.5} ({:.0}s)", t.step, t.trace.last().map_or(0.0, |r| r.loss.l1), start.elapsed().as_secs_f64());
        }
        if every > 0 && t.step % every == 0 {
            t.save(&state)?;
        }
        Ok(())
    })?;
    trainer.save(&state)?;
    trainer.fit_norm(&clips)?;
    trainer.vae.save(&out.join("vae"))?;
    trainer.write_trace(&out.join("vae_trace.csv"))?;
    info!("codec checkpoint written to {}", out.join("vae").display());
    Ok(())
}

fn train_dit(cfg: &PipelineConfig, corpus: &Path, vae_path: &Path, out: &Path, resume: bool, every: u64) -> CmdResult {
    let vae = ToyVae::load(vae_path).with_context(|| format!("loading codec checkpoint {}", vae_path.display()))?;
    if vae.cfg != cfg.codec {
        return Err(Failure::Usage(anyhow!("codec checkpoint config differs from the pipeline config")));
    }
    let clips = load_corpus(&corpus.join("train"))?;
    if clips.is_empty() {
        return Err(Failure::Runtime(anyhow!("no training clips under {}", corpus.join("train").display())));
    }
    let tiles = cfg.tile_plan()?;
    let examples = clips
        .iter()
        .map(|c| prepare_dit_example(c, &vae, &tiles, cfg.chunks.len, cfg.training.vae.s_range))
        .collect::<vfi_core::Result<Vec<_>>>()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let state = out.join("dit_state");
    let mut trainer = if resume && state.with_extension("json").is_file() {
        let t = DitTrainer::resume(&state)?;
        info!("resuming denoiser training at step {}", t.step);
        t
    } else {
        DitTrainer::new(cfg.denoiser, cfg.training.dit)?
    };
    let start = Instant::now();
    trainer.run(&examples, |t| {
        if t.step % 100 == 0 {
            info!("denoiser step {} loss {:.5} ({:.0}s)", t.step, t.trace.last().map_or(0.0, |r| r.loss), start.elapsed().as_secs_f64());
        }
        if every > 0 && t.step % every == 0 {
            t.save(&state)?;
        }
        Ok(())
    })?;
    trainer.save(&state)?;
    trainer.model.save(&out.join("dit"))?;
    trainer.write_trace(&out.join("dit_trace.csv"))?;
    info!("denoiser checkpoint written to {}", out.join("dit").display());
    Ok(())
}

fn load_models(vae: &Path, dit: &Path) -> anyhow::Result<(ToyVae<f32>, Denoiser<f32>)> {
    let v = ToyVae::load(vae).with_context(|| format!("loading codec checkpoint {}", vae.display()))?;
    let d = Denoiser::load(dit).with_context(|| format!("loading denoiser checkpoint {}", dit.display()))?;
    Ok((v, d))
}

#[derive(Serialize)]
struct InterpolationReport {
    #[serde(flatten)]
    inference: InferenceReport,
    psnr: Option<f64>,
    baseline_psnr: Option<f64>,
    per_frame_psnr: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct Timing {
    seconds: f64,
}

fn interpolate(cfg: &PipelineConfig, input: &Path, vae: &Path, dit: &Path, out: &Path, gt: Option<&Path>) -> CmdResult {
    let lq = load_video(&manifest_path(input)).with_context(|| format!("loading {}", input.display()))?;
    let (vae, dit) = load_models(vae, dit)?;
    let tiles = cfg.tile_plan()?;
    let (video, report) = run_inference(&lq, &vae, &dit, &tiles, cfg.chunks.len, &cfg.inference)?;
    let (mut psnr, mut baseline, mut per_frame) = (None, None, None);
    if let Some(gt) = gt {
        let truth = load_video(&manifest_path(gt)).with_context(|| format!("loading {}", gt.display()))?;
        if !truth.same_shape(&video) {
            return Err(Failure::Runtime(anyhow!(
                "ground truth {:?} does not match output {:?}",
                truth.dims(),
                video.dims()
            )));
        }
        psnr = Some(video::psnr(&video, &truth)?);
        baseline = Some(video::psnr(&repeat_previous_keyframe(&lq, cfg.inference.s)?, &truth)?);
        per_frame = Some((0..video.len()).map(|t| video::psnr_frames(&video, &truth, &[t])).collect::<vfi_core::Result<_>>()?);
    }
    save_video(&video, out)?;
    let seconds = report.seconds;
    let full = InterpolationReport { inference: report, psnr, baseline_psnr: baseline, per_frame_psnr: per_frame };
    write_json(&out.join("report.json"), &full)?;
    write_json(&out.join("timing.json"), &Timing { seconds })?;
    info!("wrote {} frames to {} in {seconds:.1}s", video.len(), out.display());
    Ok(())
}

fn ablate(cfg: &PipelineConfig, corpus: &Path, vae: &Path, dit: &Path, out: &Path) -> CmdResult {
    let clips = load_corpus(&corpus.join("eval"))?;
    let (vae, dit) = load_models(vae, dit)?;
    let tiles = cfg.tile_plan()?;
    let table = run_ablation(&clips, &vae, &dit, &tiles, cfg.chunks.len, &cfg.inference)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(out, table.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", table.to_csv());
    Ok(())
}
