use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use nerv_core::distill::KdMode;
use nerv_core::model::{analyze, ModelParams, VariantConfig};
use nerv_core::pipeline::{
    bench_table, benchmark, benchmark_stub, decode_all, distill, evaluate, frame_times, ingest, qat_finetune,
    synthetic_video, train, write_frames, Checkpoint, FrameFormat, RunConfig, Teacher, TrainResult,
};
use nerv_core::quant::{Granularity, QuantPolicy};
use nerv_core::{Error, Result};

#[derive(Parser)]
#[command(name = "nerv", version, about = "Encode videos into tiny decoders, distill, quantize and evaluate them")]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, global = true, env = "NERV_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a frame directory and report its size and value range.
    IngestCheck { frames: PathBuf },
    /// Write a procedural test video.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Take the resolution from this variant.
        #[arg(long, default_value = "T-desk")]
        variant: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "png")]
        format: FrameFormat,
    },
    /// Per-stage multiplications, GFLOPs and parameter count.
    Analyze {
        #[arg(long, default_value = "T")]
        variant: String,
        #[arg(long, default_value_t = 1)]
        scale: usize,
        /// Also write CSV here (`-` for stdout).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit a decoder to a video.
    Train(TrainArgs),
    /// Train with a frozen teacher.
    Distill {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value = "final")]
        kd_mode: KdMode,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Post-training quantization of a checkpoint.
    Quantize {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u8,
        #[arg(long, default_value = "per_channel")]
        granularity: Granularity,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantization-aware fine-tuning from a full-precision checkpoint.
    Qat {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        bits: Option<u8>,
        #[arg(long, default_value = "per_channel")]
        granularity: Granularity,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        kd_mode: Option<KdMode>,
    },
    /// Decode every frame and report quality and cost metrics.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Decode throughput at batch size one.
    Benchmark {
        /// Checkpoints to time; if none, randomly initialized `--variants` are used.
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "T-desk,T+-desk,S-desk")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 16)]
        n_frames: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
    /// Write decoded frames.
    Decode {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value = "png")]
        format: FrameFormat,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of frames.
    #[arg(long)]
    frames: PathBuf,
    /// Run config TOML; its keys override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl TrainArgs {
    fn run_config(&self, adjust: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(v) = &self.variant {
            c.variant = v.clone();
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.output {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.checkpoint_every {
            c.checkpoint_every = v;
        }
        adjust(&mut c);
        match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                c.overlay(&text)
            }
            None => Ok(c),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if path == Path::new("-") {
        print!("{text}");
        return Ok(());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn rooted(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root.as_deref();
    match cli.cmd {
        Command::IngestCheck { frames } => {
            let ds = ingest(&frames)?;
            let (h, w) = ds.resolution();
            let (lo, hi) = ds
                .frames()
                .iter()
                .filter_map(|f| f.min_max())
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), (l, h)| (a.min(l), b.max(h)));
            println!("frames      {}\nresolution  {h}x{w}\nvalue range [{lo:.4}, {hi:.4}]", ds.len());
        }
        Command::Synth { out, variant, count, seed, format } => {
            let cfg = VariantConfig::resolve(&variant)?;
            let (h, w) = cfg.output_hw();
            let out = rooted(root, &out);
            write_frames(&out, &synthetic_video(h, w, count, seed), format)?;
            println!("wrote {count} frames of {h}x{w} to {}", out.display());
        }
        Command::Analyze { variant, scale, csv } => {
            let cfg = VariantConfig::resolve(&variant)?.with_scale(scale);
            cfg.validate()?;
            let report = analyze(&cfg);
            print!("{}", report.to_table());
            if let Some(p) = csv {
                write_text(&p, &report.to_csv())?;
            }
        }
        Command::Train(args) => {
            let rc = args.run_config(|_| {})?;
            rc.validate(false)?;
            if rc.kd.uses_teacher() {
                return Err(Error::Usage("distillation settings given to `train`; use `distill`".into()));
            }
            let cfg = rc.variant_config()?;
            let ds = ingest(&args.frames)?;
            let opts = rc.train_options(root);
            let r = train(&cfg, ModelParams::init(&cfg, rc.seed), &ds, &opts)?;
            finish(&rc, root, &cfg, &r, "final.ckpt")?;
        }
        Command::Distill { train: args, teacher, kd_mode, lambda } => {
            let rc = args.run_config(|c| {
                c.kd.mode = kd_mode;
                if let Some(l) = lambda {
                    c.kd.lambda = l;
                }
                if teacher.is_some() {
                    c.teacher = teacher.clone();
                }
            })?;
            rc.validate(false)?;
            let cfg = rc.variant_config()?;
            let ds = ingest(&args.frames)?;
            let tpath = rc.teacher.clone().ok_or_else(|| Error::Usage("distill needs --teacher".into()))?;
            let tck = Checkpoint::load(&tpath)?;
            let tparams = tck.params()?;
            let opts = rc.train_options(root);
            let teacher = Teacher { cfg: &tck.variant, params: &tparams };
            let r = distill(&cfg, ModelParams::init(&cfg, rc.seed), &ds, &opts, teacher)?;
            finish(&rc, root, &cfg, &r, "final.ckpt")?;
        }
        Command::Quantize { checkpoint, bits, granularity, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let policy = QuantPolicy { bits, granularity };
            let q = ck.quantized(&policy)?;
            let out = rooted(root, &out);
            q.save(&out)?;
            let before = ck.size_report()?;
            let after = q.size_report()?;
            println!("input\n{}\noutput ({})\n{}", before.to_table(), out.display(), after.to_table());
        }
        Command::Qat { train: args, base, bits, granularity, teacher, kd_mode } => {
            let rc = args.run_config(|c| {
                if base.is_some() {
                    c.base_checkpoint = base.clone();
                }
                if let Some(b) = bits {
                    c.quant = Some(QuantPolicy { bits: b, granularity });
                }
                if teacher.is_some() {
                    c.teacher = teacher.clone();
                }
                if let Some(m) = kd_mode {
                    c.kd.mode = m;
                }
            })?;
            rc.validate(true)?;
            let base = rc.base_checkpoint.clone().expect("validated");
            let ck = Checkpoint::load(&base)?;
            if ck.quant_bits().is_some() {
                return Err(Error::Usage("QAT must start from a full-precision checkpoint".into()));
            }
            let cfg = ck.variant.clone();
            let ds = ingest(&args.frames)?;
            let policy = rc.quant.expect("validated");
            let opts = rc.train_options(root);
            let tck = rc.teacher.as_deref().map(Checkpoint::load).transpose()?;
            let tparams = tck.as_ref().map(|t| t.params()).transpose()?;
            let teacher = tck.as_ref().zip(tparams.as_ref()).map(|(t, p)| Teacher { cfg: &t.variant, params: p });
            if rc.kd.uses_teacher() && teacher.is_none() {
                return Err(Error::Usage("KD+QAT needs --teacher".into()));
            }
            let r = qat_finetune(&cfg, ck.params()?, &ds, &policy, &opts, teacher)?;
            let dir = finish(&rc, root, &cfg, &r, "qat_fp32.ckpt")?;
            let q = Checkpoint::load(&dir.join("qat_fp32.ckpt"))?.quantized(&policy)?;
            q.save(&dir.join("final.ckpt"))?;
            println!("quantized checkpoint: {}", dir.join("final.ckpt").display());
        }
        Command::Evaluate { checkpoint, frames, csv } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = ingest(&frames)?;
            let report = evaluate(&ck.params()?, &ck.variant, &ds)?;
            println!("checkpoint    {} ({}, {})", checkpoint.display(), ck.variant.name, ck.precision());
            print!("{}", report.to_table());
            if let Some(p) = csv {
                write_text(&rooted(root, &p), &report.to_csv())?;
            }
        }
        Command::Benchmark { checkpoints, variants, n_frames, warmup, runs } => {
            let mut reports = Vec::new();
            let models: Vec<(VariantConfig, ModelParams<f32>)> = if checkpoints.is_empty() {
                variants
                    .iter()
                    .map(|v| {
                        let cfg = VariantConfig::resolve(v)?;
                        let p = ModelParams::init(&cfg, 0);
                        Ok((cfg, p))
                    })
                    .collect::<Result<_>>()?
            } else {
                checkpoints
                    .iter()
                    .map(|p| {
                        let ck = Checkpoint::load(p)?;
                        Ok((ck.variant.clone(), ck.params()?))
                    })
                    .collect::<Result<_>>()?
            };
            if let Some((cfg, _)) = models.first() {
                reports.push(benchmark_stub(cfg, n_frames, warmup, runs)?);
            }
            for (cfg, p) in &models {
                info!("benchmarking {}", cfg.name);
                reports.push(benchmark(p, cfg, n_frames, warmup, runs)?);
            }
            print!("{}", bench_table(&reports));
        }
        Command::Decode { checkpoint, out, count, format } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let frames = decode_all(&ck.params()?, &ck.variant, &frame_times(count))?;
            let out = rooted(root, &out);
            write_frames(&out, &frames, format)?;
            println!("wrote {count} frames to {}", out.display());
        }
    }
    Ok(())
}

/// Saves the final checkpoint and the effective run config; returns the run directory.
fn finish(rc: &RunConfig, root: Option<&Path>, cfg: &VariantConfig, r: &TrainResult, name: &str) -> Result<PathBuf> {
    let dir = rc.resolved_output(root);
    let path = dir.join(name);
    Checkpoint::from_params(cfg, &r.params, r.log.len() as u64, r.final_loss())?.save(&path)?;
    write_text(&dir.join("run.toml"), &rc.to_toml())?;
    println!(
        "trained {} for {} steps, final loss {:.6}; checkpoint {}",
        cfg.name,
        r.log.len(),
        r.final_loss().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(dir)
}
