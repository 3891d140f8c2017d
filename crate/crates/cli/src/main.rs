use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vsr_core::dataseq::{frame_files, load_dataset, load_sequence, write_frame, ResampleKernel};
use vsr_core::generator::upscale_sequence;
use vsr_core::metrics::{ablate_n, ablation_csv, evaluate, read_flow_dir, BicubicBaseline, EvalOptions, EvalSequence, Model, Upscaler};
use vsr_core::synth::{write_toy_dataset, ToyConfig};
use vsr_core::trainer::{load_checkpoint_with, load_model, train, RunOutput, TrainConfig, TrainState};
use vsr_core::{Error, FrameSequence};

const OUT_ROOT_ENV: &str = "VSR_OUT_ROOT";

#[derive(Parser)]
#[command(name = "vsr", version, about = "Frame-recurrent video super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a model from a config file
    Train(TrainArgs),
    /// Upscale a directory of LR frames with a trained checkpoint
    Infer(InferArgs),
    /// Compute the metrics report for a dataset
    Eval(EvalArgs),
    /// Warp-error PSNR against the number of warp coordinates for a frame pair
    AblateN(AblateArgs),
    /// Write the synthetic toy dataset
    Synth(SynthArgs),
}

#[derive(Args)]
struct OutArgs {
    /// output directory [default: $VSR_OUT_ROOT/<command>, or ./runs/<command>]
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArgs {
    fn resolve(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(command)
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the config file (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// dataset manifest, overriding `data` from the config
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// checkpoint to resume from
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// directory of LR PNG frames
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// trained checkpoint; omit together with `--bicubic` for the baseline
    #[arg(long, required_unless_present = "bicubic")]
    checkpoint: Option<PathBuf>,
    /// evaluate the bicubic-upscale baseline instead of a model
    #[arg(long, conflicts_with = "checkpoint")]
    bicubic: bool,
    /// scale for the baseline
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// LR synthesis kernel for the baseline
    #[arg(long, default_value = "bicubic")]
    kernel: ResampleKernel,
    /// dataset manifest
    #[arg(long = "in")]
    input: PathBuf,
    /// ground-truth flow root with one `<sequence>/flow_NNNNNN.bin` directory per sequence
    #[arg(long)]
    flows: Option<PathBuf>,
    /// report directory [default: the output directory]
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    alpha: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// directory holding the frame pair (the first two frames are used)
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "n", value_delimiter = ',', default_value = "1,2,5")]
    n_values: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 24)]
    clips: usize,
    /// HR frame side in pixels
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

/// Exit status plus message: 2 for usage and validation problems, 3 for
/// failures after validation succeeded.
struct Failure {
    code: u8,
    err: Error,
}

fn usage(err: Error) -> Failure {
    Failure { code: 2, err }
}

fn runtime(err: Error) -> Failure {
    Failure { code: 3, err }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::AblateN(a) => cmd_ablate_n(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p).map_err(usage)?,
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            usage(Error::Config {
                key: kv.clone(),
                msg: "override must have the form key=value".into(),
            })
        })?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(m) = &a.input {
        cfg.data = Some(m.clone());
    }
    cfg.validate().map_err(usage)?;
    let manifest = cfg.data.clone().ok_or_else(|| {
        usage(Error::Config {
            key: "data".into(),
            msg: "no dataset manifest (set `data` or pass --in)".into(),
        })
    })?;
    let dataset = load_dataset(&manifest, cfg.scale, cfg.kernel).map_err(usage)?;
    vsr_core::dataseq::check_clip_constraints(&dataset, cfg.batch, cfg.t_len, cfg.crop_hr).map_err(usage)?;
    let mut state = match &a.checkpoint {
        Some(p) => load_checkpoint_with(p, cfg.clone(), false).map_err(usage)?,
        None => TrainState::new(cfg.clone()).map_err(usage)?,
    };
    let out = RunOutput {
        dir: a.out.resolve("train"),
    };
    fs::create_dir_all(&out.dir).map_err(|e| runtime(Error::io(&out.dir, e)))?;
    let cfg_path = out.dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| runtime(Error::io(&cfg_path, e)))?;
    let summary = train(&mut state, &dataset, &out).map_err(runtime)?;
    log::info!(
        "done: {} pretrain + {} adversarial iterations, checkpoint {}",
        summary.pretrain_iters,
        summary.main_iters,
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let (gen, align, _) = load_model(&a.checkpoint).map_err(usage)?;
    let names = frame_files(&a.input).map_err(usage)?;
    let lr = load_sequence(&a.input).map_err(usage)?;
    let out = a.out.resolve("infer");
    let hr = upscale_sequence(&gen, &align, &lr).map_err(runtime)?;
    fs::create_dir_all(&out).map_err(|e| runtime(Error::io(&out, e)))?;
    for (frame, src) in hr.iter().zip(&names) {
        let stem = src.file_stem().expect("frame files have names");
        write_frame(frame, &out.join(stem).with_extension("png")).map_err(runtime)?;
    }
    log::info!("wrote {} frames to {}", hr.len(), out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (model, scale, kernel): (Box<dyn Upscaler>, usize, ResampleKernel) = match &a.checkpoint {
        Some(p) => {
            let (gen, align, cfg) = load_model(p).map_err(usage)?;
            (Box::new(Model { gen, align }), cfg.scale, cfg.kernel)
        }
        None => (Box::new(BicubicBaseline { scale: a.scale }), a.scale, a.kernel),
    };
    let pairs = load_dataset(&a.input, scale, kernel).map_err(usage)?;
    if pairs.is_empty() {
        return Err(usage(Error::invalid("eval", "empty dataset")));
    }
    let data = pairs
        .into_iter()
        .map(|pair| {
            let flows = match &a.flows {
                Some(root) => Some(read_flow_dir(&root.join(&pair.name), pair.len())?),
                None => None,
            };
            Ok(EvalSequence { pair, flows })
        })
        .collect::<vsr_core::Result<Vec<_>>>()
        .map_err(usage)?;
    let dir = a.metrics.clone().unwrap_or_else(|| a.out.resolve("eval"));
    let opts = EvalOptions {
        alpha: a.alpha,
        distance: None,
    };
    let report = evaluate(model.as_ref(), &data, &opts).map_err(runtime)?;
    report.write(&dir).map_err(runtime)?;
    print!("{}", report.to_text());
    Ok(())
}

fn first_pair(dir: &Path) -> vsr_core::Result<FrameSequence> {
    let seq = load_sequence(dir)?;
    if seq.len() < 2 {
        return Err(Error::invalid("ablate-n", format!("{} holds {} frame(s), need 2", dir.display(), seq.len())));
    }
    FrameSequence::new(seq.frames()[..2].to_vec())
}

fn cmd_ablate_n(a: AblateArgs) -> CmdResult {
    let pair = first_pair(&a.input).map_err(usage)?;
    if a.steps < 2 || a.n_values.is_empty() || a.n_values.contains(&0) {
        return Err(usage(Error::invalid("ablate-n", "need steps ≥ 2 and n values ≥ 1")));
    }
    let out = a.out.resolve("ablate-n");
    let rows = ablate_n(&pair, &a.n_values, a.steps, a.seed).map_err(runtime)?;
    fs::create_dir_all(&out).map_err(|e| runtime(Error::io(&out, e)))?;
    let csv = ablation_csv(&rows);
    let path = out.join("ablation.csv");
    fs::write(&path, &csv).map_err(|e| runtime(Error::io(&path, e)))?;
    print!("{csv}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    if a.clips == 0 || a.size < 8 || a.frames < 2 {
        return Err(usage(Error::invalid("synth", "need clips ≥ 1, size ≥ 8 and frames ≥ 2")));
    }
    let cfg = ToyConfig {
        size: a.size,
        frames: a.frames,
        ..Default::default()
    };
    let out = a.out.resolve("synth");
    let ds = write_toy_dataset(&out, &cfg, a.clips, a.seed).map_err(runtime)?;
    println!("{}", ds.manifest.display());
    Ok(())
}
