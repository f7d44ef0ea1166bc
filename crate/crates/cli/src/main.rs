use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use autosign::ablation::{ablation_tsv, run_ablation};
use autosign::config::{ConfigError, RunConfig};
use autosign::metrics::report_tsv;
use autosign::model::{load_checkpoint, ModelError};
use autosign::pose::synth::synth_generate;
use autosign::pose::{is_detected, load_pose_file, DataError, Part, Split, POSE_MAGIC, POSE_VERSION};
use autosign::training::{decode_pose, evaluate_checkpoint, prepare_pose, run_training, TrainError};

#[derive(Debug, Parser)]
#[command(name = "autosign", version, about = "Pose-to-gloss recognition: synthesize, train, evaluate, decode")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed` and AUTOSIGN_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic pose/gloss dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to `data.root`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on `data.root`, writing checkpoints and history to `data.out`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Dataset root; defaults to `data.root`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write per-sample decodes and edit counts here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode a single pose file to gloss text.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pose: PathBuf,
    },
    /// Sweep modality and compressor depth; prints a TSV table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run arms concurrently. Output is identical to a sequential run.
        #[arg(long)]
        parallel: bool,
    },
    /// Print a pose file's header and keypoint statistics.
    Inspect {
        #[arg(long)]
        pose: PathBuf,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Data(DataError::Config(_)) | CliError::Train(TrainError::Config(_)) => 1,
            CliError::Train(TrainError::Divergence { .. }) => 3,
            _ => 2,
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    log::info!("resolved configuration:\n{}", cfg.to_text().trim_end());
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Train(TrainError::Io { path: path.to_path_buf(), source }))
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.data_root.clone());
            let samples = synth_generate(&cfg.synth, cfg.seed, &out)?;
            println!("samples\t{}", samples.len());
            for split in Split::ALL {
                println!("{split}\t{}", samples.iter().filter(|s| s.split == split).count());
            }
        }
        Command::Train { cfg } => {
            let cfg = load_config(&cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)
                .map_err(|source| TrainError::Io { path: cfg.out_dir.clone(), source })?;
            write(&cfg.out_dir.join("config.cfg"), cfg.to_text())?;
            let outcome = run_training(&cfg.train, &cfg.model, &cfg.data_root, &cfg.out_dir)?;
            println!("epochs\t{}", outcome.history.len());
            println!("best_dev_wer\t{}", outcome.state.best_dev_wer);
            println!("best_checkpoint\t{}", outcome.best_checkpoint.display());
        }
        Command::Eval { cfg, ckpt, split, data, report } => {
            let cfg = load_config(&cfg)?;
            let split: Split = split.parse()?;
            let ck = load_checkpoint(&ckpt)?;
            let root = data.unwrap_or(cfg.data_root);
            let eval = evaluate_checkpoint(&ck, &root, split, cfg.train.max_decode_len, cfg.train.beam_size)?;
            if let Some(path) = report {
                write(&path, report_tsv(&eval.decodes).map_err(TrainError::from)?)?;
            }
            println!("WER\t{}", eval.wer);
        }
        Command::Decode { cfg, ckpt, pose } => {
            let cfg = load_config(&cfg)?;
            let ck = load_checkpoint(&ckpt)?;
            let seq = prepare_pose(&load_pose_file(&pose)?, ck.modality)?;
            let hyp = decode_pose(&ck.params, &seq, cfg.train.max_decode_len, cfg.train.beam_size)?;
            println!("{}", ck.vocab.decode(&hyp));
        }
        Command::Ablate { cfg, parallel } => {
            let cfg = load_config(&cfg)?;
            let rows = run_ablation(&cfg, parallel)?;
            print!("{}", ablation_tsv(&rows));
        }
        Command::Inspect { pose } => {
            let seq = load_pose_file(&pose)?;
            println!("magic\t{}", String::from_utf8_lossy(POSE_MAGIC));
            println!("version\t{POSE_VERSION}");
            println!("frames\t{}", seq.n_frames());
            println!("joints\t{}", seq.joints());
            for part in Part::ALL {
                let span = seq.layout().span(part).expect("full layout has every part");
                let mut detected = 0usize;
                let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for t in 0..seq.n_frames() {
                    for j in span.start..span.start + span.len {
                        let (x, y) = seq.point(t, j);
                        if is_detected(x, y) {
                            detected += 1;
                            lo = [lo[0].min(x), lo[1].min(y)];
                            hi = [hi[0].max(x), hi[1].max(y)];
                        }
                    }
                }
                let total = span.len * seq.n_frames();
                print!("{}\tdetected={detected}/{total}", part.name());
                if detected > 0 {
                    print!("\tx=[{}, {}]\ty=[{}, {}]", lo[0], hi[0], lo[1], hi[1]);
                }
                println!();
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
