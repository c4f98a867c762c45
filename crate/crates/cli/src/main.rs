use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dmek_core::pipeline::{self, ModelKind, PipelineConfig, Split};
use dmek_core::{Preset, Result};

#[derive(Parser)]
#[command(name = "dmek", version, about = "Graft detachment quantification for radial AS-OCT scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phantom dataset tools.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Train the spur locator or the segmenter on a phantom dataset.
    Train(TrainArgs),
    /// Run the full pipeline on a scan or on every scan of a dataset.
    Infer(InferArgs),
    /// Compare predictions (or a second rater) against annotated scans.
    Eval(EvalArgs),
    /// Print the default configuration as JSON.
    Config,
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Generate scans with a scan-level train/val/test split.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
        preset: PresetArg,
        #[arg(long)]
        out: PathBuf,
        /// Pipeline config whose `phantom` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Full,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Full => Preset::Full,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Locator,
    Segmenter,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(value_enum)]
    model: ModelArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// A scan directory, or a dataset root.
    #[arg(long)]
    scan: PathBuf,
    /// Restrict a dataset root to one split.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    locator: PathBuf,
    #[arg(long)]
    segmenter: PathBuf,
    #[arg(long, overrides_with = "no_ellipse_refine")]
    ellipse_refine: bool,
    #[arg(long)]
    no_ellipse_refine: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    out: PathBuf,
}

fn config(path: Option<&PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::read(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            command:
                PhantomCommand::Gen {
                    n,
                    seed,
                    preset,
                    out,
                    config: cfg_path,
                },
        } => {
            let mut cfg = config(cfg_path.as_ref())?;
            cfg.preset = preset.into();
            cfg.phantom.preset = cfg.preset;
            cfg.seed = seed;
            let m = pipeline::generate_dataset(&cfg.phantom, n, seed, &out)?;
            cfg.write(out.join(pipeline::CONFIG))?;
            let c = |s| m.counts.get(&s).copied().unwrap_or(0);
            println!(
                "generated {} scans: {} train, {} val, {} test",
                m.scans.len(),
                c(Split::Train),
                c(Split::Val),
                c(Split::Test)
            );
        }
        Command::Train(a) => {
            let cfg = config(a.config.as_ref())?;
            let kind = match a.model {
                ModelArg::Locator => ModelKind::Locator,
                ModelArg::Segmenter => ModelKind::Segmenter,
            };
            let st = pipeline::train_model(kind, &a.data, &cfg, &a.out)?;
            println!(
                "{}: {} steps, best validation metric {:.6} at step {}",
                kind.name(),
                st.latest.step,
                st.best_metric,
                st.best_step
            );
        }
        Command::Infer(a) => {
            let cfg = config(a.config.as_ref())?;
            let refine = if a.no_ellipse_refine {
                false
            } else {
                a.ellipse_refine || cfg.ellipse_refine
            };
            let done = pipeline::infer_tree(&a.scan, a.split.map(Into::into), &a.locator, &a.segmenter, refine, &a.out)?;
            for m in &done {
                println!("{}: detachment {:.3} mm over 16 slices", m.scan, m.result.lengths.total_mm);
            }
        }
        Command::Eval(a) => {
            let m = pipeline::evaluate(&a.pred, &a.truth, a.split.map(Into::into))?;
            pipeline::write_eval(&m, &a.out)?;
            print!("{}", m.report());
        }
        Command::Config => {
            println!("{}", PipelineConfig::default().to_json()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
