use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use headfield::Result;
use headfield_cli::{
    cmd_animate, cmd_eval, cmd_export, cmd_fit, cmd_generate, cmd_interp, cmd_synth_data, cmd_train, AnimateArgs,
    Settings, Split, TrainArgs,
};

#[derive(Parser)]
#[command(name = "headfield", version, about = "Animatable neural head avatars from synthetic scans")]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration overlaid on the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (defaults to `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Dotted configuration override, e.g. `--set train.epochs_stage1=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    HeldOut,
    Train,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the scan dataset.
    SynthData,
    /// Train stage 1 (geometry and deformation) or stage 2 (detail and texture).
    Train {
        #[arg(long, default_value_t = 1)]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Stage-1 checkpoint used by stage 2.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Sample new identities and export meshes and renders.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Drive an avatar through a pose and expression sequence.
    Animate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        latents: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        /// Dataset supplying the subject's shape coefficients.
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSON list of frame parameters.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Interpolate between two subjects' codes.
    Interp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: usize,
        #[arg(long)]
        b: usize,
    },
    /// Fit latent codes to scans with the networks frozen.
    Fit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::HeldOut)]
        split: SplitArg,
    },
    /// Score reconstructions against the scans.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `fit`; training subjects are scored when absent.
        #[arg(long)]
        fits: Option<PathBuf>,
    },
    /// Export canonical meshes, codes and the head model.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Animate { .. } => "animate",
            Command::Interp { .. } => "interp",
            Command::Fit { .. } => "fit",
            Command::Eval { .. } => "eval",
            Command::Export { .. } => "export",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let s = Settings::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let force = cli.force;
    match cli.command {
        Command::SynthData => {
            let m = cmd_synth_data(&s, &out, force)?;
            println!("wrote {} scans to {}", m.scans.len(), out.display());
        }
        Command::Train { stage, data, resume, from, quiet } => {
            let args = TrainArgs { stage, data, resume, from, quiet };
            let ck = cmd_train(&s, &args, &out, force)?;
            println!("stage {stage} finished after {} epochs in {}", ck.epochs_done, out.display());
        }
        Command::Generate { checkpoint } => {
            let r = cmd_generate(&s, &checkpoint, &out, force)?;
            println!("wrote {} samples to {}", r.len(), out.display());
        }
        Command::Animate { checkpoint, latents, subject, data, params } => {
            let args = AnimateArgs { latents, subject, data, params };
            let r = cmd_animate(&s, &checkpoint, &args, &out, force)?;
            println!("wrote {} frames to {}", r.len(), out.display());
        }
        Command::Interp { checkpoint, a, b } => {
            let log = cmd_interp(&s, &checkpoint, a, b, &out, force)?;
            println!("wrote {} frames to {} (endpoint IoU {:.4})", log.steps, out.display(), log.endpoint_iou);
        }
        Command::Fit { checkpoint, data, split } => {
            let split = match split {
                SplitArg::HeldOut => Split::HeldOut,
                SplitArg::Train => Split::Train,
            };
            let rows = cmd_fit(&s, &checkpoint, &data, split, &out, force)?;
            println!("wrote {} metric rows to {}", rows.len(), out.display());
        }
        Command::Eval { checkpoint, data, fits } => {
            let rows = cmd_eval(&s, &checkpoint, &data, fits.as_deref(), &out, force)?;
            println!("wrote {} metric rows to {}", rows.len(), out.display());
        }
        Command::Export { checkpoint } => {
            let files = cmd_export(&s, &checkpoint, &out, force)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
