use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::error;
use tulabm_cli::commands;
use tulabm_cli::config::{keys_help, Settings};
use tulabm_cli::{CliError, Result};
use tulabm_core::{Ablation, CodecKind};

#[derive(Parser)]
#[command(name = "tulabm", version, about = "Tumor-biased latent bridge matching on synthetic phantoms")]
#[command(after_long_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; see `--help` for keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override codec.mode.
    #[arg(long, value_parser = ["identity", "pooled", "learned"])]
    codec: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    Phantoms {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the learned codec.
    PretrainCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the drift network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, value_parser = ["full", "no_bl", "no_bl_no_tubam"])]
        ablation: Option<String>,
        /// Checkpoint from pretrain-codec (learned codec only).
        #[arg(long)]
        codec_checkpoint: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate non-contrast images with a trained checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `*_nc.tlbm` file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        /// Inject bridge noise between sampler steps.
        #[arg(long)]
        stochastic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path prefix; `.txt` and `.json` are written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate all three ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; phantoms are generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Number of training seeds, starting at --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn settings(common: &Common, steps: Option<u64>) -> Result<Settings> {
    let mut s = match &common.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    if let Some(c) = &common.codec {
        s.codec.mode = c.parse::<CodecKind>()?;
        if s.codec.mode == CodecKind::Identity {
            s.codec.downscale_factor = 1;
            s.codec.latent_channels = 1;
        }
    }
    if let Some(n) = steps {
        s.train.steps = n;
        s.pretrain.steps = n;
    }
    s.finalize()?;
    Ok(s.with_seed(common.seed))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantoms { common, count, out } => {
            commands::cmd_phantoms(&settings(&common, None)?, count, &out)?;
        }
        Command::PretrainCodec { common, data, steps, out } => {
            let curve = commands::cmd_pretrain_codec(&settings(&common, steps)?, &data, &out)?;
            if let (Some(a), Some(b)) = (curve.first(), curve.last()) {
                println!("codec loss {:.6} -> {:.6}", a, b);
            }
        }
        Command::Train { common, data, steps, ablation, codec_checkpoint, resume, out } => {
            let mut s = settings(&common, steps)?;
            if let Some(a) = ablation {
                s.train.ablation = a.parse::<Ablation>()?;
            }
            let outcome = commands::cmd_train(&s, &data, codec_checkpoint.as_deref(), &out, resume.as_deref())?;
            if let Some(r) = outcome.reports.last() {
                println!(
                    "step {} latent {:.6} pixel {:.6} boundary {:.6} total {:.6}",
                    r.step, r.latent_loss, r.pixel_loss, r.boundary_loss, r.total_loss
                );
            }
            println!("checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Infer { common, checkpoint, input, stochastic, out } => {
            let mut s = settings(&common, None)?;
            s.bridge.stochastic_sampling |= stochastic;
            for r in commands::cmd_infer(&s, &checkpoint, &input, &out, common.seed)? {
                println!(
                    "{}\t{}\tdrift_evaluations={}\twall_time_s={:.4}",
                    r.input.display(),
                    r.output.display(),
                    r.drift_evaluations,
                    r.wall_time_s
                );
            }
        }
        Command::Eval { pred, data, out } => {
            let named = commands::cmd_eval(&pred, &data, &out)?;
            print!("{}", tulabm_cli::report::metrics_table(&named.names, &named.report));
        }
        Command::Ablate { common, data, steps, seeds, out } => {
            let s = settings(&common, steps)?;
            let seeds: Vec<u64> = (0..seeds).map(|i| common.seed + i).collect();
            let summary = commands::cmd_ablate(&s, data.as_deref().map(Path::new), &out, &seeds)?;
            print!("{}", summary.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let level = std::env::var("TULABM_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{}", e);
            eprintln!("error: {}", e);
            exit(&e)
        }
    }
}

fn exit(e: &CliError) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
