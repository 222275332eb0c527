use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moldiff_core::commands::{
    checkpoint_path, cmd_evaluate, cmd_prepare, cmd_sample, cmd_train, CommandError,
};
use moldiff_core::config::RunConfig;
use moldiff_core::molgraph::BondMode;

/// Diffusion model for small molecules: prepare a tensor cache from
/// structure files, train the denoiser, sample new molecules, and score them.
#[derive(Parser)]
#[command(name = "moldiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration: a TOML file plus flag overrides.  Precedence is
/// flag > MOLDIFF_CACHE_DIR (cache dir only) > file > built-in default.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input structure file, .sdf or .xyz.
    #[arg(long)]
    data: Option<String>,
    /// Directory for the tensor cache and checkpoints.
    #[arg(long)]
    cache_dir: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Number of diffusion steps in the noise schedule.
    #[arg(long)]
    t_max: Option<usize>,
    /// Train with ring-class conditioning (true/false).
    #[arg(long)]
    conditional: Option<bool>,
    /// Keep an exponentially averaged parameter copy for checkpoints.
    #[arg(long)]
    ema: Option<bool>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CommandError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_path(p).map_err(|e| CommandError::Usage(e.to_string()))?,
            None => RunConfig::default(),
        };
        if let Ok(dir) = std::env::var("MOLDIFF_CACHE_DIR") {
            cfg.cache_dir = dir;
        }
        if let Some(v) = &self.data {
            cfg.data_path = v.clone();
        }
        if let Some(v) = &self.cache_dir {
            cfg.cache_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.t_max {
            cfg.t_max = v;
        }
        if let Some(v) = self.conditional {
            cfg.conditional = v;
        }
        if let Some(v) = self.ema {
            cfg.ema = v;
        }
        cfg.validate()
            .map_err(|e| CommandError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Enough configuration to locate the cache directory (the checkpoint
/// itself carries its full training configuration).
#[derive(Args)]
struct CacheArgs {
    /// TOML run configuration; built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the tensor cache and checkpoints.
    #[arg(long)]
    cache_dir: Option<String>,
}

impl CacheArgs {
    fn default_checkpoint(&self) -> Result<PathBuf, CommandError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_path(p).map_err(|e| CommandError::Usage(e.to_string()))?,
            None => RunConfig::default(),
        };
        if let Ok(dir) = std::env::var("MOLDIFF_CACHE_DIR") {
            cfg.cache_dir = dir;
        }
        if let Some(v) = &self.cache_dir {
            cfg.cache_dir = v.clone();
        }
        Ok(checkpoint_path(&cfg))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse structures, strip hydrogens, and write the tensor cache.
    Prepare(ConfigArgs),
    /// Train the denoiser on a prepared cache.
    Train(ConfigArgs),
    /// Draw molecules from a trained checkpoint into SDF files.
    Sample {
        #[command(flatten)]
        cache: CacheArgs,
        /// Checkpoint file; defaults to <cache_dir>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for per-sample SDF files and the manifest.
        #[arg(long, default_value = "samples")]
        out_dir: PathBuf,
        /// Number of molecules to draw.
        #[arg(short, long, default_value_t = 1)]
        n: usize,
        /// Ring-class label (0 = acyclic, 1 = cyclic); conditional checkpoints only.
        #[arg(long)]
        label: Option<u32>,
        /// Bond assignment for decoded samples: geometry or channel.
        #[arg(long, default_value = "geometry")]
        bond_mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score structure files and print a metric report.
    Evaluate {
        /// Structure files (.sdf or .xyz).
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Score every molecule against this ring class (0 = acyclic, 1 = cyclic).
        #[arg(long)]
        label: Option<u32>,
        /// Report file; a CSV twin is written with the same stem.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_bond_mode(s: &str) -> Result<BondMode, CommandError> {
    match s {
        "geometry" => Ok(BondMode::Geometry),
        "channel" => Ok(BondMode::Channel),
        other => Err(CommandError::Usage(format!(
            "unknown bond mode '{other}' (expected geometry or channel)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Prepare(args) => {
            let cfg = args.resolve()?;
            let out = cmd_prepare(&cfg)?;
            println!(
                "encoded {} molecules ({} skipped) -> {}",
                out.encoded,
                out.skipped,
                out.cache.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = cmd_train(&cfg)?;
            if let Some(last) = out.log.last() {
                println!("final loss {:.6} at step {}", last.total, last.step);
            }
            println!("checkpoint -> {}", out.checkpoint.display());
        }
        Command::Sample {
            cache,
            checkpoint,
            out_dir,
            n,
            label,
            bond_mode,
            seed,
        } => {
            let mode = parse_bond_mode(&bond_mode)?;
            let ckpt = match checkpoint {
                Some(p) => p,
                None => cache.default_checkpoint()?,
            };
            let out = cmd_sample(&ckpt, &out_dir, n, label, mode, seed)?;
            println!(
                "wrote {} samples -> {}",
                out.files.len(),
                out.manifest.display()
            );
        }
        Command::Evaluate {
            paths,
            label,
            report,
        } => {
            let rep = cmd_evaluate(&paths, label, report.as_deref())?;
            print!("{}", rep.key_value_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests land here too and must exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
