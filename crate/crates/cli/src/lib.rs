//! Command-line front end. [`dispatch`] parses arguments, runs one pipeline
//! stage and returns the process exit code.

pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use drmc_core::io::RunConfig;
use drmc_core::{Error, GateKind, Result};

use pipeline::Layout;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "drmc", version, about = "Multi-center low-dose volume restoration with routed experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `io.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory, defaulting to `<out>/data`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize paired volumes for every configured center.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the known centers; writes history and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Gate variant, overriding `model.gate`.
        #[arg(long)]
        gate: Option<GateKind>,
    },
    /// Per-record metrics of the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/model.drmc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Center interference matrices per parameter group.
    Interference {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Top-1 expert histogram per layer, bank and center.
    RouteHist {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and compare the four routing variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
    },
}

struct Context {
    cfg: RunConfig,
    layout: Layout,
    data: PathBuf,
}

impl Common {
    fn context(&self) -> Result<Context> {
        let cfg = pipeline::load_config(self.config.as_deref())?;
        let layout = Layout::new(self.out.clone().unwrap_or_else(|| cfg.io.output_dir.clone()));
        let data = self.data.clone().unwrap_or_else(|| layout.data());
        Ok(Context { cfg, layout, data })
    }
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.validate()
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common } => {
            let ctx = common.context()?;
            let n = pipeline::gen_data(&ctx.cfg, &ctx.layout, &ctx.data)?;
            println!("wrote {n} records to {}", ctx.data.display());
        }
        Command::Train { common, overrides, gate } => {
            let mut ctx = common.context()?;
            overrides.apply(&mut ctx.cfg)?;
            if let Some(g) = gate {
                ctx.cfg.model.gate = g;
            }
            let records = pipeline::load_records(&ctx.data)?;
            let h = pipeline::train_stage(&ctx.cfg, &ctx.layout, &records)?;
            println!("trained {} epochs; history in {}", ctx.cfg.train.epochs, ctx.layout.history().display());
            log::debug!("{} history rows", h.len());
        }
        Command::Eval { common, checkpoint } => {
            let ctx = common.context()?;
            let ckpt = checkpoint.unwrap_or_else(|| ctx.layout.model());
            let records = pipeline::load_records(&ctx.data)?;
            let m = pipeline::eval_stage(&ctx.cfg, &ctx.layout, &records, &ckpt)?;
            println!("evaluated {} records; metrics in {}", m.len(), ctx.layout.metrics().display());
        }
        Command::Interference { common, checkpoint } => {
            let ctx = common.context()?;
            let ckpt = checkpoint.unwrap_or_else(|| ctx.layout.model());
            let records = pipeline::load_records(&ctx.data)?;
            pipeline::interference_stage(&ctx.cfg, &ctx.layout, &records, &ckpt)?;
        }
        Command::RouteHist { common, checkpoint } => {
            let ctx = common.context()?;
            let ckpt = checkpoint.unwrap_or_else(|| ctx.layout.model());
            let records = pipeline::load_records(&ctx.data)?;
            pipeline::route_hist_stage(&ctx.cfg, &ctx.layout, &records, &ckpt)?;
            println!("histogram in {}", ctx.layout.route_hist().display());
        }
        Command::Ablate { common, overrides } => {
            let mut ctx = common.context()?;
            overrides.apply(&mut ctx.cfg)?;
            let records = pipeline::load_records(&ctx.data)?;
            for r in pipeline::ablate_stage(&ctx.cfg, &ctx.layout, &records)? {
                println!("{:>8}  known mean psnr {:.3} dB", r.variant, r.known_mean);
            }
        }
    }
    Ok(())
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}
