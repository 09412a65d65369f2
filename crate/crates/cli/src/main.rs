use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use fungi_core::config::{RunConfig, SegMode};
use fungi_core::pipeline::{self, SegmentOptions};
use fungi_core::report::EvalReport;
use fungi_core::synth::{SynthKind, SynthSpec};
use fungi_core::Error;

#[derive(Parser)]
#[command(name = "fungi", version, about = "Gradient features from self-supervised losses")]
struct Cli {
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BankArgs {
    /// Directory holding train.bank.fngi and test.bank.fngi.
    #[arg(long)]
    banks: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth {
        #[arg(long, default_value = "stripes")]
        kind: SynthKind,
        /// Training samples.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Test samples (defaults to half of n).
        #[arg(long)]
        test_n: Option<usize>,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract train and test feature banks.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit PCA on the train bank and transform both banks.
    FusePca {
        #[arg(long)]
        banks: PathBuf,
        /// Output width (defaults to the configured one).
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// kNN classification, full and few-shot.
    Eval(BankArgs),
    /// k-means clustering overlap with the classes.
    Cluster(BankArgs),
    /// Logistic-regression probe.
    Probe(BankArgs),
    /// Retrieval mean average precision.
    Retrieve(BankArgs),
    /// Pairwise CKA between embedding and gradient features.
    Cka(BankArgs),
    /// Retrieval-based semantic segmentation.
    Segment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        mode: SegMode,
        /// Query with the training images.
        #[arg(long)]
        self_bank: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite { .. } => 4,
        Error::Shape { .. } | Error::InvalidArgument(_) | Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 3,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn emit(reports: &[(&EvalReport, &str)], out: &Path) -> Result<(), Error> {
    for (r, stem) in reports {
        r.write(out, stem)?;
        print!("{}", r.to_text());
        println!();
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth {
            kind,
            n,
            test_n,
            classes,
            size,
            noise,
            out,
        } => {
            let spec = SynthSpec {
                kind: *kind,
                n: *n,
                classes: *classes,
                size: *size,
                noise: *noise,
                seed: cfg.run.seed,
            };
            pipeline::synth(&spec, test_n.unwrap_or((n / 2).max(*classes)), out)?;
        }
        Command::Extract { data, out } => {
            pipeline::extract(&cfg, data, out)?;
        }
        Command::FusePca { banks, dim, out } => {
            pipeline::fuse_pca(&cfg, banks, *dim, out)?;
        }
        Command::Eval(a) => {
            let (tr, te) = pipeline::load_banks(&cfg, &a.banks)?;
            let (main, pc) = pipeline::eval(&cfg, &tr, &te)?;
            emit(&[(&main, "eval"), (&pc, "per_class_delta")], &a.out)?;
        }
        Command::Cluster(a) | Command::Probe(a) | Command::Retrieve(a) | Command::Cka(a) => {
            let (tr, te) = pipeline::load_banks(&cfg, &a.banks)?;
            let (r, stem) = match &cli.command {
                Command::Cluster(_) => (pipeline::cluster(&cfg, &tr, &te)?, "cluster"),
                Command::Probe(_) => (pipeline::probe(&cfg, &tr, &te)?, "probe"),
                Command::Retrieve(_) => (pipeline::retrieve(&cfg, &tr, &te)?, "retrieve"),
                _ => (pipeline::cka(&cfg, &tr, &te)?, "cka"),
            };
            emit(&[(&r, stem)], &a.out)?;
        }
        Command::Segment {
            data,
            mode,
            self_bank,
            out,
        } => {
            let r = pipeline::segment(
                &cfg,
                data,
                SegmentOptions {
                    mode: *mode,
                    self_bank: *self_bank,
                },
            )?;
            emit(&[(&r, "segment")], out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            error!("could not size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
