use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cspe::cli_io::{self, PosteriorSummary, RunConfig};
use cspe::samplers::ZWeights;
use cspe::Error;

/// Bayesian low-rank matrix inference under cumulative spike-and-slab shrinkage.
#[derive(Parser)]
#[command(name = "cspe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZWeightsArg {
    Stick,
    Cumulative,
}

impl From<ZWeightsArg> for ZWeights {
    fn from(z: ZWeightsArg) -> Self {
        match z {
            ZWeightsArg::Stick => ZWeights::Stick,
            ZWeightsArg::Cumulative => ZWeights::Cumulative,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; every section is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the posterior for a data matrix and write draws and a summary.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Comma-separated matrix, one row per series.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Cell value marking a missing entry (empty cells are always missing).
        #[arg(long)]
        missing_token: Option<String>,
        /// Model rank; the largest identifiable rank when omitted.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        z_weights: Option<ZWeightsArg>,
    },
    /// Run the simulation benchmark described by the config's [scenario] section.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        z_weights: Option<ZWeightsArg>,
    },
    /// Solve for the concentration that gives E[pi_k] = q.
    Elicit {
        /// Target prior probability that component k is inactive.
        #[arg(long)]
        q: f64,
        /// Component index the target refers to.
        #[arg(long)]
        k: usize,
        /// Length of the reported E[pi_j] curve (default k + 1).
        #[arg(long)]
        max_k: Option<usize>,
    },
    /// Recompute the summary of a stored fit.
    Summarize {
        /// Directory written by `fit`.
        dir: PathBuf,
        /// Write the summary files into this directory instead of only printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 78,
        Error::Data(_) | Error::Dimension(_) => 65,
        Error::Sampler(_) => 70,
        Error::Io { .. } | Error::CorruptStore { .. } => 74,
    }
}

fn load_config(common: &Common) -> cspe::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.sampler.seed = s;
        cfg.scenario.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn print_summary(s: &PosteriorSummary) {
    println!(
        "J = {}, T = {}, K = {}, prior {}, {} draws",
        s.j, s.t, s.k, s.prior, s.n_draws
    );
    println!(
        "{:>6}  {:>12}  {:>12}  {:>12}  {:>10}",
        "k", "omega", "2.5%", "97.5%", "share"
    );
    for (i, w) in s.omega.iter().enumerate() {
        println!(
            "{:>6}  {:>12.5}  {:>12.5}  {:>12.5}  {:>10.4}",
            i + 1,
            w.mean,
            w.lower,
            w.upper,
            s.shares[i].mean
        );
    }
    let n = s.shares[s.k].mean;
    println!(
        "{:>6}  {:>12.5}  {:>12.5}  {:>12.5}  {:>10.4}",
        "1/tau", s.tau_inv.mean, s.tau_inv.lower, s.tau_inv.upper, n
    );
    println!(
        "snr {:.4} [{:.4}, {:.4}]",
        s.snr.mean, s.snr.lower, s.snr.upper
    );
    println!("divergence rate {:.4}", s.divergence_rate);
}

fn run(cli: Cli) -> cspe::Result<()> {
    match cli.command {
        Command::Fit {
            common,
            data,
            missing_token,
            k,
            z_weights,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = data {
                cfg.data.path = Some(d);
            }
            if let Some(m) = missing_token {
                cfg.data.missing_token = m;
            }
            if k.is_some() {
                cfg.model.k = k;
            }
            if let Some(z) = z_weights {
                cfg.sampler.z_weights = z.into();
            }
            let out = cli_io::fit(&cfg)?;
            print_summary(&out.summary);
            for w in out.store.warnings() {
                eprintln!("warning: {w}");
            }
            eprintln!("wrote {}", cfg.output.dir.display());
        }
        Command::Simulate { common, z_weights } => {
            let mut cfg = load_config(&common)?;
            if let Some(z) = z_weights {
                cfg.sampler.z_weights = z.into();
            }
            let (report, files) = cli_io::simulate(&cfg)?;
            print!("{}", report.to_text());
            for f in files {
                eprintln!("wrote {}", f.display());
            }
        }
        Command::Elicit { q, k, max_k } => {
            print!("{}", cli_io::elicit(q, k, max_k)?);
        }
        Command::Summarize { dir, out } => {
            let s = cli_io::summarize(&dir)?;
            print_summary(&s);
            if let Some(o) = out {
                s.write(&o)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
