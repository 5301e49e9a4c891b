//! `homlab`: runs the homogenization pipeline from a TOML config.
//!
//! Exit codes: 0 success, 1 other error, 2 potential axiom failure,
//! 3 missing upstream artifact, 4 stage property failure, 64 usage.

mod config;
mod exit;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use exit::{Code, Failure};
use stages::{Context, Stage};

#[derive(Parser)]
#[command(name = "homlab", version, about = "Correctors, effective diffusivity and homogenization tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the environment and the config file.
    #[arg(long, env = "HOMLAB_SEED")]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output directory; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check periodicity, shift covariance and finite range of the potential.
    VerifyPotential(Common),
    /// Sample the Gibbs measure on the box torus.
    Gibbs(Common),
    /// Estimate the mixing curve of the quotient process.
    Mixing(Common),
    /// Tabulate the corrector and check its Dirichlet energy.
    Corrector(Common),
    /// Estimate the effective diffusion block.
    Effective(Common),
    /// Compare rescaled paths with the Gaussian limit.
    Homogenize(Common),
    /// The same comparison in fixed random environments.
    RandomEnv(Common),
    /// Aggregate the verdicts of every stage that has run.
    Report(Common),
    /// Run several stages in order.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stage names; defaults to every stage except
        /// random-env.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
}

fn parse_stages(names: &[String]) -> Result<Vec<Stage>, Failure> {
    if names.is_empty() {
        return Ok(Stage::DEFAULT.to_vec());
    }
    let mut stages = names
        .iter()
        .map(|n| {
            Stage::parse(n.trim()).ok_or_else(|| {
                let known: Vec<&str> = Stage::ORDER.iter().map(|s| s.name()).collect();
                Failure::usage(format!("unknown stage {n:?}; expected one of {}", known.join(", ")))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    stages.sort();
    stages.dedup();
    Ok(stages)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (common, stages) = match &cli.command {
        Command::Pipeline { common, stages } => (common, Some(parse_stages(stages)?)),
        Command::VerifyPotential(c)
        | Command::Gibbs(c)
        | Command::Mixing(c)
        | Command::Corrector(c)
        | Command::Effective(c)
        | Command::Homogenize(c)
        | Command::RandomEnv(c)
        | Command::Report(c) => (c, None),
    };
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
    };
    let ctx = Context::new(RunConfig::load(&common.config, &overrides)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.workers)
        .build()
        .map_err(|e| Failure::new(Code::Other, e.to_string()))?;
    pool.install(|| {
        if let Command::VerifyPotential(_) = cli.command {
            return ctx.verify_potential();
        }
        ctx.prepare()?;
        eprintln!(
            "homlab: config sha256 {} seed {}, resolved config in {}",
            ctx.hash,
            ctx.cfg.seed,
            ctx.out(stages::RESOLVED).display()
        );
        let stages = stages.unwrap_or_else(|| {
            vec![match cli.command {
                Command::Gibbs(_) => Stage::Gibbs,
                Command::Mixing(_) => Stage::Mixing,
                Command::Corrector(_) => Stage::Corrector,
                Command::Effective(_) => Stage::Effective,
                Command::Homogenize(_) => Stage::Homogenize,
                Command::RandomEnv(_) => Stage::RandomEnv,
                _ => Stage::Report,
            }]
        });
        ctx.preflight(&stages)?;
        stages.into_iter().try_for_each(|s| ctx.run(s))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Code::Usage as u8 } else { Code::Ok as u8 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("homlab: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
