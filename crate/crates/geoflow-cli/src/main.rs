use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geoflow_cli::config::RunConfig;
use geoflow_cli::{run_command, Command};

#[derive(Parser)]
#[command(name = "geoflow", version = geoflow_cli::VERSION, about = "Viscoelastoplastic phase-field flow: runs and solution-concept checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: output.dir from the config, else geoflow-out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Overrides the seed in the config.
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=geoflow_cli::config::MAX_SEED))]
    seed: Option<u64>,
}

#[derive(Subcommand)]
#[command(rename_all = "snake_case")]
enum Cmd {
    /// Per-step energy-dissipation inequality, auxiliary energy and a loosened-tolerance control.
    EdeCheck(RunArgs),
    /// Variational and dissipative inequalities over a battery of test tuples.
    EvsBattery(RunArgs),
    /// Logarithmic potentials with shrinking regularisation, and the obstacle limit.
    AlphaSweep(RunArgs),
    /// Stress diffusion towards zero, with the zero-diffusion battery.
    GammaSweep(RunArgs),
    /// Recovery bound and derivative estimates of the regularised potentials.
    Mosco(RunArgs),
    /// Plastic proximal map against a brute-force minimiser.
    ProxOracle(RunArgs),
    /// Checkpoint, restart from the midpoint and compare.
    Semiflow(RunArgs),
    /// Print the commented default configuration.
    Reference,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.cmd {
        Cmd::Reference => {
            print!("{}", geoflow_cli::config::reference());
            return ExitCode::SUCCESS;
        }
        Cmd::EdeCheck(a) => (Command::EdeCheck, a),
        Cmd::EvsBattery(a) => (Command::EvsBattery, a),
        Cmd::AlphaSweep(a) => (Command::AlphaSweep, a),
        Cmd::GammaSweep(a) => (Command::GammaSweep, a),
        Cmd::Mosco(a) => (Command::Mosco, a),
        Cmd::ProxOracle(a) => (Command::ProxOracle, a),
        Cmd::Semiflow(a) => (Command::Semiflow, a),
    };
    let mut cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("geoflow: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    if let Some(exp) = cfg.experiment {
        if exp != cmd {
            eprintln!("geoflow: config is for `{exp}`, not `{cmd}`");
            return ExitCode::from(2);
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args.out.or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("geoflow-out"));
    match run_command(cmd, &cfg, &out, args.workers) {
        Ok(report) => {
            let s = &report.summary;
            println!("{cmd}: {} checks, {} failed -> {}", s.checks, s.failed, out.join("report.json").display());
            for name in &s.failing {
                println!("  failing: {name}");
            }
            if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("geoflow: {cmd}: {e:#}");
            ExitCode::from(3)
        }
    }
}
