use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use apjko_core::config::Precision;
use apjko_core::error::Error;
use apjko_core::riemann::{exact_riemann, gas_gamma, EulerState};
use apjko_core::runner;

/// Asymptotic-preserving deterministic particle solver for Landau and
/// Dougherty collisions via dynamic JKO steps.
#[derive(Parser)]
#[command(name = "apjko", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Run(RunArgs),
    /// Emit the exact Riemann solution profile as CSV.
    Riemann(RiemannArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the run configuration.
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the per-cell collision phase (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Floating-point storage mode.
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RiemannArgs {
    #[arg(long)]
    rho_left: f64,
    #[arg(long)]
    t_left: f64,
    #[arg(long, default_value_t = 0.0)]
    u_left: f64,
    #[arg(long)]
    rho_right: f64,
    #[arg(long)]
    t_right: f64,
    #[arg(long, default_value_t = 0.0)]
    u_right: f64,
    /// Velocity dimension fixing the gas exponent (d_v + 2) / d_v.
    #[arg(long, default_value_t = 3)]
    d_v: usize,
    /// Evaluation time.
    #[arg(long)]
    time: f64,
    #[arg(long, default_value_t = 200)]
    n_points: usize,
    /// Domain endpoints.
    #[arg(long, num_args = 2, default_values_t = [0.0, 1.0])]
    domain: Vec<f64>,
    /// Membrane position.
    #[arg(long, default_value_t = 0.5)]
    x0: f64,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => runner::run_file(
            &args.config,
            args.seed,
            args.threads,
            args.precision,
            args.out,
        )
        .map(|artifacts| {
            println!("run complete: {}", artifacts.out_dir.display());
        }),
        Command::Riemann(args) => riemann_profile(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config { .. } | Error::InvalidSpec(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn riemann_profile(args: &RiemannArgs) -> Result<(), Error> {
    let gamma = gas_gamma(args.d_v);
    let left = EulerState {
        rho: args.rho_left,
        u: args.u_left,
        p: args.rho_left * args.t_left,
    };
    let right = EulerState {
        rho: args.rho_right,
        u: args.u_right,
        p: args.rho_right * args.t_right,
    };
    if args.time <= 0.0 {
        return Err(Error::InvalidSpec("time must be positive".into()));
    }
    let solution = exact_riemann(left, right, gamma)?;
    let mut text = String::from("x,rho,u,T\n");
    let (lo, hi) = (args.domain[0], args.domain[1]);
    for k in 0..args.n_points {
        let x = lo + (hi - lo) * (k as f64 + 0.5) / args.n_points as f64;
        let s = solution.sample((x - args.x0) / args.time);
        text.push_str(&format!(
            "{:?},{:?},{:?},{:?}\n",
            x,
            s.rho,
            s.u,
            s.temperature()
        ));
    }
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
