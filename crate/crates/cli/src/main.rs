//! `cellfed` command-line driver.

mod codec;
mod config;
mod run;
mod sweep;

use std::fs;
use std::io::{self, Read};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cellfed_core::emq::OverflowPolicy;
use cellfed_core::federation::Arm;
use cellfed_core::power::{solve, Linearization, PowerProblem, SolverOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Federated learning over cell-free massive MIMO uplinks.
#[derive(Parser)]
#[command(name = "cellfed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; writes iterations.csv, summary.json and weights.ckpt.
    Run(RunArgs),
    /// Run the cross product of the given axes in parallel.
    Sweep(SweepArgs),
    /// Encode or decode a vector with the EMQ codec.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Solve one power-allocation instance given as JSON.
    Power(PowerArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Quantizer and power arm, e.g. `emq+sqp` or `fixedbit+fullpower`.
    #[arg(long)]
    arm: Option<Arm>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    theta_e: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    theta_l: Vec<f64>,
    /// Joules; `inf` for unlimited.
    #[arg(long, value_delimiter = ',', value_parser = sweep::parse_budget)]
    energy_budget: Vec<Option<f64>>,
    /// Seconds; `inf` for unlimited.
    #[arg(long, value_delimiter = ',', value_parser = sweep::parse_budget)]
    latency_budget: Vec<Option<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Overflow {
    Clamp,
    Promote,
}

#[derive(Subcommand)]
enum CodecCommand {
    /// Text vector to wire bytes.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "clamp")]
        overflow: Overflow,
    },
    /// Wire bytes to text vector.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        dim: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Lin {
    Full,
    Diagonal,
}

#[derive(Args)]
struct PowerArgs {
    /// Problem JSON (`stats`, `bits`, `cfg`, `theta_e`, `theta_l`); `-` reads stdin.
    #[arg(long)]
    input: PathBuf,
    /// Solution JSON; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = cellfed_core::power::DEFAULT_EPS_X)]
    eps_x: f64,
    #[arg(long, default_value_t = cellfed_core::power::DEFAULT_MAX_ROUNDS)]
    max_rounds: usize,
    #[arg(long, value_enum, default_value = "full")]
    linearization: Lin,
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CELLFED_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("CELLFED_THREADS=`{v}` is not a thread count"))?;
    if n == 0 {
        bail!("CELLFED_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load(args: &RunArgs) -> Result<cellfed_core::federation::RunConfig> {
    let mut cfg = config::load_config(&args.config)?;
    config::apply_overrides(&mut cfg, args.seed, args.arm)?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = load(&args)?;
    let summary = run::execute(&cfg, &args.out_dir)?;
    println!("{}", summary.line());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = load(&args.run)?;
    let axes = sweep::Axes {
        theta_e: args.theta_e,
        theta_l: args.theta_l,
        energy_budget: args.energy_budget,
        latency_budget: args.latency_budget,
    };
    let cells = sweep::cells(&base, &axes)?;
    let summaries = sweep::execute(&cells, &args.run.out_dir)?;
    for (cfg, s) in cells.iter().zip(&summaries) {
        println!("theta_e={} theta_l={}  {}", cfg.theta_e, cfg.theta_l, s.line());
    }
    if axes.theta_e.len() > 1 {
        let mono = sweep::k_monotone_in_theta_e(&axes, &summaries);
        eprintln!("K non-decreasing in theta_e: {mono}");
    }
    Ok(())
}

fn cmd_codec(cmd: CodecCommand) -> Result<()> {
    match cmd {
        CodecCommand::Encode {
            input,
            output,
            overflow,
        } => {
            let text = fs::read_to_string(&input)
                .with_context(|| format!("cannot read {}", input.display()))?;
            let v = codec::parse_vector(&text)?;
            let policy = match overflow {
                Overflow::Clamp => OverflowPolicy::Clamp,
                Overflow::Promote => OverflowPolicy::Promote,
            };
            let (code, bytes) = codec::encode(&v, policy)?;
            fs::write(&output, &bytes)?;
            let u = code
                .wire_exponent()
                .map_or_else(|| "zero vector".to_string(), |u| format!("u = {u}"));
            println!(
                "{} values, {} bits ({} bytes), {u}",
                v.len(),
                cellfed_core::emq::bit_count(&code),
                bytes.len()
            );
        }
        CodecCommand::Decode { input, output, dim } => {
            let bytes =
                fs::read(&input).with_context(|| format!("cannot read {}", input.display()))?;
            let v = codec::decode(bytes, dim)?;
            fs::write(&output, codec::format_vector(&v))?;
        }
    }
    Ok(())
}

fn cmd_power(args: PowerArgs) -> Result<()> {
    let text = if args.input.as_os_str() == "-" {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        s
    } else {
        fs::read_to_string(&args.input)
            .with_context(|| format!("cannot read {}", args.input.display()))?
    };
    let problem: PowerProblem =
        serde_json::from_str(&text).context("invalid power problem JSON")?;
    problem.validate()?;
    let opts = SolverOptions {
        eps_x: args.eps_x,
        max_rounds: args.max_rounds,
        linearization: match args.linearization {
            Lin::Full => Linearization::Full,
            Lin::Diagonal => Linearization::Diagonal,
        },
        ..SolverOptions::default()
    };
    let sol = solve(&problem, &opts)?;
    let json = serde_json::to_string_pretty(&sol)? + "\n";
    match args.output {
        Some(path) => {
            fs::write(&path, json)?;
            println!(
                "objective {:.6e}, ell_max {:.6e} s, {} rounds, converged {}",
                sol.objective, sol.ell_max, sol.rounds_used, sol.converged
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Codec(c) => cmd_codec(c),
        Command::Power(a) => cmd_power(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
