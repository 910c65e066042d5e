use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use oodrisk::experiment::{
    cmd_collect, cmd_evaluate, cmd_report, cmd_train, record_command, ExperimentConfig, TrainTarget,
};
use oodrisk::Result;

/// Collision-risk experiments on the corridor simulator.
#[derive(Parser)]
#[command(name = "oodrisk", version)]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect train, holdout and test datasets.
    Collect,
    /// Train `vae` or `predictor:<kind>`.
    Train { target: String },
    /// Sweep every method over every evaluation set.
    Evaluate {
        /// Posterior kinds to evaluate; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Write report.md from the evaluation summary.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    }
    .with_overrides(cli.seed, cli.out);
    cfg.validate()?;
    let start = Instant::now();
    let name = match cli.command {
        Command::Collect => {
            for info in cmd_collect(&cfg)? {
                println!("{:<14} {:>6} motions  collision rate {:.3}", info.name, info.motions, info.base_rate);
            }
            "collect".to_string()
        }
        Command::Train { target } => {
            let t = TrainTarget::parse(&target)?;
            cmd_train(&cfg, &t)?;
            println!("trained {target}");
            format!("train {target}")
        }
        Command::Evaluate { methods } => {
            let methods = methods.unwrap_or_else(|| cfg.evaluation.methods.clone());
            let ev = cmd_evaluate(&cfg, &methods)?;
            for set in &ev.summary.sets {
                println!("{}: averted at 50/60/70/80/90% autonomy", set.set);
                for (m, vals) in &set.table.rows {
                    let v: Vec<String> = vals.iter().map(|x| format!("{:5.1}", 100.0 * x)).collect();
                    println!("  {m:<20} {}", v.join(" "));
                }
            }
            "evaluate".to_string()
        }
        Command::Report => {
            println!("{}", cmd_report(&cfg)?.display());
            "report".to_string()
        }
    };
    record_command(&cfg, &name, start.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
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
