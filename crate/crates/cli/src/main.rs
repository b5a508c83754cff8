use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use edgeflow_cli::config::Config;
use edgeflow_cli::output::{run, write_text, RunError};
use edgeflow_cli::{preset, verify};

#[derive(Parser)]
#[command(name = "edgeflow", version, about = "Multi-layer edge offloading lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the simulator's ticks per period.
        #[arg(long)]
        ticks: Option<u32>,
    },
    /// Write and run a built-in scenario.
    Preset {
        name: PresetName,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ticks: Option<u32>,
    },
    /// Check the optimizer against the exact oracle on random instances.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    Paper,
}

fn with_ticks(mut cfg: Config, ticks: Option<u32>) -> Config {
    if let Some(t) = ticks {
        cfg.sim.ticks_per_period = t;
    }
    cfg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed, ticks } => {
            Config::load(&config).map_err(RunError::from).and_then(|cfg| run(&with_ticks(cfg, ticks), seed, &out)).map(|m| {
                println!("wrote {} to {}", m.outputs.join(", "), out.display());
            })
        }
        Command::Preset { name: PresetName::Paper, out, seed, ticks } => {
            [("sweep", preset::paper_sweep()), ("burst", preset::paper_burst())].into_iter().try_for_each(|(dir, cfg)| {
                let cfg = with_ticks(cfg, ticks);
                let dir = out.join(dir);
                std::fs::create_dir_all(&dir).map_err(|source| RunError::Io { path: dir.clone(), source })?;
                write_text(&dir.join("config.json"), &cfg.to_json())?;
                let m = run(&cfg, seed, &dir)?;
                println!("wrote config.json, {} to {}", m.outputs.join(", "), dir.display());
                Ok(())
            })
        }
        Command::Verify { seed } => {
            let single = verify::agreement(seed, 500, &verify::single_shape(), verify::SINGLE_TOL);
            let multi = verify::agreement(seed, 200, &Default::default(), verify::MULTI_TOL);
            for (label, a, tol) in [("single-ED", single, verify::SINGLE_TOL), ("multi-ED", multi, verify::MULTI_TOL)] {
                println!(
                    "{label}: {} cases, worst relative gap {:e} (tolerance {:e}), {} failures",
                    a.cases, a.worst_rel, tol, a.failures
                );
            }
            if single.passed() && multi.passed() {
                println!("oracle agreement: ok");
                return ExitCode::SUCCESS;
            }
            eprintln!("oracle agreement: FAILED");
            return ExitCode::from(2);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
