use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zoomrl::harness::{
    oracle_value, resolve_threads, run_experiment, write_artifacts, write_census_csv, ExperimentConfig, RunOptions,
    DEFAULT_VERIFY_SAMPLES,
};
use zoomrl::Error;

/// Episodic Q-learning with adaptive ball partitions: experiment runner.
#[derive(Debug, Parser)]
#[command(name = "zoomrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; overrides ZOOMRL_THREADS. 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every seed and write regret.csv, census.csv and meta.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory; overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write trace.csv with one row per step.
        #[arg(long)]
        trace: bool,
    },
    /// Print V*_1(s_1) from the grid oracle.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every seed and report active balls per depth against the packing bound.
    Census {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every seed, checking partition invariants after each episode.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Random cover-check samples per step partition.
        #[arg(long, default_value_t = DEFAULT_VERIFY_SAMPLES)]
        samples: usize,
    },
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn execute(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Run { common, out, trace } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let opts = RunOptions {
                verify_samples: None,
                keep_trace: trace || cfg.trace,
            };
            let result = run_experiment(&cfg, opts, resolve_threads(common.threads)?)?;
            let art = write_artifacts(&result, &out_dir(&cfg, out))?;
            println!("{}", art.regret_csv.display());
            println!("{}", art.census_csv.display());
            if let Some(t) = &art.trace_csv {
                println!("{}", t.display());
            }
            println!("{}", art.meta_json.display());
            for run in &result.runs {
                println!(
                    "seed {}: cumulative regret {:.4}, {} cells",
                    run.seed,
                    run.cumulative_regret(),
                    run.agent.learner().memory_cells()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{:?}", oracle_value(&cfg)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Census { common, out } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let result = run_experiment(&cfg, RunOptions::default(), resolve_threads(common.threads)?)?;
            let dir = out_dir(&cfg, out);
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("census.csv");
            write_census_csv(&result, &path)?;
            println!("seed,h,depth,count,packing_bound");
            for row in result.runs.iter().flat_map(|r| &r.census) {
                println!(
                    "{},{},{},{},{}",
                    row.seed, row.h, row.depth, row.count, row.packing_bound
                );
            }
            let bad = result.census_violations();
            if bad.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("{} census rows exceed the packing bound", bad.len());
                Ok(ExitCode::from(1))
            }
        }
        Command::Verify { common, samples } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let opts = RunOptions {
                verify_samples: Some(samples),
                keep_trace: false,
            };
            let result = run_experiment(&cfg, opts, resolve_threads(common.threads)?)?;
            let mut failed = false;
            for run in &result.runs {
                let v = run.verify.clone().unwrap_or_default();
                println!(
                    "seed {}: {} episodes, {} checks, {} failures",
                    run.seed, v.episodes, v.checks, v.failures
                );
                for e in &v.examples {
                    eprintln!("  {e}");
                }
                failed |= !v.ok();
            }
            let bad = result.census_violations();
            if !bad.is_empty() {
                eprintln!("{} census rows exceed the packing bound", bad.len());
                failed = true;
            }
            if failed {
                Ok(ExitCode::from(1))
            } else {
                println!("all invariants hold");
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
