use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mili::config::ExperimentConfig;
use mili::pipeline::{self, Manifest};
use mili::Error;

#[derive(Parser)]
#[command(name = "mili", version, about = "Meta-imitation with self-collected trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long, default_value = "configs/default.toml")]
    config: PathBuf,

    /// Overrides `output_dir` from the config
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Seeded {
    #[command(flatten)]
    common: Common,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MultiSeed {
    #[command(flatten)]
    common: Common,

    /// Comma-separated seeds; defaults to 0..eval.seeds
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the object vocabulary and the train/val/test task lists
    GenTasks(Seeded),
    /// Scripted expert demonstrations for every train task
    CollectDemos(Seeded),
    /// Meta-imitation pretraining and the behavior-cloning baseline
    Pretrain(Seeded),
    /// Collect trials, filter, pair and retrain
    Improve(Seeded),
    /// One-shot success on test tasks for every trained method
    Eval(Seeded),
    /// Success after one round at each trial budget
    Sweep(Seeded),
    /// Aggregate per-seed results into metrics tables
    Report(MultiSeed),
    /// Every stage for every seed, then the report
    Run {
        #[command(flatten)]
        seeds: MultiSeed,

        /// Skip the trial-budget sweep
        #[arg(long)]
        no_sweep: bool,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn seeds(cfg: &ExperimentConfig, seeds: &Option<Vec<u64>>) -> Vec<u64> {
    seeds.clone().unwrap_or_else(|| (0..cfg.eval.seeds).collect())
}

fn run(cli: Cli) -> Result<Manifest, Error> {
    let seeded = |s: &Seeded, stage: fn(&ExperimentConfig, u64) -> Result<Manifest, Error>| {
        let cfg = load(&s.common)?;
        stage(&cfg, s.seed)
    };
    match cli.command {
        Command::GenTasks(s) => seeded(&s, pipeline::gen_tasks),
        Command::CollectDemos(s) => seeded(&s, pipeline::collect_demo_stage),
        Command::Pretrain(s) => seeded(&s, pipeline::pretrain_stage),
        Command::Improve(s) => seeded(&s, pipeline::improve_stage),
        Command::Eval(s) => seeded(&s, pipeline::eval_stage),
        Command::Sweep(s) => seeded(&s, pipeline::sweep_stage),
        Command::Report(m) => {
            let cfg = load(&m.common)?;
            pipeline::report_stage(&cfg, &seeds(&cfg, &m.seeds))
        }
        Command::Run { seeds: m, no_sweep } => {
            let cfg = load(&m.common)?;
            pipeline::run_all(&cfg, &seeds(&cfg, &m.seeds), !no_sweep)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(m) => {
            for f in &m.outputs {
                println!("{}  {}", f.sha256, f.path);
            }
            log::info!("{} done in {:.1}s", m.stage, m.wall_time_secs);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(match e.category() {
                "config" => 2,
                "artifact" => 3,
                "io" => 4,
                _ => 1,
            })
        }
    }
}
