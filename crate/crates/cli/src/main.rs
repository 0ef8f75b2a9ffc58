use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resus_core::data::Stage;
use resus_core::eval::StageReport;
use resus_core::models::Architecture;
use resus_core::runner::{self, ExperimentConfig, Method};
use resus_core::synth::{generate, SynthConfig};
use resus_core::{Error, Result};

/// Decoupled cold-start CTR prediction: pretrain a shared predictor, then
/// meta-learn per-user residuals.
#[derive(Parser)]
#[command(name = "resus", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// TOML experiment config; unspecified keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list; repeatable.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// nn, rr, mus or shared.
    #[arg(long, global = true)]
    mode: Option<Method>,
    /// Shared-predictor architecture: lr, fm or deepfm.
    #[arg(long, global = true)]
    arch: Option<Architecture>,
    #[arg(long, global = true)]
    tau: Option<usize>,
    /// Fixed fusion weight used at evaluation time.
    #[arg(long, global = true)]
    beta_override: Option<f64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter and split the raw source into a dataset bundle.
    Ingest,
    /// Train and freeze the shared predictor.
    Pretrain,
    /// Episodic training against the frozen shared predictor.
    MetaTrain,
    /// Stage report on the test suite.
    Evaluate,
    /// Batched versus per-query test time on the same checkpoint.
    Timing,
    /// Every phase for every seed, then across-seed summaries.
    Run,
    /// Print the effective config with all defaults.
    PrintConfig,
    /// Write a synthetic MovieLens-format fixture.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 7)]
        synth_seed: u64,
    },
}

fn effective_config(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !o.seeds.is_empty() {
        cfg.seeds = o.seeds.clone();
    }
    if let Some(m) = o.mode {
        cfg.mode = m;
    }
    if let Some(a) = o.arch {
        cfg.model.arch = a;
    }
    if let Some(t) = o.tau {
        cfg.episodes.tau = t;
    }
    if let Some(b) = o.beta_override {
        cfg.beta_override = Some(b);
    }
    if let Some(t) = o.threads {
        cfg.threads = t;
    }
    if let Some(p) = &o.out {
        cfg.out = p.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &StageReport) {
    for s in &r.stages {
        let auc = s.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        let rel = s.rela_impr.map_or(String::new(), |x| format!("  RelaImpr {x:.1}%"));
        println!("{:<12} stage {:<3} logloss {:.4}  auc {auc}{rel}", r.method, s.label, s.logloss);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth { dir, users, synth_seed } = &cli.command {
        let data = generate(&SynthConfig {
            users: *users,
            seed: *synth_seed,
            ..SynthConfig::default()
        })?;
        data.write_movielens(dir)?;
        println!("wrote {} ratings for {users} users to {}", data.ratings.len(), dir.display());
        return Ok(());
    }
    let cfg = effective_config(&cli.overrides)?;
    if let Command::PrintConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Ingest => {
            runner::cmd_ingest(&cfg)?;
        }
        Command::Pretrain => {
            let ds = runner::load_dataset(&cfg)?;
            runner::echo_config(&cfg)?;
            for &seed in &cfg.seeds {
                let (_, rep) = runner::cmd_pretrain(&cfg, &ds, seed)?;
                println!("seed {seed}: shared predictor best epoch {}", rep.best_epoch);
            }
        }
        Command::MetaTrain => {
            let ds = runner::load_dataset(&cfg)?;
            runner::echo_config(&cfg)?;
            for &seed in &cfg.seeds {
                let (_, rep) = runner::cmd_meta_train(&cfg, &ds, seed)?;
                println!("seed {seed}: {} best epoch {}", cfg.mode, rep.best_epoch);
            }
        }
        Command::Evaluate => {
            let ds = runner::load_dataset(&cfg)?;
            for &seed in &cfg.seeds {
                print_report(&runner::cmd_evaluate(&cfg, &ds, seed)?);
            }
        }
        Command::Timing => {
            let ds = runner::load_dataset(&cfg)?;
            for &seed in &cfg.seeds {
                let t = runner::cmd_timing(&cfg, &ds, seed)?;
                println!(
                    "seed {seed}: {} test {:.3}s batched, {:.3}s per-query ({} tasks, {} queries)",
                    t.method, t.test_seconds_batched, t.test_seconds_per_query, t.tasks, t.queries
                );
            }
        }
        Command::Run => {
            let summary = runner::cmd_run(&cfg)?;
            print_report(&summary.shared);
            if let Some(m) = &summary.method {
                print_report(m);
            }
            if let Some(a) = summary.stage_auc(Stage::III) {
                log::info!("stage III auc {a:.4}");
            }
        }
        Command::PrintConfig | Command::Synth { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
