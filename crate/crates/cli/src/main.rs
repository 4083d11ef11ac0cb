use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use safeskill::agent::RunMode;
use safeskill::config::PipelineConfig;
use safeskill::pipeline;
use safeskill::{Error, Result};

#[derive(Parser)]
#[command(name = "safeskill", version, about = "Safe skill planning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several. Overrides `seeds` from the config.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Environment name. Overrides `env` from the config.
    #[arg(long)]
    env: Option<String>,
    /// Extra `key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModeArgs {
    #[command(flatten)]
    common: Common,
    /// SSkP, SSkP-NP or SSkP-w/o-RP (slugs accepted); repeat for several. Default: all three.
    #[arg(long = "mode")]
    modes: Vec<RunMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate noisy scripted demonstrations.
    GenDemos(Common),
    /// Train the skill encoder, decoder and prior.
    TrainSkills(Common),
    /// Build PU data from the demonstrations and train the risk predictor.
    TrainRisk(Common),
    /// Per-iteration risk reduction of the planner on sampled safe states.
    DiagnosePlanning(Common),
    /// Online training with the selected skill-selection mode(s).
    TrainOnline(ModeArgs),
    /// Recompute metrics and curves from finished online runs.
    Evaluate(ModeArgs),
    /// Aggregate finished runs across seeds into a table and curve bands.
    Report(ModeArgs),
    /// Every stage in order, then the report.
    RunAll(ModeArgs),
    /// Print the effective configuration.
    ShowConfig(Common),
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(e) = &c.env {
        cfg.env = e.clone();
    }
    if !c.seeds.is_empty() {
        cfg.seeds = c.seeds.clone();
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        if !cfg.set(k.trim(), v.trim())? {
            return Err(Error::UnknownKeys(vec![k.trim().to_string()]));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn modes(m: &ModeArgs) -> Vec<RunMode> {
    if m.modes.is_empty() {
        RunMode::ALL.to_vec()
    } else {
        m.modes.clone()
    }
}

fn per_seed(c: &Common, f: impl Fn(&PipelineConfig, u64) -> Result<()>) -> Result<()> {
    let cfg = load_config(c)?;
    for &seed in &cfg.seeds {
        f(&cfg, seed)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos(c) => per_seed(&c, |cfg, s| {
            let st = pipeline::gen_demos(cfg, &c.out, s)?;
            println!(
                "seed {s}: {} demonstrations, violation fraction {:.3}",
                st.count, st.violation_fraction
            );
            Ok(())
        }),
        Command::TrainSkills(c) => per_seed(&c, |cfg, s| {
            let r = pipeline::train_skills(cfg, &c.out, s)?;
            match r.explained_variance_holdout {
                Some(ev) => println!("seed {s}: held-out explained variance {ev:.3}"),
                None => println!("seed {s}: train explained variance {:.3}", r.explained_variance_train),
            }
            Ok(())
        }),
        Command::TrainRisk(c) => per_seed(&c, |cfg, s| {
            let r = pipeline::train_risk(cfg, &c.out, s)?;
            println!(
                "seed {s}: {} positive / {} unlabeled, lambda {:.4}, loss {:.4} -> {:.4}",
                r.positives, r.unlabeled, r.lambda, r.initial_loss, r.final_loss
            );
            Ok(())
        }),
        Command::DiagnosePlanning(c) => per_seed(&c, |cfg, s| {
            let d = pipeline::diagnose_planning(cfg, &c.out, s)?;
            if let Some(last) = d.rows.last() {
                println!(
                    "seed {s}: mean risk change after {} iterations {:+.5} (std {:.5})",
                    last.iteration, last.mean_delta_p, last.std_delta_p
                );
            }
            Ok(())
        }),
        Command::TrainOnline(m) => {
            let ms = modes(&m);
            per_seed(&m.common, |cfg, s| {
                for &mode in &ms {
                    let r = pipeline::train_online_stage(cfg, &m.common.out, s, mode)?;
                    println!(
                        "seed {s} {mode}: {} episodes, {} violations, PtR/#V x1e3 {:.4}",
                        r.episodes, r.violations, r.ptr_over_v_times_1e3
                    );
                }
                Ok(())
            })
        }
        Command::Evaluate(m) => {
            let ms = modes(&m);
            per_seed(&m.common, |cfg, s| {
                for &mode in &ms {
                    let e = pipeline::evaluate(cfg, &m.common.out, s, mode)?;
                    println!(
                        "seed {s} {mode}: PtR/#V x1e3 {:.4}, violations {}",
                        e.ptr_over_v_times_1e3, e.ratio.violations
                    );
                }
                Ok(())
            })
        }
        Command::Report(m) => {
            let cfg = load_config(&m.common)?;
            print_table(&pipeline::report(&cfg, &m.common.out, &modes(&m))?);
            Ok(())
        }
        Command::RunAll(m) => {
            let cfg = load_config(&m.common)?;
            print_table(&pipeline::run_all(&cfg, &m.common.out, &modes(&m))?);
            Ok(())
        }
        Command::ShowConfig(c) => {
            print!("{}", load_config(&c)?.to_text());
            Ok(())
        }
    }
}

fn print_table(r: &pipeline::Report) {
    println!("{:<14} {:<16} {:>22} {:>8}", "method", "env", "PtR/#V x1e3", "seeds");
    for row in &r.table {
        println!(
            "{:<14} {:<16} {:>12.4} ± {:<8.4} {:>6}",
            row.method, row.env, row.ptr_over_v_times_1e3, row.ptr_over_v_times_1e3_std, row.seeds
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
