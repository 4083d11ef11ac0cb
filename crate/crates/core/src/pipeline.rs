//! File-based pipeline stages. Each stage reads its inputs from and writes
//! its outputs to a per-seed directory under the output root:
//!
//! ```text
//! <out>/seed-<s>/demos.jsonl
//!               /skills.json              skill_training.json
//!               /pu.jsonl  risk.json      risk_training.json
//!               /planning_diagnostics.csv
//!               /online/<mode>/metrics.csv  summary.json  evaluation.json
//!                             /checkpoints/
//! <out>/report/table.json  curves/*.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::agent::{train_online, OnlineInputs, RunMode};
use crate::config::PipelineConfig;
use crate::demo::{generate_demonstrations, DemoDataset, DemoStats, ScriptedController};
use crate::env::make_env;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_seeds, ptr_over_violations, reward_vs_steps_curve, reward_vs_violations_curve, table_row,
    violations_vs_steps_curve, CurvePoint, PtrRatio, RunLog, TableRow,
};
use crate::nn::{Adam, AdamConfig};
use crate::planner::{planning_diagnostics, PlanningDiagnostics};
use crate::risk::{assemble_pu_data, estimate_class_prior, update_predictor, PuConfig, PuDataset, RiskPredictor};
use crate::rng::{derive_seed, stage, stage_rng};
use crate::skills::{
    explained_variance, split_trajectories, train_skill_model, window_starts, EpochLog, SkillModel,
};

#[derive(Debug, Clone)]
pub struct SeedPaths {
    pub dir: PathBuf,
}

impl SeedPaths {
    pub fn new(out: &Path, seed: u64) -> Self {
        Self {
            dir: out.join(format!("seed-{seed}")),
        }
    }

    pub fn demos(&self) -> PathBuf {
        self.dir.join("demos.jsonl")
    }
    pub fn skills(&self) -> PathBuf {
        self.dir.join("skills.json")
    }
    pub fn skill_report(&self) -> PathBuf {
        self.dir.join("skill_training.json")
    }
    pub fn pu(&self) -> PathBuf {
        self.dir.join("pu.jsonl")
    }
    pub fn risk(&self) -> PathBuf {
        self.dir.join("risk.json")
    }
    pub fn risk_report(&self) -> PathBuf {
        self.dir.join("risk_training.json")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.dir.join("planning_diagnostics.csv")
    }
    pub fn online(&self, mode: RunMode) -> PathBuf {
        self.dir.join("online").join(mode.slug())
    }
    pub fn metrics(&self, mode: RunMode) -> PathBuf {
        self.online(mode).join("metrics.csv")
    }
    pub fn summary(&self, mode: RunMode) -> PathBuf {
        self.online(mode).join("summary.json")
    }
    pub fn evaluation(&self, mode: RunMode) -> PathBuf {
        self.online(mode).join("evaluation.json")
    }
}

pub fn report_dir(out: &Path) -> PathBuf {
    out.join("report")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Artifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn gen_demos(cfg: &PipelineConfig, out: &Path, seed: u64) -> Result<DemoStats> {
    let paths = SeedPaths::new(out, seed);
    let mut env = make_env(&cfg.env)?;
    let controller = ScriptedController::for_env(env.as_ref())?;
    let demos = generate_demonstrations(
        env.as_mut(),
        &controller,
        cfg.demos.count,
        cfg.demos.noise_scale,
        derive_seed(seed, stage::DEMOS, 0),
    )?;
    demos.save(&paths.demos())?;
    let stats = demos.stats();
    info!(
        "seed {seed}: {} demos, violation fraction {:.3}",
        stats.count, stats.violation_fraction
    );
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub config: PipelineConfig,
    pub seed: u64,
    pub train_trajectories: usize,
    pub holdout_trajectories: usize,
    pub train_windows: usize,
    pub holdout_windows: usize,
    pub explained_variance_train: f64,
    pub explained_variance_holdout: Option<f64>,
    pub epochs: Vec<EpochLog>,
}

pub fn train_skills(cfg: &PipelineConfig, out: &Path, seed: u64) -> Result<SkillReport> {
    let paths = SeedPaths::new(out, seed);
    let demos = DemoDataset::load(&paths.demos())?;
    check_env(cfg, &demos)?;
    let mut rng = stage_rng(seed, stage::SKILLS, 0);
    let (train, hold) = split_trajectories(&demos.trajectories, cfg.holdout_fraction, &mut rng);
    let (model, log) = train_skill_model(&demos, &train, &cfg.skills, &mut rng)?;
    let ev = |ts: &[crate::demo::Trajectory]| -> Result<Option<f64>> {
        let refs = window_starts(ts, cfg.skills.horizon);
        if refs.is_empty() {
            return Ok(None);
        }
        let batch = model.dims.windows(ts, &refs);
        explained_variance(&model, batch.actions.view()).map(Some)
    };
    let report = SkillReport {
        config: cfg.clone(),
        seed,
        train_trajectories: train.len(),
        holdout_trajectories: hold.len(),
        train_windows: log.windows,
        holdout_windows: window_starts(&hold, cfg.skills.horizon).len(),
        explained_variance_train: ev(&train)?.unwrap_or(f64::NAN),
        explained_variance_holdout: ev(&hold)?,
        epochs: log.epochs,
    };
    model.save(&paths.skills())?;
    write_json(&paths.skill_report(), &report)?;
    info!(
        "seed {seed}: skills trained, held-out explained variance {:?}",
        report.explained_variance_holdout
    );
    Ok(report)
}

fn check_env(cfg: &PipelineConfig, demos: &DemoDataset) -> Result<()> {
    if demos.header.env.name != cfg.env {
        return Err(Error::Config(format!(
            "demos were generated on `{}` but the config names `{}`",
            demos.header.env.name, cfg.env
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub config: PipelineConfig,
    pub seed: u64,
    pub positives: usize,
    pub unlabeled: usize,
    pub lambda: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn train_risk(cfg: &PipelineConfig, out: &Path, seed: u64) -> Result<RiskReport> {
    let paths = SeedPaths::new(out, seed);
    let skills = SkillModel::load(&paths.skills())?;
    let demos = DemoDataset::load(&paths.demos())?;
    check_env(cfg, &demos)?;
    let pu = assemble_pu_data(&demos, &skills, skills.dims.horizon, &mut stage_rng(seed, stage::RISK_DATA, 0))?;
    let lambda = match cfg.risk.lambda {
        Some(l) => l,
        None => estimate_class_prior(&pu)?,
    };
    let mut rng = stage_rng(seed, stage::RISK_TRAIN, 0);
    let mut predictor = RiskPredictor::new(skills.dims.state_dim, skills.dims.skill_dim, &cfg.risk.hidden, &mut rng)?;
    predictor.pu = PuConfig { lambda, xi: cfg.risk.xi };
    predictor.pu.validate()?;
    let mut opt = Adam::new(&predictor.net, AdamConfig::with_lr(cfg.risk.learning_rate));
    let losses = update_predictor(&mut predictor, &pu, &mut opt, cfg.risk.steps, cfg.risk.batch_size, &mut rng)?;
    let window = |ls: &[crate::risk::PuLoss]| ls.iter().map(|l| l.total).sum::<f64>() / ls.len().max(1) as f64;
    let k = losses.len().min(50);
    let report = RiskReport {
        config: cfg.clone(),
        seed,
        positives: pu.positives.len(),
        unlabeled: pu.unlabeled.len(),
        lambda,
        initial_loss: window(&losses[..k]),
        final_loss: window(&losses[losses.len() - k..]),
    };
    pu.save(&paths.pu())?;
    predictor.save(&paths.risk())?;
    write_json(&paths.risk_report(), &report)?;
    info!(
        "seed {seed}: risk predictor trained on {} positive / {} unlabeled pairs, loss {:.4} -> {:.4}",
        report.positives, report.unlabeled, report.initial_loss, report.final_loss
    );
    Ok(report)
}

pub fn diagnose_planning(cfg: &PipelineConfig, out: &Path, seed: u64) -> Result<PlanningDiagnostics> {
    let paths = SeedPaths::new(out, seed);
    let skills = SkillModel::load(&paths.skills())?;
    let predictor = RiskPredictor::load(&paths.risk())?;
    let env = make_env(&cfg.env)?;
    let mut rng = stage_rng(seed, stage::DIAGNOSTICS, 0);
    let states: Vec<_> = (0..cfg.diagnostic_states)
        .map(|_| env.sample_safe_state(&mut rng))
        .collect();
    let diag = planning_diagnostics(&skills, &predictor, &states, &cfg.online.planner, &mut rng)?;
    diag.write_csv(&paths.diagnostics())?;
    Ok(diag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSummary {
    pub config: PipelineConfig,
    pub seed: u64,
    pub mode: RunMode,
    pub env: String,
    pub total_timesteps: usize,
    pub env_steps: usize,
    pub episodes: usize,
    pub violations: usize,
    pub total_reward: f64,
    pub ptr: f64,
    pub ptr_over_v: f64,
    pub ptr_over_v_times_1e3: f64,
    pub zero_violations: bool,
    pub final_window_reward: f64,
    pub sac_updates: usize,
    pub predictor_updates: usize,
    pub online_positive_pairs: usize,
    pub online_unlabeled_pairs: usize,
    pub wall_time_s: f64,
}

pub fn train_online_stage(cfg: &PipelineConfig, out: &Path, seed: u64, mode: RunMode) -> Result<OnlineSummary> {
    let started = Instant::now();
    let paths = SeedPaths::new(out, seed);
    let skills = SkillModel::load(&paths.skills())?;
    let (predictor, offline_pu) = if mode.uses_predictor() {
        (Some(RiskPredictor::load(&paths.risk())?), Some(PuDataset::load(&paths.pu())?))
    } else {
        (None, None)
    };
    let mut env = make_env(&cfg.env)?;
    let online = cfg.with_mode(mode).online;
    let ck_dir = paths.online(mode).join("checkpoints");
    let mut hook = |step: usize, policy: &crate::agent::SkillPolicy, risk: Option<&RiskPredictor>| -> Result<()> {
        policy.save(&ck_dir.join(format!("policy-{step}.json")))?;
        if let Some(r) = risk {
            r.save(&ck_dir.join(format!("risk-{step}.json")))?;
        }
        Ok(())
    };
    let run = train_online(
        env.as_mut(),
        OnlineInputs {
            skills: &skills,
            predictor,
            offline_pu,
        },
        &online,
        seed,
        &mut hook,
    )?;
    run.log.write_csv(&paths.metrics(mode))?;
    run.online_pu.save(&paths.online(mode).join("online_pu.jsonl"))?;
    let ratio = ptr_over_violations(&run.log, run.env_steps)?;
    let curve = reward_vs_violations_curve(&run.log, cfg.curve_window);
    let summary = OnlineSummary {
        config: cfg.with_mode(mode),
        seed,
        mode,
        env: cfg.env.clone(),
        total_timesteps: online.total_timesteps,
        env_steps: run.env_steps,
        episodes: run.log.episodes.len(),
        violations: ratio.violations,
        total_reward: run.log.total_reward(),
        ptr: ratio.ptr,
        ptr_over_v: ratio.ratio,
        ptr_over_v_times_1e3: ratio.times_1e3(),
        zero_violations: ratio.zero_violations,
        final_window_reward: curve.last().map_or(0.0, |p| p.y),
        sac_updates: run.sac_updates,
        predictor_updates: run.predictor_updates,
        online_positive_pairs: run.online_pu.positives.len(),
        online_unlabeled_pairs: run.online_pu.unlabeled.len(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(&paths.summary(mode), &summary)?;
    info!(
        "seed {seed} {mode}: {} episodes, {} violations, final reward {:.3}, PtR/#V x1e3 {:.4}",
        summary.episodes, summary.violations, summary.final_window_reward, summary.ptr_over_v_times_1e3
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub seed: u64,
    pub mode: RunMode,
    pub env: String,
    pub total_timesteps: usize,
    pub ratio: PtrRatio,
    pub ptr_over_v_times_1e3: f64,
    pub final_window_reward: f64,
    pub reward_vs_violations: Vec<CurvePoint>,
}

/// Recomputes the metrics of one finished online run from its CSV.
pub fn evaluate(cfg: &PipelineConfig, out: &Path, seed: u64, mode: RunMode) -> Result<Evaluation> {
    let paths = SeedPaths::new(out, seed);
    let log = RunLog::read_csv(&paths.metrics(mode))?;
    let t = log.episodes.last().map_or(cfg.online.total_timesteps, |e| e.env_step);
    let ratio = ptr_over_violations(&log, t.max(1))?;
    let curve = reward_vs_violations_curve(&log, cfg.curve_window);
    let eval = Evaluation {
        seed,
        mode,
        env: cfg.env.clone(),
        total_timesteps: t,
        ratio,
        ptr_over_v_times_1e3: ratio.times_1e3(),
        final_window_reward: curve.last().map_or(0.0, |p| p.y),
        reward_vs_violations: curve,
    };
    write_json(&paths.evaluation(mode), &eval)?;
    Ok(eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub method: String,
    pub seed: u64,
    pub ptr_over_v_times_1e3: f64,
    pub violations: usize,
    pub final_window_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: PipelineConfig,
    pub table: Vec<TableRow>,
    pub runs: Vec<RunEntry>,
}

/// Table rows and seed-aggregated curves for every mode with finished runs.
pub fn report(cfg: &PipelineConfig, out: &Path, modes: &[RunMode]) -> Result<Report> {
    let dir = report_dir(out);
    let mut table = Vec::new();
    let mut runs = Vec::new();
    for &mode in modes {
        let mut logs = Vec::new();
        for &seed in &cfg.seeds {
            let log = RunLog::read_csv(&SeedPaths::new(out, seed).metrics(mode))?;
            let t = log.episodes.last().map_or(1, |e| e.env_step);
            let ratio = ptr_over_violations(&log, t)?;
            runs.push(RunEntry {
                method: mode.name().into(),
                seed,
                ptr_over_v_times_1e3: ratio.times_1e3(),
                violations: ratio.violations,
                final_window_reward: reward_vs_violations_curve(&log, cfg.curve_window).last().map_or(0.0, |p| p.y),
            });
            logs.push((log, t));
        }
        table.push(table_row(mode.name(), &cfg.env, &logs)?);
        let curves = dir.join("curves");
        let band = |f: &dyn Fn(&RunLog) -> Vec<CurvePoint>| aggregate_seeds(&logs.iter().map(|(l, _)| f(l)).collect::<Vec<_>>());
        band(&|l| reward_vs_violations_curve(l, cfg.curve_window))?
            .write_csv(&curves.join(format!("{}_reward_vs_violations.csv", mode.slug())))?;
        band(&|l| reward_vs_steps_curve(l, cfg.curve_window))?
            .write_csv(&curves.join(format!("{}_reward_vs_steps.csv", mode.slug())))?;
        band(&violations_vs_steps_curve)?.write_csv(&curves.join(format!("{}_violations_vs_steps.csv", mode.slug())))?;
    }
    let report = Report {
        config: cfg.clone(),
        table,
        runs,
    };
    write_json(&dir.join("table.json"), &report)?;
    Ok(report)
}

/// Offline stages for one seed.
pub fn run_offline(cfg: &PipelineConfig, out: &Path, seed: u64) -> Result<()> {
    gen_demos(cfg, out, seed)?;
    train_skills(cfg, out, seed)?;
    train_risk(cfg, out, seed)?;
    Ok(())
}

/// Every stage for every seed and the given modes, then the report.
pub fn run_all(cfg: &PipelineConfig, out: &Path, modes: &[RunMode]) -> Result<Report> {
    for &seed in &cfg.seeds {
        run_offline(cfg, out, seed)?;
        diagnose_planning(cfg, out, seed)?;
        for &mode in modes {
            train_online_stage(cfg, out, seed, mode)?;
            evaluate(cfg, out, seed, mode)?;
        }
    }
    report(cfg, out, modes)
}
