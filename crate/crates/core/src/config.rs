//! Pipeline configuration as flat `key = value` text.
//!
//! ```text
//! # comment
//! env = hazard_world_2d
//! seeds = 0, 1, 2
//! planner.n_samples = 512
//! ```
//!
//! Every key is optional; unknown keys are an error that lists all of them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{OnlineConfig, RunMode};
use crate::env::HAZARD_WORLD_2D;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_WINDOW;
use crate::planner::PlannerInit;
use crate::risk::PuConfig;
use crate::skills::SkillModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub count: usize,
    pub noise_scale: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            count: 400,
            noise_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTrainConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fixed class prior; estimated from the data when absent.
    pub lambda: Option<f64>,
    pub xi: f64,
}

impl Default for RiskTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            steps: 3000,
            batch_size: 128,
            learning_rate: 1e-3,
            lambda: None,
            xi: PuConfig::default().xi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub env: String,
    pub seeds: Vec<u64>,
    pub demos: DemoConfig,
    pub skills: SkillModelConfig,
    pub holdout_fraction: f64,
    pub risk: RiskTrainConfig,
    pub online: OnlineConfig,
    pub diagnostic_states: usize,
    pub curve_window: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            env: HAZARD_WORLD_2D.into(),
            seeds: vec![0],
            demos: DemoConfig::default(),
            skills: SkillModelConfig::default(),
            holdout_fraction: 0.2,
            risk: RiskTrainConfig::default(),
            online: OnlineConfig::default(),
            diagnostic_states: 100,
            curve_window: DEFAULT_WINDOW,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    match v {
        "" | "auto" | "none" => Ok(None),
        _ => parse(key, v).map(Some),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn init_name(i: PlannerInit) -> &'static str {
    match i {
        PlannerInit::PolicySamples => "policy_samples",
        PlannerInit::Proposal => "proposal",
    }
}

impl PipelineConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut c = Self::default();
        let mut unknown = Vec::new();
        for (k, v) in &pairs {
            if !c.set(k, v)? {
                unknown.push(k.clone());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies one setting; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let k = key;
        match key {
            "env" => self.env = v.to_string(),
            "seeds" => self.seeds = parse_list(k, v)?,
            "demos.count" => self.demos.count = parse(k, v)?,
            "demos.noise_scale" => self.demos.noise_scale = parse(k, v)?,
            "skills.horizon" => self.skills.horizon = parse(k, v)?,
            "skills.skill_dim" => self.skills.skill_dim = parse(k, v)?,
            "skills.hidden" => self.skills.hidden = parse_list(k, v)?,
            "skills.beta" => self.skills.beta = parse(k, v)?,
            "skills.epochs" => self.skills.epochs = parse(k, v)?,
            "skills.batch_size" => self.skills.batch_size = parse(k, v)?,
            "skills.learning_rate" => self.skills.learning_rate = parse(k, v)?,
            "skills.holdout_fraction" => self.holdout_fraction = parse(k, v)?,
            "risk.hidden" => self.risk.hidden = parse_list(k, v)?,
            "risk.steps" => self.risk.steps = parse(k, v)?,
            "risk.batch_size" => self.risk.batch_size = parse(k, v)?,
            "risk.learning_rate" => self.risk.learning_rate = parse(k, v)?,
            "risk.lambda" => self.risk.lambda = parse_opt(k, v)?,
            "risk.xi" => self.risk.xi = parse(k, v)?,
            "planner.n_samples" => self.online.planner.n_samples = parse(k, v)?,
            "planner.top_k" => self.online.planner.top_k = parse(k, v)?,
            "planner.n_iterations" => self.online.planner.n_iterations = parse(k, v)?,
            "planner.variance_floor" => self.online.planner.variance_floor = parse(k, v)?,
            "planner.init" => {
                self.online.planner.init = match v {
                    "policy_samples" => PlannerInit::PolicySamples,
                    "proposal" | "prior" => PlannerInit::Proposal,
                    _ => return Err(Error::Config(format!("`{k}`: expected policy_samples or proposal, got `{v}`"))),
                }
            }
            "sac.alpha" => self.online.sac.alpha = parse(k, v)?,
            "sac.gamma" => self.online.sac.gamma = parse(k, v)?,
            "sac.tau" => self.online.sac.tau = parse(k, v)?,
            "sac.batch_size" => self.online.sac.batch_size = parse(k, v)?,
            "sac.actor_lr" => self.online.sac.actor_lr = parse(k, v)?,
            "sac.critic_lr" => self.online.sac.critic_lr = parse(k, v)?,
            "sac.critic_hidden" => self.online.sac.critic_hidden = parse_list(k, v)?,
            "online.mode" => self.online.mode = v.parse()?,
            "online.total_timesteps" => self.online.total_timesteps = parse(k, v)?,
            "online.warmup_steps" => self.online.warmup_steps = parse(k, v)?,
            "online.buffer_capacity" => self.online.buffer_capacity = parse(k, v)?,
            "online.risk_update_steps" => self.online.risk_update_steps = parse(k, v)?,
            "online.risk_batch_size" => self.online.risk_batch_size = parse(k, v)?,
            "online.risk_learning_rate" => self.online.risk_learning_rate = parse(k, v)?,
            "online.lambda" => self.online.lambda = parse_opt(k, v)?,
            "online.checkpoint_every" => self.online.checkpoint_every = parse(k, v)?,
            "diagnostics.states" => self.diagnostic_states = parse(k, v)?,
            "metrics.window" => self.curve_window = parse(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.demos.count == 0 || !(self.demos.noise_scale >= 0.0) {
            return Err(Error::Config("`demos.count` must be >= 1 and noise >= 0".into()));
        }
        if self.skills.horizon == 0 || self.skills.skill_dim == 0 || self.skills.epochs == 0 || self.skills.batch_size == 0 {
            return Err(Error::Config("skill horizon, dim, epochs and batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("`skills.holdout_fraction` must be in [0, 1)".into()));
        }
        if self.risk.batch_size == 0 {
            return Err(Error::Config("`risk.batch_size` must be >= 1".into()));
        }
        PuConfig {
            lambda: self.risk.lambda.unwrap_or(0.1),
            xi: self.risk.xi,
        }
        .validate()?;
        if self.diagnostic_states == 0 {
            return Err(Error::Config("`diagnostics.states` must be >= 1".into()));
        }
        self.online.validate()
    }

    /// Every key with its current value, in the text format.
    pub fn to_text(&self) -> String {
        let o = &self.online;
        let s = &self.skills;
        let opt = |x: Option<f64>| x.map_or("auto".to_string(), |v| v.to_string());
        let rows: Vec<(&str, String)> = vec![
            ("env", self.env.clone()),
            ("seeds", join(&self.seeds)),
            ("demos.count", self.demos.count.to_string()),
            ("demos.noise_scale", self.demos.noise_scale.to_string()),
            ("skills.horizon", s.horizon.to_string()),
            ("skills.skill_dim", s.skill_dim.to_string()),
            ("skills.hidden", join(&s.hidden)),
            ("skills.beta", s.beta.to_string()),
            ("skills.epochs", s.epochs.to_string()),
            ("skills.batch_size", s.batch_size.to_string()),
            ("skills.learning_rate", s.learning_rate.to_string()),
            ("skills.holdout_fraction", self.holdout_fraction.to_string()),
            ("risk.hidden", join(&self.risk.hidden)),
            ("risk.steps", self.risk.steps.to_string()),
            ("risk.batch_size", self.risk.batch_size.to_string()),
            ("risk.learning_rate", self.risk.learning_rate.to_string()),
            ("risk.lambda", opt(self.risk.lambda)),
            ("risk.xi", self.risk.xi.to_string()),
            ("planner.n_samples", o.planner.n_samples.to_string()),
            ("planner.top_k", o.planner.top_k.to_string()),
            ("planner.n_iterations", o.planner.n_iterations.to_string()),
            ("planner.variance_floor", o.planner.variance_floor.to_string()),
            ("planner.init", init_name(o.planner.init).to_string()),
            ("sac.alpha", o.sac.alpha.to_string()),
            ("sac.gamma", o.sac.gamma.to_string()),
            ("sac.tau", o.sac.tau.to_string()),
            ("sac.batch_size", o.sac.batch_size.to_string()),
            ("sac.actor_lr", o.sac.actor_lr.to_string()),
            ("sac.critic_lr", o.sac.critic_lr.to_string()),
            ("sac.critic_hidden", join(&o.sac.critic_hidden)),
            ("online.mode", o.mode.name().to_string()),
            ("online.total_timesteps", o.total_timesteps.to_string()),
            ("online.warmup_steps", o.warmup_steps.to_string()),
            ("online.buffer_capacity", o.buffer_capacity.to_string()),
            ("online.risk_update_steps", o.risk_update_steps.to_string()),
            ("online.risk_batch_size", o.risk_batch_size.to_string()),
            ("online.risk_learning_rate", o.risk_learning_rate.to_string()),
            ("online.lambda", opt(o.lambda)),
            ("online.checkpoint_every", o.checkpoint_every.to_string()),
            ("diagnostics.states", self.diagnostic_states.to_string()),
            ("metrics.window", self.curve_window.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    pub fn with_mode(&self, mode: RunMode) -> Self {
        let mut c = self.clone();
        c.online.mode = mode;
        c
    }
}
