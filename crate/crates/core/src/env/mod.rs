//! Toy constrained MDPs with a binary cost signal.
//!
//! Entering a hazard produces `cost = 1` and ends the episode on that step.
//! The violating step's reward is still reported.

mod cliff_corridor;
mod hazard_world;

pub use cliff_corridor::{CliffCorridor, CliffCorridorParams};
pub use hazard_world::{Circle, HazardWorld2D, HazardWorldParams};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const HAZARD_WORLD_2D: &str = "hazard_world_2d";
pub const CLIFF_CORRIDOR: &str = "cliff_corridor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub Vec<f64>);

impl State {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Action {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bounds: Vec<Bound>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::Config(format!("{}: dimensions must be >= 1", self.name)));
        }
        check_dim("action bounds", self.action_dim, self.action_bounds.len())?;
        if self.action_bounds.iter().any(|b| !(b.lo < b.hi)) {
            return Err(Error::Config(format!("{}: action bound with lo >= hi", self.name)));
        }
        if self.max_episode_steps == 0 {
            return Err(Error::Config(format!("{}: max_episode_steps must be >= 1", self.name)));
        }
        Ok(())
    }

    pub fn clamp_action(&self, action: &Action) -> Result<Action> {
        check_dim("action", self.action_dim, action.0.len())?;
        Ok(Action(
            action
                .0
                .iter()
                .zip(&self.action_bounds)
                .map(|(a, b)| b.clamp(*a))
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    pub reward: f64,
    pub cost: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn violated(&self) -> bool {
        self.cost > 0.0
    }

    /// Terminated without a violation, i.e. the goal was reached.
    pub fn reached_goal(&self) -> bool {
        self.terminated && !self.violated()
    }

    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// A single-threaded episodic CMDP.
pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Draws a start state using only `rng` and zeroes the step counter.
    fn reset(&mut self, rng: &mut dyn RngCore) -> State;

    /// Applies a (clamped) action. Stepping a finished or never-reset
    /// episode is an [`Error::Usage`].
    fn step(&mut self, action: &Action) -> Result<StepResult>;

    /// Environment parameters, echoed into run summaries.
    fn params_json(&self) -> serde_json::Value;

    /// Draws a state uniformly from the reachable, non-hazardous state space.
    fn sample_safe_state(&self, rng: &mut dyn RngCore) -> State;
}

pub fn make_env(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        HAZARD_WORLD_2D => Ok(Box::new(HazardWorld2D::new(HazardWorldParams::default())?)),
        CLIFF_CORRIDOR => Ok(Box::new(CliffCorridor::new(CliffCorridorParams::default())?)),
        other => Err(Error::Config(format!(
            "unknown environment `{other}` (expected `{HAZARD_WORLD_2D}` or `{CLIFF_CORRIDOR}`)"
        ))),
    }
}

/// Shared episode bookkeeping for the concrete environments.
#[derive(Debug, Clone, Default)]
pub(crate) struct EpisodeClock {
    steps: usize,
    live: bool,
}

impl EpisodeClock {
    pub(crate) fn start(&mut self) {
        self.steps = 0;
        self.live = true;
    }

    pub(crate) fn check_live(&self) -> Result<()> {
        if self.live {
            Ok(())
        } else {
            Err(Error::Usage("step called on a finished episode; call reset first".into()))
        }
    }

    /// Advances one step; returns whether the step limit was hit.
    pub(crate) fn tick(&mut self, max_steps: usize) -> bool {
        self.steps += 1;
        self.steps >= max_steps
    }

    pub(crate) fn finish(&mut self) {
        self.live = false;
    }
}
