use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Action, Bound, EnvSpec, Environment, EpisodeClock, State, StepResult, CLIFF_CORRIDOR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffCorridorParams {
    pub n_cells: usize,
    /// Lateral offset beyond which the agent falls off the cliff.
    pub path_half_width: f64,
    pub forward_gain: f64,
    pub lateral_gain: f64,
    /// Speed-dependent crosswind `drift · a_fwd · sin(drift_freq · x)`.
    pub drift: f64,
    pub drift_freq: f64,
    pub max_episode_steps: usize,
}

impl Default for CliffCorridorParams {
    fn default() -> Self {
        Self {
            n_cells: 20,
            path_half_width: 0.5,
            forward_gain: 0.5,
            lateral_gain: 0.25,
            drift: 0.4,
            drift_freq: 1.3,
            max_episode_steps: 60,
        }
    }
}

/// A corridor of `n_cells` cells flanked by cliffs.
///
/// The agent has a continuous position `(x, y)`; the cell index is
/// `floor(x)`. Observations are `(2x / n_cells − 1, y / path_half_width)`.
/// Reward is the number of cells advanced this step; the last cell is the goal.
#[derive(Debug, Clone)]
pub struct CliffCorridor {
    spec: EnvSpec,
    params: CliffCorridorParams,
    x: f64,
    y: f64,
    clock: EpisodeClock,
}

impl CliffCorridor {
    pub fn new(params: CliffCorridorParams) -> Result<Self> {
        if params.n_cells < 2 || !(params.path_half_width > 0.0) {
            return Err(Error::Config("cliff_corridor: need >= 2 cells and a positive path width".into()));
        }
        let spec = EnvSpec {
            name: CLIFF_CORRIDOR.into(),
            state_dim: 2,
            action_dim: 2,
            action_bounds: vec![Bound { lo: -1.0, hi: 1.0 }; 2],
            max_episode_steps: params.max_episode_steps,
        };
        spec.validate()?;
        Ok(Self {
            spec,
            params,
            x: 0.5,
            y: 0.0,
            clock: EpisodeClock::default(),
        })
    }

    pub fn params(&self) -> &CliffCorridorParams {
        &self.params
    }

    pub fn embed(&self, x: f64, y: f64) -> State {
        State(vec![
            2.0 * x / self.params.n_cells as f64 - 1.0,
            y / self.params.path_half_width,
        ])
    }

    /// Inverse of [`Self::embed`].
    pub fn position_of(&self, s: &State) -> (f64, f64) {
        (
            (s.0[0] + 1.0) * self.params.n_cells as f64 / 2.0,
            s.0[1] * self.params.path_half_width,
        )
    }

    pub fn cell(x: f64) -> i64 {
        x.floor() as i64
    }

    fn goal_cell(&self) -> i64 {
        self.params.n_cells as i64 - 1
    }

    #[cfg(test)]
    pub(crate) fn place(&mut self, x: f64, y: f64) {
        self.x = x;
        self.y = y;
        self.clock.start();
    }
}

impl Environment for CliffCorridor {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> State {
        self.x = 0.5;
        self.y = 0.0;
        self.clock.start();
        self.embed(self.x, self.y)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        self.clock.check_live()?;
        let a = self.spec.clamp_action(action)?;
        let p = &self.params;
        let x_max = p.n_cells as f64 - 1e-9;
        let x_new = (self.x + p.forward_gain * a.0[0]).clamp(0.0, x_max);
        let y_new = self.y + p.lateral_gain * a.0[1] + p.drift * a.0[0] * (p.drift_freq * self.x).sin();
        let reward = (Self::cell(x_new) - Self::cell(self.x)) as f64;
        self.x = x_new;
        self.y = y_new;

        let mut cost = 0.0;
        let mut terminated = false;
        if y_new.abs() >= p.path_half_width {
            cost = 1.0;
            terminated = true;
        } else if Self::cell(x_new) >= self.goal_cell() {
            terminated = true;
        }
        let at_limit = self.clock.tick(self.spec.max_episode_steps);
        let truncated = !terminated && at_limit;
        if terminated || truncated {
            self.clock.finish();
        }
        Ok(StepResult {
            next_state: self.embed(x_new, y_new),
            reward,
            cost,
            terminated,
            truncated,
        })
    }

    fn params_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.params).expect("params serialize")
    }

    fn sample_safe_state(&self, rng: &mut dyn RngCore) -> State {
        let x = rng.random_range(0.0..(self.params.n_cells - 1) as f64);
        let w = self.params.path_half_width;
        let y = rng.random_range(-w..w);
        self.embed(x, y)
    }
}
