use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Action, Bound, EnvSpec, Environment, EpisodeClock, State, StepResult, HAZARD_WORLD_2D};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Circle {
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2)).sqrt()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.distance(p) < self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardWorldParams {
    pub hazards: Vec<Circle>,
    pub goal: Circle,
    /// Start box `[lo, hi]` applied to both coordinates.
    pub start_lo: f64,
    pub start_hi: f64,
    pub max_displacement: f64,
    pub distance_scale: f64,
    pub goal_bonus: f64,
    pub max_episode_steps: usize,
}

impl Default for HazardWorldParams {
    fn default() -> Self {
        Self {
            hazards: vec![
                Circle { center: [-0.45, -0.35], radius: 0.15 },
                Circle { center: [0.0, 0.05], radius: 0.15 },
                Circle { center: [0.35, 0.45], radius: 0.15 },
            ],
            goal: Circle { center: [0.7, 0.7], radius: 0.1 },
            start_lo: -1.0,
            start_hi: -0.8,
            max_displacement: 0.1,
            distance_scale: 0.1,
            goal_bonus: 10.0,
            max_episode_steps: 100,
        }
    }
}

/// Point mass in `[-1, 1]²`; the action is a clamped displacement.
///
/// Per step reward is `-distance_scale · ‖pos − goal‖` measured after the
/// move, plus `goal_bonus` on entering the goal circle (which terminates).
#[derive(Debug, Clone)]
pub struct HazardWorld2D {
    spec: EnvSpec,
    params: HazardWorldParams,
    pos: [f64; 2],
    clock: EpisodeClock,
}

impl HazardWorld2D {
    pub fn new(params: HazardWorldParams) -> Result<Self> {
        for h in &params.hazards {
            let gap = h.distance(params.goal.center);
            if gap < h.radius + params.goal.radius {
                return Err(Error::Config("hazard_world_2d: hazard overlaps the goal".into()));
            }
        }
        if !(params.start_lo < params.start_hi) {
            return Err(Error::Config("hazard_world_2d: empty start region".into()));
        }
        let bound = Bound {
            lo: -params.max_displacement,
            hi: params.max_displacement,
        };
        let spec = EnvSpec {
            name: HAZARD_WORLD_2D.into(),
            state_dim: 2,
            action_dim: 2,
            action_bounds: vec![bound; 2],
            max_episode_steps: params.max_episode_steps,
        };
        spec.validate()?;
        Ok(Self {
            spec,
            params,
            pos: [0.0; 2],
            clock: EpisodeClock::default(),
        })
    }

    pub fn params(&self) -> &HazardWorldParams {
        &self.params
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn in_hazard(&self, p: [f64; 2]) -> bool {
        self.params.hazards.iter().any(|h| h.contains(p))
    }

    /// Reward for arriving at `p`, excluding the goal bonus.
    pub fn distance_reward(&self, p: [f64; 2]) -> f64 {
        -self.params.distance_scale * self.params.goal.distance(p)
    }

    #[cfg(test)]
    pub(crate) fn place(&mut self, p: [f64; 2]) {
        self.pos = p;
        self.clock.start();
    }
}

impl Environment for HazardWorld2D {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> State {
        let (lo, hi) = (self.params.start_lo, self.params.start_hi);
        self.pos = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        self.clock.start();
        State(self.pos.to_vec())
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        self.clock.check_live()?;
        let a = self.spec.clamp_action(action)?;
        let p = [
            (self.pos[0] + a.0[0]).clamp(-1.0, 1.0),
            (self.pos[1] + a.0[1]).clamp(-1.0, 1.0),
        ];
        self.pos = p;
        let mut reward = self.distance_reward(p);
        let mut cost = 0.0;
        let mut terminated = false;
        if self.in_hazard(p) {
            cost = 1.0;
            terminated = true;
        } else if self.params.goal.contains(p) {
            reward += self.params.goal_bonus;
            terminated = true;
        }
        let at_limit = self.clock.tick(self.spec.max_episode_steps);
        let truncated = !terminated && at_limit;
        if terminated || truncated {
            self.clock.finish();
        }
        Ok(StepResult {
            next_state: State(p.to_vec()),
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
        loop {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if !self.in_hazard(p) && !self.params.goal.contains(p) {
                return State(p.to_vec());
            }
        }
    }
}
