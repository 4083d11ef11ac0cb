//! Scripted demonstrations.
//!
//! Controllers are goal-seeking with Gaussian exploration noise, so a
//! dataset mixes mostly-safe behaviour with occasional violations.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{
    Action, CliffCorridorParams, EnvSpec, Environment, HazardWorldParams, State, CLIFF_CORRIDOR,
    HAZARD_WORLD_2D,
};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Goal,
    Violation,
    Truncation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub ended_by: EndReason,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Index of the violating step, if any. Only the last step may violate.
    pub fn violation_index(&self) -> Option<usize> {
        match self.steps.last() {
            Some(s) if s.cost > 0.0 => Some(self.steps.len() - 1),
            _ => None,
        }
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Empty("trajectory"));
        }
        let n = self.steps.len();
        if self.steps[..n - 1].iter().any(|s| s.cost > 0.0) {
            return Err(Error::Usage("violation before the final step of a trajectory".into()));
        }
        if (self.ended_by == EndReason::Violation) != (self.steps[n - 1].cost > 0.0) {
            return Err(Error::Usage("ended_by disagrees with the final cost".into()));
        }
        Ok(())
    }
}

/// JSON-lines record for one trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrajectoryRecord {
    states: Vec<State>,
    actions: Vec<Action>,
    rewards: Vec<f64>,
    costs: Vec<f64>,
    ended_by: EndReason,
}

/// First line of a demonstration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoHeader {
    pub env: EnvSpec,
    pub env_params: serde_json::Value,
    pub controller: String,
    pub seed: u64,
    pub noise_scale: f64,
    pub n_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStats {
    pub count: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    pub goals: usize,
    pub mean_length: f64,
    pub total_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub header: DemoHeader,
    pub trajectories: Vec<Trajectory>,
}

impl DemoDataset {
    pub fn stats(&self) -> DemoStats {
        let count = self.trajectories.len();
        let violations = self
            .trajectories
            .iter()
            .filter(|t| t.ended_by == EndReason::Violation)
            .count();
        let goals = self.trajectories.iter().filter(|t| t.ended_by == EndReason::Goal).count();
        let total_steps: usize = self.trajectories.iter().map(Trajectory::len).sum();
        DemoStats {
            count,
            violations,
            violation_fraction: violations as f64 / count.max(1) as f64,
            goals,
            mean_length: total_steps as f64 / count.max(1) as f64,
            total_steps,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for t in &self.trajectories {
            let rec = TrajectoryRecord {
                states: t.steps.iter().map(|s| s.state.clone()).collect(),
                actions: t.steps.iter().map(|s| s.action.clone()).collect(),
                rewards: t.steps.iter().map(|s| s.reward).collect(),
                costs: t.steps.iter().map(|s| s.cost).collect(),
                ended_by: t.ended_by,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bad = |reason: String| Error::Artifact {
            path: path.display().to_string(),
            reason,
        };
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header: DemoHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?).map_err(|e| bad(format!("header: {e}")))?,
            None => return Err(bad("empty file".into())),
        };
        let mut trajectories = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord =
                serde_json::from_str(&line).map_err(|e| bad(format!("trajectory {i}: {e}")))?;
            let n = rec.states.len();
            if rec.actions.len() != n || rec.rewards.len() != n || rec.costs.len() != n {
                return Err(bad(format!("trajectory {i}: ragged columns")));
            }
            let steps = (0..n)
                .map(|k| Step {
                    state: rec.states[k].clone(),
                    action: rec.actions[k].clone(),
                    reward: rec.rewards[k],
                    cost: rec.costs[k],
                })
                .collect();
            let t = Trajectory {
                steps,
                ended_by: rec.ended_by,
            };
            t.validate().map_err(|e| bad(format!("trajectory {i}: {e}")))?;
            trajectories.push(t);
        }
        if trajectories.is_empty() {
            return Err(bad("no trajectories".into()));
        }
        Ok(Self { header, trajectories })
    }
}

/// Goal seeking with hazard repulsion and a tangential detour term.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardSeeker {
    pub params: HazardWorldParams,
    pub attraction_gain: f64,
    pub repulsion_gain: f64,
    /// Distance beyond a hazard edge at which repulsion switches on.
    pub influence: f64,
}

impl HazardSeeker {
    pub fn new(params: HazardWorldParams) -> Self {
        Self {
            params,
            attraction_gain: 1.0,
            repulsion_gain: 0.15,
            influence: 0.15,
        }
    }

    fn nominal(&self, p: [f64; 2]) -> [f64; 2] {
        let g = self.params.goal.center;
        let to_goal = [g[0] - p[0], g[1] - p[1]];
        let dist = (to_goal[0] * to_goal[0] + to_goal[1] * to_goal[1]).sqrt();
        let step = self.params.max_displacement;
        // Full-speed approach, proportional inside one step of the goal.
        let k = if dist > 1e-12 { (self.attraction_gain * step / dist).min(1.0) } else { 0.0 };
        let mut a = [k * to_goal[0], k * to_goal[1]];
        for h in &self.params.hazards {
            let d = h.distance(p);
            let clearance = d - h.radius;
            if d < 1e-12 || clearance >= self.influence {
                continue;
            }
            let w = self.repulsion_gain * (1.0 - clearance.max(0.0) / self.influence);
            let out = [(p[0] - h.center[0]) / d, (p[1] - h.center[1]) / d];
            // Slide around the hazard on the side facing the goal.
            let mut tangent = [-out[1], out[0]];
            if tangent[0] * to_goal[0] + tangent[1] * to_goal[1] < 0.0 {
                tangent = [-tangent[0], -tangent[1]];
            }
            a[0] += w * (out[0] + tangent[0]);
            a[1] += w * (out[1] + tangent[1]);
        }
        a
    }
}

/// Drives forward while cancelling the predicted crosswind.
#[derive(Debug, Clone, PartialEq)]
pub struct CorridorFollower {
    pub params: CliffCorridorParams,
    pub speed: f64,
    pub centering_gain: f64,
    /// Fraction of the crosswind the controller compensates.
    pub drift_compensation: f64,
}

impl CorridorFollower {
    pub fn new(params: CliffCorridorParams) -> Self {
        Self {
            params,
            speed: 0.9,
            centering_gain: 0.3,
            drift_compensation: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedController {
    HazardSeeker(HazardSeeker),
    CorridorFollower(CorridorFollower),
}

impl ScriptedController {
    /// The default controller for an environment, configured from its parameters.
    pub fn for_env(env: &dyn Environment) -> Result<Self> {
        let params = env.params_json();
        match env.spec().name.as_str() {
            HAZARD_WORLD_2D => Ok(Self::HazardSeeker(HazardSeeker::new(serde_json::from_value(params)?))),
            CLIFF_CORRIDOR => Ok(Self::CorridorFollower(CorridorFollower::new(serde_json::from_value(
                params,
            )?))),
            other => Err(Error::Config(format!("no scripted controller for `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::HazardSeeker(_) => "hazard_seeker",
            Self::CorridorFollower(_) => "corridor_follower",
        }
    }

    pub fn env_name(&self) -> &'static str {
        match self {
            Self::HazardSeeker(_) => HAZARD_WORLD_2D,
            Self::CorridorFollower(_) => CLIFF_CORRIDOR,
        }
    }

    /// Nominal action plus `N(0, noise_scale²)` per component, clamped to
    /// the action bounds.
    pub fn act<R: Rng + ?Sized>(&self, state: &State, rng: &mut R, noise_scale: f64) -> Action {
        let (nominal, bound) = match self {
            Self::HazardSeeker(c) => {
                let s = &state.0;
                (c.nominal([s[0], s[1]]), c.params.max_displacement)
            }
            Self::CorridorFollower(c) => {
                let p = &c.params;
                let x = (state.0[0] + 1.0) * p.n_cells as f64 / 2.0;
                let y = state.0[1] * p.path_half_width;
                let fwd = c.speed;
                let wind = p.drift * fwd * (p.drift_freq * x).sin();
                let lat = (-c.centering_gain * y - c.drift_compensation * wind) / p.lateral_gain;
                ([fwd, lat], 1.0)
            }
        };
        Action(
            nominal
                .iter()
                .map(|a| {
                    let noise = if noise_scale > 0.0 {
                        noise_scale * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    (a.clamp(-bound, bound) + noise).clamp(-bound, bound)
                })
                .collect(),
        )
    }
}

/// Rolls out `n_trajectories` episodes with the controller.
pub fn generate_demonstrations(
    env: &mut dyn Environment,
    controller: &ScriptedController,
    n_trajectories: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<DemoDataset> {
    if n_trajectories == 0 {
        return Err(Error::Config("n_trajectories must be >= 1".into()));
    }
    if controller.env_name() != env.spec().name {
        return Err(Error::Config(format!(
            "controller `{}` cannot drive environment `{}`",
            controller.name(),
            env.spec().name
        )));
    }
    let mut rng = seeded(seed);
    let mut trajectories = Vec::with_capacity(n_trajectories);
    for _ in 0..n_trajectories {
        let mut state = env.reset(&mut rng);
        let mut steps = Vec::new();
        let ended_by = loop {
            let action = env.spec().clamp_action(&controller.act(&state, &mut rng, noise_scale))?;
            let r = env.step(&action)?;
            steps.push(Step {
                state,
                action,
                reward: r.reward,
                cost: r.cost,
            });
            state = r.next_state.clone();
            if r.violated() {
                break EndReason::Violation;
            } else if r.terminated {
                break EndReason::Goal;
            } else if r.truncated {
                break EndReason::Truncation;
            }
        };
        trajectories.push(Trajectory { steps, ended_by });
    }
    Ok(DemoDataset {
        header: DemoHeader {
            env: env.spec().clone(),
            env_params: env.params_json(),
            controller: controller.name().into(),
            seed,
            noise_scale,
            n_trajectories,
        },
        trajectories,
    })
}
