use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::State;
use crate::error::{Error, Result};
use crate::skills::Skill;

/// One executed skill: `steps_executed` primitive steps from `state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTransition {
    pub state: State,
    pub skill: Skill,
    /// Undiscounted sum of the collected step rewards.
    pub reward: f64,
    pub next_state: State,
    pub violated: bool,
    /// Episode ended by termination (violation or goal). Truncation is not terminal.
    pub terminal: bool,
    pub steps_executed: usize,
}

impl SkillTransition {
    /// `γ^steps_executed` unless terminal, else 0.
    pub fn discount(&self, gamma: f64) -> f64 {
        if self.terminal {
            0.0
        } else {
            gamma.powi(self.steps_executed as i32)
        }
    }
}

/// Fixed-capacity FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<SkillTransition>,
    capacity: usize,
    next: usize,
}

/// Stacked transitions ready for the SAC losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub states: Array2<f64>,
    pub skills: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    /// `γ^steps_executed · (1 − terminal)`
    pub discounts: Vec<f64>,
}

impl TransitionBatch {
    pub fn from_transitions(ts: &[&SkillTransition], gamma: f64) -> Self {
        let n = ts.len();
        let sd = ts.first().map_or(0, |t| t.state.0.len());
        let zd = ts.first().map_or(0, |t| t.skill.0.len());
        let rows = |f: &dyn Fn(&SkillTransition) -> &[f64], w: usize| {
            Array2::from_shape_vec((n, w), ts.iter().flat_map(|t| f(t).iter().copied()).collect()).expect("uniform widths")
        };
        Self {
            states: rows(&|t| &t.state.0, sd),
            skills: rows(&|t| &t.skill.0, zd),
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_states: rows(&|t| &t.next_state.0, sd),
            discounts: ts.iter().map(|t| t.discount(gamma)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be >= 1".into()));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(4096)),
            capacity,
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: SkillTransition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &SkillTransition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, gamma: f64, rng: &mut R) -> Result<TransitionBatch> {
        if self.items.len() < batch_size || batch_size == 0 {
            return Err(Error::Usage(format!(
                "replay buffer holds {} transitions, batch needs {batch_size}",
                self.items.len()
            )));
        }
        let picked: Vec<&SkillTransition> = (0..batch_size)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect();
        Ok(TransitionBatch::from_transitions(&picked, gamma))
    }
}
