//! Online safe skill learning.
//!
//! Each decision picks a skill (risk-planned, naively filtered, or straight
//! from the policy depending on [`RunMode`]), runs its decoded actions until
//! the skill ends or the episode does, stores the skill transition, and
//! routes the visited decision pairs into the PU sets. The risk predictor is
//! refreshed at every episode end and SAC takes one step per skill after a
//! warmup.

mod buffer;
mod sac;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{ReplayBuffer, SkillTransition, TransitionBatch};
pub use sac::{
    actor_loss_and_grad, critic_loss_and_grad, critic_targets, sac_update, ActorLoss, CriticLoss, SacConfig, SacLosses,
    SacOptimizers, SkillPolicy, POLICY_CHECKPOINT_KIND,
};

use crate::env::{Environment, State};
use crate::error::{check_dim, Error, Result};
use crate::metrics::{EpisodeRecord, RunLog};
use crate::nn::{Adam, AdamConfig};
use crate::planner::{naive_planning, risk_planning, PlannerConfig};
use crate::risk::{estimate_class_prior, update_predictor, DecisionPair, PuDataset, PuLabel, RiskPredictor};
use crate::rng::{stage, stage_rng};
use crate::skills::{Skill, SkillModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunMode {
    /// Full iterative risk planning.
    #[serde(rename = "SSkP")]
    Planning,
    /// Lowest predicted risk among one batch of policy samples.
    #[serde(rename = "SSkP-NP")]
    NaivePlanning,
    /// No predictor: sample the policy.
    #[serde(rename = "SSkP-w/o-RP")]
    PolicyOnly,
}

impl RunMode {
    pub const ALL: [RunMode; 3] = [RunMode::Planning, RunMode::NaivePlanning, RunMode::PolicyOnly];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Planning => "SSkP",
            RunMode::NaivePlanning => "SSkP-NP",
            RunMode::PolicyOnly => "SSkP-w/o-RP",
        }
    }

    /// File-system friendly name.
    pub fn slug(self) -> &'static str {
        match self {
            RunMode::Planning => "sskp",
            RunMode::NaivePlanning => "sskp-np",
            RunMode::PolicyOnly => "sskp-wo-rp",
        }
    }

    pub fn uses_predictor(self) -> bool {
        self != RunMode::PolicyOnly
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected SSkP, SSkP-NP or SSkP-w/o-RP)")))
    }
}

pub fn select_skill<R: Rng + ?Sized>(
    mode: RunMode,
    policy: &SkillPolicy,
    predictor: Option<&RiskPredictor>,
    state: &State,
    planner: &PlannerConfig,
    rng: &mut R,
) -> Result<Skill> {
    let need = || Error::Usage(format!("mode {mode} needs a risk predictor"));
    match mode {
        RunMode::Planning => risk_planning(policy, predictor.ok_or_else(need)?, state, planner, rng),
        RunMode::NaivePlanning => naive_planning(policy, predictor.ok_or_else(need)?, state, planner.n_samples, rng),
        RunMode::PolicyOnly => policy.sample(state, rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutedSkill {
    pub transition: SkillTransition,
    /// States reached strictly between the skill's start and its end.
    pub visited: Vec<State>,
    pub rewards: Vec<f64>,
    /// Terminated or truncated.
    pub episode_over: bool,
}

/// Runs the decoded actions of `skill` from `state`, stopping early on
/// termination, truncation, or after `budget` steps.
pub fn execute_skill(
    env: &mut dyn Environment,
    skills: &SkillModel,
    skill: &Skill,
    state: &State,
    budget: usize,
) -> Result<ExecutedSkill> {
    if budget == 0 {
        return Err(Error::Usage("no environment steps left to execute a skill".into()));
    }
    let actions = skills.decode(skill)?;
    let mut rewards = Vec::new();
    let mut reached = Vec::new();
    let mut violated = false;
    let mut terminal = false;
    let mut episode_over = false;
    for action in actions.0.iter().take(budget) {
        let r = env.step(action)?;
        rewards.push(r.reward);
        violated = r.violated();
        terminal = r.terminated;
        episode_over = r.done();
        reached.push(r.next_state);
        if episode_over {
            break;
        }
    }
    let current = reached.pop().expect("at least one step");
    let visited = reached;
    Ok(ExecutedSkill {
        transition: SkillTransition {
            state: state.clone(),
            skill: skill.clone(),
            reward: rewards.iter().sum(),
            next_state: current,
            violated,
            terminal,
            steps_executed: rewards.len(),
        },
        visited,
        rewards,
        episode_over,
    })
}

/// `(s_t, z_t)` followed by `(s_i, z ~ prior(s_i))` for every visited state.
pub fn collect_decision_pairs<R: Rng + ?Sized>(
    state: &State,
    skill: &Skill,
    visited: &[State],
    skills: &SkillModel,
    rng: &mut R,
) -> Result<Vec<DecisionPair>> {
    let mut pairs = Vec::with_capacity(1 + visited.len());
    pairs.push(DecisionPair {
        state: state.clone(),
        skill: skill.clone(),
    });
    for s in visited {
        pairs.push(DecisionPair {
            state: s.clone(),
            skill: skills.sample_prior(s, rng)?,
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub mode: RunMode,
    pub total_timesteps: usize,
    pub warmup_steps: usize,
    pub buffer_capacity: usize,
    pub planner: PlannerConfig,
    pub sac: SacConfig,
    /// Predictor minibatch steps at each episode end.
    pub risk_update_steps: usize,
    pub risk_batch_size: usize,
    pub risk_learning_rate: f64,
    /// Overrides the estimated class prior when set.
    pub lambda: Option<f64>,
    pub checkpoint_every: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Planning,
            total_timesteps: 50_000,
            warmup_steps: 1_000,
            buffer_capacity: 100_000,
            planner: PlannerConfig::default(),
            sac: SacConfig::default(),
            risk_update_steps: 64,
            risk_batch_size: 128,
            risk_learning_rate: 1e-3,
            lambda: None,
            checkpoint_every: 10_000,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_timesteps == 0 {
            return Err(Error::Config("online.total_timesteps must be >= 1".into()));
        }
        self.planner.validate()?;
        self.sac.validate()?;
        if self.risk_batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("risk batch size and buffer capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// Offline artifacts an online run starts from.
pub struct OnlineInputs<'a> {
    pub skills: &'a SkillModel,
    pub predictor: Option<RiskPredictor>,
    pub offline_pu: Option<PuDataset>,
}

pub struct OnlineRun {
    pub log: RunLog,
    pub env_steps: usize,
    pub policy: SkillPolicy,
    pub predictor: Option<RiskPredictor>,
    pub online_pu: PuDataset,
    pub transitions: usize,
    pub violated_transitions: usize,
    pub sac_updates: usize,
    pub predictor_updates: usize,
}

/// Called every `checkpoint_every` environment steps with the step count.
pub type CheckpointHook<'a> = dyn FnMut(usize, &SkillPolicy, Option<&RiskPredictor>) -> Result<()> + 'a;

pub fn train_online(
    env: &mut dyn Environment,
    inputs: OnlineInputs<'_>,
    config: &OnlineConfig,
    seed: u64,
    on_checkpoint: &mut CheckpointHook<'_>,
) -> Result<OnlineRun> {
    config.validate()?;
    let skills = inputs.skills;
    check_dim("skill model state", env.spec().state_dim, skills.dims.state_dim)?;
    check_dim("skill model action", env.spec().action_dim, skills.dims.action_dim)?;
    let mut predictor = if config.mode.uses_predictor() {
        let p = inputs
            .predictor
            .ok_or_else(|| Error::Usage(format!("mode {} needs a risk predictor", config.mode)))?;
        check_dim("predictor state", skills.dims.state_dim, p.state_dim())?;
        check_dim("predictor skill", skills.dims.skill_dim, p.skill_dim())?;
        Some(p)
    } else {
        None
    };
    let mut pu_all = inputs.offline_pu.unwrap_or_default();

    let mut env_rng = stage_rng(seed, stage::ONLINE, 0);
    let mut act_rng = stage_rng(seed, stage::ONLINE, 1);
    let mut learn_rng = stage_rng(seed, stage::ONLINE, 2);
    let mut policy = SkillPolicy::from_prior(skills, config.sac.clone(), &mut learn_rng)?;
    let mut optimizers = SacOptimizers::new(&policy);
    let mut risk_opt = predictor
        .as_ref()
        .map(|p| Adam::new(&p.net, AdamConfig::with_lr(config.risk_learning_rate)));
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;

    let mut online_pu = PuDataset::default();
    let mut episodes = Vec::new();
    let mut steps = 0usize;
    let mut next_checkpoint = config.checkpoint_every;
    let mut run = Counters::default();

    while steps < config.total_timesteps {
        let mut state = env.reset(&mut env_rng);
        let (mut ep_reward, mut ep_len, mut ep_violated) = (0.0, 0usize, false);
        loop {
            let skill = select_skill(config.mode, &policy, predictor.as_ref(), &state, &config.planner, &mut act_rng)?;
            let done = execute_skill(env, skills, &skill, &state, config.total_timesteps - steps)?;
            steps += done.transition.steps_executed;
            ep_len += done.transition.steps_executed;
            ep_reward += done.transition.reward;
            ep_violated |= done.transition.violated;

            let label = if done.transition.violated {
                PuLabel::Positive
            } else {
                PuLabel::Unlabeled
            };
            for pair in collect_decision_pairs(&state, &skill, &done.visited, skills, &mut act_rng)? {
                if predictor.is_some() {
                    pu_all.push(pair.clone(), label);
                }
                online_pu.push(pair, label);
            }
            run.transitions += 1;
            run.violated += usize::from(done.transition.violated);
            state = done.transition.next_state.clone();
            buffer.push(done.transition);

            if steps >= config.warmup_steps && buffer.len() >= config.sac.batch_size {
                sac_update(&mut policy, &mut optimizers, &buffer, skills, &mut learn_rng)?;
                run.sac_updates += 1;
            }
            while config.checkpoint_every > 0 && steps >= next_checkpoint {
                on_checkpoint(next_checkpoint, &policy, predictor.as_ref())?;
                next_checkpoint += config.checkpoint_every;
            }
            if done.episode_over || steps >= config.total_timesteps {
                break;
            }
        }
        let cum = episodes.last().map_or(0, |e: &EpisodeRecord| e.cum_violations) + usize::from(ep_violated);
        episodes.push(EpisodeRecord {
            env_step: steps,
            episode: episodes.len(),
            episode_reward: ep_reward,
            episode_len: ep_len,
            violated: ep_violated,
            cum_violations: cum,
        });
        if let (Some(p), Some(opt)) = (predictor.as_mut(), risk_opt.as_mut()) {
            if !pu_all.positives.is_empty() && !pu_all.unlabeled.is_empty() && config.risk_update_steps > 0 {
                p.pu.lambda = match config.lambda {
                    Some(l) => l,
                    None => estimate_class_prior(&pu_all)?,
                };
                update_predictor(p, &pu_all, opt, config.risk_update_steps, config.risk_batch_size, &mut learn_rng)?;
                run.predictor_updates += 1;
            }
        }
    }
    Ok(OnlineRun {
        log: RunLog::new(episodes)?,
        env_steps: steps,
        policy,
        predictor,
        online_pu,
        transitions: run.transitions,
        violated_transitions: run.violated,
        sac_updates: run.sac_updates,
        predictor_updates: run.predictor_updates,
    })
}

#[derive(Default)]
struct Counters {
    transitions: usize,
    violated: usize,
    sac_updates: usize,
    predictor_updates: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, HazardWorld2D, HazardWorldParams, Action, Bound, EnvSpec, StepResult, HAZARD_WORLD_2D};
    use crate::gaussian::DiagGaussian;
    use crate::planner::QuadraticRisk;
    use crate::rng::seeded;
    use crate::skills::SkillDims;

    /// 1-D walker: reward = action, violation once the position passes `cliff`.
    struct Line {
        spec: EnvSpec,
        x: f64,
        cliff: f64,
        t: usize,
        log: Vec<f64>,
    }

    impl Line {
        fn new(cliff: f64, max_steps: usize) -> Self {
            Self {
                spec: EnvSpec {
                    name: "line".into(),
                    state_dim: 2,
                    action_dim: 1,
                    action_bounds: vec![Bound { lo: -1.0, hi: 1.0 }],
                    max_episode_steps: max_steps,
                },
                x: 0.0,
                cliff,
                t: 0,
                log: vec![],
            }
        }
    }

    impl Environment for Line {
        fn spec(&self) -> &EnvSpec {
            &self.spec
        }
        fn reset(&mut self, _: &mut dyn rand::RngCore) -> State {
            self.x = 0.0;
            self.t = 0;
            State(vec![0.0, 0.0])
        }
        fn step(&mut self, a: &Action) -> Result<StepResult> {
            self.x += a.0[0];
            self.t += 1;
            self.log.push(a.0[0]);
            let violated = self.x > self.cliff;
            Ok(StepResult {
                next_state: State(vec![self.x, self.t as f64]),
                reward: a.0[0],
                cost: if violated { 1.0 } else { 0.0 },
                terminated: violated,
                truncated: !violated && self.t >= self.spec.max_episode_steps,
            })
        }
        fn params_json(&self) -> serde_json::Value {
            serde_json::Value::Null
        }
        fn sample_safe_state(&self, _: &mut dyn rand::RngCore) -> State {
            State(vec![0.0, 0.0])
        }
    }

    /// Decoder whose output is the constant normalized action `u`.
    fn constant_skills(u: f64, horizon: usize) -> SkillModel {
        let dims = SkillDims {
            horizon,
            skill_dim: 2,
            state_dim: 2,
            action_dim: 1,
            action_bounds: vec![Bound { lo: -1.0, hi: 1.0 }],
        };
        let mut m = SkillModel::new(dims, &[4], &mut seeded(0)).unwrap();
        let mut flat = vec![0.0; m.decoder.param_count()];
        let n = flat.len();
        for v in &mut flat[n - horizon..] {
            *v = u;
        }
        m.decoder.set_params_flat(&flat).unwrap();
        m
    }

    #[test]
    fn full_skill_runs_h_steps() {
        let m = constant_skills(0.1, 10);
        let mut env = Line::new(100.0, 1000);
        let s = env.reset(&mut seeded(0));
        let e = execute_skill(&mut env, &m, &Skill(vec![0.0, 0.0]), &s, usize::MAX).unwrap();
        assert_eq!(e.transition.steps_executed, 10);
        assert_eq!(e.transition.next_state.0[1], 10.0);
        assert_eq!(e.visited.len(), 9);
        assert!(!e.transition.violated && !e.episode_over);
    }

    #[test]
    fn violation_on_third_action_stops_the_skill() {
        let m = constant_skills(0.5, 10);
        let mut env = Line::new(1.2, 1000);
        let s = env.reset(&mut seeded(0));
        let e = execute_skill(&mut env, &m, &Skill(vec![0.0, 0.0]), &s, usize::MAX).unwrap();
        assert_eq!(e.transition.steps_executed, 3);
        assert!(e.transition.violated && e.transition.terminal);
        let independent: f64 = env.log.iter().sum();
        assert!((e.transition.reward - independent).abs() < 1e-12);
        assert!((e.transition.reward - 1.5).abs() < 1e-12);
    }

    #[test]
    fn budget_caps_the_skill() {
        let m = constant_skills(0.1, 10);
        let mut env = Line::new(100.0, 1000);
        let s = env.reset(&mut seeded(0));
        let e = execute_skill(&mut env, &m, &Skill(vec![0.0, 0.0]), &s, 4).unwrap();
        assert_eq!(e.transition.steps_executed, 4);
        assert!(!e.transition.terminal);
    }

    #[test]
    fn decision_pair_counts() {
        let m = constant_skills(0.5, 10);
        let z = Skill(vec![0.3, -0.3]);
        let mut env = Line::new(0.2, 1000);
        let s = env.reset(&mut seeded(0));
        let e = execute_skill(&mut env, &m, &z, &s, usize::MAX).unwrap();
        assert_eq!(e.transition.steps_executed, 1);
        let pairs = collect_decision_pairs(&s, &z, &e.visited, &m, &mut seeded(1)).unwrap();
        assert_eq!(pairs, vec![DecisionPair { state: s.clone(), skill: z.clone() }]);

        let m = constant_skills(0.01, 10);
        let mut env = Line::new(100.0, 1000);
        let s = env.reset(&mut seeded(0));
        let e = execute_skill(&mut env, &m, &z, &s, usize::MAX).unwrap();
        let pairs = collect_decision_pairs(&s, &z, &e.visited, &m, &mut seeded(1)).unwrap();
        assert_eq!(pairs.len(), 10);
        assert_eq!(pairs[0].skill, z);
        assert_eq!(pairs[3].state, State(vec![0.03, 3.0]));
    }

    fn policy_for(m: &SkillModel) -> SkillPolicy {
        SkillPolicy::from_prior(m, SacConfig::default(), &mut seeded(0)).unwrap()
    }

    #[test]
    fn policy_only_mode_samples_the_policy() {
        let m = constant_skills(0.1, 3);
        let p = policy_for(&m);
        let s = State(vec![0.1, 0.2]);
        let z = select_skill(RunMode::PolicyOnly, &p, None, &s, &PlannerConfig::default(), &mut seeded(4)).unwrap();
        assert_eq!(z, p.sample(&s, &mut seeded(4)).unwrap());
        assert!(select_skill(RunMode::Planning, &p, None, &s, &PlannerConfig::default(), &mut seeded(4)).is_err());
    }

    #[test]
    fn planning_beats_naive_selection_on_the_quadratic() {
        let risk = QuadraticRisk { target: vec![0.5; 10] };
        let g = DiagGaussian::standard(10);
        let s = State(vec![]);
        let c = PlannerConfig::default();
        let (mut full, mut naive) = (0.0, 0.0);
        for seed in 0..100 {
            let a = risk_planning(&g, &risk, &s, &c, &mut seeded(seed)).unwrap();
            let b = naive_planning(&g, &risk, &s, c.n_samples, &mut seeded(seed)).unwrap();
            full += risk.value(&a.0);
            naive += risk.value(&b.0);
        }
        assert!(full <= naive, "{full} vs {naive}");
    }

    fn online_inputs(m: &SkillModel) -> OnlineInputs<'_> {
        let mut pu = PuDataset::default();
        let pair = DecisionPair {
            state: State(vec![0.0, 0.0]),
            skill: Skill(vec![0.0; 10]),
        };
        pu.push(pair.clone(), PuLabel::Positive);
        pu.push(pair, PuLabel::Unlabeled);
        OnlineInputs {
            skills: m,
            predictor: Some(RiskPredictor::new(2, 10, &[16], &mut seeded(1)).unwrap()),
            offline_pu: Some(pu),
        }
    }

    fn hazard_skills() -> SkillModel {
        let env = make_env(HAZARD_WORLD_2D).unwrap();
        let spec = env.spec();
        let dims = SkillDims {
            horizon: 10,
            skill_dim: 10,
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            action_bounds: spec.action_bounds.clone(),
        };
        SkillModel::new(dims, &[16], &mut seeded(3)).unwrap()
    }

    fn small_config(mode: RunMode) -> OnlineConfig {
        OnlineConfig {
            mode,
            total_timesteps: 200,
            warmup_steps: 50,
            planner: PlannerConfig {
                n_samples: 32,
                top_k: 4,
                ..PlannerConfig::default()
            },
            sac: SacConfig {
                batch_size: 8,
                critic_hidden: vec![16],
                ..SacConfig::default()
            },
            risk_update_steps: 4,
            risk_batch_size: 8,
            checkpoint_every: 100,
            ..OnlineConfig::default()
        }
    }

    #[test]
    fn short_runs_are_deterministic_and_consistent() {
        let m = hazard_skills();
        for mode in RunMode::ALL {
            let run = || {
                let mut env = HazardWorld2D::new(HazardWorldParams::default()).unwrap();
                let mut hits = vec![];
                let r = train_online(&mut env, online_inputs(&m), &small_config(mode), 7, &mut |s, _, _| {
                    hits.push(s);
                    Ok(())
                })
                .unwrap();
                (r, hits)
            };
            let (a, hits) = run();
            let (b, _) = run();
            assert_eq!(a.log, b.log);
            assert_eq!(a.env_steps, 200);
            assert_eq!(hits, vec![100, 200]);
            assert_eq!(a.log.episodes.iter().map(|e| e.episode_len).sum::<usize>(), 200);
            assert_eq!(a.log.violations(), a.violated_transitions);
            assert_eq!(a.online_pu.len(), 200);
            assert!(a.sac_updates > 0);
            assert_eq!(a.predictor.is_some(), mode.uses_predictor());
        }
    }

    #[test]
    fn mismatched_predictor_is_rejected() {
        let m = hazard_skills();
        let mut inputs = online_inputs(&m);
        inputs.predictor = Some(RiskPredictor::new(2, 4, &[8], &mut seeded(0)).unwrap());
        let mut env = make_env(HAZARD_WORLD_2D).unwrap();
        let r = train_online(env.as_mut(), inputs, &small_config(RunMode::Planning), 0, &mut |_, _, _| Ok(()));
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in RunMode::ALL {
            assert_eq!(m.name().parse::<RunMode>().unwrap(), m);
            assert_eq!(m.slug().parse::<RunMode>().unwrap(), m);
        }
        assert!("sskp-fast".parse::<RunMode>().is_err());
    }
}
