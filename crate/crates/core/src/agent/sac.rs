//! Skill-level soft actor-critic where the entropy bonus is replaced by a KL
//! penalty towards the skill prior:
//!
//! ```text
//! y      = r̃ + γ^n·(1 − done)·(min Q̄(s′, z′) − α·KL(π(s′) ‖ q(s′))),  z′ ~ π(s′)
//! critic = mean (Q_i(s, z) − y)²
//! actor  = mean α·KL(π(s) ‖ q(s)) − min Q(s, z),  z = μ + σ·ε
//! ```

use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{ReplayBuffer, TransitionBatch};
use crate::env::State;
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{kl_diag, DiagGaussian};
use crate::nn::{Activation, Adam, AdamConfig, Checkpoint, Gradients, Head, Mlp, MlpShape};
use crate::planner::SkillProposal;
use crate::skills::{sample_noise, Skill, SkillModel};

pub const POLICY_CHECKPOINT_KIND: &str = "skill_policy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub critic_hidden: Vec<usize>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            critic_hidden: vec![64, 64],
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("sac.gamma must be in (0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) || !(self.alpha >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config("sac needs 0 < tau <= 1, alpha >= 0, batch_size >= 1".into()));
        }
        Ok(())
    }
}

/// Actor `π(z|s)` plus twin critics and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillPolicy {
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub config: SacConfig,
    state_dim: usize,
    skill_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    state_dim: usize,
    skill_dim: usize,
    config: SacConfig,
}

fn gaussian_parts(out: ArrayView2<f64>) -> (ArrayView2<f64>, ArrayView2<f64>) {
    let d = out.ncols() / 2;
    (out.slice_move(s![.., ..d]), out.slice_move(s![.., d..]))
}

impl SkillPolicy {
    /// The actor starts as a copy of the skill prior.
    pub fn from_prior<R: Rng + ?Sized>(skills: &SkillModel, config: SacConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let state_dim = skills.dims.state_dim;
        let skill_dim = skills.dims.skill_dim;
        let shape = MlpShape {
            input: state_dim + skill_dim,
            hidden: config.critic_hidden.clone(),
            output: 1,
            activation: Activation::Tanh,
            head: Head::Identity,
        };
        let q1 = Mlp::new(&shape, rng)?;
        let q2 = Mlp::new(&shape, rng)?;
        Ok(Self {
            actor: skills.prior.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            config,
            state_dim,
            skill_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn skill_dim(&self) -> usize {
        self.skill_dim
    }

    pub fn distribution(&self, state: &State) -> Result<DiagGaussian> {
        check_dim("policy state", self.state_dim, state.0.len())?;
        let out = self.actor.predict_one(&state.0)?;
        let d = self.skill_dim;
        Ok(DiagGaussian {
            mean: out[..d].to_vec(),
            var: out[d..].iter().map(|v| v.exp()).collect(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &State, rng: &mut R) -> Result<Skill> {
        Ok(Skill(self.distribution(state)?.sample(rng)))
    }

    /// Polyak step on both target critics.
    pub fn update_targets(&mut self) {
        self.q1_target.soft_update_from(&self.q1, self.config.tau);
        self.q2_target.soft_update_from(&self.q2, self.config.tau);
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = PolicyMeta {
            state_dim: self.state_dim,
            skill_dim: self.skill_dim,
            config: self.config.clone(),
        };
        Checkpoint::new(POLICY_CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serialize"))
            .with("actor", &self.actor)
            .with("q1", &self.q1)
            .with("q2", &self.q2)
            .with("q1_target", &self.q1_target)
            .with("q2_target", &self.q2_target)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: PolicyMeta = serde_json::from_value(ck.meta.clone())?;
        let p = Self {
            actor: ck.network("actor")?.clone(),
            q1: ck.network("q1")?.clone(),
            q2: ck.network("q2")?.clone(),
            q1_target: ck.network("q1_target")?.clone(),
            q2_target: ck.network("q2_target")?.clone(),
            config: meta.config,
            state_dim: meta.state_dim,
            skill_dim: meta.skill_dim,
        };
        check_dim("actor input", p.state_dim, p.actor.input_dim())?;
        check_dim("actor output", 2 * p.skill_dim, p.actor.output_dim())?;
        check_dim("critic input", p.state_dim + p.skill_dim, p.q1.input_dim())?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, POLICY_CHECKPOINT_KIND)?)
    }
}

impl SkillProposal for SkillPolicy {
    fn proposal(&self, state: &State) -> Result<DiagGaussian> {
        self.distribution(state)
    }
}

/// Per-row `KL(p ‖ q)` between two stacked Gaussian head outputs.
fn row_kls(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Vec<f64> {
    let (pm, pl) = gaussian_parts(p);
    let (qm, ql) = gaussian_parts(q);
    (0..p.nrows())
        .map(|i| kl_diag(&pm.row(i).to_vec(), &pl.row(i).to_vec(), &qm.row(i).to_vec(), &ql.row(i).to_vec()).value)
        .collect()
}

fn reparameterize(out: ArrayView2<f64>, noise: &Array2<f64>) -> Array2<f64> {
    let (m, lv) = gaussian_parts(out);
    &m + &(&lv.mapv(|v| (0.5 * v).exp()) * noise)
}

fn stack(states: ArrayView2<f64>, skills: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, skills]).expect("matching rows")
}

/// Bootstrapped regression targets. `next_noise` drives `z′ ~ π(s′)`.
pub fn critic_targets(policy: &SkillPolicy, prior: &Mlp, batch: &TransitionBatch, next_noise: &Array2<f64>) -> Result<Vec<f64>> {
    let out = policy.actor.predict(batch.next_states.view())?;
    let z_next = reparameterize(out.view(), next_noise);
    let kl = row_kls(out.view(), prior.predict(batch.next_states.view())?.view());
    let input = stack(batch.next_states.view(), z_next.view());
    let t1 = policy.q1_target.predict(input.view())?;
    let t2 = policy.q2_target.predict(input.view())?;
    Ok((0..batch.len())
        .map(|i| {
            let soft_v = t1[[i, 0]].min(t2[[i, 0]]) - policy.config.alpha * kl[i];
            batch.rewards[i] + batch.discounts[i] * soft_v
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticLoss {
    pub q1: f64,
    pub q2: f64,
}

/// Mean squared error of each critic against fixed targets.
pub fn critic_loss_and_grad(policy: &SkillPolicy, batch: &TransitionBatch, targets: &[f64]) -> Result<(CriticLoss, Gradients, Gradients)> {
    check_dim("critic targets", batch.len(), targets.len())?;
    let n = batch.len() as f64;
    let input = stack(batch.states.view(), batch.skills.view());
    let one = |q: &Mlp| -> Result<(f64, Gradients)> {
        let cache = q.forward(input.view())?;
        let diff: Vec<f64> = cache.raw.column(0).iter().zip(targets).map(|(q, y)| q - y).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let d = Array2::from_shape_fn((diff.len(), 1), |(i, _)| 2.0 * diff[i] / n);
        Ok((loss, q.backward(&cache, &d)?.0))
    };
    let (l1, g1) = one(&policy.q1)?;
    let (l2, g2) = one(&policy.q2)?;
    Ok((CriticLoss { q1: l1, q2: l2 }, g1, g2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorLoss {
    pub total: f64,
    pub kl: f64,
    pub q: f64,
}

/// Actor objective and its gradient for fixed reparameterization `noise`.
pub fn actor_loss_and_grad(policy: &SkillPolicy, prior: &Mlp, states: ArrayView2<f64>, noise: &Array2<f64>) -> Result<(ActorLoss, Gradients)> {
    let n = states.nrows();
    if n == 0 {
        return Err(Error::Empty("actor batch"));
    }
    let zd = policy.skill_dim;
    let sd = policy.state_dim;
    check_dim("actor noise", zd, noise.ncols())?;
    let inv_n = 1.0 / n as f64;
    let alpha = policy.config.alpha;

    let cache = policy.actor.forward(states)?;
    let (mu, lv) = gaussian_parts(cache.output.view());
    let sigma = lv.mapv(|v| (0.5 * v).exp());
    let z = &mu + &(&sigma * noise);
    let input = stack(states, z.view());
    let c1 = policy.q1.forward(input.view())?;
    let c2 = policy.q2.forward(input.view())?;
    let mut d1 = Array2::zeros((n, 1));
    let mut d2 = Array2::zeros((n, 1));
    let mut q_sum = 0.0;
    for i in 0..n {
        let (a, b) = (c1.output[[i, 0]], c2.output[[i, 0]]);
        if a <= b {
            q_sum += a;
            d1[[i, 0]] = -inv_n;
        } else {
            q_sum += b;
            d2[[i, 0]] = -inv_n;
        }
    }
    let (_, dx1) = policy.q1.backward(&c1, &d1)?;
    let (_, dx2) = policy.q2.backward(&c2, &d2)?;
    let d_z = &dx1.slice(s![.., sd..]) + &dx2.slice(s![.., sd..]);

    let prior_out = prior.predict(states)?;
    let (pm, pl) = gaussian_parts(prior_out.view());
    let mut kl_sum = 0.0;
    let mut d_out = Array2::zeros((n, 2 * zd));
    for i in 0..n {
        let k = kl_diag(&mu.row(i).to_vec(), &lv.row(i).to_vec(), &pm.row(i).to_vec(), &pl.row(i).to_vec());
        kl_sum += k.value;
        for j in 0..zd {
            d_out[[i, j]] = d_z[[i, j]] + alpha * k.d_mean_p[j] * inv_n;
            d_out[[i, zd + j]] = d_z[[i, j]] * 0.5 * sigma[[i, j]] * noise[[i, j]] + alpha * k.d_log_var_p[j] * inv_n;
        }
    }
    let (grads, _) = policy.actor.backward(&cache, &d_out)?;
    let kl = kl_sum * inv_n;
    let q = q_sum * inv_n;
    Ok((
        ActorLoss {
            total: alpha * kl - q,
            kl,
            q,
        },
        grads,
    ))
}

/// Adam state for the actor and both critics.
#[derive(Debug, Clone)]
pub struct SacOptimizers {
    actor: Adam,
    q1: Adam,
    q2: Adam,
}

impl SacOptimizers {
    pub fn new(policy: &SkillPolicy) -> Self {
        Self {
            actor: Adam::new(&policy.actor, AdamConfig::with_lr(policy.config.actor_lr)),
            q1: Adam::new(&policy.q1, AdamConfig::with_lr(policy.config.critic_lr)),
            q2: Adam::new(&policy.q2, AdamConfig::with_lr(policy.config.critic_lr)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacLosses {
    pub critic: CriticLoss,
    pub actor: ActorLoss,
}

/// One critic step, one actor step, then a Polyak update of the targets.
pub fn sac_update<R: Rng + ?Sized>(
    policy: &mut SkillPolicy,
    optimizers: &mut SacOptimizers,
    buffer: &ReplayBuffer,
    skills: &SkillModel,
    rng: &mut R,
) -> Result<SacLosses> {
    let batch = buffer.sample(policy.config.batch_size, policy.config.gamma, rng)?;
    let next_noise = sample_noise(batch.len(), policy.skill_dim, rng);
    let targets = critic_targets(policy, &skills.prior, &batch, &next_noise)?;
    let (critic, g1, g2) = critic_loss_and_grad(policy, &batch, &targets)?;
    if !(critic.q1.is_finite() && critic.q2.is_finite()) {
        return Err(Error::NonFinite("critic loss".into()));
    }
    optimizers.q1.step(&mut policy.q1, &g1)?;
    optimizers.q2.step(&mut policy.q2, &g2)?;

    let noise = sample_noise(batch.len(), policy.skill_dim, rng);
    let (actor, ga) = actor_loss_and_grad(policy, &skills.prior, batch.states.view(), &noise)?;
    if !actor.total.is_finite() {
        return Err(Error::NonFinite("actor loss".into()));
    }
    optimizers.actor.step(&mut policy.actor, &ga)?;
    policy.update_targets();
    Ok(SacLosses { critic, actor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::buffer::SkillTransition;
    use crate::env::Bound;
    use crate::rng::seeded;
    use crate::skills::SkillDims;

    pub(crate) fn tiny_skills(seed: u64) -> SkillModel {
        let dims = SkillDims {
            horizon: 3,
            skill_dim: 2,
            state_dim: 2,
            action_dim: 1,
            action_bounds: vec![Bound { lo: -1.0, hi: 1.0 }],
        };
        SkillModel::new(dims, &[6], &mut seeded(seed)).unwrap()
    }

    fn small_policy(seed: u64) -> (SkillModel, SkillPolicy) {
        let skills = tiny_skills(seed);
        let config = SacConfig {
            critic_hidden: vec![5],
            batch_size: 4,
            ..SacConfig::default()
        };
        let p = SkillPolicy::from_prior(&skills, config, &mut seeded(seed + 100)).unwrap();
        (skills, p)
    }

    #[test]
    fn actor_starts_as_the_prior() {
        let (skills, p) = small_policy(0);
        let s = State(vec![0.3, -0.2]);
        assert_eq!(p.distribution(&s).unwrap(), skills.prior(&s).unwrap());
        assert_eq!(p.q1, p.q1_target);
    }

    #[test]
    fn targets_mask_terminal_bootstrap() {
        let (skills, p) = small_policy(1);
        let base = SkillTransition {
            state: State(vec![0.1, 0.2]),
            skill: Skill(vec![0.0, 0.5]),
            reward: 1.5,
            next_state: State(vec![0.3, 0.4]),
            violated: false,
            terminal: false,
            steps_executed: 3,
        };
        let violated = SkillTransition {
            violated: true,
            terminal: true,
            reward: -2.0,
            steps_executed: 1,
            ..base.clone()
        };
        let batch = TransitionBatch::from_transitions(&[&base, &violated], 0.99);
        let noise = Array2::zeros((2, 2));
        let y = critic_targets(&p, &skills.prior, &batch, &noise).unwrap();
        assert_eq!(y[1], -2.0);
        // actor == prior, so the KL term vanishes and z′ is the prior mean
        let out = p.actor.predict_one(&[0.3, 0.4]).unwrap();
        let x = [0.3, 0.4, out[0], out[1]];
        let v = p.q1_target.predict_one(&x).unwrap()[0].min(p.q2_target.predict_one(&x).unwrap()[0]);
        assert!((y[0] - (1.5 + 0.99f64.powi(3) * v)).abs() < 1e-12);
    }

    #[test]
    fn polyak_moves_targets_by_tau() {
        let (_, mut p) = small_policy(2);
        let before = p.q1_target.params_flat();
        let online: Vec<f64> = p.q1.params_flat().iter().map(|v| v + 1.0).collect();
        p.q1.set_params_flat(&online).unwrap();
        p.update_targets();
        for ((t, b), o) in p.q1_target.params_flat().iter().zip(&before).zip(&online) {
            assert!((t - (0.995 * b + 0.005 * o)).abs() < 1e-12);
        }
    }

    #[test]
    fn update_is_deterministic_and_finite() {
        let run = || {
            let (skills, mut p) = small_policy(3);
            let mut buf = ReplayBuffer::new(50).unwrap();
            let mut rng = seeded(5);
            for i in 0..20 {
                buf.push(SkillTransition {
                    state: State(vec![rng.random_range(-1.0..1.0), 0.1 * i as f64]),
                    skill: Skill(vec![rng.random_range(-1.0..1.0), 0.0]),
                    reward: rng.random_range(-1.0..1.0),
                    next_state: State(vec![0.0, 0.1]),
                    violated: i % 7 == 0,
                    terminal: i % 7 == 0,
                    steps_executed: 3,
                });
            }
            let mut opt = SacOptimizers::new(&p);
            let mut losses = vec![];
            for _ in 0..10 {
                losses.push(sac_update(&mut p, &mut opt, &buf, &skills, &mut rng).unwrap());
            }
            (p, losses)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(a.actor.is_finite() && a.q1.is_finite());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, p) = small_policy(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        p.save(&path).unwrap();
        assert_eq!(SkillPolicy::load(&path).unwrap(), p);
    }

    #[test]
    fn bad_gamma_is_rejected() {
        let skills = tiny_skills(0);
        let c = SacConfig {
            gamma: 1.0,
            ..SacConfig::default()
        };
        assert!(SkillPolicy::from_prior(&skills, c, &mut seeded(0)).is_err());
    }
}
