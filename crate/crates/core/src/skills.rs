//! Latent skill model: action-sequence encoder, decoder, and a
//! state-conditioned skill prior.
//!
//! Actions are affinely normalized to `[-1, 1]` per dimension before they
//! reach the networks, so reconstruction error is measured in bound-relative
//! units. The objective for one window `(s, a)` is
//!
//! ```text
//! mse(dec(z), a) + β·KL(enc(a) ‖ N(0, I)) + KL(sg(enc(a)) ‖ prior(s)),   z = μ + σ·ε
//! ```
//!
//! where `sg` stops gradients into the encoder. The prior term is the
//! mode-covering direction; the reverse one lets the prior chase the
//! shrinking encoder variance and blows up.

use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::demo::{DemoDataset, Trajectory};
use crate::env::{Action, Bound, State};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{kl_diag, DiagGaussian};
use crate::nn::{Activation, Adam, AdamConfig, Checkpoint, Gradients, Head, Mlp, MlpShape};

pub const SKILL_CHECKPOINT_KIND: &str = "skill_model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Skill(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence(pub Vec<Action>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillModelConfig {
    pub horizon: usize,
    pub skill_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SkillModelConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            skill_dim: 10,
            hidden: vec![64, 64],
            beta: 5e-4,
            epochs: 60,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

/// Dimensions shared by the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillDims {
    pub horizon: usize,
    pub skill_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bounds: Vec<Bound>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillModel {
    pub dims: SkillDims,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub prior: Mlp,
}

/// One window start: trajectory index and step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub trajectory: usize,
    pub start: usize,
}

/// All `t` with `t + horizon <= len`, in trajectory order.
pub fn window_starts(trajectories: &[Trajectory], horizon: usize) -> Vec<WindowRef> {
    trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let n = (t.len() + 1).saturating_sub(horizon);
            (0..n).map(move |start| WindowRef { trajectory: i, start })
        })
        .collect()
}

/// Stacked windows: normalized flattened actions and start states.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub actions: Array2<f64>,
    pub states: Array2<f64>,
}

impl SkillDims {
    fn seq_width(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn normalize(&self, dim: usize, a: f64) -> f64 {
        let b = self.action_bounds[dim];
        (a - b.mid()) / b.half_width()
    }

    pub fn denormalize(&self, dim: usize, u: f64) -> f64 {
        let b = self.action_bounds[dim];
        b.mid() + u.clamp(-1.0, 1.0) * b.half_width()
    }

    pub fn windows(&self, trajectories: &[Trajectory], refs: &[WindowRef]) -> WindowBatch {
        let w = self.seq_width();
        let mut actions = Array2::zeros((refs.len(), w));
        let mut states = Array2::zeros((refs.len(), self.state_dim));
        for (row, r) in refs.iter().enumerate() {
            let traj = &trajectories[r.trajectory];
            for k in 0..self.horizon {
                let a = &traj.steps[r.start + k].action.0;
                for (d, v) in a.iter().enumerate() {
                    actions[[row, k * self.action_dim + d]] = self.normalize(d, *v);
                }
            }
            for (d, v) in traj.steps[r.start].state.0.iter().enumerate() {
                states[[row, d]] = *v;
            }
        }
        WindowBatch { actions, states }
    }
}

fn split_gaussian(out: ArrayView2<f64>) -> (ArrayView2<f64>, ArrayView2<f64>) {
    let d = out.ncols() / 2;
    (out.slice_move(s![.., ..d]), out.slice_move(s![.., d..]))
}

impl SkillModel {
    pub fn new<R: Rng + ?Sized>(dims: SkillDims, hidden: &[usize], rng: &mut R) -> Result<Self> {
        check_dim("action bounds", dims.action_dim, dims.action_bounds.len())?;
        if dims.horizon == 0 || dims.skill_dim == 0 {
            return Err(Error::Config("horizon and skill_dim must be >= 1".into()));
        }
        let net = |input, output, head, rng: &mut R| {
            Mlp::new(
                &MlpShape {
                    input,
                    hidden: hidden.to_vec(),
                    output,
                    activation: Activation::Tanh,
                    head,
                },
                rng,
            )
        };
        let encoder = net(dims.seq_width(), dims.skill_dim, Head::gaussian(), rng)?;
        let decoder = net(dims.skill_dim, dims.seq_width(), Head::Identity, rng)?;
        let prior = net(dims.state_dim, dims.skill_dim, Head::gaussian(), rng)?;
        Ok(Self {
            dims,
            encoder,
            decoder,
            prior,
        })
    }

    /// Replaces all networks with explicit ones after checking their shapes.
    pub fn from_parts(dims: SkillDims, encoder: Mlp, decoder: Mlp, prior: Mlp) -> Result<Self> {
        check_dim("encoder input", dims.seq_width(), encoder.input_dim())?;
        check_dim("encoder output", 2 * dims.skill_dim, encoder.output_dim())?;
        check_dim("decoder input", dims.skill_dim, decoder.input_dim())?;
        check_dim("decoder output", dims.seq_width(), decoder.output_dim())?;
        check_dim("prior input", dims.state_dim, prior.input_dim())?;
        check_dim("prior output", 2 * dims.skill_dim, prior.output_dim())?;
        if !matches!(encoder.head(), Head::Gaussian { .. }) || !matches!(prior.head(), Head::Gaussian { .. }) {
            return Err(Error::Config("encoder and prior need Gaussian heads".into()));
        }
        Ok(Self {
            dims,
            encoder,
            decoder,
            prior,
        })
    }

    pub fn encode(&self, seq: &ActionSequence) -> Result<DiagGaussian> {
        check_dim("action sequence length", self.dims.horizon, seq.0.len())?;
        let mut flat = Vec::with_capacity(self.dims.seq_width());
        for a in &seq.0 {
            check_dim("action", self.dims.action_dim, a.0.len())?;
            flat.extend(a.0.iter().enumerate().map(|(d, v)| self.dims.normalize(d, *v)));
        }
        let out = self.encoder.predict_one(&flat)?;
        let d = self.dims.skill_dim;
        Ok(gaussian_from_row(&out[..d], &out[d..]))
    }

    /// Encoder means for stacked normalized windows.
    pub fn encode_means(&self, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.encoder.predict(actions)?;
        Ok(out.slice(s![.., ..self.dims.skill_dim]).to_owned())
    }

    pub fn decode(&self, skill: &Skill) -> Result<ActionSequence> {
        check_dim("skill", self.dims.skill_dim, skill.0.len())?;
        let out = self.decoder.predict_one(&skill.0)?;
        let a = self.dims.action_dim;
        Ok(ActionSequence(
            out.chunks(a)
                .map(|chunk| Action(chunk.iter().enumerate().map(|(d, u)| self.dims.denormalize(d, *u)).collect()))
                .collect(),
        ))
    }

    /// Decoded sequences in normalized units, clamped to `[-1, 1]`.
    pub fn decode_normalized(&self, skills: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.decoder.predict(skills)?.mapv(|u| u.clamp(-1.0, 1.0)))
    }

    pub fn prior(&self, state: &State) -> Result<DiagGaussian> {
        check_dim("state", self.dims.state_dim, state.0.len())?;
        let out = self.prior.predict_one(&state.0)?;
        let d = self.dims.skill_dim;
        Ok(gaussian_from_row(&out[..d], &out[d..]))
    }

    /// Prior head output `[mean | log_var]` for stacked states.
    pub fn prior_batch(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.prior.predict(states)
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, state: &State, rng: &mut R) -> Result<Skill> {
        Ok(Skill(self.prior(state)?.sample(rng)))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            SKILL_CHECKPOINT_KIND,
            serde_json::to_value(&self.dims).expect("dims serialize"),
        )
        .with("encoder", &self.encoder)
        .with("decoder", &self.decoder)
        .with("prior", &self.prior)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let dims: SkillDims = serde_json::from_value(ck.meta.clone())?;
        Self::from_parts(
            dims,
            ck.network("encoder")?.clone(),
            ck.network("decoder")?.clone(),
            ck.network("prior")?.clone(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, SKILL_CHECKPOINT_KIND)?)
    }
}

fn gaussian_from_row(mean: &[f64], log_var: &[f64]) -> DiagGaussian {
    DiagGaussian {
        mean: mean.to_vec(),
        var: log_var.iter().map(|v| v.exp()).collect(),
    }
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkillLoss {
    pub reconstruction: f64,
    pub kl: f64,
    pub prior_kl: f64,
    pub total: f64,
}

pub struct SkillGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
    pub prior: Gradients,
}

/// Loss and gradients for a batch with fixed reparameterization noise
/// `noise` (`batch × skill_dim`).
pub fn skill_objective(
    model: &SkillModel,
    batch: &WindowBatch,
    noise: &Array2<f64>,
    beta: f64,
) -> Result<(SkillLoss, SkillGradients)> {
    let n = batch.actions.nrows();
    if n == 0 {
        return Err(Error::Empty("skill batch"));
    }
    let zd = model.dims.skill_dim;
    check_dim("noise rows", n, noise.nrows())?;
    check_dim("noise cols", zd, noise.ncols())?;
    let inv_n = 1.0 / n as f64;

    let enc_cache = model.encoder.forward(batch.actions.view())?;
    let (mu, lv) = split_gaussian(enc_cache.output.view());
    let sigma = lv.mapv(|v| (0.5 * v).exp());
    let z = &mu + &(&sigma * noise);

    let dec_cache = model.decoder.forward(z.view())?;
    let diff = &dec_cache.output - &batch.actions;
    let width = diff.ncols() as f64;
    let reconstruction = diff.iter().map(|d| d * d).sum::<f64>() / width * inv_n;
    let d_recon = diff.mapv(|d| 2.0 * d / width * inv_n);
    let (dec_grads, d_z) = model.decoder.backward(&dec_cache, &d_recon)?;

    let prior_cache = model.prior.forward(batch.states.view())?;
    let (pmu, plv) = split_gaussian(prior_cache.output.view());

    let zeros = vec![0.0; zd];
    let mut d_enc = Array2::zeros((n, 2 * zd));
    let mut d_prior = Array2::zeros((n, 2 * zd));
    let mut kl = 0.0;
    let mut prior_kl = 0.0;
    for i in 0..n {
        let m = mu.row(i).to_vec();
        let l = lv.row(i).to_vec();
        let to_standard = kl_diag(&m, &l, &zeros, &zeros);
        kl += to_standard.value;
        let pm = pmu.row(i).to_vec();
        let pl = plv.row(i).to_vec();
        let matching = kl_diag(&m, &l, &pm, &pl);
        prior_kl += matching.value;
        for j in 0..zd {
            d_enc[[i, j]] = d_z[[i, j]] + beta * to_standard.d_mean_p[j] * inv_n;
            d_enc[[i, zd + j]] =
                d_z[[i, j]] * 0.5 * sigma[[i, j]] * noise[[i, j]] + beta * to_standard.d_log_var_p[j] * inv_n;
            d_prior[[i, j]] = matching.d_mean_q[j] * inv_n;
            d_prior[[i, zd + j]] = matching.d_log_var_q[j] * inv_n;
        }
    }
    kl *= inv_n;
    prior_kl *= inv_n;
    let (enc_grads, _) = model.encoder.backward(&enc_cache, &d_enc)?;
    let (prior_grads, _) = model.prior.backward(&prior_cache, &d_prior)?;
    Ok((
        SkillLoss {
            reconstruction,
            kl,
            prior_kl,
            total: reconstruction + beta * kl + prior_kl,
        },
        SkillGradients {
            encoder: enc_grads,
            decoder: dec_grads,
            prior: prior_grads,
        },
    ))
}

pub fn sample_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub prior_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTrainingLog {
    pub windows: usize,
    pub epochs: Vec<EpochLog>,
    /// Prior network at the end of each epoch.
    #[serde(skip)]
    pub prior_snapshots: Vec<Mlp>,
}

pub fn skill_dims_for(demos: &DemoDataset, config: &SkillModelConfig) -> SkillDims {
    SkillDims {
        horizon: config.horizon,
        skill_dim: config.skill_dim,
        state_dim: demos.header.env.state_dim,
        action_dim: demos.header.env.action_dim,
        action_bounds: demos.header.env.action_bounds.clone(),
    }
}

/// Trains on every window of the given trajectories.
pub fn train_skill_model<R: Rng + ?Sized>(
    demos: &DemoDataset,
    trajectories: &[Trajectory],
    config: &SkillModelConfig,
    rng: &mut R,
) -> Result<(SkillModel, SkillTrainingLog)> {
    let dims = skill_dims_for(demos, config);
    let refs = window_starts(trajectories, config.horizon);
    if refs.is_empty() {
        return Err(Error::Empty("demonstration windows (no trajectory reaches the horizon)"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("skill training needs batch_size and epochs >= 1".into()));
    }
    let mut model = SkillModel::new(dims, &config.hidden, rng)?;
    let data = model.dims.windows(trajectories, &refs);
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut opt_enc = Adam::new(&model.encoder, adam);
    let mut opt_dec = Adam::new(&model.decoder, adam);
    let mut opt_prior = Adam::new(&model.prior, adam);

    let mut order: Vec<usize> = (0..refs.len()).collect();
    let mut log = SkillTrainingLog {
        windows: refs.len(),
        epochs: Vec::with_capacity(config.epochs),
        prior_snapshots: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut sums = [0.0; 3];
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = WindowBatch {
                actions: data.actions.select(Axis(0), chunk),
                states: data.states.select(Axis(0), chunk),
            };
            let noise = sample_noise(chunk.len(), model.dims.skill_dim, rng);
            let (loss, grads) = skill_objective(&model, &batch, &noise, config.beta)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite("skill loss".into()));
            }
            opt_enc.step(&mut model.encoder, &grads.encoder)?;
            opt_dec.step(&mut model.decoder, &grads.decoder)?;
            opt_prior.step(&mut model.prior, &grads.prior)?;
            let w = chunk.len() as f64;
            sums[0] += loss.reconstruction * w;
            sums[1] += loss.kl * w;
            sums[2] += loss.prior_kl * w;
            seen += chunk.len();
        }
        let k = 1.0 / seen as f64;
        log.epochs.push(EpochLog {
            epoch,
            reconstruction: sums[0] * k,
            kl: sums[1] * k,
            prior_kl: sums[2] * k,
        });
        log.prior_snapshots.push(model.prior.clone());
    }
    Ok((model, log))
}

/// Mean `KL(enc(a) ‖ prior(s))` over `batch` for each prior in `priors`,
/// always against the encoder of `model`. With a fixed encoder this isolates
/// how well each prior snapshot fits the final posteriors.
pub fn prior_matching_curve(model: &SkillModel, priors: &[Mlp], batch: &WindowBatch) -> Result<Vec<f64>> {
    let n = batch.actions.nrows();
    if n == 0 {
        return Err(Error::Empty("evaluation windows"));
    }
    let enc = model.encoder.predict(batch.actions.view())?;
    let (mu, lv) = split_gaussian(enc.view());
    priors
        .iter()
        .map(|prior| {
            let out = prior.predict(batch.states.view())?;
            let (pmu, plv) = split_gaussian(out.view());
            let total: f64 = (0..n)
                .map(|i| {
                    kl_diag(&mu.row(i).to_vec(), &lv.row(i).to_vec(), &pmu.row(i).to_vec(), &plv.row(i).to_vec())
                        .value
                })
                .sum();
            Ok(total / n as f64)
        })
        .collect()
}

/// `1 − SSE/SST` of `decode(encode-mean(a))` against `a`, pooled over all
/// elements with per-column means, in normalized action units.
pub fn explained_variance(model: &SkillModel, actions: ArrayView2<f64>) -> Result<f64> {
    if actions.nrows() == 0 {
        return Err(Error::Empty("evaluation windows"));
    }
    let means = model.encode_means(actions)?;
    let recon = model.decode_normalized(means.view())?;
    let col_mean = actions.mean_axis(Axis(0)).expect("non-empty");
    let sse: f64 = (&recon - &actions).iter().map(|d| d * d).sum();
    let sst: f64 = (&actions - &col_mean).iter().map(|d| d * d).sum();
    Ok(1.0 - sse / sst)
}

/// Deterministic trajectory-level split: every `k`-th trajectory (by a
/// seeded shuffle) goes to the held-out side.
pub fn split_trajectories<R: Rng + ?Sized>(
    trajectories: &[Trajectory],
    holdout_fraction: f64,
    rng: &mut R,
) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let mut idx: Vec<usize> = (0..trajectories.len()).collect();
    idx.shuffle(rng);
    let n_hold = ((trajectories.len() as f64) * holdout_fraction).round() as usize;
    let (hold, train) = idx.split_at(n_hold.min(trajectories.len()));
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| trajectories[i].clone()).collect::<Vec<_>>()
    };
    (pick(train), pick(hold))
}

/// Stacks `[state | skill]` rows.
pub fn state_skill_rows(states: ArrayView2<f64>, skills: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, skills]).expect("matching rows")
}
