//! Skill risk predictor `P(c = 1 | s, z)` trained from positive (led to a
//! violation) and unlabeled decision pairs with the non-negative PU loss
//!
//! ```text
//! λ·L¹(P) + max(−ξ, L⁰(U) − λ·L⁰(P))
//! L¹ = −mean log p,   L⁰ = −mean log(1 − p)
//! ```
//!
//! Losses are computed from logits with a stable softplus. When the inner
//! estimate drops below `−ξ` the second term is clamped and contributes no
//! gradient.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demo::{DemoDataset, Trajectory};
use crate::env::State;
use crate::error::{check_dim, Error, Result};
use crate::nn::{sigmoid, softplus, Activation, Adam, Checkpoint, Gradients, Head, Mlp, MlpShape};
use crate::skills::{window_starts, Skill, SkillModel};

pub const RISK_CHECKPOINT_KIND: &str = "risk_predictor";

pub const LAMBDA_MIN: f64 = 0.02;
pub const LAMBDA_MAX: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPair {
    pub state: State,
    pub skill: Skill,
}

impl DecisionPair {
    fn row(&self) -> impl Iterator<Item = f64> + '_ {
        self.state.0.iter().chain(&self.skill.0).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PuLabel {
    #[serde(rename = "p")]
    Positive,
    #[serde(rename = "u")]
    Unlabeled,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PuDataset {
    pub positives: Vec<DecisionPair>,
    pub unlabeled: Vec<DecisionPair>,
}

#[derive(Serialize, Deserialize)]
struct PuLine {
    state: State,
    skill: Skill,
    label: PuLabel,
}

impl PuDataset {
    pub fn len(&self) -> usize {
        self.positives.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, pair: DecisionPair, label: PuLabel) {
        match label {
            PuLabel::Positive => self.positives.push(pair),
            PuLabel::Unlabeled => self.unlabeled.push(pair),
        }
    }

    pub fn extend(&mut self, other: &PuDataset) {
        self.positives.extend(other.positives.iter().cloned());
        self.unlabeled.extend(other.unlabeled.iter().cloned());
    }

    /// JSON lines of `{state, skill, label}`, positives first.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        let tagged = self
            .positives
            .iter()
            .map(|p| (p, PuLabel::Positive))
            .chain(self.unlabeled.iter().map(|p| (p, PuLabel::Unlabeled)));
        for (pair, label) in tagged {
            let line = PuLine {
                state: pair.state.clone(),
                skill: pair.skill.clone(),
                label,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut ds = PuDataset::default();
        for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: PuLine = serde_json::from_str(&line).map_err(|e| Error::Artifact {
                path: path.display().to_string(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            ds.push(
                DecisionPair {
                    state: l.state,
                    skill: l.skill,
                },
                l.label,
            );
        }
        Ok(ds)
    }
}

/// Stacks `[state | skill]` rows.
pub fn pair_rows(pairs: &[DecisionPair]) -> Array2<f64> {
    let width = pairs.first().map_or(0, |p| p.state.0.len() + p.skill.0.len());
    let flat: Vec<f64> = pairs.iter().flat_map(|p| p.row()).collect();
    Array2::from_shape_vec((pairs.len(), width), flat).expect("uniform pair widths")
}

fn select_rows(pairs: &[DecisionPair], idx: &[usize]) -> Array2<f64> {
    let width = pairs[0].state.0.len() + pairs[0].skill.0.len();
    let flat: Vec<f64> = idx.iter().flat_map(|&i| pairs[i].row()).collect();
    Array2::from_shape_vec((idx.len(), width), flat).expect("uniform pair widths")
}

/// Whether the step at `t` sees a violation within `t..=min(t + h − 1, end)`.
pub fn positive_at(violation: Option<usize>, t: usize, horizon: usize) -> bool {
    violation.is_some_and(|v| v >= t && v < t + horizon)
}

/// One pair per step of every trajectory. Steps that start a full window use
/// the encoder mean of that window; the last `H − 1` steps use a prior sample.
pub fn assemble_pu_data<R: Rng + ?Sized>(
    demos: &DemoDataset,
    skill_model: &SkillModel,
    horizon: usize,
    rng: &mut R,
) -> Result<PuDataset> {
    assemble_from_trajectories(&demos.trajectories, skill_model, horizon, rng)
}

pub fn assemble_from_trajectories<R: Rng + ?Sized>(
    trajectories: &[Trajectory],
    skill_model: &SkillModel,
    horizon: usize,
    rng: &mut R,
) -> Result<PuDataset> {
    if trajectories.iter().all(|t| t.is_empty()) {
        return Err(Error::Empty("demonstration trajectories"));
    }
    if horizon != skill_model.dims.horizon {
        return Err(Error::Config(format!(
            "PU horizon {horizon} differs from skill horizon {}",
            skill_model.dims.horizon
        )));
    }
    if let Some(s) = trajectories.iter().flat_map(|t| t.steps.first()).next() {
        check_dim("demo state", skill_model.dims.state_dim, s.state.0.len())?;
    }
    let refs = window_starts(trajectories, horizon);
    let windows = skill_model.dims.windows(trajectories, &refs);
    let means = skill_model.encode_means(windows.actions.view())?;
    let mut encoded = refs.iter().zip(means.rows());

    let mut ds = PuDataset::default();
    for (i, traj) in trajectories.iter().enumerate() {
        let violation = traj.violation_index();
        for (t, step) in traj.steps.iter().enumerate() {
            let skill = if t + horizon <= traj.len() {
                let (r, mean) = encoded.next().expect("one window per full-horizon step");
                debug_assert_eq!((r.trajectory, r.start), (i, t));
                Skill(mean.to_vec())
            } else {
                skill_model.sample_prior(&step.state, rng)?
            };
            let label = if positive_at(violation, t, horizon) {
                PuLabel::Positive
            } else {
                PuLabel::Unlabeled
            };
            ds.push(
                DecisionPair {
                    state: step.state.clone(),
                    skill,
                },
                label,
            );
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuConfig {
    pub lambda: f64,
    pub xi: f64,
}

impl Default for PuConfig {
    fn default() -> Self {
        Self { lambda: 0.1, xi: 0.0 }
    }
}

impl PuConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda < 1.0) || !(self.xi >= 0.0) {
            return Err(Error::Config(format!(
                "PU config needs 0 <= lambda < 1 and xi >= 0, got lambda = {}, xi = {}",
                self.lambda, self.xi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RiskMeta {
    state_dim: usize,
    skill_dim: usize,
    pu: PuConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskPredictor {
    pub net: Mlp,
    pub pu: PuConfig,
    state_dim: usize,
}

impl RiskPredictor {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, skill_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let net = Mlp::new(&Self::shape(state_dim, skill_dim, hidden), rng)?;
        Self::from_net(net, state_dim, PuConfig::default())
    }

    /// All-zero weights: predicts exactly 0.5 everywhere.
    pub fn zeros(state_dim: usize, skill_dim: usize, hidden: &[usize]) -> Result<Self> {
        let net = Mlp::zeros(&Self::shape(state_dim, skill_dim, hidden))?;
        Self::from_net(net, state_dim, PuConfig::default())
    }

    pub fn from_net(net: Mlp, state_dim: usize, pu: PuConfig) -> Result<Self> {
        pu.validate()?;
        if net.output_dim() != 1 || net.head() != Head::Sigmoid || net.input_dim() < state_dim {
            return Err(Error::Config("risk network needs a single sigmoid output".into()));
        }
        Ok(Self { net, pu, state_dim })
    }

    fn shape(state_dim: usize, skill_dim: usize, hidden: &[usize]) -> MlpShape {
        MlpShape {
            input: state_dim + skill_dim,
            hidden: hidden.to_vec(),
            output: 1,
            activation: Activation::Tanh,
            head: Head::Sigmoid,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn skill_dim(&self) -> usize {
        self.net.input_dim() - self.state_dim
    }

    pub fn predict_risk(&self, state: &State, skill: &Skill) -> Result<f64> {
        check_dim("risk state", self.state_dim, state.0.len())?;
        check_dim("risk skill", self.skill_dim(), skill.0.len())?;
        let row: Vec<f64> = state.0.iter().chain(&skill.0).copied().collect();
        Ok(self.net.predict_one(&row)?[0])
    }

    /// Probabilities for stacked `[state | skill]` rows.
    pub fn predict_rows(&self, rows: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.predict(rows)?.column(0).to_vec())
    }

    /// Probabilities for many skills at one state.
    pub fn predict_skills(&self, state: &State, skills: ArrayView2<f64>) -> Result<Vec<f64>> {
        check_dim("risk state", self.state_dim, state.0.len())?;
        check_dim("risk skill", self.skill_dim(), skills.ncols())?;
        let mut rows = Array2::zeros((skills.nrows(), self.net.input_dim()));
        for (mut row, z) in rows.rows_mut().into_iter().zip(skills.rows()) {
            for (d, v) in state.0.iter().chain(z.iter()).enumerate() {
                row[d] = *v;
            }
        }
        self.predict_rows(rows.view())
    }

    fn logits(&self, rows: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward(rows)?.raw.column(0).to_vec())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = RiskMeta {
            state_dim: self.state_dim,
            skill_dim: self.skill_dim(),
            pu: self.pu,
        };
        Checkpoint::new(RISK_CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serialize")).with("net", &self.net)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: RiskMeta = serde_json::from_value(ck.meta.clone())?;
        let net = ck.network("net")?.clone();
        check_dim("risk checkpoint input", meta.state_dim + meta.skill_dim, net.input_dim())?;
        Self::from_net(net, meta.state_dim, meta.pu)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, RISK_CHECKPOINT_KIND)?)
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

/// `L¹ = −mean log p` over the rows.
pub fn positive_loss(predictor: &RiskPredictor, rows: ArrayView2<f64>) -> Result<f64> {
    if rows.nrows() == 0 {
        return Err(Error::Empty("positive batch"));
    }
    Ok(mean(predictor.logits(rows)?.into_iter().map(|x| softplus(-x))))
}

/// `L⁰ = −mean log(1 − p)` over the rows.
pub fn negative_loss(predictor: &RiskPredictor, rows: ArrayView2<f64>) -> Result<f64> {
    if rows.nrows() == 0 {
        return Err(Error::Empty("negative batch"));
    }
    Ok(mean(predictor.logits(rows)?.into_iter().map(softplus)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuLoss {
    /// `L¹(P)`
    pub positive: f64,
    /// `L⁰(U) − λ·L⁰(P)` before clamping.
    pub negative_estimate: f64,
    /// Whether the estimate was clamped to `−ξ`.
    pub clamped: bool,
    pub total: f64,
}

impl PuLoss {
    /// The second term as it enters the total.
    pub fn negative_term(&self, xi: f64) -> f64 {
        self.negative_estimate.max(-xi)
    }
}

pub fn pu_loss(predictor: &RiskPredictor, positives: ArrayView2<f64>, unlabeled: ArrayView2<f64>) -> Result<PuLoss> {
    Ok(pu_loss_and_grad(predictor, positives, unlabeled)?.0)
}

pub fn pu_loss_and_grad(
    predictor: &RiskPredictor,
    positives: ArrayView2<f64>,
    unlabeled: ArrayView2<f64>,
) -> Result<(PuLoss, Gradients)> {
    if positives.nrows() == 0 {
        return Err(Error::Empty("positive batch"));
    }
    if unlabeled.nrows() == 0 {
        return Err(Error::Empty("unlabeled batch"));
    }
    let PuConfig { lambda, xi } = predictor.pu;
    let cache_p = predictor.net.forward(positives)?;
    let cache_u = predictor.net.forward(unlabeled)?;
    let xp = cache_p.raw.column(0);
    let xu = cache_u.raw.column(0);
    let (np, nu) = (xp.len() as f64, xu.len() as f64);

    let l1_p = xp.iter().map(|&x| softplus(-x)).sum::<f64>() / np;
    let l0_p = xp.iter().map(|&x| softplus(x)).sum::<f64>() / np;
    let l0_u = xu.iter().map(|&x| softplus(x)).sum::<f64>() / nu;
    let estimate = l0_u - lambda * l0_p;
    let clamped = estimate < -xi;
    let loss = PuLoss {
        positive: l1_p,
        negative_estimate: estimate,
        clamped,
        total: lambda * l1_p + estimate.max(-xi),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("PU loss".into()));
    }

    // d softplus(x)/dx = sigmoid(x), d softplus(−x)/dx = −sigmoid(−x)
    let active = if clamped { 0.0 } else { 1.0 };
    let d_p = xp.mapv(|x| (-lambda * sigmoid(-x) - active * lambda * sigmoid(x)) / np);
    let (mut grads, _) = predictor.net.backward_raw(&cache_p, d_p.insert_axis(ndarray::Axis(1)))?;
    if !clamped {
        let d_u = xu.mapv(|x| sigmoid(x) / nu);
        let (g_u, _) = predictor.net.backward_raw(&cache_u, d_u.insert_axis(ndarray::Axis(1)))?;
        grads.add_assign(&g_u);
    }
    Ok((loss, grads))
}

/// `clamp(|P| / (|P| + |U|), LAMBDA_MIN, LAMBDA_MAX)`.
pub fn estimate_class_prior(ds: &PuDataset) -> Result<f64> {
    if ds.positives.is_empty() {
        return Err(Error::Empty("positive pairs"));
    }
    Ok((ds.positives.len() as f64 / ds.len() as f64).clamp(LAMBDA_MIN, LAMBDA_MAX))
}

fn draw_indices<R: Rng + ?Sized>(len: usize, amount: usize, rng: &mut R) -> Vec<usize> {
    if len >= amount {
        index::sample(rng, len, amount).into_vec()
    } else {
        (0..amount).map(|_| rng.random_range(0..len)).collect()
    }
}

/// `n_steps` Adam steps on the PU loss, each on `batch_size` positives and
/// `batch_size` unlabeled pairs drawn independently (with replacement only
/// when a set is smaller than the batch). Returns the per-step losses.
pub fn update_predictor<R: Rng + ?Sized>(
    predictor: &mut RiskPredictor,
    ds: &PuDataset,
    optimizer: &mut Adam,
    n_steps: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<PuLoss>> {
    if ds.positives.is_empty() {
        return Err(Error::Empty("positive pairs"));
    }
    if ds.unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled pairs"));
    }
    if batch_size == 0 {
        return Err(Error::Config("risk batch_size must be >= 1".into()));
    }
    let mut losses = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let ip = draw_indices(ds.positives.len(), batch_size, rng);
        let iu = draw_indices(ds.unlabeled.len(), batch_size, rng);
        let p = select_rows(&ds.positives, &ip);
        let u = select_rows(&ds.unlabeled, &iu);
        let (loss, grads) = pu_loss_and_grad(predictor, p.view(), u.view())?;
        optimizer.step(&mut predictor.net, &grads)?;
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{EndReason, Step};
    use crate::env::{Action, Bound};
    use crate::nn::{AdamConfig, Dense};
    use crate::rng::seeded;
    use crate::skills::SkillDims;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    /// Predictor whose logit is `w·x + b` on a 1-wide input.
    fn affine(w: f64, b: f64, pu: PuConfig) -> RiskPredictor {
        let layer = Dense {
            weight: array![[w]],
            bias: array![b],
        };
        let net = Mlp::from_layers(vec![layer], Activation::Tanh, Head::Sigmoid).unwrap();
        RiskPredictor::from_net(net, 0, pu).unwrap()
    }

    fn constant(p: f64, pu: PuConfig) -> RiskPredictor {
        affine(0.0, (p / (1.0 - p)).ln(), pu)
    }

    fn rows(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 1), |(i, _)| i as f64 * 0.1)
    }

    #[test]
    fn zero_network_predicts_one_half() {
        let r = RiskPredictor::zeros(2, 3, &[8, 8]).unwrap();
        let mut rng = seeded(0);
        for _ in 0..20 {
            let s = State((0..2).map(|_| rng.random_range(-5.0..5.0)).collect());
            let z = Skill((0..3).map(|_| rng.random_range(-5.0..5.0)).collect());
            assert_eq!(r.predict_risk(&s, &z).unwrap(), 0.5);
        }
    }

    #[test]
    fn outputs_stay_inside_unit_interval() {
        let mut rng = seeded(1);
        let r = RiskPredictor::new(2, 10, &[64, 64, 64], &mut rng).unwrap();
        for _ in 0..1000 {
            let s = State((0..2).map(|_| rng.random_range(-3.0..3.0)).collect());
            let z = Skill((0..10).map(|_| rng.random_range(-3.0..3.0)).collect());
            let p = r.predict_risk(&s, &z).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn losses_match_closed_forms() {
        let half = constant(0.5, PuConfig::default());
        let ln2 = std::f64::consts::LN_2;
        assert!((positive_loss(&half, rows(7).view()).unwrap() - ln2).abs() < 1e-12);
        assert!((negative_loss(&half, rows(7).view()).unwrap() - ln2).abs() < 1e-12);
        let quarter = constant(0.25, PuConfig::default());
        assert!((positive_loss(&quarter, rows(1).view()).unwrap() - 4f64.ln()).abs() < 1e-12);
        let three_q = constant(0.75, PuConfig::default());
        assert!((negative_loss(&three_q, rows(1).view()).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sure = constant(0.999, PuConfig::default());
        assert!((positive_loss(&sure, rows(5).view()).unwrap() + 0.999f64.ln()).abs() < 1e-12);
        let surer = constant(0.9999, PuConfig::default());
        assert!(positive_loss(&surer, rows(5).view()).unwrap() < 1e-3);
    }

    #[test]
    fn negative_loss_matches_direct_log_of_probabilities() {
        let r = affine(1.7, -0.3, PuConfig::default());
        let x = Array2::from_shape_fn((25, 1), |(i, _)| (i as f64 - 12.0) * 0.37);
        let direct: f64 = x.column(0).iter().map(|&v| -(1.0 - 1.0 / (1.0 + (-(1.7 * v - 0.3)).exp())).ln()).sum::<f64>() / 25.0;
        assert!((negative_loss(&r, x.view()).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn empty_batches_are_errors() {
        let r = constant(0.5, PuConfig::default());
        let empty = Array2::<f64>::zeros((0, 1));
        assert!(positive_loss(&r, empty.view()).is_err());
        assert!(negative_loss(&r, empty.view()).is_err());
        assert!(pu_loss(&r, empty.view(), rows(2).view()).is_err());
        assert!(pu_loss(&r, rows(2).view(), empty.view()).is_err());
    }

    #[test]
    fn pu_loss_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        let r = constant(0.5, PuConfig { lambda: 0.3, xi: 0.0 });
        let l = pu_loss(&r, rows(4).view(), rows(6).view()).unwrap();
        assert!((l.total - ln2).abs() < 1e-12);
        assert!(!l.clamped);

        let r = affine(2.0, 0.5, PuConfig { lambda: 0.0, xi: 0.0 });
        let u = Array2::from_shape_fn((9, 1), |(i, _)| i as f64 * 0.2 - 1.0);
        let l = pu_loss(&r, rows(3).view(), u.view()).unwrap();
        assert!((l.total - negative_loss(&r, u.view()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn clamped_branch_drops_the_negative_gradient() {
        // positives scored much riskier than unlabeled drive the estimate below zero
        let r = affine(3.0, 0.0, PuConfig { lambda: 0.45, xi: 0.0 });
        let p = Array2::from_elem((4, 1), -2.0);
        let u = Array2::from_elem((4, 1), -3.0);
        let (l, g) = pu_loss_and_grad(&r, p.view(), u.view()).unwrap();
        assert!(l.clamped);
        assert_eq!(l.total, 0.45 * l.positive);
        // only λ·L¹ remains: d/dlogit = −λ·sigmoid(−x)/n at x = −6 for each of 4 rows
        let d_logit = -0.45 * sigmoid(6.0);
        assert!((g.layers[0].bias[0] - d_logit).abs() < 1e-12);
        assert!((g.layers[0].weight[[0, 0]] - d_logit * -2.0).abs() < 1e-12);
    }

    #[test]
    fn class_prior_formula_and_clamp() {
        let pair = DecisionPair {
            state: State(vec![0.0]),
            skill: Skill(vec![0.0]),
        };
        let mut ds = PuDataset {
            positives: vec![pair.clone(); 100],
            unlabeled: vec![pair.clone(); 900],
        };
        assert!((estimate_class_prior(&ds).unwrap() - 0.1).abs() < 1e-12);
        ds.positives = vec![pair.clone(); 990];
        ds.unlabeled = vec![pair.clone(); 10];
        assert_eq!(estimate_class_prior(&ds).unwrap(), LAMBDA_MAX);
        ds.positives = vec![pair.clone(); 1];
        ds.unlabeled = vec![pair; 999];
        assert_eq!(estimate_class_prior(&ds).unwrap(), LAMBDA_MIN);
        ds.positives.clear();
        assert!(estimate_class_prior(&ds).is_err());
    }

    #[test]
    fn class_prior_recovers_synthetic_rate() {
        // each pair is truly positive w.p. 0.2 and labeled whenever it is
        let mut rng = seeded(11);
        let pair = DecisionPair {
            state: State(vec![0.0]),
            skill: Skill(vec![0.0]),
        };
        let mut ds = PuDataset::default();
        for _ in 0..5000 {
            let label = if rng.random_bool(0.2) {
                PuLabel::Positive
            } else {
                PuLabel::Unlabeled
            };
            ds.push(pair.clone(), label);
        }
        let lam = estimate_class_prior(&ds).unwrap();
        assert!((0.1..=0.3).contains(&lam), "{lam}");
    }

    #[test]
    fn estimate_is_unbiased_for_the_negative_share() {
        let lam = 0.3;
        let r = affine(1.3, 0.2, PuConfig { lambda: lam, xi: 0.0 });
        let mut rng = seeded(5);
        let pos = Normal::new(1.0, 1.0).unwrap();
        let neg = Normal::new(-1.0, 1.0).unwrap();
        let n = 10_000;
        let draw = |d: &Normal<f64>, rng: &mut _| Array2::from_shape_fn((n, 1), |_| d.sample(rng));
        let p = draw(&pos, &mut rng);
        let negs = draw(&neg, &mut rng);
        let u = Array2::from_shape_fn((n, 1), |_| {
            if rng.random_bool(lam) {
                pos.sample(&mut rng)
            } else {
                neg.sample(&mut rng)
            }
        });
        let est = negative_loss(&r, u.view()).unwrap() - lam * negative_loss(&r, p.view()).unwrap();
        let truth = (1.0 - lam) * negative_loss(&r, negs.view()).unwrap();
        assert!((est - truth).abs() < 0.05, "{est} vs {truth}");
    }

    fn traj(len: usize, violate: bool) -> Trajectory {
        let steps = (0..len)
            .map(|t| Step {
                state: State(vec![t as f64 * 0.01, 0.0]),
                action: Action(vec![0.05, -0.02]),
                reward: 0.0,
                cost: if violate && t + 1 == len { 1.0 } else { 0.0 },
            })
            .collect();
        Trajectory {
            steps,
            ended_by: if violate { EndReason::Violation } else { EndReason::Truncation },
        }
    }

    fn tiny_skill_model(horizon: usize) -> SkillModel {
        let dims = SkillDims {
            horizon,
            skill_dim: 3,
            state_dim: 2,
            action_dim: 2,
            action_bounds: vec![Bound { lo: -0.1, hi: 0.1 }; 2],
        };
        SkillModel::new(dims, &[8], &mut seeded(2)).unwrap()
    }

    /// Independent labeler: scan forward from each step.
    fn brute_labels(t: &Trajectory, horizon: usize) -> Vec<bool> {
        (0..t.len())
            .map(|i| {
                let mut hit = false;
                for k in 0..horizon {
                    if let Some(s) = t.steps.get(i + k) {
                        if s.cost > 0.0 {
                            hit = true;
                        }
                    }
                }
                hit
            })
            .collect()
    }

    #[test]
    fn length_twelve_violating_trajectory() {
        let m = tiny_skill_model(10);
        let t = traj(12, true);
        let ds = assemble_from_trajectories(std::slice::from_ref(&t), &m, 10, &mut seeded(0)).unwrap();
        let expect = brute_labels(&t, 10).iter().filter(|&&b| b).count();
        assert_eq!(expect, 10);
        assert_eq!(ds.positives.len(), 10);
        assert_eq!(ds.unlabeled.len(), 2);
        // t = 0..2 carry encoder means, t = 3.. prior samples
        let means = m.encode_means(m.dims.windows(std::slice::from_ref(&t), &window_starts(std::slice::from_ref(&t), 10)).actions.view()).unwrap();
        let all: Vec<_> = ds.unlabeled.iter().chain(&ds.positives).collect();
        let at = |k: usize| all.iter().find(|p| (p.state.0[0] - k as f64 * 0.01).abs() < 1e-12).unwrap();
        for k in 0..3 {
            assert_eq!(at(k).skill.0, means.row(k).to_vec());
        }
    }

    #[test]
    fn safe_trajectory_has_no_positives_and_counts_add_up() {
        let m = tiny_skill_model(10);
        let ts = vec![traj(15, false), traj(4, false), traj(20, true)];
        let ds = assemble_from_trajectories(&ts, &m, 10, &mut seeded(0)).unwrap();
        assert_eq!(ds.len(), 39);
        assert_eq!(ds.positives.len(), 10);
        let only_safe = assemble_from_trajectories(&ts[..2], &m, 10, &mut seeded(0)).unwrap();
        assert!(only_safe.positives.is_empty());
    }

    #[test]
    fn labels_match_brute_force_on_random_trajectories() {
        let m = tiny_skill_model(10);
        let mut rng = seeded(21);
        let ts: Vec<_> = (0..50).map(|_| traj(rng.random_range(1..40), rng.random_bool(0.5))).collect();
        let ds = assemble_from_trajectories(&ts, &m, 10, &mut seeded(0)).unwrap();
        let expect: usize = ts.iter().map(|t| brute_labels(t, 10).iter().filter(|&&b| b).count()).sum();
        assert_eq!(ds.positives.len(), expect);
        assert_eq!(ds.len(), ts.iter().map(Trajectory::len).sum::<usize>());
        for t in &ts {
            for (i, b) in brute_labels(t, 10).into_iter().enumerate() {
                assert_eq!(positive_at(t.violation_index(), i, 10), b);
            }
        }
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let m = tiny_skill_model(10);
        assert!(assemble_from_trajectories(&[traj(12, true)], &m, 5, &mut seeded(0)).is_err());
    }

    fn separable(n: usize, rng: &mut impl Rng) -> (Vec<DecisionPair>, Vec<DecisionPair>) {
        let mk = |z1: f64, rng: &mut dyn rand::RngCore| DecisionPair {
            state: State(vec![rng.random_range(-1.0..1.0)]),
            skill: Skill(vec![z1, rng.random_range(-1.0..1.0)]),
        };
        let pos = (0..n).map(|_| mk(rng.random_range(0.1..2.0), rng)).collect();
        let neg = (0..n).map(|_| mk(rng.random_range(-2.0..-0.1), rng)).collect();
        (pos, neg)
    }

    fn synthetic_pu(rng: &mut impl Rng) -> (PuDataset, Vec<DecisionPair>, Vec<DecisionPair>) {
        let (pos, neg) = separable(1200, rng);
        let ds = PuDataset {
            positives: pos[..300].to_vec(),
            unlabeled: pos[300..500].iter().chain(&neg[..800]).cloned().collect(),
        };
        (ds, pos[1000..].to_vec(), neg[1000..].to_vec())
    }

    #[test]
    fn training_separates_held_out_classes_and_reduces_loss() {
        let mut rng = seeded(8);
        let (ds, hp, hn) = synthetic_pu(&mut rng);
        let mut r = RiskPredictor::new(1, 2, &[32, 32], &mut rng).unwrap();
        r.pu.lambda = estimate_class_prior(&ds).unwrap();
        let mut opt = Adam::new(&r.net, AdamConfig::default());
        let losses = update_predictor(&mut r, &ds, &mut opt, 400, 64, &mut rng).unwrap();
        let head: f64 = losses[..20].iter().map(|l| l.total).sum();
        let tail: f64 = losses[losses.len() - 20..].iter().map(|l| l.total).sum();
        assert!(tail < head);
        assert!(losses.iter().all(|l| l.negative_term(r.pu.xi) >= 0.0));
        let mp = r.predict_rows(pair_rows(&hp).view()).unwrap().iter().sum::<f64>() / hp.len() as f64;
        let mn = r.predict_rows(pair_rows(&hn).view()).unwrap().iter().sum::<f64>() / hn.len() as f64;
        assert!(mp > mn, "{mp} vs {mn}");
    }

    #[test]
    fn updates_are_seed_deterministic() {
        let (ds, _, _) = synthetic_pu(&mut seeded(8));
        let run = || {
            let mut rng = seeded(3);
            let mut r = RiskPredictor::new(1, 2, &[16], &mut rng).unwrap();
            let mut opt = Adam::new(&r.net, AdamConfig::default());
            let l = update_predictor(&mut r, &ds, &mut opt, 30, 16, &mut rng).unwrap();
            (r, l)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn small_sets_are_sampled_with_replacement() {
        let mut rng = seeded(4);
        let (mut ds, _, _) = synthetic_pu(&mut rng);
        ds.positives.truncate(3);
        let mut r = RiskPredictor::new(1, 2, &[8], &mut rng).unwrap();
        let mut opt = Adam::new(&r.net, AdamConfig::default());
        assert_eq!(update_predictor(&mut r, &ds, &mut opt, 5, 32, &mut rng).unwrap().len(), 5);
    }

    #[test]
    fn dataset_and_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _, _) = synthetic_pu(&mut seeded(1));
        let path = dir.path().join("pu.jsonl");
        ds.save(&path).unwrap();
        assert_eq!(PuDataset::load(&path).unwrap(), ds);

        let mut r = RiskPredictor::new(1, 2, &[8], &mut seeded(0)).unwrap();
        r.pu.lambda = 0.17;
        let ck = dir.path().join("risk.json");
        r.save(&ck).unwrap();
        assert_eq!(RiskPredictor::load(&ck).unwrap(), r);
        assert!(matches!(
            RiskPredictor::load(&dir.path().join("none.json")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
