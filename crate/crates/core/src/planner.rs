//! Risk planning: a cross-entropy search over skills that minimizes predicted
//! risk at a fixed state.
//!
//! Starting from a proposal distribution, each iteration samples `n_samples`
//! skills, keeps the `top_k` with the lowest predicted risk and refits a
//! diagonal Gaussian to them. The planned skill is one sample from the final
//! distribution.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::State;
use crate::error::{check_dim, Error, Result};
use crate::gaussian::DiagGaussian;
use crate::nn::sigmoid;
use crate::risk::RiskPredictor;
use crate::skills::{Skill, SkillModel};

/// Anything that scores a batch of skills at one state.
pub trait RiskModel {
    fn skill_dim(&self) -> usize;
    fn risks(&self, state: &State, skills: ArrayView2<f64>) -> Result<Vec<f64>>;
}

impl RiskModel for RiskPredictor {
    fn skill_dim(&self) -> usize {
        RiskPredictor::skill_dim(self)
    }

    fn risks(&self, state: &State, skills: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.predict_skills(state, skills)
    }
}

/// `sigmoid(‖z − target‖² − 1)`, independent of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticRisk {
    pub target: Vec<f64>,
}

impl QuadraticRisk {
    pub fn value(&self, z: &[f64]) -> f64 {
        let d2: f64 = z.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum();
        sigmoid(d2 - 1.0)
    }
}

impl RiskModel for QuadraticRisk {
    fn skill_dim(&self) -> usize {
        self.target.len()
    }

    fn risks(&self, _state: &State, skills: ArrayView2<f64>) -> Result<Vec<f64>> {
        check_dim("skill", self.target.len(), skills.ncols())?;
        Ok(skills
            .rows()
            .into_iter()
            .map(|z| self.value(z.as_slice().expect("standard layout")))
            .collect())
    }
}

/// Same risk for every skill.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRisk {
    pub skill_dim: usize,
    pub value: f64,
}

impl RiskModel for ConstantRisk {
    fn skill_dim(&self) -> usize {
        self.skill_dim
    }

    fn risks(&self, _state: &State, skills: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(vec![self.value; skills.nrows()])
    }
}

/// State-conditioned skill distribution to plan from (a policy or the prior).
pub trait SkillProposal {
    fn proposal(&self, state: &State) -> Result<DiagGaussian>;
}

impl SkillProposal for SkillModel {
    fn proposal(&self, state: &State) -> Result<DiagGaussian> {
        self.prior(state)
    }
}

impl SkillProposal for DiagGaussian {
    fn proposal(&self, _state: &State) -> Result<DiagGaussian> {
        Ok(self.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerInit {
    /// Moments of `n_samples` draws from the proposal.
    PolicySamples,
    /// The proposal's own mean and variance.
    Proposal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub n_samples: usize,
    pub top_k: usize,
    pub n_iterations: usize,
    pub variance_floor: f64,
    pub init: PlannerInit,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            n_samples: 512,
            top_k: 64,
            n_iterations: 6,
            variance_floor: 1e-4,
            init: PlannerInit::PolicySamples,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_samples {
            return Err(Error::Config(format!(
                "planner needs 1 <= top_k <= n_samples, got top_k = {}, n_samples = {}",
                self.top_k, self.n_samples
            )));
        }
        if self.n_iterations == 0 {
            return Err(Error::Config("planner needs n_iterations >= 1".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("planner variance_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Elementwise mean and population variance (divisor `k`), variance floored.
pub fn refit_distribution(skills: ArrayView2<f64>, variance_floor: f64) -> Result<DiagGaussian> {
    let k = skills.nrows();
    if k == 0 {
        return Err(Error::Empty("skills to refit"));
    }
    let mean = skills.mean_axis(Axis(0)).expect("non-empty");
    let var = skills
        .axis_iter(Axis(1))
        .zip(mean.iter())
        .map(|(col, m)| (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / k as f64).max(variance_floor))
        .collect();
    Ok(DiagGaussian {
        mean: mean.to_vec(),
        var,
    })
}

/// Indices of the `k` lowest scores, ties broken by ascending index.
pub fn top_k_lowest(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanTrace {
    pub initial: DiagGaussian,
    pub final_dist: DiagGaussian,
    /// `p̄_0 … p̄_{N_p}`: mean predicted risk of each sampled batch; the last
    /// entry comes from an extra batch drawn from the final distribution.
    pub mean_risk: Vec<f64>,
    pub skill: Skill,
}

fn score<M: RiskModel + ?Sized>(risk: &M, state: &State, skills: &Array2<f64>) -> Result<Vec<f64>> {
    let p = risk.risks(state, skills.view())?;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("predicted risk during planning".into()));
    }
    Ok(p)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn plan<P, M, R>(proposal: &P, risk: &M, state: &State, config: &PlannerConfig, rng: &mut R, trace: bool) -> Result<PlanTrace>
where
    P: SkillProposal + ?Sized,
    M: RiskModel + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let q = proposal.proposal(state)?;
    check_dim("planner skill", risk.skill_dim(), q.dim())?;
    let initial = match config.init {
        PlannerInit::PolicySamples => refit_distribution(q.sample_n(config.n_samples, rng).view(), config.variance_floor)?,
        PlannerInit::Proposal => q,
    };
    let mut dist = initial.clone();
    let mut mean_risk = Vec::with_capacity(config.n_iterations + 1);
    for _ in 0..config.n_iterations {
        let skills = dist.sample_n(config.n_samples, rng);
        let p = score(risk, state, &skills)?;
        mean_risk.push(mean(&p));
        let elite = skills.select(Axis(0), &top_k_lowest(&p, config.top_k));
        dist = refit_distribution(elite.view(), config.variance_floor)?;
    }
    let skill = Skill(dist.sample(rng));
    if trace {
        let skills = dist.sample_n(config.n_samples, rng);
        mean_risk.push(mean(&score(risk, state, &skills)?));
    }
    Ok(PlanTrace {
        initial,
        final_dist: dist,
        mean_risk,
        skill,
    })
}

pub fn risk_planning<P, M, R>(proposal: &P, risk: &M, state: &State, config: &PlannerConfig, rng: &mut R) -> Result<Skill>
where
    P: SkillProposal + ?Sized,
    M: RiskModel + ?Sized,
    R: Rng + ?Sized,
{
    Ok(plan(proposal, risk, state, config, rng, false)?.skill)
}

/// Like [`risk_planning`] (same returned skill for the same RNG state) but
/// also reports the per-iteration risks.
pub fn risk_planning_traced<P, M, R>(
    proposal: &P,
    risk: &M,
    state: &State,
    config: &PlannerConfig,
    rng: &mut R,
) -> Result<PlanTrace>
where
    P: SkillProposal + ?Sized,
    M: RiskModel + ?Sized,
    R: Rng + ?Sized,
{
    plan(proposal, risk, state, config, rng, true)
}

/// Single-pass selection: the lowest-risk of `n_samples` proposal draws.
pub fn naive_planning<P, M, R>(proposal: &P, risk: &M, state: &State, n_samples: usize, rng: &mut R) -> Result<Skill>
where
    P: SkillProposal + ?Sized,
    M: RiskModel + ?Sized,
    R: Rng + ?Sized,
{
    if n_samples == 0 {
        return Err(Error::Config("naive planning needs n_samples >= 1".into()));
    }
    let skills = proposal.proposal(state)?.sample_n(n_samples, rng);
    let p = score(risk, state, &skills)?;
    let best = top_k_lowest(&p, 1)[0];
    Ok(Skill(skills.row(best).to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub iteration: usize,
    pub mean_delta_p: f64,
    pub std_delta_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanningDiagnostics {
    pub rows: Vec<DiagnosticsRow>,
    /// `p̄_i − p̄_0` per state.
    pub per_state: Vec<Vec<f64>>,
}

impl PlanningDiagnostics {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "iteration,mean_delta_p,std_delta_p")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.iteration, r.mean_delta_p, r.std_delta_p)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Traced planning at each state; reports the across-state mean and
/// population std of `p̄_i − p̄_0` for `i = 0..=N_p`.
pub fn planning_diagnostics<P, M, R>(
    proposal: &P,
    risk: &M,
    states: &[State],
    config: &PlannerConfig,
    rng: &mut R,
) -> Result<PlanningDiagnostics>
where
    P: SkillProposal + ?Sized,
    M: RiskModel + ?Sized,
    R: Rng + ?Sized,
{
    if states.is_empty() {
        return Err(Error::Empty("diagnostic states"));
    }
    let mut per_state = Vec::with_capacity(states.len());
    for s in states {
        let t = risk_planning_traced(proposal, risk, s, config, rng)?;
        let p0 = t.mean_risk[0];
        per_state.push(t.mean_risk.iter().map(|p| p - p0).collect::<Vec<_>>());
    }
    let n = states.len() as f64;
    let rows = (0..=config.n_iterations)
        .map(|i| {
            let m = per_state.iter().map(|d| d[i]).sum::<f64>() / n;
            let v = per_state.iter().map(|d| (d[i] - m) * (d[i] - m)).sum::<f64>() / n;
            DiagnosticsRow {
                iteration: i,
                mean_delta_p: m,
                std_delta_p: v.sqrt(),
            }
        })
        .collect();
    Ok(PlanningDiagnostics { rows, per_state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn quadratic(dim: usize) -> QuadraticRisk {
        QuadraticRisk {
            target: vec![0.5; dim],
        }
    }

    fn origin() -> State {
        State(vec![0.0, 0.0])
    }

    #[test]
    fn refit_two_points_by_hand() {
        let g = refit_distribution(array![[0.0, 0.0], [2.0, 2.0]].view(), 1e-4).unwrap();
        assert_eq!(g.mean, vec![1.0, 1.0]);
        assert_eq!(g.var, vec![1.0, 1.0]);
    }

    #[test]
    fn refit_single_skill_floors_variance() {
        let g = refit_distribution(array![[0.3, -0.7, 2.0]].view(), 1e-4).unwrap();
        assert_eq!(g.mean, vec![0.3, -0.7, 2.0]);
        assert_eq!(g.var, vec![1e-4; 3]);
        assert!(refit_distribution(Array2::zeros((0, 3)).view(), 1e-4).is_err());
    }

    #[test]
    fn refit_matches_two_pass_moments() {
        let mut rng = seeded(4);
        let skills = Array2::from_shape_fn((10, 10), |_| rng.random_range(-2.0..2.0));
        let g = refit_distribution(skills.view(), 1e-12).unwrap();
        for j in 0..10 {
            let col: Vec<f64> = (0..10).map(|i| skills[[i, j]]).collect();
            let m = col.iter().sum::<f64>() / 10.0;
            let v = col.iter().map(|x| x * x).sum::<f64>() / 10.0 - m * m;
            assert!((g.mean[j] - m).abs() < 1e-12);
            assert!((g.var[j] - v).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_risk_still_yields_a_valid_skill() {
        let risk = ConstantRisk { skill_dim: 4, value: 0.3 };
        let z = risk_planning(&DiagGaussian::standard(4), &risk, &origin(), &PlannerConfig::default(), &mut seeded(0)).unwrap();
        assert_eq!(z.0.len(), 4);
        assert!(z.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_risk_gives_zero_deltas() {
        let risk = ConstantRisk { skill_dim: 3, value: 0.42 };
        let d = planning_diagnostics(&DiagGaussian::standard(3), &risk, &[origin()], &PlannerConfig::default(), &mut seeded(1)).unwrap();
        assert_eq!(d.rows.len(), 7);
        assert!(d.rows.iter().all(|r| r.mean_delta_p == 0.0 && r.std_delta_p == 0.0));
    }

    #[test]
    fn quadratic_objective_moves_toward_target_and_descends() {
        let risk = quadratic(10);
        let config = PlannerConfig::default();
        for seed in 0..5 {
            let t = risk_planning_traced(&DiagGaussian::standard(10), &risk, &origin(), &config, &mut seeded(seed)).unwrap();
            let dist = |m: &[f64]| m.iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>().sqrt();
            assert!(dist(&t.final_dist.mean) < dist(&t.initial.mean));
            assert_eq!(t.mean_risk.len(), 7);
            for w in t.mean_risk.windows(2) {
                assert!(w[1] <= w[0], "{:?}", t.mean_risk);
            }
        }
    }

    #[test]
    fn traced_and_plain_return_the_same_skill() {
        let risk = quadratic(3);
        let g = DiagGaussian::standard(3);
        let c = PlannerConfig::default();
        let a = risk_planning(&g, &risk, &origin(), &c, &mut seeded(9)).unwrap();
        let b = risk_planning_traced(&g, &risk, &origin(), &c, &mut seeded(9)).unwrap().skill;
        assert_eq!(a, b);
    }

    #[test]
    fn proposal_init_uses_the_distribution_directly() {
        let g = DiagGaussian::new(vec![0.1, 0.2], vec![0.3, 0.4]).unwrap();
        let c = PlannerConfig {
            init: PlannerInit::Proposal,
            ..PlannerConfig::default()
        };
        let t = risk_planning_traced(&g, &quadratic(2), &origin(), &c, &mut seeded(0)).unwrap();
        assert_eq!(t.initial, g);
    }

    #[test]
    fn naive_planning_picks_lowest_risk() {
        struct Table;
        impl RiskModel for Table {
            fn skill_dim(&self) -> usize {
                1
            }
            fn risks(&self, _: &State, skills: ArrayView2<f64>) -> Result<Vec<f64>> {
                Ok([0.9, 0.2, 0.5][..skills.nrows()].to_vec())
            }
        }
        let g = DiagGaussian::standard(1);
        let mut rng = seeded(2);
        let z = naive_planning(&g, &Table, &origin(), 3, &mut rng.clone()).unwrap();
        let draws = g.sample_n(3, &mut rng);
        assert_eq!(z.0[0], draws[[1, 0]]);
    }

    #[test]
    fn non_finite_risk_aborts() {
        let risk = ConstantRisk {
            skill_dim: 2,
            value: f64::NAN,
        };
        assert!(matches!(
            risk_planning(&DiagGaussian::standard(2), &risk, &origin(), &PlannerConfig::default(), &mut seeded(0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            PlannerConfig { top_k: 0, ..Default::default() },
            PlannerConfig { top_k: 600, ..Default::default() },
            PlannerConfig { n_iterations: 0, ..Default::default() },
            PlannerConfig { variance_floor: 0.0, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn top_k_selects_the_lowest_scores(scores in prop::collection::vec(0u8..20, 1..80), k in 1usize..80) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let k = k.min(scores.len());
            let picked = top_k_lowest(&scores, k);
            prop_assert_eq!(picked.len(), k);
            let worst = picked.iter().map(|&i| scores[i]).fold(f64::MIN, f64::max);
            for i in 0..scores.len() {
                if !picked.contains(&i) {
                    prop_assert!(scores[i] >= worst);
                    // ties resolve toward lower indices
                    if scores[i] == worst {
                        prop_assert!(picked.iter().filter(|&&j| scores[j] == worst).all(|&j| j < i));
                    }
                }
            }
        }

        #[test]
        fn permuting_candidates_keeps_the_selected_scores(scores in prop::collection::vec(-5.0f64..5.0, 2..60), k in 1usize..60, seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let k = k.min(scores.len());
            let mut perm = scores.clone();
            perm.shuffle(&mut seeded(seed));
            let mut a: Vec<f64> = top_k_lowest(&scores, k).into_iter().map(|i| scores[i]).collect();
            let mut b: Vec<f64> = top_k_lowest(&perm, k).into_iter().map(|i| perm[i]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn refit_variance_respects_floor(rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..20), floor in 1e-6f64..1.0) {
            let n = rows.len();
            let skills = Array2::from_shape_vec((n, 3), rows.concat()).unwrap();
            let g = refit_distribution(skills.view(), floor).unwrap();
            prop_assert!(g.var.iter().all(|&v| v >= floor));
        }
    }
}
