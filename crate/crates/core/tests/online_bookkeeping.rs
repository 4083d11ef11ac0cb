use safeskill::agent::{train_online, OnlineConfig, OnlineInputs, RunMode, SacConfig};
use safeskill::config::PipelineConfig;
use safeskill::demo::DemoDataset;
use safeskill::env::{make_env, CLIFF_CORRIDOR, HAZARD_WORLD_2D};
use safeskill::pipeline::{self, SeedPaths};
use safeskill::planner::PlannerConfig;
use safeskill::risk::{PuDataset, RiskPredictor};
use safeskill::skills::SkillModel;

fn offline(env: &str) -> (tempfile::TempDir, PipelineConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_text(&format!(
        "env = {env}\nseeds = 3\ndemos.count = 40\nskills.epochs = 3\nskills.hidden = 16\nrisk.hidden = 16\nrisk.steps = 50\n"
    ))
    .unwrap();
    pipeline::run_offline(&cfg, dir.path(), 3).unwrap();
    (dir, cfg)
}

fn small_online(mode: RunMode) -> OnlineConfig {
    OnlineConfig {
        mode,
        total_timesteps: 800,
        warmup_steps: 200,
        planner: PlannerConfig {
            n_samples: 32,
            top_k: 8,
            ..PlannerConfig::default()
        },
        sac: SacConfig {
            batch_size: 16,
            critic_hidden: vec![16],
            ..SacConfig::default()
        },
        risk_update_steps: 4,
        risk_batch_size: 16,
        checkpoint_every: 400,
        ..OnlineConfig::default()
    }
}

#[test]
fn step_and_violation_accounting_holds_on_both_environments() {
    for env_name in [HAZARD_WORLD_2D, CLIFF_CORRIDOR] {
        let (dir, _) = offline(env_name);
        let paths = SeedPaths::new(dir.path(), 3);
        let skills = SkillModel::load(&paths.skills()).unwrap();
        let offline_pu = PuDataset::load(&paths.pu()).unwrap();
        for mode in RunMode::ALL {
            let mut env = make_env(env_name).unwrap();
            let (predictor, pu) = if mode.uses_predictor() {
                (Some(RiskPredictor::load(&paths.risk()).unwrap()), Some(offline_pu.clone()))
            } else {
                (None, None)
            };
            let mut checkpoints = Vec::new();
            let mut hook = |step: usize, _: &_, risk: Option<&RiskPredictor>| {
                checkpoints.push((step, risk.is_some()));
                Ok(())
            };
            let run = train_online(
                env.as_mut(),
                OnlineInputs {
                    skills: &skills,
                    predictor,
                    offline_pu: pu,
                },
                &small_online(mode),
                11,
                &mut hook,
            )
            .unwrap();

            assert_eq!(run.env_steps, 800, "{env_name} {mode}");
            let lens: usize = run.log.episodes.iter().map(|e| e.episode_len).sum();
            assert_eq!(lens, run.env_steps, "{env_name} {mode}: every step belongs to one episode");
            let last = run.log.episodes.last().unwrap();
            assert_eq!(last.cum_violations, run.violated_transitions, "{env_name} {mode}");
            assert_eq!(last.cum_violations, run.log.violations());
            // one pair per environment step
            assert_eq!(run.online_pu.len(), run.env_steps, "{env_name} {mode}");
            assert_eq!(run.predictor.is_some(), mode.uses_predictor());
            assert_eq!(run.predictor_updates > 0, mode.uses_predictor());
            assert_eq!(
                checkpoints,
                vec![(400, mode.uses_predictor()), (800, mode.uses_predictor())],
                "{env_name} {mode}"
            );
        }
    }
}

#[test]
fn stages_refuse_demos_from_another_environment() {
    let (dir, cfg) = offline(CLIFF_CORRIDOR);
    let demos = DemoDataset::load(&SeedPaths::new(dir.path(), 3).demos()).unwrap();
    assert_eq!(demos.header.env.name, CLIFF_CORRIDOR);
    let other = PipelineConfig {
        env: HAZARD_WORLD_2D.into(),
        ..cfg
    };
    let err = pipeline::train_skills(&other, dir.path(), 3).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}
