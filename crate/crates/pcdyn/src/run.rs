//! Running one model at one ε, and the worker pool.

use pcdyn_core::integrate::{
    integrate_dae, integrate_dae_on_manifold, integrate_model, ShootingConfig, ShootingReport, Termination, Trajectory,
};
use pcdyn_core::manifold::FastSlowSystem;
use pcdyn_core::{DaeState, Vec3};

use crate::config::{ConfigError, ModelKind, Scenario, ThirdOrderMode};
use crate::Failure;

pub struct RunResult {
    pub model: ModelKind,
    pub epsilon: f64,
    pub trajectory: Trajectory,
    pub shooting: Option<ShootingReport>,
}

impl RunResult {
    pub fn termination(&self) -> Termination {
        self.trajectory.termination
    }
}

pub fn run_model(sc: &Scenario, model: ModelKind, eps: f64) -> Result<RunResult, Failure> {
    let cfg = &sc.config;
    let reg = cfg.regularization(&sc.initial)?;
    let guard = cfg.guard(&reg)?;
    let stepper = cfg.stepper.to_config();
    let (trajectory, shooting) = match model.second_order() {
        Some(m) => (integrate_model(m, &sc.initial, &sc.system, eps, cfg.t_end, &stepper, &guard)?, None),
        None => {
            let fs = FastSlowSystem::new(sc.system.clone(), eps, reg)?;
            let third = &cfg.third_order;
            match third.mode {
                ThirdOrderMode::OnManifold => {
                    let shoot = ShootingConfig {
                        max_iterations: third.shooting_iterations,
                        tolerance: third.shooting_tolerance,
                        ..ShootingConfig::default()
                    };
                    let (t, rep) = integrate_dae_on_manifold(&sc.initial, &fs, cfg.t_end, &stepper, &guard, &shoot)?;
                    (t, Some(rep))
                }
                ThirdOrderMode::Forward => {
                    let init = fs.manifold_init(&sc.initial.r, &sc.initial.u, third.refine_steps)?;
                    let s0 = DaeState::from_phase(&sc.initial, init.y + Vec3::from_array(third.y_offset));
                    (integrate_dae(&s0, &fs, cfg.t_end, &stepper, &guard, third.runaway_threshold)?, None)
                }
            }
        }
    };
    Ok(RunResult { model, epsilon: eps, trajectory, shooting })
}

/// Worker pool sized by `PCDYN_THREADS` (unset means one per core).
pub fn thread_pool() -> Result<rayon::ThreadPool, Failure> {
    let threads = match std::env::var("PCDYN_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                return Err(ConfigError::Invalid {
                    field: "PCDYN_THREADS".into(),
                    message: format!("expected a positive integer, got `{v}`"),
                }
                .into())
            }
        },
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Other(format!("cannot start worker pool: {e}")))
}

/// Runs every `(model, ε)` job on the pool; results come back in job order
/// whatever the scheduling.
pub fn run_jobs(pool: &rayon::ThreadPool, sc: &Scenario, jobs: &[(ModelKind, f64)]) -> Result<Vec<RunResult>, Failure> {
    use rayon::prelude::*;
    pool.install(|| jobs.par_iter().map(|(m, e)| run_model(sc, *m, *e)).collect())
}
