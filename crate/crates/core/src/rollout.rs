//! Deterministic whole-episode rollouts over independent environments.
//!
//! Used by the dataset export step and the evaluation protocols. Each
//! environment runs exactly one episode; envs step in parallel and results
//! come back in environment order.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::{env_seed, EnvConfig, EnvError, LocomotionEnv, Termination, TerrainBank};
use crate::nn::NnError;
use crate::physics::log::{channel_names, state_channels, TrajectoryLog};
use crate::physics::Model;
use crate::ppo::{ActorBatch, Policy};

/// Anything that maps a batch of raw actor observations to actions.
pub trait Controller: Sync {
    fn act(&self, obs: &ActorBatch) -> Result<DMatrix<f64>, NnError>;
}

impl Controller for Policy {
    fn act(&self, obs: &ActorBatch) -> Result<DMatrix<f64>, NnError> {
        self.mean(obs)
    }
}

/// Always outputs zero actions: holds the default pose under PD control,
/// or applies no torque in direct-torque mode.
pub struct ZeroController(pub usize);

impl Controller for ZeroController {
    fn act(&self, obs: &ActorBatch) -> Result<DMatrix<f64>, NnError> {
        Ok(DMatrix::zeros(self.0, obs.0.ncols()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RolloutOptions {
    /// Keep full state logs and applied torques.
    pub log: bool,
    /// Planar velocity kick applied before every control step (m/s).
    pub push_magnitude: f64,
    pub push_seed: u64,
    /// Episode index of the first env; push streams are keyed by episode.
    pub first_episode: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    /// `Timeout` means the episode reached its horizon.
    pub status: Termination,
    pub steps: usize,
    pub cmd: [f64; 2],
    /// World yaw rate after each control step.
    pub yaw_rates: Vec<f64>,
    /// Discriminator frames, starting with the initial state.
    pub disc_frames: Vec<Vec<f64>>,
    /// State log starting with the initial state, when requested.
    pub log: Option<TrajectoryLog>,
    /// Torques of the last substep of each control step, when requested.
    pub torques: Vec<Vec<f64>>,
}

impl EpisodeTrace {
    pub fn survived(&self) -> bool {
        self.status == Termination::Timeout
    }

    /// Mean absolute yaw-rate tracking error over the episode.
    pub fn mean_yaw_error(&self) -> f64 {
        if self.yaw_rates.is_empty() {
            return 0.0;
        }
        self.yaw_rates.iter().map(|w| (w - self.cmd[1]).abs()).sum::<f64>() / self.yaw_rates.len() as f64
    }
}

/// Fresh environments for episode indices `episodes`, seeded from `seed` and
/// the index. When `commands` is non-empty, episode `i` uses
/// `commands[i % len]`.
pub fn make_envs(
    cfg: &Arc<EnvConfig>,
    model: &Arc<Model>,
    bank: &Arc<TerrainBank>,
    episodes: std::ops::Range<usize>,
    seed: u64,
    commands: &[[f64; 2]],
) -> Result<Vec<LocomotionEnv>, EnvError> {
    episodes
        .map(|i| {
            let mut e = LocomotionEnv::new(cfg.clone(), model.clone(), bank.clone(), env_seed(seed, i))?;
            if !commands.is_empty() {
                let c = commands[i % commands.len()];
                e.command_override = Some(c);
                e.set_command(c);
            }
            Ok(e)
        })
        .collect()
}

/// Runs one episode per env until it falls or times out.
pub fn run_episodes<C: Controller + ?Sized>(
    ctrl: &C,
    envs: &mut [LocomotionEnv],
    opts: RolloutOptions,
) -> Result<Vec<EpisodeTrace>, RolloutError> {
    let mut traces: Vec<EpisodeTrace> = envs
        .iter()
        .map(|e| {
            let log = opts.log.then(|| {
                let names: Vec<String> = e.sim().model.joints.iter().map(|j| j.name.clone()).collect();
                let mut l = TrajectoryLog::new(e.config().control_dt(), channel_names(&names));
                l.push(state_channels(e.sim(), e.state()));
                l
            });
            EpisodeTrace {
                status: Termination::Alive,
                steps: 0,
                cmd: e.command(),
                yaw_rates: Vec::new(),
                disc_frames: vec![e.disc_obs()],
                log,
                torques: Vec::new(),
            }
        })
        .collect();
    let mut push_rngs: Vec<ChaCha8Rng> = (0..envs.len()).map(|i| ChaCha8Rng::seed_from_u64(env_seed(opts.push_seed, opts.first_episode + i))).collect();
    let max_steps = envs
        .iter()
        .map(|e| (e.config().termination.episode_length_s / e.config().control_dt()).ceil() as usize + 1)
        .max()
        .unwrap_or(0);
    let mut alive = vec![true; envs.len()];
    for _ in 0..max_steps {
        let active: Vec<usize> = (0..envs.len()).filter(|&i| alive[i]).collect();
        if active.is_empty() {
            break;
        }
        let obs: Vec<Vec<f64>> = active.iter().map(|&i| envs[i].observe().0 .0).collect();
        let obs = DMatrix::from_fn(obs[0].len(), obs.len(), |r, c| obs[c][r]);
        let act = ctrl.act(&ActorBatch(obs))?;
        let mut col = vec![usize::MAX; envs.len()];
        for (c, &i) in active.iter().enumerate() {
            col[i] = c;
        }
        let results: Vec<Result<bool, EnvError>> = envs
            .par_iter_mut()
            .zip(traces.par_iter_mut())
            .zip(push_rngs.par_iter_mut())
            .zip(col.par_iter())
            .filter(|(_, c)| **c != usize::MAX)
            .map(|(((env, trace), rng), &c)| {
                if opts.push_magnitude > 0.0 {
                    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    env.push([opts.push_magnitude * phi.cos(), opts.push_magnitude * phi.sin()]);
                }
                let a: Vec<f64> = act.column(c).iter().copied().collect();
                let out = env.step(&a)?;
                trace.steps += 1;
                trace.yaw_rates.push(env.state().base_ang_vel.z);
                trace.disc_frames.push(out.disc_obs.clone());
                if let Some(l) = trace.log.as_mut() {
                    l.push(state_channels(env.sim(), env.state()));
                    trace.torques.push(out.torques.clone());
                }
                if out.done() {
                    trace.status = out.status;
                }
                Ok(out.done())
            })
            .collect();
        for (&i, r) in active.iter().zip(results) {
            if r? {
                alive[i] = false;
            }
        }
    }
    Ok(traces)
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variant::Variant;

    fn setup(len: f64) -> (Arc<EnvConfig>, Arc<Model>, Arc<TerrainBank>) {
        let mut cfg = EnvConfig::default();
        cfg.curriculum.enabled = false;
        cfg.sim.terrain_variants = 1;
        cfg.termination.episode_length_s = len;
        let cfg = Arc::new(cfg);
        let bank = Arc::new(TerrainBank::for_config(&cfg).unwrap());
        (cfg, Arc::new(Variant::Solo9.model()), bank)
    }

    #[test]
    fn standing_episodes_time_out_with_full_logs() {
        let (cfg, m, bank) = setup(0.5);
        let mut envs = make_envs(&cfg, &m, &bank, 0..3, 1, &[[0.2, -0.1]]).unwrap();
        let tr = run_episodes(&ZeroController(9), &mut envs, RolloutOptions { log: true, ..Default::default() }).unwrap();
        for t in &tr {
            assert!(t.survived());
            assert_eq!(t.steps, 25);
            assert_eq!(t.cmd, [0.2, -0.1]);
            assert_eq!(t.disc_frames.len(), 26);
            assert_eq!(t.log.as_ref().unwrap().frames.len(), 26);
            assert_eq!(t.torques.len(), 25);
        }
    }

    #[test]
    fn rollouts_are_deterministic_and_pushes_matter() {
        let (cfg, m, bank) = setup(1.0);
        let run = |mag: f64| {
            let mut envs = make_envs(&cfg, &m, &bank, 0..2, 7, &[]).unwrap();
            let o = RolloutOptions { push_magnitude: mag, push_seed: 3, ..Default::default() };
            run_episodes(&ZeroController(9), &mut envs, o).unwrap()
        };
        let a = run(0.0);
        let b = run(0.0);
        assert_eq!(a.iter().map(|t| t.disc_frames.clone()).collect::<Vec<_>>(), b.iter().map(|t| t.disc_frames.clone()).collect::<Vec<_>>());
        let p = run(0.3);
        assert_ne!(p[0].disc_frames[1], a[0].disc_frames[1]);
    }
}
