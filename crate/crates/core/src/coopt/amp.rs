//! Adversarial-imitation training: the locomotion vec-env wrapped with a
//! discriminator reward, and the PPO + discriminator update loop.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::CoOptError;
use crate::dataset::MotionDataset;
use crate::disc::{Discriminator, ReplayBuffer};
use crate::env::{EpisodeInfo, Termination, VecEnv};
use crate::ppo::{collect_rollouts, ActorBatch, CriticBatch, Policy, Ppo, PpoError, SampleMode, Transition, VecEnvironment};

pub const TERM_NAMES: [&str; 14] = [
    "imitation",
    "gait",
    "constraint",
    "turning",
    "task",
    "w_imitation",
    "lin_vel",
    "air_time",
    "torque",
    "base_height",
    "alive",
    "slip",
    "clearance",
    "smooth",
];

/// [`VecEnv`] whose reward mixes the discriminator's imitation reward with
/// the task terms. Each step's `H_I`-frame window ends at the post-step
/// frame and is pushed to the replay buffer.
pub struct AmpEnv {
    pub venv: VecEnv,
    pub disc: Discriminator,
    pub replay: ReplayBuffer,
    pub w_imitation: f64,
    history: Vec<Vec<Vec<f64>>>,
    returns: Vec<f64>,
    /// Episodes finished since the last [`AmpEnv::take_finished`].
    finished: Vec<EpisodeInfo>,
}

impl AmpEnv {
    pub fn new(venv: VecEnv, disc: Discriminator, w_imitation: f64) -> Self {
        let h = disc.cfg.window.max(1);
        let history = venv.envs.iter().map(|e| vec![e.disc_obs(); h]).collect();
        let n = venv.len();
        Self {
            replay: ReplayBuffer::new(disc.cfg.replay_capacity),
            venv,
            disc,
            w_imitation,
            history,
            returns: vec![0.0; n],
            finished: Vec::new(),
        }
    }

    pub fn take_finished(&mut self) -> Vec<EpisodeInfo> {
        std::mem::take(&mut self.finished)
    }
}

fn to_batch(cols: Vec<Vec<f64>>) -> DMatrix<f64> {
    let d = cols.first().map_or(0, Vec::len);
    DMatrix::from_fn(d, cols.len(), |r, c| cols[c][r])
}

impl VecEnvironment for AmpEnv {
    fn num_envs(&self) -> usize {
        self.venv.len()
    }

    fn actor_dim(&self) -> usize {
        crate::env::actor_dim(self.venv.envs[0].n_act())
    }

    fn critic_dim(&self) -> usize {
        crate::env::critic_dim(self.venv.envs[0].n_act())
    }

    fn action_dim(&self) -> usize {
        self.venv.envs[0].n_act()
    }

    fn term_names(&self) -> Vec<String> {
        TERM_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn observe(&self) -> (ActorBatch, CriticBatch) {
        let (a, c): (Vec<_>, Vec<_>) = self.venv.envs.iter().map(|e| {
            let (a, c) = e.observe();
            (a.0, c.0)
        }).unzip();
        (ActorBatch(to_batch(a)), CriticBatch(to_batch(c)))
    }

    fn step(&mut self, actions: &DMatrix<f64>) -> Result<Vec<Transition>, PpoError> {
        let acts: Vec<Vec<f64>> = actions.column_iter().map(|c| c.iter().copied().collect()).collect();
        let steps = self.venv.step(&acts).map_err(|e| PpoError::Env(e.to_string()))?;
        let windows: Vec<Vec<f64>> = steps
            .iter()
            .zip(&self.history)
            .map(|(s, h)| h[1..].iter().flatten().chain(&s.outcome.disc_obs).copied().collect())
            .collect();
        let r_i = self.disc.reward(&to_batch(windows.clone()))?;
        let w = self.w_imitation;
        let mut out = Vec::with_capacity(steps.len());
        for (e, (s, window)) in steps.into_iter().zip(windows).enumerate() {
            let o = &s.outcome;
            let t = &o.terms;
            let reward = t.mixed(r_i[e], w);
            let terms = vec![
                r_i[e],
                t.gait(),
                t.constraint(),
                t.turning,
                t.task(),
                w,
                t.lin_vel,
                t.air_time,
                t.torque,
                t.base_height,
                t.alive,
                t.slip,
                t.clearance,
                t.smooth,
            ];
            if !o.sim_error {
                self.replay.push(window);
            }
            let h = &mut self.history[e];
            if s.episode.is_some() {
                let f = self.venv.envs[e].disc_obs();
                h.iter_mut().for_each(|x| x.clone_from(&f));
            } else {
                h.rotate_left(1);
                h.last_mut().expect("window ≥ 1").clone_from(&o.disc_obs);
            }
            self.returns[e] += reward;
            let episode_return = s.episode.as_ref().map(|_| std::mem::take(&mut self.returns[e]));
            if let Some(info) = s.episode {
                self.finished.push(info);
            }
            let timeout = o.status == Termination::Timeout;
            out.push(Transition {
                reward,
                terms,
                done: o.done(),
                timeout,
                terminal_critic: timeout.then(|| o.critic_obs.clone()),
                excluded: o.sim_error,
                episode_return,
            });
        }
        Ok(out)
    }
}

/// One row of the training metrics stream.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct UpdateRecord {
    pub iteration: u32,
    pub update: usize,
    pub w_imitation: f64,
    pub terms: Vec<(String, f64)>,
    pub mean_reward: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub lr: f64,
    pub disc_loss: f64,
    pub disc_penalty: f64,
    pub d_expert: f64,
    pub d_policy: f64,
    pub episodes: usize,
    pub fallen: usize,
    pub mean_episode_return: f64,
    pub mean_terrain_level: f64,
    pub mean_pd_level: f64,
}

impl UpdateRecord {
    pub fn header(&self) -> String {
        let mut h = vec!["iteration", "update", "w_imitation"].into_iter().map(String::from).collect::<Vec<_>>();
        h.extend(self.terms.iter().map(|(n, _)| format!("r_{n}")));
        h.extend(
            [
                "mean_reward",
                "surrogate",
                "value_loss",
                "entropy",
                "kl",
                "clip_fraction",
                "lr",
                "disc_loss",
                "disc_penalty",
                "d_expert",
                "d_policy",
                "episodes",
                "fallen",
                "mean_episode_return",
                "mean_terrain_level",
                "mean_pd_level",
            ]
            .map(String::from),
        );
        h.join(",")
    }

    pub fn row(&self) -> String {
        let mut r = vec![self.iteration.to_string(), self.update.to_string(), self.w_imitation.to_string()];
        r.extend(self.terms.iter().map(|(_, v)| v.to_string()));
        r.extend(
            [
                self.mean_reward,
                self.surrogate,
                self.value_loss,
                self.entropy,
                self.kl,
                self.clip_fraction,
                self.lr,
                self.disc_loss,
                self.disc_penalty,
                self.d_expert,
                self.d_policy,
            ]
            .map(|x| x.to_string()),
        );
        r.push(self.episodes.to_string());
        r.push(self.fallen.to_string());
        r.extend([self.mean_episode_return, self.mean_terrain_level, self.mean_pd_level].map(|x| x.to_string()));
        r.join(",")
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Append-only comma-separated metrics stream.
pub struct MetricsLog {
    out: Box<dyn Write + Send>,
    header_written: bool,
}

impl MetricsLog {
    pub fn new(out: Box<dyn Write + Send>, header_written: bool) -> Self {
        Self { out, header_written }
    }

    /// Opens `path` for appending; the header is written only to a new file.
    pub fn append(path: &std::path::Path) -> std::io::Result<Self> {
        let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(Box::new(f), exists))
    }

    pub fn sink() -> Self {
        Self::new(Box::new(std::io::sink()), true)
    }

    pub fn write(&mut self, r: &UpdateRecord) -> std::io::Result<()> {
        if !self.header_written {
            writeln!(self.out, "{}", r.header())?;
            self.header_written = true;
        }
        writeln!(self.out, "{}", r.row())?;
        self.out.flush()
    }
}

/// PPO on an [`AmpEnv`] with one discriminator phase per update.
pub struct Trainer {
    pub env: AmpEnv,
    pub policy: Policy,
    pub ppo: Ppo,
    pub expert: MotionDataset,
    pub steps_per_update: usize,
    pub iteration: u32,
    pub updates_done: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(env: AmpEnv, policy: Policy, ppo: Ppo, expert: MotionDataset, steps_per_update: usize, seed: u64) -> Result<Self, CoOptError> {
        let frame = env.disc.input_dim() / env.disc.cfg.window.max(1);
        let expert_frame = crate::dataset::disc_obs_dim(expert.meta.dof);
        if frame != expert_frame {
            return Err(CoOptError::Plan(format!(
                "discriminator frames have {frame} features but the dataset gives {expert_frame}"
            )));
        }
        if expert.meta.dof != env.action_dim() {
            return Err(CoOptError::Plan(format!("dataset has {} joints, robot has {}", expert.meta.dof, env.action_dim())));
        }
        Ok(Self {
            env,
            policy,
            ppo,
            expert,
            steps_per_update,
            iteration: 0,
            updates_done: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn update(&mut self) -> Result<UpdateRecord, CoOptError> {
        let gamma = self.ppo.cfg.gamma;
        let buf = collect_rollouts(&mut self.policy, &mut self.env, self.steps_per_update, SampleMode::Stochastic, true, gamma, &mut self.rng)?;
        let m = self.ppo.update(&mut self.policy, &buf, &mut self.rng)?;

        let dc = self.env.disc.cfg.clone();
        let (mut loss, mut pen, mut de, mut dp) = (0.0, 0.0, 0.0, 0.0);
        let k = dc.steps_per_batch.max(1);
        for _ in 0..k {
            let windows = self.expert.sample_windows_with(dc.batch, dc.window, &mut self.rng)?;
            let expert = to_batch(windows.iter().map(|w| w.flat()).collect());
            let policy = self.env.replay.sample(dc.batch, &mut self.rng).ok_or_else(|| CoOptError::Plan("replay buffer is empty".into()))?;
            let p = self.env.disc.update(&expert, &policy)?;
            loss += p.total / k as f64;
            pen += p.penalty / k as f64;
            de += p.mean_expert_score / k as f64;
            dp += p.mean_policy_score / k as f64;
        }

        let eps = self.env.take_finished();
        let mean_ret = if buf.episode_returns.is_empty() {
            0.0
        } else {
            buf.episode_returns.iter().sum::<f64>() / buf.episode_returns.len() as f64
        };
        let levels = |f: fn(&crate::env::LocomotionEnv) -> u32| {
            self.env.venv.envs.iter().map(|e| f(e) as f64).sum::<f64>() / self.env.venv.len() as f64
        };
        let included: Vec<f64> = buf.rewards.iter().zip(&buf.excluded).filter(|(_, x)| !**x).map(|(r, _)| *r).collect();
        let rec = UpdateRecord {
            iteration: self.iteration,
            update: self.updates_done,
            w_imitation: self.env.w_imitation,
            terms: buf.mean_terms(),
            mean_reward: included.iter().sum::<f64>() / included.len().max(1) as f64,
            surrogate: m.surrogate,
            value_loss: m.value_loss,
            entropy: m.entropy,
            kl: m.kl,
            clip_fraction: m.clip_fraction,
            lr: m.lr,
            disc_loss: loss,
            disc_penalty: pen,
            d_expert: de,
            d_policy: dp,
            episodes: eps.len(),
            fallen: eps.iter().filter(|e| e.status == Termination::Fallen).count(),
            mean_episode_return: mean_ret,
            mean_terrain_level: levels(|e| e.curriculum().terrain_level),
            mean_pd_level: levels(|e| e.curriculum().pd_gain_level),
        };
        self.updates_done += 1;
        Ok(rec)
    }
}
