//! Asymmetric actor-critic PPO.
//!
//! The actor reads [`ActorBatch`]es and the critic reads [`CriticBatch`]es, so
//! privileged critic inputs cannot reach the actor by construction.

mod pendulum;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{backward, forward, Activation, Adam, AdamConfig, Checkpoint, NetParams, NnError, RunningNorm};

pub use pendulum::PendulumEnv;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("environment: {0}")]
    Env(String),
    #[error("non-finite {0}; parameters restored")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub adam: AdamConfig,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// Adaptive learning rate target; `0` disables the schedule.
    pub desired_kl: f64,
    pub lr_bounds: [f64; 2],
    pub init_log_std: f64,
    pub log_std_bounds: [f64; 2],
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    pub obs_clip: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 5,
            minibatches: 4,
            adam: AdamConfig::default(),
            value_coef: 1.0,
            entropy_coef: 0.0,
            max_grad_norm: 1.0,
            desired_kl: 0.01,
            lr_bounds: [1e-5, 1e-2],
            init_log_std: 0.0,
            log_std_bounds: [-4.0, 1.0],
            actor_hidden: vec![128, 128],
            critic_hidden: vec![128, 128],
            activation: Activation::Elu,
            obs_clip: 5.0,
        }
    }
}

/// Actor inputs, features × batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorBatch(pub DMatrix<f64>);

/// Critic inputs, features × batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticBatch(pub DMatrix<f64>);

/// Result of one vectorized environment step for a single env.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub reward: f64,
    /// Per-term reward breakdown, labelled by [`VecEnvironment::term_names`].
    pub terms: Vec<f64>,
    pub done: bool,
    /// The episode hit its horizon; its value is bootstrapped.
    pub timeout: bool,
    /// Critic observation of the final state when `timeout` is set.
    pub terminal_critic: Option<Vec<f64>>,
    /// Simulation failure: the transition is left out of the update.
    pub excluded: bool,
    /// Undiscounted return of the episode that just ended.
    pub episode_return: Option<f64>,
}

/// Vectorized environment interface. Finished episodes reset internally.
pub trait VecEnvironment {
    fn num_envs(&self) -> usize;
    fn actor_dim(&self) -> usize;
    fn critic_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn term_names(&self) -> Vec<String>;
    fn observe(&self) -> (ActorBatch, CriticBatch);
    fn step(&mut self, actions: &DMatrix<f64>) -> Result<Vec<Transition>, PpoError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub actor: NetParams<f64>,
    pub critic: NetParams<f64>,
    pub log_std: DMatrix<f64>,
    pub actor_norm: RunningNorm,
    pub critic_norm: RunningNorm,
}

impl Policy {
    pub fn new<R: Rng>(cfg: &PpoConfig, actor_dim: usize, critic_dim: usize, action_dim: usize, rng: &mut R) -> Self {
        let sizes = |i: usize, h: &[usize], o: usize| {
            let mut s = vec![i];
            s.extend(h);
            s.push(o);
            s
        };
        let mut actor_norm = RunningNorm::new(actor_dim);
        actor_norm.clip = Some(cfg.obs_clip);
        let mut critic_norm = RunningNorm::new(critic_dim);
        critic_norm.clip = Some(cfg.obs_clip);
        Self {
            actor: NetParams::new(&sizes(actor_dim, &cfg.actor_hidden, action_dim), cfg.activation, Activation::Identity, 0.01, rng),
            critic: NetParams::new(&sizes(critic_dim, &cfg.critic_hidden, 1), cfg.activation, Activation::Identity, 1.0, rng),
            log_std: DMatrix::from_element(action_dim, 1, cfg.init_log_std),
            actor_norm,
            critic_norm,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.nrows()
    }

    /// Action means for raw actor observations.
    pub fn mean(&self, obs: &ActorBatch) -> Result<DMatrix<f64>, NnError> {
        self.actor.eval(&self.actor_norm.normalize(&obs.0))
    }

    /// Values for raw critic observations.
    pub fn value(&self, obs: &CriticBatch) -> Result<Vec<f64>, NnError> {
        Ok(self.critic.eval(&self.critic_norm.normalize(&obs.0))?.iter().copied().collect())
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.nets.insert(format!("{prefix}actor"), self.actor.clone());
        ck.nets.insert(format!("{prefix}critic"), self.critic.clone());
        ck.vectors.insert(format!("{prefix}log_std"), self.log_std.iter().copied().collect());
        ck.normalizers.insert(format!("{prefix}actor_obs"), self.actor_norm.clone());
        ck.normalizers.insert(format!("{prefix}critic_obs"), self.critic_norm.clone());
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self, PpoError> {
        let get = |k: &str| ck.nets.get(&format!("{prefix}{k}")).cloned().ok_or_else(|| PpoError::Checkpoint(format!("missing net {prefix}{k}")));
        let norm = |k: &str| ck.normalizers.get(&format!("{prefix}{k}")).cloned().ok_or_else(|| PpoError::Checkpoint(format!("missing normalizer {prefix}{k}")));
        let ls = ck
            .vectors
            .get(&format!("{prefix}log_std"))
            .ok_or_else(|| PpoError::Checkpoint(format!("missing {prefix}log_std")))?;
        let p = Self {
            actor: get("actor")?,
            critic: get("critic")?,
            log_std: DMatrix::from_column_slice(ls.len(), 1, ls),
            actor_norm: norm("actor_obs")?,
            critic_norm: norm("critic_obs")?,
        };
        p.actor.validate()?;
        p.critic.validate()?;
        if p.actor.n_out() != p.log_std.nrows() || p.actor.n_in() != p.actor_norm.dim() || p.critic.n_in() != p.critic_norm.dim() {
            return Err(PpoError::Checkpoint("policy tensors have inconsistent sizes".into()));
        }
        Ok(p)
    }
}

fn gaussian_log_prob(a: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    a.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * ln2pi
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    /// Mean actions; no exploration noise.
    Deterministic,
}

/// `steps × n_envs` transitions. Observations are stored normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub steps: usize,
    pub actor_obs: DMatrix<f64>,
    pub critic_obs: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub means: DMatrix<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub excluded: Vec<bool>,
    /// Term rows × transitions.
    pub terms: DMatrix<f64>,
    pub term_names: Vec<String>,
    /// Values of the observation after the last step, per env.
    pub last_values: Vec<f64>,
    pub log_std: Vec<f64>,
    pub episode_returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.n_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean of each reward term over included transitions.
    pub fn mean_terms(&self) -> Vec<(String, f64)> {
        let n = self.excluded.iter().filter(|e| !**e).count().max(1) as f64;
        self.term_names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let s: f64 = (0..self.len()).filter(|&i| !self.excluded[i]).map(|i| self.terms[(k, i)]).sum();
                (name.clone(), s / n)
            })
            .collect()
    }
}

/// Runs `steps` vectorized steps. Column `t · n_envs + e` holds env `e` at step `t`.
pub fn collect_rollouts<E: VecEnvironment + ?Sized, R: Rng>(
    policy: &mut Policy,
    env: &mut E,
    steps: usize,
    mode: SampleMode,
    update_norm: bool,
    gamma: f64,
    rng: &mut R,
) -> Result<RolloutBuffer, PpoError> {
    let (n, da, dc, na) = (env.num_envs(), env.actor_dim(), env.critic_dim(), env.action_dim());
    let term_names = env.term_names();
    let total = n * steps;
    let mut buf = RolloutBuffer {
        n_envs: n,
        steps,
        actor_obs: DMatrix::zeros(da, total),
        critic_obs: DMatrix::zeros(dc, total),
        actions: DMatrix::zeros(na, total),
        means: DMatrix::zeros(na, total),
        log_probs: vec![0.0; total],
        values: vec![0.0; total],
        rewards: vec![0.0; total],
        dones: vec![false; total],
        excluded: vec![false; total],
        terms: DMatrix::zeros(term_names.len(), total),
        term_names,
        last_values: vec![0.0; n],
        log_std: policy.log_std.iter().copied().collect(),
        episode_returns: Vec::new(),
    };
    let log_std: Vec<f64> = policy.log_std.iter().copied().collect();
    for t in 0..steps {
        let (ao, co) = env.observe();
        if update_norm {
            policy.actor_norm.update(&ao.0);
            policy.critic_norm.update(&co.0);
        }
        let an = policy.actor_norm.normalize(&ao.0);
        let cn = policy.critic_norm.normalize(&co.0);
        let mu = policy.actor.eval(&an)?;
        let v = policy.critic.eval(&cn)?;
        let mut act = mu.clone();
        if mode == SampleMode::Stochastic {
            for e in 0..n {
                for k in 0..na {
                    let z: f64 = rng.sample(StandardNormal);
                    act[(k, e)] += log_std[k].exp() * z;
                }
            }
        }
        let trs = env.step(&act)?;
        for (e, tr) in trs.iter().enumerate() {
            let i = t * n + e;
            buf.actor_obs.set_column(i, &an.column(e));
            buf.critic_obs.set_column(i, &cn.column(e));
            buf.actions.set_column(i, &act.column(e));
            buf.means.set_column(i, &mu.column(e));
            buf.log_probs[i] = gaussian_log_prob(act.column(e).as_slice(), mu.column(e).as_slice(), &log_std);
            buf.values[i] = v[(0, e)];
            // excluded transitions come from a failed simulation step and
            // may carry garbage; they must not leak into earlier advantages
            let mut r = if tr.excluded { 0.0 } else { tr.reward };
            if tr.timeout && !tr.excluded {
                if let Some(c) = &tr.terminal_critic {
                    let cm = DMatrix::from_column_slice(c.len(), 1, c);
                    r += gamma * policy.critic.eval(&policy.critic_norm.normalize(&cm))?[(0, 0)];
                }
            }
            buf.rewards[i] = r;
            buf.dones[i] = tr.done || tr.excluded;
            buf.excluded[i] = tr.excluded;
            for (k, x) in tr.terms.iter().enumerate() {
                buf.terms[(k, i)] = *x;
            }
            if let Some(ret) = tr.episode_return {
                buf.episode_returns.push(ret);
            }
        }
    }
    let (_, co) = env.observe();
    buf.last_values = policy.critic.eval(&policy.critic_norm.normalize(&co.0))?.iter().copied().collect();
    Ok(buf)
}

/// Generalized advantage estimation over `steps × n_envs` transitions laid
/// out as in [`RolloutBuffer`]. Returns raw advantages and returns.
pub fn compute_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_values: &[f64],
    n_envs: usize,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let total = rewards.len();
    let steps = total / n_envs.max(1);
    let mut adv = vec![0.0; total];
    for e in 0..n_envs {
        let mut next_adv = 0.0;
        let mut next_v = last_values[e];
        for t in (0..steps).rev() {
            let i = t * n_envs + e;
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_v * live - values[i];
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[i] = next_adv;
            next_v = values[i];
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Zero mean, unit standard deviation over the unmasked entries.
pub fn normalize_advantages(adv: &mut [f64], mask: &[bool]) {
    let idx: Vec<usize> = (0..adv.len()).filter(|&i| !mask[i]).collect();
    if idx.len() < 2 {
        return;
    }
    let n = idx.len() as f64;
    let m = idx.iter().map(|&i| adv[i]).sum::<f64>() / n;
    let s = (idx.iter().map(|&i| (adv[i] - m).powi(2)).sum::<f64>() / n).sqrt();
    for &i in &idx {
        adv[i] = (adv[i] - m) / (s + 1e-8);
    }
}

/// Optimizer state of a [`Policy`].
#[derive(Debug, Clone, PartialEq)]
pub struct Ppo {
    pub cfg: PpoConfig,
    pub actor_opt: Adam<f64>,
    pub critic_opt: Adam<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub lr: f64,
}

/// Clipped-surrogate loss of one sample and its derivative with respect to
/// the new log-probability.
pub fn clipped_surrogate(log_prob: f64, old_log_prob: f64, advantage: f64, clip: f64) -> (f64, f64, bool) {
    let ratio = (log_prob - old_log_prob).exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if clipped < unclipped {
        (-clipped, 0.0, true)
    } else {
        (-unclipped, -advantage * ratio, false)
    }
}

fn grad_norm(gs: &[&DMatrix<f64>]) -> f64 {
    gs.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
}

fn clip_grads(gs: &mut [DMatrix<f64>], max: f64) {
    if max <= 0.0 {
        return;
    }
    let n = grad_norm(&gs.iter().collect::<Vec<_>>());
    if n > max {
        for g in gs.iter_mut() {
            *g *= max / n;
        }
    }
}

impl Ppo {
    pub fn new(cfg: PpoConfig) -> Self {
        Self {
            actor_opt: Adam::new(cfg.adam),
            critic_opt: Adam::new(cfg.adam),
            lr: cfg.adam.lr,
            cfg,
        }
    }

    /// Clipped PPO epochs over shuffled minibatches. Parameters are restored
    /// if any loss or gradient turns non-finite.
    pub fn update<R: Rng>(&mut self, policy: &mut Policy, buf: &RolloutBuffer, rng: &mut R) -> Result<UpdateMetrics, PpoError> {
        let snapshot = (policy.clone(), self.clone());
        let r = self.update_inner(policy, buf, rng);
        if r.is_err() {
            *policy = snapshot.0;
            *self = snapshot.1;
        }
        r
    }

    fn update_inner<R: Rng>(&mut self, policy: &mut Policy, buf: &RolloutBuffer, rng: &mut R) -> Result<UpdateMetrics, PpoError> {
        let cfg = self.cfg.clone();
        let (mut adv, ret) = compute_advantages(&buf.rewards, &buf.values, &buf.dones, &buf.last_values, buf.n_envs, cfg.gamma, cfg.lambda);
        normalize_advantages(&mut adv, &buf.excluded);
        let mut idx: Vec<usize> = (0..buf.len()).filter(|&i| !buf.excluded[i]).collect();
        if idx.is_empty() {
            return Ok(UpdateMetrics {
                lr: self.lr,
                ..Default::default()
            });
        }
        let na = policy.action_dim();
        let mb = cfg.minibatches.clamp(1, idx.len());
        let mut m = UpdateMetrics::default();
        let mut count = 0.0;
        let old_std: Vec<f64> = buf.log_std.iter().map(|l| l.exp()).collect();
        for _ in 0..cfg.epochs {
            idx.shuffle(rng);
            for chunk in idx.chunks(idx.len().div_ceil(mb)) {
                let b = chunk.len();
                let bf = b as f64;
                let sel = |src: &DMatrix<f64>| DMatrix::from_fn(src.nrows(), b, |r, c| src[(r, chunk[c])]);
                let obs = sel(&buf.actor_obs);
                let cobs = sel(&buf.critic_obs);
                let acts = sel(&buf.actions);

                let mut pass = forward(&policy.actor, &obs)?;
                let mu = pass.y.clone();
                let ls: Vec<f64> = policy.log_std.iter().copied().collect();
                let std: Vec<f64> = ls.iter().map(|l| l.exp()).collect();
                let mut dmu = DMatrix::zeros(na, b);
                let mut dls = DMatrix::zeros(na, 1);
                let (mut surr, mut clipped, mut kl) = (0.0, 0.0, 0.0);
                for c in 0..b {
                    let i = chunk[c];
                    let lp = gaussian_log_prob(acts.column(c).as_slice(), mu.column(c).as_slice(), &ls);
                    let (l, dl_dlp, was_clipped) = clipped_surrogate(lp, buf.log_probs[i], adv[i], cfg.clip);
                    surr += l / bf;
                    clipped += f64::from(u8::from(was_clipped)) / bf;
                    for k in 0..na {
                        let z = (acts[(k, c)] - mu[(k, c)]) / std[k];
                        dmu[(k, c)] = dl_dlp * z / std[k] / bf;
                        dls[(k, 0)] += dl_dlp * (z * z - 1.0) / bf;
                        let (m0, s0) = (buf.means[(k, i)], old_std[k]);
                        kl += ((std[k] / s0).ln() + (s0 * s0 + (m0 - mu[(k, c)]).powi(2)) / (2.0 * std[k] * std[k]) - 0.5) / bf;
                    }
                }
                // entropy of a diagonal Gaussian: Σ log σ + const
                let entropy: f64 = ls.iter().sum::<f64>() + 0.5 * na as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());
                for k in 0..na {
                    dls[(k, 0)] -= cfg.entropy_coef;
                }
                let ga = backward(&policy.actor, &mut pass, &dmu)?;

                let mut vpass = forward(&policy.critic, &cobs)?;
                let mut dv = DMatrix::zeros(1, b);
                let mut vloss = 0.0;
                for c in 0..b {
                    let e = vpass.y[(0, c)] - ret[chunk[c]];
                    vloss += e * e / bf;
                    dv[(0, c)] = cfg.value_coef * 2.0 * e / bf;
                }
                let gc = backward(&policy.critic, &mut vpass, &dv)?;
                if !(surr.is_finite() && vloss.is_finite() && kl.is_finite()) {
                    return Err(PpoError::NonFinite("loss"));
                }

                if cfg.desired_kl > 0.0 {
                    if kl > 2.0 * cfg.desired_kl {
                        self.lr = (self.lr / 1.5).max(cfg.lr_bounds[0]);
                    } else if kl < 0.5 * cfg.desired_kl {
                        self.lr = (self.lr * 1.5).min(cfg.lr_bounds[1]);
                    }
                    self.actor_opt.config.lr = self.lr;
                    self.critic_opt.config.lr = self.lr;
                }

                let mut agrads = ga.params;
                agrads.push(dls);
                clip_grads(&mut agrads, cfg.max_grad_norm);
                let mut at = policy.actor.tensors_mut();
                at.push(&mut policy.log_std);
                self.actor_opt.step(&mut at, &agrads)?;
                for l in policy.log_std.iter_mut() {
                    *l = l.clamp(cfg.log_std_bounds[0], cfg.log_std_bounds[1]);
                }
                let mut cgrads = gc.params;
                clip_grads(&mut cgrads, cfg.max_grad_norm);
                self.critic_opt.step(&mut policy.critic.tensors_mut(), &cgrads)?;
                policy.actor.validate()?;
                policy.critic.validate()?;

                m.surrogate += surr;
                m.value_loss += vloss;
                m.entropy += entropy;
                m.kl += kl;
                m.clip_fraction += clipped;
                count += 1.0;
            }
        }
        m.surrogate /= count;
        m.value_loss /= count;
        m.entropy /= count;
        m.kl /= count;
        m.clip_fraction /= count;
        m.lr = self.lr;
        Ok(m)
    }
}

#[cfg(test)]
mod tests;
