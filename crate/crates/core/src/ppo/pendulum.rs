//! Torque-limited inverted pendulum, a small fixture for checking the trainer.
//!
//! `θ = 0` is upright. Reward per step is `1 − (θ / θ_max)² − 0.01 θ̇²`
//! and the episode ends when `|θ| > θ_max` or after `horizon` steps.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ActorBatch, CriticBatch, PpoError, Transition, VecEnvironment};

const G_OVER_L: f64 = 10.0;
const MAX_ACCEL: f64 = 15.0;
const DAMPING: f64 = 0.1;
const DT: f64 = 0.05;
const THETA_MAX: f64 = 1.0;

pub struct PendulumEnv {
    theta: Vec<f64>,
    omega: Vec<f64>,
    steps: Vec<usize>,
    returns: Vec<f64>,
    pub horizon: usize,
    rng: ChaCha8Rng,
}

impl PendulumEnv {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut e = Self {
            theta: vec![0.0; n],
            omega: vec![0.0; n],
            steps: vec![0; n],
            returns: vec![0.0; n],
            horizon: 200,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        for i in 0..n {
            e.reset(i);
        }
        e
    }

    fn reset(&mut self, i: usize) {
        self.theta[i] = self.rng.random_range(-0.4..0.4);
        self.omega[i] = self.rng.random_range(-0.5..0.5);
        self.steps[i] = 0;
        self.returns[i] = 0.0;
    }

    fn obs(&self, i: usize) -> [f64; 3] {
        [self.theta[i].sin(), self.theta[i].cos(), self.omega[i]]
    }
}

impl VecEnvironment for PendulumEnv {
    fn num_envs(&self) -> usize {
        self.theta.len()
    }

    fn actor_dim(&self) -> usize {
        3
    }

    fn critic_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn term_names(&self) -> Vec<String> {
        vec!["upright".into()]
    }

    fn observe(&self) -> (ActorBatch, CriticBatch) {
        let m = DMatrix::from_fn(3, self.num_envs(), |r, c| self.obs(c)[r]);
        (ActorBatch(m.clone()), CriticBatch(m))
    }

    fn step(&mut self, actions: &DMatrix<f64>) -> Result<Vec<Transition>, PpoError> {
        if actions.shape() != (1, self.num_envs()) {
            return Err(PpoError::Env(format!("pendulum expects 1 × {} actions", self.num_envs())));
        }
        let mut out = Vec::with_capacity(self.num_envs());
        for i in 0..self.num_envs() {
            let u = actions[(0, i)].clamp(-1.0, 1.0);
            let acc = G_OVER_L * self.theta[i].sin() - DAMPING * self.omega[i] + MAX_ACCEL * u;
            self.omega[i] += DT * acc;
            self.theta[i] += DT * self.omega[i];
            self.steps[i] += 1;
            let fell = self.theta[i].abs() > THETA_MAX;
            let r = if fell {
                0.0
            } else {
                1.0 - (self.theta[i] / THETA_MAX).powi(2) - 0.01 * self.omega[i] * self.omega[i]
            };
            self.returns[i] += r;
            let timeout = !fell && self.steps[i] >= self.horizon;
            let done = fell || timeout;
            let terminal_critic = timeout.then(|| self.obs(i).to_vec());
            let episode_return = done.then_some(self.returns[i]);
            if done {
                self.reset(i);
            }
            out.push(Transition {
                reward: r,
                terms: vec![r],
                done,
                timeout,
                terminal_critic,
                excluded: false,
                episode_return,
            });
        }
        Ok(out)
    }
}
