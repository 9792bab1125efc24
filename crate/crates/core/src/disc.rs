//! Least-squares adversarial discriminator over short state windows.
//!
//! Expert windows are labelled `+1`, policy windows `-1`. The loss is
//!
//! ```text
//! L = E_e[(D − 1)²] + E_p[(D + 1)²] + λ_gp · E_e[‖∇ₓ D‖²]
//! ```
//!
//! and the imitation reward maps a score to `max(0, 1 − ¼ (D − 1)²)`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Adam, AdamConfig, NetParams, NnError, RunningNorm, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMap {
    /// `max(0, 1 − ¼ (D − 1)²)`
    #[default]
    Lsgan,
    /// `−ln(1 − sigmoid(D))`
    Gail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    pub lambda_gp: f64,
    /// Frames per window.
    pub window: usize,
    pub batch: usize,
    pub replay_capacity: usize,
    /// Discriminator steps per policy batch.
    pub steps_per_batch: usize,
    pub reward_map: RewardMap,
    /// Normalized inputs are clipped to this magnitude.
    pub input_clip: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            lambda_gp: 10.0,
            window: crate::dataset::DEFAULT_WINDOW,
            batch: 256,
            replay_capacity: 100_000,
            steps_per_batch: 10,
            reward_map: RewardMap::Lsgan,
            input_clip: 5.0,
        }
    }
}

pub fn imitation_reward(d: f64) -> f64 {
    (1.0 - 0.25 * (d - 1.0) * (d - 1.0)).max(0.0)
}

pub fn gail_reward(d: f64) -> f64 {
    // −ln(1 − σ(d)) = ln(1 + eᵈ), written to stay finite for large d
    if d > 30.0 {
        d
    } else {
        d.exp().ln_1p()
    }
}

pub fn map_reward(map: RewardMap, d: f64) -> f64 {
    match map {
        RewardMap::Lsgan => imitation_reward(d),
        RewardMap::Gail => gail_reward(d),
    }
}

/// Merges a batch (features × samples) into running statistics.
pub fn update_normalizer(stats: &mut RunningNorm, batch: &DMatrix<f64>) {
    stats.update(batch);
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub expert: f64,
    pub policy: f64,
    pub penalty: f64,
    pub total: f64,
    pub mean_expert_score: f64,
    pub mean_policy_score: f64,
}

/// LSGAN loss with expert-side gradient penalty on already normalized inputs
/// (features × batch). Returns the loss and parameter gradients in tensor
/// order.
pub fn discriminator_loss(
    net: &NetParams<f64>,
    expert: &DMatrix<f64>,
    policy: &DMatrix<f64>,
    lambda_gp: f64,
) -> Result<(LossParts, Vec<DMatrix<f64>>), NnError> {
    let (ne, np) = (expert.ncols(), policy.ncols());
    if ne == 0 || np == 0 {
        return Err(NnError::Shape("discriminator batch is empty".into()));
    }
    if expert.nrows() != net.n_in() || policy.nrows() != net.n_in() || net.n_out() != 1 {
        return Err(NnError::Shape(format!(
            "discriminator expects {} inputs and one output, got batches of {} / {}",
            net.n_in(),
            expert.nrows(),
            policy.nrows()
        )));
    }
    let n = ne + np;
    let mut x = DMatrix::zeros(net.n_in(), n);
    x.columns_mut(0, ne).copy_from(expert);
    x.columns_mut(ne, np).copy_from(policy);
    let target = DMatrix::from_fn(1, n, |_, c| if c < ne { 1.0 } else { -1.0 });
    let weight = DMatrix::from_fn(1, n, |_, c| if c < ne { 1.0 / ne as f64 } else { 1.0 / np as f64 });
    let gp_weight = DMatrix::from_fn(1, n, |_, c| if c < ne { lambda_gp / ne as f64 } else { 0.0 });

    let mut tape = Tape::new();
    let xi = tape.input(x);
    let vars = net.record(&mut tape, xi, 0)?;
    let t = tape.input(target);
    let w = tape.input(weight);
    let err = tape.sub(vars.out, t)?;
    let sq = tape.square(err);
    let weighted = tape.mul(sq, w)?;
    let fit = tape.sum(weighted);
    let mut total = fit;
    let mut penalty = 0.0;
    if lambda_gp != 0.0 {
        let ones = tape.input(DMatrix::from_element(1, n, 1.0));
        let g = net.record_input_gradient(&mut tape, &vars, ones)?;
        let g2 = tape.square(g);
        let per = tape.sum_rows(g2);
        let gw = tape.input(gp_weight);
        let pw = tape.mul(per, gw)?;
        let pen = tape.sum(pw);
        penalty = tape.value(pen)[(0, 0)];
        total = tape.add(fit, pen)?;
    }
    let scores = tape.value(vars.out).clone();
    let sqv = tape.value(sq).clone();
    let loss = tape.value(total)[(0, 0)];
    if !loss.is_finite() {
        return Err(NnError::NonFinite("discriminator loss"));
    }
    let grads = tape.backward(total, DMatrix::from_element(1, 1, 1.0))?;
    let parts = LossParts {
        expert: (0..ne).map(|c| sqv[(0, c)]).sum::<f64>() / ne as f64,
        policy: (ne..n).map(|c| sqv[(0, c)]).sum::<f64>() / np as f64,
        penalty,
        total: loss,
        mean_expert_score: (0..ne).map(|c| scores[(0, c)]).sum::<f64>() / ne as f64,
        mean_policy_score: (ne..n).map(|c| scores[(0, c)]).sum::<f64>() / np as f64,
    };
    Ok((parts, net.collect_grads(&grads, 0)))
}

/// Fixed-capacity ring buffer of flattened policy windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Vec<f64>>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            data: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>) {
        if self.data.len() < self.capacity {
            self.data.push(x);
        } else {
            self.data[self.next] = x;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `n` uniform draws with replacement as a features × n matrix.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Option<DMatrix<f64>> {
        if self.data.is_empty() {
            return None;
        }
        let d = self.data[0].len();
        let mut m = DMatrix::zeros(d, n);
        for c in 0..n {
            let k = rng.random_range(0..self.data.len());
            m.column_mut(c).copy_from_slice(&self.data[k]);
        }
        Some(m)
    }
}

/// Network, optimizer and input statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub cfg: DiscConfig,
    pub net: NetParams<f64>,
    pub opt: Adam<f64>,
    pub norm: RunningNorm,
}

impl Discriminator {
    /// `frame_dim` features per frame, `cfg.window` frames per input.
    pub fn new(cfg: DiscConfig, frame_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = frame_dim * cfg.window.max(1);
        let mut sizes = vec![n_in];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let net = NetParams::new(&sizes, Activation::Relu, Activation::Identity, 1.0, &mut rng);
        let mut norm = RunningNorm::new(n_in);
        norm.clip = Some(cfg.input_clip);
        Self {
            opt: Adam::new(cfg.adam),
            cfg,
            net,
            norm,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.n_in()
    }

    /// Raw scores `D(x)` for raw windows (features × batch).
    pub fn score(&self, x: &DMatrix<f64>) -> Result<Vec<f64>, NnError> {
        let y = self.net.eval(&self.norm.normalize(x))?;
        Ok(y.iter().copied().collect())
    }

    pub fn reward(&self, x: &DMatrix<f64>) -> Result<Vec<f64>, NnError> {
        Ok(self.score(x)?.into_iter().map(|d| map_reward(self.cfg.reward_map, d)).collect())
    }

    /// One optimizer step on raw expert and policy windows. Both batches
    /// update the shared input statistics before normalization.
    pub fn update(&mut self, expert: &DMatrix<f64>, policy: &DMatrix<f64>) -> Result<LossParts, NnError> {
        update_normalizer(&mut self.norm, expert);
        update_normalizer(&mut self.norm, policy);
        let (parts, grads) = discriminator_loss(
            &self.net,
            &self.norm.normalize(expert),
            &self.norm.normalize(policy),
            self.cfg.lambda_gp,
        )?;
        let mut t = self.net.tensors_mut();
        self.opt.step(&mut t, &grads)?;
        Ok(parts)
    }
}
